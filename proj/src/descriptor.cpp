#include "rforksim/descriptor.hpp"

#include <cstring>
#include <iomanip>
#include <ostream>

#include "rforksim/wire.hpp"

namespace rfork {

std::uint64_t ContainerDescriptor::pte_count() const {
  std::uint64_t n = 0;
  for (const auto& v : vmas) n += v.ptes.size();
  return n;
}

std::size_t serialized_size(const ContainerDescriptor& d) {
  std::size_t n = kHeaderFixedBytes + d.isolation.size();
  n += d.ancestors.size() * kAncestorWireBytes;
  for (const auto& v : d.vmas) n += kVmaFixedWireBytes + v.ptes.size() * kPteWireBytes;
  for (const auto& f : d.files) n += 18 + f.path.size();
  return n;
}

std::vector<std::uint8_t> serialize(const ContainerDescriptor& d) {
  ByteWriter w;
  w.u64(kDescriptorMagic);
  w.u16(kDescriptorVersion);
  w.u64(d.handle_id);
  w.u8(static_cast<std::uint8_t>(d.ancestors.size()));
  w.u32(static_cast<std::uint32_t>(d.vmas.size()));
  w.u32(static_cast<std::uint32_t>(d.files.size()));
  w.u32(static_cast<std::uint32_t>(d.isolation.size()));
  w.bytes(d.isolation.data(), d.isolation.size());
  w.bytes(d.registers.data(), d.registers.size());
  for (const auto& a : d.ancestors) {
    w.u32(a.node.addr);
    w.u64(a.handle_id);
  }
  for (const auto& v : d.vmas) {
    w.u32(v.vma_id);
    w.u64(v.start_va);
    w.u64(v.end_va);
    w.u8(v.prot);
    w.u8(v.flags);
    w.u32(v.dc_key.nic_num);
    w.u64(v.dc_key.user_key);
    w.u32(static_cast<std::uint32_t>(v.ptes.size()));
    for (const auto& [vpn, pte] : v.ptes) {
      w.u64(vpn);
      w.u64(pte.raw());
    }
  }
  for (const auto& f : d.files) {
    w.u32(f.fd);
    w.u32(f.flags);
    w.u64(f.offset);
    w.u16(static_cast<std::uint16_t>(f.path.size()));
    w.bytes(f.path.data(), f.path.size());
  }
  return w.take();
}

namespace {

Result<ContainerDescriptor> malformed(std::size_t offset) {
  return Result<ContainerDescriptor>(Err::MalformedDescriptor, offset);
}

}  // namespace

Result<ContainerDescriptor> deserialize(const std::uint8_t* data,
                                        std::size_t size) {
  ByteReader r(data, size);
  if (!r.need(8)) return malformed(r.offset());
  if (r.u64() != kDescriptorMagic) return malformed(0);
  if (!r.need(2)) return malformed(r.offset());
  if (r.u16() != kDescriptorVersion) return malformed(8);
  if (!r.need(8 + 1 + 4 + 4 + 4)) return malformed(r.offset());

  ContainerDescriptor d;
  d.handle_id = r.u64();
  const std::uint8_t ancestor_count = r.u8();
  const std::uint32_t vma_count = r.u32();
  const std::uint32_t file_count = r.u32();
  const std::uint32_t isolation_len = r.u32();

  if (ancestor_count > kMaxAncestors) return malformed(18);
  if (!r.need(isolation_len)) return malformed(r.offset());
  d.isolation.resize(isolation_len);
  if (isolation_len) r.bytes(d.isolation.data(), isolation_len);
  if (!r.need(kRegisterBytes)) return malformed(r.offset());
  r.bytes(d.registers.data(), kRegisterBytes);

  d.ancestors.reserve(ancestor_count);
  for (std::uint32_t i = 0; i < ancestor_count; ++i) {
    if (!r.need(kAncestorWireBytes)) return malformed(r.offset());
    AncestorEntry a;
    a.node.addr = r.u32();
    a.handle_id = r.u64();
    d.ancestors.push_back(a);
  }
  d.vmas.reserve(vma_count);
  for (std::uint32_t i = 0; i < vma_count; ++i) {
    if (!r.need(kVmaFixedWireBytes)) return malformed(r.offset());
    DescVma v;
    v.vma_id = r.u32();
    v.start_va = r.u64();
    v.end_va = r.u64();
    v.prot = r.u8();
    v.flags = r.u8();
    v.dc_key.nic_num = r.u32();
    v.dc_key.user_key = r.u64();
    const std::uint32_t pte_count = r.u32();
    if (!r.need(static_cast<std::size_t>(pte_count) * kPteWireBytes))
      return malformed(r.offset());
    v.ptes.reserve(pte_count);
    for (std::uint32_t p = 0; p < pte_count; ++p) {
      const std::uint64_t vpn = r.u64();
      v.ptes.emplace_back(vpn, Pte::from_raw(r.u64()));
    }
    d.vmas.push_back(std::move(v));
  }
  for (std::uint32_t i = 0; i < file_count; ++i) {
    if (!r.need(18)) return malformed(r.offset());
    FileEntry f;
    f.fd = r.u32();
    f.flags = r.u32();
    f.offset = r.u64();
    const std::uint16_t len = r.u16();
    if (!r.need(len)) return malformed(r.offset());
    f.path.resize(len);
    if (len) r.bytes(f.path.data(), len);
    d.files.push_back(std::move(f));
  }
  if (r.remaining() != 0) return malformed(r.offset());
  return d;
}

Result<ContainerDescriptor> deserialize(const std::vector<std::uint8_t>& bytes) {
  return deserialize(bytes.data(), bytes.size());
}

void dump_descriptor(const ContainerDescriptor& d, std::ostream& out) {
  out << "descriptor handle_id=" << d.handle_id
      << " ancestors=" << d.ancestors.size() << " vmas=" << d.vmas.size()
      << " files=" << d.files.size() << " isolation=" << d.isolation.size()
      << "B serialized=" << serialized_size(d) << "B\n";
  for (std::size_t i = 0; i < d.ancestors.size(); ++i) {
    out << "  ancestor[" << (i + 1) << "] node=" << d.ancestors[i].node.addr
        << " handle=" << d.ancestors[i].handle_id << "\n";
  }
  for (const auto& v : d.vmas) {
    out << "  vma " << v.vma_id << " [0x" << std::hex << v.start_va << ",0x"
        << v.end_va << std::dec << ") prot=" << int(v.prot)
        << " flags=" << int(v.flags) << " key=(" << v.dc_key.nic_num << ","
        << v.dc_key.user_key << ") ptes=" << v.ptes.size() << "\n";
    std::size_t shown = 0;
    for (const auto& [vpn, pte] : v.ptes) {
      if (shown++ == 8) {
        out << "    ...\n";
        break;
      }
      out << "    vpn=0x" << std::hex << vpn << std::dec
          << (pte.present() ? " present" : "")
          << (pte.is_remote() ? " remote" : "") << " owner=" << int(pte.owner())
          << " pfn=" << pte.pfn() << "\n";
    }
  }
  for (const auto& f : d.files) {
    out << "  file fd=" << f.fd << " flags=" << f.flags
        << " offset=" << f.offset << " path=" << f.path << "\n";
  }
}

// ---------------------------------------------------------------------------
// DescriptorHost

const DescriptorHost::Record* DescriptorHost::find(std::uint64_t handle) const {
  auto it = records_.find(handle);
  return it == records_.end() ? nullptr : &it->second;
}

DescriptorHost::Record* DescriptorHost::find(std::uint64_t handle) {
  auto it = records_.find(handle);
  return it == records_.end() ? nullptr : &it->second;
}

DescriptorId DescriptorHost::publish(Fabric& fabric, TaskClock& t, NodeId node,
                                     ContainerDescriptor& desc,
                                     const DcKey& desc_target,
                                     std::vector<std::vector<DcKey>> inherited,
                                     std::uint64_t container_id) {
  Record rec;
  rec.handle = next_handle_++;
  rec.auth_key = fabric.rng().next();
  desc.handle_id = rec.handle;

  const std::vector<std::uint8_t> bytes = serialize(desc);
  rec.pin_len = bytes.size();
  rec.pin_pages = (bytes.size() + kPageSize - 1) / kPageSize;
  Node& n = fabric.node(node);
  rec.pin_pfn = n.alloc_frames(rec.pin_pages);
  std::uint64_t off = 0;
  for (std::uint64_t i = 0; i < rec.pin_pages; ++i) {
    Frame* f = n.frame(rec.pin_pfn + i);
    const std::uint64_t take = std::min<std::uint64_t>(kPageSize, bytes.size() - off);
    std::memcpy(f->data(), bytes.data() + off, take);
    off += take;
  }
  // The metric counts the payload, not the page rounding.
  n.add_metric(t.now, static_cast<std::int64_t>(rec.pin_len) -
                          static_cast<std::int64_t>(rec.pin_pages * kPageSize));

  rec.desc_key = desc_target;
  fabric.set_target_ranges(node, desc_target, {{rec.pin_pfn, rec.pin_pages}});
  for (const auto& v : desc.vmas) {
    rec.vma_ids.push_back(v.vma_id);
    rec.vma_keys.push_back(v.dc_key);
    rec.vma_revoked.push_back(false);
  }
  rec.inherited_keys = std::move(inherited);
  rec.container_id = container_id;
  rec.published_at = t.now;

  DescriptorId id{node, rec.handle, rec.auth_key};
  records_.emplace(rec.handle, std::move(rec));
  return id;
}

Result<void> DescriptorHost::reclaim(Fabric& fabric, TaskClock& t, NodeId node,
                                     const DescriptorId& id) {
  auto it = records_.find(id.handle_id);
  if (it == records_.end()) return Result<void>(Err::NoSuchDescriptor);
  Record& rec = it->second;
  if (rec.auth_key != id.key) return Result<void>(Err::AuthFailed);

  fabric.destroy_dc_target(t, node, rec.desc_key);
  for (std::size_t i = 0; i < rec.vma_keys.size(); ++i) {
    if (!rec.vma_revoked[i]) fabric.destroy_dc_target(t, node, rec.vma_keys[i]);
  }
  Node& n = fabric.node(node);
  for (std::uint64_t i = 0; i < rec.pin_pages; ++i)
    n.release_frame(rec.pin_pfn + i);
  n.add_metric(t.now, static_cast<std::int64_t>(rec.pin_pages * kPageSize) -
                          static_cast<std::int64_t>(rec.pin_len));
  records_.erase(it);
  return Result<void>();
}

void DescriptorHost::install_auth_handler(Fabric& fabric, NodeId node) {
  fabric.node(node).register_handler(
      kAuthHandlerId, [this](const std::any& request) -> HandlerOutcome {
        const auto& req = std::any_cast<const AuthRequest&>(request);
        AuthReply reply;
        const Record* rec = find(req.handle);
        if (!rec) {
          reply.err = Err::NoSuchDescriptor;
        } else if (rec->auth_key != req.key) {
          reply.err = Err::AuthFailed;
        } else {
          reply.pin_pfn = rec->pin_pfn;
          reply.pin_len = rec->pin_len;
          reply.desc_key = rec->desc_key;
          reply.inherited_keys = rec->inherited_keys;
        }
        return HandlerOutcome{std::any(std::move(reply)), 0, 0};
      });
}

Result<AuthReply> auth_descriptor(Fabric& fabric, TaskClock& t,
                                  NodeId child_node, const DescriptorId& id) {
  AuthRequest req{id.handle_id, id.key};
  auto rpc = fabric.rpc_call(t, child_node, id.node, kAuthHandlerId,
                             std::any(req));
  if (!rpc.ok()) return Result<AuthReply>(rpc.error());
  auto reply = std::any_cast<AuthReply>(std::move(rpc.value()));
  if (reply.err != Err::None) return Result<AuthReply>(reply.err);
  return reply;
}

Result<FetchResult> fetch_descriptor(Fabric& fabric, TaskClock& t,
                                     NodeId child_node, const DescriptorId& id) {
  auto auth = auth_descriptor(fabric, t, child_node, id);
  if (!auth.ok()) return Result<FetchResult>(auth.error());
  const AuthReply& reply = auth.value();

  auto read = fabric.rdma_read_raw(t, child_node, id.node, reply.desc_key,
                                   reply.pin_pfn, reply.pin_len);
  if (!read.ok()) {
    // Reclaim raced the read; the handle is gone.
    return Result<FetchResult>(Err::NoSuchDescriptor);
  }
  auto desc = deserialize(read.value());
  if (!desc.ok()) return Result<FetchResult>(desc.error(), desc.detail());

  FetchResult out;
  out.desc = std::move(desc.value());
  out.inherited_keys = reply.inherited_keys;
  out.bytes_fetched = reply.pin_len;
  return out;
}

}  // namespace rfork
