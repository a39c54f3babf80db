#include "rforksim/memspace.hpp"

#include <algorithm>
#include <cstring>

namespace rfork {

AddressSpace& AddressSpace::operator=(AddressSpace&& o) noexcept {
  if (this != &o) {
    release();
    fabric_ = o.fabric_;
    node_ = o.node_;
    ancestors = std::move(o.ancestors);
    vmas = std::move(o.vmas);
    stats = o.stats;
    o.fabric_ = nullptr;
    o.vmas.clear();
  }
  return *this;
}

void AddressSpace::release() {
  if (!fabric_) return;
  Node& n = fabric_->node(node_);
  for (auto& v : vmas) {
    for (std::size_t i = 0; i < v.frames.size(); ++i) {
      if (v.frames[i]) {
        n.release_frame(v.frames[i]);
        v.frames[i] = 0;
        v.ptes[i] = Pte{};
      }
    }
  }
}

const SpaceVma* AddressSpace::find_vma(std::uint64_t va) const {
  for (const auto& v : vmas) {
    if (v.contains(va)) return &v;
  }
  return nullptr;
}

SpaceVma* AddressSpace::find_vma(std::uint64_t va) {
  for (auto& v : vmas) {
    if (v.contains(va)) return &v;
  }
  return nullptr;
}

Pte AddressSpace::pte(std::uint64_t vpn) const {
  const SpaceVma* v = find_vma(vpn * kPageSize);
  if (!v || v->ptes.empty()) return Pte{};
  return v->ptes[vpn - v->first_vpn()];
}

std::uint64_t AddressSpace::local_pfn(std::uint64_t vpn) const {
  const SpaceVma* v = find_vma(vpn * kPageSize);
  if (!v || v->frames.empty()) return 0;
  return v->frames[vpn - v->first_vpn()];
}

void AddressSpace::install_local(std::uint64_t vpn, std::uint64_t pfn) {
  SpaceVma* v = find_vma(vpn * kPageSize);
  sim_assert(v != nullptr, "install_local outside every VMA");
  v->ensure_tables();
  v->ptes[vpn - v->first_vpn()] = Pte::local(pfn);
  v->frames[vpn - v->first_vpn()] = pfn;
}

void AddressSpace::set_remote(std::uint64_t vpn, Pte entry) {
  SpaceVma* v = find_vma(vpn * kPageSize);
  sim_assert(v != nullptr, "set_remote outside every VMA");
  v->ensure_tables();
  v->ptes[vpn - v->first_vpn()] = entry;
  v->frames[vpn - v->first_vpn()] = 0;
}

std::uint64_t AddressSpace::mapped_entries() const {
  std::uint64_t n = 0;
  for (const auto& v : vmas) {
    for (const Pte p : v.ptes) {
      if (p.raw() != 0) ++n;
    }
  }
  return n;
}

std::uint64_t AddressSpace::present_pages() const {
  std::uint64_t n = 0;
  for (const auto& v : vmas) {
    for (const std::uint64_t f : v.frames) {
      if (f) ++n;
    }
  }
  return n;
}

std::uint64_t AddressSpace::cow_if_shared(SpaceVma& vma, std::uint64_t vpn) {
  Node& n = fabric_->node(node_);
  const std::size_t slot = vpn - vma.first_vpn();
  const std::uint64_t pfn = vma.frames[slot];
  if (n.frame_refs(pfn) <= 1) return pfn;
  const std::uint64_t fresh = n.alloc_frame();
  *n.frame(fresh) = *n.frame(pfn);
  n.release_frame(pfn);
  vma.frames[slot] = fresh;
  vma.ptes[slot] = Pte::local(fresh);
  return fresh;
}

std::vector<std::uint64_t> AddressSpace::prefetch_window(std::uint64_t vpn) const {
  std::vector<std::uint64_t> out;
  const std::uint32_t window = fabric_->config().prefetch_window;
  if (window == 0) return out;
  const SpaceVma* vma = find_vma(vpn * kPageSize);
  if (!vma || vma->ptes.empty()) return out;
  const std::size_t slot = vpn - vma->first_vpn();
  const Pte faulted = vma->ptes[slot];
  if (!faulted.is_remote()) return out;
  const std::uint8_t owner = faulted.owner();
  for (std::size_t i = slot + 1; i < vma->ptes.size() && out.size() < window;
       ++i) {
    const Pte p = vma->ptes[i];
    if (!p.is_remote() || p.owner() != owner || p.pfn() == 0) break;
    out.push_back(vma->first_vpn() + i);
  }
  return out;
}

Result<FaultResolution> AddressSpace::handle_fault(TaskClock& t,
                                                   std::uint64_t vpn,
                                                   AccessKind kind) {
  (void)kind;
  SpaceVma* vma = find_vma(vpn * kPageSize);
  sim_assert(vma != nullptr, "handle_fault: vpn outside every VMA");
  vma->ensure_tables();
  Node& n = fabric_->node(node_);
  const std::size_t slot = vpn - vma->first_vpn();
  const Pte entry = vma->ptes[slot];
  sim_assert(!entry.present(), "handle_fault: page already present");

  // (a) No entry at all: anonymous/growable region, materialize zeros.
  if (entry.raw() == 0) {
    install_local(vpn, n.alloc_frame());
    ++stats.faults_local;
    return FaultResolution::Local;
  }

  sim_assert(entry.is_remote(), "handle_fault: non-present non-remote entry");
  const std::uint8_t owner = entry.owner();
  sim_assert(owner >= 1 && owner <= ancestors.size(),
             "handle_fault: owner index out of ancestor range");
  const AncestorEntry& anc = ancestors[owner - 1];

  bool try_rpc = entry.pfn() == 0;  // no resolvable frame at the owner
  if (!try_rpc) {
    const DcKey key = vma->key_by_owner.at(owner);
    const auto window = prefetch_window(vpn);

    // Physically contiguous prefetch pages batch into the fault's read.
    std::uint64_t batched = 0;
    while (batched < window.size() &&
           vma->ptes[slot + batched + 1].pfn() == entry.pfn() + batched + 1) {
      ++batched;
    }
    auto read = fabric_->rdma_read(t, node_, anc.node, key, entry.pfn(),
                                   kPageSize * (1 + batched));
    if (read.ok()) {
      for (std::uint64_t i = 0; i <= batched; ++i) {
        const std::uint64_t pfn = n.alloc_frame();
        std::memcpy(n.frame(pfn)->data(), read->data() + i * kPageSize, kPageSize);
        install_local(vpn + i, pfn);
      }
      ++stats.faults_rdma;
      stats.pages_prefetched += batched;
      stats.bytes_over_network += kPageSize * (1 + batched);
      // Remaining window pages fetched with their own reads.
      for (std::uint64_t i = batched; i < window.size(); ++i) {
        const std::uint64_t pvpn = window[i];
        const Pte p = vma->ptes[pvpn - vma->first_vpn()];
        auto r = fabric_->rdma_read(t, node_, anc.node, key, p.pfn(), kPageSize);
        if (!r.ok()) break;  // revoked mid-stream; leave the page remote
        const std::uint64_t pfn = n.alloc_frame();
        std::memcpy(n.frame(pfn)->data(), r->data(), kPageSize);
        install_local(pvpn, pfn);
        ++stats.pages_prefetched;
        stats.bytes_over_network += kPageSize;
      }
      return FaultResolution::Rdma;
    }
    // Rejected read: connection-level false positives included. Fall back to
    // the owner's daemon unless the run wants strict revocation semantics.
    if (fabric_->config().strict_revocation)
      return Result<FaultResolution>(Err::FaultError);
    try_rpc = true;
  }

  if (try_rpc) {
    FallbackRequest req{anc.handle_id, vpn};
    auto rpc = fabric_->rpc_call(t, node_, anc.node, kFallbackHandlerId,
                                 std::any(req));
    if (!rpc.ok()) return Result<FaultResolution>(Err::FaultError);
    const auto& reply = std::any_cast<const FallbackReply&>(rpc.value());
    if (reply.err != Err::None) return Result<FaultResolution>(Err::FaultError);
    const std::uint64_t pfn = n.alloc_frame();
    std::memcpy(n.frame(pfn)->data(), reply.page.data(), kPageSize);
    install_local(vpn, pfn);
    ++stats.faults_rpc;
    stats.bytes_over_network += kPageSize;
    return FaultResolution::Rpc;
  }
  return Result<FaultResolution>(Err::FaultError);
}

Result<FaultResolution> AddressSpace::ensure_present(TaskClock& t,
                                                     std::uint64_t vpn,
                                                     AccessKind kind,
                                                     SpaceVma& vma) {
  vma.ensure_tables();
  if (vma.ptes[vpn - vma.first_vpn()].present())
    return FaultResolution::Local;  // already materialized; no fault taken
  return handle_fault(t, vpn, kind);
}

Result<void> AddressSpace::access_bytes(TaskClock& t, std::uint64_t va,
                                        AccessKind kind,
                                        std::span<std::uint8_t> out,
                                        std::span<const std::uint8_t> in) {
  const std::size_t len = kind == AccessKind::Read ? out.size() : in.size();
  std::uint64_t pos = va;
  std::size_t done = 0;
  Node& n = fabric_->node(node_);
  while (done < len) {
    SpaceVma* vma = find_vma(pos);
    if (!vma) return Result<void>(Err::SegFault);
    const std::uint8_t need = kind == AccessKind::Write ? kProtWrite : kProtRead;
    if (!(vma->prot & need)) return Result<void>(Err::ProtFault);

    const std::uint64_t vpn = pos / kPageSize;
    auto fr = ensure_present(t, vpn, kind, *vma);
    if (!fr.ok()) return Result<void>(fr.error());

    const std::uint64_t in_page = pos % kPageSize;
    const std::size_t take = std::min<std::size_t>(len - done, kPageSize - in_page);
    if (kind == AccessKind::Read) {
      const Frame* f = n.frame(vma->frames[vpn - vma->first_vpn()]);
      std::memcpy(out.data() + done, f->data() + in_page, take);
    } else {
      const std::uint64_t pfn = cow_if_shared(*vma, vpn);
      Frame* f = n.frame(pfn);
      std::memcpy(f->data() + in_page, in.data() + done, take);
    }
    pos += take;
    done += take;
  }
  return Result<void>();
}

Result<void> AddressSpace::read(TaskClock& t, std::uint64_t va,
                                std::span<std::uint8_t> out) {
  return access_bytes(t, va, AccessKind::Read, out, {});
}

Result<void> AddressSpace::write(TaskClock& t, std::uint64_t va,
                                 std::span<const std::uint8_t> data) {
  return access_bytes(t, va, AccessKind::Write, {}, data);
}

Result<FaultResolution> AddressSpace::touch(TaskClock& t, std::uint64_t va,
                                            AccessKind kind) {
  SpaceVma* vma = find_vma(va);
  if (!vma) return Result<FaultResolution>(Err::SegFault);
  const std::uint8_t need = kind == AccessKind::Write ? kProtWrite : kProtRead;
  if (!(vma->prot & need)) return Result<FaultResolution>(Err::ProtFault);
  auto fr = ensure_present(t, va / kPageSize, kind, *vma);
  if (fr.ok() && kind == AccessKind::Write) cow_if_shared(*vma, va / kPageSize);
  return fr;
}

void AddressSpace::assert_invariants() const {
  for (const auto& v : vmas) {
    for (std::size_t i = 0; i < v.ptes.size(); ++i) {
      const Pte p = v.ptes[i];
      sim_assert(!(p.present() && p.is_remote()),
                 "pte invariant: remote implies not present");
      sim_assert(p.present() == (v.frames[i] != 0),
                 "frames must mirror exactly the present entries");
      if (p.is_remote()) {
        sim_assert(p.owner() >= 1 && p.owner() <= ancestors.size(),
                   "remote owner must resolve in the ancestor table");
      }
    }
  }
}

Result<AddressSpace> map_from_descriptor(
    Fabric& fabric, NodeId node, const ContainerDescriptor& desc,
    NodeId publisher, const std::vector<std::vector<DcKey>>& inherited_keys) {
  if (desc.ancestors.size() + 1 > kMaxAncestors + 1)
    return Result<AddressSpace>(Err::CorruptDescriptor);

  AddressSpace space(&fabric, node);
  space.ancestors.reserve(desc.ancestors.size() + 1);
  space.ancestors.push_back(AncestorEntry{publisher, desc.handle_id});
  for (const auto& a : desc.ancestors) space.ancestors.push_back(a);

  for (std::size_t vi = 0; vi < desc.vmas.size(); ++vi) {
    const DescVma& dv = desc.vmas[vi];
    SpaceVma v;
    v.vma_id = dv.vma_id;
    v.start_va = dv.start_va;
    v.end_va = dv.end_va;
    v.prot = dv.prot;
    v.flags = dv.flags;
    v.key_by_owner.resize(space.ancestors.size() + 1);
    v.key_by_owner[1] = dv.dc_key;
    if (vi < inherited_keys.size()) {
      const auto& inh = inherited_keys[vi];
      for (std::size_t j = 0; j < inh.size() && j + 2 <= space.ancestors.size();
           ++j) {
        v.key_by_owner[j + 2] = inh[j];
      }
    }
    v.ensure_tables();
    for (const auto& [vpn, pte] : dv.ptes) {
      if (!pte.is_remote()) return Result<AddressSpace>(Err::CorruptDescriptor);
      const std::uint8_t owner = pte.owner();
      if (owner > desc.ancestors.size())
        return Result<AddressSpace>(Err::CorruptDescriptor);
      if (vpn < v.first_vpn() || vpn >= v.end_vpn())
        return Result<AddressSpace>(Err::CorruptDescriptor);
      v.ptes[vpn - v.first_vpn()] =
          Pte::remote(static_cast<std::uint8_t>(owner + 1), pte.pfn());
    }
    space.vmas.push_back(std::move(v));
  }
  std::sort(space.vmas.begin(), space.vmas.end(),
            [](const SpaceVma& a, const SpaceVma& b) {
              return a.start_va < b.start_va;
            });
  return space;
}

// ---------------------------------------------------------------------------
// PtCache

void PtCache::put(TaskClock& t, const DescriptorId& parent,
                  const AddressSpace& space,
                  const std::vector<std::uint8_t>& isolation,
                  const std::array<std::uint8_t, kRegisterBytes>& registers,
                  const std::vector<FileEntry>& files) {
  sim_assert(space.owner_node() == node_, "pt cache is per node");
  Entry e;
  e.parent_node = parent.node;
  e.parent_handle = parent.handle_id;
  e.ancestors = space.ancestors;
  e.vmas = space.vmas;  // dense tables: a flat copy
  e.isolation = isolation;
  e.registers = registers;
  e.files = files;
  e.expires_at = t.now + fabric_->config().pt_cache_keep;

  Node& n = fabric_->node(node_);
  space.for_each_local([&](std::uint64_t, std::uint64_t pfn) { n.share_frame(pfn); });

  const auto key = std::make_pair(parent.node.addr, parent.handle_id);
  auto it = entries_.find(key);
  if (it != entries_.end()) {
    release_entry(it->second);
    it->second = std::move(e);
  } else {
    entries_.emplace(key, std::move(e));
  }
}

const PtCache::Entry* PtCache::get(SimTime now, const DescriptorId& parent) {
  const auto key = std::make_pair(parent.node.addr, parent.handle_id);
  auto it = entries_.find(key);
  if (it == entries_.end()) return nullptr;
  if (now >= it->second.expires_at) {
    release_entry(it->second);
    entries_.erase(it);
    return nullptr;
  }
  return &it->second;
}

AddressSpace PtCache::materialize(const Entry& entry) const {
  AddressSpace space(fabric_, node_);
  space.ancestors = entry.ancestors;
  space.vmas = entry.vmas;
  Node& n = fabric_->node(node_);
  space.for_each_local([&](std::uint64_t, std::uint64_t pfn) { n.share_frame(pfn); });
  return space;
}

void PtCache::release_entry(const Entry& e) {
  Node& n = fabric_->node(node_);
  for (const auto& v : e.vmas) {
    for (const std::uint64_t pfn : v.frames) {
      if (pfn) n.release_frame(pfn);
    }
  }
}

void PtCache::drop_expired(SimTime now) {
  for (auto it = entries_.begin(); it != entries_.end();) {
    if (now >= it->second.expires_at) {
      release_entry(it->second);
      it = entries_.erase(it);
    } else {
      ++it;
    }
  }
}

void PtCache::clear() {
  for (auto& [k, e] : entries_) {
    (void)k;
    release_entry(e);
  }
  entries_.clear();
}

}  // namespace rfork
