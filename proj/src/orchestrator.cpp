#include "rforksim/orchestrator.hpp"

#include <algorithm>
#include <cstring>

namespace rfork {

// ---------------------------------------------------------------------------
// Machine

Machine::Machine(Cluster* cluster, NodeId node)
    : cluster_(cluster),
      node_(node),
      pool_(&cluster->fabric(), node),
      pt_cache_(&cluster->fabric(), node),
      lean_idle_(cluster->config().lean_pool_size),
      lean_capacity_(cluster->config().lean_pool_size) {
  host_.install_auth_handler(cluster_->fabric(), node_);
  install_fallback_handler();
  pool_.start(cluster_->loop());
}

SimTime Machine::acquire_lean(TaskClock& t) {
  if (lean_idle_ > 0) {
    --lean_idle_;
    cluster_->loop().schedule_in(cluster_->config().cost.lean_container_setup,
                                 [this] {
                                   if (lean_idle_ < lean_capacity_) ++lean_idle_;
                                 });
    return 0;
  }
  const SimTime charge = cluster_->config().cost.lean_container_setup;
  t.now += charge;
  return charge;
}

const std::vector<std::uint8_t>* Machine::file(const std::string& path) const {
  auto it = files_.find(path);
  return it == files_.end() ? nullptr : &it->second;
}

Container* Machine::container(std::uint64_t id) {
  auto it = containers_.find(id);
  return it == containers_.end() ? nullptr : it->second.get();
}

Result<std::vector<std::uint8_t>> Machine::serve_page(const Container& c,
                                                      std::uint64_t vpn) const {
  if (const std::uint64_t pfn = c.space.local_pfn(vpn)) {
    const Frame* f = cluster_->fabric_.node(node_).frame(pfn);
    sim_assert(f != nullptr, "serve_page: frame missing");
    return std::vector<std::uint8_t>(f->begin(), f->end());
  }
  for (const auto& ext : c.file_extents) {
    if (vpn < ext.vpn_start || vpn >= ext.vpn_start + ext.pages) continue;
    const auto* content = file(ext.path);
    if (!content) return Result<std::vector<std::uint8_t>>(Err::NoPage);
    std::vector<std::uint8_t> page(kPageSize, 0);
    const std::uint64_t off = ext.file_offset + (vpn - ext.vpn_start) * kPageSize;
    if (off < content->size()) {
      const std::uint64_t take =
          std::min<std::uint64_t>(kPageSize, content->size() - off);
      std::memcpy(page.data(), content->data() + off, take);
    }
    return page;
  }
  return Result<std::vector<std::uint8_t>>(Err::NoPage);
}

void Machine::install_fallback_handler() {
  cluster_->fabric().node(node_).register_handler(
      kFallbackHandlerId, [this](const std::any& request) -> HandlerOutcome {
        const auto& req = std::any_cast<const FallbackRequest&>(request);
        const SimTime service = cluster_->config().cost.rpc_fallback_per_page;

        std::uint64_t container_id = 0;
        if (const auto* rec = host_.find(req.handle)) {
          container_id = rec->container_id;
        } else if (auto it = retired_.find(req.handle); it != retired_.end()) {
          container_id = it->second;
        }
        FallbackReply reply;
        Container* c = container_id ? container(container_id) : nullptr;
        if (!c) {
          reply.err = Err::NoPage;
          return HandlerOutcome{std::any(std::move(reply)), service, 0};
        }
        auto page = serve_page(*c, req.vpn);
        if (!page.ok()) {
          reply.err = page.error();
          return HandlerOutcome{std::any(std::move(reply)), service, 0};
        }
        reply.page = std::move(page.value());
        return HandlerOutcome{std::any(std::move(reply)), service, kPageSize};
      });
}

// ---------------------------------------------------------------------------
// build_descriptor

Result<ContainerDescriptor> build_descriptor(
    const Container& parent, const std::map<std::uint32_t, DcKey>& assignments) {
  ContainerDescriptor d;
  d.isolation = parent.isolation;
  d.registers = parent.registers;
  d.files = parent.files;
  d.ancestors = parent.space.ancestors;

  for (const auto& v : parent.space.vmas) {
    auto key = assignments.find(v.vma_id);
    if (key == assignments.end())
      return Result<ContainerDescriptor>(Err::MissingAccessKey, v.vma_id);

    DescVma dv;
    dv.vma_id = v.vma_id;
    dv.start_va = v.start_va;
    dv.end_va = v.end_va;
    dv.prot = v.prot;
    dv.flags = v.flags;
    dv.dc_key = key->second;

    auto file_backed = [&](std::uint64_t vpn) {
      for (const auto& ext : parent.file_extents) {
        if (vpn >= ext.vpn_start && vpn < ext.vpn_start + ext.pages) return true;
      }
      return false;
    };
    for (std::uint64_t vpn = v.first_vpn(); vpn < v.end_vpn(); ++vpn) {
      const std::size_t slot = vpn - v.first_vpn();
      const Pte p = v.ptes.empty() ? Pte{} : v.ptes[slot];
      if (p.present()) {
        dv.ptes.emplace_back(vpn, Pte::remote(0, p.pfn()));
      } else if (p.raw() != 0) {
        // Pages this parent itself left remote keep their true owner.
        dv.ptes.emplace_back(vpn, p);
      } else if (file_backed(vpn)) {
        // Mapped file page with no frame anywhere: restorable only through
        // the fallback daemon.
        dv.ptes.emplace_back(vpn, Pte::remote(0, 0));
      }
    }
    d.vmas.push_back(std::move(dv));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Cluster

Cluster::Cluster(const SimConfig& cfg) : fabric_(cfg) {}

Machine& Cluster::add_machine() {
  const NodeId node = fabric_.register_node();
  machines_.push_back(std::make_unique<Machine>(this, node));
  return *machines_.back();
}

Machine& Cluster::machine(NodeId node) {
  sim_assert(node.addr < machines_.size(), "unknown machine");
  return *machines_[node.addr];
}

Container& Cluster::create_root(NodeId node, std::vector<std::uint8_t> isolation) {
  auto c = std::make_unique<Container>();
  c->id = next_container_++;
  c->node = node;
  c->isolation = std::move(isolation);
  c->space = AddressSpace(&fabric_, node);
  Container& ref = *c;
  machine(node).containers_.emplace(ref.id, std::move(c));
  return ref;
}

void Cluster::add_vma(Container& c, std::uint32_t vma_id, std::uint64_t start_va,
                      std::uint64_t end_va, std::uint8_t prot,
                      std::uint8_t flags) {
  sim_assert(start_va < end_va && start_va % kPageSize == 0 &&
                 end_va % kPageSize == 0,
             "VMA bounds must be page aligned and non-empty");
  for (const auto& v : c.space.vmas) {
    sim_assert(end_va <= v.start_va || start_va >= v.end_va,
               "VMAs must be disjoint");
  }
  SpaceVma v;
  v.vma_id = vma_id;
  v.start_va = start_va;
  v.end_va = end_va;
  v.prot = prot;
  v.flags = flags;
  v.key_by_owner.resize(c.space.ancestors.size() + 1);
  c.space.vmas.push_back(v);
  std::sort(c.space.vmas.begin(), c.space.vmas.end(),
            [](const SpaceVma& a, const SpaceVma& b) {
              return a.start_va < b.start_va;
            });
}

void Cluster::fill_pages(Container& c, std::uint64_t vpn, std::uint64_t pages,
                         std::uint8_t byte) {
  Node& n = fabric_.node(c.node);
  for (std::uint64_t i = 0; i < pages; ++i) {
    const std::uint64_t v = vpn + i;
    std::uint64_t pfn = c.space.local_pfn(v);
    if (pfn == 0) {
      sim_assert(c.space.find_vma(v * kPageSize) != nullptr,
                 "fill_pages outside every VMA");
      pfn = n.alloc_frame();
      c.space.install_local(v, pfn);
    }
    std::memset(n.frame(pfn)->data(), byte, kPageSize);
  }
}

void Cluster::map_file(Container& c, std::uint64_t vpn, std::uint64_t pages,
                       const std::string& path, std::uint64_t offset,
                       std::uint32_t fd) {
  sim_assert(c.space.find_vma(vpn * kPageSize) != nullptr &&
                 c.space.find_vma((vpn + pages) * kPageSize - 1) != nullptr,
             "file extent outside every VMA");
  c.file_extents.push_back(FileExtent{vpn, pages, path, offset});
  c.files.push_back(FileEntry{fd, 0, offset, path});
}

void Cluster::add_refs(const AddressSpace& space) {
  for (const auto& a : space.ancestors) {
    ++live_refs_[{a.node.addr, a.handle_id}];
  }
}

// Each access key a child records costs it 12 bytes (one per VMA per owner).
void Cluster::account_child_keys(TaskClock& t, Container& c) {
  c.key_bytes = static_cast<std::int64_t>(c.space.vmas.size()) *
                static_cast<std::int64_t>(c.space.ancestors.size()) *
                static_cast<std::int64_t>(kDcKeyBytes);
  fabric_.node(c.node).add_metric(t.now, c.key_bytes);
}

void Cluster::drop_refs(Container& c) {
  if (c.refs_released) return;
  c.refs_released = true;
  for (const auto& a : c.space.ancestors) {
    auto it = live_refs_.find({a.node.addr, a.handle_id});
    sim_assert(it != live_refs_.end() && it->second > 0,
               "descriptor refcount underflow");
    if (--it->second == 0) live_refs_.erase(it);
  }
}

std::uint32_t Cluster::live_refs(NodeId node, std::uint64_t handle) const {
  auto it = live_refs_.find({node.addr, handle});
  return it == live_refs_.end() ? 0 : it->second;
}

void Cluster::check_reclaim_safety(const DescriptorId& id) const {
  sim_assert(live_refs(id.node, id.handle_id) == 0,
             "reclaiming a descriptor with live descendant address spaces");
}

Result<DescriptorId> Cluster::fork_prepare(TaskClock& t, Container& parent) {
  sim_assert(parent.state != ContainerState::Finished,
             "fork_prepare: container already finished");
  if (parent.space.ancestors.size() >= kMaxAncestors)
    return Result<DescriptorId>(Err::MaxHopsExceeded);
  parent.state = ContainerState::Paused;

  Machine& m = machine(parent.node);

  // One fresh target per VMA, pinned to the pages the parent holds right now.
  std::vector<std::pair<std::uint32_t, std::vector<PageRange>>> vma_ranges;
  for (const auto& v : parent.space.vmas) {
    std::vector<std::uint64_t> pfns;
    for (const std::uint64_t pfn : v.frames) {
      if (pfn) pfns.push_back(pfn);
    }
    std::sort(pfns.begin(), pfns.end());
    std::vector<PageRange> ranges;
    for (std::uint64_t pfn : pfns) {
      if (!ranges.empty() &&
          ranges.back().start_pfn + ranges.back().count == pfn) {
        ++ranges.back().count;
      } else {
        ranges.push_back(PageRange{pfn, 1});
      }
    }
    vma_ranges.emplace_back(v.vma_id, std::move(ranges));
  }
  const auto assignments = assign_targets(t, m.pool(), vma_ranges);
  const DcKey desc_target = m.pool().take(t, {});

  auto desc = build_descriptor(parent, assignments);
  if (!desc.ok()) return Result<DescriptorId>(desc.error(), desc.detail());
  t.now += static_cast<SimTime>(desc->pte_count()) * config().prepare_per_pte;

  // Keys the child will need for pages owned by this parent's own ancestors.
  std::vector<std::vector<DcKey>> inherited;
  for (const auto& v : parent.space.vmas) {
    std::vector<DcKey> keys;
    for (std::size_t j = 1; j < v.key_by_owner.size(); ++j)
      keys.push_back(v.key_by_owner[j]);
    inherited.push_back(std::move(keys));
  }

  DescriptorId id = m.host().publish(fabric_, t, parent.node, desc.value(),
                                     desc_target, std::move(inherited),
                                     parent.id);
  ++parent.live_descriptors;
  return id;
}

Result<ResumeOutcome> Cluster::fork_resume(TaskClock& t, NodeId target,
                                           const DescriptorId& id) {
  Machine& m = machine(target);
  ResumeOutcome out;

  if (target == id.node) {
    // Local fork: copy the paused parent's page table in place, sharing its
    // frames copy-on-write. No descriptor bytes move.
    const DescriptorHost::Record* rec = m.host().find(id.handle_id);
    if (!rec) return Result<ResumeOutcome>(Err::NoSuchDescriptor);
    if (rec->auth_key != id.key) return Result<ResumeOutcome>(Err::AuthFailed);
    Container* parent = m.container(rec->container_id);
    sim_assert(parent != nullptr, "local resume: parent container missing");

    m.acquire_lean(t);
    t.now += config().cost.local_fork;

    auto child = std::make_unique<Container>();
    child->id = next_container_++;
    child->node = target;
    child->isolation = parent->isolation;
    child->registers = parent->registers;
    child->files = parent->files;
    child->lineage = id;
    child->space = AddressSpace(&fabric_, target);
    child->space.ancestors.reserve(parent->space.ancestors.size() + 1);
    child->space.ancestors.push_back(AncestorEntry{id.node, id.handle_id});
    for (const auto& a : parent->space.ancestors)
      child->space.ancestors.push_back(a);

    Node& n = fabric_.node(target);
    for (std::size_t vi = 0; vi < parent->space.vmas.size(); ++vi) {
      const SpaceVma& pv = parent->space.vmas[vi];
      SpaceVma v = pv;  // tables come along; frames shared copy-on-write
      v.key_by_owner.assign(child->space.ancestors.size() + 1, DcKey{});
      v.key_by_owner[1] = rec->vma_keys[vi];
      for (std::size_t j = 1; j < pv.key_by_owner.size(); ++j)
        v.key_by_owner[j + 1] = pv.key_by_owner[j];
      for (std::size_t slot = 0; slot < v.ptes.size(); ++slot) {
        const Pte p = v.ptes[slot];
        if (p.present()) {
          n.share_frame(v.frames[slot]);
        } else if (p.raw() != 0) {
          v.ptes[slot] =
              Pte::remote(static_cast<std::uint8_t>(p.owner() + 1), p.pfn());
        }
      }
      child->space.vmas.push_back(std::move(v));
    }
    add_refs(child->space);
    account_child_keys(t, *child);
    out.child = child.get();
    machine(target).containers_.emplace(child->id, std::move(child));
    return out;
  }

  // Remote fork: authenticate, then restore from the page-table cache or a
  // one-sided fetch of the descriptor.
  auto auth = auth_descriptor(fabric_, t, target, id);
  if (!auth.ok()) return Result<ResumeOutcome>(auth.error());
  m.acquire_lean(t);

  auto child = std::make_unique<Container>();
  child->id = next_container_++;
  child->node = target;
  child->lineage = id;

  if (const PtCache::Entry* entry = m.pt_cache().get(t.now, id)) {
    child->space = m.pt_cache().materialize(*entry);
    child->isolation = entry->isolation;
    child->registers = entry->registers;
    child->files = entry->files;
    out.pt_cache_hit = true;
  } else {
    const AuthReply& reply = auth.value();
    auto read = fabric_.rdma_read_raw(t, target, id.node, reply.desc_key,
                                      reply.pin_pfn, reply.pin_len);
    if (!read.ok()) return Result<ResumeOutcome>(Err::NoSuchDescriptor);
    auto desc = deserialize(read.value());
    if (!desc.ok()) return Result<ResumeOutcome>(desc.error(), desc.detail());

    auto space = map_from_descriptor(fabric_, target, desc.value(), id.node,
                                     reply.inherited_keys);
    if (!space.ok()) return Result<ResumeOutcome>(space.error());
    t.now += static_cast<SimTime>(desc->pte_count()) * config().map_per_pte;

    child->space = std::move(space.value());
    child->isolation = desc->isolation;
    child->registers = desc->registers;
    child->files = desc->files;
    out.descriptor_bytes = reply.pin_len;
  }

  add_refs(child->space);
  account_child_keys(t, *child);
  out.child = child.get();
  m.containers_.emplace(child->id, std::move(child));
  return out;
}

Result<void> Cluster::fork_reclaim(TaskClock& t, const DescriptorId& id) {
  Machine& m = machine(id.node);
  const DescriptorHost::Record* rec = m.host().find(id.handle_id);
  if (!rec) return Result<void>(Err::NoSuchDescriptor);
  const std::uint64_t container_id = rec->container_id;

  auto res = m.host().reclaim(fabric_, t, id.node, id);
  if (!res.ok()) return res;

  Container* parent = m.container(container_id);
  if (parent) {
    sim_assert(parent->live_descriptors > 0, "descriptor count underflow");
    --parent->live_descriptors;
    if (config().retain_parent_after_reclaim) {
      m.retired_[id.handle_id] = container_id;
    } else if (parent->live_descriptors == 0) {
      destroy_container(*parent);
    }
  }
  return Result<void>();
}

Result<void> Cluster::revoke(TaskClock& t, const DescriptorId& id,
                             std::uint32_t vma_id) {
  Machine& m = machine(id.node);
  return revoke_vma(fabric_, t, m.host(), id.node, id, vma_id);
}

void Cluster::finish_container(TaskClock& t, Container& c) {
  sim_assert(c.state == ContainerState::Running,
             "finish_container: container not running");
  c.state = ContainerState::Finished;
  if (c.lineage) {
    machine(c.node).pt_cache().put(t, *c.lineage, c.space, c.isolation,
                                   c.registers, c.files);
  }
  destroy_container(c);
}

void Cluster::destroy_container(Container& c) {
  drop_refs(c);
  if (c.key_bytes != 0)
    fabric_.node(c.node).add_metric(fabric_.loop().now(), -c.key_bytes);
  c.space.release();
  const std::uint64_t id = c.id;
  Machine& m = machine(c.node);
  m.containers_.erase(id);  // frees c
}

void Cluster::crash_machine(NodeId node, SimTime at) {
  fabric_.crash_node(node, at);
  for (auto& [cid, c] : machine(node).containers_) {
    (void)cid;
    drop_refs(*c);  // dead spaces no longer pin ancestors
  }
}

}  // namespace rfork
