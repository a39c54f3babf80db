#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rforksim/access.hpp"
#include "rforksim/descriptor.hpp"
#include "rforksim/memspace.hpp"

namespace rfork {

enum class ContainerState : std::uint8_t { Running, Paused, Finished };

// A file-backed region of a root container. Pages inside it that were never
// materialized stay out of local memory; children restore them through the
// owner's fallback daemon, which reads the node-local file stand-in.
struct FileExtent {
  std::uint64_t vpn_start = 0;
  std::uint64_t pages = 0;
  std::string path;
  std::uint64_t file_offset = 0;
};

class Container {
 public:
  std::uint64_t id = 0;
  NodeId node;
  ContainerState state = ContainerState::Running;
  std::vector<std::uint8_t> isolation;
  std::array<std::uint8_t, kRegisterBytes> registers{};
  std::vector<FileEntry> files;
  std::vector<FileExtent> file_extents;
  std::optional<DescriptorId> lineage;  // descriptor this container resumed from
  AddressSpace space;
  std::uint32_t live_descriptors = 0;  // prepares not yet reclaimed
  bool refs_released = false;
  std::int64_t key_bytes = 0;  // 12 B per DC key this child stores
};

class Cluster;

// Everything one simulated machine hosts besides its fabric-level state:
// target/lean pools, published descriptors, the page-table cache, containers
// and the local file namespace stand-in.
class Machine {
 public:
  Machine(Cluster* cluster, NodeId node);

  NodeId node() const { return node_; }
  TargetPool& pool() { return pool_; }
  DescriptorHost& host() { return host_; }
  PtCache& pt_cache() { return pt_cache_; }

  std::uint32_t lean_idle() const { return lean_idle_; }
  // 0 when a pooled sandbox is available, lean_container_setup otherwise.
  SimTime acquire_lean(TaskClock& t);

  void put_file(const std::string& path, std::vector<std::uint8_t> content) {
    files_[path] = std::move(content);
  }
  const std::vector<std::uint8_t>* file(const std::string& path) const;

  Container* container(std::uint64_t id);
  const std::map<std::uint64_t, std::unique_ptr<Container>>& containers() const {
    return containers_;
  }

  // Page service for the fallback daemon: local frame, then file backing.
  Result<std::vector<std::uint8_t>> serve_page(const Container& c,
                                               std::uint64_t vpn) const;

 private:
  friend class Cluster;

  void install_fallback_handler();

  Cluster* cluster_;
  NodeId node_;
  TargetPool pool_;
  DescriptorHost host_;
  PtCache pt_cache_;
  std::uint32_t lean_idle_;
  std::uint32_t lean_capacity_;
  std::map<std::string, std::vector<std::uint8_t>> files_;
  std::map<std::uint64_t, std::unique_ptr<Container>> containers_;
  std::map<std::uint64_t, std::uint64_t> retired_;  // handle -> container id
};

// Standalone build of the forkable metadata; fork_prepare drives it, and the
// tests exercise it directly. access_assignments maps every VMA to the key
// guarding the parent's pages of that VMA.
Result<ContainerDescriptor> build_descriptor(
    const Container& parent, const std::map<std::uint32_t, DcKey>& assignments);

struct ResumeOutcome {
  Container* child = nullptr;
  std::uint64_t descriptor_bytes = 0;  // fetched over the network (0 on cache hit)
  bool pt_cache_hit = false;
};

// The fork API plus the machines it operates on.
class Cluster {
 public:
  explicit Cluster(const SimConfig& cfg);

  Machine& add_machine();
  Machine& machine(NodeId node);
  std::size_t machine_count() const { return machines_.size(); }
  Fabric& fabric() { return fabric_; }
  EventLoop& loop() { return fabric_.loop(); }
  const SimConfig& config() const { return fabric_.config(); }

  // -- root container construction (platform seeds, test parents) -----------
  Container& create_root(NodeId node, std::vector<std::uint8_t> isolation = {});
  void add_vma(Container& c, std::uint32_t vma_id, std::uint64_t start_va,
               std::uint64_t end_va, std::uint8_t prot = kProtRead | kProtWrite,
               std::uint8_t flags = 0);
  // Materializes pages [vpn, vpn+pages) filled with `byte`.
  void fill_pages(Container& c, std::uint64_t vpn, std::uint64_t pages,
                  std::uint8_t byte);
  void map_file(Container& c, std::uint64_t vpn, std::uint64_t pages,
                const std::string& path, std::uint64_t offset,
                std::uint32_t fd = 3);

  // -- the fork API ----------------------------------------------------------
  Result<DescriptorId> fork_prepare(TaskClock& t, Container& parent);
  Result<ResumeOutcome> fork_resume(TaskClock& t, NodeId target,
                                    const DescriptorId& id);
  Result<void> fork_reclaim(TaskClock& t, const DescriptorId& id);
  Result<void> revoke(TaskClock& t, const DescriptorId& id, std::uint32_t vma_id);

  void finish_container(TaskClock& t, Container& c);
  void destroy_container(Container& c);

  void crash_machine(NodeId node, SimTime at);

  // Live descendant address spaces referencing a descriptor. The platform
  // checks this before any reclaim it initiates.
  std::uint32_t live_refs(NodeId node, std::uint64_t handle) const;
  void check_reclaim_safety(const DescriptorId& id) const;

 private:
  friend class Machine;

  void add_refs(const AddressSpace& space);
  void drop_refs(Container& c);
  void account_child_keys(TaskClock& t, Container& c);

  Fabric fabric_;
  std::vector<std::unique_ptr<Machine>> machines_;
  std::map<std::pair<std::uint32_t, std::uint64_t>, std::uint32_t> live_refs_;
  std::uint64_t next_container_ = 1;
};

}  // namespace rfork
