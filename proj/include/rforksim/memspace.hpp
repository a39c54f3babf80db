#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "rforksim/descriptor.hpp"
#include "rforksim/fabric.hpp"

namespace rfork {

struct PagingStats {
  std::uint64_t faults_local = 0;
  std::uint64_t faults_rdma = 0;
  std::uint64_t faults_rpc = 0;
  std::uint64_t pages_prefetched = 0;
  std::uint64_t bytes_over_network = 0;
};

enum class FaultResolution : std::uint8_t { Local, Rdma, Rpc };

enum class AccessKind : std::uint8_t { Read, Write };

// Runtime view of a VMA: layout, per-owner access keys, and this VMA's slice
// of the page table. Entries are dense (indexed by vpn - first_vpn); a raw
// value of 0 means "no entry", which no legitimate PTE encodes. frames[] is
// the local frame per slot (0 = none) and mirrors exactly the present
// entries.
struct SpaceVma {
  std::uint32_t vma_id = 0;
  std::uint64_t start_va = 0;
  std::uint64_t end_va = 0;
  std::uint8_t prot = kProtRead | kProtWrite;
  std::uint8_t flags = 0;
  // key_by_owner[k] reads pages held by ancestors[k-1]; index 0 unused.
  std::vector<DcKey> key_by_owner;
  std::vector<Pte> ptes;
  std::vector<std::uint64_t> frames;

  bool contains(std::uint64_t va) const { return va >= start_va && va < end_va; }
  std::uint64_t first_vpn() const { return start_va / kPageSize; }
  std::uint64_t end_vpn() const { return end_va / kPageSize; }
  std::uint64_t pages() const { return end_vpn() - first_vpn(); }
  void ensure_tables() {
    if (ptes.size() != pages()) ptes.assign(pages(), Pte{});
    if (frames.size() != pages()) frames.assign(pages(), 0);
  }
};

struct FallbackRequest {
  std::uint64_t handle = 0;
  std::uint64_t vpn = 0;
};

struct FallbackReply {
  Err err = Err::None;
  std::vector<std::uint8_t> page;
};

// The child's address space: a remote-tagged page table materialized page by
// page on first touch, via one-sided read when the owner's frame is known and
// the RPC fallback otherwise.
class AddressSpace {
 public:
  AddressSpace() = default;
  AddressSpace(Fabric* fabric, NodeId owner_node) noexcept
      : fabric_(fabric), node_(owner_node) {}
  AddressSpace(const AddressSpace&) = delete;
  AddressSpace& operator=(const AddressSpace&) = delete;
  AddressSpace(AddressSpace&& o) noexcept { *this = std::move(o); }
  AddressSpace& operator=(AddressSpace&& o) noexcept;
  ~AddressSpace() { release(); }

  NodeId owner_node() const { return node_; }
  Fabric* fabric() const { return fabric_; }

  std::vector<AncestorEntry> ancestors;  // [0] is the immediate parent
  std::vector<SpaceVma> vmas;            // sorted by start_va, disjoint
  PagingStats stats;

  const SpaceVma* find_vma(std::uint64_t va) const;
  SpaceVma* find_vma(std::uint64_t va);

  // Page-table access by virtual page number. A zero-raw Pte means no entry.
  Pte pte(std::uint64_t vpn) const;
  std::uint64_t local_pfn(std::uint64_t vpn) const;  // 0 when not present
  void install_local(std::uint64_t vpn, std::uint64_t pfn);
  void set_remote(std::uint64_t vpn, Pte entry);

  std::uint64_t mapped_entries() const;  // slots with any entry
  std::uint64_t present_pages() const;   // slots with a local frame

  template <typename F>
  void for_each_local(F&& fn) const {
    for (const auto& v : vmas) {
      for (std::size_t i = 0; i < v.frames.size(); ++i) {
        if (v.frames[i]) fn(v.first_vpn() + i, v.frames[i]);
      }
    }
  }

  Result<void> read(TaskClock& t, std::uint64_t va, std::span<std::uint8_t> out);
  Result<void> write(TaskClock& t, std::uint64_t va,
                     std::span<const std::uint8_t> data);
  // Touches one page (fault + access) without moving data around; the
  // replay path uses this.
  Result<FaultResolution> touch(TaskClock& t, std::uint64_t va, AccessKind kind);

  Result<FaultResolution> handle_fault(TaskClock& t, std::uint64_t vpn,
                                       AccessKind kind);

  // Consecutive vpns after `vpn` worth pulling with the fault: same VMA, same
  // owner, still remote with a resolvable frame. Capped at the configured
  // window.
  std::vector<std::uint64_t> prefetch_window(std::uint64_t vpn) const;

  // Drops every frame reference this space holds.
  void release();

  void assert_invariants() const;  // frames mirror exactly the present entries

 private:
  friend class PtCache;

  Result<FaultResolution> ensure_present(TaskClock& t, std::uint64_t vpn,
                                         AccessKind kind, SpaceVma& vma);
  Result<void> access_bytes(TaskClock& t, std::uint64_t va, AccessKind kind,
                            std::span<std::uint8_t> out,
                            std::span<const std::uint8_t> in);
  std::uint64_t cow_if_shared(SpaceVma& vma, std::uint64_t vpn);

  Fabric* fabric_ = nullptr;
  NodeId node_;
};

// Builds the space from a fetched descriptor. The publishing node is
// prepended to the ancestor table, so descriptor owner k becomes k+1 in the
// child's view; inherited_keys supplies the per-VMA keys for owners >= 2.
Result<AddressSpace> map_from_descriptor(
    Fabric& fabric, NodeId node, const ContainerDescriptor& desc,
    NodeId publisher, const std::vector<std::vector<DcKey>>& inherited_keys);

// Short-lived snapshot of a finished child: page table plus read pages,
// shared copy-on-write with later children of the same parent.
class PtCache {
 public:
  struct Entry {
    NodeId parent_node;
    std::uint64_t parent_handle = 0;
    std::vector<AncestorEntry> ancestors;
    std::vector<SpaceVma> vmas;  // tables included; frames refcount-shared
    std::vector<std::uint8_t> isolation;
    std::array<std::uint8_t, kRegisterBytes> registers{};
    std::vector<FileEntry> files;
    SimTime expires_at = 0;
  };

  PtCache(Fabric* fabric, NodeId node) : fabric_(fabric), node_(node) {}
  PtCache(const PtCache&) = delete;
  PtCache& operator=(const PtCache&) = delete;
  ~PtCache() { clear(); }

  void put(TaskClock& t, const DescriptorId& parent, const AddressSpace& space,
           const std::vector<std::uint8_t>& isolation,
           const std::array<std::uint8_t, kRegisterBytes>& registers,
           const std::vector<FileEntry>& files);

  // Returns the live entry or nullptr; expired entries are dropped.
  const Entry* get(SimTime now, const DescriptorId& parent);

  // Clones the snapshot into a fresh space on this cache's node (zero
  // network traffic; frames shared copy-on-write).
  AddressSpace materialize(const Entry& entry) const;

  void drop_expired(SimTime now);
  void clear();
  std::size_t size() const { return entries_.size(); }

 private:
  void release_entry(const Entry& e);

  Fabric* fabric_;
  NodeId node_;  // frames snapshotted here live on this node
  std::map<std::pair<std::uint32_t, std::uint64_t>, Entry> entries_;
};

}  // namespace rfork
