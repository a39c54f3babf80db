#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rforksim/fabric.hpp"

namespace rfork {

// --- page table entry -------------------------------------------------------
// Packed 64-bit entry. Bit 0: present. Bit 58: remote (page lives on an
// ancestor). Bits 55:52: owner index into the ancestor table (0 = the node
// publishing the descriptor). Bits 51:12: physical page number; 0 means the
// owner has no resolvable frame (page must be restored through RPC).
class Pte {
 public:
  static constexpr std::uint64_t kPresent = 1ull << 0;
  static constexpr std::uint64_t kRemote = 1ull << 58;
  static constexpr unsigned kOwnerShift = 52;
  static constexpr std::uint64_t kOwnerMask = 0xfull << kOwnerShift;
  static constexpr unsigned kPfnShift = 12;
  static constexpr std::uint64_t kPfnMask = ((1ull << 40) - 1) << kPfnShift;

  Pte() = default;
  static Pte from_raw(std::uint64_t raw) { return Pte(raw); }
  static Pte local(std::uint64_t pfn) {
    return Pte(kPresent | ((pfn << kPfnShift) & kPfnMask));
  }
  static Pte remote(std::uint8_t owner, std::uint64_t pfn) {
    return Pte(kRemote | ((static_cast<std::uint64_t>(owner) << kOwnerShift) & kOwnerMask) |
               ((pfn << kPfnShift) & kPfnMask));
  }

  std::uint64_t raw() const { return raw_; }
  bool present() const { return raw_ & kPresent; }
  bool is_remote() const { return raw_ & kRemote; }
  std::uint8_t owner() const {
    return static_cast<std::uint8_t>((raw_ & kOwnerMask) >> kOwnerShift);
  }
  std::uint64_t pfn() const { return (raw_ & kPfnMask) >> kPfnShift; }

  bool operator==(const Pte&) const = default;

 private:
  explicit Pte(std::uint64_t raw) : raw_(raw) {}
  std::uint64_t raw_ = 0;
};

// --- descriptor data model --------------------------------------------------

inline constexpr std::uint8_t kProtRead = 1;
inline constexpr std::uint8_t kProtWrite = 2;
inline constexpr std::uint8_t kProtExec = 4;
inline constexpr std::uint8_t kVmaGrowsDown = 1;
inline constexpr std::uint8_t kVmaShared = 2;

inline constexpr std::size_t kRegisterBytes = 256;
inline constexpr std::size_t kMaxAncestors = 15;

struct AncestorEntry {
  NodeId node;
  std::uint64_t handle_id = 0;
  bool operator==(const AncestorEntry&) const = default;
};

struct DescVma {
  std::uint32_t vma_id = 0;
  std::uint64_t start_va = 0;  // page aligned, end exclusive
  std::uint64_t end_va = 0;
  std::uint8_t prot = kProtRead | kProtWrite;
  std::uint8_t flags = 0;
  DcKey dc_key;  // guards this VMA's publisher-held pages
  std::vector<std::pair<std::uint64_t, Pte>> ptes;  // (vpn, entry), vpn-sorted
  bool operator==(const DescVma&) const = default;
};

struct FileEntry {
  std::uint32_t fd = 0;
  std::uint32_t flags = 0;
  std::uint64_t offset = 0;
  std::string path;
  bool operator==(const FileEntry&) const = default;
};

// Parent metadata needed to fork: address layout and remote-tagged page
// table, never page contents.
struct ContainerDescriptor {
  std::uint64_t handle_id = 0;
  std::vector<std::uint8_t> isolation;  // opaque cgroup/namespace stand-in
  std::array<std::uint8_t, kRegisterBytes> registers{};
  std::vector<AncestorEntry> ancestors;
  std::vector<DescVma> vmas;
  std::vector<FileEntry> files;

  std::uint64_t pte_count() const;
  bool operator==(const ContainerDescriptor&) const = default;
};

struct DescriptorId {
  NodeId node;
  std::uint64_t handle_id = 0;
  std::uint64_t key = 0;  // authentication secret
  bool operator==(const DescriptorId&) const = default;
};

// --- wire format -------------------------------------------------------------
// Little-endian. Header: magic u64, version u16, handle_id u64,
// ancestor_count u8, vma_count u32, file_count u32, isolation_len u32,
// isolation bytes, registers (256) -- 287 bytes before the isolation block.
// Then ancestors (node u32, handle u64), VMAs (vma_id u32, start u64,
// end u64, prot u8, flags u8, dc_key 12B, pte_count u32, pte_count x
// (vpn u64, pte u64)) and files (fd u32, flags u32, offset u64,
// path_len u16, path).
inline constexpr std::uint64_t kDescriptorMagic = 0x4D495430;
inline constexpr std::uint16_t kDescriptorVersion = 1;
inline constexpr std::size_t kHeaderFixedBytes = 31 + kRegisterBytes;  // 287
inline constexpr std::size_t kAncestorWireBytes = 12;
inline constexpr std::size_t kVmaFixedWireBytes = 38;
inline constexpr std::size_t kPteWireBytes = 16;

std::vector<std::uint8_t> serialize(const ContainerDescriptor& d);
std::size_t serialized_size(const ContainerDescriptor& d);

// On failure the Result carries Err::MalformedDescriptor and the byte offset
// of the first offending byte in detail().
Result<ContainerDescriptor> deserialize(const std::uint8_t* data, std::size_t size);
Result<ContainerDescriptor> deserialize(const std::vector<std::uint8_t>& bytes);

void dump_descriptor(const ContainerDescriptor& d, std::ostream& out);

// --- publish / fetch / reclaim ----------------------------------------------

// Node-side registry of published descriptors. The serialized bytes are
// pinned in the node's simulated physical memory behind a dedicated DC
// target, so a child fetches them with an ordinary one-sided read.
class DescriptorHost {
 public:
  struct Record {
    std::uint64_t handle = 0;
    std::uint64_t auth_key = 0;
    std::uint64_t pin_pfn = 0;
    std::uint64_t pin_len = 0;
    std::uint64_t pin_pages = 0;
    DcKey desc_key;
    std::vector<std::uint32_t> vma_ids;
    std::vector<DcKey> vma_keys;     // fresh targets created for this prepare
    std::vector<bool> vma_revoked;
    // Per VMA, keys for pages owned by descriptor ancestors 1..k; handed to
    // the child in the auth reply (the wire descriptor only carries the
    // publisher's own key per VMA).
    std::vector<std::vector<DcKey>> inherited_keys;
    std::uint64_t container_id = 0;
    SimTime published_at = 0;
  };

  bool contains(std::uint64_t handle) const {
    return records_.count(handle) != 0;
  }
  const Record* find(std::uint64_t handle) const;
  Record* find(std::uint64_t handle);
  const std::map<std::uint64_t, Record>& records() const { return records_; }

  // Pins the serialized descriptor, assigns the handle (written into the
  // descriptor before serialization) and a fresh random auth key.
  DescriptorId publish(Fabric& fabric, TaskClock& t, NodeId node,
                       ContainerDescriptor& desc, const DcKey& desc_target,
                       std::vector<std::vector<DcKey>> inherited_keys,
                       std::uint64_t container_id);

  // Unpins and destroys every DC target created by the matching prepare.
  Result<void> reclaim(Fabric& fabric, TaskClock& t, NodeId node,
                       const DescriptorId& id);

  // Registers the authentication RPC handler for `node`.
  void install_auth_handler(Fabric& fabric, NodeId node);

 private:
  std::map<std::uint64_t, Record> records_;
  std::uint64_t next_handle_ = 1;
};

inline constexpr std::uint32_t kAuthHandlerId = 1;
inline constexpr std::uint32_t kFallbackHandlerId = 2;

struct AuthRequest {
  std::uint64_t handle = 0;
  std::uint64_t key = 0;
};

struct AuthReply {
  Err err = Err::None;
  std::uint64_t pin_pfn = 0;  // never disclosed unless the key matched
  std::uint64_t pin_len = 0;
  DcKey desc_key;
  std::vector<std::vector<DcKey>> inherited_keys;
};

struct FetchResult {
  ContainerDescriptor desc;
  std::vector<std::vector<DcKey>> inherited_keys;
  std::uint64_t bytes_fetched = 0;
};

// Step one of the fetch protocol on its own: the authentication RPC. A
// resume that already holds a cached page table still authenticates but
// skips the read.
Result<AuthReply> auth_descriptor(Fabric& fabric, TaskClock& t,
                                  NodeId child_node, const DescriptorId& id);

// Two-step fetch: authentication RPC, then a one-sided read of the pinned
// bytes. Wrong keys learn nothing and cost no read.
Result<FetchResult> fetch_descriptor(Fabric& fabric, TaskClock& t,
                                     NodeId child_node, const DescriptorId& id);

}  // namespace rfork
