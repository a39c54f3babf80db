#pragma once

#include <any>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rforksim/config.hpp"
#include "rforksim/errors.hpp"
#include "rforksim/event_loop.hpp"
#include "rforksim/rng.hpp"
#include "rforksim/time_types.hpp"

namespace rfork {

struct NodeId {
  std::uint32_t addr = 0;
  bool operator==(const NodeId&) const = default;
  auto operator<=>(const NodeId&) const = default;
};

// 12-byte access handle: the fabric-generated number plus the caller's key.
// Possession of a live key is the entire access check.
struct DcKey {
  std::uint32_t nic_num = 0;
  std::uint64_t user_key = 0;
  bool operator==(const DcKey&) const = default;
};

inline constexpr std::uint64_t kDcKeyBytes = 12;
inline constexpr std::uint64_t kDcTargetBytes = 144;  // parent-side accounting

struct PageRange {
  std::uint64_t start_pfn = 0;
  std::uint64_t count = 0;
};

struct DcTarget {
  DcKey key;
  bool live = true;
  SimTime destroyed_at = -1;
  std::vector<PageRange> guarded;

  bool covers(std::uint64_t pfn, std::uint64_t pages) const;
  // Live for a request delivered at time t (teardown is asynchronous:
  // requests delivered strictly before the destroy still succeed).
  bool live_at(SimTime t) const { return live || t < destroyed_at; }
};

// Aggregate charge record. Detailed per-op entries are only kept when
// `detailed` is set (tests assert cost additivity against them).
class CostLedger {
 public:
  enum class Op : std::uint8_t { RdmaRead, RdmaReject, Rpc, RpcTimeout, DcConnect };

  struct Entry {
    Op op;
    SimTime ns;
    std::uint64_t bytes;
  };

  void charge(Op op, SimTime ns, std::uint64_t bytes) {
    total_ns_ += ns;
    total_bytes_ += bytes;
    switch (op) {
      case Op::RdmaRead: ++rdma_reads_; break;
      case Op::RdmaReject: ++rdma_rejects_; break;
      case Op::Rpc: ++rpc_calls_; break;
      case Op::RpcTimeout: ++rpc_timeouts_; break;
      case Op::DcConnect: ++dc_connects_; break;
    }
    if (detailed) entries_.push_back(Entry{op, ns, bytes});
  }

  SimTime total_ns() const { return total_ns_; }
  std::uint64_t total_bytes() const { return total_bytes_; }
  std::uint64_t rdma_reads() const { return rdma_reads_; }
  std::uint64_t rdma_rejects() const { return rdma_rejects_; }
  std::uint64_t rpc_calls() const { return rpc_calls_; }
  std::uint64_t rpc_timeouts() const { return rpc_timeouts_; }
  std::uint64_t dc_connects() const { return dc_connects_; }
  const std::vector<Entry>& entries() const { return entries_; }

  bool detailed = false;

 private:
  SimTime total_ns_ = 0;
  std::uint64_t total_bytes_ = 0;
  std::uint64_t rdma_reads_ = 0;
  std::uint64_t rdma_rejects_ = 0;
  std::uint64_t rpc_calls_ = 0;
  std::uint64_t rpc_timeouts_ = 0;
  std::uint64_t dc_connects_ = 0;
  std::vector<Entry> entries_;
};

// What an RPC handler returns: the reply value, how long one logical server
// is occupied serving it, and how many payload bytes the reply moves (page
// payloads are accounted; small control replies declare 0).
struct HandlerOutcome {
  std::any reply;
  SimTime service_time = 0;
  std::uint64_t reply_bytes = 0;
};

using RpcHandler = std::function<HandlerOutcome(const std::any& request)>;

using Frame = std::vector<std::uint8_t>;  // always kPageSize long

class Fabric;

// One simulated machine: physical frames, revocable access targets, and a
// small bank of RPC servers. All mutation is serialized by the owning run.
//
// Frames live in chunked arrays indexed by pfn. Pfns are handed out
// monotonically and never reused, so stale page-table entries can never
// alias a newer container's memory; fully-dead chunks release their storage.
class Node {
 public:
  NodeId id;

  // -- physical memory ------------------------------------------------------
  std::uint64_t alloc_frame();
  std::uint64_t alloc_frames(std::uint64_t count);  // contiguous pfns
  void share_frame(std::uint64_t pfn);
  void release_frame(std::uint64_t pfn);
  std::uint32_t frame_refs(std::uint64_t pfn) const;
  Frame* frame(std::uint64_t pfn);
  const Frame* frame(std::uint64_t pfn) const;
  std::uint64_t live_frames() const { return live_frames_; }

  // -- accounting -----------------------------------------------------------
  std::int64_t metric_bytes() const { return metric_bytes_; }
  void add_metric(SimTime at, std::int64_t delta);

  bool crashed() const { return crashed_at_.has_value(); }
  bool crashed_by(SimTime t) const {
    return crashed_at_.has_value() && *crashed_at_ <= t;
  }

  void register_handler(std::uint32_t handler_id, RpcHandler fn) {
    handlers_[handler_id] = std::move(fn);
  }

 private:
  friend class Fabric;

  static constexpr std::uint64_t kChunkPages = 4096;
  struct FrameChunk {
    std::vector<Frame> frames{kChunkPages};
    std::vector<std::uint32_t> refs = std::vector<std::uint32_t>(kChunkPages, 0);
    std::uint32_t live = 0;
  };

  FrameChunk* chunk_of(std::uint64_t pfn) {
    const std::uint64_t c = pfn / kChunkPages;
    return c < chunks_.size() ? chunks_[c].get() : nullptr;
  }
  const FrameChunk* chunk_of(std::uint64_t pfn) const {
    const std::uint64_t c = pfn / kChunkPages;
    return c < chunks_.size() ? chunks_[c].get() : nullptr;
  }

  std::uint32_t next_nic_ = 1;
  std::uint64_t next_pfn_ = 1;  // pfn 0 is reserved for "no physical page"
  std::map<std::uint32_t, DcTarget> targets_;
  std::vector<std::unique_ptr<FrameChunk>> chunks_;
  std::vector<Frame> frame_pool_;  // recycled page buffers
  std::uint64_t live_frames_ = 0;
  std::map<std::uint32_t, RpcHandler> handlers_;
  std::vector<SimTime> server_free_;  // one entry per logical RPC server
  std::optional<SimTime> crashed_at_;
  std::int64_t metric_bytes_ = 0;
};

// Deterministic network of nodes: one-sided reads gated by DC keys, plus a
// connectionless RPC with a fixed number of logical servers per node.
class Fabric {
 public:
  explicit Fabric(const SimConfig& cfg);

  EventLoop& loop() { return loop_; }
  Rng& rng() { return rng_; }
  const SimConfig& config() const { return cfg_; }
  CostLedger& ledger() { return ledger_; }
  const CostLedger& ledger() const { return ledger_; }

  // Nodes may join at any time (dynamic join allowed).
  NodeId register_node();
  std::size_t node_count() const { return nodes_.size(); }
  Node& node(NodeId id);
  const Node& node(NodeId id) const;

  void crash_node(NodeId id, SimTime at);

  // Creates a live target. Charges dc_connect; `t` may be null for background
  // (pool refill) creation, which still hits the ledger but no task waits.
  DcKey create_dc_target(TaskClock* t, NodeId node, std::uint64_t user_key,
                         std::vector<PageRange> guarded);
  Result<void> destroy_dc_target(TaskClock& t, NodeId node, const DcKey& key);
  void set_target_ranges(NodeId node, const DcKey& key,
                         std::vector<PageRange> guarded);
  const DcTarget* find_target(NodeId node, const DcKey& key) const;

  // One-sided page read. byte_len must be a positive multiple of kPageSize.
  // Rejection (revoked/unknown key, uncovered range, crashed target node) is
  // a value; it still costs one round trip.
  Result<std::vector<std::uint8_t>> rdma_read(TaskClock& t, NodeId reader,
                                              NodeId dest, const DcKey& key,
                                              std::uint64_t start_pfn,
                                              std::uint64_t byte_len);

  // Same path without the page-granularity requirement; used for descriptor
  // fetches, which are sized to the byte.
  Result<std::vector<std::uint8_t>> rdma_read_raw(TaskClock& t, NodeId reader,
                                                  NodeId dest, const DcKey& key,
                                                  std::uint64_t start_pfn,
                                                  std::uint64_t byte_len);

  // Connectionless RPC. The handler runs once, occupying one of the node's
  // handler_count logical servers for its declared service time. Charges one
  // rdma_rtt each way plus service; request_bytes/reply_bytes feed the ledger.
  Result<std::any> rpc_call(TaskClock& t, NodeId src, NodeId dst,
                            std::uint32_t handler_id, const std::any& request,
                            std::uint64_t request_bytes = 0);

 private:
  Result<std::vector<std::uint8_t>> read_impl(TaskClock& t, NodeId reader,
                                              NodeId dest, const DcKey& key,
                                              std::uint64_t start_pfn,
                                              std::uint64_t byte_len);

  SimConfig cfg_;
  EventLoop loop_;
  Rng rng_;
  CostLedger ledger_;
  std::vector<Node> nodes_;
};

}  // namespace rfork
