#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rforksim/orchestrator.hpp"

namespace rfork {

// Per-function workload model: container image size, the slice of it an
// invocation touches, and pure compute time.
struct FunctionModel {
  std::string name;
  std::uint32_t image_mb = 64;
  std::uint32_t working_set_mb = 64;
  double touch_ratio = 1.0;  // in (0, 1]
  SimTime exec = 0;

  std::uint64_t image_pages() const { return std::uint64_t(image_mb) * 256; }
  std::uint64_t working_set_pages() const {
    return std::uint64_t(working_set_mb) * 256;
  }
  std::uint64_t touched_pages() const {
    const double raw = touch_ratio * static_cast<double>(working_set_pages());
    const auto up = static_cast<std::uint64_t>(raw);
    return raw > static_cast<double>(up) ? up + 1 : up;  // ceil
  }
  void validate() const;
};

enum class Strategy : std::uint8_t {
  Coldstart,
  Caching,
  CriuLocal,
  CriuRemote,
  Mitosis,
};

const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);  // throws ConfigError

enum class SeedKind : std::uint8_t { LongLived, ShortLived };

struct SeedRecord {
  std::string function;
  DescriptorId id;
  SimTime deployed_at = 0;
  SeedKind kind = SeedKind::LongLived;
};

struct InvocationResult {
  SimTime arrival = 0;
  std::string function;
  Strategy strategy = Strategy::Coldstart;
  SimTime queue_ns = 0;
  SimTime startup_ns = 0;
  SimTime exec_ns = 0;
  SimTime done = 0;
  NodeId invoker;
  bool remote = false;  // paid the remote-class startup cost
  bool cold = false;
  bool failed = false;
  Err error = Err::None;
  PagingStats paging;
  std::uint64_t net_bytes = 0;

  SimTime total_ns() const { return queue_ns + startup_ns + exec_ns; }
};

enum class StateMode : std::uint8_t { Fork, Message };

struct DagNode {
  std::string id;
  std::string function;
  std::vector<std::string> upstreams;
  std::optional<StateMode> mode;  // unset: use the workflow default
};

struct Dag {
  std::vector<DagNode> nodes;
};

Dag parse_dag(std::istream& in, const std::string& origin);
Dag load_dag(const std::string& path);

struct WorkflowResult {
  std::uint64_t workflow_id = 0;
  SimTime started = 0;
  SimTime finished = 0;
  SimTime serialization_ns = 0;  // message-mode serialize charge, total
  bool torn_down = false;         // fork tree reclaimed
  std::vector<InvocationResult> invocations;
};

// Tracks current/peak provisioned instance counts per function.
struct ProvisionStats {
  std::uint32_t current = 0;
  std::uint32_t peak = 0;
  void add(std::uint32_t n = 1) {
    current += n;
    if (current > peak) peak = current;
  }
  void sub(std::uint32_t n = 1) { current -= n; }
};

// Fork-aware control plane over a cluster of invokers. Owns the seed store,
// per-workflow fork trees and the pluggable startup strategies including the
// non-fork baselines.
class Coordinator {
 public:
  Coordinator(Cluster& cluster, Strategy strategy);

  void register_function(const FunctionModel& fn);  // throws ConfigError
  const FunctionModel* function(const std::string& name) const;
  Strategy strategy() const { return strategy_; }

  // One function call arriving at `arrival`. Placement is round-robin among
  // least-loaded invokers unless pinned.
  InvocationResult invoke(SimTime arrival, const std::string& name);
  InvocationResult invoke_on(SimTime arrival, const std::string& name,
                             NodeId invoker);

  WorkflowResult run_workflow(SimTime arrival, const Dag& dag,
                              StateMode default_mode);

  // Periodic per-invoker garbage collection. Runs independently of the
  // coordinator, so seeds never outlive the function lifetime cap even when
  // the coordinator is gone. Returns the descriptors reclaimed.
  std::vector<DescriptorId> gc_tick(NodeId node, TaskClock& t);
  void start_gc();  // self-rescheduling gc events on every invoker

  void crash_coordinator(SimTime at) { crashed_at_ = at; }
  bool coordinator_crashed_by(SimTime t) const {
    return crashed_at_ && *crashed_at_ <= t;
  }

  const std::map<std::string, SeedRecord>& seed_store() const { return store_; }
  const ProvisionStats& provisioned(const std::string& fn) const;
  std::uint64_t hosted_seed_count() const;

  // Current provisioned bytes on one invoker (cached instances, images,
  // seeds); the bench samples this on a fixed grid.
  std::int64_t provisioned_bytes(NodeId node) const {
    return invokers_[node.addr].provisioned_bytes;
  }

  Cluster& cluster() { return cluster_; }

 private:
  struct CachedInstance {
    SimTime free_at = 0;
    SimTime idle_since = 0;
  };

  struct HostedSeed {
    DescriptorId id;
    SimTime deployed_at = 0;
    SeedKind kind = SeedKind::LongLived;
    std::string function;
    bool retired = false;  // superseded; reclaim as soon as refs drain
  };

  struct InvokerState {
    std::vector<SimTime> slot_free;
    std::set<std::string> images;  // pulled container images
    std::map<std::string, std::vector<CachedInstance>> cached;
    std::vector<HostedSeed> seeds;
    std::int64_t provisioned_bytes = 0;
  };

  NodeId pick_invoker();
  std::pair<std::size_t, SimTime> reserve_slot(InvokerState& inv, SimTime at);

  // Startup phases per strategy; each advances `t` and fills the result.
  void startup_coldstart(TaskClock& t, InvokerState& inv,
                         const FunctionModel& fn, InvocationResult& r);
  // Returns the index of the paused instance serving this invocation.
  std::size_t startup_caching(TaskClock& t, InvokerState& inv,
                              const FunctionModel& fn, InvocationResult& r);
  Container* startup_mitosis(TaskClock& t, NodeId node, const FunctionModel& fn,
                             InvocationResult& r);

  // Fork-resume from an arbitrary seed; shared by invoke and workflows.
  Container* resume_from_seed(TaskClock& t, NodeId node, const DescriptorId& id,
                              InvocationResult& r);

  void run_exec(TaskClock& t, Container* container, const FunctionModel& fn,
                std::uint64_t region_vpn, std::uint64_t region_pages,
                std::uint64_t touched, InvocationResult& r);

  void plant_seed(TaskClock& t, NodeId node, const FunctionModel& fn);
  Result<DescriptorId> renew_seed(TaskClock& t, SeedRecord& rec);
  void retire_hosted(const DescriptorId& id);
  void schedule_gc_event(NodeId node);

  InvocationResult run_invocation(SimTime arrival, const std::string& name,
                                  std::optional<NodeId> pinned);

  Cluster& cluster_;
  Strategy strategy_;
  Rng rng_;
  std::map<std::string, FunctionModel> functions_;
  std::map<std::string, SeedRecord> store_;
  std::set<std::string> planting_;  // functions with a seed plant in flight
  std::map<std::string, ProvisionStats> provisioned_;
  std::vector<InvokerState> invokers_;
  std::optional<SimTime> crashed_at_;
  std::uint32_t rr_next_ = 0;
  std::uint64_t next_workflow_ = 1;
  bool gc_started_ = false;

  static constexpr std::uint64_t kContainerBaseVa = 1ull << 32;
};

}  // namespace rfork
