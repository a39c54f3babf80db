#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "rforksim/time_types.hpp"

namespace rfork {

// Calibrated latency/bandwidth constants. Every simulated duration is a sum
// of these; they load from a key=value config file under exactly these names.
struct CostModel {
  SimTime rdma_rtt = 3 * kMicrosecond;
  std::uint64_t rdma_bandwidth = 12'500'000'000ull;  // bytes/s (100 Gbps)
  SimTime rpc_fallback_per_page = 65 * kMicrosecond;
  SimTime dfs_read_per_page = 100 * kMicrosecond;
  SimTime unpause = 500 * kMicrosecond;
  SimTime lean_container_setup = 2 * kMillisecond;
  SimTime local_fork = 1 * kMillisecond;
  SimTime coldstart_local = 100 * kMillisecond;
  SimTime coldstart_remote = 1000 * kMillisecond;
  SimTime cr_restore_local = 5 * kMillisecond;
  SimTime cr_restore_remote = 24 * kMillisecond;
  SimTime checkpoint_per_mb = 500 * kMicrosecond;
  std::uint64_t file_copy_bandwidth = 12'500'000'000ull;  // bytes/s
  SimTime rc_connect = 4 * kMillisecond;
  SimTime dc_connect = 1 * kMicrosecond;
  SimTime cache_keepalive = 30 * kSecond;

  void validate() const;  // throws ConfigError unless all strictly positive
};

// Full run configuration: cost model plus simulator knobs. Serialized back
// out with the run outputs for reproducibility.
struct SimConfig {
  CostModel cost;
  std::uint64_t seed = 1;

  // fabric
  std::uint32_t handler_count = 2;       // logical RPC servers per node
  SimTime rpc_timeout = 10 * kMillisecond;

  // memspace
  std::uint32_t prefetch_window = 1;     // pages prefetched per rdma fault
  bool strict_revocation = false;        // rejected read => FaultError, no RPC
  SimTime pt_cache_keep = 5 * kSecond;

  // access
  std::uint32_t target_pool_capacity = 64;
  std::uint32_t target_pool_watermark = 16;
  SimTime target_pool_refill_period = 10 * kMillisecond;

  // orchestrator
  std::uint32_t lean_pool_size = 8;
  SimTime prepare_per_pte = 50;          // ns per PTE during fork_prepare
  SimTime map_per_pte = 150;             // ns per PTE installing a fetched table
  bool retain_parent_after_reclaim = false;

  // platform
  std::uint32_t node_slots = 16;         // concurrent invocations per invoker
  SimTime seed_keepalive = 600 * kSecond;
  SimTime renewal_margin = 30 * kSecond;
  SimTime max_function_lifetime = 900 * kSecond;
  SimTime gc_period = 60 * kSecond;
  SimTime serialize_per_mb = 100 * kMillisecond;  // message-mode state transfer
  std::uint32_t caching_pool_cap = 0;    // 0 = unbounded cached instances

  // bench
  SimTime mem_sample_period = 100 * kMillisecond;

  void validate() const;
};

// Parse "3us", "0.5ms", "30s", "12.5GB/s", "42". Durations return ns,
// bandwidths bytes/s, plain integers as-is.
SimTime parse_duration(const std::string& text);
std::uint64_t parse_bandwidth(const std::string& text);

SimConfig load_config(const std::string& path);
SimConfig parse_config(std::istream& in, const std::string& origin);
void write_config(const SimConfig& cfg, std::ostream& out);

}  // namespace rfork
