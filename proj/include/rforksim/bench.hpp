#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rforksim/platform.hpp"

namespace rfork {

struct TraceEvent {
  SimTime at = 0;
  std::string function;
};

struct Trace {
  std::vector<TraceEvent> events;  // non-decreasing in time
};

// Piecewise-homogeneous Poisson arrivals: base_rps outside the spike window,
// spike_rps inside. Deterministic per seed.
Trace gen_spike_trace(double base_rps, double spike_rps, double spike_start_s,
                      double spike_len_s, double total_s, std::uint64_t seed,
                      const std::string& function = "f");

// Trace files are "t_ms,function" lines.
Trace load_trace(const std::string& path);
Trace parse_trace(std::istream& in, const std::string& origin);
void save_trace(const Trace& trace, std::ostream& out);

// Per-minute count histograms ("minute,count[,function]" lines) spread
// uniformly within each minute.
Trace convert_minute_histogram(std::istream& in, const std::string& origin,
                               const std::string& default_function);

std::vector<FunctionModel> parse_functions(std::istream& in,
                                           const std::string& origin);
std::vector<FunctionModel> load_functions(const std::string& path);

struct MemPoint {
  SimTime t = 0;
  std::uint32_t node = 0;
  std::int64_t provisioned_bytes = 0;
  std::int64_t runtime_bytes = 0;
};

struct Metrics {
  Strategy strategy = Strategy::Coldstart;
  std::vector<InvocationResult> rows;
  std::vector<MemPoint> memory;
  SimTime fabric_total_ns = 0;
  std::uint64_t fabric_total_bytes = 0;
  std::uint64_t rdma_reads = 0;
  std::uint64_t rpc_calls = 0;
  // peak provisioned instances per function, for the provisioning law
  std::map<std::string, std::uint32_t> peak_instances;
  std::uint64_t seeds_planted_peak = 0;
};

struct ReplaySetup {
  SimConfig config;
  std::uint32_t nodes = 8;
  Strategy strategy = Strategy::Mitosis;
  std::vector<FunctionModel> functions;
};

// Runs the whole simulation for one trace under one strategy. Fails fast on
// config errors; internal inconsistencies (ledger mismatch) throw
// SimAssertionError.
Metrics replay(const Trace& trace, const ReplaySetup& setup);

// Nearest-rank percentile, p in (0,100].
SimTime percentile_nearest_rank(std::vector<SimTime> values, double p);

// Writes invocations.csv, memory.csv, summary.txt and config.txt.
void report(const Metrics& metrics, const SimConfig& config,
            const std::string& out_dir);

void write_invocations_csv(const Metrics& metrics, std::ostream& out);
void write_memory_csv(const Metrics& metrics, std::ostream& out);
void write_summary(const Metrics& metrics, std::ostream& out);

}  // namespace rfork
