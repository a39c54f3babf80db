#include "rforksim/bench.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "rforksim/rng.hpp"

namespace rfork {

namespace {

std::string trim_copy(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double to_double(const std::string& s, const std::string& where) {
  try {
    return std::stod(trim_copy(s));
  } catch (const std::exception&) {
    throw ConfigError(where + ": not a number: '" + s + "'");
  }
}

// Microseconds with nanosecond precision, deterministic formatting.
std::string us_str(SimTime ns) {
  std::ostringstream os;
  os << ns / 1000;
  const SimTime frac = ns % 1000;
  if (frac != 0) {
    os << '.';
    os << char('0' + frac / 100) << char('0' + (frac / 10) % 10)
       << char('0' + frac % 10);
  }
  return os.str();
}

}  // namespace

Trace gen_spike_trace(double base_rps, double spike_rps, double spike_start_s,
                      double spike_len_s, double total_s, std::uint64_t seed,
                      const std::string& function) {
  if (base_rps < 0 || spike_rps < 0 || total_s < 0)
    throw ConfigError("trace rates and durations must be >= 0");
  Trace trace;
  Rng rng(seed);
  const double spike_end_s = spike_start_s + spike_len_s;
  const double segments[3][3] = {
      {0.0, std::min(spike_start_s, total_s), base_rps},
      {std::min(spike_start_s, total_s), std::min(spike_end_s, total_s), spike_rps},
      {std::min(spike_end_s, total_s), total_s, base_rps},
  };
  for (const auto& seg : segments) {
    const double lo = seg[0], hi = seg[1], rate = seg[2];
    if (rate <= 0 || hi <= lo) continue;
    double t = lo;
    for (;;) {
      const double u = rng.uniform();
      t += -std::log1p(-u) / rate;
      if (t >= hi) break;
      trace.events.push_back(
          TraceEvent{static_cast<SimTime>(std::llround(t * 1e9)), function});
    }
  }
  std::sort(trace.events.begin(), trace.events.end(),
            [](const TraceEvent& a, const TraceEvent& b) { return a.at < b.at; });
  return trace;
}

Trace parse_trace(std::istream& in, const std::string& origin) {
  Trace trace;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim_copy(line);
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("t_ms", 0) == 0) continue;  // header
    const auto cols = split(line, ',');
    if (cols.size() != 2)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected t_ms,function");
    const double t_ms = to_double(cols[0], origin);
    trace.events.push_back(
        TraceEvent{static_cast<SimTime>(std::llround(t_ms * 1e6)),
                   trim_copy(cols[1])});
  }
  for (std::size_t i = 1; i < trace.events.size(); ++i) {
    if (trace.events[i].at < trace.events[i - 1].at)
      throw ConfigError(origin + ": trace times must be non-decreasing");
  }
  return trace;
}

Trace load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trace file '" + path + "'");
  return parse_trace(in, path);
}

void save_trace(const Trace& trace, std::ostream& out) {
  out << "t_ms,function\n";
  for (const auto& e : trace.events) {
    out << (e.at / kMillisecond);
    const SimTime frac = e.at % kMillisecond;  // ns within the millisecond
    if (frac != 0) {
      std::ostringstream os;
      os << '.' << std::setw(6) << std::setfill('0') << frac;
      std::string s = os.str();
      while (s.size() > 2 && s.back() == '0') s.pop_back();
      out << s;
    }
    out << ',' << e.function << '\n';
  }
}

Trace convert_minute_histogram(std::istream& in, const std::string& origin,
                               const std::string& default_function) {
  Trace trace;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim_copy(line);
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() != 2 && cols.size() != 3)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected minute,count[,function]");
    const double minute = to_double(cols[0], origin);
    const double count = to_double(cols[1], origin);
    const std::string fn =
        cols.size() == 3 ? trim_copy(cols[2]) : default_function;
    if (count < 0) throw ConfigError(origin + ": negative count");
    const auto n = static_cast<std::uint64_t>(count);
    for (std::uint64_t i = 0; i < n; ++i) {
      const double t_s = minute * 60.0 + (static_cast<double>(i) + 0.5) * 60.0 /
                                             static_cast<double>(n);
      trace.events.push_back(
          TraceEvent{static_cast<SimTime>(std::llround(t_s * 1e9)), fn});
    }
  }
  std::sort(trace.events.begin(), trace.events.end(),
            [](const TraceEvent& a, const TraceEvent& b) { return a.at < b.at; });
  return trace;
}

std::vector<FunctionModel> parse_functions(std::istream& in,
                                           const std::string& origin) {
  std::vector<FunctionModel> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim_copy(line);
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("name,", 0) == 0) continue;  // header
    const auto cols = split(line, ',');
    if (cols.size() != 5)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected name,image_mb,working_set_mb,touch_ratio,exec_ms");
    FunctionModel fn;
    fn.name = trim_copy(cols[0]);
    fn.image_mb = static_cast<std::uint32_t>(to_double(cols[1], origin));
    fn.working_set_mb = static_cast<std::uint32_t>(to_double(cols[2], origin));
    fn.touch_ratio = to_double(cols[3], origin);
    fn.exec = static_cast<SimTime>(
        std::llround(to_double(cols[4], origin) * kMillisecond));
    fn.validate();
    out.push_back(std::move(fn));
  }
  return out;
}

std::vector<FunctionModel> load_functions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open function registry '" + path + "'");
  return parse_functions(in, path);
}

SimTime percentile_nearest_rank(std::vector<SimTime> values, double p) {
  sim_assert(!values.empty(), "percentile of empty sample");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
  if (rank == 0) rank = 1;
  if (rank > values.size()) rank = values.size();
  return values[rank - 1];
}

Metrics replay(const Trace& trace, const ReplaySetup& setup) {
  setup.config.validate();
  if (setup.nodes == 0) throw ConfigError("replay needs at least one node");
  if (setup.functions.empty()) throw ConfigError("replay needs functions");

  Cluster cluster(setup.config);
  for (std::uint32_t i = 0; i < setup.nodes; ++i) cluster.add_machine();
  Coordinator coord(cluster, setup.strategy);
  for (const auto& fn : setup.functions) coord.register_function(fn);
  for (const auto& e : trace.events) {
    if (!coord.function(e.function))
      throw ConfigError("trace references unregistered function '" +
                        e.function + "'");
  }
  coord.start_gc();

  Metrics m;
  m.strategy = setup.strategy;
  m.rows.reserve(trace.events.size());
  for (const auto& e : trace.events) {
    cluster.loop().schedule_at(e.at, [&coord, &m, &e] {
      m.rows.push_back(coord.invoke(e.at, e.function));
    });
  }

  // Memory series: sample provisioned and runtime bytes per node on a fixed
  // grid while the trace plays, plus a tail to watch the drain.
  const SimTime last_event = trace.events.empty() ? 0 : trace.events.back().at;
  const SimTime step = setup.config.mem_sample_period;
  const SimTime horizon = last_event + 60 * kSecond;
  for (SimTime t = 0; t <= horizon; t += step) {
    cluster.loop().schedule_at(t, [&cluster, &coord, &m, t, &setup] {
      for (std::uint32_t node = 0; node < setup.nodes; ++node) {
        m.memory.push_back(
            MemPoint{t, node, coord.provisioned_bytes(NodeId{node}),
                     cluster.fabric().node(NodeId{node}).metric_bytes()});
      }
    });
  }
  cluster.loop().run_until(horizon);

  m.fabric_total_ns = cluster.fabric().ledger().total_ns();
  m.fabric_total_bytes = cluster.fabric().ledger().total_bytes();
  m.rdma_reads = cluster.fabric().ledger().rdma_reads();
  m.rpc_calls = cluster.fabric().ledger().rpc_calls();
  for (const auto& fn : setup.functions)
    m.peak_instances[fn.name] = coord.provisioned(fn.name).peak;
  m.seeds_planted_peak =
      setup.strategy == Strategy::Mitosis
          ? [&] {
              std::uint64_t peak = 0;
              for (const auto& fn : setup.functions)
                peak += coord.provisioned(fn.name).peak;
              return peak;
            }()
          : 0;

  // Every byte the fabric moved must be attributed to exactly one row.
  std::uint64_t attributed = 0;
  for (const auto& r : m.rows) attributed += r.net_bytes;
  sim_assert(attributed == m.fabric_total_bytes,
             "ledger reconciliation: per-invocation bytes != fabric bytes");
  return m;
}

void write_invocations_csv(const Metrics& metrics, std::ostream& out) {
  out << "t_us,function,strategy,startup_us,exec_us,queue_us,"
         "faults_local,faults_rdma,faults_rpc,prefetched,net_bytes\n";
  for (const auto& r : metrics.rows) {
    out << us_str(r.arrival) << ',' << r.function << ','
        << strategy_name(r.strategy) << ',' << us_str(r.startup_ns) << ','
        << us_str(r.exec_ns) << ',' << us_str(r.queue_ns) << ','
        << r.paging.faults_local << ',' << r.paging.faults_rdma << ','
        << r.paging.faults_rpc << ',' << r.paging.pages_prefetched << ','
        << r.net_bytes << '\n';
  }
}

void write_memory_csv(const Metrics& metrics, std::ostream& out) {
  out << "t_ms,node,provisioned_bytes,runtime_bytes\n";
  for (const auto& p : metrics.memory) {
    out << (p.t / kMillisecond) << ',' << p.node << ',' << p.provisioned_bytes
        << ',' << p.runtime_bytes << '\n';
  }
}

void write_summary(const Metrics& metrics, std::ostream& out) {
  std::map<std::string, std::vector<const InvocationResult*>> by_strategy;
  for (const auto& r : metrics.rows)
    by_strategy[strategy_name(r.strategy)].push_back(&r);

  out << "invocations=" << metrics.rows.size() << "\n";
  for (const auto& [name, rows] : by_strategy) {
    std::vector<SimTime> startup, total;
    std::uint64_t failed = 0;
    startup.reserve(rows.size());
    total.reserve(rows.size());
    for (const auto* r : rows) {
      startup.push_back(r->startup_ns);
      total.push_back(r->total_ns());
      if (r->failed) ++failed;
    }
    auto mean = [](const std::vector<SimTime>& v) {
      if (v.empty()) return SimTime{0};
      long double s = 0;
      for (SimTime x : v) s += static_cast<long double>(x);
      return static_cast<SimTime>(s / static_cast<long double>(v.size()));
    };
    out << "strategy=" << name << " count=" << rows.size()
        << " failed=" << failed << "\n";
    out << "  startup_us p50=" << us_str(percentile_nearest_rank(startup, 50))
        << " p99=" << us_str(percentile_nearest_rank(startup, 99))
        << " mean=" << us_str(mean(startup)) << "\n";
    out << "  total_us   p50=" << us_str(percentile_nearest_rank(total, 50))
        << " p99=" << us_str(percentile_nearest_rank(total, 99))
        << " mean=" << us_str(mean(total)) << "\n";
  }
  out << "fabric_ns=" << metrics.fabric_total_ns
      << " fabric_bytes=" << metrics.fabric_total_bytes
      << " rdma_reads=" << metrics.rdma_reads
      << " rpc_calls=" << metrics.rpc_calls << "\n";
}

void report(const Metrics& metrics, const SimConfig& config,
            const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw ConfigError("cannot create output dir '" + out_dir + "'");

  auto open = [&](const char* name) {
    std::ofstream f(fs::path(out_dir) / name, std::ios::binary);
    if (!f) throw ConfigError(std::string("cannot write ") + name);
    return f;
  };
  {
    auto f = open("invocations.csv");
    write_invocations_csv(metrics, f);
  }
  {
    auto f = open("memory.csv");
    write_memory_csv(metrics, f);
  }
  {
    auto f = open("summary.txt");
    write_summary(metrics, f);
  }
  {
    auto f = open("config.txt");
    write_config(config, f);
  }
}

}  // namespace rfork
