#include "rforksim/config.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "rforksim/errors.hpp"

namespace rfork {

const char* err_name(Err e) {
  switch (e) {
    case Err::None: return "None";
    case Err::Rejected: return "Rejected";
    case Err::NoSuchTarget: return "NoSuchTarget";
    case Err::Timeout: return "Timeout";
    case Err::MissingAccessKey: return "MissingAccessKey";
    case Err::MalformedDescriptor: return "MalformedDescriptor";
    case Err::AuthFailed: return "AuthFailed";
    case Err::NoSuchDescriptor: return "NoSuchDescriptor";
    case Err::SegFault: return "SegFault";
    case Err::ProtFault: return "ProtFault";
    case Err::CorruptDescriptor: return "CorruptDescriptor";
    case Err::FaultError: return "FaultError";
    case Err::NoSuchVma: return "NoSuchVma";
    case Err::MaxHopsExceeded: return "MaxHopsExceeded";
    case Err::NoPage: return "NoPage";
  }
  return "Unknown";
}

std::string format_duration(SimTime t) {
  std::ostringstream os;
  if (t >= kSecond && t % kSecond == 0) {
    os << (t / kSecond) << "s";
  } else if (t >= kMillisecond && t % kMillisecond == 0) {
    os << (t / kMillisecond) << "ms";
  } else if (t >= kMicrosecond && t % kMicrosecond == 0) {
    os << (t / kMicrosecond) << "us";
  } else {
    os << t << "ns";
  }
  return os.str();
}

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

// Splits "12.5GB/s" into (12.5, "GB/s").
void split_number(const std::string& text, double* num, std::string* unit) {
  size_t i = 0;
  while (i < text.size() &&
         (std::isdigit(static_cast<unsigned char>(text[i])) || text[i] == '.' ||
          text[i] == '-' || text[i] == '+' || text[i] == 'e' ||
          (text[i] == 'E' && i + 1 < text.size() &&
           (std::isdigit(static_cast<unsigned char>(text[i + 1])) ||
            text[i + 1] == '-' || text[i + 1] == '+')))) {
    ++i;
  }
  const std::string digits = text.substr(0, i);
  if (digits.empty()) throw ConfigError("not a number: '" + text + "'");
  try {
    *num = std::stod(digits);
  } catch (const std::exception&) {
    throw ConfigError("not a number: '" + text + "'");
  }
  *unit = trim(text.substr(i));
}

}  // namespace

SimTime parse_duration(const std::string& text) {
  double num = 0;
  std::string unit;
  split_number(trim(text), &num, &unit);
  double scale = 1;  // bare numbers are nanoseconds
  if (unit == "ns" || unit.empty()) scale = 1;
  else if (unit == "us") scale = kMicrosecond;
  else if (unit == "ms") scale = kMillisecond;
  else if (unit == "s") scale = kSecond;
  else if (unit == "min") scale = 60.0 * kSecond;
  else throw ConfigError("unknown duration unit '" + unit + "'");
  return static_cast<SimTime>(std::llround(num * scale));
}

std::uint64_t parse_bandwidth(const std::string& text) {
  double num = 0;
  std::string unit;
  split_number(trim(text), &num, &unit);
  double scale = 1;  // bare numbers are bytes/s
  if (unit.empty() || unit == "B/s") scale = 1;
  else if (unit == "KB/s") scale = 1e3;
  else if (unit == "MB/s") scale = 1e6;
  else if (unit == "GB/s") scale = 1e9;
  else if (unit == "Gbps") scale = 1e9 / 8;
  else throw ConfigError("unknown bandwidth unit '" + unit + "'");
  return static_cast<std::uint64_t>(std::llround(num * scale));
}

void CostModel::validate() const {
  const struct { const char* name; SimTime v; } durations[] = {
      {"rdma_rtt", rdma_rtt},
      {"rpc_fallback_per_page", rpc_fallback_per_page},
      {"dfs_read_per_page", dfs_read_per_page},
      {"unpause", unpause},
      {"lean_container_setup", lean_container_setup},
      {"local_fork", local_fork},
      {"coldstart_local", coldstart_local},
      {"coldstart_remote", coldstart_remote},
      {"cr_restore_local", cr_restore_local},
      {"cr_restore_remote", cr_restore_remote},
      {"checkpoint_per_mb", checkpoint_per_mb},
      {"rc_connect", rc_connect},
      {"dc_connect", dc_connect},
      {"cache_keepalive", cache_keepalive},
  };
  for (const auto& d : durations) {
    if (d.v <= 0)
      throw ConfigError(std::string("cost model key '") + d.name +
                        "' must be strictly positive");
  }
  if (rdma_bandwidth == 0) throw ConfigError("rdma_bandwidth must be > 0");
  if (file_copy_bandwidth == 0)
    throw ConfigError("file_copy_bandwidth must be > 0");
}

void SimConfig::validate() const {
  cost.validate();
  if (handler_count == 0) throw ConfigError("handler_count must be > 0");
  if (node_slots == 0) throw ConfigError("node_slots must be > 0");
  if (rpc_timeout <= 0) throw ConfigError("rpc_timeout must be > 0");
  if (pt_cache_keep <= 0) throw ConfigError("pt_cache_keep must be > 0");
  if (target_pool_watermark > target_pool_capacity)
    throw ConfigError("target_pool_watermark exceeds target_pool_capacity");
  if (gc_period <= 0) throw ConfigError("gc_period must be > 0");
  if (mem_sample_period <= 0) throw ConfigError("mem_sample_period must be > 0");
}

namespace {

using Setter = std::function<void(SimConfig&, const std::string&)>;

std::uint64_t parse_u64(const std::string& v) {
  try {
    size_t pos = 0;
    const std::uint64_t r = std::stoull(trim(v), &pos);
    if (pos != trim(v).size()) throw ConfigError("trailing characters in '" + v + "'");
    return r;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("not an integer: '" + v + "'");
  }
}

bool parse_bool(const std::string& v) {
  const std::string t = trim(v);
  if (t == "true" || t == "1" || t == "on") return true;
  if (t == "false" || t == "0" || t == "off") return false;
  throw ConfigError("not a boolean: '" + v + "'");
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"rdma_rtt", [](SimConfig& c, const std::string& v) { c.cost.rdma_rtt = parse_duration(v); }},
      {"rdma_bandwidth", [](SimConfig& c, const std::string& v) { c.cost.rdma_bandwidth = parse_bandwidth(v); }},
      {"rpc_fallback_per_page", [](SimConfig& c, const std::string& v) { c.cost.rpc_fallback_per_page = parse_duration(v); }},
      {"dfs_read_per_page", [](SimConfig& c, const std::string& v) { c.cost.dfs_read_per_page = parse_duration(v); }},
      {"unpause", [](SimConfig& c, const std::string& v) { c.cost.unpause = parse_duration(v); }},
      {"lean_container_setup", [](SimConfig& c, const std::string& v) { c.cost.lean_container_setup = parse_duration(v); }},
      {"local_fork", [](SimConfig& c, const std::string& v) { c.cost.local_fork = parse_duration(v); }},
      {"coldstart_local", [](SimConfig& c, const std::string& v) { c.cost.coldstart_local = parse_duration(v); }},
      {"coldstart_remote", [](SimConfig& c, const std::string& v) { c.cost.coldstart_remote = parse_duration(v); }},
      {"cr_restore_local", [](SimConfig& c, const std::string& v) { c.cost.cr_restore_local = parse_duration(v); }},
      {"cr_restore_remote", [](SimConfig& c, const std::string& v) { c.cost.cr_restore_remote = parse_duration(v); }},
      {"checkpoint_per_mb", [](SimConfig& c, const std::string& v) { c.cost.checkpoint_per_mb = parse_duration(v); }},
      {"file_copy_bandwidth", [](SimConfig& c, const std::string& v) { c.cost.file_copy_bandwidth = parse_bandwidth(v); }},
      {"rc_connect", [](SimConfig& c, const std::string& v) { c.cost.rc_connect = parse_duration(v); }},
      {"dc_connect", [](SimConfig& c, const std::string& v) { c.cost.dc_connect = parse_duration(v); }},
      {"cache_keepalive", [](SimConfig& c, const std::string& v) { c.cost.cache_keepalive = parse_duration(v); }},
      {"seed", [](SimConfig& c, const std::string& v) { c.seed = parse_u64(v); }},
      {"handler_count", [](SimConfig& c, const std::string& v) { c.handler_count = static_cast<std::uint32_t>(parse_u64(v)); }},
      {"rpc_timeout", [](SimConfig& c, const std::string& v) { c.rpc_timeout = parse_duration(v); }},
      {"prefetch_window", [](SimConfig& c, const std::string& v) { c.prefetch_window = static_cast<std::uint32_t>(parse_u64(v)); }},
      {"strict_revocation", [](SimConfig& c, const std::string& v) { c.strict_revocation = parse_bool(v); }},
      {"pt_cache_keep", [](SimConfig& c, const std::string& v) { c.pt_cache_keep = parse_duration(v); }},
      {"target_pool_capacity", [](SimConfig& c, const std::string& v) { c.target_pool_capacity = static_cast<std::uint32_t>(parse_u64(v)); }},
      {"target_pool_watermark", [](SimConfig& c, const std::string& v) { c.target_pool_watermark = static_cast<std::uint32_t>(parse_u64(v)); }},
      {"target_pool_refill_period", [](SimConfig& c, const std::string& v) { c.target_pool_refill_period = parse_duration(v); }},
      {"lean_pool_size", [](SimConfig& c, const std::string& v) { c.lean_pool_size = static_cast<std::uint32_t>(parse_u64(v)); }},
      {"prepare_per_pte", [](SimConfig& c, const std::string& v) { c.prepare_per_pte = parse_duration(v); }},
      {"map_per_pte", [](SimConfig& c, const std::string& v) { c.map_per_pte = parse_duration(v); }},
      {"retain_parent_after_reclaim", [](SimConfig& c, const std::string& v) { c.retain_parent_after_reclaim = parse_bool(v); }},
      {"node_slots", [](SimConfig& c, const std::string& v) { c.node_slots = static_cast<std::uint32_t>(parse_u64(v)); }},
      {"seed_keepalive", [](SimConfig& c, const std::string& v) { c.seed_keepalive = parse_duration(v); }},
      {"renewal_margin", [](SimConfig& c, const std::string& v) { c.renewal_margin = parse_duration(v); }},
      {"max_function_lifetime", [](SimConfig& c, const std::string& v) { c.max_function_lifetime = parse_duration(v); }},
      {"gc_period", [](SimConfig& c, const std::string& v) { c.gc_period = parse_duration(v); }},
      {"serialize_per_mb", [](SimConfig& c, const std::string& v) { c.serialize_per_mb = parse_duration(v); }},
      {"caching_pool_cap", [](SimConfig& c, const std::string& v) { c.caching_pool_cap = static_cast<std::uint32_t>(parse_u64(v)); }},
      {"mem_sample_period", [](SimConfig& c, const std::string& v) { c.mem_sample_period = parse_duration(v); }},
  };
  return table;
}

}  // namespace

SimConfig parse_config(std::istream& in, const std::string& origin) {
  SimConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end())
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": unknown key '" + key + "'");
    try {
      it->second(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

SimConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in, path);
}

void write_config(const SimConfig& cfg, std::ostream& out) {
  out << "# cost model\n";
  out << "rdma_rtt=" << format_duration(cfg.cost.rdma_rtt) << "\n";
  out << "rdma_bandwidth=" << cfg.cost.rdma_bandwidth << "\n";
  out << "rpc_fallback_per_page=" << format_duration(cfg.cost.rpc_fallback_per_page) << "\n";
  out << "dfs_read_per_page=" << format_duration(cfg.cost.dfs_read_per_page) << "\n";
  out << "unpause=" << format_duration(cfg.cost.unpause) << "\n";
  out << "lean_container_setup=" << format_duration(cfg.cost.lean_container_setup) << "\n";
  out << "local_fork=" << format_duration(cfg.cost.local_fork) << "\n";
  out << "coldstart_local=" << format_duration(cfg.cost.coldstart_local) << "\n";
  out << "coldstart_remote=" << format_duration(cfg.cost.coldstart_remote) << "\n";
  out << "cr_restore_local=" << format_duration(cfg.cost.cr_restore_local) << "\n";
  out << "cr_restore_remote=" << format_duration(cfg.cost.cr_restore_remote) << "\n";
  out << "checkpoint_per_mb=" << format_duration(cfg.cost.checkpoint_per_mb) << "\n";
  out << "file_copy_bandwidth=" << cfg.cost.file_copy_bandwidth << "\n";
  out << "rc_connect=" << format_duration(cfg.cost.rc_connect) << "\n";
  out << "dc_connect=" << format_duration(cfg.cost.dc_connect) << "\n";
  out << "cache_keepalive=" << format_duration(cfg.cost.cache_keepalive) << "\n";
  out << "# simulator\n";
  out << "seed=" << cfg.seed << "\n";
  out << "handler_count=" << cfg.handler_count << "\n";
  out << "rpc_timeout=" << format_duration(cfg.rpc_timeout) << "\n";
  out << "prefetch_window=" << cfg.prefetch_window << "\n";
  out << "strict_revocation=" << (cfg.strict_revocation ? "true" : "false") << "\n";
  out << "pt_cache_keep=" << format_duration(cfg.pt_cache_keep) << "\n";
  out << "target_pool_capacity=" << cfg.target_pool_capacity << "\n";
  out << "target_pool_watermark=" << cfg.target_pool_watermark << "\n";
  out << "target_pool_refill_period=" << format_duration(cfg.target_pool_refill_period) << "\n";
  out << "lean_pool_size=" << cfg.lean_pool_size << "\n";
  out << "prepare_per_pte=" << format_duration(cfg.prepare_per_pte) << "\n";
  out << "map_per_pte=" << format_duration(cfg.map_per_pte) << "\n";
  out << "retain_parent_after_reclaim=" << (cfg.retain_parent_after_reclaim ? "true" : "false") << "\n";
  out << "node_slots=" << cfg.node_slots << "\n";
  out << "seed_keepalive=" << format_duration(cfg.seed_keepalive) << "\n";
  out << "renewal_margin=" << format_duration(cfg.renewal_margin) << "\n";
  out << "max_function_lifetime=" << format_duration(cfg.max_function_lifetime) << "\n";
  out << "gc_period=" << format_duration(cfg.gc_period) << "\n";
  out << "serialize_per_mb=" << format_duration(cfg.serialize_per_mb) << "\n";
  out << "caching_pool_cap=" << cfg.caching_pool_cap << "\n";
  out << "mem_sample_period=" << format_duration(cfg.mem_sample_period) << "\n";
}

}  // namespace rfork
