#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "rforksim/bench.hpp"

namespace {

using namespace rfork;

SimConfig config_from(const std::string& path) {
  return path.empty() ? SimConfig{} : load_config(path);
}

int cmd_replay(const std::string& trace_path, const std::string& strategy,
               const std::string& config_path, const std::string& functions_path,
               std::uint32_t nodes, const std::string& out_dir) {
  ReplaySetup setup;
  setup.config = config_from(config_path);
  setup.nodes = nodes;
  setup.strategy = parse_strategy(strategy);
  setup.functions = load_functions(functions_path);
  const Trace trace = load_trace(trace_path);

  const Metrics metrics = replay(trace, setup);
  report(metrics, setup.config, out_dir);
  write_summary(metrics, std::cout);
  std::cout << "wrote " << out_dir << "/invocations.csv, memory.csv, summary.txt\n";
  return 0;
}

int cmd_spike(double base, double spike, double start_s, double len_s,
              double total_s, std::uint64_t seed, const std::string& function,
              const std::string& out_path) {
  const Trace trace =
      gen_spike_trace(base, spike, start_s, len_s, total_s, seed, function);
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + out_path + "'");
  save_trace(trace, out);
  std::cout << trace.events.size() << " events -> " << out_path << "\n";
  return 0;
}

int cmd_fork_demo(std::uint32_t hops, std::uint64_t pages, double touch,
                  const std::string& config_path) {
  SimConfig cfg = config_from(config_path);
  Cluster cluster(cfg);
  for (std::uint32_t i = 0; i <= hops; ++i) cluster.add_machine();

  constexpr std::uint64_t base_va = 1ull << 32;
  Container* parent = &cluster.create_root(NodeId{0});
  cluster.add_vma(*parent, 0, base_va, base_va + pages * kPageSize);
  cluster.fill_pages(*parent, base_va / kPageSize, pages, 0xA0);

  std::uint64_t touched = static_cast<std::uint64_t>(touch * double(pages));
  if (touch * double(pages) > double(touched)) ++touched;
  if (touched > pages) touched = pages;

  std::printf("%4s %6s %12s %10s %10s %10s %10s %12s\n", "hop", "node",
              "startup_us", "local", "rdma", "rpc", "prefetch", "net_bytes");
  TaskClock t{0};
  Rng rng(cfg.seed);
  for (std::uint32_t hop = 1; hop <= hops; ++hop) {
    auto id = cluster.fork_prepare(t, *parent);
    if (!id.ok()) {
      std::printf("%4u prepare failed: %s\n", hop, err_name(id.error()));
      return 0;
    }
    const NodeId target{hop};
    const SimTime t0 = t.now;
    auto child = cluster.fork_resume(t, target, id.value());
    if (!child.ok()) {
      std::printf("%4u resume failed: %s\n", hop, err_name(child.error()));
      return 0;
    }
    const SimTime startup = t.now - t0;
    Container* c = child->child;
    for (std::uint64_t i = 0; i < touched; ++i) {
      const std::uint64_t vpn = base_va / kPageSize + rng.bounded(pages);
      auto res = c->space.touch(t, vpn * kPageSize, AccessKind::Read);
      if (!res.ok()) {
        std::printf("%4u fault failed: %s\n", hop, err_name(res.error()));
        return 0;
      }
    }
    // Dirty a slice so later hops split ownership across ancestors.
    std::vector<std::uint8_t> mark(kPageSize, static_cast<std::uint8_t>(hop));
    for (std::uint64_t i = 0; i < std::max<std::uint64_t>(1, touched / 4); ++i) {
      const std::uint64_t vpn = base_va / kPageSize + rng.bounded(pages);
      c->space.write(t, vpn * kPageSize, mark);
    }
    const PagingStats& s = c->space.stats;
    std::printf("%4u %6u %12s %10llu %10llu %10llu %10llu %12llu\n", hop,
                target.addr, std::to_string(startup / 1000).c_str(),
                static_cast<unsigned long long>(s.faults_local),
                static_cast<unsigned long long>(s.faults_rdma),
                static_cast<unsigned long long>(s.faults_rpc),
                static_cast<unsigned long long>(s.pages_prefetched),
                static_cast<unsigned long long>(s.bytes_over_network));
    parent = c;
  }
  return 0;
}

int cmd_descriptor_dump(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  auto desc = deserialize(bytes);
  if (!desc.ok()) {
    throw ConfigError("malformed descriptor at byte offset " +
                      std::to_string(desc.detail()));
  }
  dump_descriptor(desc.value(), std::cout);
  return 0;
}

// Prepares a small example container and writes its wire descriptor, so
// `descriptor dump` has something to chew on.
int cmd_descriptor_demo(std::uint64_t pages, const std::string& out_path) {
  SimConfig cfg;
  Cluster cluster(cfg);
  cluster.add_machine();
  cluster.add_machine();
  constexpr std::uint64_t base_va = 1ull << 32;
  Container& parent = cluster.create_root(NodeId{0});
  cluster.add_vma(parent, 0, base_va, base_va + pages * kPageSize);
  cluster.fill_pages(parent, base_va / kPageSize, pages, 0x42);
  TaskClock t{0};
  auto id = cluster.fork_prepare(t, parent);
  if (!id.ok()) throw ConfigError("prepare failed");
  auto fetched = fetch_descriptor(cluster.fabric(), t, NodeId{1}, id.value());
  if (!fetched.ok()) throw ConfigError("fetch failed");
  const auto bytes = serialize(fetched->desc);
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + out_path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  std::cout << bytes.size() << " bytes -> " << out_path << "\n";
  return 0;
}

int cmd_workflow(const std::string& dag_path, const std::string& functions_path,
                 const std::string& config_path, const std::string& mode,
                 std::uint32_t nodes, std::uint64_t repeat) {
  SimConfig cfg = config_from(config_path);
  const Dag dag = load_dag(dag_path);
  StateMode default_mode;
  if (mode == "fork") default_mode = StateMode::Fork;
  else if (mode == "message") default_mode = StateMode::Message;
  else throw ConfigError("mode must be fork or message");

  Cluster cluster(cfg);
  for (std::uint32_t i = 0; i < nodes; ++i) cluster.add_machine();
  Coordinator coord(cluster, Strategy::Mitosis);
  for (const auto& fn : load_functions(functions_path))
    coord.register_function(fn);
  coord.start_gc();

  SimTime at = 0;
  for (std::uint64_t i = 0; i < repeat; ++i) {
    const WorkflowResult wf = coord.run_workflow(at, dag, default_mode);
    std::printf("workflow %llu: end_to_end_us=%lld serialize_us=%lld nodes=%zu\n",
                static_cast<unsigned long long>(wf.workflow_id),
                static_cast<long long>((wf.finished - wf.started) / 1000),
                static_cast<long long>(wf.serialization_ns / 1000),
                wf.invocations.size());
    at = wf.finished + kSecond;
    cluster.loop().run_until(at);
  }
  return 0;
}

int cmd_trace_convert(const std::string& in_path, const std::string& out_path,
                      const std::string& function) {
  std::ifstream in(in_path);
  if (!in) throw ConfigError("cannot open '" + in_path + "'");
  const Trace trace = convert_minute_histogram(in, in_path, function);
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + out_path + "'");
  save_trace(trace, out);
  std::cout << trace.events.size() << " events -> " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"remote-fork cluster simulator"};
  app.require_subcommand(1);

  // replay
  auto* replay_cmd = app.add_subcommand("replay", "replay a trace under one strategy");
  std::string trace_path, strategy = "mitosis", config_path, functions_path, out_dir = "out";
  std::uint32_t nodes = 8;
  replay_cmd->add_option("--trace", trace_path, "trace csv")->required();
  replay_cmd->add_option("--strategy", strategy,
                         "coldstart|caching|criu_local|criu_remote|mitosis");
  replay_cmd->add_option("--config", config_path, "key=value config file");
  replay_cmd->add_option("--functions", functions_path, "function registry csv")->required();
  replay_cmd->add_option("--nodes", nodes, "invoker count");
  replay_cmd->add_option("--out", out_dir, "output directory")->required();

  // spike
  auto* spike_cmd = app.add_subcommand("spike", "generate a Poisson spike trace");
  double base = 10, spike = 0, sstart = 0, slen = 0, total = 60;
  std::uint64_t seed = 1;
  std::string function = "f", spike_out = "trace.csv";
  spike_cmd->add_option("--base", base, "base rate (req/s)");
  spike_cmd->add_option("--spike", spike, "spike rate (req/s)");
  spike_cmd->add_option("--spike-start", sstart, "spike start (s)");
  spike_cmd->add_option("--spike-len", slen, "spike length (s)");
  spike_cmd->add_option("--total", total, "trace length (s)");
  spike_cmd->add_option("--seed", seed, "rng seed");
  spike_cmd->add_option("--function", function, "function name");
  spike_cmd->add_option("--out", spike_out, "output trace path")->required();

  // fork demo
  auto* fork_cmd = app.add_subcommand("fork", "fork primitives");
  auto* demo_cmd = fork_cmd->add_subcommand("demo", "chain forks across machines");
  std::uint32_t hops = 3;
  std::uint64_t pages = 256;
  double touch = 0.5;
  std::string demo_config;
  demo_cmd->add_option("--hops", hops, "number of forks (<= 15)");
  demo_cmd->add_option("--pages", pages, "parent pages");
  demo_cmd->add_option("--touch", touch, "touch ratio in (0,1]");
  demo_cmd->add_option("--config", demo_config, "config file");

  // descriptor dump / demo
  auto* desc_cmd = app.add_subcommand("descriptor", "descriptor utilities");
  auto* dump_cmd = desc_cmd->add_subcommand("dump", "pretty-print a serialized descriptor");
  std::string dump_path;
  dump_cmd->add_option("file", dump_path, "descriptor file")->required();
  auto* ddemo_cmd = desc_cmd->add_subcommand("demo", "write an example descriptor");
  std::uint64_t ddemo_pages = 16;
  std::string ddemo_out = "descriptor.bin";
  ddemo_cmd->add_option("--pages", ddemo_pages, "mapped pages");
  ddemo_cmd->add_option("--out", ddemo_out, "output path");

  // workflow
  auto* wf_cmd = app.add_subcommand("workflow", "run a workflow dag");
  std::string dag_path, wf_functions, wf_config, wf_mode = "fork";
  std::uint32_t wf_nodes = 4;
  std::uint64_t wf_repeat = 2;
  wf_cmd->add_option("--dag", dag_path, "dag file")->required();
  wf_cmd->add_option("--functions", wf_functions, "function registry csv")->required();
  wf_cmd->add_option("--config", wf_config, "config file");
  wf_cmd->add_option("--mode", wf_mode, "default state mode: fork|message");
  wf_cmd->add_option("--nodes", wf_nodes, "invoker count");
  wf_cmd->add_option("--repeat", wf_repeat, "workflow executions");

  // trace-convert
  auto* conv_cmd = app.add_subcommand("trace-convert",
                                      "per-minute histogram -> event trace");
  std::string conv_in, conv_out, conv_fn = "f";
  conv_cmd->add_option("--in", conv_in, "minute,count[,function] csv")->required();
  conv_cmd->add_option("--out", conv_out, "output trace path")->required();
  conv_cmd->add_option("--function", conv_fn, "default function name");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*replay_cmd)
      return cmd_replay(trace_path, strategy, config_path, functions_path,
                        nodes, out_dir);
    if (*spike_cmd)
      return cmd_spike(base, spike, sstart, slen, total, seed, function,
                       spike_out);
    if (*demo_cmd) return cmd_fork_demo(hops, pages, touch, demo_config);
    if (*dump_cmd) return cmd_descriptor_dump(dump_path);
    if (*ddemo_cmd) return cmd_descriptor_demo(ddemo_pages, ddemo_out);
    if (*wf_cmd)
      return cmd_workflow(dag_path, wf_functions, wf_config, wf_mode, wf_nodes,
                          wf_repeat);
    if (*conv_cmd) return cmd_trace_convert(conv_in, conv_out, conv_fn);
  } catch (const rfork::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const rfork::SimAssertionError& e) {
    std::cerr << "simulation assertion failed: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
