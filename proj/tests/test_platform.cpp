#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "rforksim/platform.hpp"

using namespace rfork;

namespace {

struct Platform {
  Platform(const SimConfig& cfg, std::uint32_t nodes, Strategy strategy)
      : cluster(cfg) {
    for (std::uint32_t i = 0; i < nodes; ++i) cluster.add_machine();
    coord = std::make_unique<Coordinator>(cluster, strategy);
  }
  Cluster cluster;
  std::unique_ptr<Coordinator> coord;
};

FunctionModel hello(std::uint32_t image_mb = 64, std::uint32_t ws_mb = 4,
                    double touch = 1.0, SimTime exec = 5 * kMillisecond) {
  FunctionModel fn;
  fn.name = "hello";
  fn.image_mb = image_mb;
  fn.working_set_mb = ws_mb;
  fn.touch_ratio = touch;
  fn.exec = exec;
  return fn;
}

SimConfig cfg_default() {
  SimConfig cfg;
  cfg.seed = 23;
  return cfg;
}

}  // namespace

TEST_CASE("first invoke coldstarts and plants exactly one seed") {
  Platform p(cfg_default(), 2, Strategy::Mitosis);
  p.coord->register_function(hello());

  const auto first = p.coord->invoke(0, "hello");
  CHECK(first.cold);
  CHECK(first.remote);  // image was never pulled anywhere
  CHECK(first.startup_ns == p.cluster.config().cost.coldstart_remote);
  CHECK(p.coord->seed_store().count("hello") == 1);
  CHECK(p.coord->provisioned("hello").peak == 1);

  const auto second = p.coord->invoke(first.done + kSecond, "hello");
  CHECK(!second.cold);
  CHECK(second.startup_ns >= 1 * kMillisecond);
  CHECK(second.startup_ns <= 5 * kMillisecond);  // Table-1 "fast" order
  CHECK(p.coord->hosted_seed_count() == 1);

  SUBCASE("local fork when placement lands on the seed node") {
    const auto local =
        p.coord->invoke_on(second.done + kSecond, "hello", first.invoker);
    CHECK(!local.remote);
    CHECK(local.startup_ns == p.cluster.config().cost.local_fork);
  }
}

TEST_CASE("an expired seed coldstarts again and is replanted") {
  SimConfig cfg = cfg_default();
  cfg.seed_keepalive = 60 * kSecond;
  cfg.renewal_margin = 5 * kSecond;
  Platform p(cfg, 2, Strategy::Mitosis);
  p.coord->register_function(hello());

  const auto first = p.coord->invoke(0, "hello");
  const auto old_id = p.coord->seed_store().at("hello").id;

  const SimTime late = first.done + cfg.seed_keepalive + kSecond;
  p.cluster.loop().run_until(late);
  // Pin to the first invoker: its image cache makes this a local coldstart.
  const auto again = p.coord->invoke_on(late, "hello", first.invoker);
  CHECK(again.cold);
  CHECK(!again.remote);
  CHECK(again.startup_ns == cfg.cost.coldstart_local);
  const auto& fresh = p.coord->seed_store().at("hello").id;
  CHECK((fresh.node != old_id.node || fresh.handle_id != old_id.handle_id));
}

TEST_CASE("a near-expired seed is renewed before forking") {
  SimConfig cfg = cfg_default();
  cfg.seed_keepalive = 60 * kSecond;
  cfg.renewal_margin = 30 * kSecond;
  Platform p(cfg, 2, Strategy::Mitosis);
  p.coord->register_function(hello());

  const auto first = p.coord->invoke(0, "hello");
  const auto old_id = p.coord->seed_store().at("hello").id;

  const SimTime near = first.done + cfg.seed_keepalive - 10 * kSecond;
  const auto renewed = p.coord->invoke(near, "hello");
  CHECK(!renewed.cold);
  const auto& rec = p.coord->seed_store().at("hello");
  CHECK(rec.id.handle_id != old_id.handle_id);
  CHECK(rec.deployed_at >= near);
}

TEST_CASE("queueing: a saturated invoker reports queue time") {
  SimConfig cfg = cfg_default();
  cfg.node_slots = 1;
  Platform p(cfg, 1, Strategy::Coldstart);
  p.coord->register_function(hello());

  const auto a = p.coord->invoke(0, "hello");
  const auto b = p.coord->invoke(0, "hello");
  CHECK(a.queue_ns == 0);
  CHECK(b.queue_ns == a.done);
  CHECK(b.arrival + b.queue_ns + b.startup_ns + b.exec_ns == b.done);
}

TEST_CASE("baseline startup and exec charges") {
  SUBCASE("coldstart: remote then local") {
    Platform p(cfg_default(), 1, Strategy::Coldstart);
    p.coord->register_function(hello());
    const auto a = p.coord->invoke(0, "hello");
    CHECK(a.startup_ns == p.cluster.config().cost.coldstart_remote);
    const auto b = p.coord->invoke(a.done, "hello");
    CHECK(b.startup_ns == p.cluster.config().cost.coldstart_local);
    CHECK(p.coord->provisioned("hello").peak == 0);
  }
  SUBCASE("caching: miss coldstarts, hit unpauses") {
    Platform p(cfg_default(), 1, Strategy::Caching);
    p.coord->register_function(hello());
    const auto a = p.coord->invoke(0, "hello");
    CHECK(a.cold);
    const auto b = p.coord->invoke(a.done + kSecond, "hello");
    CHECK(!b.cold);
    CHECK(b.startup_ns == p.cluster.config().cost.unpause);
    CHECK(p.coord->provisioned("hello").peak == 1);
  }
  SUBCASE("caching: instances evict after the keepalive") {
    Platform p(cfg_default(), 1, Strategy::Caching);
    p.coord->register_function(hello());
    const auto a = p.coord->invoke(0, "hello");
    const SimTime late =
        a.done + p.cluster.config().cost.cache_keepalive + kSecond;
    const auto b = p.coord->invoke(late, "hello");
    CHECK(b.cold);  // the cached instance idled out
  }
  SUBCASE("criu_local: flat restore, one image per node") {
    Platform p(cfg_default(), 4, Strategy::CriuLocal);
    p.coord->register_function(hello());
    const auto a = p.coord->invoke(0, "hello");
    CHECK(a.startup_ns == p.cluster.config().cost.cr_restore_local);
    CHECK(a.exec_ns == hello().exec);  // pages restore from local memory
    CHECK(p.coord->provisioned("hello").peak == 4);
  }
  SUBCASE("criu_remote: every touched page is a DFS read") {
    Platform p(cfg_default(), 1, Strategy::CriuRemote);
    FunctionModel fn = hello(64, 4, 1000.0 / 1024.0, 0);  // 1000 pages
    p.coord->register_function(fn);
    const auto a = p.coord->invoke(0, "hello");
    CHECK(a.startup_ns == p.cluster.config().cost.cr_restore_remote);
    CHECK(a.exec_ns == 1000 * p.cluster.config().cost.dfs_read_per_page);
  }
}

TEST_CASE("provisioned instances follow the Table-1 law") {
  const std::uint32_t concurrency = 12;
  auto burst = [&](Strategy s) {
    Platform p(cfg_default(), 2, s);
    p.coord->register_function(hello(64, 1, 1.0, 500 * kMillisecond));
    for (std::uint32_t i = 0; i < concurrency; ++i)
      p.coord->invoke(i * 10, "hello");  // effectively simultaneous
    return p.coord->provisioned("hello").peak;
  };
  CHECK(burst(Strategy::Coldstart) == 0);
  CHECK(burst(Strategy::Caching) == concurrency);
  CHECK(burst(Strategy::CriuLocal) == 2);  // one image per node
  CHECK(burst(Strategy::Mitosis) == 1);    // a single seed
}

TEST_CASE("two-function chain: fork beats message and never serializes") {
  SimConfig cfg = cfg_default();
  cfg.prefetch_window = 0;  // page counts below are exact without prefetch
  Platform p(cfg, 3, Strategy::Mitosis);
  p.coord->register_function(FunctionModel{"up", 8, 6, 1.0, 5 * kMillisecond});
  p.coord->register_function(FunctionModel{"down", 8, 6, 1.0, 5 * kMillisecond});

  // Warm both long-lived seeds.
  const auto w1 = p.coord->invoke(0, "up");
  const auto w2 = p.coord->invoke(w1.done, "down");

  Dag chain;
  chain.nodes.push_back(DagNode{"n1", "up", {}, std::nullopt});
  chain.nodes.push_back(DagNode{"n2", "down", {"n1"}, std::nullopt});

  const SimTime t0 = w2.done + kSecond;
  const auto fork_wf = p.coord->run_workflow(t0, chain, StateMode::Fork);
  CHECK(fork_wf.serialization_ns == 0);
  CHECK(fork_wf.torn_down);
  REQUIRE(fork_wf.invocations.size() == 2);
  // Downstream pages exactly ceil(touch x state) pages, all through paging;
  // with touch ratio 1 the prefetcher only pulls pages the run needs anyway.
  const auto& down = fork_wf.invocations[1];
  const std::uint64_t state_pages = 6 * 256;
  CHECK(down.paging.faults_rdma + down.paging.faults_rpc +
            down.paging.faults_local + down.paging.pages_prefetched ==
        state_pages);
  CHECK(down.paging.bytes_over_network == state_pages * kPageSize);

  const SimTime t1 = fork_wf.finished + kSecond;
  const auto msg_wf = p.coord->run_workflow(t1, chain, StateMode::Message);
  CHECK(msg_wf.serialization_ns ==
        6 * p.cluster.config().serialize_per_mb);

  const SimTime fork_latency = fork_wf.finished - fork_wf.started;
  const SimTime msg_latency = msg_wf.finished - msg_wf.started;
  CHECK(fork_latency < msg_latency);
}

TEST_CASE("an unfused two-upstream join falls back to message mode") {
  Platform p(cfg_default(), 3, Strategy::Mitosis);
  for (const char* name : {"a", "b", "join"})
    p.coord->register_function(FunctionModel{name, 4, 2, 0.5, kMillisecond});

  Dag diamond;
  diamond.nodes.push_back(DagNode{"a", "a", {}, std::nullopt});
  diamond.nodes.push_back(DagNode{"b", "b", {}, std::nullopt});
  diamond.nodes.push_back(DagNode{"j", "join", {"a", "b"}, std::nullopt});

  const auto wf = p.coord->run_workflow(0, diamond, StateMode::Fork);
  // The join paid serialization for both upstream states despite fork mode.
  CHECK(wf.serialization_ns == (2 + 2) * p.cluster.config().serialize_per_mb);
}

TEST_CASE("fork tree teardown reclaims short seeds but not a long root") {
  Platform p(cfg_default(), 2, Strategy::Mitosis);
  p.coord->register_function(FunctionModel{"up", 4, 2, 1.0, kMillisecond});
  p.coord->register_function(FunctionModel{"down", 4, 2, 1.0, kMillisecond});
  const auto warm = p.coord->invoke(0, "up");

  Dag chain;
  chain.nodes.push_back(DagNode{"n1", "up", {}, std::nullopt});
  chain.nodes.push_back(DagNode{"n2", "down", {"n1"}, std::nullopt});
  const auto wf = p.coord->run_workflow(warm.done + kSecond, chain, StateMode::Fork);
  CHECK(wf.torn_down);

  // Only the long-lived seed remains hosted.
  CHECK(p.coord->hosted_seed_count() == 1);
  CHECK(p.coord->seed_store().count("up") == 1);
}

TEST_CASE("gc reclaims orphaned short seeds after the lifetime cap") {
  SimConfig cfg = cfg_default();
  cfg.seed_keepalive = 60 * kSecond;
  cfg.max_function_lifetime = 90 * kSecond;
  cfg.gc_period = 10 * kSecond;
  Platform p(cfg, 2, Strategy::Mitosis);
  p.coord->register_function(FunctionModel{"up", 4, 2, 1.0, kMillisecond});
  p.coord->register_function(FunctionModel{"down", 4, 2, 1.0, kMillisecond});
  p.coord->start_gc();

  const auto warm = p.coord->invoke(0, "up");
  Dag chain;
  chain.nodes.push_back(DagNode{"n1", "up", {}, std::nullopt});
  chain.nodes.push_back(DagNode{"n2", "down", {"n1"}, std::nullopt});

  // The coordinator dies right after dispatching the upstream: the prepared
  // seed exists but the downstream never runs and no teardown happens.
  const SimTime wf_start = warm.done + kSecond;
  p.coord->crash_coordinator(wf_start + 1);
  const auto wf = p.coord->run_workflow(wf_start, chain, StateMode::Fork);
  CHECK(!wf.torn_down);
  CHECK(p.coord->hosted_seed_count() >= 1);

  // Within lifetime cap + a gc period (plus the long seed's own keepalive)
  // every descriptor is gone, coordinator or not.
  const SimTime deadline =
      wf_start + cfg.max_function_lifetime + 2 * cfg.gc_period;
  p.cluster.loop().run_until(deadline);
  for (std::uint32_t n = 0; n < 2; ++n) {
    CHECK(p.cluster.machine(NodeId{n}).host().records().empty());
  }
}

TEST_CASE("gc leaves fresh seeds alone") {
  SimConfig cfg = cfg_default();
  cfg.gc_period = 10 * kSecond;
  Platform p(cfg, 1, Strategy::Mitosis);
  p.coord->register_function(hello());
  const auto first = p.coord->invoke(0, "hello");

  TaskClock t{first.done + kSecond};
  const auto reclaimed = p.coord->gc_tick(NodeId{0}, t);
  CHECK(reclaimed.empty());
  CHECK(p.coord->hosted_seed_count() == 1);
}

TEST_CASE("seed hits replay identically for identical inputs") {
  auto run = [] {
    Platform p(cfg_default(), 2, Strategy::Mitosis);
    p.coord->register_function(hello(16, 2, 0.5, kMillisecond));
    std::string pattern;
    SimTime at = 0;
    for (int i = 0; i < 12; ++i) {
      const auto r = p.coord->invoke(at, "hello");
      pattern.push_back(r.cold ? 'c' : 'h');
      at = r.done + (i % 3) * kSecond;
    }
    return pattern;
  };
  CHECK(run() == run());
}

TEST_CASE("dag files parse node, upstream and mode columns") {
  std::istringstream in(
      "# finra-like\n"
      "n1,up,,fork\n"
      "n2,down,n1,default\n"
      "n3,down,n1;n2,message\n");
  const Dag dag = parse_dag(in, "test");
  REQUIRE(dag.nodes.size() == 3);
  CHECK(dag.nodes[0].mode == StateMode::Fork);
  CHECK(!dag.nodes[1].mode.has_value());
  REQUIRE(dag.nodes[2].upstreams.size() == 2);
  CHECK(dag.nodes[2].mode == StateMode::Message);

  std::istringstream bad("n1,up,fork\n");
  CHECK_THROWS_AS(parse_dag(bad, "test"), ConfigError);
}
