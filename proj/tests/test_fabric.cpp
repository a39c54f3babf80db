#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <string>

#include "rforksim/fabric.hpp"

using namespace rfork;

namespace {

SimConfig base_config() {
  SimConfig cfg;
  cfg.seed = 42;
  return cfg;
}

DcKey make_target(Fabric& fab, TaskClock& t, NodeId node, std::uint64_t user_key,
                  std::uint64_t start_pfn, std::uint64_t count) {
  return fab.create_dc_target(&t, node, user_key, {{start_pfn, count}});
}

}  // namespace

TEST_CASE("node registration hands out dense unique ids") {
  Fabric fab(base_config());
  CHECK(fab.register_node() == NodeId{0});
  CHECK(fab.register_node() == NodeId{1});
  for (int i = 2; i < 16; ++i) fab.register_node();
  CHECK(fab.node_count() == 16);
}

TEST_CASE("dc target creation: fresh nic numbers and 144B accounting") {
  Fabric fab(base_config());
  const NodeId n0 = fab.register_node();
  TaskClock t{0};

  const std::int64_t before = fab.node(n0).metric_bytes();
  const DcKey a = make_target(fab, t, n0, 7, 0, 256);
  CHECK(a.user_key == 7);
  CHECK(fab.node(n0).metric_bytes() - before == 144);

  const DcKey b = make_target(fab, t, n0, 7, 0, 256);
  CHECK(a.nic_num != b.nic_num);  // same user key, distinct NIC numbers
  CHECK(t.now == 2 * fab.config().cost.dc_connect);
}

TEST_CASE("rdma_read copies page content and charges rtt + bytes/bandwidth") {
  Fabric fab(base_config());
  const NodeId parent = fab.register_node();
  const NodeId reader = fab.register_node();
  TaskClock t{0};

  Node& pn = fab.node(parent);
  const std::uint64_t pfn = pn.alloc_frame();
  std::fill(pn.frame(pfn)->begin(), pn.frame(pfn)->end(), 0xAB);
  const DcKey key = make_target(fab, t, parent, 1, pfn, 1);

  TaskClock rt{0};
  auto res = fab.rdma_read(rt, reader, parent, key, pfn, kPageSize);
  REQUIRE(res.ok());
  CHECK(res->size() == kPageSize);
  CHECK(std::all_of(res->begin(), res->end(),
                    [](std::uint8_t b) { return b == 0xAB; }));
  // 3 us rtt + ceil(4096 / 12.5 GB/s) = 3000 + 328 ns.
  CHECK(rt.now == 3328);
}

TEST_CASE("reads outside the guarded range are rejected and charge one rtt") {
  Fabric fab(base_config());
  const NodeId parent = fab.register_node();
  const NodeId reader = fab.register_node();
  TaskClock t{0};

  Node& pn = fab.node(parent);
  const std::uint64_t pfn = pn.alloc_frames(4);
  const DcKey key = make_target(fab, t, parent, 1, pfn, 2);  // guard 2 of 4

  TaskClock rt{0};
  auto res = fab.rdma_read(rt, reader, parent, key, pfn + 2, kPageSize);
  CHECK(!res.ok());
  CHECK(res.error() == Err::Rejected);
  CHECK(rt.now == fab.config().cost.rdma_rtt);
}

TEST_CASE("destroy revokes future reads; unknown and repeated destroys fail") {
  Fabric fab(base_config());
  const NodeId parent = fab.register_node();
  const NodeId reader = fab.register_node();
  TaskClock t{0};

  Node& pn = fab.node(parent);
  const std::uint64_t pfn = pn.alloc_frame();
  const DcKey a = make_target(fab, t, parent, 1, pfn, 1);
  const DcKey b = make_target(fab, t, parent, 2, pfn, 1);

  const std::int64_t before = fab.node(parent).metric_bytes();
  REQUIRE(fab.destroy_dc_target(t, parent, a).ok());
  CHECK(before - fab.node(parent).metric_bytes() == 144);

  TaskClock rt{t.now};
  CHECK(fab.rdma_read(rt, reader, parent, a, pfn, kPageSize).error() ==
        Err::Rejected);
  CHECK(fab.destroy_dc_target(t, parent, a).error() == Err::NoSuchTarget);
  // Independent target on the same node still serves.
  CHECK(fab.rdma_read(rt, reader, parent, b, pfn, kPageSize).ok());
}

TEST_CASE("reads in flight before the destroy timestamp still succeed") {
  Fabric fab(base_config());
  const NodeId parent = fab.register_node();
  const NodeId reader = fab.register_node();
  TaskClock t{0};

  Node& pn = fab.node(parent);
  const std::uint64_t pfn = pn.alloc_frame();
  const DcKey key = make_target(fab, t, parent, 1, pfn, 1);

  TaskClock destroyer{10 * kMicrosecond};
  REQUIRE(fab.destroy_dc_target(destroyer, parent, key).ok());

  // Delivered at 3 us < 10 us: succeeds despite the (later) destroy.
  TaskClock early{0};
  CHECK(fab.rdma_read(early, reader, parent, key, pfn, kPageSize).ok());
  // Delivered at 10 us: the target is gone.
  TaskClock late{7 * kMicrosecond};
  CHECK(fab.rdma_read(late, reader, parent, key, pfn, kPageSize).error() ==
        Err::Rejected);
}

TEST_CASE("rpc echo and crash timeout") {
  Fabric fab(base_config());
  const NodeId a = fab.register_node();
  const NodeId b = fab.register_node();
  fab.node(b).register_handler(7, [](const std::any& req) {
    return HandlerOutcome{req, 0, 0};
  });

  TaskClock t{0};
  auto res = fab.rpc_call(t, a, b, 7, std::any(std::string("ping")));
  REQUIRE(res.ok());
  CHECK(std::any_cast<std::string>(res.value()) == "ping");
  CHECK(t.now == 2 * fab.config().cost.rdma_rtt);

  fab.crash_node(b, t.now);
  const SimTime before = t.now;
  auto dead = fab.rpc_call(t, a, b, 7, std::any(std::string("ping")));
  CHECK(dead.error() == Err::Timeout);
  CHECK(t.now - before == fab.config().rpc_timeout);
}

TEST_CASE("two logical rpc servers sustain ~2/service_time calls per second") {
  SimConfig cfg = base_config();
  cfg.handler_count = 2;
  Fabric fab(cfg);
  const NodeId src = fab.register_node();
  const NodeId dst = fab.register_node();
  const SimTime service = 65 * kMicrosecond;
  fab.node(dst).register_handler(1, [&](const std::any&) {
    return HandlerOutcome{std::any(0), service, 0};
  });

  std::uint64_t done_in_1s = 0;
  for (int i = 0; i < 40000; ++i) {
    TaskClock t{0};
    auto res = fab.rpc_call(t, src, dst, 1, std::any(0));
    REQUIRE(res.ok());
    if (t.now <= kSecond) ++done_in_1s;
  }
  // 2 servers x 1s / 65us ~= 30.7K; per handler ~15.4K.
  CHECK(done_in_1s >= 29000);
  CHECK(done_in_1s <= 32000);
}

TEST_CASE("cost additivity: totals equal the sum of per-op ledger entries") {
  SimConfig cfg = base_config();
  Fabric fab(cfg);
  fab.ledger().detailed = true;
  const NodeId parent = fab.register_node();
  const NodeId reader = fab.register_node();
  fab.node(parent).register_handler(9, [](const std::any&) {
    return HandlerOutcome{std::any(1), 5 * kMicrosecond, 128};
  });

  TaskClock t{0};
  Node& pn = fab.node(parent);
  const std::uint64_t pfn = pn.alloc_frames(8);
  const DcKey key = make_target(fab, t, parent, 3, pfn, 8);
  for (int i = 0; i < 50; ++i) {
    fab.rdma_read(t, reader, parent, key, pfn + (i % 8), kPageSize);
    fab.rdma_read(t, reader, parent, key, pfn + 100, kPageSize);  // rejected
    fab.rpc_call(t, reader, parent, 9, std::any(0));
  }
  SimTime sum_ns = 0;
  std::uint64_t sum_bytes = 0;
  for (const auto& e : fab.ledger().entries()) {
    sum_ns += e.ns;
    sum_bytes += e.bytes;
  }
  CHECK(sum_ns == fab.ledger().total_ns());
  CHECK(sum_bytes == fab.ledger().total_bytes());
  CHECK(fab.ledger().rdma_rejects() == 50);
}

TEST_CASE("identical seed and operations produce identical ledgers") {
  auto run = [](std::uint64_t seed) {
    SimConfig cfg = base_config();
    cfg.seed = seed;
    Fabric fab(cfg);
    const NodeId parent = fab.register_node();
    const NodeId reader = fab.register_node();
    TaskClock t{0};
    Node& pn = fab.node(parent);
    const std::uint64_t pfn = pn.alloc_frames(16);
    const DcKey key = make_target(fab, t, parent, 1, pfn, 16);
    Rng rng(seed);
    for (int i = 0; i < 200; ++i) {
      fab.rdma_read(t, reader, parent, key, pfn + rng.bounded(16), kPageSize);
    }
    return std::make_tuple(fab.ledger().total_ns(), fab.ledger().total_bytes(),
                           t.now, key.user_key);
  };
  CHECK(run(7) == run(7));
}

TEST_CASE("read snapshot: whole-page writes are never observed torn") {
  Fabric fab(base_config());
  const NodeId parent = fab.register_node();
  const NodeId reader = fab.register_node();
  TaskClock t{0};
  Node& pn = fab.node(parent);
  const std::uint64_t pfn = pn.alloc_frame();
  const DcKey key = make_target(fab, t, parent, 1, pfn, 1);

  for (int round = 0; round < 8; ++round) {
    std::fill(pn.frame(pfn)->begin(), pn.frame(pfn)->end(),
              static_cast<std::uint8_t>(round));
    TaskClock rt{t.now};
    auto res = fab.rdma_read(rt, reader, parent, key, pfn, kPageSize);
    REQUIRE(res.ok());
    CHECK(std::all_of(res->begin(), res->end(), [&](std::uint8_t b) {
      return b == static_cast<std::uint8_t>(round);
    }));
  }
}
