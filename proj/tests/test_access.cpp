#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "rforksim/orchestrator.hpp"

using namespace rfork;

namespace {

constexpr std::uint64_t kBase = 1ull << 32;
constexpr std::uint64_t kBaseVpn = kBase / kPageSize;

SimConfig small_pool_cfg(std::uint32_t capacity, std::uint32_t watermark) {
  SimConfig cfg;
  cfg.seed = 5;
  cfg.prefetch_window = 0;
  cfg.target_pool_capacity = capacity;
  cfg.target_pool_watermark = watermark;
  return cfg;
}

Container& three_vma_parent(Cluster& cluster) {
  Container& c = cluster.create_root(NodeId{0});
  for (std::uint32_t v = 0; v < 3; ++v) {
    const std::uint64_t start = kBase + v * 16 * kPageSize;
    cluster.add_vma(c, v, start, start + 8 * kPageSize);
    cluster.fill_pages(c, start / kPageSize, 8,
                       static_cast<std::uint8_t>(0x10 + v));
  }
  return c;
}

}  // namespace

TEST_CASE("assign_targets gives every VMA its own key") {
  Cluster cluster(small_pool_cfg(64, 16));
  cluster.add_machine();
  cluster.add_machine();
  TaskClock t{0};

  Container& parent = three_vma_parent(cluster);
  auto id = cluster.fork_prepare(t, parent);
  REQUIRE(id.ok());

  const auto* rec = cluster.machine(NodeId{0}).host().find(id->handle_id);
  REQUIRE(rec != nullptr);
  REQUIRE(rec->vma_keys.size() == 3);
  std::set<std::uint32_t> nics;
  for (const auto& k : rec->vma_keys) nics.insert(k.nic_num);
  CHECK(nics.size() == 3);
}

TEST_CASE("empty pool creates targets synchronously, still one per VMA") {
  Cluster cluster(small_pool_cfg(2, 1));
  cluster.add_machine();
  TaskClock t{0};

  // Pool holds 2; prepare needs 4 targets (3 VMAs + descriptor).
  Container& parent = three_vma_parent(cluster);
  const std::uint64_t connects_before = cluster.fabric().ledger().dc_connects();
  auto id = cluster.fork_prepare(t, parent);
  REQUIRE(id.ok());
  const auto* rec = cluster.machine(NodeId{0}).host().find(id->handle_id);
  REQUIRE(rec->vma_keys.size() == 3);
  CHECK(cluster.fabric().ledger().dc_connects() - connects_before == 2);
  // Two of the four charges hit this prepare's critical path.
  CHECK(t.now >= 2 * cluster.config().cost.dc_connect);
}

TEST_CASE("warm pool keeps every dc_connect off the prepare critical path") {
  Cluster cluster(small_pool_cfg(64, 16));
  cluster.add_machine();
  TaskClock t{0};

  Container& parent = three_vma_parent(cluster);
  const std::uint64_t ptes = 24;  // 3 VMAs x 8 pages
  auto id = cluster.fork_prepare(t, parent);
  REQUIRE(id.ok());
  CHECK(t.now == static_cast<SimTime>(ptes) * cluster.config().prepare_per_pte);
}

TEST_CASE("child stores 12 bytes per assigned key") {
  Cluster cluster(small_pool_cfg(64, 16));
  cluster.add_machine();
  cluster.add_machine();
  TaskClock t{0};

  Container& parent = three_vma_parent(cluster);
  auto id = cluster.fork_prepare(t, parent);
  REQUIRE(id.ok());

  const std::int64_t before = cluster.fabric().node(NodeId{1}).metric_bytes();
  auto child = cluster.fork_resume(t, NodeId{1}, *id);
  REQUIRE(child.ok());
  const std::int64_t delta =
      cluster.fabric().node(NodeId{1}).metric_bytes() - before;
  CHECK(delta == 3 * 12);  // 3 VMAs, one owner
}

TEST_CASE("revocation splits fault paths per VMA and is idempotent-checked") {
  Cluster cluster(small_pool_cfg(64, 16));
  cluster.add_machine();
  cluster.add_machine();
  TaskClock t{0};

  Container& parent = three_vma_parent(cluster);
  auto id = cluster.fork_prepare(t, parent);
  REQUIRE(id.ok());
  auto child = cluster.fork_resume(t, NodeId{1}, *id);
  REQUIRE(child.ok());
  AddressSpace& space = child->child->space;

  REQUIRE(cluster.revoke(t, *id, 2).ok());
  CHECK(cluster.revoke(t, *id, 2).error() == Err::NoSuchVma);
  CHECK(cluster.revoke(t, *id, 9).error() == Err::NoSuchVma);

  // Every fault into VMA 2 takes the fallback; VMA 0/1 stay one-sided.
  for (std::uint64_t p = 0; p < 8; ++p) {
    auto res = space.touch(t, kBase + 2 * 16 * kPageSize + p * kPageSize,
                           AccessKind::Read);
    REQUIRE(res.ok());
    CHECK(res.value() == FaultResolution::Rpc);
  }
  for (std::uint64_t p = 0; p < 8; ++p) {
    auto res = space.touch(t, kBase + p * kPageSize, AccessKind::Read);
    REQUIRE(res.ok());
    CHECK(res.value() == FaultResolution::Rdma);
  }
  CHECK(space.stats.faults_rpc == 8);
  CHECK(space.stats.faults_rdma == 8);

  SUBCASE("revoking every VMA blocks reads but not fetches") {
    REQUIRE(cluster.revoke(t, *id, 0).ok());
    REQUIRE(cluster.revoke(t, *id, 1).ok());
    auto fetched = fetch_descriptor(cluster.fabric(), t, NodeId{1}, *id);
    CHECK(fetched.ok());  // targets are not the descriptor
  }
}

TEST_CASE("refill tops the pool up to capacity and reuses nothing") {
  Cluster cluster(small_pool_cfg(64, 16));
  Machine& m = cluster.add_machine();
  TaskClock t{0};

  CHECK(m.pool().free_count() == 64);  // boot-time fill
  std::set<std::uint32_t> seen;
  for (int i = 0; i < 54; ++i) {
    const DcKey k = m.pool().take(t, {});
    CHECK(seen.insert(k.nic_num).second);  // never handed out twice
  }
  CHECK(m.pool().free_count() == 10);
  CHECK(m.pool().refill() == 54);
  CHECK(m.pool().free_count() == 64);
  CHECK(m.pool().refill() == 0);  // full pool: nothing to do

  SUBCASE("destroyed targets never re-enter the pool") {
    const DcKey doomed = m.pool().take(t, {});
    REQUIRE(cluster.fabric().destroy_dc_target(t, NodeId{0}, doomed).ok());
    m.pool().refill();
    for (int i = 0; i < 64; ++i) {
      const DcKey k = m.pool().take(t, {});
      CHECK(k.nic_num != doomed.nic_num);
    }
  }
}

TEST_CASE("background refill is scheduled off the critical path") {
  SimConfig cfg = small_pool_cfg(8, 8);  // watermark == capacity: eager refill
  Cluster cluster(cfg);
  Machine& m = cluster.add_machine();
  TaskClock t{0};

  for (int i = 0; i < 3; ++i) m.pool().take(t, {});
  CHECK(m.pool().free_count() == 5);
  CHECK(t.now == 0);  // pooled takes charge nothing

  cluster.loop().run_until(cfg.target_pool_refill_period + 1);
  CHECK(m.pool().free_count() == 8);
}
