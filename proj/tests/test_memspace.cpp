#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracle.hpp"
#include "rforksim/bench.hpp"

using namespace rfork;

namespace {

constexpr std::uint64_t kBase = 1ull << 32;
constexpr std::uint64_t kBaseVpn = kBase / kPageSize;

SimConfig cfg_with(std::uint32_t prefetch, bool strict = false) {
  SimConfig cfg;
  cfg.seed = 11;
  cfg.prefetch_window = prefetch;
  cfg.strict_revocation = strict;
  return cfg;
}

struct Harness {
  explicit Harness(const SimConfig& cfg, std::size_t machines = 2)
      : cluster(cfg) {
    for (std::size_t i = 0; i < machines; ++i) cluster.add_machine();
  }
  Cluster cluster;
  TaskClock t{0};

  Container& parent_with_pages(std::uint64_t pages, std::uint8_t fill) {
    Container& c = cluster.create_root(NodeId{0});
    cluster.add_vma(c, 0, kBase, kBase + pages * kPageSize);
    cluster.fill_pages(c, kBaseVpn, pages, fill);
    return c;
  }

  Container& resume(const DescriptorId& id, std::uint32_t node = 1) {
    auto r = cluster.fork_resume(t, NodeId{node}, id);
    REQUIRE(r.ok());
    return *r->child;
  }
};

}  // namespace

TEST_CASE("map_from_descriptor installs remote entries and moves no bytes") {
  Harness h(cfg_with(0));
  Container& parent = h.parent_with_pages(256, 0x11);
  auto id = h.cluster.fork_prepare(h.t, parent);
  REQUIRE(id.ok());
  Container& child = h.resume(*id);

  CHECK(child.space.mapped_entries() == 256);
  CHECK(child.space.present_pages() == 0);
  CHECK(child.space.stats.bytes_over_network == 0);
  for (std::uint64_t p = 0; p < 256; ++p) {
    const Pte pte = child.space.pte(kBaseVpn + p);
    CHECK(pte.is_remote());
    CHECK(!pte.present());
    CHECK(pte.owner() == 1);
  }
  child.space.assert_invariants();
}

TEST_CASE("owner index beyond the ancestor table is CorruptDescriptor") {
  SimConfig cfg = cfg_with(0);
  Fabric fab(cfg);
  const NodeId node = fab.register_node();

  ContainerDescriptor d;
  d.ancestors = {AncestorEntry{NodeId{5}, 1}, AncestorEntry{NodeId{6}, 2}};
  DescVma v;
  v.vma_id = 0;
  v.start_va = kBase;
  v.end_va = kBase + 4 * kPageSize;
  v.ptes.emplace_back(kBaseVpn, Pte::remote(3, 77));  // only 2 ancestors
  d.vmas.push_back(v);

  auto space = map_from_descriptor(fab, node, d, NodeId{9}, {});
  CHECK(space.error() == Err::CorruptDescriptor);
}

TEST_CASE("empty descriptor maps to an empty space") {
  SimConfig cfg = cfg_with(0);
  Fabric fab(cfg);
  const NodeId node = fab.register_node();
  ContainerDescriptor d;
  auto space = map_from_descriptor(fab, node, d, NodeId{1}, {});
  REQUIRE(space.ok());
  CHECK(space->mapped_entries() == 0);
  CHECK(space->vmas.empty());
}

TEST_CASE("read faults once over rdma and returns the parent's bytes") {
  Harness h(cfg_with(0));
  Container& parent = h.parent_with_pages(8, 0xCD);
  auto id = h.cluster.fork_prepare(h.t, parent);
  REQUIRE(id.ok());
  Container& child = h.resume(*id);

  std::vector<std::uint8_t> buf(kPageSize);
  REQUIRE(child.space.read(h.t, kBase, buf).ok());
  CHECK(std::all_of(buf.begin(), buf.end(),
                    [](std::uint8_t b) { return b == 0xCD; }));
  CHECK(child.space.stats.faults_rdma == 1);
  CHECK(child.space.stats.pages_prefetched == 0);
  CHECK(child.space.stats.bytes_over_network == kPageSize);

  SUBCASE("write then read back is local from then on") {
    const std::vector<std::uint8_t> data(100, 0x77);
    REQUIRE(child.space.write(h.t, kBase + 8, data).ok());
    std::vector<std::uint8_t> back(100);
    REQUIRE(child.space.read(h.t, kBase + 8, back).ok());
    CHECK(back == data);
    CHECK(child.space.stats.faults_rdma == 1);  // still just the first fault
    CHECK(child.space.stats.bytes_over_network == kPageSize);
  }

  SUBCASE("materialize-once: re-reading the same page moves nothing") {
    for (int i = 0; i < 5; ++i) REQUIRE(child.space.read(h.t, kBase, buf).ok());
    CHECK(child.space.stats.bytes_over_network == kPageSize);
  }
}

TEST_CASE("fault inside a grows-down VMA below the mapped floor is local") {
  Harness h(cfg_with(0));
  Container& parent = h.cluster.create_root(NodeId{0});
  h.cluster.add_vma(parent, 0, kBase, kBase + 16 * kPageSize,
                    kProtRead | kProtWrite, kVmaGrowsDown);
  h.cluster.fill_pages(parent, kBaseVpn + 8, 8, 0xEE);  // top half mapped
  auto id = h.cluster.fork_prepare(h.t, parent);
  REQUIRE(id.ok());
  Container& child = h.resume(*id);

  std::vector<std::uint8_t> buf(16);
  REQUIRE(child.space.read(h.t, kBase + 2 * kPageSize, buf).ok());
  CHECK(std::all_of(buf.begin(), buf.end(),
                    [](std::uint8_t b) { return b == 0; }));
  CHECK(child.space.stats.faults_local == 1);
  CHECK(child.space.stats.bytes_over_network == 0);
}

TEST_CASE("access outside every VMA segfaults; protection is enforced") {
  Harness h(cfg_with(0));
  Container& parent = h.cluster.create_root(NodeId{0});
  h.cluster.add_vma(parent, 0, kBase, kBase + 4 * kPageSize, kProtRead);
  h.cluster.fill_pages(parent, kBaseVpn, 4, 1);
  auto id = h.cluster.fork_prepare(h.t, parent);
  REQUIRE(id.ok());
  Container& child = h.resume(*id);

  std::vector<std::uint8_t> buf(8);
  CHECK(child.space.read(h.t, kBase - kPageSize, buf).error() == Err::SegFault);
  CHECK(child.space.write(h.t, kBase, buf).error() == Err::ProtFault);
  CHECK(child.space.read(h.t, kBase, buf).ok());
}

TEST_CASE("mapped-file page with no parent frame restores through rpc") {
  Harness h(cfg_with(0));
  std::vector<std::uint8_t> content(3 * kPageSize);
  for (std::size_t i = 0; i < content.size(); ++i)
    content[i] = static_cast<std::uint8_t>(i / kPageSize + 0x50);
  h.cluster.machine(NodeId{0}).put_file("/srv/data.bin", content);

  Container& parent = h.cluster.create_root(NodeId{0});
  h.cluster.add_vma(parent, 0, kBase, kBase + 8 * kPageSize);
  h.cluster.fill_pages(parent, kBaseVpn, 2, 0xAA);     // anonymous, materialized
  h.cluster.map_file(parent, kBaseVpn + 4, 3, "/srv/data.bin", 0);

  auto id = h.cluster.fork_prepare(h.t, parent);
  REQUIRE(id.ok());
  Container& child = h.resume(*id);

  const SimTime t0 = h.t.now;
  std::vector<std::uint8_t> buf(kPageSize);
  REQUIRE(child.space.read(h.t, kBase + 5 * kPageSize, buf).ok());
  CHECK(std::all_of(buf.begin(), buf.end(),
                    [](std::uint8_t b) { return b == 0x51; }));
  CHECK(child.space.stats.faults_rpc == 1);
  CHECK(child.space.stats.faults_rdma == 0);
  // 2x rtt transport + the 65 us fallback service.
  CHECK(h.t.now - t0 ==
        2 * h.cluster.config().cost.rdma_rtt +
            h.cluster.config().cost.rpc_fallback_per_page);
}

TEST_CASE("revoked VMA falls back to rpc; strict mode surfaces FaultError") {
  for (const bool strict : {false, true}) {
    Harness h(cfg_with(0, strict));
    Container& parent = h.parent_with_pages(8, 0x3C);
    auto id = h.cluster.fork_prepare(h.t, parent);
    REQUIRE(id.ok());
    Container& child = h.resume(*id);

    REQUIRE(h.cluster.revoke(h.t, *id, 0).ok());
    auto res = child.space.touch(h.t, kBase, AccessKind::Read);
    if (strict) {
      CHECK(res.error() == Err::FaultError);
    } else {
      REQUIRE(res.ok());
      CHECK(res.value() == FaultResolution::Rpc);
      std::vector<std::uint8_t> buf(16);
      REQUIRE(child.space.read(h.t, kBase, buf).ok());
      CHECK(buf[0] == 0x3C);
    }
  }
}

TEST_CASE("revoked VMA with a crashed parent is a FaultError") {
  Harness h(cfg_with(0));
  Container& parent = h.parent_with_pages(4, 0x3C);
  auto id = h.cluster.fork_prepare(h.t, parent);
  REQUIRE(id.ok());
  Container& child = h.resume(*id);

  REQUIRE(h.cluster.revoke(h.t, *id, 0).ok());
  h.cluster.crash_machine(NodeId{0}, h.t.now);
  CHECK(child.space.touch(h.t, kBase, AccessKind::Read).error() ==
        Err::FaultError);
}

TEST_CASE("prefetch pulls the adjacent page; contiguous frames batch") {
  Harness h(cfg_with(1));
  Container& parent = h.parent_with_pages(8, 0x42);
  auto id = h.cluster.fork_prepare(h.t, parent);
  REQUIRE(id.ok());
  Container& child = h.resume(*id);

  const std::uint64_t reads_before = h.cluster.fabric().ledger().rdma_reads();
  REQUIRE(child.space.touch(h.t, kBase, AccessKind::Read).ok());
  CHECK(child.space.stats.faults_rdma == 1);
  CHECK(child.space.stats.pages_prefetched == 1);
  CHECK(child.space.stats.bytes_over_network == 2 * kPageSize);
  // fill_pages allocates consecutive frames, so one batched read suffices.
  CHECK(h.cluster.fabric().ledger().rdma_reads() - reads_before == 1);

  SUBCASE("prefetched page is already present: no window, no traffic") {
    REQUIRE(child.space.touch(h.t, kBase + kPageSize, AccessKind::Read).ok());
    CHECK(child.space.stats.faults_rdma == 1);  // no second fault
    CHECK(child.space.stats.bytes_over_network == 2 * kPageSize);
  }
}

TEST_CASE("prefetch window stops at the VMA boundary and clamps") {
  SimConfig cfg = cfg_with(6);
  Harness h(cfg);
  Container& parent = h.parent_with_pages(4, 0x42);  // K=6 > 3 remaining
  auto id = h.cluster.fork_prepare(h.t, parent);
  REQUIRE(id.ok());
  Container& child = h.resume(*id);

  const auto window = child.space.prefetch_window(kBaseVpn);
  CHECK(window.size() == 3);
  REQUIRE(child.space.touch(h.t, kBase, AccessKind::Read).ok());
  CHECK(child.space.stats.pages_prefetched == 3);
  CHECK(child.space.stats.bytes_over_network == 4 * kPageSize);
}

TEST_CASE("non-contiguous frames prefetch with separate reads") {
  Harness h(cfg_with(1));
  Container& parent = h.cluster.create_root(NodeId{0});
  h.cluster.add_vma(parent, 0, kBase, kBase + 4 * kPageSize);
  // Reverse fill order makes consecutive vpns map to descending pfns.
  h.cluster.fill_pages(parent, kBaseVpn + 1, 1, 0x02);
  h.cluster.fill_pages(parent, kBaseVpn, 1, 0x01);
  auto id = h.cluster.fork_prepare(h.t, parent);
  REQUIRE(id.ok());
  Container& child = h.resume(*id);

  const std::uint64_t reads_before = h.cluster.fabric().ledger().rdma_reads();
  REQUIRE(child.space.touch(h.t, kBase, AccessKind::Read).ok());
  CHECK(h.cluster.fabric().ledger().rdma_reads() - reads_before == 2);
  CHECK(child.space.stats.pages_prefetched == 1);
  CHECK(child.space.stats.bytes_over_network == 2 * kPageSize);

  std::vector<std::uint8_t> buf(1);
  REQUIRE(child.space.read(h.t, kBase + kPageSize, buf).ok());
  CHECK(buf[0] == 0x02);
}

TEST_CASE("transfer economy: bytes equal 4096 x touched pages exactly") {
  Harness h(cfg_with(0));
  const std::uint64_t pages = 64;
  Container& parent = h.parent_with_pages(pages, 0x99);
  auto id = h.cluster.fork_prepare(h.t, parent);
  REQUIRE(id.ok());
  Container& child = h.resume(*id);

  Rng rng(3);
  std::set<std::uint64_t> touched;
  while (touched.size() < 32) touched.insert(rng.bounded(pages));
  for (std::uint64_t off : touched) {
    REQUIRE(child.space.touch(h.t, kBase + off * kPageSize, AccessKind::Read).ok());
  }
  CHECK(child.space.stats.bytes_over_network == 32 * kPageSize);
  CHECK(child.space.stats.faults_rdma == 32);
}

TEST_CASE("pt cache: a second child of the same parent rereads nothing") {
  Harness h(cfg_with(0));
  Container& parent = h.parent_with_pages(16, 0xCD);
  auto id = h.cluster.fork_prepare(h.t, parent);
  REQUIRE(id.ok());

  Container& a = h.resume(*id);
  for (int i = 0; i < 10; ++i)
    REQUIRE(a.space.touch(h.t, kBase + i * kPageSize, AccessKind::Read).ok());
  CHECK(a.space.stats.bytes_over_network == 10 * kPageSize);
  h.cluster.finish_container(h.t, a);

  auto rb = h.cluster.fork_resume(h.t, NodeId{1}, *id);
  REQUIRE(rb.ok());
  CHECK(rb->pt_cache_hit);
  CHECK(rb->descriptor_bytes == 0);
  Container& b = *rb->child;
  std::vector<std::uint8_t> buf(kPageSize);
  for (int i = 0; i < 10; ++i)
    REQUIRE(b.space.read(h.t, kBase + i * kPageSize, buf).ok());
  CHECK(b.space.stats.bytes_over_network == 0);

  SUBCASE("a cached-page write is copy-on-write against the snapshot") {
    const std::vector<std::uint8_t> mark(8, 0x77);
    REQUIRE(b.space.write(h.t, kBase, mark).ok());
    h.cluster.finish_container(h.t, b);

    // The cache snapshot now comes from b; read through a third child.
    auto rc = h.cluster.fork_resume(h.t, NodeId{1}, *id);
    REQUIRE(rc.ok());
    REQUIRE(rc->pt_cache_hit);
    std::vector<std::uint8_t> back(8);
    REQUIRE(rc->child->space.read(h.t, kBase, back).ok());
    CHECK(back == mark);  // b's snapshot
    // b's write went to a private frame: the parent still holds 0xCD.
    std::vector<std::uint8_t> p(8);
    Container* parent_again = nullptr;
    for (auto& [cid, c] : h.cluster.machine(NodeId{0}).containers()) {
      (void)cid;
      if (c->state == ContainerState::Paused) parent_again = c.get();
    }
    REQUIRE(parent_again != nullptr);
    REQUIRE(parent_again->space.read(h.t, kBase, p).ok());
    CHECK(std::all_of(p.begin(), p.end(),
                      [](std::uint8_t x) { return x == 0xCD; }));
  }

  SUBCASE("expired entries never serve") {
    h.cluster.finish_container(h.t, b);
    h.t.now += h.cluster.config().pt_cache_keep + 1;
    auto rc = h.cluster.fork_resume(h.t, NodeId{1}, *id);
    REQUIRE(rc.ok());
    CHECK(!rc->pt_cache_hit);
    CHECK(rc->descriptor_bytes > 0);
  }
}

TEST_CASE("memory fidelity against the eager-copy oracle") {
  Harness h(cfg_with(1));
  testing::MemoryOracle oracle;

  Container& parent = h.cluster.create_root(NodeId{0});
  h.cluster.add_vma(parent, 0, kBase, kBase + 32 * kPageSize);
  Rng rng(0xace);
  for (std::uint64_t p = 0; p < 32; ++p) {
    if (rng.bounded(4) == 0) continue;  // leave holes
    const auto byte = static_cast<std::uint8_t>(rng.next());
    h.cluster.fill_pages(parent, kBaseVpn + p, 1, byte);
    oracle.fill(parent.id, kBaseVpn + p, 1, byte);
  }
  auto id = h.cluster.fork_prepare(h.t, parent);
  REQUIRE(id.ok());
  Container& child = h.resume(*id);
  oracle.inherit(child.id, parent.id);

  for (int i = 0; i < 200; ++i) {
    const std::uint64_t va = kBase + rng.bounded(32 * kPageSize - 64);
    const std::size_t len = 1 + rng.bounded(64);
    std::vector<std::uint8_t> got(len);
    REQUIRE(child.space.read(h.t, va, got).ok());
    CHECK(got == oracle.expect(child.id, va, len));
    if (rng.bounded(3) == 0) {
      std::vector<std::uint8_t> data(len);
      for (auto& b : data) b = static_cast<std::uint8_t>(rng.next());
      REQUIRE(child.space.write(h.t, va, data).ok());
      oracle.write(child.id, va, data);
    }
  }
  child.space.assert_invariants();
}
