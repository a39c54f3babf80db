#include "rforksim/fabric.hpp"

#include <algorithm>
#include <cstring>

namespace rfork {

bool DcTarget::covers(std::uint64_t pfn, std::uint64_t pages) const {
  // Ranges are few (one per VMA); linear scan is fine.
  std::uint64_t need = pfn;
  const std::uint64_t end = pfn + pages;
  while (need < end) {
    bool hit = false;
    for (const auto& r : guarded) {
      if (need >= r.start_pfn && need < r.start_pfn + r.count) {
        need = std::min(end, r.start_pfn + r.count);
        hit = true;
        break;
      }
    }
    if (!hit) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Node

std::uint64_t Node::alloc_frame() { return alloc_frames(1); }

std::uint64_t Node::alloc_frames(std::uint64_t count) {
  const std::uint64_t first = next_pfn_;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t pfn = next_pfn_++;
    const std::uint64_t c = pfn / kChunkPages;
    if (c >= chunks_.size()) chunks_.resize(c + 1);
    if (!chunks_[c]) chunks_[c] = std::make_unique<FrameChunk>();
    FrameChunk& chunk = *chunks_[c];
    Frame& f = chunk.frames[pfn % kChunkPages];
    if (!frame_pool_.empty()) {
      f = std::move(frame_pool_.back());
      frame_pool_.pop_back();
      std::memset(f.data(), 0, kPageSize);
    } else {
      f.assign(kPageSize, 0);
    }
    chunk.refs[pfn % kChunkPages] = 1;
    ++chunk.live;
  }
  live_frames_ += count;
  metric_bytes_ += static_cast<std::int64_t>(count * kPageSize);
  return first;
}

void Node::share_frame(std::uint64_t pfn) {
  FrameChunk* c = chunk_of(pfn);
  sim_assert(c && c->refs[pfn % kChunkPages] > 0, "share_frame: unknown pfn");
  ++c->refs[pfn % kChunkPages];
}

void Node::release_frame(std::uint64_t pfn) {
  const std::uint64_t ci = pfn / kChunkPages;
  FrameChunk* c = chunk_of(pfn);
  sim_assert(c && c->refs[pfn % kChunkPages] > 0, "release_frame: unknown pfn");
  if (--c->refs[pfn % kChunkPages] == 0) {
    if (frame_pool_.size() < 1024) {
      frame_pool_.push_back(std::move(c->frames[pfn % kChunkPages]));
    }
    c->frames[pfn % kChunkPages] = Frame();
    --live_frames_;
    metric_bytes_ -= static_cast<std::int64_t>(kPageSize);
    if (--c->live == 0) chunks_[ci].reset();  // pfns are never reused
  }
}

std::uint32_t Node::frame_refs(std::uint64_t pfn) const {
  const FrameChunk* c = chunk_of(pfn);
  return c ? c->refs[pfn % kChunkPages] : 0;
}

Frame* Node::frame(std::uint64_t pfn) {
  FrameChunk* c = chunk_of(pfn);
  if (!c || c->refs[pfn % kChunkPages] == 0) return nullptr;
  return &c->frames[pfn % kChunkPages];
}

const Frame* Node::frame(std::uint64_t pfn) const {
  const FrameChunk* c = chunk_of(pfn);
  if (!c || c->refs[pfn % kChunkPages] == 0) return nullptr;
  return &c->frames[pfn % kChunkPages];
}

void Node::add_metric(SimTime at, std::int64_t delta) {
  (void)at;
  metric_bytes_ += delta;
}

// ---------------------------------------------------------------------------
// Fabric

Fabric::Fabric(const SimConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
  cfg_.validate();
}

NodeId Fabric::register_node() {
  NodeId id{static_cast<std::uint32_t>(nodes_.size())};
  nodes_.emplace_back();
  nodes_.back().id = id;
  nodes_.back().server_free_.assign(cfg_.handler_count, 0);
  return id;
}

Node& Fabric::node(NodeId id) {
  sim_assert(id.addr < nodes_.size(), "unknown node");
  return nodes_[id.addr];
}

const Node& Fabric::node(NodeId id) const {
  sim_assert(id.addr < nodes_.size(), "unknown node");
  return nodes_[id.addr];
}

void Fabric::crash_node(NodeId id, SimTime at) {
  Node& n = node(id);
  if (!n.crashed_at_ || *n.crashed_at_ > at) n.crashed_at_ = at;
}

DcKey Fabric::create_dc_target(TaskClock* t, NodeId id, std::uint64_t user_key,
                               std::vector<PageRange> guarded) {
  Node& n = node(id);
  DcKey key{n.next_nic_++, user_key};
  DcTarget target;
  target.key = key;
  target.guarded = std::move(guarded);
  n.targets_.emplace(key.nic_num, std::move(target));
  const SimTime at = t ? t->now : loop_.now();
  if (t) t->now += cfg_.cost.dc_connect;
  ledger_.charge(CostLedger::Op::DcConnect, cfg_.cost.dc_connect, 0);
  n.add_metric(at, static_cast<std::int64_t>(kDcTargetBytes));
  return key;
}

Result<void> Fabric::destroy_dc_target(TaskClock& t, NodeId id,
                                       const DcKey& key) {
  Node& n = node(id);
  auto it = n.targets_.find(key.nic_num);
  if (it == n.targets_.end() || !it->second.live ||
      it->second.key.user_key != key.user_key) {
    return Result<void>(Err::NoSuchTarget);
  }
  it->second.live = false;
  it->second.destroyed_at = t.now;
  n.add_metric(t.now, -static_cast<std::int64_t>(kDcTargetBytes));
  return Result<void>();
}

void Fabric::set_target_ranges(NodeId id, const DcKey& key,
                               std::vector<PageRange> guarded) {
  Node& n = node(id);
  auto it = n.targets_.find(key.nic_num);
  sim_assert(it != n.targets_.end() && it->second.live,
             "set_target_ranges: target not live");
  it->second.guarded = std::move(guarded);
}

const DcTarget* Fabric::find_target(NodeId id, const DcKey& key) const {
  const Node& n = node(id);
  auto it = n.targets_.find(key.nic_num);
  if (it == n.targets_.end()) return nullptr;
  return &it->second;
}

Result<std::vector<std::uint8_t>> Fabric::read_impl(
    TaskClock& t, NodeId reader, NodeId dest, const DcKey& key,
    std::uint64_t start_pfn, std::uint64_t byte_len) {
  sim_assert(reader.addr < nodes_.size(), "rdma_read: reader not registered");
  Node& n = node(dest);
  const SimTime delivery = t.now + cfg_.cost.rdma_rtt;
  const std::uint64_t pages = (byte_len + kPageSize - 1) / kPageSize;

  auto reject = [&]() -> Result<std::vector<std::uint8_t>> {
    t.now = delivery;
    ledger_.charge(CostLedger::Op::RdmaReject, cfg_.cost.rdma_rtt, 0);
    return Result<std::vector<std::uint8_t>>(Err::Rejected);
  };

  if (n.crashed_by(delivery)) return reject();
  auto it = n.targets_.find(key.nic_num);
  if (it == n.targets_.end()) return reject();
  const DcTarget& target = it->second;
  if (target.key.user_key != key.user_key) return reject();
  if (!target.live_at(delivery)) return reject();
  if (!target.covers(start_pfn, pages)) return reject();

  std::vector<std::uint8_t> out(byte_len);
  std::uint64_t copied = 0;
  for (std::uint64_t i = 0; i < pages; ++i) {
    const Frame* f = n.frame(start_pfn + i);
    if (!f) return reject();  // page vanished under a stale range
    const std::uint64_t take = std::min<std::uint64_t>(kPageSize, byte_len - copied);
    std::memcpy(out.data() + copied, f->data(), take);
    copied += take;
  }
  const SimTime charge =
      cfg_.cost.rdma_rtt + transfer_ns(byte_len, cfg_.cost.rdma_bandwidth);
  t.now += charge;
  ledger_.charge(CostLedger::Op::RdmaRead, charge, byte_len);
  return out;
}

Result<std::vector<std::uint8_t>> Fabric::rdma_read(TaskClock& t, NodeId reader,
                                                    NodeId dest, const DcKey& key,
                                                    std::uint64_t start_pfn,
                                                    std::uint64_t byte_len) {
  sim_assert(byte_len > 0 && byte_len % kPageSize == 0,
             "rdma_read: byte_len must be a positive multiple of the page size");
  return read_impl(t, reader, dest, key, start_pfn, byte_len);
}

Result<std::vector<std::uint8_t>> Fabric::rdma_read_raw(
    TaskClock& t, NodeId reader, NodeId dest, const DcKey& key,
    std::uint64_t start_pfn, std::uint64_t byte_len) {
  sim_assert(byte_len > 0, "rdma_read_raw: empty read");
  return read_impl(t, reader, dest, key, start_pfn, byte_len);
}

Result<std::any> Fabric::rpc_call(TaskClock& t, NodeId src, NodeId dst,
                                  std::uint32_t handler_id,
                                  const std::any& request,
                                  std::uint64_t request_bytes) {
  sim_assert(src.addr < nodes_.size(), "rpc_call: src not registered");
  Node& n = node(dst);
  const SimTime arrival = t.now + cfg_.cost.rdma_rtt;
  if (n.crashed_by(arrival)) {
    t.now += cfg_.rpc_timeout;
    ledger_.charge(CostLedger::Op::RpcTimeout, cfg_.cost.rdma_rtt, request_bytes);
    return Result<std::any>(Err::Timeout);
  }
  auto hit = n.handlers_.find(handler_id);
  sim_assert(hit != n.handlers_.end(), "rpc_call: no handler registered");

  HandlerOutcome out = hit->second(request);

  // FIFO over handler_count logical servers.
  std::size_t best = 0;
  for (std::size_t i = 1; i < n.server_free_.size(); ++i) {
    if (n.server_free_[i] < n.server_free_[best]) best = i;
  }
  const SimTime start = std::max(arrival, n.server_free_[best]);
  const SimTime done = start + out.service_time;
  n.server_free_[best] = done;

  const SimTime reply_at = done + cfg_.cost.rdma_rtt;
  const SimTime charge = (reply_at - t.now) - (start - arrival);  // rtt*2 + service
  t.now = reply_at;
  ledger_.charge(CostLedger::Op::Rpc, charge, request_bytes + out.reply_bytes);
  return Result<std::any>(std::move(out.reply));
}

}  // namespace rfork
