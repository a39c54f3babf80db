#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <vector>

#include "rforksim/descriptor.hpp"
#include "rforksim/fabric.hpp"

namespace rfork {

// Pre-created DC targets waiting for a prepare. Keeping the pool warm moves
// every dc_connect off the fork_prepare critical path; assignment only pins
// the target's guarded range to the VMA's current physical pages.
class TargetPool {
 public:
  TargetPool(Fabric* fabric, NodeId node)
      : fabric_(fabric),
        node_(node),
        capacity_(fabric->config().target_pool_capacity),
        watermark_(fabric->config().target_pool_watermark) {}

  NodeId node() const { return node_; }
  std::size_t free_count() const { return free_.size(); }

  // Fills the pool to capacity; returns the number of targets created.
  // Runs as a background event, so no task clock is charged.
  std::uint32_t refill();

  // Boot-time fill plus periodic background refill.
  void start(EventLoop& loop);

  // Pops a pooled target (creating one synchronously on `t` if empty) and
  // pins it to `guarded`.
  DcKey take(TaskClock& t, std::vector<PageRange> guarded);

 private:
  void maybe_schedule_refill();

  Fabric* fabric_;
  NodeId node_;
  std::uint32_t capacity_;
  std::uint32_t watermark_;
  std::deque<DcKey> free_;
  bool refill_scheduled_ = false;
  bool started_ = false;
};

// Gives every VMA of a prepare its own revocable target.
// vma_ranges holds (vma_id, physical pages the parent currently maps there).
std::map<std::uint32_t, DcKey> assign_targets(
    TaskClock& t, TargetPool& pool,
    const std::vector<std::pair<std::uint32_t, std::vector<PageRange>>>& vma_ranges);

// Destroys the target guarding one VMA of a published descriptor. Every later
// child read into that VMA rejects at the fabric (false positives included);
// the descriptor itself stays fetchable.
Result<void> revoke_vma(Fabric& fabric, TaskClock& t, DescriptorHost& host,
                        NodeId node, const DescriptorId& id,
                        std::uint32_t vma_id);

}  // namespace rfork
