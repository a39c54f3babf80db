#include "rforksim/access.hpp"

namespace rfork {

std::uint32_t TargetPool::refill() {
  std::uint32_t created = 0;
  while (free_.size() < capacity_) {
    free_.push_back(fabric_->create_dc_target(nullptr, node_,
                                              fabric_->rng().next(), {}));
    ++created;
  }
  refill_scheduled_ = false;
  return created;
}

void TargetPool::start(EventLoop& loop) {
  started_ = true;
  refill();
  (void)loop;
}

void TargetPool::maybe_schedule_refill() {
  if (!started_ || refill_scheduled_ || free_.size() >= watermark_) return;
  refill_scheduled_ = true;
  fabric_->loop().schedule_in(fabric_->config().target_pool_refill_period,
                              [this] { refill(); });
}

DcKey TargetPool::take(TaskClock& t, std::vector<PageRange> guarded) {
  DcKey key;
  if (!free_.empty()) {
    key = free_.front();
    free_.pop_front();
  } else {
    key = fabric_->create_dc_target(&t, node_, fabric_->rng().next(), {});
  }
  fabric_->set_target_ranges(node_, key, std::move(guarded));
  maybe_schedule_refill();
  return key;
}

std::map<std::uint32_t, DcKey> assign_targets(
    TaskClock& t, TargetPool& pool,
    const std::vector<std::pair<std::uint32_t, std::vector<PageRange>>>& vma_ranges) {
  std::map<std::uint32_t, DcKey> out;
  for (const auto& [vma_id, ranges] : vma_ranges) {
    out.emplace(vma_id, pool.take(t, ranges));
  }
  return out;
}

Result<void> revoke_vma(Fabric& fabric, TaskClock& t, DescriptorHost& host,
                        NodeId node, const DescriptorId& id,
                        std::uint32_t vma_id) {
  DescriptorHost::Record* rec = host.find(id.handle_id);
  if (!rec) return Result<void>(Err::NoSuchDescriptor);
  for (std::size_t i = 0; i < rec->vma_ids.size(); ++i) {
    if (rec->vma_ids[i] != vma_id) continue;
    if (rec->vma_revoked[i]) return Result<void>(Err::NoSuchVma);
    rec->vma_revoked[i] = true;
    return fabric.destroy_dc_target(t, node, rec->vma_keys[i]);
  }
  return Result<void>(Err::NoSuchVma);
}

}  // namespace rfork
