#pragma once

#include <cstdint>
#include <functional>
#include <queue>
#include <vector>

#include "rforksim/time_types.hpp"

namespace rfork {

// Deterministic discrete-event queue. Events fire in (time, sequence) order;
// the sequence number is assigned at scheduling, so identical schedules replay
// identically.
class EventLoop {
 public:
  using Fn = std::function<void()>;

  SimTime now() const { return now_; }

  void schedule_at(SimTime t, Fn fn) {
    queue_.push(Event{t < now_ ? now_ : t, next_seq_++, std::move(fn)});
  }

  void schedule_in(SimTime dt, Fn fn) { schedule_at(now_ + dt, std::move(fn)); }

  bool empty() const { return queue_.empty(); }

  // Runs events with time <= horizon, then advances the clock to horizon.
  void run_until(SimTime horizon) {
    while (!queue_.empty() && queue_.top().time <= horizon) step();
    if (horizon > now_) now_ = horizon;
  }

  void run_all() {
    while (!queue_.empty()) step();
  }

  // Advance the clock with no event processing (used by tests).
  void advance_to(SimTime t) {
    if (t > now_) now_ = t;
  }

 private:
  struct Event {
    SimTime time;
    std::uint64_t seq;
    Fn fn;
    bool operator>(const Event& o) const {
      if (time != o.time) return time > o.time;
      return seq > o.seq;
    }
  };

  void step() {
    // Moving out of the queue before firing lets handlers schedule freely.
    Event ev = queue_.top();
    queue_.pop();
    now_ = ev.time;
    ev.fn();
  }

  SimTime now_ = 0;
  std::uint64_t next_seq_ = 0;
  std::priority_queue<Event, std::vector<Event>, std::greater<Event>> queue_;
};

// A logical task's private time cursor. Operations advance it as they charge
// simulated time; the task's results become visible to others at the times
// recorded here.
struct TaskClock {
  SimTime now = 0;
};

}  // namespace rfork
