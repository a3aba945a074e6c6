#pragma once

/// \file
/// Reclamation domain: deferred execution of retire callbacks, ordered
/// after every guard that was active when the callback was retired.
///
/// The re-randomizer retires "unmap the old address space" callbacks
/// here; in-flight calls hold guards, so old mappings disappear only
/// once every call that might still be using them has drained.
///
/// Mechanism: a global epoch counter is bumped by each retire, and the
/// retired entry keeps the pre-bump value as its tag. A worker's
/// outermost guard pins the epoch current at entry. A guard active at
/// retire time therefore pins ≤ tag, and a guard started afterwards
/// pins > tag, so "no active worker pins ≤ tag" is exactly "every guard
/// active at retire time has been released". Workers register
/// explicitly; nothing is assumed about how their threads are managed.
///
/// Guard enter/exit touch only the worker's own cache line plus one
/// epoch load — O(1) and allocation-free.

#include <atomic>
#include <chrono>
#include <deque>
#include <functional>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include "rerand/util.hpp"

namespace rerand::smr {

using worker_id = u32;

struct guard {
  worker_id worker = 0;
  u32 level = 0;  // nesting depth this guard occupies (1 = outermost)
};

struct counters {
  u64 retired = 0;
  u64 freed = 0;
  u64 delta() const { return retired - freed; }
};

struct stuck_guard {
  worker_id worker;
  std::chrono::nanoseconds held;
};

inline constexpr std::chrono::nanoseconds kDefaultStuckThreshold =
    std::chrono::seconds(1);

class domain {
 public:
  worker_id register_worker() {
    std::unique_lock lk(reg_mu_);
    for (worker_id i = 0; i < slots_.size(); ++i) {
      if (!slots_[i].in_use.load(std::memory_order_relaxed)) {
        slots_[i].in_use.store(true, std::memory_order_relaxed);
        return i;
      }
    }
    slots_.emplace_back();
    slots_.back().in_use.store(true, std::memory_order_relaxed);
    return static_cast<worker_id>(slots_.size() - 1);
  }

  void unregister_worker(worker_id w) {
    std::unique_lock lk(reg_mu_);
    if (w >= slots_.size() || !slots_[w].in_use.load(std::memory_order_relaxed))
      throw unregistered_worker("worker " + std::to_string(w));
    slot& s = slots_[w];
    if (s.depth.load(std::memory_order_relaxed) != 0)
      throw double_release("worker unregistered with a live guard");
    s.in_use.store(false, std::memory_order_relaxed);
  }

  guard mr_start(worker_id w) {
    slot& s = checked_slot(w);
    const u32 level = s.depth.load(std::memory_order_relaxed) + 1;
    if (level == 1) {
      // Publish intent first: a concurrent collect that sees depth > 0
      // with the not-yet-updated pin is merely conservative.
      s.depth.store(1, std::memory_order_seq_cst);
      s.pinned.store(epoch_.load(std::memory_order_seq_cst),
                     std::memory_order_seq_cst);
      s.entered_at_ns.store(now_ns(), std::memory_order_relaxed);
    } else {
      s.depth.store(level, std::memory_order_relaxed);
    }
    return guard{w, level};
  }

  void mr_finish(const guard& g) {
    slot& s = checked_slot(g.worker);
    const u32 depth = s.depth.load(std::memory_order_relaxed);
    if (depth == 0 || depth != g.level)
      throw double_release("guard already released");
    if (depth == 1) {
      s.entered_at_ns.store(0, std::memory_order_relaxed);
      s.depth.store(0, std::memory_order_seq_cst);
    } else {
      s.depth.store(depth - 1, std::memory_order_relaxed);
    }
  }

  /// Schedules `cb` to run (via collect) once every guard active right
  /// now has been released. Callable from any thread, including from
  /// inside another callback.
  void mr_retire(std::function<void()> cb) {
    const u64 tag = epoch_.fetch_add(1, std::memory_order_seq_cst);
    std::lock_guard lk(queue_mu_);
    queue_.push_back(entry{std::move(cb), tag});
    retired_.fetch_add(1, std::memory_order_relaxed);
  }

  /// Runs every eligible callback; returns how many ran. Callbacks are
  /// dequeued first and executed outside the queue lock, so each runs
  /// exactly once even with concurrent collectors, and may itself
  /// retire more work.
  u64 collect() {
    const u64 horizon = min_active_pin();
    std::vector<entry> ready;
    {
      std::lock_guard lk(queue_mu_);
      while (!queue_.empty() && queue_.front().tag < horizon) {
        ready.push_back(std::move(queue_.front()));
        queue_.pop_front();
      }
    }
    for (entry& e : ready) {
      e.cb();
      freed_.fetch_add(1, std::memory_order_relaxed);
    }
    return ready.size();
  }

  /// Counter snapshot. `freed` is read first so a racing reader never
  /// observes freed > retired.
  counters stats() const {
    counters c;
    c.freed = freed_.load(std::memory_order_acquire);
    c.retired = retired_.load(std::memory_order_acquire);
    return c;
  }

  /// Appendix-style counter report.
  std::string log_lines() const {
    counters c = stats();
    std::string out;
    out += "SMR Retire: " + std::to_string(c.retired) + "\n";
    out += "SMR Free: " + std::to_string(c.freed) + "\n";
    out += "SMR Delta: " + std::to_string(c.delta()) + "\n";
    return out;
  }

  /// Workers whose outermost guard has been held longer than
  /// `threshold` — the "blocked for too long" detector.
  std::vector<stuck_guard> stuck_guards(
      std::chrono::nanoseconds threshold = kDefaultStuckThreshold) const {
    std::vector<stuck_guard> out;
    const i64 now = now_ns();
    std::shared_lock lk(reg_mu_);
    for (worker_id i = 0; i < slots_.size(); ++i) {
      const slot& s = slots_[i];
      if (!s.in_use.load(std::memory_order_relaxed)) continue;
      if (s.depth.load(std::memory_order_acquire) == 0) continue;
      const i64 t0 = s.entered_at_ns.load(std::memory_order_relaxed);
      if (t0 == 0) continue;
      const auto held = std::chrono::nanoseconds(now - t0);
      if (held >= threshold) out.push_back(stuck_guard{i, held});
    }
    return out;
  }

  u64 pending() const {
    std::lock_guard lk(queue_mu_);
    return queue_.size();
  }

 private:
  struct alignas(64) slot {
    std::atomic<bool> in_use{false};
    std::atomic<u32> depth{0};
    std::atomic<u64> pinned{0};
    std::atomic<i64> entered_at_ns{0};
  };

  struct entry {
    std::function<void()> cb;
    u64 tag;
  };

  static i64 now_ns() {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
  }

  slot& checked_slot(worker_id w) {
    std::shared_lock lk(reg_mu_);
    if (w >= slots_.size() || !slots_[w].in_use.load(std::memory_order_relaxed))
      throw unregistered_worker("worker " + std::to_string(w));
    return slots_[w];
  }

  /// Smallest epoch pinned by any active guard; entries tagged below it
  /// are safe to run.
  u64 min_active_pin() const {
    u64 horizon = epoch_.load(std::memory_order_seq_cst);
    std::shared_lock lk(reg_mu_);
    for (const slot& s : slots_) {
      if (!s.in_use.load(std::memory_order_relaxed)) continue;
      if (s.depth.load(std::memory_order_seq_cst) == 0) continue;
      horizon = std::min(horizon, s.pinned.load(std::memory_order_seq_cst));
    }
    return horizon;
  }

  // Starts at 1 so a slot's initial pin of 0 reads as "before every
  // tag" — harmlessly conservative during the publication window.
  std::atomic<u64> epoch_{1};
  mutable std::shared_mutex reg_mu_;
  std::deque<slot> slots_;
  mutable std::mutex queue_mu_;
  std::deque<entry> queue_;
  std::atomic<u64> retired_{0};
  std::atomic<u64> freed_{0};
};

/// Scoped guard for host-side critical sections.
class scoped_guard {
 public:
  scoped_guard(domain& d, worker_id w) : d_(d), g_(d.mr_start(w)) {}
  ~scoped_guard() { d_.mr_finish(g_); }
  scoped_guard(const scoped_guard&) = delete;
  scoped_guard& operator=(const scoped_guard&) = delete;

 private:
  domain& d_;
  guard g_;
};

}  // namespace rerand::smr
