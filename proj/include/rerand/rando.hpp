#pragma once

/// \file
/// The re-randomizer: periodically gives each managed module a fresh
/// movable base without copying a byte of it. One cycle, in order:
///
///   1. alias every movable region at a new uniform-random base over
///      the same physical frames;
///   2. build new local-table frames for both parts, every entry
///      recomputed against the new base;
///   3. swap the new alias's movable local-table page onto the new
///      frame, and the immovable local-table page in place (its code
///      never moves, so it must be updated where it stands);
///   4. rotate the return-address key into slot 0 of the new movable
///      local table — the new tables are populated before they become
///      visible and stay read-only forever after;
///   5. run the module's update hook (if any) through its wrapper, on
///      the new alias, so the module can refresh function pointers it
///      keeps in data;
///   6. retire the old generation: one reclamation entry unmaps the
///      old alias once every call that started on it has finished, a
///      second releases the superseded local-table frames.
///
/// Old-generation code keeps reading its *old* local table (old alias,
/// old frames, old key), so calls in flight decrypt and return
/// correctly; only the shared immovable table changes under them, and
/// it is only read at fresh call entries. Optionally each cycle also
/// retires idle pool stacks (stack_rerand).
///
/// A single background thread services all modules, each on its own
/// period; everything is also drivable one cycle at a time for
/// deterministic tests.

#include <chrono>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "rerand/exec.hpp"
#include "rerand/loader.hpp"
#include "rerand/smr.hpp"
#include "rerand/stackpool.hpp"
#include "rerand/util.hpp"
#include "rerand/vmem.hpp"

namespace rerand::rando {

inline constexpr const char* kStartLine = "Randomize: kthread started";

struct config {
  u64 period_ms = 20;
  u64 rng_seed = 1;
  bool stack_rerand = false;
  u64 hook_fuel = 1'000'000;
  u64 place_retries = 64;
};

struct generation_record {
  std::string module_name;
  u64 generation = 0;
  u64 old_base = 0;
  u64 new_base = 0;
  u64 key_hash = 0;  // never the key itself
  u64 t_start_ns = 0;
  u64 t_retire_ns = 0;
  std::atomic<u64> t_unmapped_ns{0};  // set when the old alias went away
};

struct metrics_snapshot {
  u64 rerandomized = 0;
  u64 smr_retire = 0;
  u64 smr_free = 0;
  u64 smr_delta = 0;
  u64 stack_alloc = 0;
  u64 stack_free = 0;
  u64 stack_delta = 0;
};

class randomizer {
 public:
  randomizer(vmem::address_space& space, smr::domain& dom,
             stackpool::pool* pool, config cfg)
      : space_(space), dom_(dom), pool_(pool), cfg_(cfg), rng_(cfg.rng_seed) {
    if (cfg_.period_ms == 0) throw invalid_model("period must be positive");
    if (pool_) {
      hook_worker_ = dom_.register_worker();
      pool_->add_worker(hook_worker_);
      hook_stack_ = loader::pick_block_base(space_, rng_, 1,
                                            cfg_.place_retries);
      space_.map_region(hook_stack_, {space_.create_frame()},
                        vmem::kReadWrite);
    }
  }

  ~randomizer() {
    if (running_) {
      stop_flag_ = true;
      {
        std::lock_guard wk(wake_mu_);
        cv_.notify_all();
      }
      if (thread_.joinable()) thread_.join();
    }
  }

  randomizer(const randomizer&) = delete;
  randomizer& operator=(const randomizer&) = delete;

  /// period_ms == 0 means "use the config default".
  void add_module(loader::loaded_module& lm, u64 period_ms = 0) {
    if (lm.hook_wrapper && !pool_)
      throw invalid_model("update hooks need a stack pool to run on");
    std::lock_guard lk(mod_mu_);
    modules_.push_back(entry{&lm, period_ms ? period_ms : cfg_.period_ms, {}});
  }

  /// One full cycle for one module; the manual-tick path used by
  /// deterministic tests. The background thread calls this too.
  std::shared_ptr<generation_record> rerandomize_once(
      loader::loaded_module& lm) {
    std::lock_guard lk(mod_mu_);
    return cycle(lm);
  }

  void start() {
    std::lock_guard lk(state_mu_);
    if (running_) throw already_running("randomizer thread already started");
    {
      std::lock_guard mk(mod_mu_);
      if (modules_.empty()) throw invalid_model("no modules to manage");
      log_.push_back(kStartLine);
      const auto now = std::chrono::steady_clock::now();
      for (auto& m : modules_)
        m.due = now + std::chrono::milliseconds(m.period_ms);
    }
    stop_flag_ = false;
    thread_ = std::thread([this] { loop(); });
    running_ = true;
  }

  /// Stops the thread, then drains: idle pool stacks are retired and the
  /// reclamation queue is collected until (absent live guards) both the
  /// reclamation and stack deltas reach zero.
  void stop() {
    {
      std::lock_guard lk(state_mu_);
      if (!running_) throw not_running("randomizer thread not started");
      stop_flag_ = true;
    }
    {
      std::lock_guard wk(wake_mu_);
      cv_.notify_all();
    }
    thread_.join();
    {
      std::lock_guard lk(state_mu_);
      running_ = false;
    }
    if (pool_) pool_->regenerate();
    for (int i = 0; i < 64 && dom_.pending() > 0; ++i)
      if (dom_.collect() == 0) break;
    if (thread_error_) {
      auto e = thread_error_;
      thread_error_ = nullptr;
      std::rethrow_exception(e);
    }
  }

  bool running() const {
    std::lock_guard lk(state_mu_);
    return running_;
  }

  metrics_snapshot metrics() const {
    metrics_snapshot m;
    {
      std::lock_guard lk(mod_mu_);
      m.rerandomized = rerandomized_;
    }
    const auto s = dom_.stats();
    m.smr_retire = s.retired;
    m.smr_free = s.freed;
    m.smr_delta = s.retired - s.freed;
    if (pool_) {
      const auto p = pool_->stats();
      m.stack_alloc = p.alloc;
      m.stack_free = p.freed;
      m.stack_delta = p.alloc - p.freed;
    }
    return m;
  }

  /// One status block in the established log format.
  std::string log_block() const {
    const auto m = metrics();
    std::string out = "-----\n";
    out += "Randomized " + std::to_string(m.rerandomized) + " times\n";
    out += "SMR Retire: " + std::to_string(m.smr_retire) + "\n";
    out += "SMR Free: " + std::to_string(m.smr_free) + "\n";
    out += "SMR Delta: " + std::to_string(m.smr_delta) + "\n";
    out += "Stack Alloc: " + std::to_string(m.stack_alloc) + "\n";
    out += "Stack Free: " + std::to_string(m.stack_free) + "\n";
    out += "Stack Delta: " + std::to_string(m.stack_delta) + "\n";
    return out;
  }

  std::vector<std::string> log() const {
    std::lock_guard lk(mod_mu_);
    return log_;
  }

  std::vector<std::shared_ptr<generation_record>> history() const {
    std::lock_guard lk(mod_mu_);
    return history_;
  }

 private:
  struct entry {
    loader::loaded_module* lm;
    u64 period_ms;
    std::chrono::steady_clock::time_point due;
  };

  static u64 now_ns() {
    return static_cast<u64>(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                std::chrono::steady_clock::now()
                                    .time_since_epoch())
                                .count());
  }

  u64 rotate_key(const loader::loaded_module& lm) {
    u64 k = rng_.next_u64();
    // Nonzero, and never the previous key (compared through its hash —
    // the key itself is not kept host-side).
    while (k == 0 || fnv1a64(k) == lm.key_hash) k = rng_.next_u64();
    return k;
  }

  std::shared_ptr<generation_record> cycle(loader::loaded_module& lm) {
    auto rec = std::make_shared<generation_record>();
    rec->module_name = lm.image.name;
    rec->old_base = lm.movable_base;
    rec->t_start_ns = now_ns();

    const u64 pages = lm.movable_len / vmem::kPageSize;

    // (1) Fresh base, same frames. Placement races with on-demand stack
    // allocation, so an overlap on mapping is retried with a new draw.
    std::vector<vmem::region> old_regions;
    for (const auto& rd : lm.movable_regions) old_regions.push_back(rd.cur);
    u64 new_base = 0;
    for (u64 attempt = 0;; ++attempt) {
      new_base = loader::pick_block_base(space_, rng_, pages,
                                         cfg_.place_retries);
      std::vector<vmem::region> fresh;
      try {
        for (const auto& rd : lm.movable_regions)
          fresh.push_back(space_.remap_alias(rd.cur, new_base + rd.rel_off));
      } catch (const overlap_error&) {
        for (const auto& r : fresh) space_.unmap_region(r);
        if (attempt + 1 >= cfg_.place_retries)
          throw placement_exhausted("aliasing kept colliding");
        continue;
      }
      for (u64 i = 0; i < fresh.size(); ++i) lm.movable_regions[i].cur =
          fresh[i];
      break;
    }

    // (2) New local-table frames, fully populated before anyone sees them.
    const u64 new_key = rotate_key(lm);
    auto build_local = [&](u32 t) {
      const u64 fid = space_.create_frame();
      auto& tab = lm.gots[t];
      for (u64 i = 0; i < tab.entries.size(); ++i) {
        auto& e = tab.entries[i];
        e.value = e.is_key ? new_key : new_base + e.rel;
        space_.poke_frame(fid, i * 8, &e.value, 8);
      }
      return fid;
    };
    const u64 ml_frame = build_local(loader::kMovableLocal);
    const u64 il_frame = build_local(loader::kImmovableLocal);

    // (3)+(4) Make them visible: page permissions carry over ({R}), so
    // the tables are write-protected from their first readable moment.
    auto pins = std::make_shared<std::vector<vmem::frame_pin>>();
    for (auto& rd : lm.movable_regions)
      if (rd.cls == loader::rclass::local_got) {
        pins->push_back(space_.swap_frame(rd.cur.base, ml_frame));
        lm.gots[loader::kMovableLocal].region = rd.cur;
      } else if (rd.cls == loader::rclass::fixed_got) {
        lm.gots[loader::kMovableFixed].region = rd.cur;
      }
    for (const auto& rd : lm.immovable_regions)
      if (rd.cls == loader::rclass::local_got)
        pins->push_back(space_.swap_frame(rd.cur.base, il_frame));

    lm.movable_base = new_base;
    lm.generation += 1;
    lm.key_hash = fnv1a64(new_key);
    rec->new_base = new_base;
    rec->generation = lm.generation;
    rec->key_hash = lm.key_hash;

    // (5) Let the module refresh pointers it keeps in data. Runs on the
    // new alias by construction: the wrapper reads the new local table.
    if (lm.hook_wrapper) {
      exec::engine eng(space_, &dom_, pool_);
      exec::run_request q;
      q.entry = *lm.hook_wrapper;
      q.worker = hook_worker_;
      q.fuel = cfg_.hook_fuel;
      q.stack_lo = hook_stack_;
      q.stack_top = hook_stack_ + vmem::kPageSize;
      const auto res = eng.run(q);
      if (!res.ok())
        throw invalid_model(std::string("update hook stopped with ") +
                            exec::to_string(res.kind));
    }

    // (6) Retire the old generation. Unmapping the old alias also drops
    // the old movable local-table frame; the pins keep both superseded
    // table frames alive until every pre-retire call has drained.
    rec->t_retire_ns = now_ns();
    dom_.mr_retire([this, old_regions, rec] {
      for (const auto& r : old_regions) space_.unmap_region(r);
      rec->t_unmapped_ns.store(now_ns(), std::memory_order_release);
    });
    dom_.mr_retire([pins] { pins->clear(); });

    ++rerandomized_;
    if (cfg_.stack_rerand && pool_) pool_->regenerate();
    history_.push_back(rec);
    return rec;
  }

  void loop() {
    try {
      while (!stop_flag_) {
        auto next_due = std::chrono::steady_clock::time_point::max();
        {
          std::unique_lock mk(mod_mu_);
          const auto now = std::chrono::steady_clock::now();
          for (auto& m : modules_) {
            if (m.due <= now) {
              cycle(*m.lm);
              m.due = now + std::chrono::milliseconds(m.period_ms);
            }
            next_due = std::min(next_due, m.due);
          }
        }
        dom_.collect();
        std::unique_lock wk(wake_mu_);
        cv_.wait_until(wk, next_due, [this] { return stop_flag_.load(); });
      }
    } catch (...) {
      // Surfaced from stop(); a dead scheduler must not kill the process.
      thread_error_ = std::current_exception();
    }
  }

  vmem::address_space& space_;
  smr::domain& dom_;
  stackpool::pool* pool_;
  config cfg_;
  rng rng_;

  mutable std::mutex state_mu_;
  std::mutex wake_mu_;
  std::condition_variable cv_;
  std::thread thread_;
  std::atomic<bool> stop_flag_{false};
  bool running_ = false;
  std::exception_ptr thread_error_;

  mutable std::mutex mod_mu_;
  std::vector<entry> modules_;
  std::vector<std::shared_ptr<generation_record>> history_;
  std::vector<std::string> log_;
  u64 rerandomized_ = 0;

  smr::worker_id hook_worker_ = 0;
  u64 hook_stack_ = 0;
};

}  // namespace rerand::rando
