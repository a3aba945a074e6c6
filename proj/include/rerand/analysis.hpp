#pragma once

/// \file
/// Security analysis toolkit: closed-form guessing odds for a single
/// randomized base, Monte Carlo attack simulations driven against the
/// live runtime (brute force, leak replay, stale returns), a gadget
/// scanner over raw code bytes, and a report on how long any address
/// stays valid. Attackers are modeled with perfect information — exact
/// leaks, exact byte knowledge — so every defense number here is a
/// conservative one.

#include <cmath>
#include <map>
#include <memory>
#include <utility>
#include <vector>

#include "rerand/isa.hpp"
#include "rerand/loader.hpp"
#include "rerand/rando.hpp"
#include "rerand/smr.hpp"
#include "rerand/util.hpp"
#include "rerand/vmem.hpp"

namespace rerand::analysis {

// ---------------------------------------------------------------------------
// Closed forms

/// Single randomized base, addresses aligned to 2^align_bits.
struct entropy_model {
  unsigned addr_bits = 48;
  unsigned align_bits = 12;
};

inline void validate(const entropy_model& m) {
  // align == addr is the degenerate one-slot space (no entropy at all);
  // it is allowed so the bounds below stay total.
  if (!(m.align_bits <= m.addr_bits && m.addr_bits <= 64))
    throw invalid_model("need 0 <= align_bits <= addr_bits <= 64");
}

/// Chance that one guess names a valid aligned address.
inline double guess_probability(const entropy_model& m) {
  validate(m);
  return std::exp2(-static_cast<double>(m.addr_bits - m.align_bits));
}

/// Guesses needed to cover the whole space.
inline u64 brute_force_attempts_bound(const entropy_model& m) {
  validate(m);
  const unsigned d = m.addr_bits - m.align_bits;
  if (d >= 64) throw invalid_model("attempt bound does not fit in 64 bits");
  return u64{1} << d;
}

/// Standard deviation of an empirical success *rate* over n trials.
inline double binomial_sigma(double p, u64 n) {
  return std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

inline bool within_3sigma(double empirical_rate, double p, u64 n) {
  return std::fabs(empirical_rate - p) <= 3.0 * binomial_sigma(p, n);
}

/// Pearson statistic against a flat expectation.
inline double chi_square(const std::vector<u64>& counts,
                         double expected_each) {
  double x = 0.0;
  for (u64 c : counts) {
    const double d = static_cast<double>(c) - expected_each;
    x += d * d / expected_each;
  }
  return x;
}

/// Upper 1% critical value for 15 degrees of freedom (16 buckets).
inline constexpr double kChi2Crit15 = 30.578;

// ---------------------------------------------------------------------------
// Attack simulations

struct attack_outcome {
  u64 attempts = 0;
  u64 successes = 0;
  u64 elapsed_generations = 0;
  /// Successes bucketed over 16 equal spans of the trial sequence.
  std::vector<u64> latency_hist = std::vector<u64>(16, 0);

  double rate() const {
    return attempts ? static_cast<double>(successes) /
                          static_cast<double>(attempts)
                    : 0.0;
  }
};

/// Exact success rate of page-aligned guessing, by enumerating every
/// slot in the space and testing it against the live text ranges. The
/// independent yardstick the Monte Carlo runs are held to.
inline double exact_hit_rate(
    const std::vector<const loader::loaded_module*>& mods,
    const entropy_model& m) {
  validate(m);
  const u64 slots = u64{1} << (m.addr_bits - m.align_bits);
  u64 hits = 0;
  for (u64 s = 0; s < slots; ++s) {
    const u64 a = s << m.align_bits;
    for (const auto* lm : mods) {
      const auto [lo, hi] = lm->text_range();
      if (a >= lo && a < hi) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(slots);
}

/// Blind attacker: fetches uniformly random aligned addresses, wins on
/// landing inside any module's live movable text.
inline attack_outcome simulate_brute_force(
    const std::vector<const loader::loaded_module*>& mods,
    const entropy_model& m, u64 trials, u64 seed) {
  validate(m);
  rng r(seed);
  attack_outcome out;
  out.attempts = trials;
  const u64 slots = u64{1} << (m.addr_bits - m.align_bits);
  for (u64 i = 0; i < trials; ++i) {
    const u64 a = r.next_below(slots) << m.align_bits;
    bool hit = false;
    for (const auto* lm : mods) {
      const auto [lo, hi] = lm->text_range();
      if (a >= lo && a < hi) {
        hit = true;
        break;
      }
    }
    if (hit) {
      ++out.successes;
      ++out.latency_hist[i * 16 / trials];
    }
  }
  return out;
}

/// Informed attacker: records a true text address *and the byte behind
/// it*, waits leak_age generations (fully drained), then fetches the
/// remembered address. Success means the fetch works and still shows
/// the remembered byte — the strongest reasonable reading of "the leak
/// is still usable".
inline attack_outcome simulate_leak_replay(vmem::address_space& space,
                                           rando::randomizer& rr,
                                           loader::loaded_module& lm,
                                           smr::domain& dom, u64 leak_age,
                                           u64 trials, u64 seed) {
  rng r(seed);
  attack_outcome out;
  out.attempts = trials;
  for (u64 i = 0; i < trials; ++i) {
    const auto [lo, hi] = lm.text_range();
    const u64 leak = lo + r.next_below(hi - lo);
    u8 remembered = 0;
    if (space.read(leak, &remembered, 1).has_value())
      throw invalid_model("leaked address must be live at leak time");
    for (u64 g = 0; g < leak_age; ++g) {
      rr.rerandomize_once(lm);
      dom.collect();
      ++out.elapsed_generations;
    }
    u8 seen = 0;
    if (!space.read(leak, &seen, 1).has_value() && seen == remembered) {
      ++out.successes;
      ++out.latency_hist[i * 16 / trials];
    }
  }
  return out;
}

/// An attacker replays a return address captured under a previous key.
/// The key rotates with every generation, so the decrypted target is a
/// key-space-uniform value; this measures how often it still lands in
/// live text. Pure model — keys are drawn at space scale here so the
/// landing probability is live_pages / 2^(addr_bits - align_bits).
inline attack_outcome simulate_stale_return(const entropy_model& m,
                                            u64 live_pages, u64 trials,
                                            u64 seed) {
  validate(m);
  const u64 slots = u64{1} << (m.addr_bits - m.align_bits);
  if (live_pages == 0 || live_pages > slots)
    throw invalid_model("live_pages must fit the space");
  rng r(seed);
  attack_outcome out;
  out.attempts = trials;
  const u64 mask = (m.addr_bits == 64) ? ~u64{0}
                                       : ((u64{1} << m.addr_bits) - 1);
  const u64 base = r.next_below(slots - live_pages + 1) << m.align_bits;
  const u64 live_len = live_pages << m.align_bits;
  for (u64 i = 0; i < trials; ++i) {
    const u64 target = base + r.next_below(live_len);
    const u64 k1 = 1 + r.next_below(mask);
    u64 k2 = 1 + r.next_below(mask);
    while (k2 == k1) k2 = 1 + r.next_below(mask);
    const u64 garbled = (target ^ k1 ^ k2) & mask;
    if (garbled >= base && garbled < base + live_len) {
      ++out.successes;
      ++out.latency_hist[i * 16 / trials];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gadget scanning

enum class gadget_kind { ret, jmp_indirect, call_indirect };

struct gadget {
  gadget_kind kind;
  u64 offset;  // start of the decode chain, relative to the image
};

struct gadget_report {
  u64 ret_count = 0;
  u64 jmp_count = 0;
  u64 call_count = 0;
  std::vector<gadget> gadgets;
  u64 total() const { return ret_count + jmp_count + call_count; }
};

/// Finds every suffix of the image that decodes cleanly into a control
/// transfer: for each terminal opcode byte, every start within
/// max_depth bytes behind it is tried, and counted when the chain of
/// instruction lengths lands exactly on the terminal. Starts inside
/// other instructions count too — unintended decodings are the point.
inline gadget_report scan_gadgets(const std::vector<u8>& image,
                                  u64 max_depth = 10) {
  gadget_report rep;
  auto terminal_kind = [](u8 b) -> std::optional<gadget_kind> {
    switch (static_cast<isa::op>(b)) {
      case isa::op::ret:
        return gadget_kind::ret;
      case isa::op::jmp_ind_got:
        return gadget_kind::jmp_indirect;
      case isa::op::call_ind_got:
        return gadget_kind::call_indirect;
      default:
        return std::nullopt;
    }
  };
  for (u64 t = 0; t < image.size(); ++t) {
    const auto kind = terminal_kind(image[t]);
    if (!kind) continue;
    if (t + isa::length_of(image[t]) > image.size()) continue;
    for (u64 d = 0; d <= max_depth && d <= t; ++d) {
      const u64 start = t - d;
      u64 pos = start;
      while (pos < t) {
        const u64 len = isa::length_of(image[pos]);
        if (len == 0) break;
        pos += len;
      }
      if (pos != t) continue;
      rep.gadgets.push_back({*kind, start});
      switch (*kind) {
        case gadget_kind::ret:
          ++rep.ret_count;
          break;
        case gadget_kind::jmp_indirect:
          ++rep.jmp_count;
          break;
        case gadget_kind::call_indirect:
          ++rep.call_count;
          break;
      }
    }
  }
  return rep;
}

/// Scans a loaded module's executable bytes, split by part.
struct module_gadgets {
  gadget_report movable;
  gadget_report immovable;
};

inline std::vector<u8> read_exec_bytes(
    const vmem::address_space& space,
    const std::vector<loader::region_desc>& regions) {
  std::vector<u8> out;
  for (const auto& rd : regions) {
    if (rd.cls != loader::rclass::code &&
        rd.cls != loader::rclass::fixed_code && rd.cls != loader::rclass::plt)
      continue;
    std::vector<u8> chunk(rd.len);
    if (rd.len == 0) continue;
    if (space.read(rd.cur.base, chunk.data(), chunk.size()).has_value())
      throw invalid_model("code region not readable");
    out.insert(out.end(), chunk.begin(), chunk.end());
  }
  return out;
}

inline module_gadgets scan_module(const vmem::address_space& space,
                                  const loader::loaded_module& lm,
                                  u64 max_depth = 10) {
  module_gadgets g;
  g.movable = scan_gadgets(read_exec_bytes(space, lm.movable_regions),
                           max_depth);
  g.immovable = scan_gadgets(read_exec_bytes(space, lm.immovable_regions),
                             max_depth);
  return g;
}

// ---------------------------------------------------------------------------
// Validity windows

struct window_stats {
  double max_window_ms = 0.0;   // longest observed address lifetime
  double threshold_ms = 1000.0; // what an attack is assumed to need
  u64 closed_windows = 0;
  u64 open_generations = 0;     // retired but not yet unmapped
  bool watchdog_breach = false; // something stayed live past the threshold
  bool pass = false;
};

/// How long did any one generation's addresses stay usable? A
/// generation is exposed from the cycle that created it until the cycle
/// after it finishes unmapping it (retire plus drain). Records whose
/// unmap is still pending count against the threshold from their retire
/// time.
inline window_stats window_report(
    const std::vector<std::shared_ptr<rando::generation_record>>& history,
    double threshold_ms = 1000.0) {
  window_stats w;
  w.threshold_ms = threshold_ms;
  const u64 now = static_cast<u64>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(
          std::chrono::steady_clock::now().time_since_epoch())
          .count());
  for (u64 i = 0; i < history.size(); ++i) {
    const auto& rec = history[i];
    // Record i tears down the generation the *previous* record created.
    const u64 born =
        i == 0 ? rec->t_start_ns : history[i - 1]->t_start_ns;
    const u64 gone = rec->t_unmapped_ns.load(std::memory_order_acquire);
    if (gone != 0) {
      ++w.closed_windows;
      w.max_window_ms = std::max(
          w.max_window_ms, static_cast<double>(gone - born) / 1e6);
    } else {
      ++w.open_generations;
      const double held_ms =
          static_cast<double>(now - rec->t_retire_ns) / 1e6;
      if (held_ms > threshold_ms) w.watchdog_breach = true;
    }
  }
  w.pass = !w.watchdog_breach && w.max_window_ms < threshold_ms;
  return w;
}

}  // namespace rerand::analysis
