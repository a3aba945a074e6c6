// Command-line front end for the re-randomizing module runtime.
//
//   rerand bench    null-call throughput across runtime configurations (CSV)
//   rerand attack   brute-force / leak-replay / stale-return simulations (JSON)
//   rerand scan     gadget census of a module's two parts (JSON)
//   rerand metrics  periodic counter blocks in the fixed log format (text)
//   rerand run      load modules and re-randomize until interrupted
//
// Exit codes: 0 success, 1 runtime fault, 2 usage error.

#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rerand/analysis.hpp"
#include "rerand/rando.hpp"
#include "rerand/textasm.hpp"

using namespace rerand;
using nlohmann::json;

namespace {

struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::atomic<bool> g_interrupted{false};
void on_sigint(int) { g_interrupted.store(true); }

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw usage_error("cannot read module file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ostream& open_out(std::ofstream& file, const std::string& path) {
  if (path.empty()) return std::cout;
  file.open(path, std::ios::binary | std::ios::trunc);
  if (!file) throw usage_error("cannot write output file: " + path);
  return file;
}

// A do-nothing export: returns its first argument untouched.
std::string builtin_null() {
  return ".module nullmod\n"
         ".section text code\n"
         ".func null\n"
         "  ret\n"
         ".export null\n";
}

// Demo module: a data-held function pointer kept fresh by an update
// hook, padded so the movable text spans several pages.
std::string builtin_demo(u64 pages) {
  const std::string body =
      ".module demo\n"
      ".section text code\n"
      ".func get\n"
      "  lea @cell, r1\n"
      "  ldm r1, r0\n"
      "  ret\n"
      ".func target\n"
      "  movi 7, r0\n"
      "  ret\n"
      ".func refresh\n"
      "  lea @target, r0\n"
      "  lea @cell, r1\n"
      "  stm r0, r1\n"
      "  ret\n";
  const std::string footer =
      ".section data vals\n"
      "cell: .quad @target\n"
      ".export get\n"
      ".export target\n"
      ".export refresh\n"
      ".update_hook refresh\n";
  // Measure once, then pad the text section to the requested size.
  auto img = textasm::assemble(body + footer);
  u64 sz = 0;
  for (const auto& s : img.sections)
    if (s.kind == modfmt::section_kind::text) sz += s.bytes.size();
  std::string out = body;
  for (u64 i = sz; i < pages * vmem::kPageSize; ++i) out += "  nop\n";
  return out + footer;
}

std::vector<std::string> module_sources(const std::vector<std::string>& paths,
                                        const std::string& fallback) {
  std::vector<std::string> out;
  for (const auto& p : paths) out.push_back(read_file(p));
  if (out.empty()) out.push_back(fallback);
  return out;
}

// ---------------------------------------------------------------------------
// bench

struct bench_opts {
  unsigned addr_bits = 32;
  u64 seed = 1;
  bool retpoline = false;
  unsigned workers = 2;
  double duration_s = 1.0;
  std::string out_path;
};

struct bench_row {
  std::string config;
  double ops_per_sec = 0.0;
  u64 rerandomized = 0;
  u64 smr_delta = 0;
  u64 stack_delta = 0;
};

bench_row bench_one(const bench_opts& o, const std::string& name,
                    bool wrappers, u64 period_ms, bool stack_rerand) {
  vmem::address_space space(o.addr_bits);
  smr::domain dom;
  stackpool::pool pool(space, dom, o.seed ^ 0x51ab, {});
  loader::host_table host;

  struct wctx {
    smr::worker_id id;
    u64 lo, top;
  };
  std::vector<wctx> wcs;
  u64 next = 0x20000;  // fixed low stacks, mapped before any module lands
  for (unsigned i = 0; i < o.workers; ++i) {
    const auto id = dom.register_worker();
    pool.add_worker(id);
    space.map_region(next, {space.create_frame()}, vmem::kReadWrite);
    wcs.push_back({id, next, next + vmem::kPageSize});
    next += 4 * vmem::kPageSize;
  }

  loader::load_config lc;
  lc.addr_bits = o.addr_bits;
  lc.rng_seed = o.seed;
  lc.retpoline = o.retpoline;
  auto lm = loader::load(space, host, textasm::assemble(builtin_null()), lc);

  rando::config rc;
  rc.period_ms = period_ms ? period_ms : 20;
  rc.rng_seed = o.seed ^ 0xda7a;
  rc.stack_rerand = stack_rerand;
  rando::randomizer rr(space, dom, &pool, rc);
  if (period_ms > 0) {
    rr.add_module(lm, period_ms);
    rr.start();
  }

  const u64 entry = wrappers ? *host.find("null") : lm.symbol_addr("null");
  std::atomic<bool> stop{false};
  std::atomic<bool> bad{false};
  std::vector<u64> counts(o.workers, 0);
  std::vector<std::thread> threads;
  for (unsigned i = 0; i < o.workers; ++i) {
    threads.emplace_back([&, i] {
      exec::engine eng(space, &dom, &pool);
      exec::run_request q;
      q.entry = entry;
      q.worker = wcs[i].id;
      q.stack_lo = wcs[i].lo;
      q.stack_top = wcs[i].top;
      u64 n = 0;
      while (!stop.load(std::memory_order_relaxed)) {
        q.args[0] = n;
        const auto res = eng.run(q);
        if (!res.ok() || res.value != n) {
          bad.store(true);
          break;
        }
        ++n;
      }
      counts[i] = n;
    });
  }
  std::this_thread::sleep_for(std::chrono::duration<double>(o.duration_s));
  stop.store(true);
  for (auto& t : threads) t.join();
  if (period_ms > 0) rr.stop();
  pool.regenerate();
  for (int i = 0; i < 64 && dom.pending() > 0; ++i)
    if (dom.collect() == 0) break;
  if (bad.load()) throw validation_error("null call returned a wrong value");

  bench_row row;
  row.config = name;
  u64 total = 0;
  for (u64 c : counts) total += c;
  row.ops_per_sec = static_cast<double>(total) / o.duration_s;
  row.rerandomized = rr.metrics().rerandomized;
  row.smr_delta = dom.stats().delta();
  row.stack_delta = pool.stats().delta();
  return row;
}

int cmd_bench(const bench_opts& o) {
  std::vector<bench_row> rows;
  rows.push_back(bench_one(o, "baseline", false, 0, false));
  for (u64 p : {0, 1, 5, 20})
    rows.push_back(bench_one(o, "wrappers_p" + std::to_string(p), true, p,
                             false));
  for (u64 p : {0, 1, 5, 20})
    rows.push_back(bench_one(o, "wrappers_stack_p" + std::to_string(p), true,
                             p, true));

  std::ofstream f;
  auto& out = open_out(f, o.out_path);
  out << "config,ops_per_sec,rerandomized,smr_delta_final,stack_delta_final\n";
  for (const auto& r : rows)
    out << r.config << ',' << r.ops_per_sec << ',' << r.rerandomized << ','
        << r.smr_delta << ',' << r.stack_delta << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// attack

struct attack_opts {
  std::vector<std::string> modules;
  unsigned addr_bits = 20;
  u64 seed = 1;
  u64 trials = 100000;
  std::string out_path;
};

int cmd_attack(const attack_opts& o) {
  const auto sources = module_sources(o.modules, builtin_demo(4));
  json rep;

  {  // Blind guessing at desk scale, checked against exact enumeration.
    vmem::address_space space(o.addr_bits);
    smr::domain dom;
    loader::host_table host;
    loader::load_config lc;
    lc.addr_bits = o.addr_bits;
    lc.rng_seed = o.seed;
    std::vector<loader::loaded_module> mods;
    for (const auto& s : sources)
      mods.push_back(loader::load(space, host, textasm::assemble(s), lc));
    std::vector<const loader::loaded_module*> ptrs;
    for (const auto& m : mods) ptrs.push_back(&m);

    const analysis::entropy_model model{o.addr_bits, 12};
    const double exact = analysis::exact_hit_rate(ptrs, model);
    const auto out =
        analysis::simulate_brute_force(ptrs, model, o.trials, o.seed);
    rep["brute_force"] = {
        {"addr_bits", o.addr_bits},
        {"align_bits", 12},
        {"guess_probability_single_page", analysis::guess_probability(model)},
        {"trials", out.attempts},
        {"successes", out.successes},
        {"empirical_rate", out.rate()},
        {"exact_rate", exact},
        {"within_3sigma",
         analysis::within_3sigma(out.rate(), exact, out.attempts)},
    };
  }

  {  // Leak replay runs in a wide space so verdicts are exact.
    vmem::address_space space(48);
    smr::domain dom;
    stackpool::pool pool(space, dom, o.seed ^ 0x5eed, {});
    loader::host_table host;
    loader::load_config lc;
    lc.addr_bits = 48;
    lc.rng_seed = o.seed;
    auto lm = loader::load(space, host, textasm::assemble(sources[0]), lc);
    rando::config rc;
    rc.rng_seed = o.seed ^ 0xf00;
    rando::randomizer rr(space, dom, &pool, rc);

    json rows = json::array();
    const u64 per_age = 50;
    for (u64 age = 0; age <= 3; ++age) {
      const auto out = analysis::simulate_leak_replay(space, rr, lm, dom, age,
                                                      per_age, o.seed + age);
      rows.push_back({{"age", age},
                      {"attempts", out.attempts},
                      {"successes", out.successes},
                      {"rate", out.rate()}});
    }
    rep["leak_replay"] = {{"addr_bits", 48}, {"rows", rows}};
  }

  {  // Stale encrypted returns against the model space.
    const analysis::entropy_model model{o.addr_bits, 12};
    const u64 live_pages = 4;
    const auto out = analysis::simulate_stale_return(model, live_pages,
                                                     o.trials, o.seed ^ 0xc0de);
    const double p = static_cast<double>(live_pages) *
                     analysis::guess_probability(model);
    rep["stale_return"] = {
        {"addr_bits", o.addr_bits},
        {"live_pages", live_pages},
        {"trials", out.attempts},
        {"hits", out.successes},
        {"hit_rate", out.rate()},
        {"model_hit_rate", p},
        {"defeat_rate", 1.0 - out.rate()},
        {"within_3sigma",
         analysis::within_3sigma(out.rate(), p, out.attempts)},
    };
  }

  std::ofstream f;
  auto& out = open_out(f, o.out_path);
  out << rep.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// scan

struct scan_opts {
  std::vector<std::string> modules;
  unsigned addr_bits = 32;
  u64 seed = 1;
  bool retpoline = false;
  std::string out_path;
};

const char* kind_name(analysis::gadget_kind k) {
  switch (k) {
    case analysis::gadget_kind::ret:
      return "ret";
    case analysis::gadget_kind::jmp_indirect:
      return "jmp_indirect";
    default:
      return "call_indirect";
  }
}

json report_to_json(const analysis::gadget_report& r, const char* part) {
  json gs = json::array();
  for (const auto& g : r.gadgets)
    gs.push_back({{"part", part},
                  {"kind", kind_name(g.kind)},
                  {"offset", g.offset}});
  return {{"ret", r.ret_count},
          {"jmp_indirect", r.jmp_count},
          {"call_indirect", r.call_count},
          {"total", r.total()},
          {"gadgets", gs}};
}

int cmd_scan(const scan_opts& o) {
  const auto sources = module_sources(o.modules, builtin_demo(4));
  json mods = json::array();
  for (const auto& src : sources) {
    vmem::address_space space(o.addr_bits);
    smr::domain dom;
    loader::host_table host;
    loader::load_config lc;
    lc.addr_bits = o.addr_bits;
    lc.rng_seed = o.seed;
    lc.retpoline = o.retpoline;
    auto lm = loader::load(space, host, textasm::assemble(src), lc);
    const auto g = analysis::scan_module(space, lm);
    mods.push_back({{"name", lm.image.name},
                    {"movable", report_to_json(g.movable, "movable")},
                    {"immovable", report_to_json(g.immovable, "immovable")}});
  }
  std::ofstream f;
  auto& out = open_out(f, o.out_path);
  out << json{{"modules", mods}}.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// metrics / run

struct run_opts {
  std::vector<std::string> modules;
  unsigned addr_bits = 32;
  u64 seed = 1;
  bool retpoline = false;
  u64 rand_period_ms = 20;
  bool stack_rerand = false;
  double interval_s = 1.0;
  double duration_s = 0.0;  // 0: until SIGINT
  std::string out_path;
};

struct live_runtime {
  vmem::address_space space;
  smr::domain dom;
  stackpool::pool pool;
  loader::host_table host;
  std::vector<loader::loaded_module> mods;
  rando::randomizer rr;

  live_runtime(const run_opts& o, const std::vector<std::string>& sources)
      : space(o.addr_bits),
        pool(space, dom, o.seed ^ 0x5eed, {}),
        rr(space, dom, &pool,
           [&] {
             rando::config rc;
             rc.period_ms = o.rand_period_ms ? o.rand_period_ms : 20;
             rc.rng_seed = o.seed ^ 0xda7a;
             rc.stack_rerand = o.stack_rerand;
             return rc;
           }()) {
    loader::load_config lc;
    lc.addr_bits = o.addr_bits;
    lc.rng_seed = o.seed;
    lc.retpoline = o.retpoline;
    for (const auto& s : sources)
      mods.push_back(loader::load(space, host, textasm::assemble(s), lc));
    for (auto& m : mods) rr.add_module(m, o.rand_period_ms);
  }
};

int cmd_metrics(const run_opts& o) {
  const auto sources = module_sources(o.modules, builtin_demo(4));
  live_runtime rt(o, sources);
  std::ofstream f;
  auto& out = open_out(f, o.out_path);

  rt.rr.start();
  out << rando::kStartLine << '\n' << std::flush;
  const double total = o.duration_s > 0 ? o.duration_s : 5.0;
  const auto deadline =
      std::chrono::steady_clock::now() + std::chrono::duration<double>(total);
  while (std::chrono::steady_clock::now() < deadline &&
         !g_interrupted.load()) {
    std::this_thread::sleep_for(std::chrono::duration<double>(o.interval_s));
    out << rt.rr.log_block() << std::flush;
  }
  rt.rr.stop();
  out << rt.rr.log_block() << std::flush;  // drained: deltas are zero
  return 0;
}

int cmd_run(const run_opts& o) {
  const auto sources = module_sources(o.modules, builtin_demo(4));
  live_runtime rt(o, sources);
  std::ofstream f;
  auto& out = open_out(f, o.out_path);

  std::signal(SIGINT, on_sigint);
  rt.rr.start();
  out << rando::kStartLine << '\n' << std::flush;
  const auto t0 = std::chrono::steady_clock::now();
  while (!g_interrupted.load()) {
    if (o.duration_s > 0 &&
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count() >= o.duration_s)
      break;
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
  }
  rt.rr.stop();
  out << rt.rr.log_block() << std::flush;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"re-randomizing module runtime"};
  app.require_subcommand(1);

  bench_opts bo;
  auto* bench = app.add_subcommand("bench", "null-call throughput CSV");
  bench->add_option("--addr-bits", bo.addr_bits);
  bench->add_option("--seed", bo.seed);
  bench->add_option("--retpoline", bo.retpoline);
  bench->add_option("--workers", bo.workers)->check(CLI::Range(1u, 64u));
  bench->add_option("--duration", bo.duration_s)
      ->check(CLI::PositiveNumber);
  bench->add_option("--out", bo.out_path);

  attack_opts ao;
  auto* attack = app.add_subcommand("attack", "attack simulations JSON");
  attack->add_option("--module", ao.modules);
  attack->add_option("--addr-bits", ao.addr_bits)->check(CLI::Range(13u, 30u));
  attack->add_option("--seed", ao.seed);
  attack->add_option("--trials", ao.trials)->check(CLI::PositiveNumber);
  attack->add_option("--out", ao.out_path);

  scan_opts so;
  auto* scan = app.add_subcommand("scan", "gadget census JSON");
  scan->add_option("--module", so.modules);
  scan->add_option("--addr-bits", so.addr_bits);
  scan->add_option("--seed", so.seed);
  scan->add_option("--retpoline", so.retpoline);
  scan->add_option("--out", so.out_path);

  run_opts mo;
  auto* metrics = app.add_subcommand("metrics", "periodic counter log");
  run_opts ro;
  auto* run = app.add_subcommand("run", "run until interrupted");
  for (auto [sub, opt] : {std::pair{metrics, &mo}, std::pair{run, &ro}}) {
    sub->add_option("--module", opt->modules);
    sub->add_option("--addr-bits", opt->addr_bits);
    sub->add_option("--seed", opt->seed);
    sub->add_option("--retpoline", opt->retpoline);
    sub->add_option("--rand-period", opt->rand_period_ms);
    sub->add_option("--stack-rerand", opt->stack_rerand);
    sub->add_option("--interval", opt->interval_s)->check(CLI::PositiveNumber);
    sub->add_option("--duration", opt->duration_s);
    sub->add_option("--out", opt->out_path);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*bench) return cmd_bench(bo);
    if (*attack) return cmd_attack(ao);
    if (*scan) return cmd_scan(so);
    if (*metrics) return cmd_metrics(mo);
    if (*run) return cmd_run(ro);
    return 2;
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const textasm::asm_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime fault: " << e.what() << '\n';
    return 1;
  }
}
