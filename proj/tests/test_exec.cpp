#include <set>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "rerand/exec.hpp"
#include "rerand/loader.hpp"
#include "rerand/textasm.hpp"

using namespace rerand;
using exec::run_result;
using exec::stop_kind;

namespace {

struct rig {
  vmem::address_space space;
  smr::domain dom;
  stackpool::pool pool;
  loader::host_table host;
  exec::engine eng;
  smr::worker_id w;
  u64 hs_lo = 0, hs_top = 0;

  explicit rig(unsigned bits = 32, stackpool::config pc = {})
      : space(bits),
        pool(space, dom, 0x5eed, pc),
        eng(space, &dom, &pool) {
    w = dom.register_worker();
    pool.add_worker(w);
    // Host stack: three pages low in the space; the run is bounded to the
    // middle page so both escape directions land on mapped memory.
    std::vector<u64> f;
    for (int i = 0; i < 3; ++i) f.push_back(space.create_frame());
    space.map_region(0x10000, f, vmem::kReadWrite);
    hs_lo = 0x11000;
    hs_top = 0x12000;
  }

  loader::loaded_module add(const std::string& src, bool retpoline = false,
                            bool optimize = true, u64 seed = 7) {
    loader::load_config c;
    c.addr_bits = space.addr_bits();
    c.rng_seed = seed;
    c.retpoline = retpoline;
    c.optimize = optimize;
    return loader::load(space, host, textasm::assemble(src), c);
  }

  u64 map_host_code(u64 base, const std::vector<u8>& bytes) {
    const u64 fid = space.create_frame();
    space.poke_frame(fid, 0, bytes.data(), bytes.size());
    space.map_region(base, {fid}, vmem::kReadExec);
    return base;
  }

  exec::run_request rq(u64 entry) {
    exec::run_request q;
    q.entry = entry;
    q.worker = w;
    q.stack_lo = hs_lo;
    q.stack_top = hs_top;
    return q;
  }

  run_result call(const std::string& name, u64 a0 = 0, u64 a1 = 0) {
    auto q = rq(*host.find(name));
    q.args[0] = a0;
    q.args[1] = a1;
    return eng.run(q);
  }
};

}  // namespace

TEST_CASE("arithmetic module returns through its wrapper") {
  rig r;
  r.add(R"(
.module math
.section text code
.func add2
  add r1, r0
  ret
.export add2
)");
  auto res = r.call("add2", 2, 3);
  REQUIRE(res.kind == stop_kind::returned);
  CHECK(res.value == 5);
  // One wrapper, one stack swap; the pool got its stack back.
  CHECK(res.metrics.swap_bases.size() == 1);
  CHECK(r.pool.stats().delta() >= 0);

  // The body saw a pool stack, not the host stack.
  CHECK(res.metrics.swap_bases[0] != r.hs_lo - vmem::kPageSize);
  CHECK((res.metrics.swap_bases[0] < r.hs_lo ||
         res.metrics.swap_bases[0] >= r.hs_top));
}

TEST_CASE("return-address coding is a keyed involution") {
  CHECK(exec::decrypt_ret(exec::encrypt_ret(0x00007fff12345678ULL,
                                            0xA5A5A5A5A5A5A5A5ULL),
                          0xA5A5A5A5A5A5A5A5ULL) == 0x00007fff12345678ULL);
  CHECK(exec::encrypt_ret(0xdeadbeef, 0) == 0xdeadbeef);  // why key 0 is banned

  rng rr(99);
  for (int i = 0; i < 1000; ++i) {
    const u64 x = rr.next_u64(), k1 = rr.next_u64() | 1, k2 = rr.next_u64() | 1;
    CHECK(exec::decrypt_ret(exec::encrypt_ret(x, k1), k1) == x);
    CHECK(exec::encrypt_ret(x, k1) != x);  // nonzero key always perturbs
    if (k1 != k2) CHECK(exec::decrypt_ret(exec::encrypt_ret(x, k1), k2) != x);
  }
}

TEST_CASE("fuel bounds every run") {
  rig r;
  auto lm = r.add(R"(
.module spinner
.section text code
spin:
  jmp spin
)");
  auto q = r.rq(lm.symbol_addr("spin"));
  q.fuel = 1000;
  auto res = r.eng.run(q);
  CHECK(res.kind == stop_kind::fuel_exhausted);
  CHECK(res.metrics.instructions == 1000);
}

TEST_CASE("faults come back as values, not exceptions") {
  rig r;

  SECTION("jump to unmapped memory") {
    auto q = r.rq(0x40000000);
    auto res = r.eng.run(q);
    REQUIRE(res.kind == stop_kind::access_fault);
    REQUIRE(res.fault.has_value());
    CHECK(res.fault->vaddr == 0x40000000);
    CHECK(res.fault->kind == vmem::access_kind::fetch);
  }

  SECTION("executing a non-executable table page") {
    auto lm = r.add(R"(
.module t
.section text code
.func fn
  ret
.export fn
)");
    auto q = r.rq(lm.gots[loader::kMovableLocal].base());
    auto res = r.eng.run(q);
    REQUIRE(res.kind == stop_kind::access_fault);
    CHECK(res.fault->kind == vmem::access_kind::fetch);
  }

  SECTION("indirect call through an unmapped slot address") {
    std::vector<u8> code;
    isa::emit_ind(code, isa::op::call_ind_got, 0);
    const u64 base = 0x5000;
    const u64 slot = 0x300000;  // never mapped
    const i32 disp = isa::disp_for(base, 6, slot);
    std::memcpy(code.data() + 2, &disp, 4);
    r.map_host_code(base, code);
    auto res = r.eng.run(r.rq(base));
    REQUIRE(res.kind == stop_kind::access_fault);
    CHECK(res.fault->vaddr == slot);
    CHECK(res.fault->kind == vmem::access_kind::read);
  }
}

TEST_CASE("halt stops with the current r0") {
  rig r;
  auto lm = r.add(R"(
.module h
.section text code
stop:
  movi 7, r0
  halt
)");
  auto res = r.eng.run(r.rq(lm.symbol_addr("stop")));
  CHECK(res.kind == stop_kind::halted);
  CHECK(res.value == 7);
}

TEST_CASE("scratch register is zero after every function return") {
  rig r;
  auto lm = r.add(R"(
.module scratch
.section text code
outer:
  call inner
  call inner
  ret
.func inner
  movi 3, r0
  ret
)");
  bool prev_was_func_ret = false;
  u64 checked = 0;
  auto q = r.rq(lm.symbol_addr("outer"));
  q.hook = [&](const exec::cpu& c, const isa::insn& in) {
    if (prev_was_func_ret) {
      CHECK(c.regs[isa::kScratchReg] == 0);
      ++checked;
    }
    // Bare `outer` has plain rets; only the .func epilogue zeroes r11, so
    // track rets that follow an xor r11,r11.
    prev_was_func_ret = in.opcode == isa::op::ret &&
                        c.regs[isa::kScratchReg] == 0;
    (void)in;
  };
  auto res = r.eng.run(q);
  REQUIRE(res.kind == stop_kind::returned);
  CHECK(checked >= 2);
  // The run ended by a .func return path in between; final state keeps the
  // invariant for the last epilogue too.
  CHECK(res.regs[isa::kScratchReg] == 0);
}

TEST_CASE("stacked return addresses stay encrypted inside a function") {
  rig r;
  auto lm = r.add(R"(
.module cipher
.section text code
entry:
  call helper
  ret
.func helper
  movi 1, r1
  movi 2, r2
  ret
)");
  const u64 helper = lm.symbol_addr("helper");
  const u64 entry = lm.symbol_addr("entry");
  // prologue 14 + two 9-byte moves + 20-byte epilogue
  const u64 helper_end = helper + 52;
  // Window where the invariant must hold: after the prologue finished
  // (entry + 14) until the epilogue's decrypting XOR has not yet run
  // (last 11 bytes are XOR_RR + RET after the decrypt).
  const u64 win_lo = helper + 14;
  const u64 win_hi = helper_end - 11;
  const u64 plaintext_ret = entry + 5;  // pushed by `call helper`
  auto [tlo, thi] = lm.text_range();

  u64 samples = 0;
  auto q = r.rq(entry);
  q.hook = [&](const exec::cpu& c, const isa::insn&) {
    if (c.pc < win_lo || c.pc >= win_hi) return;
    ++samples;
    for (u64 a = c.sp; a + 8 <= r.hs_top; a += 8) {
      auto v = r.space.read_u64(a);
      REQUIRE(v.ok());
      INFO("stack word at " << a << " while pc=" << c.pc);
      CHECK(*v != plaintext_ret);
      CHECK_FALSE((*v >= tlo && *v < thi));
    }
  };
  auto res = r.eng.run(q);
  REQUIRE(res.kind == stop_kind::returned);
  CHECK(samples >= 3);
}

TEST_CASE("nested cross-module calls run on distinct pool stacks") {
  rig r;
  r.add(R"(
.module inner_mod
.section text code
.func inner
  movsp r0
  ret
.export inner
)");
  r.add(R"(
.module outer_mod
.import inner
.section text code
.func outer
  movsp r6
  call @inner
  xor r6, r0
  ret
.export outer
)");
  auto res = r.call("outer");
  REQUIRE(res.kind == stop_kind::returned);
  // r0 = inner's sp ^ outer's sp: distinct stacks give a nonzero mix.
  CHECK(res.value != 0);
  REQUIRE(res.metrics.swap_bases.size() == 2);
  CHECK(res.metrics.swap_bases[0] != res.metrics.swap_bases[1]);
}

TEST_CASE("wrapper guard pins reclamation for the whole call") {
  rig r;
  auto lm = r.add(R"(
.module pinned
.section text code
.func body
  movi 1, r0
  movi 2, r1
  ret
.export body
)");
  const u64 body = lm.symbol_addr("body");
  bool retired_ran = false;
  bool retired_submitted = false;
  u64 collected_during = 0;

  auto q = r.rq(*r.host.find("body"));
  q.hook = [&](const exec::cpu& c, const isa::insn&) {
    if (c.pc == body + 14 && !retired_submitted) {  // first body instruction
      retired_submitted = true;
      r.dom.mr_retire([&] { retired_ran = true; });
      collected_during = r.dom.collect();
      CHECK_FALSE(retired_ran);  // wrapper's guard blocks it
    }
  };
  auto res = r.eng.run(q);
  REQUIRE(res.kind == stop_kind::returned);
  REQUIRE(retired_submitted);
  CHECK(collected_during == 0);
  CHECK_FALSE(retired_ran);
  // Guard released by MR_FINISH: now it frees.
  CHECK(r.dom.collect() == 1);
  CHECK(retired_ran);
}

TEST_CASE("stack escape in either direction stops the run") {
  rig r;

  SECTION("downward: unbounded recursion") {
    auto lm = r.add(R"(
.module rec
.section text code
rec:
  call rec
)");
    auto q = r.rq(lm.symbol_addr("rec"));
    q.fuel = 1u << 20;
    auto res = r.eng.run(q);
    CHECK(res.kind == stop_kind::stack_overflow);
  }

  SECTION("upward: popping past the caller frame") {
    auto lm = r.add(R"(
.module popper
.section text code
popper:
  pop r1
  pop r2
  ret
)");
    auto res = r.eng.run(r.rq(lm.symbol_addr("popper")));
    CHECK(res.kind == stop_kind::stack_overflow);
  }
}

TEST_CASE("wrapper reentry is bounded") {
  rig r;
  r.add(R"(
.module inner_mod
.section text code
.func inner
  movi 5, r0
  ret
.export inner
)");
  r.add(R"(
.module outer_mod
.import inner
.section text code
.func outer
  call @inner
  ret
.export outer
)");

  SECTION("depth cap") {
    auto q = r.rq(*r.host.find("outer"));
    q.max_swap_depth = 1;  // outer's own wrapper uses the only slot
    auto res = r.eng.run(q);
    CHECK(res.kind == stop_kind::reentry_overflow);
    // The half-entered wrapper was unwound: nothing pinned, nothing held.
    CHECK(r.dom.stuck_guards(std::chrono::nanoseconds{0}).empty());
    CHECK(r.pool.stats().delta() >= 0);
  }

  SECTION("pool exhaustion in a full address space") {
    // Eat every remaining page so the pool cannot allocate on demand.
    stackpool::config pc;
    pc.prepopulate = 0;
    pc.place_retries = 8;
    rig r2(20, pc);
    r2.add(R"(
.module m
.section text code
.func fn
  ret
.export fn
)");
    const u64 pages = r2.space.limit() / vmem::kPageSize;
    for (u64 p = 1; p < pages; ++p) {
      const u64 base = p * vmem::kPageSize;
      if (r2.space.range_free(base, 1))
        r2.space.map_region(base, {r2.space.create_frame()}, vmem::kRead);
    }
    auto res = r2.call("fn");
    CHECK(res.kind == stop_kind::reentry_overflow);
  }
}

TEST_CASE("retpoline routes calls through stub transits") {
  const char* src = R"(
.module transit
.import ext
.section text code
.func fn
  call @ext
  ret
.export fn
)";
  std::vector<u8> host_fn;
  isa::emit_ri(host_fn, isa::op::movi, 0, 42);
  isa::emit0(host_fn, isa::op::sysret);

  rig plain;
  plain.map_host_code(0x4000, host_fn);
  plain.host.provide("ext", 0x4000);
  plain.add(src, /*retpoline=*/false);
  auto a = plain.call("fn");
  REQUIRE(a.kind == stop_kind::returned);
  CHECK(a.value == 42);
  CHECK(a.metrics.stub_transits == 0);

  rig ret;
  ret.map_host_code(0x4000, host_fn);
  ret.host.provide("ext", 0x4000);
  ret.add(src, /*retpoline=*/true);
  auto b = ret.call("fn");
  REQUIRE(b.kind == stop_kind::returned);
  CHECK(b.value == 42);
  CHECK(b.metrics.stub_transits == 1);
}

TEST_CASE("identical seeds give identical runs") {
  auto trace_of = [](u64 seed) {
    rig r;
    r.add(R"(
.module det
.section text code
.func work
  movi 10, r1
  add r1, r0
  call helper
  ret
.func helper
  movi 7, r2
  add r2, r0
  ret
.export work
)",
          false, true, seed);
    u64 h = 1469598103934665603ULL;
    auto q = r.rq(*r.host.find("work"));
    q.args[0] = 5;
    q.hook = [&](const exec::cpu& c, const isa::insn&) {
      h = fnv1a64(h ^ c.pc);
      h = fnv1a64(h ^ c.sp);
      h = fnv1a64(h ^ c.regs[0]);
    };
    auto res = r.eng.run(q);
    REQUIRE(res.kind == stop_kind::returned);
    CHECK(res.value == 5 + 10 + 7);
    return std::pair<u64, u64>(h, res.metrics.instructions);
  };
  auto t1 = trace_of(1234);
  auto t2 = trace_of(1234);
  CHECK(t1.first == t2.first);
  CHECK(t1.second == t2.second);
}
