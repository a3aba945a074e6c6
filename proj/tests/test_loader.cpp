#include <map>
#include <set>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "rerand/loader.hpp"
#include "rerand/textasm.hpp"

using namespace rerand;
using loader::host_table;
using loader::kImmovableFixed;
using loader::kImmovableLocal;
using loader::kMovableFixed;
using loader::kMovableLocal;
using loader::load_config;
using loader::loaded_module;

namespace {

load_config cfg_for(const vmem::address_space& s, u64 seed = 7,
                    bool retpoline = false, bool optimize = true) {
  load_config c;
  c.addr_bits = s.addr_bits();
  c.rng_seed = seed;
  c.retpoline = retpoline;
  c.optimize = optimize;
  return c;
}

std::vector<u8> read_bytes(const vmem::address_space& s, u64 addr, u64 n) {
  std::vector<u8> out(n);
  auto st = s.read(addr, out.data(), n);
  REQUIRE_FALSE(st.has_value());
  return out;
}

u64 read_word(const vmem::address_space& s, u64 addr) {
  auto r = s.read_u64(addr);
  REQUIRE(r.ok());
  return *r;
}

bool in_movable(const loaded_module& lm, u64 v) {
  return v >= lm.movable_base && v < lm.movable_base + lm.movable_len;
}

bool in_immovable(const loaded_module& lm, u64 v) {
  return v >= lm.immovable_base && v < lm.immovable_base + lm.immovable_len;
}

// A module exercising every relocation flavour: intra-part calls and
// address loads, an import, data absolutes, immovable code calling back
// into the movable part, and rodata.
const char* kRichSource = R"(
.module rich
.import host_log

.section text code
.func apply
  lea @table, r1
  ldm r1, r2
  callind @helper
  call @host_log
  call @fx_entry
  ret
.func helper
  movi 41, r0
  movi 1, r1
  add r1, r0
  ret

.section data vals
table:  .quad 1234
fnptr:  .quad @apply

.section rodata msg
.bytes 68 69 0a

.section fixed_text fx
fx_entry:
  callind @apply
  ret

.export apply
.export helper
)";

}  // namespace

TEST_CASE("minimal module loads with four tables, a wrapper, and a key slot") {
  vmem::address_space space(32);
  host_table host;
  auto img = textasm::assemble(R"(
.module tiny
.section text code
.func fn
  movi 5, r0
  ret
.export fn
)");
  auto lm = loader::load(space, host, img, cfg_for(space));

  CHECK(lm.generation == 0);
  CHECK(lm.movable_base % vmem::kPageSize == 0);
  CHECK(lm.immovable_base % vmem::kPageSize == 0);
  CHECK(lm.movable_base != lm.immovable_base);

  REQUIRE(lm.gots.size() == 4);
  CHECK(lm.gots[kMovableLocal].part == modfmt::part::movable);
  CHECK(lm.gots[kMovableLocal].loc == loader::locality::local);
  CHECK(lm.gots[kImmovableFixed].part == modfmt::part::immovable);
  CHECK(lm.gots[kImmovableFixed].loc == loader::locality::fixed);
  for (const auto& t : lm.gots) CHECK(t.region.base != 0);

  // Key at slot 0 of the movable local table, nonzero, never an address.
  REQUIRE(lm.key_slot == 0);
  REQUIRE_FALSE(lm.gots[kMovableLocal].entries.empty());
  CHECK(lm.gots[kMovableLocal].entries[0].is_key);
  const u64 key_in_mem = read_word(space, lm.gots[kMovableLocal].slot_addr(0));
  CHECK(key_in_mem != 0);
  CHECK(fnv1a64(key_in_mem) == lm.key_hash);

  // One wrapper, published to the host, living in the immovable part.
  REQUIRE(lm.wrappers.size() == 1);
  const u64 w = lm.wrappers.at("fn");
  CHECK(host.find("fn") == w);
  CHECK(in_immovable(lm, w));
  CHECK_FALSE(in_movable(lm, w));

  // Wrapper shape: guard enter, stack swap, indirect call, stack restore,
  // guard exit, return — 11 bytes.
  auto wb = read_bytes(space, w, 11);
  CHECK(wb[0] == static_cast<u8>(isa::op::mr_start));
  CHECK(wb[1] == static_cast<u8>(isa::op::stack_swap));
  CHECK(wb[2] == static_cast<u8>(isa::op::call_ind_got));
  CHECK(wb[8] == static_cast<u8>(isa::op::stack_restore));
  CHECK(wb[9] == static_cast<u8>(isa::op::mr_finish));
  CHECK(wb[10] == static_cast<u8>(isa::op::ret));

  // The wrapper's call goes through the immovable local table and the
  // slot holds the function body address inside movable text.
  auto in = isa::decode(wb.data() + 2, 6);
  REQUIRE(in);
  const u64 slot = w + 2 + in->len + static_cast<i64>(in->disp);
  CHECK(slot >= lm.gots[kImmovableLocal].base());
  CHECK(slot < lm.gots[kImmovableLocal].base() + vmem::kPageSize);
  const u64 body = read_word(space, slot);
  CHECK(body == lm.symbol_addr("fn"));
  auto [tlo, thi] = lm.text_range();
  CHECK(body >= tlo);
  CHECK(body < thi);

  CHECK(lm.plt.empty());
}

TEST_CASE("imports resolve through the host table") {
  vmem::address_space space(32);
  auto img = textasm::assemble(R"(
.module uses_host
.import ext
.section text code
.func fn
  call @ext
  lea @ext, r3
  ret
.export fn
)");

  SECTION("resolved import lands in the fixed table verbatim") {
    host_table host;
    host.provide("ext", 0x1234000);
    auto lm = loader::load(space, host, img, cfg_for(space));
    bool found = false;
    for (u64 i = 0; i < lm.gots[kMovableFixed].entries.size(); ++i) {
      const auto& e = lm.gots[kMovableFixed].entries[i];
      if (e.symbol == "ext") {
        found = true;
        CHECK(e.value == 0x1234000);
        CHECK(read_word(space, lm.gots[kMovableFixed].slot_addr(i)) ==
              0x1234000);
      }
    }
    CHECK(found);
  }

  SECTION("missing import fails the load by name") {
    host_table host;
    CHECK_THROWS_AS(loader::load(space, host, img, cfg_for(space)),
                    unresolved_import);
    CHECK_THROWS_WITH(loader::load(space, host, img, cfg_for(space)),
                      Catch::Matchers::ContainsSubstring("ext"));
  }
}

TEST_CASE("pc-relative displacement arithmetic") {
  // Field ends with the instruction: displacement = target - insn_end.
  CHECK(isa::disp_for(0x1000, 4, 0x1104) == 0x100);
  CHECK(isa::disp_for(0x1000, 5, 0x1005) == 0);
  CHECK(isa::disp_for(0x2000, 5, 0x1000) == -0x1005);
  CHECK_THROWS_AS(isa::disp_for(0x1000, 5, 0x1000 + (u64{3} << 30)),
                  reloc_overflow);

  // A whole-module load fails the same way when an import is too far for
  // a 32-bit field.
  vmem::address_space space(20);
  modfmt::builder b("far");
  const u32 text = b.add_section("code", modfmt::section_kind::text);
  isa::emit_pc32(b.bytes(text), isa::op::call_pc32, 0);
  isa::emit0(b.bytes(text), isa::op::ret);
  const u32 fn = b.add_symbol("fn", modfmt::binding::exported, text, 0);
  (void)fn;
  const u32 imp = b.add_import("far_away");
  b.add_reloc(text, 0, modfmt::reloc_kind::pc32, imp);
  b.add_export("fn");
  auto img = b.build();
  host_table host;
  host.provide("far_away", u64{1} << 47);
  CHECK_THROWS_AS(loader::load(space, host, img, cfg_for(space)),
                  reloc_overflow);
}

TEST_CASE("every table entry satisfies the part/locality matrix") {
  vmem::address_space space(32);
  host_table host;
  host.provide("host_log", 0xbeef000);
  auto lm = loader::load(space, host, textasm::assemble(kRichSource),
                         cfg_for(space));

  for (u32 t = 0; t < 4; ++t) {
    const auto& tab = lm.gots[t];
    for (const auto& e : tab.entries) {
      INFO("table " << t << " symbol " << e.symbol);
      if (e.is_key) {
        CHECK(t == kMovableLocal);
        continue;
      }
      if (tab.loc == loader::locality::local) {
        // Local tables may hold only movable-part addresses.
        CHECK(in_movable(lm, e.value));
        CHECK(e.value == lm.movable_base + e.rel);
      } else {
        // Fixed tables may hold only host or immovable addresses.
        CHECK_FALSE(in_movable(lm, e.value));
        CHECK((in_immovable(lm, e.value) || e.value == 0xbeef000));
      }
    }
  }

  // The immovable part called back into movable code: that slot must be
  // in the immovable-part *local* table.
  bool fx_call_slot = false;
  for (const auto& e : lm.gots[kImmovableLocal].entries)
    if (e.symbol == "apply") fx_call_slot = true;
  CHECK(fx_call_slot);
}

TEST_CASE("patch rewrites: direct call + nop, address formation in place") {
  vmem::address_space space(32);
  // Bare labels (no .func) keep site offsets trivial to compute.
  auto src = R"(
.module patchme
.import ext
.section text code
entry:
  callind @target
  lea @spot, r1
  callind @ext
  ret
target:
  movi 9, r0
  ret
.section data d
spot: .quad 77
)";
  auto img = textasm::assemble(src);

  SECTION("optimized load rewrites same-part references") {
    host_table host;
    host.provide("ext", 0x5555000);
    auto lm = loader::load(space, host, img, cfg_for(space));
    CHECK(lm.patches.direct_calls == 1);
    CHECK(lm.patches.lea_forms == 1);

    const u64 entry = lm.symbol_addr("entry");
    // callind @target became: direct call (5 bytes) + nop.
    auto call_bytes = read_bytes(space, entry, 6);
    CHECK(call_bytes[0] == static_cast<u8>(isa::op::call_pc32));
    CHECK(call_bytes[5] == static_cast<u8>(isa::op::nop));
    auto cin = isa::decode(call_bytes.data(), 6);
    REQUIRE(cin);
    CHECK(entry + cin->len + static_cast<i64>(cin->disp) ==
          lm.symbol_addr("target"));

    // lea @spot became pc-relative address formation, same width.
    auto lea_bytes = read_bytes(space, entry + 6, 9);
    CHECK(lea_bytes[0] == static_cast<u8>(isa::op::lea_pc32));
    auto lin = isa::decode(lea_bytes.data(), 9);
    REQUIRE(lin);
    CHECK(entry + 6 + lin->len + static_cast<i64>(lin->disp) ==
          lm.symbol_addr("spot"));

    // callind @ext must stay indirect (import): opcode unchanged.
    auto ext_bytes = read_bytes(space, entry + 15, 6);
    CHECK(ext_bytes[0] == static_cast<u8>(isa::op::call_ind_got));

    // Minimal local table: both local references were rewritten, so only
    // the key slot remains.
    REQUIRE(lm.gots[kMovableLocal].entries.size() == 1);
    CHECK(lm.gots[kMovableLocal].entries[0].is_key);
  }

  SECTION("unoptimized load keeps every slot") {
    host_table host;
    host.provide("ext", 0x5555000);
    auto lm = loader::load(space, host, img,
                           cfg_for(space, 7, false, false));
    CHECK(lm.patches.direct_calls == 0);
    CHECK(lm.patches.lea_forms == 0);
    // key + target + spot
    CHECK(lm.gots[kMovableLocal].entries.size() == 3);
    auto bytes = read_bytes(space, lm.symbol_addr("entry"), 6);
    CHECK(bytes[0] == static_cast<u8>(isa::op::call_ind_got));
  }
}

TEST_CASE("retpoline: calls leave through stub pages") {
  vmem::address_space space(32);
  auto img = textasm::assemble(R"(
.module stubby
.import ext
.section text code
entry:
  call @ext
  call @near
  ret
near:
  movi 3, r0
  ret
)");
  host_table host;
  host.provide("ext", 0x7777000);

  SECTION("unoptimized: every call goes through its stub") {
    auto lm = loader::load(space, host, img, cfg_for(space, 7, true, false));
    REQUIRE(lm.plt.size() == 2);
    for (const auto& s : lm.plt) {
      CHECK(s.part == modfmt::part::movable);
      CHECK(in_movable(lm, s.addr));
      // Stub body: indirect jump through the slot recorded for it.
      auto sb = read_bytes(space, s.addr, 6);
      CHECK(sb[0] == static_cast<u8>(isa::op::jmp_ind_got));
      auto sin = isa::decode(sb.data(), 6);
      REQUIRE(sin);
      CHECK(s.addr + sin->len + static_cast<i64>(sin->disp) ==
            s.got_slot_addr);
    }
    // A local callee's stub indirects through the *local* table; the
    // import's through the *fixed* table.
    std::map<std::string, u64> slot_of;
    for (const auto& s : lm.plt) slot_of[s.symbol] = s.got_slot_addr;
    const auto& ml = lm.gots[kMovableLocal];
    const auto& mf = lm.gots[kMovableFixed];
    CHECK(slot_of.at("near") >= ml.base());
    CHECK(slot_of.at("near") < ml.base() + vmem::kPageSize);
    CHECK(slot_of.at("ext") >= mf.base());
    CHECK(slot_of.at("ext") < mf.base() + vmem::kPageSize);

    // Call sites themselves became direct calls to the stubs + nop.
    const u64 entry = lm.symbol_addr("entry");
    auto cb = read_bytes(space, entry, 6);
    CHECK(cb[0] == static_cast<u8>(isa::op::call_pc32));
    CHECK(cb[5] == static_cast<u8>(isa::op::nop));
    auto cin = isa::decode(cb.data(), 6);
    const u64 tgt = entry + cin->len + static_cast<i64>(cin->disp);
    bool hits_stub = false;
    for (const auto& s : lm.plt) hits_stub |= (s.addr == tgt);
    CHECK(hits_stub);
  }

  SECTION("optimized: same-part call bypasses its stub") {
    auto lm = loader::load(space, host, img, cfg_for(space, 7, true, true));
    REQUIRE(lm.plt.size() == 1);
    CHECK(lm.plt[0].symbol == "ext");
    CHECK(lm.patches.direct_calls == 1);
    // Second call site: direct to the body, not to a stub.
    const u64 site = lm.symbol_addr("entry") + 6;
    auto cb = read_bytes(space, site, 6);
    CHECK(cb[0] == static_cast<u8>(isa::op::call_pc32));
    auto cin = isa::decode(cb.data(), 6);
    CHECK(site + cin->len + static_cast<i64>(cin->disp) ==
          lm.symbol_addr("near"));
  }
}

TEST_CASE("tables and code are write-protected, data is not") {
  vmem::address_space space(32);
  host_table host;
  host.provide("host_log", 0xbeef000);
  auto lm = loader::load(space, host, textasm::assemble(kRichSource),
                         cfg_for(space));

  const u8 poke = 0xCC;
  for (const auto& t : lm.gots) {
    auto st = space.write(t.base(), &poke, 1);
    REQUIRE(st.has_value());
    CHECK(st->kind == vmem::access_kind::write);
  }
  CHECK(space.write(lm.text_range().first, &poke, 1).has_value());
  CHECK(space.write(lm.wrappers.at("apply"), &poke, 1).has_value());

  // Data stays writable.
  const u64 table_addr = lm.symbol_addr("table");
  CHECK_FALSE(space.write(table_addr, &poke, 1).has_value());

  // Code is executable, tables are not.
  CHECK_FALSE(space.check_fetch(lm.text_range().first, 1).has_value());
  CHECK(space.check_fetch(lm.gots[kMovableLocal].base(), 1).has_value());
}

TEST_CASE("immovable bytes never embed a movable address") {
  vmem::address_space space(32);
  host_table host;
  host.provide("host_log", 0xbeef000);
  auto lm = loader::load(space, host, textasm::assemble(kRichSource),
                         cfg_for(space));

  auto scan = [&](u64 base, u64 len) {
    u64 hits = 0;
    auto bytes = read_bytes(space, base, len);
    for (u64 i = 0; i + 8 <= bytes.size(); ++i) {
      u64 v;
      std::memcpy(&v, bytes.data() + i, 8);
      if (in_movable(lm, v)) ++hits;
    }
    return hits;
  };

  for (const auto& rd : lm.immovable_regions) {
    if (rd.cls == loader::rclass::local_got) continue;  // the one exception
    INFO("immovable region class " << static_cast<int>(rd.cls));
    CHECK(scan(rd.cur.base, rd.len) == 0);
  }

  // Movable *code* is position-independent too: no absolute self-links.
  for (const auto& rd : lm.movable_regions) {
    if (rd.cls != loader::rclass::code && rd.cls != loader::rclass::plt)
      continue;
    CHECK(scan(rd.cur.base, rd.len) == 0);
  }

  // Movable *data* may hold movable absolutes (that is what update hooks
  // are for): the fnptr cell proves the distinction is real.
  CHECK(read_word(space, lm.symbol_addr("fnptr")) == lm.symbol_addr("apply"));
}

TEST_CASE("movable placement is uniform across loads") {
  auto img = textasm::assemble(R"(
.module spread
.section text code
.func fn
  ret
.export fn
)");
  constexpr int kLoads = 1000;
  constexpr int kBuckets = 16;
  std::array<int, kBuckets> counts{};
  std::set<u64> distinct;
  for (int i = 0; i < kLoads; ++i) {
    vmem::address_space space(28);
    host_table host;
    auto lm = loader::load(space, host, img, cfg_for(space, 1000 + i));
    distinct.insert(lm.movable_base);
    const u64 bucket = lm.movable_base / (space.limit() / kBuckets);
    ++counts[bucket];
  }
  double chi2 = 0.0;
  const double expect = double(kLoads) / kBuckets;
  for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
  INFO("chi2 = " << chi2);
  CHECK(chi2 < 30.578);  // 15 dof, p = 0.01
  CHECK(distinct.size() > 900);
}

TEST_CASE("export names must be free in the host table") {
  vmem::address_space space(32);
  host_table host;
  host.provide("fn", 0x1000);  // already taken
  auto img = textasm::assemble(R"(
.module clash
.section text code
.func fn
  ret
.export fn
)");
  CHECK_THROWS_AS(loader::load(space, host, img, cfg_for(space)),
                  duplicate_symbol);
}

TEST_CASE("duplicate symbol names inside one image are rejected") {
  modfmt::builder b("twice");
  const u32 text = b.add_section("code", modfmt::section_kind::text);
  isa::emit0(b.bytes(text), isa::op::ret);
  isa::emit0(b.bytes(text), isa::op::ret);
  b.add_symbol("fn", modfmt::binding::exported, text, 0);
  b.add_symbol("fn", modfmt::binding::local, text, 1);
  b.add_export("fn");
  auto img = b.build();
  vmem::address_space space(32);
  host_table host;
  CHECK_THROWS_AS(loader::load(space, host, img, cfg_for(space)),
                  duplicate_symbol);
}

TEST_CASE("placement gives up after bounded retries") {
  vmem::address_space space(20);  // 256 pages
  // Occupy everything but the zero page.
  std::vector<u64> frames;
  for (u64 i = 0; i < 255; ++i) frames.push_back(space.create_frame());
  space.map_region(vmem::kPageSize, frames, vmem::kRead);

  host_table host;
  auto img = textasm::assemble(R"(
.module nofit
.section text code
.func fn
  ret
.export fn
)");
  CHECK_THROWS_AS(loader::load(space, host, img, cfg_for(space)),
                  placement_exhausted);
}

TEST_CASE("config address width must match the space") {
  vmem::address_space space(32);
  host_table host;
  auto img = textasm::assemble(R"(
.module w
.section text code
.func fn
  ret
.export fn
)");
  load_config c;
  c.addr_bits = 48;
  c.rng_seed = 1;
  CHECK_THROWS_AS(loader::load(space, host, img, c), invalid_model);
}

TEST_CASE("snapshot reports the live layout") {
  vmem::address_space space(32);
  host_table host;
  host.provide("host_log", 0xbeef000);
  auto img = textasm::assemble(kRichSource);
  auto lm = loader::load(space, host, img, cfg_for(space));
  auto s = lm.snapshot();

  CHECK(s.generation == 0);
  CHECK(s.movable_base == lm.movable_base);
  CHECK(s.immovable_base == lm.immovable_base);
  CHECK(s.text_base == lm.text_range().first);
  CHECK(s.text_base + s.text_len == lm.text_range().second);
  for (u32 t = 0; t < 4; ++t) CHECK(s.got_bases[t] == lm.gots[t].base());
  CHECK(s.wrappers.size() == 2);
  CHECK(s.wrappers.at("apply") == lm.wrappers.at("apply"));
  CHECK(s.key_hash == lm.key_hash);

  // Both exported symbols resolve inside the snapshot's text range.
  for (const char* n : {"apply", "helper"}) {
    const u64 a = lm.symbol_addr(n);
    CHECK(a >= s.text_base);
    CHECK(a < s.text_base + s.text_len);
  }
}

TEST_CASE("update hook is published like any export and remembered") {
  vmem::address_space space(32);
  host_table host;
  auto img = textasm::assemble(R"(
.module hooked
.section text code
.func fn
  ret
.func fixup
  ret
.export fn
.export fixup
.update_hook fixup
)");
  auto lm = loader::load(space, host, img, cfg_for(space));
  REQUIRE(lm.hook_wrapper.has_value());
  CHECK(*lm.hook_wrapper == lm.wrappers.at("fixup"));
  CHECK(host.find("fixup") == lm.hook_wrapper);
}
