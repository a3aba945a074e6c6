#pragma once

/// \file
/// Places a module image into an address space and makes it runnable:
///
///   * movable part (text/data) at a uniform-random page-aligned base,
///     immovable part (fixed_text/rodata, wrappers, stable tables) at an
///     independently chosen base that never moves afterwards;
///   * four indirection tables — (movable|immovable part) x (local|fixed
///     locality). Local tables hold only movable-part addresses and are
///     rebuilt every generation; fixed tables hold only host/immovable
///     addresses and never change. Slot values are the only place a
///     movable absolute address may live outside movable data;
///   * relocation resolution with load-time rewrites: indirect calls to
///     same-part targets become direct calls one byte shorter plus a
///     NOP, table-mediated address loads of same-part symbols become
///     PC-relative address formation, and (with retpoline on) calls go
///     through per-part stub pages unless rewritten to direct form;
///   * an export wrapper in the immovable part per exported function:
///     guard enter, stack switch, indirect call through the immovable
///     local table, stack restore, guard exit, return. Hosts only ever
///     see wrapper addresses.
///
/// Because every intra-part reference is PC-relative and cross-part
/// references go through tables, the movable block's bytes are fully
/// position-independent: re-randomization aliases the same frames at a
/// new base and swaps in freshly built local tables, copying nothing.

#include <algorithm>
#include <array>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rerand/isa.hpp"
#include "rerand/modfmt.hpp"
#include "rerand/util.hpp"
#include "rerand/vmem.hpp"

namespace rerand::loader {

// -- host symbol table --------------------------------------------------

/// The "kernel side": symbols the host provides to modules, plus the
/// wrapper addresses modules publish back.
class host_table {
 public:
  void provide(const std::string& name, u64 addr) { map_[name] = addr; }

  void publish(const std::string& name, u64 addr) {
    if (map_.count(name))
      throw duplicate_symbol(name + " already present in host table");
    map_[name] = addr;
  }

  std::optional<u64> find(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }

  const std::map<std::string, u64>& all() const { return map_; }

 private:
  std::map<std::string, u64> map_;
};

// -- layout vocabulary ----------------------------------------------------

enum class locality : u8 { local = 0, fixed = 1 };

/// Region classes making up a part block, in block order.
enum class rclass : u8 {
  code,        // movable text            {R,X}
  fixed_code,  // fixed_text + wrappers   {R,X}
  plt,         // stub page               {R,X}
  data,        //                         {R,W}
  rodata,      //                         {R}
  local_got,   // rebuilt per generation  {R}
  fixed_got,   // never changes           {R}
};

inline vmem::perm perms_for(rclass c) {
  switch (c) {
    case rclass::code:
    case rclass::fixed_code:
    case rclass::plt:
      return vmem::kReadExec;
    case rclass::data:
      return vmem::kReadWrite;
    default:
      return vmem::kRead;
  }
}

struct got_entry {
  std::string symbol;
  i64 addend = 0;
  u64 rel = 0;  // movable-block-relative target (local tables only)
  u64 value = 0;
  bool is_key = false;
};

struct got_table {
  modfmt::part part;
  locality loc;
  vmem::region region;
  std::vector<got_entry> entries;

  u64 base() const { return region.base; }
  u64 slot_addr(u64 idx) const { return region.base + idx * 8; }
};

/// Table indices in loaded_module::gots.
inline constexpr u32 kMovableLocal = 0;
inline constexpr u32 kMovableFixed = 1;
inline constexpr u32 kImmovableLocal = 2;
inline constexpr u32 kImmovableFixed = 3;

inline constexpr u32 table_index(modfmt::part p, locality l) {
  return (p == modfmt::part::movable ? 0 : 2) +
         (l == locality::fixed ? 1 : 0);
}

struct plt_stub {
  std::string symbol;
  modfmt::part part;
  u64 addr = 0;
  u64 got_slot_addr = 0;
};

struct patch_stats {
  u64 direct_calls = 0;
  u64 lea_forms = 0;
};

struct load_config {
  bool retpoline = false;
  bool optimize = true;
  unsigned addr_bits = 48;
  u64 rng_seed = 1;
  u64 place_retries = 64;
};

struct region_desc {
  rclass cls;
  u64 rel_off = 0;  // offset of the region within its part block
  u64 len = 0;      // meaningful bytes (region is page-rounded)
  vmem::region cur;
};

struct sym_loc {
  modfmt::part part;
  u64 rel = 0;  // block-relative address of the symbol
};

struct layout_snapshot {
  u64 generation = 0;
  u64 movable_base = 0;
  u64 movable_len = 0;
  u64 immovable_base = 0;
  u64 immovable_len = 0;
  u64 text_base = 0;
  u64 text_len = 0;
  std::array<u64, 4> got_bases{};
  std::map<std::string, u64> wrappers;
  u64 key_hash = 0;
};

struct loaded_module {
  modfmt::module_image image;
  load_config cfg;
  u64 movable_base = 0;
  u64 movable_len = 0;
  u64 immovable_base = 0;
  u64 immovable_len = 0;
  u64 generation = 0;
  u32 key_slot = 0;  // index in the movable-part local table
  u64 key_hash = 0;
  std::array<got_table, 4> gots;
  std::vector<plt_stub> plt;
  std::map<std::string, u64> wrappers;
  std::optional<u64> hook_wrapper;
  patch_stats patches;

  std::vector<region_desc> movable_regions;
  std::vector<region_desc> immovable_regions;
  std::map<std::string, sym_loc> sym_locs;
  u64 text_rel = 0;
  u64 text_len = 0;

  u64 part_base(modfmt::part p) const {
    return p == modfmt::part::movable ? movable_base : immovable_base;
  }

  /// Current absolute address of a module-defined symbol.
  u64 symbol_addr(const std::string& name) const {
    auto it = sym_locs.find(name);
    if (it == sym_locs.end()) throw not_mapped("no such symbol: " + name);
    return part_base(it->second.part) + it->second.rel;
  }

  /// Current movable text range [lo, hi).
  std::pair<u64, u64> text_range() const {
    return {movable_base + text_rel, movable_base + text_rel + text_len};
  }

  layout_snapshot snapshot() const {
    layout_snapshot s;
    s.generation = generation;
    s.movable_base = movable_base;
    s.movable_len = movable_len;
    s.immovable_base = immovable_base;
    s.immovable_len = immovable_len;
    s.text_base = movable_base + text_rel;
    s.text_len = text_len;
    for (u32 i = 0; i < 4; ++i) s.got_bases[i] = gots[i].base();
    s.wrappers = wrappers;
    s.key_hash = key_hash;
    return s;
  }
};

// -- placement ------------------------------------------------------------

/// Uniform-random page-aligned free base for `pages` consecutive pages.
/// `avoid_base`/`avoid_pages` exclude a range that is spoken for but not
/// mapped yet (the sibling block chosen a moment earlier).
inline u64 pick_block_base(vmem::address_space& space, rng& r, u64 pages,
                           u64 retries, u64 avoid_base = 0,
                           u64 avoid_pages = 0) {
  const u64 total_vpns = space.limit() / vmem::kPageSize;
  if (pages == 0 || pages >= total_vpns)
    throw placement_exhausted("block larger than the address space");
  const u64 span = total_vpns - pages;  // valid first-page numbers: [1, span]
  for (u64 t = 0; t < retries; ++t) {
    const u64 vpn = 1 + r.next_below(span);
    const u64 base = vpn * vmem::kPageSize;
    const bool clash = avoid_pages > 0 &&
                       base < avoid_base + avoid_pages * vmem::kPageSize &&
                       avoid_base < base + pages * vmem::kPageSize;
    if (!clash && space.range_free(base, pages)) return base;
  }
  throw placement_exhausted("no free base after " + std::to_string(retries) +
                            " attempts");
}

// -- load -----------------------------------------------------------------

namespace detail {

inline u64 round_page(u64 v) {
  return (v + vmem::kPageSize - 1) & ~(vmem::kPageSize - 1);
}

inline constexpr u64 kSlotsPerTable = vmem::kPageSize / 8;
inline constexpr u64 kWrapperSize = 11;
inline constexpr u64 kStubSize = 6;

enum class action : u8 {
  write_abs64,
  write_pc32,
  key_slot_ref,
  slot_indirect,
  via_stub,
  patch_direct,
  patch_lea,
};

struct decision {
  action act;
  locality loc = locality::fixed;  // for slot_indirect / via_stub
};

struct builder_state {
  const modfmt::module_image& img;
  const load_config& cfg;

  // Per-class staging buffers and their block offsets.
  struct cls_buf {
    std::vector<u8> bytes;
    u64 block_off = 0;
  };
  std::map<std::pair<modfmt::part, rclass>, cls_buf> bufs;

  struct sec_place {
    rclass cls;
    u64 rel_in_class = 0;
    u64 block_rel = 0;
  };
  std::vector<sec_place> splace;

  std::array<std::map<std::pair<std::string, i64>, u32>, 4> slot_ix;
  std::array<std::vector<got_entry>, 4> slots;
  std::map<std::pair<modfmt::part, std::string>, u32> stub_ix;
  std::vector<std::pair<modfmt::part, std::string>> stubs;
  std::vector<decision> plans;

  explicit builder_state(const modfmt::module_image& i, const load_config& c)
      : img(i), cfg(c), splace(i.sections.size()) {}

  const modfmt::symbol& sym(u32 i) const { return img.symbols[i]; }

  bool defined(const modfmt::symbol& s) const {
    return s.bind != modfmt::binding::imported;
  }

  modfmt::part sym_part(const modfmt::symbol& s) const {
    return img.sections[s.section].where;
  }

  modfmt::part site_part(const modfmt::relocation& r) const {
    return img.sections[r.section].where;
  }

  isa::op site_opcode(const modfmt::relocation& r) const {
    const auto& bytes = img.sections[r.section].bytes;
    auto in = isa::decode(bytes.data() + r.offset, bytes.size() - r.offset);
    if (!in)
      throw validation_error("reloc_site_insn: undecodable instruction at " +
                             img.sections[r.section].name + "+" +
                             std::to_string(r.offset));
    return in->opcode;
  }

  u32 want_slot(u32 table, const std::string& symbol, i64 addend, u64 rel) {
    auto key = std::make_pair(symbol, addend);
    auto it = slot_ix[table].find(key);
    if (it != slot_ix[table].end()) return it->second;
    const u32 idx = static_cast<u32>(slots[table].size());
    if (idx >= kSlotsPerTable)
      throw out_of_memory("indirection table full");
    slot_ix[table][key] = idx;
    slots[table].push_back(got_entry{symbol, addend, rel, 0, false});
    return idx;
  }

  u32 want_stub(modfmt::part p, const std::string& symbol) {
    auto key = std::make_pair(p, symbol);
    auto it = stub_ix.find(key);
    if (it != stub_ix.end()) return it->second;
    const u32 idx = static_cast<u32>(stubs.size());
    stub_ix[key] = idx;
    stubs.push_back(key);
    return idx;
  }
};

/// Static classification of a relocation: which rewrite applies and
/// which table the surviving indirection (if any) goes through. Pure in
/// the image and config, so slot demand is known before placement.
inline decision decide(const builder_state& st, const modfmt::relocation& r) {
  using modfmt::reloc_kind;
  const auto& sym = st.sym(r.target);
  const bool is_key = sym.name == modfmt::kKeySymbol;

  if (r.kind == reloc_kind::abs64) {
    if (is_key) throw validation_error("key_reloc: key has no address");
    return {action::write_abs64};
  }
  if (r.kind == reloc_kind::pc32) {
    if (is_key) throw validation_error("key_reloc: key has no address");
    return {action::write_pc32};
  }

  const isa::op op = st.site_opcode(r);
  const modfmt::part site = st.site_part(r);

  if (r.kind == reloc_kind::got_local || r.kind == reloc_kind::got_fixed) {
    if (op != isa::op::ld_got && op != isa::op::call_ind_got &&
        op != isa::op::jmp_ind_got)
      throw validation_error("reloc_site_insn: table reloc on " +
                             std::string(isa::name_of(op)));
    if (is_key) {
      if (r.kind != reloc_kind::got_local)
        throw validation_error("key_reloc: key lives in the local table");
      if (site != modfmt::part::movable)
        throw validation_error(
            "key_reloc: only movable code uses the return-address key");
      if (op != isa::op::ld_got)
        throw validation_error("key_reloc: key is load-only");
      return {action::key_slot_ref};
    }
    const locality loc = (st.defined(sym) &&
                          st.sym_part(sym) == modfmt::part::movable)
                             ? locality::local
                             : locality::fixed;
    const locality claimed = r.kind == reloc_kind::got_local
                                 ? locality::local
                                 : locality::fixed;
    if (loc != claimed)
      throw validation_error("got_locality: " + sym.name +
                             " does not match the relocation kind");
    const bool same_part = st.defined(sym) && st.sym_part(sym) == site;
    if (st.cfg.optimize && same_part) {
      if (op == isa::op::ld_got) return {action::patch_lea};
      if (op == isa::op::call_ind_got && !st.cfg.retpoline)
        return {action::patch_direct};
    }
    return {action::slot_indirect, loc};
  }

  // plt32: a call through loader machinery.
  if (op != isa::op::call_ind_got)
    throw validation_error("reloc_site_insn: call reloc on " +
                           std::string(isa::name_of(op)));
  if (is_key) throw validation_error("key_reloc: key is not callable");
  const bool same_part = st.defined(sym) && st.sym_part(sym) == site;
  if (st.cfg.optimize && same_part) return {action::patch_direct};
  const locality loc =
      (st.defined(sym) && st.sym_part(sym) == modfmt::part::movable)
          ? locality::local
          : locality::fixed;
  if (st.cfg.retpoline) return {action::via_stub, loc};
  return {action::slot_indirect, loc};
}

inline void write_u64_at(std::vector<u8>& buf, u64 off, u64 v) {
  std::memcpy(buf.data() + off, &v, 8);
}

inline void write_i32_at(std::vector<u8>& buf, u64 off, i32 v) {
  std::memcpy(buf.data() + off, &v, 4);
}

}  // namespace detail

inline loaded_module load(vmem::address_space& space, host_table& host,
                          const modfmt::module_image& img, load_config cfg) {
  using namespace detail;
  using modfmt::part;
  modfmt::validate(img);
  if (cfg.addr_bits != space.addr_bits())
    throw invalid_model("config address width disagrees with the space");
  {
    // Slots and resolution are keyed by name, so ambiguity is fatal.
    std::map<std::string, u32> seen;
    for (const auto& s : img.symbols)
      if (!seen.emplace(s.name, 1).second)
        throw duplicate_symbol(s.name + " defined twice in " + img.name);
  }
  rng r(cfg.rng_seed);
  builder_state st(img, cfg);

  // ---- pack sections into class buffers -------------------------------
  auto cls_of = [](modfmt::section_kind k) {
    switch (k) {
      case modfmt::section_kind::text: return rclass::code;
      case modfmt::section_kind::data: return rclass::data;
      case modfmt::section_kind::rodata: return rclass::rodata;
      case modfmt::section_kind::fixed_text: return rclass::fixed_code;
    }
    return rclass::code;
  };
  for (u32 i = 0; i < img.sections.size(); ++i) {
    const auto& s = img.sections[i];
    const rclass cls = cls_of(s.kind);
    auto& buf = st.bufs[{s.where, cls}];
    u64 off = buf.bytes.size();
    off = (off + s.align - 1) & ~(u64{s.align} - 1);
    buf.bytes.resize(off + s.bytes.size());
    std::copy(s.bytes.begin(), s.bytes.end(), buf.bytes.begin() + off);
    st.splace[i] = {cls, off, 0};
  }

  // Wrappers extend the immovable code class.
  u64 wrap_rel_in_class = 0;
  {
    auto& xfix = st.bufs[{part::immovable, rclass::fixed_code}];
    wrap_rel_in_class = (xfix.bytes.size() + 15) & ~u64{15};
    xfix.bytes.resize(wrap_rel_in_class + kWrapperSize * img.exports.size());
  }

  // ---- classify relocations, collect slot and stub demand -------------
  st.plans.reserve(img.relocations.size());
  for (const auto& rel : img.relocations) {
    decision d = decide(st, rel);
    st.plans.push_back(d);
    const auto& sym = st.sym(rel.target);
    if (d.act == action::key_slot_ref) continue;
    if (d.act == action::slot_indirect || d.act == action::via_stub) {
      const u32 table = table_index(st.site_part(rel), d.loc);
      st.want_slot(table, sym.name, rel.addend, 0);
      if (d.act == action::via_stub) st.want_stub(st.site_part(rel), sym.name);
    }
  }
  // The movable local table always starts with the key slot.
  st.slots[kMovableLocal].insert(
      st.slots[kMovableLocal].begin(),
      got_entry{modfmt::kKeySymbol, 0, 0, 0, true});
  for (auto& [k, v] : st.slot_ix[kMovableLocal]) {
    (void)k;
    ++v;
  }
  // Every export is reachable through the immovable local table (the
  // wrapper's call goes through it).
  for (const auto& e : img.exports)
    st.want_slot(kImmovableLocal, e, 0, 0);

  // ---- stub pages and table pages ---------------------------------------
  std::array<u32, 2> stub_count{0, 0};
  std::vector<u32> stub_local_index(st.stubs.size());
  for (u32 i = 0; i < st.stubs.size(); ++i) {
    const auto p = st.stubs[i].first;
    stub_local_index[i] = stub_count[p == part::movable ? 0 : 1]++;
  }
  if (cfg.retpoline) {
    if (stub_count[0] > 0)
      st.bufs[{part::movable, rclass::plt}].bytes.resize(stub_count[0] *
                                                         kStubSize);
    if (stub_count[1] > 0)
      st.bufs[{part::immovable, rclass::plt}].bytes.resize(stub_count[1] *
                                                           kStubSize);
  }
  st.bufs[{part::movable, rclass::local_got}].bytes.resize(vmem::kPageSize);
  st.bufs[{part::movable, rclass::fixed_got}].bytes.resize(vmem::kPageSize);
  st.bufs[{part::immovable, rclass::local_got}].bytes.resize(vmem::kPageSize);
  st.bufs[{part::immovable, rclass::fixed_got}].bytes.resize(vmem::kPageSize);

  // ---- block offsets ----------------------------------------------------
  constexpr rclass kOrder[] = {rclass::code,   rclass::fixed_code,
                               rclass::plt,    rclass::data,
                               rclass::rodata, rclass::local_got,
                               rclass::fixed_got};
  std::array<u64, 2> block_len{0, 0};
  for (part p : {part::movable, part::immovable}) {
    u64& off = block_len[p == part::movable ? 0 : 1];
    for (rclass c : kOrder) {
      auto it = st.bufs.find({p, c});
      if (it == st.bufs.end() || it->second.bytes.empty()) continue;
      it->second.block_off = off;
      off = round_page(off + it->second.bytes.size());
    }
  }
  for (u32 i = 0; i < img.sections.size(); ++i) {
    const auto& s = img.sections[i];
    st.splace[i].block_rel =
        st.bufs[{s.where, st.splace[i].cls}].block_off +
        st.splace[i].rel_in_class;
  }

  // ---- choose bases -------------------------------------------------------
  loaded_module lm;
  lm.image = img;
  lm.cfg = cfg;
  lm.immovable_len = block_len[1];
  lm.movable_len = block_len[0];
  lm.immovable_base = pick_block_base(
      space, r, block_len[1] / vmem::kPageSize, cfg.place_retries);
  lm.movable_base = pick_block_base(
      space, r, block_len[0] / vmem::kPageSize, cfg.place_retries,
      lm.immovable_base, block_len[1] / vmem::kPageSize);

  auto base_of = [&](part p) {
    return p == part::movable ? lm.movable_base : lm.immovable_base;
  };
  auto sym_abs = [&](const modfmt::symbol& s) -> u64 {
    if (st.defined(s))
      return base_of(st.sym_part(s)) + st.splace[s.section].block_rel +
             s.offset;
    auto found = host.find(s.name);
    if (!found) throw unresolved_import(s.name);
    return *found;
  };
  auto sym_rel = [&](const modfmt::symbol& s) -> u64 {  // movable-block rel
    return st.splace[s.section].block_rel + s.offset;
  };

  // ---- table geometry ----------------------------------------------------
  const std::pair<part, locality> kTables[4] = {
      {part::movable, locality::local},
      {part::movable, locality::fixed},
      {part::immovable, locality::local},
      {part::immovable, locality::fixed},
  };
  std::array<u64, 4> got_base;
  for (u32 t = 0; t < 4; ++t) {
    const auto [p, l] = kTables[t];
    const rclass c = l == locality::local ? rclass::local_got
                                          : rclass::fixed_got;
    got_base[t] = base_of(p) + st.bufs[{p, c}].block_off;
  }
  auto plt_base = [&](part p) {
    return base_of(p) + st.bufs[{p, rclass::plt}].block_off;
  };

  // ---- generate the key and table values ---------------------------------
  // Full-width nonzero draw, same discipline later rotations use.
  u64 key = r.next_u64();
  while (key == 0) key = r.next_u64();
  lm.key_hash = fnv1a64(key);
  lm.key_slot = 0;
  for (u32 t = 0; t < 4; ++t) {
    for (auto& e : st.slots[t]) {
      if (e.is_key) {
        e.value = key;
        continue;
      }
      const auto* s = img.find_symbol(e.symbol);
      e.value = sym_abs(*s) + e.addend;
      if (kTables[t].second == locality::local)
        e.rel = sym_rel(*s) + static_cast<u64>(e.addend);
    }
    auto& buf = st.bufs[{kTables[t].first,
                         kTables[t].second == locality::local
                             ? rclass::local_got
                             : rclass::fixed_got}];
    for (u64 i = 0; i < st.slots[t].size(); ++i)
      write_u64_at(buf.bytes, i * 8, st.slots[t][i].value);
  }

  // ---- resolve relocations over the staged bytes -------------------------
  for (u64 i = 0; i < img.relocations.size(); ++i) {
    const auto& rel = img.relocations[i];
    const decision d = st.plans[i];
    const auto& sym = st.sym(rel.target);
    const auto& place = st.splace[rel.section];
    auto& buf = st.bufs[{st.site_part(rel), place.cls}].bytes;
    const u64 buf_off = place.rel_in_class + rel.offset;
    const u64 site_abs = base_of(st.site_part(rel)) + place.block_rel +
                         rel.offset;

    auto write_disp = [&](u64 target) {
      const auto in = isa::decode(buf.data() + buf_off, buf.size() - buf_off);
      const u64 field = isa::disp_offset(in->opcode);
      write_i32_at(buf, buf_off + field,
                   isa::disp_for(site_abs, in->len, target));
    };

    switch (d.act) {
      case action::write_abs64:
        write_u64_at(buf, buf_off, sym_abs(sym) + rel.addend);
        break;
      case action::write_pc32:
        write_disp(sym_abs(sym) + rel.addend);
        break;
      case action::key_slot_ref:
        write_disp(got_base[kMovableLocal] + u64{lm.key_slot} * 8);
        break;
      case action::slot_indirect: {
        const u32 t = table_index(st.site_part(rel), d.loc);
        const u32 slot = st.slot_ix[t].at({sym.name, rel.addend});
        write_disp(got_base[t] + u64{slot} * 8);
        break;
      }
      case action::patch_lea: {
        buf[buf_off] = static_cast<u8>(isa::op::lea_pc32);
        write_disp(sym_abs(sym) + rel.addend);
        ++lm.patches.lea_forms;
        break;
      }
      case action::patch_direct: {
        // 6-byte indirect call becomes a 5-byte direct call + 1 NOP.
        buf[buf_off] = static_cast<u8>(isa::op::call_pc32);
        write_i32_at(buf, buf_off + 1,
                     isa::disp_for(site_abs, 5, sym_abs(sym) + rel.addend));
        buf[buf_off + 5] = static_cast<u8>(isa::op::nop);
        ++lm.patches.direct_calls;
        break;
      }
      case action::via_stub: {
        const u32 stub = st.stub_ix.at({st.site_part(rel), sym.name});
        const u64 stub_abs =
            plt_base(st.site_part(rel)) + stub_local_index[stub] * kStubSize;
        buf[buf_off] = static_cast<u8>(isa::op::call_pc32);
        write_i32_at(buf, buf_off + 1, isa::disp_for(site_abs, 5, stub_abs));
        buf[buf_off + 5] = static_cast<u8>(isa::op::nop);
        break;
      }
    }
  }

  // ---- stub bodies --------------------------------------------------------
  for (u32 i = 0; i < st.stubs.size(); ++i) {
    const auto [p, name] = st.stubs[i];
    const auto* s = img.find_symbol(name);
    const locality loc =
        (st.defined(*s) && st.sym_part(*s) == part::movable) ? locality::local
                                                             : locality::fixed;
    const u32 t = table_index(p, loc);
    // A stub always loads through a slot; addend 0 by construction.
    const u32 slot = st.slot_ix[t].at({name, 0});
    const u64 stub_abs = plt_base(p) + stub_local_index[i] * kStubSize;
    const u64 slot_abs = got_base[t] + u64{slot} * 8;
    auto& buf = st.bufs[{p, rclass::plt}].bytes;
    const u64 off = stub_local_index[i] * kStubSize;
    buf[off] = static_cast<u8>(isa::op::jmp_ind_got);
    buf[off + 1] = 0;
    write_i32_at(buf, off + 2, isa::disp_for(stub_abs, kStubSize, slot_abs));
    lm.plt.push_back(plt_stub{name, p, stub_abs, slot_abs});
  }

  // ---- wrapper bodies -------------------------------------------------------
  {
    auto& xfix = st.bufs[{part::immovable, rclass::fixed_code}];
    const u64 wrap_block = xfix.block_off + wrap_rel_in_class;
    for (u64 k = 0; k < img.exports.size(); ++k) {
      const std::string& name = img.exports[k];
      const u64 off = wrap_rel_in_class + k * kWrapperSize;
      const u64 abs = lm.immovable_base + wrap_block + k * kWrapperSize;
      const u32 slot = st.slot_ix[kImmovableLocal].at({name, 0});
      const u64 slot_abs = got_base[kImmovableLocal] + u64{slot} * 8;
      u8* w = xfix.bytes.data() + off;
      w[0] = static_cast<u8>(isa::op::mr_start);
      w[1] = static_cast<u8>(isa::op::stack_swap);
      w[2] = static_cast<u8>(isa::op::call_ind_got);
      w[3] = 0;
      const i32 disp = isa::disp_for(abs + 2, 6, slot_abs);
      std::memcpy(w + 4, &disp, 4);
      w[8] = static_cast<u8>(isa::op::stack_restore);
      w[9] = static_cast<u8>(isa::op::mr_finish);
      w[10] = static_cast<u8>(isa::op::ret);
      lm.wrappers[name] = abs;
    }
  }

  // ---- map everything with final permissions -----------------------------
  for (part p : {part::movable, part::immovable}) {
    auto& out = p == part::movable ? lm.movable_regions : lm.immovable_regions;
    for (auto& [key_, buf] : st.bufs) {
      if (key_.first != p || buf.bytes.empty()) continue;
      const u64 pages = round_page(buf.bytes.size()) / vmem::kPageSize;
      std::vector<u64> frames;
      for (u64 i = 0; i < pages; ++i) frames.push_back(space.create_frame());
      for (u64 i = 0; i < pages; ++i) {
        const u64 chunk =
            std::min(vmem::kPageSize, buf.bytes.size() - i * vmem::kPageSize);
        if (chunk > 0)
          space.poke_frame(frames[i], 0, buf.bytes.data() + i * vmem::kPageSize,
                           chunk);
      }
      vmem::region reg = space.map_region(base_of(p) + buf.block_off, frames,
                                          perms_for(key_.second));
      out.push_back(
          region_desc{key_.second, buf.block_off, buf.bytes.size(), reg});
    }
  }

  // ---- bookkeeping ----------------------------------------------------------
  for (u32 t = 0; t < 4; ++t) {
    lm.gots[t].part = kTables[t].first;
    lm.gots[t].loc = kTables[t].second;
    lm.gots[t].entries = std::move(st.slots[t]);
    for (auto& rd : (kTables[t].first == part::movable ? lm.movable_regions
                                                       : lm.immovable_regions))
      if (rd.cls == (kTables[t].second == locality::local ? rclass::local_got
                                                          : rclass::fixed_got))
        lm.gots[t].region = rd.cur;
  }
  for (const auto& s : img.symbols)
    if (st.defined(s))
      lm.sym_locs[s.name] = sym_loc{st.sym_part(s), sym_rel(s)};
  {
    auto it = st.bufs.find({part::movable, rclass::code});
    if (it != st.bufs.end()) {
      lm.text_rel = it->second.block_off;
      lm.text_len = it->second.bytes.size();
    }
  }
  for (const auto& e : img.exports) host.publish(e, lm.wrappers.at(e));
  if (img.update_hook) lm.hook_wrapper = lm.wrappers.at(*img.update_hook);
  return lm;
}

}  // namespace rerand::loader
