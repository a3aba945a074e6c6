#pragma once

/// \file
/// Line-oriented assembler producing module images. Sugar over the
/// modfmt builder for tests and the command-line tool; it has no
/// semantics of its own.
///
/// Directives:
///   .module NAME             module name (required, once)
///   .section KIND NAME       KIND: text data rodata fixed_text
///   .func NAME               define NAME here and emit the
///                            return-address-encryption prologue;
///                            `ret` inside a .func expands to the
///                            matching epilogue
///   .export NAME / .import NAME / .update_hook NAME
///   .quad INT | @SYM[+/-N]   8 data bytes (symbol form adds an
///                            absolute relocation; data sections only)
///   .bytes HH HH ...         raw bytes
///   .align N                 zero-pad to an N-byte boundary
///   label:                   define a local symbol here
///
/// Instructions (source operand first, destination last):
///   call @SYM      callind @SYM    jmp @SYM      — through loader tables
///   call LABEL     jmp LABEL       lea LABEL, rN — same-section, resolved here
///   lea @SYM, rN   movi IMM, rN
///   mov rA, rB     add rA, rB      xor rA, rB    (rB gets the result)
///   ldm rA, rB     (rB = *rA)      stm rA, rB    (*rB = rA)
///   push rN  pop rN  xorsp rN  movsp rN
///   ret  halt  nop  sysret  mr_start  mr_finish  stack_swap  stack_restore
///
/// Comments run from '#' or ';' to end of line.

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rerand/isa.hpp"
#include "rerand/modfmt.hpp"

namespace rerand::textasm {

class asm_error : public error {
 public:
  explicit asm_error(const std::string& what) : error("asm_error", what) {}
};

namespace detail {

inline std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> toks;
  std::string cur;
  for (char c : line) {
    if (c == '#' || c == ';') break;
    if (c == ' ' || c == '\t' || c == ',') {
      if (!cur.empty()) toks.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) toks.push_back(std::move(cur));
  return toks;
}

inline i64 parse_int(const std::string& tok, int line_no) {
  try {
    size_t used = 0;
    i64 v = std::stoll(tok, &used, 0);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw asm_error("line " + std::to_string(line_no) + ": bad integer '" +
                    tok + "'");
  }
}

inline u8 parse_reg(const std::string& tok, int line_no) {
  if (tok.size() < 2 || tok[0] != 'r')
    throw asm_error("line " + std::to_string(line_no) + ": expected register, got '" +
                    tok + "'");
  const i64 n = parse_int(tok.substr(1), line_no);
  if (n < 0 || n >= static_cast<i64>(isa::kRegCount))
    throw asm_error("line " + std::to_string(line_no) + ": no such register " + tok);
  return static_cast<u8>(n);
}

}  // namespace detail

class assembler {
 public:
  modfmt::module_image run(const std::string& source) {
    std::istringstream in(source);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      auto toks = detail::tokenize(line);
      if (toks.empty()) continue;
      handle(toks, line_no);
    }
    finish();
    return b_.build();
  }

 private:
  struct fixup {  // same-section label reference resolved at the end
    u32 section;
    u64 field_off;  // offset of the 4 displacement bytes
    std::string label;
    int line_no;
  };

  modfmt::builder b_{"unnamed"};
  std::map<std::string, u32> sections_;        // name -> index
  std::map<std::string, u32> symbols_;         // name -> symbol index
  std::map<std::string, bool> defined_;        // symbol has a definition
  std::vector<std::string> export_requests_;
  std::vector<fixup> fixups_;
  u32 cur_sec_ = modfmt::kUndefinedSection;
  bool in_func_ = false;
  bool have_name_ = false;

  std::vector<u8>& code() { return b_.bytes(cur_sec_); }

  [[noreturn]] void err(int line_no, const std::string& what) {
    throw asm_error("line " + std::to_string(line_no) + ": " + what);
  }

  void need_section(int line_no) {
    if (cur_sec_ == modfmt::kUndefinedSection)
      err(line_no, "no .section is active");
  }

  u32 sym_index(const std::string& name) {
    auto it = symbols_.find(name);
    if (it != symbols_.end()) return it->second;
    // Forward reference: reserve the slot, bind it on definition.
    const u32 idx = b_.add_symbol(name, modfmt::binding::local,
                                  modfmt::kUndefinedSection, 0);
    symbols_[name] = idx;
    defined_[name] = false;
    return idx;
  }

  void define_here(const std::string& name, int line_no) {
    need_section(line_no);
    const u32 idx = sym_index(name);
    if (defined_[name]) err(line_no, "symbol '" + name + "' redefined");
    auto& sym = b_.raw().symbols[idx];
    if (sym.bind == modfmt::binding::imported)
      err(line_no, "symbol '" + name + "' both imported and defined");
    sym.section = cur_sec_;
    sym.offset = code().size();
    defined_[name] = true;
  }

  /// Table-slot relocation kind for a reference to `sym`: targets that
  /// live in a movable section go through the rebased table, everything
  /// else (imports, immovable code/data) through the stable one.
  modfmt::reloc_kind slot_kind(u32 sym_idx) const {
    const auto& sym = b_.raw().symbols[sym_idx];  // NOLINT: builder outlives
    if (sym.name == modfmt::kKeySymbol) return modfmt::reloc_kind::got_local;
    if (sym.bind == modfmt::binding::imported) return modfmt::reloc_kind::got_fixed;
    if (sym.section == modfmt::kUndefinedSection)
      return modfmt::reloc_kind::got_fixed;  // refined on definition in finish()
    const auto& sec = b_.raw().sections[sym.section];
    return sec.where == modfmt::part::movable ? modfmt::reloc_kind::got_local
                                              : modfmt::reloc_kind::got_fixed;
  }

  void handle(const std::vector<std::string>& toks, int line_no) {
    const std::string& head = toks[0];

    if (head.size() > 1 && head.back() == ':') {
      define_here(head.substr(0, head.size() - 1), line_no);
      if (toks.size() > 1)
        handle(std::vector<std::string>(toks.begin() + 1, toks.end()), line_no);
      return;
    }
    if (head[0] == '.') {
      directive(toks, line_no);
      return;
    }
    instruction(toks, line_no);
  }

  void directive(const std::vector<std::string>& toks, int line_no) {
    const std::string& d = toks[0];
    auto arg = [&](size_t i) -> const std::string& {
      if (i >= toks.size()) err(line_no, d + ": missing operand");
      return toks[i];
    };

    if (d == ".module") {
      b_.raw().name = arg(1);
      have_name_ = true;
    } else if (d == ".section") {
      const std::string& kind_s = arg(1);
      const std::string& name = arg(2);
      modfmt::section_kind kind;
      if (kind_s == "text") kind = modfmt::section_kind::text;
      else if (kind_s == "data") kind = modfmt::section_kind::data;
      else if (kind_s == "rodata") kind = modfmt::section_kind::rodata;
      else if (kind_s == "fixed_text") kind = modfmt::section_kind::fixed_text;
      else err(line_no, "unknown section kind '" + kind_s + "'");
      auto it = sections_.find(name);
      if (it != sections_.end()) {
        cur_sec_ = it->second;
      } else {
        cur_sec_ = b_.add_section(name, kind);
        sections_[name] = cur_sec_;
      }
      in_func_ = false;
    } else if (d == ".func") {
      need_section(line_no);
      // The prologue reads the per-generation key; code that never moves
      // would decrypt with a rotated key mid-call, so refuse it there.
      if (b_.raw().sections[cur_sec_].kind != modfmt::section_kind::text)
        err(line_no, ".func is only allowed in text sections");
      define_here(arg(1), line_no);
      in_func_ = true;
      emit_key_xor(line_no);  // encrypt the just-pushed return address
    } else if (d == ".export") {
      export_requests_.push_back(arg(1));
    } else if (d == ".import") {
      const std::string& name = arg(1);
      if (symbols_.count(name)) err(line_no, "'" + name + "' already declared");
      symbols_[name] = b_.add_import(name);
      defined_[name] = true;
    } else if (d == ".update_hook") {
      b_.set_update_hook(arg(1));
    } else if (d == ".quad") {
      need_section(line_no);
      std::string v = arg(1);
      for (size_t i = 2; i < toks.size(); ++i) v += toks[i];  // "@f + 8"
      if (v[0] == '@') {
        std::string name = v.substr(1);
        i64 addend = 0;
        if (auto pos = name.find_first_of("+-"); pos != std::string::npos) {
          addend = detail::parse_int(name.substr(pos), line_no);
          name = name.substr(0, pos);
        }
        const u32 idx = sym_index(name);
        b_.add_reloc(cur_sec_, code().size(), modfmt::reloc_kind::abs64, idx,
                     addend);
        for (int i = 0; i < 8; ++i) code().push_back(0);
      } else {
        const u64 imm = static_cast<u64>(detail::parse_int(v, line_no));
        for (int i = 0; i < 8; ++i)
          code().push_back(static_cast<u8>(imm >> (8 * i)));
      }
    } else if (d == ".bytes") {
      need_section(line_no);
      for (size_t i = 1; i < toks.size(); ++i)
        code().push_back(
            static_cast<u8>(detail::parse_int("0x" + toks[i], line_no)));
    } else if (d == ".align") {
      need_section(line_no);
      const i64 a = detail::parse_int(arg(1), line_no);
      if (a <= 0 || (a & (a - 1)) != 0) err(line_no, "bad alignment");
      while (code().size() % static_cast<u64>(a) != 0) code().push_back(0);
    } else {
      err(line_no, "unknown directive '" + d + "'");
    }
  }

  void emit_key_xor(int line_no) {
    need_section(line_no);
    const u32 key = sym_index(modfmt::kKeySymbol);
    if (!defined_[modfmt::kKeySymbol]) {
      b_.raw().symbols[key].bind = modfmt::binding::imported;
      defined_[modfmt::kKeySymbol] = true;
    }
    b_.add_reloc(cur_sec_, code().size(), modfmt::reloc_kind::got_local, key);
    isa::emit_ri(code(), isa::op::ld_got, isa::kScratchReg, 0);
    isa::emit_reg(code(), isa::op::xor_sp, isa::kScratchReg);
  }

  void instruction(const std::vector<std::string>& toks, int line_no) {
    need_section(line_no);
    const std::string& m = toks[0];
    auto arg = [&](size_t i) -> const std::string& {
      if (i >= toks.size()) err(line_no, m + ": missing operand");
      return toks[i];
    };
    auto reg = [&](size_t i) { return detail::parse_reg(arg(i), line_no); };
    std::vector<u8>& out = code();

    auto sym_operand = [&](const std::string& t, isa::op through_table,
                           isa::op pc_rel) {
      if (t[0] == '@') {
        const u32 idx = sym_index(t.substr(1));
        const auto kind = m == "call" ? modfmt::reloc_kind::plt32
                                      : slot_kind(idx);
        b_.add_reloc(cur_sec_, out.size(), kind, idx);
        isa::emit_ind(out, through_table, 0);
      } else {
        fixups_.push_back(fixup{cur_sec_, 0, t, line_no});
        isa::emit_pc32(out, pc_rel, 0);
        fixups_.back().field_off = out.size() - 4;
      }
    };

    if (m == "ret") {
      if (in_func_) emit_key_xor(line_no);      // decrypt before returning
      if (in_func_)
        isa::emit_reg(out, isa::op::xor_rr, isa::kScratchReg, isa::kScratchReg);
      isa::emit0(out, isa::op::ret);
    } else if (m == "halt") {
      isa::emit0(out, isa::op::halt);
    } else if (m == "nop") {
      isa::emit0(out, isa::op::nop);
    } else if (m == "sysret") {
      isa::emit0(out, isa::op::sysret);
    } else if (m == "mr_start") {
      isa::emit0(out, isa::op::mr_start);
    } else if (m == "mr_finish") {
      isa::emit0(out, isa::op::mr_finish);
    } else if (m == "stack_swap") {
      isa::emit0(out, isa::op::stack_swap);
    } else if (m == "stack_restore") {
      isa::emit0(out, isa::op::stack_restore);
    } else if (m == "call") {
      sym_operand(arg(1), isa::op::call_ind_got, isa::op::call_pc32);
    } else if (m == "callind") {
      const std::string& t = arg(1);
      if (t[0] != '@') err(line_no, "callind needs a @symbol");
      const u32 idx = sym_index(t.substr(1));
      b_.add_reloc(cur_sec_, out.size(), slot_kind(idx), idx);
      isa::emit_ind(out, isa::op::call_ind_got, 0);
    } else if (m == "jmp") {
      sym_operand(arg(1), isa::op::jmp_ind_got, isa::op::jmp_pc32);
    } else if (m == "lea") {
      const std::string& t = arg(1);
      const u8 r = reg(2);
      if (t[0] == '@') {
        const u32 idx = sym_index(t.substr(1));
        b_.add_reloc(cur_sec_, out.size(), slot_kind(idx), idx);
        isa::emit_ri(out, isa::op::ld_got, r, 0);
      } else {
        fixups_.push_back(fixup{cur_sec_, 0, t, line_no});
        isa::emit_ri(out, isa::op::lea_pc32, r, 0);
        fixups_.back().field_off = out.size() - 4;
      }
    } else if (m == "movi") {
      const i64 v = detail::parse_int(arg(1), line_no);
      if (v < INT32_MIN || v > INT32_MAX) err(line_no, "movi immediate too wide");
      const u8 r = reg(2);
      isa::emit_ri(out, isa::op::movi, r, static_cast<i32>(v));
    } else if (m == "mov") {
      isa::emit_reg(out, isa::op::mov_rr, reg(2), reg(1));
    } else if (m == "add") {
      isa::emit_reg(out, isa::op::add_rr, reg(2), reg(1));
    } else if (m == "xor") {
      isa::emit_reg(out, isa::op::xor_rr, reg(2), reg(1));
    } else if (m == "ldm") {
      isa::emit_reg(out, isa::op::ld_mem, reg(2), reg(1));
    } else if (m == "stm") {
      isa::emit_reg(out, isa::op::st_mem, reg(2), reg(1));
    } else if (m == "push") {
      isa::emit_reg(out, isa::op::push, reg(1));
    } else if (m == "pop") {
      isa::emit_reg(out, isa::op::pop, reg(1));
    } else if (m == "xorsp") {
      isa::emit_reg(out, isa::op::xor_sp, reg(1));
    } else if (m == "movsp") {
      isa::emit_reg(out, isa::op::mov_sp, reg(1));
    } else {
      err(line_no, "unknown mnemonic '" + m + "'");
    }
  }

  void finish() {
    if (!have_name_) throw asm_error("missing .module directive");

    for (const auto& [name, idx] : symbols_) {
      if (!defined_[name])
        throw asm_error("undefined reference to '" + name + "'");
      (void)idx;
    }

    for (const fixup& f : fixups_) {
      auto it = symbols_.find(f.label);
      if (it == symbols_.end())
        err(f.line_no, "undefined label '" + f.label + "'");
      const auto& sym = b_.raw().symbols[it->second];
      if (sym.section != f.section)
        err(f.line_no, "label '" + f.label + "' is not in this section");
      const i64 d = static_cast<i64>(sym.offset) -
                    static_cast<i64>(f.field_off + 4);
      if (d < INT32_MIN || d > INT32_MAX)
        err(f.line_no, "label displacement out of range");
      const i32 d32 = static_cast<i32>(d);
      std::memcpy(b_.bytes(f.section).data() + f.field_off, &d32, 4);
    }

    // References assembled before their target's definition defaulted to
    // the stable table; fix the kind now that locality is known.
    for (auto& rel : b_.raw().relocations) {
      if (rel.kind != modfmt::reloc_kind::got_local &&
          rel.kind != modfmt::reloc_kind::got_fixed)
        continue;
      const auto& sym = b_.raw().symbols[rel.target];
      if (sym.name == modfmt::kKeySymbol ||
          sym.bind == modfmt::binding::imported)
        continue;
      const auto& sec = b_.raw().sections[sym.section];
      rel.kind = sec.where == modfmt::part::movable
                     ? modfmt::reloc_kind::got_local
                     : modfmt::reloc_kind::got_fixed;
    }

    for (const std::string& name : export_requests_) {
      auto it = symbols_.find(name);
      if (it == symbols_.end())
        throw asm_error(".export of unknown symbol '" + name + "'");
      b_.raw().symbols[it->second].bind = modfmt::binding::exported;
      b_.add_export(name);
    }
  }
};

inline modfmt::module_image assemble(const std::string& source) {
  return assembler{}.run(source);
}

}  // namespace rerand::textasm
