#pragma once

/// \file
/// Bytecode instruction set for the module runtime.
///
/// Variable-length encoding, one opcode byte followed by an operand
/// region. Decoding length is determined by the opcode alone:
///
///   1 byte   opcode only                 HALT NOP RET SYSRET
///                                        MR_START MR_FINISH
///                                        STACK_SWAP STACK_RESTORE
///   5 bytes  opcode + i32                CALL_PC32 JMP_PC32
///            opcode + regs + pad         PUSH POP MOV ADD XOR ...
///   6 bytes  opcode + pad + i32          CALL_IND_GOT JMP_IND_GOT
///   9 bytes  opcode + reg + pad3 + i32   MOVI LD_GOT LEA_PC32
///
/// The indirect-through-table call is deliberately one byte longer
/// than the direct call (as on x86, FF /2 vs E8), which is what lets
/// the load-time patcher rewrite it to a direct call plus one NOP.
///
/// All 32-bit displacements are signed and relative to the end of the
/// instruction: target = address_of_insn + length + disp. The same rule
/// applies to table-slot displacements.

#include <cstring>
#include <optional>
#include <vector>

#include "rerand/util.hpp"

namespace rerand::isa {

/// r0..r5 carry arguments and r0 the return value; r6..r10 are temps;
/// r11 is the scratch register the epilogue clears.
inline constexpr unsigned kRegCount = 12;
inline constexpr u8 kScratchReg = 11;
inline constexpr u64 kMaxInsnLen = 9;

enum class op : u8 {
  // 1-byte forms
  halt = 0x00,
  nop = 0x01,
  ret = 0x02,
  sysret = 0x03,        // return control to the host
  mr_start = 0x04,      // enter a reclamation guard
  mr_finish = 0x05,     // leave a reclamation guard
  stack_swap = 0x06,    // switch to a pool stack
  stack_restore = 0x07, // switch back and return the pool stack

  // 5-byte forms
  call_pc32 = 0x10,     // push return address; jump relative
  jmp_pc32 = 0x11,
  push = 0x14,          // [reg, pad3]
  pop = 0x15,           // [reg, pad3]
  mov_rr = 0x16,        // [dst, src, pad2]
  add_rr = 0x17,
  xor_rr = 0x18,
  xor_sp = 0x19,        // [reg, pad3]  *(u64*)sp ^= reg
  mov_sp = 0x1a,        // [reg, pad3]  reg = sp
  ld_mem = 0x1b,        // [dst, src, pad2]  dst = *(u64*)src
  st_mem = 0x1c,        // [dst, src, pad2]  *(u64*)dst = src

  // 6-byte forms: [pad, i32] — slot address = end of insn + disp
  call_ind_got = 0x12,  // push return address; jump to *slot
  jmp_ind_got = 0x13,   // jump to *slot

  // 9-byte forms: [reg, pad3, i32]
  movi = 0x20,          // reg = sign-extended imm32
  ld_got = 0x21,        // reg = *(end of insn + disp)
  lea_pc32 = 0x22,      // reg = end of insn + disp
};

/// 0 for an invalid opcode byte.
inline constexpr u64 length_of(u8 opcode) {
  switch (static_cast<op>(opcode)) {
    case op::halt:
    case op::nop:
    case op::ret:
    case op::sysret:
    case op::mr_start:
    case op::mr_finish:
    case op::stack_swap:
    case op::stack_restore:
      return 1;
    case op::call_pc32:
    case op::jmp_pc32:
    case op::push:
    case op::pop:
    case op::mov_rr:
    case op::add_rr:
    case op::xor_rr:
    case op::xor_sp:
    case op::mov_sp:
    case op::ld_mem:
    case op::st_mem:
      return 5;
    case op::call_ind_got:
    case op::jmp_ind_got:
      return 6;
    case op::movi:
    case op::ld_got:
    case op::lea_pc32:
      return 9;
  }
  return 0;
}

/// Byte offset of the i32 displacement/immediate field, 0 if none.
/// For every form with a disp the field ends exactly at the end of the
/// instruction, so `insn_addr + length + disp` and `disp_site + 4 + disp`
/// agree.
inline constexpr u64 disp_offset(op o) {
  switch (o) {
    case op::call_pc32:
    case op::jmp_pc32:
      return 1;
    case op::call_ind_got:
    case op::jmp_ind_got:
      return 2;
    case op::movi:
    case op::ld_got:
    case op::lea_pc32:
      return 5;
    default:
      return 0;
  }
}

inline const char* name_of(op o) {
  switch (o) {
    case op::halt: return "halt";
    case op::nop: return "nop";
    case op::ret: return "ret";
    case op::sysret: return "sysret";
    case op::mr_start: return "mr_start";
    case op::mr_finish: return "mr_finish";
    case op::stack_swap: return "stack_swap";
    case op::stack_restore: return "stack_restore";
    case op::call_pc32: return "call";
    case op::jmp_pc32: return "jmp";
    case op::call_ind_got: return "callind";
    case op::jmp_ind_got: return "jmpind";
    case op::push: return "push";
    case op::pop: return "pop";
    case op::mov_rr: return "mov";
    case op::add_rr: return "add";
    case op::xor_rr: return "xor";
    case op::xor_sp: return "xorsp";
    case op::mov_sp: return "movsp";
    case op::ld_mem: return "ldm";
    case op::st_mem: return "stm";
    case op::movi: return "movi";
    case op::ld_got: return "ldgot";
    case op::lea_pc32: return "lea";
  }
  return "?";
}

/// Opcodes a backward gadget walk treats as gadget terminals: the
/// control transfers an attacker can steer or chain through.
inline constexpr bool is_terminal(op o) {
  return o == op::ret || o == op::jmp_ind_got || o == op::call_ind_got;
}

struct insn {
  op opcode{};
  u8 len = 0;
  u8 a = 0;     // first register field, when present
  u8 b = 0;     // second register field, when present
  i32 disp = 0; // displacement or immediate, when present
};

/// Decodes one instruction from `p` with `avail` bytes left. Returns
/// nullopt for an unknown opcode, a truncated encoding, or an operand
/// register out of range — the "does not decode cleanly" cases the
/// gadget scanner relies on. Pad bytes are not validated, as on real
/// hardware.
inline std::optional<insn> decode(const u8* p, u64 avail) {
  if (avail == 0) return std::nullopt;
  const u64 len = length_of(p[0]);
  if (len == 0 || len > avail) return std::nullopt;
  insn out;
  out.opcode = static_cast<op>(p[0]);
  out.len = static_cast<u8>(len);
  switch (out.opcode) {
    case op::push:
    case op::pop:
    case op::xor_sp:
    case op::mov_sp:
      out.a = p[1];
      if (out.a >= kRegCount) return std::nullopt;
      break;
    case op::mov_rr:
    case op::add_rr:
    case op::xor_rr:
    case op::ld_mem:
    case op::st_mem:
      out.a = p[1];
      out.b = p[2];
      if (out.a >= kRegCount || out.b >= kRegCount) return std::nullopt;
      break;
    case op::movi:
    case op::ld_got:
    case op::lea_pc32:
      out.a = p[1];
      if (out.a >= kRegCount) return std::nullopt;
      break;
    default:
      break;
  }
  if (const u64 off = disp_offset(out.opcode); off != 0)
    std::memcpy(&out.disp, p + off, 4);
  return out;
}

// -- encoding helpers ---------------------------------------------------

inline void put_i32(std::vector<u8>& out, i32 v) {
  u8 b[4];
  std::memcpy(b, &v, 4);
  out.insert(out.end(), b, b + 4);
}

inline void emit0(std::vector<u8>& out, op o) {
  out.push_back(static_cast<u8>(o));
}

inline void emit_pc32(std::vector<u8>& out, op o, i32 disp) {
  out.push_back(static_cast<u8>(o));
  put_i32(out, disp);
}

inline void emit_ind(std::vector<u8>& out, op o, i32 disp) {
  out.push_back(static_cast<u8>(o));
  out.push_back(0);
  put_i32(out, disp);
}

inline void emit_reg(std::vector<u8>& out, op o, u8 a, u8 b = 0) {
  out.push_back(static_cast<u8>(o));
  out.push_back(a);
  out.push_back(b);
  out.push_back(0);
  out.push_back(0);
}

inline void emit_ri(std::vector<u8>& out, op o, u8 reg, i32 disp) {
  out.push_back(static_cast<u8>(o));
  out.push_back(reg);
  out.push_back(0);
  out.push_back(0);
  out.push_back(0);
  put_i32(out, disp);
}

/// Computes the i32 stored at a displacement field so that the decoded
/// target equals `target` for an instruction at `insn_addr` of length
/// `len`. Throws if it does not fit in a signed 32-bit field.
inline i32 disp_for(u64 insn_addr, u64 len, u64 target) {
  const i64 d = static_cast<i64>(target) - static_cast<i64>(insn_addr + len);
  if (d < INT32_MIN || d > INT32_MAX)
    throw reloc_overflow("pc-relative displacement out of range");
  return static_cast<i32>(d);
}

}  // namespace rerand::isa
