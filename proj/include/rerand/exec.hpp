#pragma once

/// \file
/// A small deterministic interpreter for the instruction set in
/// isa.hpp, operating on an address_space. Everything that can go
/// wrong at runtime is reported as a result value, never thrown:
/// permission and mapping faults, fuel exhaustion, stack escapes,
/// undecodable bytes. Thrown exceptions are reserved for host-side
/// misuse (an unregistered worker, say).
///
/// Conventions executed here:
///   * calls push the address of the next instruction; RET and SYSRET
///     pop and jump. Popping the host sentinel ends the run with r0 as
///     the return value. Up to six arguments arrive in r0..r5.
///   * STACK_SWAP parks the current sp, takes a stack from the
///     per-worker pool and points sp at its top; STACK_RESTORE gives
///     the stack back and unparks. MR_START / MR_FINISH enter and
///     leave a reclamation guard for the running worker.
///   * on an abnormal stop the interpreter unwinds anything a wrapper
///     left half-done: swapped stacks go back to the pool and guard
///     depth is restored, so a fault inside a call cannot leak a pin.

#include <array>
#include <functional>
#include <optional>
#include <vector>

#include "rerand/isa.hpp"
#include "rerand/smr.hpp"
#include "rerand/stackpool.hpp"
#include "rerand/util.hpp"
#include "rerand/vmem.hpp"

namespace rerand::exec {

/// Popping this as a return address ends the run normally.
inline constexpr u64 kHostReturn = 0xFFFFFFFFFFFFFF00ULL;

/// Return-address encryption: a keyed involution.
inline constexpr u64 encrypt_ret(u64 ret, u64 key) { return ret ^ key; }
inline constexpr u64 decrypt_ret(u64 enc, u64 key) { return enc ^ key; }

struct cpu {
  u64 pc = 0;
  u64 sp = 0;
  std::array<u64, isa::kRegCount> regs{};
  smr::worker_id worker = 0;
};

enum class stop_kind : u8 {
  returned,
  halted,
  access_fault,
  fuel_exhausted,
  stack_overflow,
  reentry_overflow,
  bad_instruction,
};

inline const char* to_string(stop_kind k) {
  switch (k) {
    case stop_kind::returned: return "returned";
    case stop_kind::halted: return "halted";
    case stop_kind::access_fault: return "access_fault";
    case stop_kind::fuel_exhausted: return "fuel_exhausted";
    case stop_kind::stack_overflow: return "stack_overflow";
    case stop_kind::reentry_overflow: return "reentry_overflow";
    case stop_kind::bad_instruction: return "bad_instruction";
  }
  return "?";
}

struct run_metrics {
  u64 instructions = 0;
  u64 stub_transits = 0;         // executed indirect jumps (stub bodies)
  u64 indirect_calls = 0;        // executed table-mediated calls
  std::vector<u64> swap_bases;   // pool stacks seen, in swap order
};

struct run_result {
  stop_kind kind = stop_kind::returned;
  u64 value = 0;  // r0 at stop
  std::optional<vmem::fault> fault;
  u64 pc = 0;  // address of the instruction that stopped the run
  u64 fuel_left = 0;
  std::array<u64, isa::kRegCount> regs{};
  run_metrics metrics;

  bool ok() const { return kind == stop_kind::returned; }
};

/// Pre-execution observer: the instruction at cpu.pc is about to run.
using step_hook = std::function<void(const cpu&, const isa::insn&)>;

struct run_request {
  u64 entry = 0;
  std::array<u64, 6> args{};
  u64 fuel = 1'000'000;
  smr::worker_id worker = 0;
  // Host stack the run starts on; 0/0 disables escape checking (raw
  // attack runs that point sp anywhere).
  u64 stack_lo = 0;
  u64 stack_top = 0;
  u64 max_swap_depth = 64;
  step_hook hook;
};

class engine {
 public:
  engine(vmem::address_space& space, smr::domain* dom = nullptr,
         stackpool::pool* pool = nullptr)
      : space_(space), dom_(dom), pool_(pool) {}

  run_result run(const run_request& rq) {
    cpu c;
    c.worker = rq.worker;
    for (u64 i = 0; i < rq.args.size(); ++i) c.regs[i] = rq.args[i];
    c.sp = rq.stack_top;
    c.pc = rq.entry;

    struct parked {
      u64 sp, lo, top;
      stackpool::stack_ref ref;  // engaged for pool stacks only
    };
    std::vector<parked> swaps;
    std::vector<smr::guard> guards;
    u64 lo = rq.stack_lo, top = rq.stack_top;
    u64 fuel = rq.fuel;
    run_result res;

    auto finish = [&](stop_kind k) {
      // Put back anything a half-run wrapper still holds.
      while (!swaps.empty()) {
        if (swaps.back().ref && pool_)
          pool_->return_old_stack(c.worker, swaps.back().ref);
        swaps.pop_back();
      }
      while (!guards.empty()) {
        dom_->mr_finish(guards.back());
        guards.pop_back();
      }
      res.kind = k;
      res.value = c.regs[0];
      res.pc = c.pc;
      res.fuel_left = fuel;
      res.regs = c.regs;
      return res;
    };
    auto faulted = [&](const vmem::fault& f) {
      res.fault = f;
      return finish(stop_kind::access_fault);
    };
    auto sp_ok = [&]() { return lo == 0 || (c.sp >= lo && c.sp <= top); };

    // Seed the frame that makes the final RET land back in the host.
    if (!push(c, kHostReturn)) {
      res.fault = vmem::fault{c.sp - 8, vmem::access_kind::write};
      return finish(stop_kind::access_fault);
    }
    if (!sp_ok()) return finish(stop_kind::stack_overflow);

    u8 buf[isa::kMaxInsnLen];
    while (true) {
      if (fuel == 0) return finish(stop_kind::fuel_exhausted);
      --fuel;

      if (auto f = space_.check_fetch(c.pc, 1)) return faulted(*f);
      if (auto f = space_.read(c.pc, buf, 1)) return faulted(*f);
      const u64 len = isa::length_of(buf[0]);
      if (len == 0) return finish(stop_kind::bad_instruction);
      if (len > 1) {
        if (auto f = space_.check_fetch(c.pc, len)) return faulted(*f);
        if (auto f = space_.read(c.pc + 1, buf + 1, len - 1))
          return faulted(*f);
      }
      const auto in = isa::decode(buf, len);
      if (!in) return finish(stop_kind::bad_instruction);
      if (rq.hook) rq.hook(c, *in);
      ++res.metrics.instructions;

      const u64 next = c.pc + in->len;
      const u64 ref_point = next + static_cast<i64>(in->disp);
      using isa::op;
      switch (in->opcode) {
        case op::halt:
          return finish(stop_kind::halted);
        case op::nop:
          c.pc = next;
          break;
        case op::ret:
        case op::sysret: {
          auto v = space_.read_u64(c.sp);
          if (!v.ok()) return faulted(v.fault());
          c.sp += 8;
          if (!sp_ok()) return finish(stop_kind::stack_overflow);
          if (*v == kHostReturn) return finish(stop_kind::returned);
          c.pc = *v;
          break;
        }
        case op::call_pc32:
          if (!push(c, next)) {
            res.fault = vmem::fault{c.sp - 8, vmem::access_kind::write};
            return finish(stop_kind::access_fault);
          }
          if (!sp_ok()) return finish(stop_kind::stack_overflow);
          c.pc = ref_point;
          break;
        case op::jmp_pc32:
          c.pc = ref_point;
          break;
        case op::call_ind_got: {
          auto t = space_.read_u64(ref_point);
          if (!t.ok()) return faulted(t.fault());
          if (!push(c, next)) {
            res.fault = vmem::fault{c.sp - 8, vmem::access_kind::write};
            return finish(stop_kind::access_fault);
          }
          if (!sp_ok()) return finish(stop_kind::stack_overflow);
          ++res.metrics.indirect_calls;
          c.pc = *t;
          break;
        }
        case op::jmp_ind_got: {
          auto t = space_.read_u64(ref_point);
          if (!t.ok()) return faulted(t.fault());
          ++res.metrics.stub_transits;
          c.pc = *t;
          break;
        }
        case op::push:
          if (!push(c, c.regs[in->a])) {
            res.fault = vmem::fault{c.sp - 8, vmem::access_kind::write};
            return finish(stop_kind::access_fault);
          }
          if (!sp_ok()) return finish(stop_kind::stack_overflow);
          c.pc = next;
          break;
        case op::pop: {
          auto v = space_.read_u64(c.sp);
          if (!v.ok()) return faulted(v.fault());
          c.regs[in->a] = *v;
          c.sp += 8;
          if (!sp_ok()) return finish(stop_kind::stack_overflow);
          c.pc = next;
          break;
        }
        case op::mov_rr:
          c.regs[in->a] = c.regs[in->b];
          c.pc = next;
          break;
        case op::add_rr:
          c.regs[in->a] += c.regs[in->b];
          c.pc = next;
          break;
        case op::xor_rr:
          c.regs[in->a] ^= c.regs[in->b];
          c.pc = next;
          break;
        case op::xor_sp: {
          auto v = space_.read_u64(c.sp);
          if (!v.ok()) return faulted(v.fault());
          if (auto f = space_.write_u64(c.sp, *v ^ c.regs[in->a]))
            return faulted(*f);
          c.pc = next;
          break;
        }
        case op::mov_sp:
          c.regs[in->a] = c.sp;
          c.pc = next;
          break;
        case op::ld_mem: {
          auto v = space_.read_u64(c.regs[in->b]);
          if (!v.ok()) return faulted(v.fault());
          c.regs[in->a] = *v;
          c.pc = next;
          break;
        }
        case op::st_mem:
          if (auto f = space_.write_u64(c.regs[in->a], c.regs[in->b]))
            return faulted(*f);
          c.pc = next;
          break;
        case op::movi:
          c.regs[in->a] = static_cast<u64>(static_cast<i64>(in->disp));
          c.pc = next;
          break;
        case op::ld_got: {
          auto v = space_.read_u64(ref_point);
          if (!v.ok()) return faulted(v.fault());
          c.regs[in->a] = *v;
          c.pc = next;
          break;
        }
        case op::lea_pc32:
          c.regs[in->a] = ref_point;
          c.pc = next;
          break;
        case op::mr_start:
          if (!dom_) throw invalid_model("no reclamation domain attached");
          guards.push_back(dom_->mr_start(c.worker));
          c.pc = next;
          break;
        case op::mr_finish:
          if (!dom_) throw invalid_model("no reclamation domain attached");
          if (guards.empty())
            throw double_release("guard exit without a matching entry");
          dom_->mr_finish(guards.back());
          guards.pop_back();
          c.pc = next;
          break;
        case op::stack_swap: {
          if (!pool_) throw invalid_model("no stack pool attached");
          if (swaps.size() >= rq.max_swap_depth)
            return finish(stop_kind::reentry_overflow);
          stackpool::stack_ref ref;
          try {
            ref = pool_->get_new_stack(c.worker);
          } catch (const out_of_memory&) {
            return finish(stop_kind::reentry_overflow);
          }
          swaps.push_back(parked{c.sp, lo, top, ref});
          lo = ref.base;
          top = ref.top();
          c.sp = top;
          res.metrics.swap_bases.push_back(ref.base);
          c.pc = next;
          break;
        }
        case op::stack_restore: {
          if (!pool_) throw invalid_model("no stack pool attached");
          if (swaps.empty())
            throw double_release("stack restore without a matching swap");
          auto& p = swaps.back();
          pool_->return_old_stack(c.worker, p.ref);
          c.sp = p.sp;
          lo = p.lo;
          top = p.top;
          swaps.pop_back();
          c.pc = next;
          break;
        }
      }
    }
  }

 private:
  bool push(cpu& c, u64 v) {
    if (space_.write_u64(c.sp - 8, v)) return false;
    c.sp -= 8;
    return true;
  }

  vmem::address_space& space_;
  smr::domain* dom_;
  stackpool::pool* pool_;
};

}  // namespace rerand::exec
