#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace rerand {

using u8 = std::uint8_t;
using u16 = std::uint16_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;
using i32 = std::int32_t;
using i64 = std::int64_t;

/// Base class for all contract-violation errors thrown by the runtime.
/// Faults observed during VM execution are returned as values, not thrown;
/// see exec.hpp.
class error : public std::runtime_error {
 public:
  error(std::string code, const std::string& what)
      : std::runtime_error(code + ": " + what), code_(std::move(code)) {}

  /// Stable machine-readable identifier, e.g. "OverlapError".
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define RERAND_DEFINE_ERROR(name)                        \
  class name : public error {                            \
   public:                                               \
    explicit name(const std::string& what)               \
        : error(#name, what) {}                          \
  }

RERAND_DEFINE_ERROR(overlap_error);
RERAND_DEFINE_ERROR(wx_violation);
RERAND_DEFINE_ERROR(alignment_error);
RERAND_DEFINE_ERROR(not_mapped);
RERAND_DEFINE_ERROR(validation_error);
RERAND_DEFINE_ERROR(malformed_image);
RERAND_DEFINE_ERROR(reloc_overflow);
RERAND_DEFINE_ERROR(unresolved_import);
RERAND_DEFINE_ERROR(placement_exhausted);
RERAND_DEFINE_ERROR(duplicate_symbol);
RERAND_DEFINE_ERROR(unregistered_worker);
RERAND_DEFINE_ERROR(double_release);
RERAND_DEFINE_ERROR(foreign_stack);
RERAND_DEFINE_ERROR(double_return);
RERAND_DEFINE_ERROR(out_of_memory);
RERAND_DEFINE_ERROR(already_running);
RERAND_DEFINE_ERROR(not_running);
RERAND_DEFINE_ERROR(invalid_model);

#undef RERAND_DEFINE_ERROR

/// 64-bit FNV-1a. Used to expose key digests without exposing keys.
inline u64 fnv1a64(const void* data, std::size_t len) noexcept {
  const auto* p = static_cast<const unsigned char*>(data);
  u64 h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline u64 fnv1a64(u64 v) noexcept { return fnv1a64(&v, sizeof v); }

/// Deterministic RNG handle shared by placement, key rotation and the
/// attack simulators. Not thread-safe; callers serialize.
class rng {
 public:
  explicit rng(u64 seed) : gen_(seed) {}

  u64 next_u64() { return gen_(); }

  /// Uniform value in [0, bound). bound > 0.
  u64 next_below(u64 bound) {
    return std::uniform_int_distribution<u64>(0, bound - 1)(gen_);
  }

  std::mt19937_64& engine() noexcept { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace rerand
