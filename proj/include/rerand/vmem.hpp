#pragma once

/// \file
/// Sparse 64-bit virtual address space over shared physical frames.
///
/// The page table is a flat hash map keyed by virtual page number; the
/// usable address width is configurable (48 bits by default) and the
/// space is assumed to be very sparse, so no radix levels are needed.
/// Frames are reference counted: mapping the same frame at two virtual
/// ranges aliases the same bytes, and a frame is released when the last
/// mapping (or explicit pin) drops. Permission faults and unmapped
/// accesses are returned as values so callers can observe and count them.

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <unordered_map>
#include <vector>

#include "rerand/util.hpp"

namespace rerand::vmem {

inline constexpr u64 kPageShift = 12;
inline constexpr u64 kPageSize = u64{1} << kPageShift;  // 4096

enum class perm : u8 {
  none = 0,
  r = 1,
  w = 2,
  x = 4,
};

inline constexpr perm operator|(perm a, perm b) {
  return static_cast<perm>(static_cast<u8>(a) | static_cast<u8>(b));
}
inline constexpr bool has(perm set, perm bit) {
  return (static_cast<u8>(set) & static_cast<u8>(bit)) != 0;
}

inline constexpr perm kRead = perm::r;
inline constexpr perm kReadWrite = perm::r | perm::w;
inline constexpr perm kReadExec = perm::r | perm::x;

enum class access_kind : u8 { read, write, fetch };

inline const char* to_string(access_kind k) {
  switch (k) {
    case access_kind::read: return "read";
    case access_kind::write: return "write";
    case access_kind::fetch: return "fetch";
  }
  return "?";
}

/// A failed translation or permission check. This is the signal the VM
/// and the attack simulator treat as a crash.
struct fault {
  u64 vaddr = 0;
  access_kind kind = access_kind::read;
};

/// Value-or-fault result for space accesses.
template <typename T>
class vm_result {
 public:
  vm_result(T v) : value_(std::move(v)) {}            // NOLINT(google-explicit-constructor)
  vm_result(struct fault f) : fault_(f) {}            // NOLINT(google-explicit-constructor)

  bool ok() const { return !fault_.has_value(); }
  explicit operator bool() const { return ok(); }
  const T& operator*() const { return value_; }
  T& operator*() { return value_; }
  const struct fault& fault() const { return *fault_; }

 private:
  T value_{};
  std::optional<struct fault> fault_;
};

using vm_status = std::optional<fault>;  // nullopt == success

/// A contiguous mapped range. Value type; holds the frame sequence the
/// range was mapped with so aliases and unmaps can be validated.
struct region {
  u64 base = 0;
  u64 len = 0;
  std::vector<u64> frames;
  perm perms = perm::none;

  u64 end() const { return base + len; }
  u64 page_count() const { return len >> kPageShift; }
};

class address_space;

/// Keeps one frame alive independently of any mapping. Returned by
/// frame swaps so a retired generation's tables survive until their
/// reclamation callback runs.
class frame_pin {
 public:
  frame_pin() = default;
  frame_pin(address_space* space, u64 frame) : space_(space), frame_(frame) {}
  frame_pin(frame_pin&& o) noexcept : space_(o.space_), frame_(o.frame_) {
    o.space_ = nullptr;
  }
  frame_pin& operator=(frame_pin&& o) noexcept {
    release();
    space_ = o.space_;
    frame_ = o.frame_;
    o.space_ = nullptr;
    return *this;
  }
  frame_pin(const frame_pin&) = delete;
  frame_pin& operator=(const frame_pin&) = delete;
  ~frame_pin() { release(); }

  u64 frame() const { return frame_; }
  inline void release();

 private:
  address_space* space_ = nullptr;
  u64 frame_ = 0;
};

class address_space {
 public:
  explicit address_space(unsigned addr_bits = 48) : addr_bits_(addr_bits) {
    if (addr_bits_ < kPageShift + 1 || addr_bits_ > 64)
      throw alignment_error("address width must be in [13, 64]");
  }

  unsigned addr_bits() const { return addr_bits_; }

  /// Exclusive upper bound of the usable address range.
  u64 limit() const {
    return addr_bits_ == 64 ? ~u64{0} : (u64{1} << addr_bits_);
  }

  // -- frame management -----------------------------------------------------

  /// Allocates a zero-filled frame with no mappings. The caller is
  /// expected to map or pin it; an unreferenced frame id stays live in
  /// the frame table until first mapped and later released.
  u64 create_frame() {
    std::unique_lock lk(mu_);
    u64 id = next_frame_++;
    frames_.emplace(id, frame_data{});
    ++frame_allocs_;
    return id;
  }

  /// Host-side write into a frame's backing bytes, bypassing the page
  /// table. Used while staging content that is not yet (or no longer)
  /// protected; VM-visible stores must go through write().
  void poke_frame(u64 frame, u64 offset, const void* src, u64 len) {
    std::shared_lock lk(mu_);
    frame_data& f = frame_ref(frame);
    if (offset + len > kPageSize) throw alignment_error("poke beyond frame");
    std::memcpy(f.bytes.data() + offset, src, len);
  }

  void peek_frame(u64 frame, u64 offset, void* dst, u64 len) const {
    std::shared_lock lk(mu_);
    const frame_data& f = frame_ref(frame);
    if (offset + len > kPageSize) throw alignment_error("peek beyond frame");
    std::memcpy(dst, f.bytes.data() + offset, len);
  }

  /// Total frames ever allocated. Lets tests account for zero-copy:
  /// a re-randomization cycle may only grow this by the local GOT pages.
  u64 frame_alloc_count() const {
    std::shared_lock lk(mu_);
    return frame_allocs_;
  }

  /// Frames currently live (mapped or pinned).
  u64 live_frame_count() const {
    std::shared_lock lk(mu_);
    return frames_.size();
  }

  /// Count of remap events (aliases created plus in-place frame swaps).
  u64 remap_event_count() const {
    std::shared_lock lk(mu_);
    return remap_events_;
  }

  // -- mapping operations ---------------------------------------------------

  region map_region(u64 base, const std::vector<u64>& frames, perm perms) {
    std::unique_lock lk(mu_);
    check_wx(perms);
    check_range(base, frames.size() * kPageSize);
    const u64 vpn0 = base >> kPageShift;
    for (u64 i = 0; i < frames.size(); ++i)
      if (pages_.count(vpn0 + i))
        throw overlap_error("page already mapped at " + hex(base + i * kPageSize));
    for (u64 i = 0; i < frames.size(); ++i) {
      frame_data& f = frame_ref(frames[i]);
      pages_[vpn0 + i] = page_entry{frames[i], perms};
      ++f.refs;
    }
    return region{base, frames.size() * kPageSize, frames, perms};
  }

  /// Creates a second mapping of `old_region` at `new_base` over the
  /// frames currently backing it. No bytes are copied and no frames are
  /// allocated; the old mapping stays valid (its removal is deferred to
  /// the reclamation domain).
  region remap_alias(const region& old_region, u64 new_base) {
    std::unique_lock lk(mu_);
    check_range(new_base, old_region.len);
    const u64 old_vpn0 = old_region.base >> kPageShift;
    const u64 new_vpn0 = new_base >> kPageShift;
    const u64 n = old_region.page_count();
    std::vector<u64> frames;
    frames.reserve(n);
    for (u64 i = 0; i < n; ++i) {
      auto it = pages_.find(old_vpn0 + i);
      if (it == pages_.end()) throw not_mapped("alias source not mapped");
      frames.push_back(it->second.frame);
    }
    for (u64 i = 0; i < n; ++i)
      if (pages_.count(new_vpn0 + i))
        throw overlap_error("alias target occupied at " +
                            hex(new_base + i * kPageSize));
    for (u64 i = 0; i < n; ++i) {
      pages_[new_vpn0 + i] = page_entry{frames[i], old_region.perms};
      ++frame_ref(frames[i]).refs;
    }
    ++remap_events_;
    return region{new_base, old_region.len, std::move(frames), old_region.perms};
  }

  void protect(region& r, perm perms) {
    std::unique_lock lk(mu_);
    check_wx(perms);
    const u64 vpn0 = r.base >> kPageShift;
    for (u64 i = 0; i < r.page_count(); ++i) {
      auto it = pages_.find(vpn0 + i);
      if (it == pages_.end()) throw not_mapped("protect of unmapped page");
      it->second.perms = perms;
    }
    r.perms = perms;
  }

  void unmap_region(const region& r) {
    std::unique_lock lk(mu_);
    const u64 vpn0 = r.base >> kPageShift;
    // Validate first so a double unmap mutates nothing.
    for (u64 i = 0; i < r.page_count(); ++i)
      if (!pages_.count(vpn0 + i)) throw not_mapped("region not mapped");
    for (u64 i = 0; i < r.page_count(); ++i) {
      auto it = pages_.find(vpn0 + i);
      drop_frame_ref(it->second.frame);
      pages_.erase(it);
    }
  }

  /// Atomically points the page holding `vaddr` at `new_frame`,
  /// preserving permissions. The displaced frame is returned pinned so
  /// the caller controls when it is released.
  frame_pin swap_frame(u64 vaddr, u64 new_frame) {
    std::unique_lock lk(mu_);
    auto it = pages_.find(vaddr >> kPageShift);
    if (it == pages_.end()) throw not_mapped("swap of unmapped page");
    u64 old_frame = it->second.frame;
    frame_ref(old_frame).pins++;  // pin before dropping the mapping ref
    ++frame_ref(new_frame).refs;
    it->second.frame = new_frame;
    drop_frame_ref(old_frame);
    ++remap_events_;
    return frame_pin(this, old_frame);
  }

  // -- access ---------------------------------------------------------------

  vm_status read(u64 vaddr, void* dst, u64 len) const {
    return walk(vaddr, len, access_kind::read,
                [&](const frame_data& f, u64 off, u64 n, u64 pos) {
                  std::memcpy(static_cast<u8*>(dst) + pos, f.bytes.data() + off, n);
                });
  }

  vm_status write(u64 vaddr, const void* src, u64 len) {
    return walk(vaddr, len, access_kind::write,
                [&](const frame_data& f, u64 off, u64 n, u64 pos) {
                  std::memcpy(const_cast<u8*>(f.bytes.data()) + off,
                              static_cast<const u8*>(src) + pos, n);
                });
  }

  /// Permission walk for an instruction fetch; no bytes are returned.
  vm_status check_fetch(u64 vaddr, u64 len) const {
    return walk(vaddr, len, access_kind::fetch,
                [](const frame_data&, u64, u64, u64) {});
  }

  /// Fetches instruction bytes (requires X on every touched page).
  vm_status fetch(u64 vaddr, void* dst, u64 len) const {
    return walk(vaddr, len, access_kind::fetch,
                [&](const frame_data& f, u64 off, u64 n, u64 pos) {
                  std::memcpy(static_cast<u8*>(dst) + pos, f.bytes.data() + off, n);
                });
  }

  vm_result<u64> read_u64(u64 vaddr) const {
    u64 v = 0;
    if (auto f = read(vaddr, &v, 8)) return *f;
    return v;
  }

  vm_status write_u64(u64 vaddr, u64 v) { return write(vaddr, &v, 8); }

  bool is_mapped(u64 vaddr) const {
    std::shared_lock lk(mu_);
    return pages_.count(vaddr >> kPageShift) != 0;
  }

  std::optional<perm> perms_of(u64 vaddr) const {
    std::shared_lock lk(mu_);
    auto it = pages_.find(vaddr >> kPageShift);
    if (it == pages_.end()) return std::nullopt;
    return it->second.perms;
  }

  std::optional<u64> frame_of(u64 vaddr) const {
    std::shared_lock lk(mu_);
    auto it = pages_.find(vaddr >> kPageShift);
    if (it == pages_.end()) return std::nullopt;
    return it->second.frame;
  }

  u64 mapped_page_count() const {
    std::shared_lock lk(mu_);
    return pages_.size();
  }

  /// True if `pages` consecutive pages starting at `base` are all free
  /// and inside the usable range. Placement probes use this.
  bool range_free(u64 base, u64 pages) const {
    std::shared_lock lk(mu_);
    if (base % kPageSize != 0) return false;
    if (pages * kPageSize > limit() - base) return false;
    const u64 vpn0 = base >> kPageShift;
    for (u64 i = 0; i < pages; ++i)
      if (pages_.count(vpn0 + i)) return false;
    return true;
  }

 private:
  friend class frame_pin;

  struct frame_data {
    std::vector<u8> bytes = std::vector<u8>(kPageSize, 0);
    u32 refs = 0;
    u32 pins = 0;
  };

  struct page_entry {
    u64 frame;
    perm perms;
  };

  static std::string hex(u64 v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
    return buf;
  }

  static void check_wx(perm p) {
    if (has(p, perm::w) && has(p, perm::x))
      throw wx_violation("page may not be writable and executable");
  }

  void check_range(u64 base, u64 len) const {
    if (base % kPageSize != 0) throw alignment_error("base not page aligned");
    if (len == 0 || len % kPageSize != 0)
      throw alignment_error("length not a page multiple");
    if (base > limit() || len > limit() - base)
      throw alignment_error("range outside configured address width");
  }

  frame_data& frame_ref(u64 id) {
    auto it = frames_.find(id);
    if (it == frames_.end()) throw not_mapped("unknown frame");
    return it->second;
  }
  const frame_data& frame_ref(u64 id) const {
    auto it = frames_.find(id);
    if (it == frames_.end()) throw not_mapped("unknown frame");
    return it->second;
  }

  void drop_frame_ref(u64 id) {
    auto it = frames_.find(id);
    if (it == frames_.end()) return;
    if (--it->second.refs == 0 && it->second.pins == 0) frames_.erase(it);
  }

  void unpin_frame(u64 id) {
    std::unique_lock lk(mu_);
    auto it = frames_.find(id);
    if (it == frames_.end()) return;
    if (--it->second.pins == 0 && it->second.refs == 0) frames_.erase(it);
  }

  static bool allows(perm p, access_kind k) {
    switch (k) {
      case access_kind::read: return has(p, perm::r);
      case access_kind::write: return has(p, perm::w);
      case access_kind::fetch: return has(p, perm::x);
    }
    return false;
  }

  /// Walks [vaddr, vaddr+len), checking the permission for `kind` and
  /// invoking `fn(frame, byte offset, chunk len, position)` per page.
  /// Page-boundary crossings are handled; the first failing page wins.
  template <typename Fn>
  vm_status walk(u64 vaddr, u64 len, access_kind kind, Fn&& fn) const {
    std::shared_lock lk(mu_);
    u64 pos = 0;
    while (pos < len) {
      const u64 a = vaddr + pos;
      if (a < vaddr || a >= limit()) return fault{a, kind};
      auto it = pages_.find(a >> kPageShift);
      if (it == pages_.end() || !allows(it->second.perms, kind))
        return fault{a, kind};
      const u64 off = a & (kPageSize - 1);
      const u64 n = std::min(len - pos, kPageSize - off);
      fn(frame_ref(it->second.frame), off, n, pos);
      pos += n;
    }
    return std::nullopt;
  }

  mutable std::shared_mutex mu_;
  unsigned addr_bits_;
  std::unordered_map<u64, page_entry> pages_;
  std::unordered_map<u64, frame_data> frames_;
  u64 next_frame_ = 1;
  u64 frame_allocs_ = 0;
  u64 remap_events_ = 0;
};

inline void frame_pin::release() {
  if (space_ != nullptr) {
    space_->unpin_frame(frame_);
    space_ = nullptr;
  }
}

}  // namespace rerand::vmem
