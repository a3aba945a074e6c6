#pragma once

/// \file
/// Per-worker LIFO pools of execution stacks.
///
/// Each worker owns a lock-free list of ready stacks; wrapped calls pop
/// one on entry and push it back on exit, so consecutive calls reuse
/// hot stacks. The re-randomizer detaches every list with one atomic
/// exchange and retires the detached chain through the reclamation
/// domain — in-flight calls keep running on the stacks they hold and
/// the old pages are unmapped only after those calls drain.
///
/// Callers must hold a guard in the same reclamation domain around
/// get/return: the guard is what keeps a just-read list node alive if a
/// regeneration detaches it mid-pop. (Export wrappers satisfy this by
/// construction — they enter the guard before touching the pool.)

#include <atomic>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <unordered_map>

#include "rerand/smr.hpp"
#include "rerand/util.hpp"
#include "rerand/vmem.hpp"

namespace rerand::stackpool {

struct config {
  u64 stack_size = 16 * 1024;  // page multiple
  u32 prepopulate = 2;         // stacks mapped per worker up front
  u32 regen_prepopulate = 0;   // stacks in each freshly swapped-in list
  u64 place_retries = 64;
};

struct counters {
  u64 alloc = 0;
  u64 freed = 0;
  u64 delta() const { return alloc - freed; }
};

/// Handle to one stack held by a call. `top()` is the initial stack
/// pointer (stacks grow down).
struct stack_ref {
  u64 base = 0;
  u64 size = 0;
  void* node = nullptr;

  u64 top() const { return base + size; }
  explicit operator bool() const { return node != nullptr; }
};

class pool {
 public:
  pool(vmem::address_space& space, smr::domain& dom, u64 seed,
       config cfg = {})
      : space_(space), dom_(dom), rng_(seed), cfg_(cfg) {
    if (cfg_.stack_size == 0 || cfg_.stack_size % vmem::kPageSize != 0)
      throw alignment_error("stack size must be a page multiple");
  }

  ~pool() {
    dom_.collect();  // best effort; orderly shutdown drains first
    std::unique_lock lk(reg_mu_);
    for (auto& [w, pw] : lists_) {
      (void)w;
      release_chain(pw->head.exchange(nullptr, std::memory_order_acq_rel));
    }
  }

  pool(const pool&) = delete;
  pool& operator=(const pool&) = delete;

  void add_worker(smr::worker_id w) {
    std::unique_lock lk(reg_mu_);
    if (lists_.count(w)) throw overlap_error("worker already has a pool list");
    auto pw = std::make_unique<per_worker>();
    pw->head.store(build_chain(cfg_.prepopulate), std::memory_order_release);
    lists_.emplace(w, std::move(pw));
  }

  stack_ref get_new_stack(smr::worker_id w) {
    per_worker& pw = checked_list(w);
    node* h = pw.head.load(std::memory_order_acquire);
    while (h != nullptr) {
      if (pw.head.compare_exchange_weak(h, h->next,
                                        std::memory_order_acq_rel,
                                        std::memory_order_acquire)) {
        h->holder.store(w, std::memory_order_relaxed);
        return stack_ref{h->region.base, h->region.len, h};
      }
    }
    node* fresh = alloc_stack();  // pool empty: map one on demand
    fresh->holder.store(w, std::memory_order_relaxed);
    return stack_ref{fresh->region.base, fresh->region.len, fresh};
  }

  void return_old_stack(smr::worker_id w, const stack_ref& s) {
    per_worker& pw = checked_list(w);
    node* n = static_cast<node*>(s.node);
    if (n == nullptr) throw foreign_stack("null stack handle");
    const u32 holder = n->holder.load(std::memory_order_relaxed);
    if (holder == kPooled)
      throw double_return("stack already returned");
    if (holder != w)
      throw foreign_stack("stack belongs to worker " + std::to_string(holder));
    n->holder.store(kPooled, std::memory_order_relaxed);
    node* h = pw.head.load(std::memory_order_relaxed);
    do {
      n->next = h;
    } while (!pw.head.compare_exchange_weak(h, n, std::memory_order_release,
                                            std::memory_order_relaxed));
  }

  /// Swaps every worker's list for a fresh one and retires the old
  /// chains; their stacks are unmapped once current guards drain.
  /// Detached nodes are never re-linked, so pops cannot suffer ABA.
  void regenerate() {
    std::shared_lock lk(reg_mu_);
    for (auto& [w, pw] : lists_) {
      (void)w;
      node* fresh = build_chain(cfg_.regen_prepopulate);
      node* old = pw->head.exchange(fresh, std::memory_order_acq_rel);
      if (old != nullptr)
        dom_.mr_retire([this, old] { release_chain(old); });
    }
  }

  counters stats() const {
    counters c;
    c.freed = freed_.load(std::memory_order_acquire);
    c.alloc = alloc_.load(std::memory_order_acquire);
    return c;
  }

  /// Appendix-style counter report.
  std::string log_lines() const {
    counters c = stats();
    std::string out;
    out += "Stack Alloc: " + std::to_string(c.alloc) + "\n";
    out += "Stack Free: " + std::to_string(c.freed) + "\n";
    out += "Stack Delta: " + std::to_string(c.delta()) + "\n";
    return out;
  }

 private:
  static constexpr u32 kPooled = 0xFFFFFFFFu;

  struct node {
    vmem::region region;
    node* next = nullptr;
    std::atomic<u32> holder{kPooled};
  };

  struct per_worker {
    std::atomic<node*> head{nullptr};
  };

  per_worker& checked_list(smr::worker_id w) {
    std::shared_lock lk(reg_mu_);
    auto it = lists_.find(w);
    if (it == lists_.end())
      throw unregistered_worker("no pool list for worker " + std::to_string(w));
    return *it->second;
  }

  node* alloc_stack() {
    std::lock_guard lk(alloc_mu_);
    const u64 pages = cfg_.stack_size / vmem::kPageSize;
    const u64 slots = space_.limit() / vmem::kPageSize - pages;
    for (u64 attempt = 0; attempt < cfg_.place_retries; ++attempt) {
      const u64 base = (1 + rng_.next_below(slots - 1)) * vmem::kPageSize;
      if (!space_.range_free(base, pages)) continue;
      std::vector<u64> frames;
      for (u64 i = 0; i < pages; ++i) frames.push_back(space_.create_frame());
      node* n = new node;
      n->region = space_.map_region(base, frames, vmem::kReadWrite);
      alloc_.fetch_add(1, std::memory_order_relaxed);
      return n;
    }
    throw out_of_memory("no free range for a stack after " +
                        std::to_string(cfg_.place_retries) + " placements");
  }

  node* build_chain(u32 count) {
    node* head = nullptr;
    for (u32 i = 0; i < count; ++i) {
      node* n = alloc_stack();
      n->next = head;
      head = n;
    }
    return head;
  }

  void release_chain(node* head) {
    while (head != nullptr) {
      node* next = head->next;
      space_.unmap_region(head->region);
      freed_.fetch_add(1, std::memory_order_relaxed);
      delete head;
      head = next;
    }
  }

  vmem::address_space& space_;
  smr::domain& dom_;
  rng rng_;
  config cfg_;
  std::mutex alloc_mu_;  // serializes placement RNG and mapping
  mutable std::shared_mutex reg_mu_;
  std::unordered_map<smr::worker_id, std::unique_ptr<per_worker>> lists_;
  std::atomic<u64> alloc_{0};
  std::atomic<u64> freed_{0};
};

}  // namespace rerand::stackpool
