#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "scale/datasets.hpp"
#include "scale/rng.hpp"

namespace scale {

// A replayable sample with the logits the model produced when it was stored.
struct MemoryEntry {
  std::vector<double> x;
  int label = 0;
  int task = 0;
  std::vector<double> logits;         // classifier head of `task`
  std::vector<double> disc_logits;    // discriminator, all outputs

  friend bool operator==(const MemoryEntry&, const MemoryEntry&) = default;
};

Batch to_batch(std::span<const MemoryEntry> entries);

struct Partition {
  Batch current;
  std::vector<MemoryEntry> train_replay;
  std::vector<MemoryEntry> val_replay;

  Batch train_set() const;
  Batch val_set() const;
};

// Single episodic memory shared by every task, with a fixed per-task budget
// filled by within-task reservoir sampling.
class EpisodicMemory {
 public:
  explicit EpisodicMemory(std::size_t budget_per_task = 50, std::uint64_t seed = 0);

  // `seen_count` is the number of samples of entry.task observed so far,
  // including this one.
  bool observe(MemoryEntry entry, std::uint64_t seen_count);

  // Uniform draw with replacement over all stored entries. Empty when the
  // memory is empty.
  std::vector<MemoryEntry> sample(std::size_t batch_size, Rng& rng) const;

  // Current batch plus two independent replay draws. The draws come from
  // separate generators forked off `rng`.
  Partition partition(const Batch& current, std::size_t replay_size, Rng& rng) const;

  std::size_t budget() const { return budget_; }
  std::size_t size() const;
  std::size_t size(int task) const;
  bool empty() const { return size() == 0; }
  const std::map<int, std::vector<MemoryEntry>>& slots() const { return slots_; }

  const Rng& reservoir_rng() const { return rng_; }
  // Restores contents verbatim (checkpoint load).
  void restore(std::map<int, std::vector<MemoryEntry>> slots, const Rng& rng);

 private:
  std::size_t budget_;
  std::map<int, std::vector<MemoryEntry>> slots_;
  Rng rng_;
};

}  // namespace scale
