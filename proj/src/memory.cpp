#include "scale/memory.hpp"

#include <fmt/core.h>

#include "scale/errors.hpp"

namespace scale {

Batch to_batch(std::span<const MemoryEntry> entries) {
  Batch b;
  if (entries.empty()) return b;
  const std::size_t dim = entries.front().x.size();
  std::vector<double> data;
  data.reserve(entries.size() * dim);
  for (const auto& e : entries) {
    if (e.x.size() != dim) throw DimensionError("memory entries of different input widths");
    data.insert(data.end(), e.x.begin(), e.x.end());
    b.labels.push_back(e.label);
    b.tasks.push_back(e.task);
  }
  b.inputs = Tensor(entries.size(), dim, std::move(data));
  return b;
}

Batch Partition::train_set() const { return concat(current, to_batch(train_replay)); }
Batch Partition::val_set() const { return concat(current, to_batch(val_replay)); }

EpisodicMemory::EpisodicMemory(std::size_t budget_per_task, std::uint64_t seed)
    : budget_(budget_per_task), rng_(make_stream(seed, streams::kReservoir)) {}

bool EpisodicMemory::observe(MemoryEntry entry, std::uint64_t seen_count) {
  if (budget_ == 0) return false;
  if (seen_count == 0) throw ContractError("seen_count counts the observed entry and must be >= 1");
  auto& slot = slots_[entry.task];
  if (slot.size() < budget_) {
    slot.push_back(std::move(entry));
    return true;
  }
  // Keep with probability budget/seen_count, replacing a uniform slot.
  const std::uint64_t pick = uniform_index(rng_, seen_count);
  if (pick >= budget_) return false;
  slot[pick] = std::move(entry);
  return true;
}

std::vector<MemoryEntry> EpisodicMemory::sample(std::size_t batch_size, Rng& rng) const {
  std::vector<MemoryEntry> out;
  const std::size_t total = size();
  if (total == 0) return out;
  out.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    std::size_t index = uniform_index(rng, total);
    for (const auto& [task, entries] : slots_) {
      if (index < entries.size()) {
        out.push_back(entries[index]);
        break;
      }
      index -= entries.size();
    }
  }
  return out;
}

Partition EpisodicMemory::partition(const Batch& current, std::size_t replay_size, Rng& rng) const {
  if (current.empty()) throw ContractError("partition of an empty current batch");
  Rng train_rng(rng());
  Rng val_rng(rng());
  Partition p;
  p.current = current;
  p.train_replay = sample(replay_size, train_rng);
  p.val_replay = sample(replay_size, val_rng);
  return p;
}

std::size_t EpisodicMemory::size() const {
  std::size_t total = 0;
  for (const auto& [task, entries] : slots_) total += entries.size();
  return total;
}

std::size_t EpisodicMemory::size(int task) const {
  auto it = slots_.find(task);
  return it == slots_.end() ? 0 : it->second.size();
}

void EpisodicMemory::restore(std::map<int, std::vector<MemoryEntry>> slots, const Rng& rng) {
  for (const auto& [task, entries] : slots) {
    if (entries.size() > budget_) {
      throw CapacityError(fmt::format("restored slot for task {} holds {} entries, budget {}", task,
                                      entries.size(), budget_));
    }
  }
  slots_ = std::move(slots);
  rng_ = rng;
}

}  // namespace scale
