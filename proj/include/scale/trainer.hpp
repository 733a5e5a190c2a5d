#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "scale/datasets.hpp"
#include "scale/losses.hpp"
#include "scale/memory.hpp"
#include "scale/metrics.hpp"
#include "scale/networks.hpp"

namespace scale {

enum class Method { scale, er, finetune };

// full: everything on. A: no adversarial game. B: no DER++ terms (in both
// the base and the discriminator losses). C: no feature transformation.
enum class Ablation { full, A, B, C };

struct TrainerConfig {
  Method method = Method::scale;
  Ablation ablation = Ablation::full;
  double inner_lr = 0.01;          // alpha
  double outer_lr = 0.1;           // beta
  double adversarial_lr = 0.001;   // mu
  std::size_t n_in = 1;
  std::size_t n_out = 1;
  std::size_t n_ad = 1;
  std::size_t batch_size = 10;
  std::size_t replay_size = 64;
  LossWeights weights;
  AdversarialConfig adversarial;
  std::uint64_t seed = 0;
};

// Seed of the batch order for `task` under run seed `seed`.
std::uint64_t batch_seed(std::uint64_t seed, int task);

// Returns the configuration an ablation mode actually trains with.
TrainerConfig apply_ablation(TrainerConfig cfg);
ModelConfig apply_ablation(ModelConfig model, const TrainerConfig& cfg);

struct UpdateCounters {
  std::size_t inner = 0;
  std::size_t outer = 0;
  std::size_t adversarial = 0;

  friend bool operator==(const UpdateCounters&, const UpdateCounters&) = default;
};

enum class StepKind { inner, outer, adversarial };

// Observer called around every optimization step, with `after` false just
// before the update and true right after it.
using StepHook = std::function<void(StepKind kind, bool after, const ScaleModel& model)>;

struct TaskLog {
  int task = 0;
  std::vector<double> accuracies;
  double acc_so_far = 0.0;
  double mean_loss = 0.0;
  double mean_disc_loss = 0.0;
  std::size_t consumed = 0;
  std::size_t memory_size = 0;
  double wall_s = 0.0;
};

struct RunState {
  RunState(ScaleModel model, EpisodicMemory memory, std::uint64_t seed);

  ScaleModel model;
  EpisodicMemory memory;
  AccuracyMatrix accuracy;
  // Samples of each task observed so far (reservoir counters).
  std::vector<std::uint64_t> samples_seen;
  // Current-task samples that went through an optimization round.
  std::vector<std::size_t> consumed;
  UpdateCounters updates;
  std::vector<TaskLog> log;
  Rng replay_rng;
  Rng noise_rng;
  StepHook hook;
};

// One SGD step on the total loss over current + train replay, updating the
// extractor and the heads in use. The generator and discriminator are left
// untouched.
LossTerms inner_step(ScaleModel& model, const Batch& current, std::span<const MemoryEntry> replay,
                     const TrainerConfig& cfg);

// One first-order SGD step on the validation loss w.r.t. the generator only.
LossTerms outer_step(ScaleModel& model, const Batch& current, std::span<const MemoryEntry> replay,
                     const TrainerConfig& cfg);

// One SGD step on the discriminator loss, discriminator only. Noise rows
// are drawn from `noise_rng`.
double adversarial_step(ScaleModel& model, const Batch& current,
                        std::span<const MemoryEntry> replay, const TrainerConfig& cfg,
                        Rng& noise_rng);

// Stores every sample of `batch` into memory with fresh logit snapshots.
void update_memory(RunState& state, const Batch& batch);

// Trains one task in a single pass. Registers the task on the model first.
void train_task(RunState& state, const TaskData& task, const TrainerConfig& cfg);

// Plain experience replay: CE on current + replay, one SGD step per batch.
// With an empty memory budget this is single-epoch fine-tuning.
void train_task_er(RunState& state, const TaskData& task, const TrainerConfig& cfg);

// Accuracy on each task's test split, in order. Never touches the
// discriminator and mutates nothing.
std::vector<double> evaluate(const ScaleModel& model, std::span<const TaskData> tasks);
double accuracy(const ScaleModel& model, const Dataset& data, int task);

// Builds a fresh state for `cfg` (model, memory) and trains every task of
// `stream`, appending an accuracy row after each.
RunState run_stream(const TaskStream& stream, const ModelConfig& model_cfg,
                    const TrainerConfig& cfg, std::size_t memory_budget,
                    const StepHook& hook = {});

}  // namespace scale
