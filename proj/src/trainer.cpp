#include "scale/trainer.hpp"

#include <chrono>
#include <cmath>

#include <fmt/core.h>

#include "scale/errors.hpp"

namespace scale {

namespace {

void zero_all(ScaleModel& model) {
  for (auto& [name, p] : model.named_parameters()) p.zero_grad();
}

// SGD over the parameters of `group` that received a gradient.
void step_group(std::vector<Variable> group, double lr) {
  std::vector<Variable> touched;
  for (auto& p : group) {
    if (p.has_grad()) touched.push_back(p);
  }
  if (!touched.empty()) ad::sgd_step(touched, lr);
}

std::size_t seen_tasks(const ScaleModel& model) { return model.tasks().size(); }

void validate(const TrainerConfig& cfg) {
  if (!(cfg.inner_lr > 0.0) || !(cfg.outer_lr > 0.0) || !(cfg.adversarial_lr > 0.0)) {
    throw ConfigError("learning rates must be positive");
  }
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  const auto& w = cfg.weights;
  if (w.lambda1 < 0.0 || w.lambda2 < 0.0 || w.lambda3 < 0.0) {
    throw ConfigError("loss weights must be non-negative");
  }
}

}  // namespace

std::uint64_t batch_seed(std::uint64_t seed, int task) {
  return seed * 1'000'003ULL + static_cast<std::uint64_t>(task);
}

TrainerConfig apply_ablation(TrainerConfig cfg) {
  if (cfg.method != Method::scale) {
    cfg.weights = {0.0, 0.0, 0.0};
    cfg.adversarial.enabled = false;
    return cfg;
  }
  switch (cfg.ablation) {
    case Ablation::A:
      cfg.weights.lambda3 = 0.0;
      cfg.adversarial.enabled = false;
      break;
    case Ablation::B:
      cfg.weights.lambda1 = 0.0;
      cfg.weights.lambda2 = 0.0;
      break;
    case Ablation::C:
    case Ablation::full:
      break;
  }
  return cfg;
}

ModelConfig apply_ablation(ModelConfig model, const TrainerConfig& cfg) {
  if (cfg.method != Method::scale || cfg.ablation == Ablation::C) {
    model.transform = TransformMode::disabled;
  }
  return model;
}

RunState::RunState(ScaleModel m, EpisodicMemory mem, std::uint64_t seed)
    : model(std::move(m)),
      memory(std::move(mem)),
      replay_rng(make_stream(seed, streams::kReplay)),
      noise_rng(make_stream(seed, streams::kNoise)) {}

LossTerms inner_step(ScaleModel& model, const Batch& current, std::span<const MemoryEntry> replay,
                     const TrainerConfig& cfg) {
  zero_all(model);
  LossTerms terms =
      total_loss(model, current, replay, cfg.weights, cfg.adversarial, seen_tasks(model));
  ad::backward(terms.total);
  step_group(model.extractor_parameters(), cfg.inner_lr);
  step_group(model.head_parameters(), cfg.inner_lr);
  zero_all(model);
  return terms;
}

LossTerms outer_step(ScaleModel& model, const Batch& current, std::span<const MemoryEntry> replay,
                     const TrainerConfig& cfg) {
  zero_all(model);
  LossTerms terms =
      total_loss(model, current, replay, cfg.weights, cfg.adversarial, seen_tasks(model));
  ad::backward(terms.total);
  step_group(model.generator_parameters(), cfg.outer_lr);
  zero_all(model);
  return terms;
}

double adversarial_step(ScaleModel& model, const Batch& current,
                        std::span<const MemoryEntry> replay, const TrainerConfig& cfg,
                        Rng& noise_rng) {
  zero_all(model);
  const Batch real = concat(current, to_batch(replay));
  const auto rows = static_cast<std::size_t>(
      std::max(1.0, std::round(cfg.adversarial.noise_ratio * static_cast<double>(real.size()))));
  const Tensor noise = draw_noise(rows, model.extractor().input_dim(), cfg.adversarial, noise_rng);
  const Variable loss =
      discriminator_loss(model, real, noise, replay, cfg.weights, seen_tasks(model));
  ad::backward(loss);
  step_group(model.discriminator_parameters(), cfg.adversarial_lr);
  zero_all(model);
  return loss.item();
}

void update_memory(RunState& state, const Batch& batch) {
  if (batch.empty() || state.memory.budget() == 0) {
    for (int t : batch.tasks) ++state.samples_seen.at(static_cast<std::size_t>(t));
    return;
  }
  const int task = batch.tasks.front();
  const Tensor logits = state.model.snapshot_logits(batch.inputs, task);
  const Tensor disc = state.model.snapshot_discriminator(batch.inputs);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    MemoryEntry entry;
    const auto x = batch.inputs.row(i);
    entry.x.assign(x.begin(), x.end());
    entry.label = batch.labels[i];
    entry.task = batch.tasks[i];
    entry.logits.assign(logits.row(i).begin(), logits.row(i).end());
    entry.disc_logits.assign(disc.row(i).begin(), disc.row(i).end());
    const auto seen = ++state.samples_seen.at(static_cast<std::size_t>(entry.task));
    state.memory.observe(std::move(entry), seen);
  }
}

namespace {

void notify(const RunState& state, StepKind kind, bool after) {
  if (state.hook) state.hook(kind, after, state.model);
}

void ensure_task(RunState& state, int task) {
  if (!state.model.knows_task(task)) state.model.add_task(task);
  const auto slots = static_cast<std::size_t>(task) + 1;
  if (state.samples_seen.size() < slots) state.samples_seen.resize(slots, 0);
  if (state.consumed.size() < slots) state.consumed.resize(slots, 0);
}

template <typename Body>
void run_task(RunState& state, const TaskData& task, const TrainerConfig& cfg, Body body) {
  validate(cfg);
  const auto start = std::chrono::steady_clock::now();
  ensure_task(state, task.task);
  double loss_total = 0.0;
  double disc_total = 0.0;
  const auto schedule = batches(task.train, cfg.batch_size, batch_seed(cfg.seed, task.task), task.task);
  for (const Batch& current : schedule) {
    const auto [loss, disc] = body(current);
    loss_total += loss;
    disc_total += disc;
    state.consumed[static_cast<std::size_t>(task.task)] += current.size();
    update_memory(state, current);
  }
  TaskLog entry;
  entry.task = task.task;
  entry.consumed = state.consumed[static_cast<std::size_t>(task.task)];
  entry.memory_size = state.memory.size();
  const double n = schedule.empty() ? 1.0 : static_cast<double>(schedule.size());
  entry.mean_loss = loss_total / n;
  entry.mean_disc_loss = disc_total / n;
  entry.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  state.log.push_back(std::move(entry));
}

}  // namespace

void train_task(RunState& state, const TaskData& task, const TrainerConfig& cfg) {
  run_task(state, task, cfg, [&](const Batch& current) {
    const Partition part = state.memory.partition(current, cfg.replay_size, state.replay_rng);
    double loss = 0.0;
    for (std::size_t o = 0; o < cfg.n_out; ++o) {
      for (std::size_t i = 0; i < cfg.n_in; ++i) {
        notify(state, StepKind::inner, false);
        loss = inner_step(state.model, current, part.train_replay, cfg).total.item();
        notify(state, StepKind::inner, true);
        ++state.updates.inner;
      }
      notify(state, StepKind::outer, false);
      outer_step(state.model, current, part.val_replay, cfg);
      notify(state, StepKind::outer, true);
      ++state.updates.outer;
    }
    double disc = 0.0;
    if (cfg.adversarial.enabled) {
      for (std::size_t a = 0; a < cfg.n_ad; ++a) {
        notify(state, StepKind::adversarial, false);
        disc = adversarial_step(state.model, current, part.train_replay, cfg, state.noise_rng);
        notify(state, StepKind::adversarial, true);
        ++state.updates.adversarial;
      }
    }
    return std::pair{loss, disc};
  });
}

void train_task_er(RunState& state, const TaskData& task, const TrainerConfig& cfg) {
  run_task(state, task, cfg, [&](const Batch& current) {
    const Partition part = state.memory.partition(current, cfg.replay_size, state.replay_rng);
    ScaleModel& model = state.model;
    notify(state, StepKind::inner, false);
    zero_all(model);
    const Variable loss = ce_loss(model, part.train_set());
    ad::backward(loss);
    step_group(model.extractor_parameters(), cfg.inner_lr);
    step_group(model.head_parameters(), cfg.inner_lr);
    zero_all(model);
    notify(state, StepKind::inner, true);
    ++state.updates.inner;
    return std::pair{loss.item(), 0.0};
  });
}

double accuracy(const ScaleModel& model, const Dataset& data, int task) {
  if (!model.knows_task(task)) throw UnknownTaskError(fmt::format("task {} was never trained", task));
  if (data.size() == 0) return 0.0;
  const Tensor logits = model.snapshot_logits(data.inputs, task);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c] > row[best]) best = c;
    }
    if (static_cast<int>(best) == data.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<double> evaluate(const ScaleModel& model, std::span<const TaskData> tasks) {
  std::vector<double> out;
  out.reserve(tasks.size());
  for (const auto& t : tasks) out.push_back(accuracy(model, t.test, t.task));
  return out;
}

RunState run_stream(const TaskStream& stream, const ModelConfig& model_cfg,
                    const TrainerConfig& cfg, std::size_t memory_budget,
                    const StepHook& hook) {
  const TrainerConfig effective = apply_ablation(cfg);
  ModelConfig mcfg = apply_ablation(model_cfg, cfg);
  mcfg.input_dim = stream.input_dim;
  mcfg.classes_per_head = stream.classes_per_task;
  mcfg.head_mode = stream.protocol == Protocol::split ? HeadMode::multi : HeadMode::single;
  if (stream.tasks.size() > mcfg.max_tasks) {
    throw ConfigError(fmt::format("stream has {} tasks, model capacity is {}", stream.tasks.size(),
                                  mcfg.max_tasks));
  }
  const std::size_t budget = cfg.method == Method::finetune ? 0 : memory_budget;
  RunState state(ScaleModel(mcfg, cfg.seed), EpisodicMemory(budget, cfg.seed), cfg.seed);
  state.hook = hook;
  for (std::size_t k = 0; k < stream.tasks.size(); ++k) {
    if (cfg.method == Method::scale) {
      train_task(state, stream.tasks[k], effective);
    } else {
      train_task_er(state, stream.tasks[k], effective);
    }
    auto row = evaluate(state.model, std::span(stream.tasks).first(k + 1));
    state.log.back().accuracies = row;
    state.accuracy.append(std::move(row));
    state.log.back().acc_so_far = acc(state.accuracy, k + 1);
  }
  return state;
}

}  // namespace scale
