#include "scale/losses.hpp"

#include <map>
#include <random>

#include <fmt/core.h>

#include "scale/errors.hpp"

namespace scale {

namespace {

Variable zero_loss() { return Variable(Tensor::scalar(0.0)); }

Tensor select_input_rows(const Tensor& inputs, std::span<const std::size_t> rows) {
  Tensor out(rows.size(), inputs.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::ranges::copy(inputs.row(rows[i]), out.row(i).begin());
  }
  return out;
}

std::vector<int> task_labels(const Batch& batch, std::size_t seen_tasks) {
  std::vector<int> labels;
  labels.reserve(batch.size());
  for (int t : batch.tasks) {
    const int label = t + 1;
    if (label > static_cast<int>(seen_tasks)) {
      throw IndexError(fmt::format("task {} not among the {} seen tasks", t, seen_tasks));
    }
    labels.push_back(label);
  }
  return labels;
}

// Common features with the extractor cut out of the graph.
Variable frozen_features(const ScaleModel& model, const Tensor& inputs) {
  ad::NoGradGuard guard;
  return Variable(model.extract(Variable(inputs)).value());
}

}  // namespace

Variable batch_logits(const ScaleModel& model, const Batch& batch) {
  if (batch.empty()) throw ContractError("logits of an empty batch");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < batch.size(); ++i) groups[batch.tasks[i]].push_back(i);
  if (groups.size() == 1) {
    return model.logits(Variable(batch.inputs), groups.begin()->first);
  }
  std::vector<Variable> parts;
  std::vector<std::size_t> position(batch.size());
  std::size_t offset = 0;
  for (const auto& [task, rows] : groups) {
    parts.push_back(model.logits(Variable(select_input_rows(batch.inputs, rows)), task));
    for (std::size_t i = 0; i < rows.size(); ++i) position[rows[i]] = offset + i;
    offset += rows.size();
  }
  return ad::select_rows(ad::concat_rows(parts), position);
}

Variable ce_loss(const ScaleModel& model, const Batch& batch) {
  if (batch.empty()) throw ContractError("cross-entropy over an empty batch");
  return ad::softmax_cross_entropy(batch_logits(model, batch), batch.labels);
}

Variable derpp_loss(const ScaleModel& model, std::span<const MemoryEntry> replay,
                    const LossWeights& weights) {
  if (replay.empty() || (weights.lambda1 == 0.0 && weights.lambda2 == 0.0)) return zero_loss();
  const Batch batch = to_batch(replay);
  const Variable logits = batch_logits(model, batch);
  Variable loss;
  if (weights.lambda1 != 0.0) {
    Tensor stored(replay.size(), logits.cols());
    for (std::size_t i = 0; i < replay.size(); ++i) {
      if (replay[i].logits.size() != logits.cols()) {
        throw MemoryConsistencyError(fmt::format(
            "stored logits of width {} for a head with {} outputs (task {})",
            replay[i].logits.size(), logits.cols(), replay[i].task));
      }
      std::ranges::copy(replay[i].logits, stored.row(i).begin());
    }
    loss = ad::scale(ad::l2_distance(logits, Variable(std::move(stored))), weights.lambda1);
  }
  if (weights.lambda2 != 0.0) {
    Variable ce = ad::scale(ad::softmax_cross_entropy(logits, batch.labels), weights.lambda2);
    loss = loss.defined() ? ad::add(loss, ce) : ce;
  }
  return loss;
}

Variable adversarial_generator_loss(const ScaleModel& model, const Batch& batch,
                                    std::size_t seen_tasks, const AdversarialConfig& cfg) {
  if (seen_tasks < 2 || batch.empty()) return zero_loss();
  const Discriminator& disc = model.discriminator();
  const MaskedLogits out = disc.discriminate_frozen(model.extract(Variable(batch.inputs)), seen_tasks);
  switch (cfg.mode) {
    case GeneratorMode::uniform_confusion: {
      Tensor target(1, disc.outputs(), 0.0);
      for (std::size_t k = 1; k <= seen_tasks; ++k) target(0, k) = 1.0 / static_cast<double>(seen_tasks);
      return ad::soft_cross_entropy(out.logits, target, out.valid);
    }
    case GeneratorMode::negative_ce:
      return ad::neg(ad::softmax_cross_entropy(out.logits, task_labels(batch, seen_tasks), out.valid));
  }
  return zero_loss();
}

Variable discriminator_loss(const ScaleModel& model, const Batch& real, const Tensor& noise,
                            std::span<const MemoryEntry> replay, const LossWeights& weights,
                            std::size_t seen_tasks) {
  if (noise.rows() == 0) throw ContractError("discriminator loss needs noise samples");
  if (noise.cols() != model.extractor().input_dim()) {
    throw DimensionError(fmt::format("noise of width {} for inputs of width {}", noise.cols(),
                                     model.extractor().input_dim()));
  }
  const Discriminator& disc = model.discriminator();

  Batch fake;
  fake.inputs = noise;
  fake.labels.assign(noise.rows(), 0);
  fake.tasks.assign(noise.rows(), -1);
  std::vector<int> labels = task_labels(real, seen_tasks);
  labels.insert(labels.end(), fake.labels.begin(), fake.labels.end());
  const Batch everything = concat(real, fake);

  const MaskedLogits out = disc.discriminate(frozen_features(model, everything.inputs), seen_tasks);
  Variable loss = ad::softmax_cross_entropy(out.logits, labels, out.valid);

  if (!replay.empty() && (weights.lambda1 != 0.0 || weights.lambda2 != 0.0)) {
    const Batch memory = to_batch(replay);
    const MaskedLogits mem = disc.discriminate(frozen_features(model, memory.inputs), seen_tasks);
    if (weights.lambda1 != 0.0) {
      Tensor stored(replay.size(), disc.outputs());
      for (std::size_t i = 0; i < replay.size(); ++i) {
        if (replay[i].disc_logits.size() != disc.outputs()) {
          throw MemoryConsistencyError(
              fmt::format("stored discriminator logits of width {}, discriminator has {} outputs",
                          replay[i].disc_logits.size(), disc.outputs()));
        }
        std::ranges::copy(replay[i].disc_logits, stored.row(i).begin());
      }
      loss = ad::add(loss, ad::scale(ad::l2_distance(mem.logits, Variable(std::move(stored))),
                                     weights.lambda1));
    }
    if (weights.lambda2 != 0.0) {
      loss = ad::add(loss, ad::scale(ad::softmax_cross_entropy(
                                         mem.logits, task_labels(memory, seen_tasks), mem.valid),
                                     weights.lambda2));
    }
  }
  return loss;
}

Tensor draw_noise(std::size_t rows, std::size_t dim, const AdversarialConfig& cfg, Rng& rng) {
  std::normal_distribution<double> normal(cfg.noise_mean, cfg.noise_std);
  Tensor out(rows, dim);
  for (auto& v : out.data()) v = normal(rng);
  return out;
}

LossTerms total_loss(const ScaleModel& model, const Batch& current,
                     std::span<const MemoryEntry> replay, const LossWeights& weights,
                     const AdversarialConfig& cfg, std::size_t seen_tasks) {
  const Batch combined = concat(current, to_batch(replay));
  LossTerms terms;
  const Variable ce = ce_loss(model, combined);
  const Variable der = derpp_loss(model, replay, weights);
  terms.ce = ce.item();
  terms.derpp = der.item();
  terms.total = ad::add(ce, der);
  if (cfg.enabled && weights.lambda3 != 0.0) {
    const Variable adv = adversarial_generator_loss(model, combined, seen_tasks, cfg);
    terms.adversarial = adv.item();
    terms.total = ad::add(terms.total, ad::scale(adv, weights.lambda3));
  }
  return terms;
}

}  // namespace scale
