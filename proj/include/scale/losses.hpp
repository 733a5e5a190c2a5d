#pragma once

#include <cstddef>
#include <span>

#include "scale/datasets.hpp"
#include "scale/memory.hpp"
#include "scale/networks.hpp"

namespace scale {

struct LossWeights {
  double lambda1 = 1.0;   // logit matching against stored snapshots
  double lambda2 = 1.0;   // cross-entropy on replayed labels
  double lambda3 = 0.03;  // adversarial alignment
};

enum class GeneratorMode {
  // Cross-entropy between D(g(x)) and the uniform distribution over the
  // real task labels 1..K.
  uniform_confusion,
  // -CE(D(g(x)), t).
  negative_ce,
};

struct AdversarialConfig {
  bool enabled = true;
  double noise_mean = 0.0;
  double noise_std = 1.0;
  GeneratorMode mode = GeneratorMode::uniform_confusion;
  // Noise rows per real row in the discriminator batch.
  double noise_ratio = 1.0;
};

// Logits of every row routed through the head (and modulation) of its own
// task, in batch order.
Variable batch_logits(const ScaleModel& model, const Batch& batch);

Variable ce_loss(const ScaleModel& model, const Batch& batch);

// lambda1 * mean ||o - h||_2 + lambda2 * CE(o, y) over replayed entries.
// Zero for an empty replay set.
Variable derpp_loss(const ScaleModel& model, std::span<const MemoryEntry> replay,
                    const LossWeights& weights);

// Generator side of the adversarial game; gradients reach the extractor
// only. `seen_tasks` counts real task labels 1..K; with fewer than two
// there is nothing to align and the loss is 0.
Variable adversarial_generator_loss(const ScaleModel& model, const Batch& batch,
                                    std::size_t seen_tasks, const AdversarialConfig& cfg);

// Discriminator objective: (K+1)-way CE with noise labeled 0 and real rows
// labeled by task (index + 1), plus the replay term on stored
// discriminator logits. Gradients reach the discriminator only.
Variable discriminator_loss(const ScaleModel& model, const Batch& real, const Tensor& noise,
                            std::span<const MemoryEntry> replay, const LossWeights& weights,
                            std::size_t seen_tasks);

Tensor draw_noise(std::size_t rows, std::size_t dim, const AdversarialConfig& cfg, Rng& rng);

struct LossTerms {
  Variable total;
  double ce = 0.0;
  double derpp = 0.0;
  double adversarial = 0.0;  // unweighted generator loss
};

// L = CE(current + replay) + DER++(replay) + lambda3 * L_adv(current + replay).
LossTerms total_loss(const ScaleModel& model, const Batch& current,
                     std::span<const MemoryEntry> replay, const LossWeights& weights,
                     const AdversarialConfig& cfg, std::size_t seen_tasks);

}  // namespace scale
