#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "scale/autodiff.hpp"
#include "scale/rng.hpp"

namespace scale {

using ad::Tensor;
using ad::Variable;

enum class HeadMode { multi, single };

// Where task-conditioned feature modulation sits in the MLP backbone.
enum class TransformMode { all_hidden, last_hidden, disabled };

struct ModelConfig {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden = {256, 256};
  std::size_t classes_per_head = 2;
  HeadMode head_mode = HeadMode::multi;
  TransformMode transform = TransformMode::all_hidden;
  std::size_t embedding_dim = 64;
  // One embedding table for every transformed layer, or one per layer.
  bool shared_embedding = true;
  std::size_t max_tasks = 32;
  std::size_t discriminator_hidden = 64;
  double norm_eps = 1e-8;
};

using NamedParameters = std::vector<std::pair<std::string, Variable>>;

// y = x W + b, W ~ U(-1/sqrt(in), 1/sqrt(in)), b = 0.
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);

  Variable forward(const Variable& x) const;
  // Forward with parameters cut out of the graph.
  Variable forward_frozen(const Variable& x) const;

  std::size_t in_features() const { return weight_.rows(); }
  std::size_t out_features() const { return weight_.cols(); }
  Variable& weight() { return weight_; }
  Variable& bias() { return bias_; }
  const Variable& weight() const { return weight_; }
  const Variable& bias() const { return bias_; }

  void append_parameters(const std::string& prefix, NamedParameters& out) const;
  Linear clone() const;

 private:
  Variable weight_;
  Variable bias_;
};

class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(std::size_t input_dim, const std::vector<std::size_t>& hidden, Rng& rng);

  // Shared, task-invariant features: ReLU(affine) through every layer.
  Variable forward(const Variable& x) const;

  const std::vector<Linear>& layers() const { return layers_; }
  std::size_t input_dim() const { return layers_.front().in_features(); }
  std::size_t output_dim() const { return layers_.back().out_features(); }
  std::vector<Variable> parameters() const;
  void append_parameters(NamedParameters& out) const;
  FeatureExtractor clone() const;

 private:
  std::vector<Linear> layers_;
};

// Scale (Phi1) and shift (Phi2) coefficients for one layer, each [1 x width].
struct Modulation {
  Variable scale;
  Variable shift;
};

// g~ = Phi1/(|Phi1|+eps) * g + Phi2/(|Phi2|+eps), returned as g~ + g.
Variable transform(const Variable& features, const Modulation& modulation, double eps);

// Maps a task id through an embedding table and per-layer affine heads to
// per-layer modulation coefficients.
class ParameterGenerator {
 public:
  ParameterGenerator() = default;
  ParameterGenerator(const std::vector<std::size_t>& layer_widths, std::size_t embedding_dim,
                     std::size_t max_tasks, bool shared_embedding, Rng& rng);

  void register_task(int task);
  bool knows(int task) const { return tasks_.contains(task); }
  const std::set<int>& tasks() const { return tasks_; }

  // `slot` indexes the transformed layers in forward order.
  Modulation generate(int task, std::size_t slot) const;
  std::size_t slots() const { return scale_heads_.size(); }

  std::vector<Variable> parameters() const;
  void append_parameters(NamedParameters& out) const;
  ParameterGenerator clone() const;

 private:
  std::vector<Variable> embeddings_;  // one table, or one per slot
  std::vector<Linear> scale_heads_;
  std::vector<Linear> shift_heads_;
  std::set<int> tasks_;
};

class ClassifierHeads {
 public:
  ClassifierHeads() = default;
  ClassifierHeads(HeadMode mode, std::size_t feature_dim, std::size_t classes, Rng& rng);

  // Multi-head: registers a fresh head for `task`. Single-head: no-op.
  // Returns the head that now serves `task`.
  const Linear& add_head(int task, Rng& rng);
  bool has_head(int task) const;

  // Applies s(.) = ReLU, then the task's head.
  Variable classify(const Variable& features, int task) const;

  HeadMode mode() const { return mode_; }
  std::size_t classes() const { return classes_; }
  const Linear& head(int task) const;
  std::vector<Variable> parameters() const;
  std::vector<Variable> parameters(int task) const;
  void append_parameters(NamedParameters& out) const;
  ClassifierHeads clone() const;

 private:
  HeadMode mode_ = HeadMode::multi;
  std::size_t feature_dim_ = 0;
  std::size_t classes_ = 0;
  std::map<int, Linear> heads_;  // single-head mode keeps one head under key 0
};

// Discriminator logits with the softmax restricted to the first `valid`
// columns (fake label 0 plus seen tasks 1..K).
struct MaskedLogits {
  Variable logits;
  std::size_t valid = 0;

  Tensor probabilities() const { return ad::softmax(logits.value(), valid); }
};

class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(std::size_t feature_dim, std::size_t hidden, std::size_t max_tasks, Rng& rng);

  // Output arity is max_tasks + 1; index 0 is the fake-task label.
  MaskedLogits discriminate(const Variable& features, std::size_t seen_tasks) const;
  // Same values but the discriminator's own parameters get no gradient.
  MaskedLogits discriminate_frozen(const Variable& features, std::size_t seen_tasks) const;

  std::size_t outputs() const { return output_.out_features(); }
  std::size_t max_tasks() const { return outputs() - 1; }
  std::vector<Variable> parameters() const;
  void append_parameters(NamedParameters& out) const;
  Discriminator clone() const;

 private:
  void check_capacity(std::size_t seen_tasks) const;

  Linear hidden_;
  Linear output_;
};

// The four parameter groups: extractor (theta), heads (phi), generator
// (varphi) and discriminator (xi).
class ScaleModel {
 public:
  ScaleModel(const ModelConfig& config, std::uint64_t seed);

  ScaleModel(ScaleModel&&) = default;
  ScaleModel& operator=(ScaleModel&&) = default;
  ScaleModel(const ScaleModel&) = delete;
  ScaleModel& operator=(const ScaleModel&) = delete;

  // Deep copy with independent parameter storage.
  ScaleModel clone() const;

  // Registers a new task: generator embedding and, in multi-head mode, a head.
  void add_task(int task);
  bool knows_task(int task) const;
  std::vector<int> tasks() const;

  Variable extract(const Variable& x) const;
  // Full task-conditioned pipeline up to the classifier logits.
  Variable logits(const Variable& x, int task) const;
  // Combined (transformed + residual) features fed to the classifier.
  Variable task_features(const Variable& x, int task) const;

  // Detached classifier logits for storage.
  Tensor snapshot_logits(const Tensor& x, int task) const;
  // Detached raw discriminator logits on the common features.
  Tensor snapshot_discriminator(const Tensor& x) const;

  const ModelConfig& config() const { return config_; }
  bool transform_enabled() const { return config_.transform != TransformMode::disabled; }
  // Ablation switch; leaves the generator's parameters in place.
  void set_transform(TransformMode mode) { config_.transform = mode; }

  FeatureExtractor& extractor() { return extractor_; }
  ParameterGenerator& generator() { return generator_; }
  ClassifierHeads& heads() { return heads_; }
  Discriminator& discriminator() { return discriminator_; }
  const FeatureExtractor& extractor() const { return extractor_; }
  const ParameterGenerator& generator() const { return generator_; }
  const ClassifierHeads& heads() const { return heads_; }
  const Discriminator& discriminator() const { return discriminator_; }

  std::vector<Variable> extractor_parameters() const { return extractor_.parameters(); }
  std::vector<Variable> head_parameters() const { return heads_.parameters(); }
  std::vector<Variable> generator_parameters() const { return generator_.parameters(); }
  std::vector<Variable> discriminator_parameters() const { return discriminator_.parameters(); }

  // Stable names for checkpointing and comparisons.
  NamedParameters named_parameters() const;

  const Rng& head_rng() const { return head_rng_; }
  void set_head_rng(const Rng& rng) { head_rng_ = rng; }

 private:
  ScaleModel() = default;
  bool transforms_layer(std::size_t layer) const;

  ModelConfig config_;
  FeatureExtractor extractor_;
  ParameterGenerator generator_;
  ClassifierHeads heads_;
  Discriminator discriminator_;
  Rng head_rng_;
};

// Values of every parameter, in named_parameters() order.
std::vector<Tensor> parameter_values(const std::vector<Variable>& params);

}  // namespace scale
