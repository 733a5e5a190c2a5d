#include "scale/networks.hpp"

#include <cmath>

#include <fmt/core.h>

#include "scale/errors.hpp"

namespace scale {

namespace {

Tensor uniform_tensor(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = (2.0 * uniform_unit(rng) - 1.0) * bound;
  return t;
}

Variable clone_parameter(const Variable& p) { return Variable(p.value(), true); }

}  // namespace

// ---------------------------------------------------------------- Linear

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight_(uniform_tensor(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng), true),
      bias_(Tensor(1, out, 0.0), true) {}

Variable Linear::forward(const Variable& x) const {
  if (x.cols() != in_features()) {
    throw DimensionError(fmt::format("linear layer expects {} inputs, got {}", in_features(),
                                     x.value().shape_string()));
  }
  return ad::add_row(ad::matmul(x, weight_), bias_);
}

Variable Linear::forward_frozen(const Variable& x) const {
  if (x.cols() != in_features()) {
    throw DimensionError(fmt::format("linear layer expects {} inputs, got {}", in_features(),
                                     x.value().shape_string()));
  }
  return ad::add_row(ad::matmul(x, weight_.detach()), bias_.detach());
}

void Linear::append_parameters(const std::string& prefix, NamedParameters& out) const {
  out.emplace_back(prefix + ".weight", weight_);
  out.emplace_back(prefix + ".bias", bias_);
}

Linear Linear::clone() const {
  Linear copy;
  copy.weight_ = clone_parameter(weight_);
  copy.bias_ = clone_parameter(bias_);
  return copy;
}

// ---------------------------------------------------------------- FeatureExtractor

FeatureExtractor::FeatureExtractor(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                                   Rng& rng) {
  if (hidden.empty()) throw ConfigError("feature extractor needs at least one hidden layer");
  std::size_t in = input_dim;
  for (std::size_t width : hidden) {
    layers_.emplace_back(in, width, rng);
    in = width;
  }
}

Variable FeatureExtractor::forward(const Variable& x) const {
  if (x.cols() != input_dim()) {
    throw ConfigError(fmt::format("extractor expects inputs of width {}, got {}", input_dim(),
                                  x.value().shape_string()));
  }
  Variable h = x;
  for (const auto& layer : layers_) h = ad::relu(layer.forward(h));
  return h;
}

std::vector<Variable> FeatureExtractor::parameters() const {
  std::vector<Variable> out;
  for (const auto& layer : layers_) {
    out.push_back(layer.weight());
    out.push_back(layer.bias());
  }
  return out;
}

void FeatureExtractor::append_parameters(NamedParameters& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].append_parameters(fmt::format("extractor.{}", i), out);
  }
}

FeatureExtractor FeatureExtractor::clone() const {
  FeatureExtractor copy;
  for (const auto& layer : layers_) copy.layers_.push_back(layer.clone());
  return copy;
}

// ---------------------------------------------------------------- transform

Variable transform(const Variable& features, const Modulation& modulation, double eps) {
  const auto width = features.cols();
  if (modulation.scale.cols() != width || modulation.shift.cols() != width) {
    throw DimensionError(fmt::format("modulation of width {} for features {}",
                                     modulation.scale.cols(), features.value().shape_string()));
  }
  const Variable scale = ad::normalize(modulation.scale, eps);
  const Variable shift = ad::normalize(modulation.shift, eps);
  const Variable specific = ad::add_row(ad::mul_row(features, scale), shift);
  return ad::add(specific, features);
}

// ---------------------------------------------------------------- ParameterGenerator

ParameterGenerator::ParameterGenerator(const std::vector<std::size_t>& layer_widths,
                                       std::size_t embedding_dim, std::size_t max_tasks,
                                       bool shared_embedding, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto make_table = [&] {
    Tensor t(max_tasks, embedding_dim);
    for (auto& v : t.data()) v = normal(rng);
    return Variable(std::move(t), true);
  };
  const std::size_t tables = shared_embedding ? 1 : layer_widths.size();
  for (std::size_t i = 0; i < tables; ++i) embeddings_.push_back(make_table());
  for (std::size_t width : layer_widths) {
    scale_heads_.emplace_back(embedding_dim, width, rng);
    shift_heads_.emplace_back(embedding_dim, width, rng);
  }
}

void ParameterGenerator::register_task(int task) {
  if (embeddings_.empty()) throw ContractError("parameter generator was never constructed");
  if (task < 0 || static_cast<std::size_t>(task) >= embeddings_.front().rows()) {
    throw CapacityError(fmt::format("task {} exceeds the embedding table of {} tasks", task,
                                    embeddings_.front().rows()));
  }
  tasks_.insert(task);
}

Modulation ParameterGenerator::generate(int task, std::size_t slot) const {
  if (!knows(task)) throw UnknownTaskError(fmt::format("no task embedding for task {}", task));
  if (slot >= slots()) {
    throw ContractError(fmt::format("generator has {} slots, asked for {}", slots(), slot));
  }
  const Variable& table = embeddings_.size() == 1 ? embeddings_.front() : embeddings_[slot];
  const std::size_t row = static_cast<std::size_t>(task);
  const Variable embedding = ad::select_rows(table, std::span<const std::size_t>(&row, 1));
  return {scale_heads_[slot].forward(embedding), shift_heads_[slot].forward(embedding)};
}

std::vector<Variable> ParameterGenerator::parameters() const {
  std::vector<Variable> out(embeddings_.begin(), embeddings_.end());
  for (std::size_t i = 0; i < slots(); ++i) {
    out.push_back(scale_heads_[i].weight());
    out.push_back(scale_heads_[i].bias());
    out.push_back(shift_heads_[i].weight());
    out.push_back(shift_heads_[i].bias());
  }
  return out;
}

void ParameterGenerator::append_parameters(NamedParameters& out) const {
  for (std::size_t i = 0; i < embeddings_.size(); ++i) {
    out.emplace_back(fmt::format("generator.embedding.{}", i), embeddings_[i]);
  }
  for (std::size_t i = 0; i < slots(); ++i) {
    scale_heads_[i].append_parameters(fmt::format("generator.{}.scale", i), out);
    shift_heads_[i].append_parameters(fmt::format("generator.{}.shift", i), out);
  }
}

ParameterGenerator ParameterGenerator::clone() const {
  ParameterGenerator copy;
  for (const auto& e : embeddings_) copy.embeddings_.push_back(clone_parameter(e));
  for (const auto& h : scale_heads_) copy.scale_heads_.push_back(h.clone());
  for (const auto& h : shift_heads_) copy.shift_heads_.push_back(h.clone());
  copy.tasks_ = tasks_;
  return copy;
}

// ---------------------------------------------------------------- ClassifierHeads

ClassifierHeads::ClassifierHeads(HeadMode mode, std::size_t feature_dim, std::size_t classes,
                                 Rng& rng)
    : mode_(mode), feature_dim_(feature_dim), classes_(classes) {
  if (classes == 0) throw ConfigError("classifier needs at least one class");
  if (mode_ == HeadMode::single) heads_.emplace(0, Linear(feature_dim_, classes_, rng));
}

const Linear& ClassifierHeads::add_head(int task, Rng& rng) {
  if (mode_ == HeadMode::single) return heads_.at(0);
  if (heads_.contains(task)) {
    throw AlreadyRegisteredError(fmt::format("head for task {} already registered", task));
  }
  return heads_.emplace(task, Linear(feature_dim_, classes_, rng)).first->second;
}

bool ClassifierHeads::has_head(int task) const {
  return mode_ == HeadMode::single || heads_.contains(task);
}

const Linear& ClassifierHeads::head(int task) const {
  if (mode_ == HeadMode::single) return heads_.at(0);
  auto it = heads_.find(task);
  if (it == heads_.end()) throw UnknownTaskError(fmt::format("no classifier head for task {}", task));
  return it->second;
}

Variable ClassifierHeads::classify(const Variable& features, int task) const {
  return head(task).forward(ad::relu(features));
}

std::vector<Variable> ClassifierHeads::parameters() const {
  std::vector<Variable> out;
  for (const auto& [task, head] : heads_) {
    out.push_back(head.weight());
    out.push_back(head.bias());
  }
  return out;
}

std::vector<Variable> ClassifierHeads::parameters(int task) const {
  const Linear& h = head(task);
  return {h.weight(), h.bias()};
}

void ClassifierHeads::append_parameters(NamedParameters& out) const {
  for (const auto& [task, head] : heads_) head.append_parameters(fmt::format("head.{}", task), out);
}

ClassifierHeads ClassifierHeads::clone() const {
  ClassifierHeads copy;
  copy.mode_ = mode_;
  copy.feature_dim_ = feature_dim_;
  copy.classes_ = classes_;
  for (const auto& [task, head] : heads_) copy.heads_.emplace(task, head.clone());
  return copy;
}

// ---------------------------------------------------------------- Discriminator

Discriminator::Discriminator(std::size_t feature_dim, std::size_t hidden, std::size_t max_tasks,
                             Rng& rng)
    : hidden_(feature_dim, hidden, rng), output_(hidden, max_tasks + 1, rng) {}

void Discriminator::check_capacity(std::size_t seen_tasks) const {
  if (seen_tasks > max_tasks()) {
    throw CapacityError(fmt::format("discriminator built for {} tasks, {} seen", max_tasks(),
                                    seen_tasks));
  }
}

MaskedLogits Discriminator::discriminate(const Variable& features, std::size_t seen_tasks) const {
  check_capacity(seen_tasks);
  return {output_.forward(ad::relu(hidden_.forward(features))), seen_tasks + 1};
}

MaskedLogits Discriminator::discriminate_frozen(const Variable& features,
                                                std::size_t seen_tasks) const {
  check_capacity(seen_tasks);
  return {output_.forward_frozen(ad::relu(hidden_.forward_frozen(features))), seen_tasks + 1};
}

std::vector<Variable> Discriminator::parameters() const {
  return {hidden_.weight(), hidden_.bias(), output_.weight(), output_.bias()};
}

void Discriminator::append_parameters(NamedParameters& out) const {
  hidden_.append_parameters("discriminator.hidden", out);
  output_.append_parameters("discriminator.output", out);
}

Discriminator Discriminator::clone() const {
  Discriminator copy;
  copy.hidden_ = hidden_.clone();
  copy.output_ = output_.clone();
  return copy;
}

// ---------------------------------------------------------------- ScaleModel

ScaleModel::ScaleModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config), head_rng_(make_stream(seed, streams::kHeadInit)) {
  if (config_.input_dim == 0) throw ConfigError("input_dim must be positive");
  Rng extractor_rng = make_stream(seed, streams::kExtractorInit);
  Rng generator_rng = make_stream(seed, streams::kGeneratorInit);
  Rng discriminator_rng = make_stream(seed, streams::kDiscriminatorInit);

  extractor_ = FeatureExtractor(config_.input_dim, config_.hidden, extractor_rng);
  std::vector<std::size_t> widths = config_.hidden;
  if (config_.transform == TransformMode::last_hidden) widths = {config_.hidden.back()};
  generator_ = ParameterGenerator(widths, config_.embedding_dim, config_.max_tasks,
                                  config_.shared_embedding, generator_rng);
  heads_ = ClassifierHeads(config_.head_mode, extractor_.output_dim(), config_.classes_per_head,
                           head_rng_);
  discriminator_ = Discriminator(extractor_.output_dim(), config_.discriminator_hidden,
                                 config_.max_tasks, discriminator_rng);
}

ScaleModel ScaleModel::clone() const {
  ScaleModel copy;
  copy.config_ = config_;
  copy.extractor_ = extractor_.clone();
  copy.generator_ = generator_.clone();
  copy.heads_ = heads_.clone();
  copy.discriminator_ = discriminator_.clone();
  copy.head_rng_ = head_rng_;
  return copy;
}

void ScaleModel::add_task(int task) {
  if (generator_.knows(task)) {
    throw AlreadyRegisteredError(fmt::format("task {} already registered", task));
  }
  if (task < 0 || static_cast<std::size_t>(task) >= config_.max_tasks) {
    throw CapacityError(fmt::format("task {} outside the capacity of {} tasks", task,
                                    config_.max_tasks));
  }
  generator_.register_task(task);
  heads_.add_head(task, head_rng_);
}

bool ScaleModel::knows_task(int task) const { return generator_.knows(task); }

std::vector<int> ScaleModel::tasks() const {
  return {generator_.tasks().begin(), generator_.tasks().end()};
}

bool ScaleModel::transforms_layer(std::size_t layer) const {
  switch (config_.transform) {
    case TransformMode::all_hidden:
      return true;
    case TransformMode::last_hidden:
      return layer + 1 == config_.hidden.size();
    case TransformMode::disabled:
      return false;
  }
  return false;
}

Variable ScaleModel::extract(const Variable& x) const { return extractor_.forward(x); }

Variable ScaleModel::task_features(const Variable& x, int task) const {
  if (!knows_task(task)) throw UnknownTaskError(fmt::format("task {} is not registered", task));
  if (x.cols() != extractor_.input_dim()) {
    throw ConfigError(fmt::format("model expects inputs of width {}, got {}",
                                  extractor_.input_dim(), x.value().shape_string()));
  }
  const auto& layers = extractor_.layers();
  Variable h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h = ad::relu(layers[l].forward(h));
    if (transforms_layer(l)) {
      const std::size_t slot = generator_.slots() == layers.size() ? l : generator_.slots() - 1;
      h = transform(h, generator_.generate(task, slot), config_.norm_eps);
    }
  }
  return h;
}

Variable ScaleModel::logits(const Variable& x, int task) const {
  return heads_.classify(task_features(x, task), task);
}

Tensor ScaleModel::snapshot_logits(const Tensor& x, int task) const {
  ad::NoGradGuard guard;
  return logits(Variable(x), task).value();
}

Tensor ScaleModel::snapshot_discriminator(const Tensor& x) const {
  ad::NoGradGuard guard;
  return discriminator_.discriminate(extract(Variable(x)), 0).logits.value();
}

NamedParameters ScaleModel::named_parameters() const {
  NamedParameters out;
  extractor_.append_parameters(out);
  heads_.append_parameters(out);
  generator_.append_parameters(out);
  discriminator_.append_parameters(out);
  return out;
}

std::vector<Tensor> parameter_values(const std::vector<Variable>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.value());
  return out;
}

}  // namespace scale
