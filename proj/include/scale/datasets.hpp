#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "scale/autodiff.hpp"
#include "scale/rng.hpp"

namespace scale {

using ad::Tensor;

// Inputs (one row per sample) with integer class labels.
struct Dataset {
  Tensor inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return inputs.cols(); }
};

struct TaskData {
  int task = 0;
  Dataset train;
  Dataset test;
  std::vector<int> classes;  // original labels covered by this task
};

enum class Protocol { permuted, split };

struct TaskStream {
  std::vector<TaskData> tasks;
  Protocol protocol = Protocol::split;
  std::size_t classes_per_task = 0;
  std::size_t input_dim = 0;
};

// A minibatch of (x, y, t) triplets.
struct Batch {
  Tensor inputs;
  std::vector<int> labels;
  std::vector<int> tasks;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
};

Batch gather(const Dataset& data, std::span<const std::size_t> rows, int task);
Batch concat(const Batch& a, const Batch& b);

struct SyntheticSpec {
  Protocol protocol = Protocol::split;
  std::size_t n_tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t train_per_task = 200;
  std::size_t test_per_task = 100;
  std::size_t input_dim = 32;
  // Cluster centers are drawn N(0, center_scale^2) per coordinate; samples
  // add N(0, noise^2) per coordinate.
  double center_scale = 1.0;
  double noise = 1.0;
  // Each class is a mixture of this many equally weighted clusters.
  std::size_t clusters_per_class = 1;
  // When non-zero, split-protocol tasks draw their cluster centers from one
  // pool of this many centers shared by every task, each task assigning a
  // random subset to its classes. Zero gives every class private centers.
  std::size_t center_pool = 0;
  std::uint64_t seed = 0;
};

// Task k applies a fixed random pixel permutation (task 0: identity) to
// both splits. Labels are unchanged.
TaskStream make_permuted_stream(const Dataset& base_train, const Dataset& base_test,
                                std::size_t n_tasks, std::uint64_t seed);

// Consecutive label ranges become tasks; labels are remapped to
// 0..classes_per_task-1 within each task.
TaskStream make_split_stream(const Dataset& base_train, const Dataset& base_test,
                             std::size_t classes_per_task);

TaskStream make_synthetic(const SyntheticSpec& spec);

// Fixed permutation of `dim` indices used by task `task` of a permuted stream.
std::vector<std::size_t> task_permutation(std::size_t dim, std::size_t task, std::uint64_t seed);
Tensor permute_columns(const Tensor& inputs, std::span<const std::size_t> permutation);

// Rescales each task to [0,1] with per-feature min/max taken from its train
// split; the test split reuses the same statistics.
void standardize_per_task(TaskStream& stream);

// IDX binary files (big-endian): magic 0x00000803 for u8 images,
// 0x00000801 for u8 labels.
Tensor parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes);
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

// One seeded shuffle, then consecutive non-overlapping batches; the last
// batch may be short.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed);
std::vector<Batch> batches(const Dataset& split, std::size_t batch_size, std::uint64_t seed,
                           int task);

}  // namespace scale
