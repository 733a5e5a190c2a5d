#include "scale/datasets.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include <fmt/core.h>

#include "scale/errors.hpp"

namespace scale {

namespace {

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(rng, i)]);
  }
}

Dataset select(const Dataset& data, std::span<const std::size_t> rows) {
  Dataset out;
  out.inputs = Tensor(rows.size(), data.dim());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::ranges::copy(data.inputs.row(rows[i]), out.inputs.row(i).begin());
    out.labels.push_back(data.labels[rows[i]]);
  }
  return out;
}

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("cannot open IDX file {}", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Balanced samples of `classes` classes; row c * modes + m of `centers` is
// mode m of class c.
Dataset sample_clusters(const Tensor& centers, std::size_t classes, std::size_t count,
                        double noise, Rng& rng) {
  const std::size_t modes = centers.rows() / classes;
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset out;
  out.inputs = Tensor(count, centers.cols());
  out.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = i % classes;
    const std::size_t center = c * modes + (i / classes) % modes;
    out.labels[i] = static_cast<int>(c);
    for (std::size_t d = 0; d < centers.cols(); ++d) {
      out.inputs(i, d) = centers(center, d) + noise * normal(rng);
    }
  }
  return out;
}

}  // namespace

Batch gather(const Dataset& data, std::span<const std::size_t> rows, int task) {
  Dataset picked = select(data, rows);
  Batch b;
  b.inputs = std::move(picked.inputs);
  b.labels = std::move(picked.labels);
  b.tasks.assign(b.labels.size(), task);
  return b;
}

Batch concat(const Batch& a, const Batch& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.inputs.cols() != b.inputs.cols()) {
    throw DimensionError(fmt::format("cannot concatenate batches of width {} and {}",
                                     a.inputs.cols(), b.inputs.cols()));
  }
  std::vector<double> data(a.inputs.data().begin(), a.inputs.data().end());
  data.insert(data.end(), b.inputs.data().begin(), b.inputs.data().end());
  Batch out;
  out.inputs = Tensor(a.size() + b.size(), a.inputs.cols(), std::move(data));
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.tasks = a.tasks;
  out.tasks.insert(out.tasks.end(), b.tasks.begin(), b.tasks.end());
  return out;
}

std::vector<std::size_t> task_permutation(std::size_t dim, std::size_t task, std::uint64_t seed) {
  std::vector<std::size_t> perm(dim);
  std::iota(perm.begin(), perm.end(), 0);
  if (task == 0) return perm;
  Rng rng = make_stream(seed, 1000 + task);
  shuffle(perm, rng);
  return perm;
}

Tensor permute_columns(const Tensor& inputs, std::span<const std::size_t> permutation) {
  if (permutation.size() != inputs.cols()) {
    throw DimensionError(fmt::format("permutation of {} entries for inputs {}", permutation.size(),
                                     inputs.shape_string()));
  }
  Tensor out(inputs.rows(), inputs.cols());
  for (std::size_t r = 0; r < inputs.rows(); ++r) {
    for (std::size_t c = 0; c < inputs.cols(); ++c) out(r, c) = inputs(r, permutation[c]);
  }
  return out;
}

TaskStream make_permuted_stream(const Dataset& base_train, const Dataset& base_test,
                                std::size_t n_tasks, std::uint64_t seed) {
  if (n_tasks < 1) throw ConfigError("a permuted stream needs at least one task");
  if (base_train.dim() != base_test.dim()) {
    throw ConfigError("train and test splits differ in input width");
  }
  TaskStream stream;
  stream.protocol = Protocol::permuted;
  stream.input_dim = base_train.dim();
  const int max_label = std::max(
      base_train.labels.empty() ? 0 : *std::ranges::max_element(base_train.labels),
      base_test.labels.empty() ? 0 : *std::ranges::max_element(base_test.labels));
  stream.classes_per_task = static_cast<std::size_t>(max_label) + 1;
  std::vector<int> classes(stream.classes_per_task);
  std::iota(classes.begin(), classes.end(), 0);

  for (std::size_t k = 0; k < n_tasks; ++k) {
    const auto perm = task_permutation(stream.input_dim, k, seed);
    TaskData task;
    task.task = static_cast<int>(k);
    task.train = {permute_columns(base_train.inputs, perm), base_train.labels};
    task.test = {permute_columns(base_test.inputs, perm), base_test.labels};
    task.classes = classes;
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

TaskStream make_split_stream(const Dataset& base_train, const Dataset& base_test,
                             std::size_t classes_per_task) {
  if (classes_per_task == 0) throw ConfigError("classes_per_task must be positive");
  const int max_label = *std::ranges::max_element(base_train.labels);
  const auto total = static_cast<std::size_t>(max_label) + 1;
  if (total % classes_per_task != 0) {
    throw ConfigError(fmt::format("{} classes cannot be split into tasks of {}", total,
                                  classes_per_task));
  }
  TaskStream stream;
  stream.protocol = Protocol::split;
  stream.classes_per_task = classes_per_task;
  stream.input_dim = base_train.dim();

  auto part = [classes_per_task](const Dataset& data, std::size_t k) {
    const int lo = static_cast<int>(k * classes_per_task);
    const int hi = lo + static_cast<int>(classes_per_task);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data.labels[i] >= lo && data.labels[i] < hi) rows.push_back(i);
    }
    Dataset out = select(data, rows);
    for (auto& y : out.labels) y -= lo;
    return out;
  };

  for (std::size_t k = 0; k < total / classes_per_task; ++k) {
    TaskData task;
    task.task = static_cast<int>(k);
    task.train = part(base_train, k);
    task.test = part(base_test, k);
    for (std::size_t c = 0; c < classes_per_task; ++c) {
      task.classes.push_back(static_cast<int>(k * classes_per_task + c));
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

TaskStream make_synthetic(const SyntheticSpec& spec) {
  if (spec.n_tasks == 0 || spec.classes_per_task == 0 || spec.input_dim == 0 ||
      spec.clusters_per_class == 0) {
    throw ConfigError("synthetic stream needs tasks, classes, clusters and input width");
  }
  const std::size_t modes = spec.clusters_per_class;
  Rng rng = make_stream(spec.seed, streams::kData);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t per_task = spec.classes_per_task * modes;
  const std::size_t classes = spec.protocol == Protocol::split ? spec.n_tasks * spec.classes_per_task
                                                         : spec.classes_per_task;
  if (spec.protocol == Protocol::split && spec.center_pool != 0 && spec.center_pool < per_task) {
    throw ConfigError(fmt::format("center pool of {} cannot cover {} clusters per task",
                                  spec.center_pool, per_task));
  }
  const bool pooled = spec.protocol == Protocol::split && spec.center_pool != 0;
  Tensor pool(pooled ? spec.center_pool : classes * modes, spec.input_dim);
  for (auto& v : pool.data()) v = spec.center_scale * normal(rng);

  // Row block k holds the per_task centers of task k, class-major.
  Tensor centers = pool;
  if (pooled) {
    centers = Tensor(spec.n_tasks * per_task, spec.input_dim);
    std::vector<std::size_t> order(spec.center_pool);
    for (std::size_t k = 0; k < spec.n_tasks; ++k) {
      std::iota(order.begin(), order.end(), 0);
      shuffle(order, rng);
      for (std::size_t i = 0; i < per_task; ++i) {
        std::ranges::copy(pool.row(order[i]), centers.row(k * per_task + i).begin());
      }
    }
  }

  TaskStream stream;
  if (spec.protocol == Protocol::split) {
    // Per-task draws keep every task at exactly train_per_task samples.
    Dataset train;
    Dataset test;
    std::vector<double> train_rows;
    std::vector<double> test_rows;
    for (std::size_t k = 0; k < spec.n_tasks; ++k) {
      const std::size_t first = k * per_task;
      Tensor local(per_task, spec.input_dim);
      for (std::size_t c = 0; c < local.rows(); ++c) {
        std::ranges::copy(centers.row(first + c), local.row(c).begin());
      }
      const int offset = static_cast<int>(k * spec.classes_per_task);
      Dataset tr = sample_clusters(local, spec.classes_per_task, spec.train_per_task, spec.noise, rng);
      Dataset te = sample_clusters(local, spec.classes_per_task, spec.test_per_task, spec.noise, rng);
      train_rows.insert(train_rows.end(), tr.inputs.data().begin(), tr.inputs.data().end());
      test_rows.insert(test_rows.end(), te.inputs.data().begin(), te.inputs.data().end());
      for (int y : tr.labels) train.labels.push_back(y + offset);
      for (int y : te.labels) test.labels.push_back(y + offset);
    }
    train.inputs = Tensor(train.labels.size(), spec.input_dim, std::move(train_rows));
    test.inputs = Tensor(test.labels.size(), spec.input_dim, std::move(test_rows));
    stream = make_split_stream(train, test, spec.classes_per_task);
  } else {
    Dataset train = sample_clusters(centers, classes, spec.train_per_task, spec.noise, rng);
    Dataset test = sample_clusters(centers, classes, spec.test_per_task, spec.noise, rng);
    stream = make_permuted_stream(train, test, spec.n_tasks, spec.seed);
  }
  standardize_per_task(stream);
  return stream;
}

void standardize_per_task(TaskStream& stream) {
  for (auto& task : stream.tasks) {
    const Tensor& train = task.train.inputs;
    if (train.rows() == 0) continue;
    std::vector<double> lo(train.cols()), span(train.cols());
    for (std::size_t c = 0; c < train.cols(); ++c) {
      double mn = train(0, c), mx = train(0, c);
      for (std::size_t r = 1; r < train.rows(); ++r) {
        mn = std::min(mn, train(r, c));
        mx = std::max(mx, train(r, c));
      }
      lo[c] = mn;
      span[c] = mx > mn ? mx - mn : 1.0;
    }
    for (Tensor* t : {&task.train.inputs, &task.test.inputs}) {
      for (std::size_t r = 0; r < t->rows(); ++r) {
        for (std::size_t c = 0; c < t->cols(); ++c) (*t)(r, c) = ((*t)(r, c) - lo[c]) / span[c];
      }
    }
  }
}

Tensor parse_idx_images(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) throw FormatError("IDX image file truncated before its header ends");
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != 0x00000803u) {
    throw FormatError(fmt::format("bad IDX image magic 0x{:08x}, expected 0x00000803", magic));
  }
  const std::size_t count = read_be32(bytes, 4);
  const std::size_t rows = read_be32(bytes, 8);
  const std::size_t cols = read_be32(bytes, 12);
  const std::size_t pixels = rows * cols;
  if (bytes.size() - 16 < count * pixels) {
    throw FormatError(fmt::format("IDX image payload truncated: {} images of {} pixels need {} "
                                  "bytes, found {}",
                                  count, pixels, count * pixels, bytes.size() - 16));
  }
  Tensor out(count, pixels);
  for (std::size_t i = 0; i < count * pixels; ++i) out[i] = bytes[16 + i] / 255.0;
  return out;
}

std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw FormatError("IDX label file truncated before its header ends");
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != 0x00000801u) {
    throw FormatError(fmt::format("bad IDX label magic 0x{:08x}, expected 0x00000801", magic));
  }
  const std::size_t count = read_be32(bytes, 4);
  if (bytes.size() - 8 < count) {
    throw FormatError(fmt::format("IDX label payload truncated: {} labels, found {} bytes", count,
                                  bytes.size() - 8));
  }
  return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  Dataset out;
  out.inputs = parse_idx_images(read_file(images));
  out.labels = parse_idx_labels(read_file(labels));
  if (out.inputs.rows() != out.labels.size()) {
    throw FormatError(fmt::format("IDX count mismatch: {} images but {} labels",
                                  out.inputs.rows(), out.labels.size()));
  }
  return out;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_stream(seed, streams::kBatchOrder);
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return out;
}

std::vector<Batch> batches(const Dataset& split, std::size_t batch_size, std::uint64_t seed,
                           int task) {
  std::vector<Batch> out;
  for (const auto& rows : batch_indices(split.size(), batch_size, seed)) {
    out.push_back(gather(split, rows, task));
  }
  return out;
}

}  // namespace scale
