#include "scale/metrics.hpp"

#include <algorithm>

#include <fmt/core.h>

#include "scale/errors.hpp"

namespace scale {

AccuracyMatrix::AccuracyMatrix(std::vector<std::vector<double>> rows) {
  for (auto& row : rows) append(std::move(row));
}

void AccuracyMatrix::append(std::vector<double> row) {
  if (row.size() != rows_.size() + 1) {
    throw ContractError(fmt::format("accuracy row {} needs {} entries, got {}", rows_.size() + 1,
                                    rows_.size() + 1, row.size()));
  }
  for (double v : row) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError(fmt::format("accuracy {} outside [0,1]", v));
  }
  rows_.push_back(std::move(row));
}

double AccuracyMatrix::at(std::size_t k, std::size_t j) const {
  if (k >= rows_.size() || j > k) {
    throw IndexError(fmt::format("accuracy entry ({}, {}) undefined for {} tasks", k, j,
                                 rows_.size()));
  }
  return rows_[k][j];
}

double acc(const AccuracyMatrix& r, std::size_t k) {
  if (k < 1 || k > r.tasks()) {
    throw ContractError(fmt::format("ACC after task {} needs that row; {} rows present", k,
                                    r.tasks()));
  }
  const auto& row = r.rows()[k - 1];
  double total = 0.0;
  for (double v : row) total += v;
  return total / static_cast<double>(k);
}

double fm(const AccuracyMatrix& r, std::size_t k) {
  if (k < 2) throw ContractError("forgetting is undefined before the second task");
  if (k > r.tasks()) {
    throw ContractError(fmt::format("FM after task {} with only {} rows", k, r.tasks()));
  }
  double total = 0.0;
  for (std::size_t j = 0; j + 1 < k; ++j) {
    double best = r.at(j, j);
    for (std::size_t l = j + 1; l + 1 < k; ++l) best = std::max(best, r.at(l, j));
    total += best - r.at(k - 1, j);
  }
  return total / static_cast<double>(k - 1);
}

double final_acc(const AccuracyMatrix& r) { return acc(r, r.tasks()); }

std::optional<double> final_fm(const AccuracyMatrix& r) {
  if (r.tasks() < 2) return std::nullopt;
  return fm(r, r.tasks());
}

}  // namespace scale
