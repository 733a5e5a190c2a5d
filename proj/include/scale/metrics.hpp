#pragma once

#include <cstddef>
#include <optional>
#include <vector>

namespace scale {

// Lower-triangular matrix: row k holds accuracies on tasks 0..k measured
// right after training task k. Indices are 0-based here; acc(R, K) and
// fm(R, K) take the 1-based task count K.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::vector<std::vector<double>> rows);

  // Appends the row for the next trained task; its length must equal the
  // number of rows after appending.
  void append(std::vector<double> row);

  std::size_t tasks() const { return rows_.size(); }
  double at(std::size_t k, std::size_t j) const;
  const std::vector<std::vector<double>>& rows() const { return rows_; }

  friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

 private:
  std::vector<std::vector<double>> rows_;
};

// Mean of row K.
double acc(const AccuracyMatrix& r, std::size_t k);
// Mean over tasks j < K of the drop from the best earlier accuracy on j
// to the accuracy after task K. Negative values (backward transfer) are kept.
double fm(const AccuracyMatrix& r, std::size_t k);

double final_acc(const AccuracyMatrix& r);
std::optional<double> final_fm(const AccuracyMatrix& r);

}  // namespace scale
