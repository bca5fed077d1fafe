#pragma once

#include <vector>

#include "dmlcmr/dataset.hpp"

namespace dmlcmr {

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;
};

/// Additive ensemble of axis-aligned trees: base + sum of leaf values.
struct TreeEnsemble {
  double base = 0.0;
  std::vector<int> roots;
  std::vector<TreeNode> nodes;

  /// Row i of a column-major matrix is row[j * stride].
  double predict_row(const double* row, Eigen::Index stride) const;
  Vector predict(const Matrix& x) const;

  Json to_json() const;
  static TreeEnsemble from_json(const Json& j);
};

/// Per-column row order, computed once and reused by every tree.
std::vector<std::vector<Eigen::Index>> presort_columns(const Matrix& x);

/// Grows one least-squares tree on `resp` with optional point weights, using
/// exact greedy splits. Leaves hold at least `min_leaf` points. Appends the
/// nodes to `ens` (leaf values 0) and writes each point's leaf to `leaf_of`.
/// Returns the root index.
int grow_tree(TreeEnsemble& ens, const Matrix& x, const std::vector<std::vector<Eigen::Index>>& order,
              const Vector& resp, const Vector* weight, int max_depth, int min_leaf, std::vector<int>& leaf_of);

}  // namespace dmlcmr
