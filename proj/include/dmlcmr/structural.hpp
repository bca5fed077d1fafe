#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dmlcmr/basis.hpp"
#include "dmlcmr/dataset.hpp"
#include "dmlcmr/mlp.hpp"
#include "dmlcmr/trees.hpp"

namespace dmlcmr {

/// How an x row is assembled from a c row and one draw of the endogenous
/// variable.
struct CmrLayout {
  std::vector<int> x_source;  // per x column: c column index, or -1
  int endogenous = 0;         // the x column drawn from the conditional density
  int dc = 0;

  static CmrLayout of(const Dataset& data);
  int dx() const { return static_cast<int>(x_source.size()); }
  /// Writes x (length dx) for conditioning row c and endogenous value v.
  void fill_x(std::span<const double> c, double v, std::span<double> x) const;
};

/// The structural function f_theta.
///   linear-in-basis:  f(x) = theta' phi(x)
///   feedforward-net:  f(x) = net_theta((x - centre) / scale)
///   boosted-trees:    f(x) = base + sum of tree leaf values; theta holds the
///                     node values and the tree shapes come from the fit.
class StructuralModel {
 public:
  enum class Arch { kLinearBasis, kFeedforward, kBoostedTrees };

  struct TreeSettings {
    int n_trees = 500;
    double learning_rate = 0.1;
    int max_depth = 3;
    int min_leaf = 10;
  };

  StructuralModel() = default;
  static StructuralModel linear(BasisMap basis);
  static StructuralModel linear(BasisMap basis, Vector theta);
  static StructuralModel feedforward(std::vector<int> hidden, Vector x_centre, Vector x_scale, std::uint64_t seed);
  /// Empty ensemble (f = 0) grown later by the boosting solver.
  static StructuralModel boosted_trees(int input_dim, TreeSettings settings);
  /// Constant function (linear model on a single constant feature).
  static StructuralModel constant(int input_dim, double value);

  Arch arch() const { return arch_; }
  int input_dim() const;
  const Vector& theta() const { return theta_; }
  void set_theta(const Vector& theta);
  const BasisMap& basis() const { return basis_; }
  const TreeSettings& tree_settings() const { return tree_settings_; }
  const TreeEnsemble& trees() const { return trees_; }
  /// Replaces the ensemble; theta becomes its node values.
  void set_trees(TreeEnsemble trees);

  double predict(std::span<const double> x) const;
  /// Throws ShapeError when the width differs from input_dim().
  Vector predict(const Matrix& x) const;
  /// Gradient of sum_i dloss[i] * f(x_i) with respect to theta. Not
  /// available for boosted trees.
  Vector gradient(const Matrix& x, const Vector& dloss) const;

  Json to_json() const;
  static StructuralModel from_json(const Json& j);

 private:
  Mlp net_with_theta() const;

  Arch arch_ = Arch::kLinearBasis;
  BasisMap basis_;
  Vector theta_;
  std::vector<int> sizes_;  // feedforward layer sizes
  Vector centre_;
  Vector scale_;
  int input_dim_ = 0;  // boosted trees
  TreeSettings tree_settings_;
  TreeEnsemble trees_;
};

}  // namespace dmlcmr
