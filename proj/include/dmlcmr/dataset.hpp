#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace dmlcmr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Json = nlohmann::json;

/// Ground truth attached to synthetic datasets.
struct GroundTruth {
  enum class Kind { kAnalyticF0, kDoIntervention };
  Kind kind = Kind::kAnalyticF0;
  /// Structural function on one x row (length d_x). Empty for kDoIntervention.
  std::function<double(std::span<const double>)> f0;
};

/// Samples of a conditional moment restriction E[Y - f(X) | C] = 0.
///
/// Columns of x are either endogenous (modelled by a conditional density given
/// c) or pass-through copies of a c column (context variables that appear on
/// both sides, e.g. (t, s) in the demand problem). x_source records which.
struct Dataset {
  Vector y;
  Matrix x;
  Matrix c;
  std::string y_name = "y";
  std::vector<std::string> x_names;
  std::vector<std::string> c_names;
  /// For each x column: index of the c column it copies, or -1 if endogenous.
  std::vector<int> x_source;
  std::shared_ptr<const GroundTruth> truth;
  /// Provenance: generator name, params, seed.
  Json meta = Json::object();

  std::size_t size() const { return static_cast<std::size_t>(y.size()); }
  int dx() const { return static_cast<int>(x.cols()); }
  int dc() const { return static_cast<int>(c.cols()); }

  /// Throws ShapeError / ArgumentError when the Dataset invariants fail.
  void validate() const;
  /// The single endogenous x column; throws ArgumentError if there is not
  /// exactly one.
  int endogenous_column() const;
  /// Copy restricted to the given rows (in the given order).
  Dataset rows(std::span<const std::size_t> idx) const;
};

/// Builds a dataset and derives x_source by matching x names against c names.
Dataset make_dataset(Vector y, Matrix x, Matrix c, std::string y_name,
                     std::vector<std::string> x_names, std::vector<std::string> c_names);

/// K disjoint index sets covering [0, n).
struct FoldPlan {
  std::vector<std::vector<std::size_t>> folds;
  std::size_t n_total = 0;

  int k() const { return static_cast<int>(folds.size()); }
  /// Sorted indices of every row not in fold k.
  std::vector<std::size_t> complement(int k) const;
  /// Fold id of every row.
  std::vector<int> assignment() const;
};

/// Random balanced partition. The first (n mod k) folds hold ceil(n/k) rows,
/// the rest floor(n/k). Each fold is stored sorted. Requires 2 <= k <= n.
FoldPlan make_fold_plan(std::size_t n, int k, std::uint64_t seed);

/// Per-variable affine standardisation, population (divide-by-n) std.
///
/// Variables are addressed by name, so a variable that appears both as an x
/// and a c column (pass-through action in PCL) is transformed consistently.
class Standardiser {
 public:
  Standardiser() = default;
  Standardiser(std::vector<std::string> names, std::vector<double> means, std::vector<double> stds);

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<double>& means() const { return mean_; }
  const std::vector<double>& stds() const { return std_; }
  bool empty() const { return names_.empty(); }

  Dataset apply(const Dataset& data) const;
  Dataset invert(const Dataset& data) const;

  double apply_value(const std::string& name, double v) const;
  double invert_value(const std::string& name, double v) const;
  /// Scale of a variable (1 if not standardised).
  double scale_of(const std::string& name) const;
  double offset_of(const std::string& name) const;

  Json to_json() const;
  static Standardiser from_json(const Json& j);

 private:
  int find(const std::string& name) const;
  Dataset transform(const Dataset& data, bool forward) const;

  std::vector<std::string> names_;
  std::vector<double> mean_;
  std::vector<double> std_;
};

/// Throws ArgumentError naming the column when a selected variable is absent
/// or has zero variance.
Standardiser fit_standardiser(const Dataset& data, const std::vector<std::string>& names);

}  // namespace dmlcmr
