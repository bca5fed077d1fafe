#include "dmlcmr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dmlcmr/error.hpp"
#include "dmlcmr/rng.hpp"

namespace dmlcmr {

void Dataset::validate() const {
  const auto n = y.size();
  if (x.rows() != n || c.rows() != n) {
    throw ShapeError("dataset: y, x and c must have the same number of rows (y=" +
                     std::to_string(n) + ", x=" + std::to_string(x.rows()) +
                     ", c=" + std::to_string(c.rows()) + ")");
  }
  if (x.cols() < 1 || c.cols() < 1) throw ShapeError("dataset: d_x and d_c must be >= 1");
  if (static_cast<Eigen::Index>(x_names.size()) != x.cols() ||
      static_cast<Eigen::Index>(c_names.size()) != c.cols() ||
      static_cast<Eigen::Index>(x_source.size()) != x.cols()) {
    throw ShapeError("dataset: column labels do not match matrix widths");
  }
  for (int src : x_source) {
    if (src < -1 || src >= c.cols()) throw ShapeError("dataset: x_source index out of range");
  }
  if (!y.allFinite() || !x.allFinite() || !c.allFinite()) {
    throw ArgumentError("dataset: non-finite entries");
  }
}

int Dataset::endogenous_column() const {
  int found = -1;
  for (int j = 0; j < static_cast<int>(x_source.size()); ++j) {
    if (x_source[j] < 0) {
      if (found >= 0) throw ArgumentError("dataset: more than one endogenous x column");
      found = j;
    }
  }
  if (found < 0) throw ArgumentError("dataset: no endogenous x column");
  return found;
}

Dataset Dataset::rows(std::span<const std::size_t> idx) const {
  Dataset out;
  const auto m = static_cast<Eigen::Index>(idx.size());
  out.y.resize(m);
  out.x.resize(m, x.cols());
  out.c.resize(m, c.cols());
  for (Eigen::Index r = 0; r < m; ++r) {
    const auto src = static_cast<Eigen::Index>(idx[r]);
    out.y(r) = y(src);
    out.x.row(r) = x.row(src);
    out.c.row(r) = c.row(src);
  }
  out.y_name = y_name;
  out.x_names = x_names;
  out.c_names = c_names;
  out.x_source = x_source;
  out.truth = truth;
  out.meta = meta;
  return out;
}

Dataset make_dataset(Vector y, Matrix x, Matrix c, std::string y_name,
                     std::vector<std::string> x_names, std::vector<std::string> c_names) {
  Dataset d;
  d.y = std::move(y);
  d.x = std::move(x);
  d.c = std::move(c);
  d.y_name = std::move(y_name);
  d.x_names = std::move(x_names);
  d.c_names = std::move(c_names);
  d.x_source.assign(d.x_names.size(), -1);
  for (std::size_t j = 0; j < d.x_names.size(); ++j) {
    auto it = std::find(d.c_names.begin(), d.c_names.end(), d.x_names[j]);
    if (it != d.c_names.end()) d.x_source[j] = static_cast<int>(it - d.c_names.begin());
  }
  d.validate();
  return d;
}

std::vector<std::size_t> FoldPlan::complement(int k) const {
  std::vector<char> in_fold(n_total, 0);
  for (auto i : folds.at(static_cast<std::size_t>(k))) in_fold[i] = 1;
  std::vector<std::size_t> out;
  out.reserve(n_total - folds[static_cast<std::size_t>(k)].size());
  for (std::size_t i = 0; i < n_total; ++i) {
    if (!in_fold[i]) out.push_back(i);
  }
  return out;
}

std::vector<int> FoldPlan::assignment() const {
  std::vector<int> a(n_total, -1);
  for (std::size_t k = 0; k < folds.size(); ++k) {
    for (auto i : folds[k]) a[i] = static_cast<int>(k);
  }
  return a;
}

FoldPlan make_fold_plan(std::size_t n, int k, std::uint64_t seed) {
  if (k < 2 || static_cast<std::size_t>(k) > n) {
    throw ArgumentError("make_fold_plan: need 2 <= k <= n (k=" + std::to_string(k) +
                        ", n=" + std::to_string(n) + ")");
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(perm[i - 1], perm[j]);
  }
  FoldPlan plan;
  plan.n_total = n;
  plan.folds.resize(static_cast<std::size_t>(k));
  const std::size_t base = n / static_cast<std::size_t>(k);
  const std::size_t extra = n % static_cast<std::size_t>(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < static_cast<std::size_t>(k); ++f) {
    const std::size_t size = base + (f < extra ? 1 : 0);
    plan.folds[f].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                         perm.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(plan.folds[f].begin(), plan.folds[f].end());
    pos += size;
  }
  return plan;
}

Standardiser::Standardiser(std::vector<std::string> names, std::vector<double> means,
                           std::vector<double> stds)
    : names_(std::move(names)), mean_(std::move(means)), std_(std::move(stds)) {
  if (mean_.size() != names_.size() || std_.size() != names_.size()) {
    throw ShapeError("standardiser: names/mean/std length mismatch");
  }
  for (std::size_t i = 0; i < std_.size(); ++i) {
    if (!(std_[i] > 0.0)) throw ArgumentError("standardiser: std must be > 0 for " + names_[i]);
  }
}

int Standardiser::find(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  return it == names_.end() ? -1 : static_cast<int>(it - names_.begin());
}

double Standardiser::apply_value(const std::string& name, double v) const {
  const int i = find(name);
  return i < 0 ? v : (v - mean_[i]) / std_[i];
}

double Standardiser::invert_value(const std::string& name, double v) const {
  const int i = find(name);
  return i < 0 ? v : v * std_[i] + mean_[i];
}

double Standardiser::scale_of(const std::string& name) const {
  const int i = find(name);
  return i < 0 ? 1.0 : std_[i];
}

double Standardiser::offset_of(const std::string& name) const {
  const int i = find(name);
  return i < 0 ? 0.0 : mean_[i];
}

Dataset Standardiser::transform(const Dataset& data, bool forward) const {
  Dataset out = data;
  auto map = [&](auto&& col, int i) {
    if (forward) {
      col = (col.array() - mean_[i]) / std_[i];
    } else {
      col = col.array() * std_[i] + mean_[i];
    }
  };
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const int ii = static_cast<int>(i);
    if (out.y_name == names_[i]) map(out.y, ii);
    for (int j = 0; j < out.dx(); ++j) {
      if (out.x_names[j] == names_[i]) map(out.x.col(j), ii);
    }
    for (int j = 0; j < out.dc(); ++j) {
      if (out.c_names[j] == names_[i]) map(out.c.col(j), ii);
    }
  }
  return out;
}

Dataset Standardiser::apply(const Dataset& data) const { return transform(data, true); }
Dataset Standardiser::invert(const Dataset& data) const { return transform(data, false); }

Json Standardiser::to_json() const {
  Json j = Json::array();
  for (std::size_t i = 0; i < names_.size(); ++i) {
    j.push_back({{"name", names_[i]}, {"mean", mean_[i]}, {"std", std_[i]}});
  }
  return j;
}

Standardiser Standardiser::from_json(const Json& j) {
  std::vector<std::string> names;
  std::vector<double> means, stds;
  for (const auto& e : j) {
    names.push_back(e.at("name").get<std::string>());
    means.push_back(e.at("mean").get<double>());
    stds.push_back(e.at("std").get<double>());
  }
  return Standardiser(std::move(names), std::move(means), std::move(stds));
}

namespace {

// First column carrying the variable, searching y, then x, then c.
const double* find_column(const Dataset& data, const std::string& name, Vector& scratch) {
  if (data.y_name == name) return data.y.data();
  for (int j = 0; j < data.dx(); ++j) {
    if (data.x_names[j] == name) {
      scratch = data.x.col(j);
      return scratch.data();
    }
  }
  for (int j = 0; j < data.dc(); ++j) {
    if (data.c_names[j] == name) {
      scratch = data.c.col(j);
      return scratch.data();
    }
  }
  return nullptr;
}

}  // namespace

Standardiser fit_standardiser(const Dataset& data, const std::vector<std::string>& names) {
  std::vector<double> means, stds;
  const auto n = data.size();
  if (n == 0) throw ArgumentError("fit_standardiser: empty dataset");
  for (const auto& name : names) {
    Vector scratch;
    const double* col = find_column(data, name, scratch);
    if (col == nullptr) throw ArgumentError("fit_standardiser: no column named '" + name + "'");
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += col[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (col[i] - mean) * (col[i] - mean);
    var /= static_cast<double>(n);
    if (!(var > 0.0)) throw ArgumentError("fit_standardiser: column '" + name + "' has zero variance");
    means.push_back(mean);
    stds.push_back(std::sqrt(var));
  }
  return Standardiser(names, std::move(means), std::move(stds));
}

}  // namespace dmlcmr
