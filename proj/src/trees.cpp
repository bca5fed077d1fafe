#include "dmlcmr/trees.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dmlcmr/error.hpp"

namespace dmlcmr {

double TreeEnsemble::predict_row(const double* row, Eigen::Index stride) const {
  double v = base;
  for (int r : roots) {
    int q = r;
    while (nodes[static_cast<std::size_t>(q)].feature >= 0) {
      const auto& nd = nodes[static_cast<std::size_t>(q)];
      q = row[nd.feature * stride] <= nd.threshold ? nd.left : nd.right;
    }
    v += nodes[static_cast<std::size_t>(q)].value;
  }
  return v;
}

Vector TreeEnsemble::predict(const Matrix& x) const {
  Vector out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out(i) = predict_row(x.data() + i, x.rows());
  return out;
}

Json TreeEnsemble::to_json() const {
  std::vector<int> feat, left, right;
  std::vector<double> thr, val;
  for (const auto& nd : nodes) {
    feat.push_back(nd.feature);
    left.push_back(nd.left);
    right.push_back(nd.right);
    thr.push_back(nd.threshold);
    val.push_back(nd.value);
  }
  return {{"base", base}, {"roots", roots}, {"feature", feat}, {"threshold", thr},
          {"left", left}, {"right", right}, {"value", val}};
}

TreeEnsemble TreeEnsemble::from_json(const Json& j) {
  TreeEnsemble e;
  e.base = j.at("base").get<double>();
  e.roots = j.at("roots").get<std::vector<int>>();
  const auto feat = j.at("feature").get<std::vector<int>>();
  const auto left = j.at("left").get<std::vector<int>>();
  const auto right = j.at("right").get<std::vector<int>>();
  const auto thr = j.at("threshold").get<std::vector<double>>();
  const auto val = j.at("value").get<std::vector<double>>();
  const std::size_t m = feat.size();
  if (left.size() != m || right.size() != m || thr.size() != m || val.size() != m) {
    throw ArgumentError("trees: node arrays differ in length");
  }
  const int count = static_cast<int>(m);
  for (std::size_t q = 0; q < m; ++q) {
    if (feat[q] >= 0 && (left[q] <= static_cast<int>(q) || right[q] <= static_cast<int>(q) || left[q] >= count ||
                         right[q] >= count)) {
      throw ArgumentError("trees: child index out of range");
    }
    e.nodes.push_back({feat[q], thr[q], left[q], right[q], val[q]});
  }
  for (int r : e.roots) {
    if (r < 0 || r >= count) throw ArgumentError("trees: root index out of range");
  }
  return e;
}

std::vector<std::vector<Eigen::Index>> presort_columns(const Matrix& x) {
  std::vector<std::vector<Eigen::Index>> order(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index f = 0; f < x.cols(); ++f) {
    auto& o = order[static_cast<std::size_t>(f)];
    o.resize(static_cast<std::size_t>(x.rows()));
    std::iota(o.begin(), o.end(), Eigen::Index{0});
    std::stable_sort(o.begin(), o.end(), [&](Eigen::Index a, Eigen::Index b) { return x(a, f) < x(b, f); });
  }
  return order;
}

int grow_tree(TreeEnsemble& ens, const Matrix& x, const std::vector<std::vector<Eigen::Index>>& order,
              const Vector& resp, const Vector* weight, int max_depth, int min_leaf, std::vector<int>& leaf_of) {
  const Eigen::Index n = x.rows();
  const int d = static_cast<int>(x.cols());
  struct Local {
    double cnt, wsum, sum;
    double cnt_l, wsum_l, sum_l, last;
    double gain;
    int feature;
    double thr;
    bool open;
  };
  const double ml = static_cast<double>(min_leaf);
  auto w = [&](Eigen::Index i) { return weight ? (*weight)(i) : 1.0; };

  const int root = static_cast<int>(ens.nodes.size());
  ens.roots.push_back(root);
  ens.nodes.emplace_back();
  leaf_of.assign(static_cast<std::size_t>(n), root);
  std::vector<int> frontier{root};

  for (int depth = 0; depth < max_depth && !frontier.empty(); ++depth) {
    const int first = frontier.front();
    const int span = frontier.back() - first + 1;
    std::vector<Local> loc(static_cast<std::size_t>(span));
    for (auto& l : loc) l = Local{0, 0, 0, 0, 0, 0, 0, 0, -1, 0, false};
    for (int q : frontier) loc[static_cast<std::size_t>(q - first)].open = true;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int q = leaf_of[static_cast<std::size_t>(i)] - first;
      if (q < 0 || q >= span || !loc[static_cast<std::size_t>(q)].open) continue;
      Local& l = loc[static_cast<std::size_t>(q)];
      l.cnt += 1.0;
      l.wsum += w(i);
      l.sum += w(i) * resp(i);
    }
    for (int f = 0; f < d; ++f) {
      for (auto& l : loc) {
        l.cnt_l = 0;
        l.wsum_l = 0;
        l.sum_l = 0;
      }
      for (Eigen::Index i : order[static_cast<std::size_t>(f)]) {
        const int q = leaf_of[static_cast<std::size_t>(i)] - first;
        if (q < 0 || q >= span) continue;
        Local& l = loc[static_cast<std::size_t>(q)];
        if (!l.open) continue;
        const double v = x(i, f);
        if (l.cnt_l >= ml && l.cnt - l.cnt_l >= ml && v != l.last && l.wsum_l > 0.0 && l.wsum - l.wsum_l > 0.0) {
          const double sr = l.sum - l.sum_l;
          const double gain = l.sum_l * l.sum_l / l.wsum_l + sr * sr / (l.wsum - l.wsum_l) - l.sum * l.sum / l.wsum;
          if (gain > l.gain + 1e-12 * std::abs(l.gain)) {
            l.gain = gain;
            l.feature = f;
            double thr = l.last + 0.5 * (v - l.last);
            if (!(thr < v)) thr = l.last;
            l.thr = thr;
          }
        }
        l.cnt_l += 1.0;
        l.wsum_l += w(i);
        l.sum_l += w(i) * resp(i);
        l.last = v;
      }
    }
    std::vector<int> next;
    for (int q : frontier) {
      const Local& l = loc[static_cast<std::size_t>(q - first)];
      if (l.feature < 0 || !(l.gain > 0.0)) continue;
      const int left = static_cast<int>(ens.nodes.size());
      ens.nodes.emplace_back();
      ens.nodes.emplace_back();
      auto& nd = ens.nodes[static_cast<std::size_t>(q)];
      nd.feature = l.feature;
      nd.threshold = l.thr;
      nd.left = left;
      nd.right = left + 1;
      next.push_back(left);
      next.push_back(left + 1);
    }
    if (next.empty()) break;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int q = leaf_of[static_cast<std::size_t>(i)];
      const auto& nd = ens.nodes[static_cast<std::size_t>(q)];
      if (nd.feature >= 0) leaf_of[static_cast<std::size_t>(i)] = x(i, nd.feature) <= nd.threshold ? nd.left : nd.right;
    }
    frontier = std::move(next);
  }
  return root;
}

}  // namespace dmlcmr
