#include "dmlcmr/structural.hpp"

#include "dmlcmr/error.hpp"

namespace dmlcmr {

namespace {
std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }
Vector from_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}
}  // namespace

CmrLayout CmrLayout::of(const Dataset& data) {
  CmrLayout l;
  l.x_source = data.x_source;
  l.endogenous = data.endogenous_column();
  l.dc = data.dc();
  return l;
}

void CmrLayout::fill_x(std::span<const double> c, double v, std::span<double> x) const {
  for (std::size_t j = 0; j < x_source.size(); ++j) {
    x[j] = x_source[j] < 0 ? v : c[static_cast<std::size_t>(x_source[j])];
  }
}

StructuralModel StructuralModel::linear(BasisMap basis) {
  Vector theta = Vector::Zero(basis.output_dim());
  return linear(std::move(basis), std::move(theta));
}

StructuralModel StructuralModel::linear(BasisMap basis, Vector theta) {
  if (theta.size() != basis.output_dim()) throw ShapeError("structural: theta length differs from basis dimension");
  StructuralModel m;
  m.arch_ = Arch::kLinearBasis;
  m.basis_ = std::move(basis);
  m.theta_ = std::move(theta);
  return m;
}

StructuralModel StructuralModel::feedforward(std::vector<int> hidden, Vector x_centre, Vector x_scale,
                                             std::uint64_t seed) {
  if (x_centre.size() != x_scale.size() || x_centre.size() < 1) throw ShapeError("structural: bad normalisation");
  StructuralModel m;
  m.arch_ = Arch::kFeedforward;
  m.sizes_.push_back(static_cast<int>(x_centre.size()));
  m.sizes_.insert(m.sizes_.end(), hidden.begin(), hidden.end());
  m.sizes_.push_back(1);
  Mlp net(m.sizes_);
  Rng rng(seed);
  net.init(rng);
  m.theta_ = net.params();
  m.centre_ = std::move(x_centre);
  m.scale_ = std::move(x_scale);
  return m;
}

StructuralModel StructuralModel::boosted_trees(int input_dim, TreeSettings settings) {
  if (input_dim < 1) throw ShapeError("structural: boosted trees need at least one input");
  if (settings.n_trees < 0 || settings.max_depth < 1 || settings.min_leaf < 1 || !(settings.learning_rate > 0.0)) {
    throw ArgumentError("structural: invalid boosted-tree settings");
  }
  StructuralModel m;
  m.arch_ = Arch::kBoostedTrees;
  m.input_dim_ = input_dim;
  m.tree_settings_ = settings;
  m.theta_ = Vector(0);
  return m;
}

void StructuralModel::set_trees(TreeEnsemble trees) {
  trees_ = std::move(trees);
  theta_.resize(static_cast<Eigen::Index>(trees_.nodes.size()));
  for (std::size_t q = 0; q < trees_.nodes.size(); ++q) theta_(static_cast<Eigen::Index>(q)) = trees_.nodes[q].value;
}

StructuralModel StructuralModel::constant(int input_dim, double value) {
  BasisMap b = BasisMap::polynomial(input_dim, 0, true);
  return linear(std::move(b), Vector::Constant(1, value));
}

int StructuralModel::input_dim() const {
  if (arch_ == Arch::kBoostedTrees) return input_dim_;
  return arch_ == Arch::kLinearBasis ? basis_.input_dim() : sizes_.front();
}

void StructuralModel::set_theta(const Vector& theta) {
  if (theta.size() != theta_.size()) throw ShapeError("structural: theta length mismatch");
  theta_ = theta;
  if (arch_ == Arch::kBoostedTrees) {
    for (std::size_t q = 0; q < trees_.nodes.size(); ++q) trees_.nodes[q].value = theta_(static_cast<Eigen::Index>(q));
  }
}

Mlp StructuralModel::net_with_theta() const {
  Mlp net(sizes_);
  net.params() = theta_;
  return net;
}

double StructuralModel::predict(std::span<const double> x) const {
  Matrix m(1, static_cast<Eigen::Index>(x.size()));
  for (std::size_t j = 0; j < x.size(); ++j) m(0, static_cast<Eigen::Index>(j)) = x[j];
  return predict(m)(0);
}

Vector StructuralModel::predict(const Matrix& x) const {
  if (x.cols() != input_dim()) throw ShapeError("structural: input width mismatch");
  if (x.rows() == 0) return Vector(0);
  if (arch_ == Arch::kLinearBasis) return basis_.transform(x) * theta_;
  if (arch_ == Arch::kBoostedTrees) return trees_.predict(x);
  const Matrix xz = (x.rowwise() - centre_.transpose()).array().rowwise() / scale_.transpose().array();
  return net_with_theta().forward(xz).col(0);
}

Vector StructuralModel::gradient(const Matrix& x, const Vector& dloss) const {
  if (x.cols() != input_dim()) throw ShapeError("structural: input width mismatch");
  if (arch_ == Arch::kLinearBasis) return basis_.transform(x).transpose() * dloss;
  if (arch_ == Arch::kBoostedTrees) throw ArgumentError("structural: boosted trees have no parameter gradient");
  const Matrix xz = (x.rowwise() - centre_.transpose()).array().rowwise() / scale_.transpose().array();
  const Mlp net = net_with_theta();
  Mlp::Cache cache;
  net.forward(xz, cache);
  return net.backward(cache, dloss);
}

Json StructuralModel::to_json() const {
  Json j{{"theta", to_vec(theta_)}};
  if (arch_ == Arch::kLinearBasis) {
    j["arch"] = "linear-in-basis";
    j["basis"] = basis_.to_json();
  } else if (arch_ == Arch::kBoostedTrees) {
    j["arch"] = "boosted-trees";
    j["input_dim"] = input_dim_;
    j["n_trees"] = tree_settings_.n_trees;
    j["learning_rate"] = tree_settings_.learning_rate;
    j["max_depth"] = tree_settings_.max_depth;
    j["min_leaf"] = tree_settings_.min_leaf;
    j["trees"] = trees_.to_json();
  } else {
    j["arch"] = "feedforward-net";
    j["sizes"] = sizes_;
    j["centre"] = to_vec(centre_);
    j["scale"] = to_vec(scale_);
  }
  return j;
}

StructuralModel StructuralModel::from_json(const Json& j) {
  const auto arch = j.at("arch").get<std::string>();
  const Vector theta = from_vec(j.at("theta").get<std::vector<double>>());
  if (arch == "linear-in-basis") return linear(BasisMap::from_json(j.at("basis")), theta);
  if (arch == "feedforward-net") {
    StructuralModel m;
    m.arch_ = Arch::kFeedforward;
    m.sizes_ = j.at("sizes").get<std::vector<int>>();
    m.centre_ = from_vec(j.at("centre").get<std::vector<double>>());
    m.scale_ = from_vec(j.at("scale").get<std::vector<double>>());
    if (theta.size() != Mlp(m.sizes_).num_params()) throw ShapeError("structural: theta length mismatch");
    m.theta_ = theta;
    return m;
  }
  if (arch == "boosted-trees") {
    TreeSettings ts;
    ts.n_trees = j.at("n_trees").get<int>();
    ts.learning_rate = j.at("learning_rate").get<double>();
    ts.max_depth = j.at("max_depth").get<int>();
    ts.min_leaf = j.at("min_leaf").get<int>();
    StructuralModel m = boosted_trees(j.at("input_dim").get<int>(), ts);
    m.set_trees(TreeEnsemble::from_json(j.at("trees")));
    if (theta.size() != m.theta_.size()) throw ShapeError("structural: theta length mismatch");
    m.set_theta(theta);
    return m;
  }
  throw ArgumentError("structural: unknown arch '" + arch + "'");
}

}  // namespace dmlcmr
