#include "dmlcmr/mlp.hpp"

#include <cmath>

#include "dmlcmr/error.hpp"

namespace dmlcmr {

Mlp::Mlp(std::vector<int> sizes) : sizes_(std::move(sizes)) {
  if (sizes_.size() < 2) throw ArgumentError("mlp: need input and output sizes");
  for (int s : sizes_) {
    if (s < 1) throw ArgumentError("mlp: layer sizes must be >= 1");
  }
  Eigen::Index off = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    offsets_.push_back(off);
    off += static_cast<Eigen::Index>(sizes_[l + 1]) * (sizes_[l] + 1);
  }
  params_ = Vector::Zero(off);
}

void Mlp::init(Rng& rng) {
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const int in = sizes_[l], out = sizes_[l + 1];
    const double bound = std::sqrt(6.0 / in);
    const Eigen::Index off = offsets_[l];
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(in) * out; ++k) {
      params_(off + k) = rng.uniform(-bound, bound);
    }
    params_.segment(off + static_cast<Eigen::Index>(in) * out, out).setZero();
  }
}

Matrix Mlp::forward(const Matrix& x) const {
  Cache cache;
  return forward(x, cache);
}

Matrix Mlp::forward(const Matrix& x, Cache& cache) const {
  if (x.cols() != sizes_.front()) throw ShapeError("mlp: input width mismatch");
  const std::size_t layers = sizes_.size() - 1;
  cache.acts.resize(layers);
  cache.acts[0] = x;
  Matrix out;
  for (std::size_t l = 0; l < layers; ++l) {
    const int in = sizes_[l], o = sizes_[l + 1];
    Eigen::Map<const Matrix> w(params_.data() + offsets_[l], o, in);
    Eigen::Map<const Vector> b(params_.data() + offsets_[l] + static_cast<Eigen::Index>(in) * o, o);
    Matrix z = cache.acts[l] * w.transpose();
    z.rowwise() += b.transpose();
    if (l + 1 < layers) {
      cache.acts[l + 1] = z.cwiseMax(0.0);
    } else {
      out = std::move(z);
    }
  }
  return out;
}

Vector Mlp::backward(const Cache& cache, const Matrix& d_out) const {
  const std::size_t layers = sizes_.size() - 1;
  Vector grad = Vector::Zero(params_.size());
  Matrix delta = d_out;
  for (std::size_t l = layers; l-- > 0;) {
    const int in = sizes_[l], o = sizes_[l + 1];
    Eigen::Map<const Matrix> w(params_.data() + offsets_[l], o, in);
    Eigen::Map<Matrix> gw(grad.data() + offsets_[l], o, in);
    Eigen::Map<Vector> gb(grad.data() + offsets_[l] + static_cast<Eigen::Index>(in) * o, o);
    gw.noalias() = delta.transpose() * cache.acts[l];
    gb = delta.colwise().sum().transpose();
    if (l > 0) {
      Matrix next = delta * w;
      delta = next.cwiseProduct((cache.acts[l].array() > 0.0).cast<double>().matrix());
    }
  }
  return grad;
}

Eigen::Map<Vector> Mlp::output_bias() {
  const std::size_t l = sizes_.size() - 2;
  const int in = sizes_[l], o = sizes_[l + 1];
  return Eigen::Map<Vector>(params_.data() + offsets_[l] + static_cast<Eigen::Index>(in) * o, o);
}

Json Mlp::to_json() const {
  return {{"sizes", sizes_},
          {"params", std::vector<double>(params_.data(), params_.data() + params_.size())}};
}

Mlp Mlp::from_json(const Json& j) {
  Mlp m(j.at("sizes").get<std::vector<int>>());
  const auto p = j.at("params").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(p.size()) != m.num_params()) {
    throw ShapeError("mlp: parameter count does not match layer sizes");
  }
  m.params_ = Eigen::Map<const Vector>(p.data(), static_cast<Eigen::Index>(p.size()));
  return m;
}

void AdamW::step(Vector& theta, const Vector& grad) {
  if (m.size() != theta.size()) {
    m = Vector::Zero(theta.size());
    v = Vector::Zero(theta.size());
    t = 0;
  }
  ++t;
  m = beta1 * m + (1.0 - beta1) * grad;
  v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  if (weight_decay > 0.0) theta *= (1.0 - lr * weight_decay);
  theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

}  // namespace dmlcmr
