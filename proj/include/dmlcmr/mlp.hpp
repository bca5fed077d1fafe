#pragma once

#include <vector>

#include "dmlcmr/dataset.hpp"
#include "dmlcmr/rng.hpp"

namespace dmlcmr {

/// Fully connected network, ReLU hidden layers, linear output.
///
/// Parameters are one flat vector: per layer the weight matrix (out x in,
/// column-major) followed by the bias.
class Mlp {
 public:
  struct Cache {
    std::vector<Matrix> acts;  // acts[0] = input, acts[l] = post-ReLU of layer l
  };

  Mlp() = default;
  explicit Mlp(std::vector<int> sizes);

  /// He-uniform weights, zero biases.
  void init(Rng& rng);

  const std::vector<int>& sizes() const { return sizes_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  Eigen::Index num_params() const { return params_.size(); }
  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

  /// Rows are samples.
  Matrix forward(const Matrix& x) const;
  Matrix forward(const Matrix& x, Cache& cache) const;
  /// Gradient of sum_i <d_out_i, out_i> with respect to the parameters.
  Vector backward(const Cache& cache, const Matrix& d_out) const;

  /// Mutable views into the output layer bias.
  Eigen::Map<Vector> output_bias();

  Json to_json() const;
  static Mlp from_json(const Json& j);

 private:
  Eigen::Index weight_offset(std::size_t layer) const { return offsets_[layer]; }

  std::vector<int> sizes_;
  std::vector<Eigen::Index> offsets_;
  Vector params_;
};

/// Adaptive moments with decoupled weight decay.
struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  Vector m;
  Vector v;
  long t = 0;

  void step(Vector& theta, const Vector& grad);
};

}  // namespace dmlcmr
