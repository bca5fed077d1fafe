#pragma once

#include <span>
#include <vector>

#include "dmlcmr/dataset.hpp"

namespace dmlcmr {

/// Fixed feature map phi: R^d -> R^{d_phi} backing linear-in-basis models.
///
/// Inputs are normalised per column as (x - centre) / scale before the map is
/// applied; centre/scale are part of the map (see adapt_to()).
class BasisMap {
 public:
  enum class Kind { kIdentity, kPolynomial, kRadial, kTensor };

  /// One-dimensional factor of a tensor-product basis.
  struct Factor {
    enum class Type { kPolynomial, kRadial, kIndicator };
    int column = 0;
    Type type = Type::kPolynomial;
    int degree = 1;               // kPolynomial: 1, u, ..., u^degree
    std::vector<double> points;   // kRadial centres / kIndicator levels (normalised units for radial)
    double bandwidth = 1.0;       // kRadial
    double centre = 0.0;
    double scale = 1.0;

    int size() const;
    void evaluate(double v, double* out) const;
  };

  BasisMap() = default;

  /// phi(x) = x.
  static BasisMap identity(int d);
  /// All monomials of total degree <= degree; includes 1 when with_constant.
  static BasisMap polynomial(int d, int degree, bool with_constant = true);
  /// Gaussian bumps exp(-|u - centre_j|^2 / (2 h^2)) over normalised u.
  static BasisMap radial(Matrix centres, double bandwidth, bool with_constant = true);
  /// Products of one factor per listed column (every combination).
  static BasisMap tensor(int input_dim, std::vector<Factor> factors);

  Kind kind() const { return kind_; }
  int input_dim() const { return input_dim_; }
  int output_dim() const { return output_dim_; }

  /// Sets per-column centre/scale to the column mean/std of x (std floored at
  /// 1e-12 -> 1). Tensor factors are adapted for their own columns.
  BasisMap& adapt_to(const Matrix& x);
  BasisMap& set_normalisation(std::vector<double> centre, std::vector<double> scale);

  void evaluate(std::span<const double> x, std::span<double> out) const;
  Matrix transform(const Matrix& x) const;

  /// sum_m weights[m] * phi(x with x[column] = points[m]). `x` is scratch and
  /// is restored on return. Tensor maps with a single factor on `column`
  /// average that factor only.
  void expected(std::span<double> x, int column, std::span<const double> points,
                std::span<const double> weights, std::span<double> out) const;

  Json to_json() const;
  static BasisMap from_json(const Json& j);

 private:
  void finalise();

  Kind kind_ = Kind::kIdentity;
  int input_dim_ = 0;
  int output_dim_ = 0;
  bool with_constant_ = true;
  int degree_ = 1;
  std::vector<std::vector<int>> exponents_;  // polynomial
  Matrix centres_;                           // radial
  double bandwidth_ = 1.0;
  std::vector<Factor> factors_;              // tensor
  std::vector<double> centre_;
  std::vector<double> scale_;
};

}  // namespace dmlcmr
