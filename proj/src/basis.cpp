#include "dmlcmr/basis.hpp"

#include <cmath>
#include <algorithm>
#include <functional>

#include "dmlcmr/error.hpp"

namespace dmlcmr {

namespace {

void enumerate_exponents(int d, int degree, bool with_constant,
                         std::vector<std::vector<int>>& out) {
  // Graded order: all monomials of degree 0, then 1, ...
  std::vector<int> e(static_cast<std::size_t>(d), 0);
  for (int total = with_constant ? 0 : 1; total <= degree; ++total) {
    // Enumerate compositions of `total` into d parts, lexicographically descending.
    std::function<void(int, int)> rec = [&](int pos, int left) {
      if (pos == d - 1) {
        e[static_cast<std::size_t>(pos)] = left;
        out.push_back(e);
        return;
      }
      for (int v = left; v >= 0; --v) {
        e[static_cast<std::size_t>(pos)] = v;
        rec(pos + 1, left - v);
      }
    };
    rec(0, total);
  }
}

const char* type_name(BasisMap::Factor::Type t) {
  switch (t) {
    case BasisMap::Factor::Type::kPolynomial: return "polynomial";
    case BasisMap::Factor::Type::kRadial: return "radial";
    case BasisMap::Factor::Type::kIndicator: return "indicator";
  }
  return "?";
}

}  // namespace

int BasisMap::Factor::size() const {
  switch (type) {
    case Type::kPolynomial: return degree + 1;
    case Type::kRadial: return static_cast<int>(points.size()) + 1;
    case Type::kIndicator: return static_cast<int>(points.size());
  }
  return 0;
}

void BasisMap::Factor::evaluate(double v, double* out) const {
  switch (type) {
    case Type::kPolynomial: {
      const double u = (v - centre) / scale;
      double p = 1.0;
      for (int k = 0; k <= degree; ++k) {
        out[k] = p;
        p *= u;
      }
      break;
    }
    case Type::kRadial: {
      const double u = (v - centre) / scale;
      const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
      out[0] = 1.0;
      for (std::size_t k = 0; k < points.size(); ++k) {
        const double d = u - points[k];
        out[k + 1] = std::exp(-d * d * inv);
      }
      break;
    }
    case Type::kIndicator:
      for (std::size_t k = 0; k < points.size(); ++k) out[k] = (v == points[k]) ? 1.0 : 0.0;
      break;
  }
}

BasisMap BasisMap::identity(int d) {
  if (d < 1) throw ArgumentError("basis: input dimension must be >= 1");
  BasisMap b;
  b.kind_ = Kind::kIdentity;
  b.input_dim_ = d;
  b.with_constant_ = false;
  b.finalise();
  return b;
}

BasisMap BasisMap::polynomial(int d, int degree, bool with_constant) {
  if (d < 1 || degree < 0) throw ArgumentError("basis: polynomial needs d >= 1, degree >= 0");
  if (!with_constant && degree < 1) throw ArgumentError("basis: empty polynomial basis");
  BasisMap b;
  b.kind_ = Kind::kPolynomial;
  b.input_dim_ = d;
  b.degree_ = degree;
  b.with_constant_ = with_constant;
  enumerate_exponents(d, degree, with_constant, b.exponents_);
  b.finalise();
  return b;
}

BasisMap BasisMap::radial(Matrix centres, double bandwidth, bool with_constant) {
  if (centres.rows() < 1 || centres.cols() < 1) throw ArgumentError("basis: radial needs centres");
  if (!(bandwidth > 0.0)) throw ArgumentError("basis: radial bandwidth must be > 0");
  BasisMap b;
  b.kind_ = Kind::kRadial;
  b.input_dim_ = static_cast<int>(centres.cols());
  b.centres_ = std::move(centres);
  b.bandwidth_ = bandwidth;
  b.with_constant_ = with_constant;
  b.finalise();
  return b;
}

BasisMap BasisMap::tensor(int input_dim, std::vector<Factor> factors) {
  if (factors.empty()) throw ArgumentError("basis: tensor needs at least one factor");
  for (const auto& f : factors) {
    if (f.column < 0 || f.column >= input_dim) throw ArgumentError("basis: factor column out of range");
    if (f.size() < 1) throw ArgumentError("basis: empty factor");
    if (!(f.scale > 0.0)) throw ArgumentError("basis: factor scale must be > 0");
  }
  BasisMap b;
  b.kind_ = Kind::kTensor;
  b.input_dim_ = input_dim;
  b.factors_ = std::move(factors);
  b.finalise();
  return b;
}

void BasisMap::finalise() {
  centre_.assign(static_cast<std::size_t>(input_dim_), 0.0);
  scale_.assign(static_cast<std::size_t>(input_dim_), 1.0);
  switch (kind_) {
    case Kind::kIdentity: output_dim_ = input_dim_; break;
    case Kind::kPolynomial: output_dim_ = static_cast<int>(exponents_.size()); break;
    case Kind::kRadial:
      output_dim_ = static_cast<int>(centres_.rows()) + (with_constant_ ? 1 : 0);
      break;
    case Kind::kTensor:
      output_dim_ = 1;
      for (const auto& f : factors_) output_dim_ *= f.size();
      break;
  }
}

BasisMap& BasisMap::set_normalisation(std::vector<double> centre, std::vector<double> scale) {
  if (static_cast<int>(centre.size()) != input_dim_ || static_cast<int>(scale.size()) != input_dim_) {
    throw ShapeError("basis: normalisation length must equal input dimension");
  }
  for (double s : scale) {
    if (!(s > 0.0)) throw ArgumentError("basis: scale must be > 0");
  }
  centre_ = std::move(centre);
  scale_ = std::move(scale);
  for (auto& f : factors_) {
    f.centre = centre_[static_cast<std::size_t>(f.column)];
    f.scale = scale_[static_cast<std::size_t>(f.column)];
  }
  return *this;
}

BasisMap& BasisMap::adapt_to(const Matrix& x) {
  if (x.cols() != input_dim_) throw ShapeError("basis: adapt_to width mismatch");
  if (x.rows() < 1) throw ArgumentError("basis: adapt_to needs rows");
  std::vector<double> centre(static_cast<std::size_t>(input_dim_)), scale(centre.size());
  for (int j = 0; j < input_dim_; ++j) {
    const double m = x.col(j).mean();
    const double var = (x.col(j).array() - m).square().mean();
    centre[static_cast<std::size_t>(j)] = m;
    scale[static_cast<std::size_t>(j)] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  // Indicator factors compare raw values, so they keep identity normalisation.
  for (const auto& f : factors_) {
    if (f.type == Factor::Type::kIndicator) {
      centre[static_cast<std::size_t>(f.column)] = 0.0;
      scale[static_cast<std::size_t>(f.column)] = 1.0;
    }
  }
  return set_normalisation(std::move(centre), std::move(scale));
}

void BasisMap::evaluate(std::span<const double> x, std::span<double> out) const {
  if (static_cast<int>(x.size()) != input_dim_ || static_cast<int>(out.size()) != output_dim_) {
    throw ShapeError("basis: evaluate width mismatch");
  }
  switch (kind_) {
    case Kind::kIdentity:
      for (int j = 0; j < input_dim_; ++j) out[j] = (x[j] - centre_[j]) / scale_[j];
      return;
    case Kind::kPolynomial: {
      // Small d: direct products are fine.
      double u[16];
      std::vector<double> ubig;
      double* up = u;
      if (input_dim_ > 16) {
        ubig.resize(static_cast<std::size_t>(input_dim_));
        up = ubig.data();
      }
      for (int j = 0; j < input_dim_; ++j) up[j] = (x[j] - centre_[j]) / scale_[j];
      for (std::size_t k = 0; k < exponents_.size(); ++k) {
        double v = 1.0;
        for (int j = 0; j < input_dim_; ++j) {
          for (int p = 0; p < exponents_[k][static_cast<std::size_t>(j)]; ++p) v *= up[j];
        }
        out[k] = v;
      }
      return;
    }
    case Kind::kRadial: {
      std::size_t o = 0;
      if (with_constant_) out[o++] = 1.0;
      const double inv = 1.0 / (2.0 * bandwidth_ * bandwidth_);
      for (Eigen::Index k = 0; k < centres_.rows(); ++k) {
        double d2 = 0.0;
        for (int j = 0; j < input_dim_; ++j) {
          const double d = (x[j] - centre_[j]) / scale_[j] - centres_(k, j);
          d2 += d * d;
        }
        out[o++] = std::exp(-d2 * inv);
      }
      return;
    }
    case Kind::kTensor: {
      // Factor values, then an odometer over combinations (last factor fastest).
      double buf[256];
      std::vector<double> big;
      int total = 0;
      for (const auto& f : factors_) total += f.size();
      double* vals = buf;
      if (total > 256) {
        big.resize(static_cast<std::size_t>(total));
        vals = big.data();
      }
      std::vector<int> offset(factors_.size());
      int pos = 0;
      for (std::size_t q = 0; q < factors_.size(); ++q) {
        offset[q] = pos;
        factors_[q].evaluate(x[static_cast<std::size_t>(factors_[q].column)], vals + pos);
        pos += factors_[q].size();
      }
      // Build the product progressively: out holds products over factors [0, q].
      int len = factors_[0].size();
      for (int k = 0; k < len; ++k) out[k] = vals[k];
      for (std::size_t q = 1; q < factors_.size(); ++q) {
        const int fs = factors_[q].size();
        const double* fv = vals + offset[q];
        for (int k = len - 1; k >= 0; --k) {
          const double base = out[k];
          for (int m = fs - 1; m >= 0; --m) out[k * fs + m] = base * fv[m];
        }
        len *= fs;
      }
      return;
    }
  }
}

Matrix BasisMap::transform(const Matrix& x) const {
  if (x.cols() != input_dim_) throw ShapeError("basis: transform width mismatch");
  Matrix out(x.rows(), output_dim_);
  std::vector<double> row(static_cast<std::size_t>(input_dim_));
  std::vector<double> phi(static_cast<std::size_t>(output_dim_));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < input_dim_; ++j) row[static_cast<std::size_t>(j)] = x(i, j);
    evaluate(row, phi);
    for (int k = 0; k < output_dim_; ++k) out(i, k) = phi[static_cast<std::size_t>(k)];
  }
  return out;
}

void BasisMap::expected(std::span<double> x, int column, std::span<const double> points,
                        std::span<const double> weights, std::span<double> out) const {
  if (static_cast<int>(x.size()) != input_dim_ || static_cast<int>(out.size()) != output_dim_) {
    throw ShapeError("basis: expected width mismatch");
  }
  if (points.size() != weights.size()) throw ShapeError("basis: points and weights differ in length");
  const double saved = x[static_cast<std::size_t>(column)];
  int on_column = 0;
  if (kind_ == Kind::kTensor) {
    for (const auto& f : factors_) on_column += (f.column == column) ? 1 : 0;
  }
  if (kind_ == Kind::kTensor && on_column == 1) {
    int total = 0;
    for (const auto& f : factors_) total += f.size();
    std::vector<double> vals(static_cast<std::size_t>(total), 0.0);
    std::vector<double> tmp;
    std::vector<int> offset(factors_.size());
    int pos = 0;
    for (std::size_t q = 0; q < factors_.size(); ++q) {
      const auto& f = factors_[q];
      offset[q] = pos;
      if (f.column == column) {
        tmp.resize(static_cast<std::size_t>(f.size()));
        for (std::size_t m = 0; m < points.size(); ++m) {
          f.evaluate(points[m], tmp.data());
          for (int k = 0; k < f.size(); ++k) vals[static_cast<std::size_t>(pos + k)] += weights[m] * tmp[static_cast<std::size_t>(k)];
        }
      } else {
        f.evaluate(x[static_cast<std::size_t>(f.column)], vals.data() + pos);
      }
      pos += f.size();
    }
    int len = factors_[0].size();
    for (int k = 0; k < len; ++k) out[static_cast<std::size_t>(k)] = vals[static_cast<std::size_t>(k)];
    for (std::size_t q = 1; q < factors_.size(); ++q) {
      const int fs = factors_[q].size();
      const double* fv = vals.data() + offset[q];
      for (int k = len - 1; k >= 0; --k) {
        const double base = out[static_cast<std::size_t>(k)];
        for (int m = fs - 1; m >= 0; --m) out[static_cast<std::size_t>(k * fs + m)] = base * fv[m];
      }
      len *= fs;
    }
    return;
  }
  std::fill(out.begin(), out.end(), 0.0);
  std::vector<double> phi(static_cast<std::size_t>(output_dim_));
  for (std::size_t m = 0; m < points.size(); ++m) {
    x[static_cast<std::size_t>(column)] = points[m];
    evaluate(x, phi);
    for (int k = 0; k < output_dim_; ++k) out[static_cast<std::size_t>(k)] += weights[m] * phi[static_cast<std::size_t>(k)];
  }
  x[static_cast<std::size_t>(column)] = saved;
}

Json BasisMap::to_json() const {
  Json j;
  j["input_dim"] = input_dim_;
  j["centre"] = centre_;
  j["scale"] = scale_;
  switch (kind_) {
    case Kind::kIdentity: j["kind"] = "identity"; break;
    case Kind::kPolynomial:
      j["kind"] = "polynomial";
      j["degree"] = degree_;
      j["with_constant"] = with_constant_;
      break;
    case Kind::kRadial: {
      j["kind"] = "radial";
      j["bandwidth"] = bandwidth_;
      j["with_constant"] = with_constant_;
      Json rows = Json::array();
      for (Eigen::Index r = 0; r < centres_.rows(); ++r) {
        std::vector<double> row;
        for (Eigen::Index k = 0; k < centres_.cols(); ++k) row.push_back(centres_(r, k));
        rows.push_back(row);
      }
      j["centres"] = rows;
      break;
    }
    case Kind::kTensor: {
      j["kind"] = "tensor";
      Json fs = Json::array();
      for (const auto& f : factors_) {
        fs.push_back({{"column", f.column},
                      {"type", type_name(f.type)},
                      {"degree", f.degree},
                      {"points", f.points},
                      {"bandwidth", f.bandwidth}});
      }
      j["factors"] = fs;
      break;
    }
  }
  return j;
}

BasisMap BasisMap::from_json(const Json& j) {
  const auto kind = j.at("kind").get<std::string>();
  const int d = j.at("input_dim").get<int>();
  BasisMap b;
  if (kind == "identity") {
    b = identity(d);
  } else if (kind == "polynomial") {
    b = polynomial(d, j.at("degree").get<int>(), j.value("with_constant", true));
  } else if (kind == "radial") {
    const auto rows = j.at("centres").get<std::vector<std::vector<double>>>();
    Matrix centres(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (static_cast<int>(rows[r].size()) != d) throw ShapeError("basis: centre width mismatch");
      for (int k = 0; k < d; ++k) centres(static_cast<Eigen::Index>(r), k) = rows[r][static_cast<std::size_t>(k)];
    }
    b = radial(std::move(centres), j.at("bandwidth").get<double>(), j.value("with_constant", true));
  } else if (kind == "tensor") {
    std::vector<Factor> fs;
    for (const auto& fj : j.at("factors")) {
      Factor f;
      f.column = fj.at("column").get<int>();
      const auto t = fj.at("type").get<std::string>();
      if (t == "polynomial") {
        f.type = Factor::Type::kPolynomial;
      } else if (t == "radial") {
        f.type = Factor::Type::kRadial;
      } else if (t == "indicator") {
        f.type = Factor::Type::kIndicator;
      } else {
        throw ArgumentError("basis: unknown factor type '" + t + "'");
      }
      f.degree = fj.value("degree", 1);
      f.points = fj.value("points", std::vector<double>{});
      f.bandwidth = fj.value("bandwidth", 1.0);
      fs.push_back(std::move(f));
    }
    b = tensor(d, std::move(fs));
  } else {
    throw ArgumentError("basis: unknown kind '" + kind + "'");
  }
  if (j.contains("centre") && j.contains("scale")) {
    b.set_normalisation(j.at("centre").get<std::vector<double>>(),
                        j.at("scale").get<std::vector<double>>());
  }
  return b;
}

}  // namespace dmlcmr
