#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "optin/error.hpp"

namespace optin {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major double array of rank 1..4.
///
/// A default-constructed Tensor is the empty placeholder (rank 0, no data);
/// every other constructor enforces the rank and positive-extent invariants.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    require(data_.size() == shape_numel(shape_), ErrorCode::shape_mismatch,
            "tensor data length " + std::to_string(data_.size()) +
                " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    require(!shape_.empty() && shape_.size() <= 4, ErrorCode::shape_mismatch,
            "tensor rank must be 1..4, got " + std::to_string(shape_.size()));
    for (auto e : shape_)
      require(e > 0, ErrorCode::shape_mismatch,
              "tensor extents must be positive: " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* what) {
  require(a.shape() == b.shape(), ErrorCode::shape_mismatch,
          std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()) + " differ");
}

// c = a * b.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorCode::shape_mismatch,
          "matmul expects rank-2 operands");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, ErrorCode::shape_mismatch,
          "matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
  Tensor c({m, n});
  const double* pa = a.raw();
  const double* pb = b.raw();
  for (std::size_t r = 0; r < m; ++r) {
    double* crow = c.raw() + r * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = pa[r * k + t];
      if (av == 0.0) continue;
      const double* brow = pb + t * n;
      for (std::size_t col = 0; col < n; ++col) crow[col] += av * brow[col];
    }
  }
  return c;
}

/// Row-wise softmax of logits / temperature with max subtraction.
inline Tensor softmax_temp(const Tensor& logits, double temperature) {
  require(temperature > 0.0, ErrorCode::invalid_parameter,
          "softmax temperature must be positive");
  require(logits.rank() == 2, ErrorCode::shape_mismatch,
          "softmax_temp expects [B,C]");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  Tensor out(logits.shape());
  std::vector<double> e(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c)
      mx = std::max(mx, static_cast<double>(logits.at(r, c)) / temperature);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      e[c] = std::exp(static_cast<double>(logits.at(r, c)) / temperature - mx);
      sum += e[c];
    }
    for (std::size_t c = 0; c < cols; ++c)
      out.at(r, c) = e[c] / sum;
  }
  return out;
}

/// Normalizes every vector along the last axis, then applies gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps = 1e-5) {
  require(x.rank() >= 1, ErrorCode::shape_mismatch, "layer_norm on empty");
  const std::size_t d = x.shape().back();
  require(gamma.size() == d && beta.size() == d, ErrorCode::shape_mismatch,
          "layer_norm gamma/beta length must equal last dim " +
              std::to_string(d));
  Tensor out(x.shape());
  const std::size_t rows = x.size() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.raw() + r * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += in[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    double* o = out.raw() + r * d;
    for (std::size_t i = 0; i < d; ++i)
      o[i] = (in[i] - mean) * inv * gamma[i] + beta[i];
  }
  return out;
}

namespace detail {

// X^T Y for row-major X [n,p], Y [n,q], accumulated in double.
template <class A, class B>
std::vector<double> cross_gram(std::span<const A> x, std::span<const B> y, std::size_t n,
                               std::size_t p, std::size_t q) {
  std::vector<double> g(p * q, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const A* xr = x.data() + r * p;
    const B* yr = y.data() + r * q;
    for (std::size_t i = 0; i < p; ++i) {
      const double xv = xr[i];
      if (xv == 0.0) continue;
      double* gi = g.data() + i * q;
      for (std::size_t j = 0; j < q; ++j) gi[j] += xv * yr[j];
    }
  }
  return g;
}

}  // namespace detail

/// Relational map: flattens [B,T,D] batch-major to [B*T, D] and returns XX^T.
inline Tensor gram(const Tensor& f) {
  require(f.rank() == 3, ErrorCode::shape_mismatch, "gram expects [B,T,D]");
  const std::size_t rows = f.dim(0) * f.dim(1), d = f.dim(2);
  Tensor out({rows, rows});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = i; j < rows; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k)
        s += static_cast<double>(f[i * d + k]) * f[j * d + k];
      out.at(i, j) = out.at(j, i) = s;
    }
  }
  return out;
}

enum class GramPath { identity, direct };

/// ||XX^T - YY^T||_F^2 for the batch-major flattenings X, Y of two [B,T,D]
/// features. The default path never forms the BT x BT maps. With E = X - Y,
///   XX^T - YY^T = Y E^T + E X^T
/// so the norm is a sum of D x D inner products
///   <Y^T Y, E^T E> + 2 <Y^T E, E^T X> + <E^T E, X^T X>
/// whose terms all scale with |E|, which keeps small perturbations accurate.
/// GramPath::direct materializes the maps and exists for oracle testing.
/// Negative rounding residue is clamped to 0.
inline double gram_diff_sq(const Tensor& fp, const Tensor& f,
                           GramPath path = GramPath::identity) {
  require_same_shape(fp, f, "gram_diff_sq");
  require(f.rank() == 3, ErrorCode::shape_mismatch,
          "gram_diff_sq expects [B,T,D]");
  const std::size_t n = f.dim(0) * f.dim(1), d = f.dim(2);
  double result = 0.0;
  if (path == GramPath::identity) {
    std::vector<double> e(n * d);
    for (std::size_t k = 0; k < e.size(); ++k) e[k] = static_cast<double>(fp[k]) - f[k];
    const std::span<const double> es(e);
    const auto ee = detail::cross_gram(es, es, n, d, d);
    const auto xx = detail::cross_gram(fp.data(), fp.data(), n, d, d);
    const auto yy = detail::cross_gram(f.data(), f.data(), n, d, d);
    const auto xe = detail::cross_gram(fp.data(), es, n, d, d);
    const auto ye = detail::cross_gram(f.data(), es, n, d, d);
    double outer_x = 0.0, outer_y = 0.0, cross_xy = 0.0, cross_yx = 0.0;
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) {
        outer_x += xx[a * d + b] * ee[a * d + b];
        outer_y += yy[a * d + b] * ee[a * d + b];
        cross_xy += ye[a * d + b] * xe[b * d + a];
        cross_yx += xe[a * d + b] * ye[b * d + a];
      }
    // Both orders of the cross sum keep the result symmetric in (X, Y).
    result = (outer_x + outer_y) + (cross_xy + cross_yx);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double a = 0.0, b = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          a += static_cast<double>(fp[i * d + k]) * fp[j * d + k];
          b += static_cast<double>(f[i * d + k]) * f[j * d + k];
        }
        result += (a - b) * (a - b);
      }
    }
  }
  return result > 0.0 ? result : 0.0;
}

}  // namespace optin
