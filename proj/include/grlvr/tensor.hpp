#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace grlvr {

using Vector = std::vector<double>;

/// Dense row-major f64 matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline double frobenius_sq(const Matrix& m) { return squared_norm(m.flat()); }

/// y = W x  (W: out x in).
inline void matvec(const Matrix& w, std::span<const double> x, std::span<double> y) {
  for (std::size_t r = 0; r < w.rows(); ++r) y[r] = dot(w.row(r), x);
}

/// dx += W^T dy.
inline void matvec_t_acc(const Matrix& w, std::span<const double> dy, std::span<double> dx) {
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    auto wr = w.row(r);
    for (std::size_t c = 0; c < w.cols(); ++c) dx[c] += g * wr[c];
  }
}

/// G += dy x^T.
inline void outer_acc(Matrix& g, std::span<const double> dy, std::span<const double> x) {
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const double s = dy[r];
    if (s == 0.0) continue;
    auto gr = g.row(r);
    for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += s * x[c];
  }
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace grlvr
