#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace espattn {

// Error taxonomy: callers can distinguish bad shapes from bad parameter
// values and from modes an operation deliberately refuses.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SizeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UnsupportedModeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major matrix. Templated so the benchmark path can instantiate a
// float32 variant of the same kernels; everywhere else Real = double.
template <typename Real>
class MatrixT {
 public:
  MatrixT() = default;
  MatrixT(std::size_t rows, std::size_t cols, Real fill = Real(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static MatrixT identity(std::size_t n) {
    MatrixT m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = Real(1);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  Real& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  Real operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  Real* row(std::size_t i) { return data_.data() + i * cols_; }
  const Real* row(std::size_t i) const { return data_.data() + i * cols_; }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }

  bool same_shape(const MatrixT& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

using Matrix = MatrixT<double>;
using Vector = std::vector<double>;

inline void ensure(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

template <typename Real>
bool all_finite(const MatrixT<Real>& m) {
  for (std::size_t i = 0; i < m.size(); ++i)
    if (!std::isfinite(m.data()[i])) return false;
  return true;
}

template <typename Real>
void check_finite(const MatrixT<Real>& m, const char* what) {
  if (!all_finite(m)) throw ParameterError(std::string(what) + ": non-finite entries");
}

template <typename Real>
MatrixT<Real> transpose(const MatrixT<Real>& a) {
  MatrixT<Real> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// Blocked matmul. Accumulation over k runs in ascending order for every
// output element, and threads own disjoint rows, so results are identical
// for any thread count.
template <typename Real>
MatrixT<Real> matmul(const MatrixT<Real>& a, const MatrixT<Real>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions disagree (" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + ")");
  MatrixT<Real> c(a.rows(), b.cols());
  const std::size_t n = a.rows(), kk = a.cols(), m = b.cols();
  constexpr std::size_t kb = 64;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n * kk * m > 1u << 16)
#endif
  for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    Real* ci = c.row(i);
    const Real* ai = a.row(i);
    for (std::size_t k0 = 0; k0 < kk; k0 += kb) {
      const std::size_t k1 = std::min(kk, k0 + kb);
      for (std::size_t k = k0; k < k1; ++k) {
        const Real aik = ai[k];
        const Real* bk = b.row(k);
        for (std::size_t j = 0; j < m; ++j) ci[j] += aik * bk[j];
      }
    }
  }
  return c;
}

// cost[i][j] = sum_a (q[a,i] - k[a,j])^2; tokens are columns.
template <typename Real>
MatrixT<Real> pairwise_sq_dist(const MatrixT<Real>& q, const MatrixT<Real>& k) {
  if (q.rows() != k.rows())
    throw ShapeError("pairwise_sq_dist: feature dimensions disagree");
  const std::size_t m = q.rows(), n = q.cols(), p = k.cols();
  MatrixT<Real> out(n, p);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m * n * p > 1u << 16)
#endif
  for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    Real* oi = out.row(i);
    for (std::size_t a = 0; a < m; ++a) {
      const Real* qa = q.row(a);
      const Real* ka = k.row(a);
      const Real qai = qa[i];
      for (std::size_t j = 0; j < p; ++j) {
        const Real d = qai - ka[j];
        oi[j] += d * d;
      }
    }
  }
  return out;
}

// Row-wise softmax of m/scale with max-subtraction. Callers negate their
// input themselves when they want softmax(-x/t).
template <typename Real>
MatrixT<Real> softmax_rows(const MatrixT<Real>& m, Real scale) {
  if (!(scale > Real(0))) throw ParameterError("softmax_rows: scale must be positive");
  MatrixT<Real> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const Real* src = m.row(i);
    Real* dst = out.row(i);
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < m.cols(); ++j) mx = std::max(mx, src[j] / scale);
    Real sum = Real(0);
    for (std::size_t j = 0; j < m.cols(); ++j) {
      dst[j] = std::exp(src[j] / scale - mx);
      sum += dst[j];
    }
    for (std::size_t j = 0; j < m.cols(); ++j) dst[j] /= sum;
  }
  return out;
}

template <typename Real>
std::vector<Real> logsumexp_rows(const MatrixT<Real>& m) {
  std::vector<Real> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const Real* src = m.row(i);
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < m.cols(); ++j) mx = std::max(mx, src[j]);
    Real sum = Real(0);
    for (std::size_t j = 0; j < m.cols(); ++j) sum += std::exp(src[j] - mx);
    out[i] = mx + std::log(sum);
  }
  return out;
}

template <typename Real>
Real max_abs_diff(const MatrixT<Real>& a, const MatrixT<Real>& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shapes disagree");
  Real worst = Real(0);
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

}  // namespace espattn
