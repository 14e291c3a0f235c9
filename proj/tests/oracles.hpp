// Independent reference implementations for the test suites. Everything here
// is deliberately written the slow, obvious way (triple loops, long doubles,
// bitmask DP) so library bugs cannot cancel against themselves.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "espattn/matrix.hpp"

namespace oracles {

using espattn::Matrix;
using espattn::Vector;

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double acc = 0.0L;
      for (std::size_t k = 0; k < a.cols(); ++k)
        acc += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(acc);
    }
  return c;
}

inline Matrix naive_transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// squared distances between token columns: out(i, j) = |q[:,i] - k[:,j]|^2
inline Matrix naive_pairwise_sq(const Matrix& q, const Matrix& k) {
  Matrix out(q.cols(), k.cols());
  for (std::size_t i = 0; i < q.cols(); ++i)
    for (std::size_t j = 0; j < k.cols(); ++j) {
      long double acc = 0.0L;
      for (std::size_t a = 0; a < q.rows(); ++a) {
        const long double d = static_cast<long double>(q(a, i)) - k(a, j);
        acc += d * d;
      }
      out(i, j) = static_cast<double>(acc);
    }
  return out;
}

// row softmax of m / scale in long double
inline Matrix oracle_softmax_rows(const Matrix& m, double scale) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    long double mx = -std::numeric_limits<long double>::infinity();
    for (std::size_t j = 0; j < m.cols(); ++j)
      mx = std::max(mx, static_cast<long double>(m(i, j)) / scale);
    long double sum = 0.0L;
    for (std::size_t j = 0; j < m.cols(); ++j)
      sum += std::exp(static_cast<long double>(m(i, j)) / scale - mx);
    for (std::size_t j = 0; j < m.cols(); ++j)
      out(i, j) = static_cast<double>(
          std::exp(static_cast<long double>(m(i, j)) / scale - mx) / sum);
  }
  return out;
}

// relaxed ascending-sort matrix, transcribed directly: row i is the softmax
// over j of -|sorted(v)_i - v_j| / t, with a stable sort producing sorted(v)
inline Matrix oracle_soft_sort(const Vector& v, double t) {
  std::vector<double> sorted(v.begin(), v.end());
  std::stable_sort(sorted.begin(), sorted.end());
  Matrix out(v.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    long double mx = -std::numeric_limits<long double>::infinity();
    for (std::size_t j = 0; j < v.size(); ++j)
      mx = std::max(mx, -std::abs(static_cast<long double>(sorted[i]) - v[j]) / t);
    long double sum = 0.0L;
    for (std::size_t j = 0; j < v.size(); ++j)
      sum += std::exp(-std::abs(static_cast<long double>(sorted[i]) - v[j]) / t - mx);
    for (std::size_t j = 0; j < v.size(); ++j)
      out(i, j) = static_cast<double>(
          std::exp(-std::abs(static_cast<long double>(sorted[i]) - v[j]) / t - mx) / sum);
  }
  return out;
}

// minimum assignment cost by bitmask DP over matched columns
inline double assignment_dp(const Matrix& cost) {
  const std::size_t n = cost.rows();
  const std::size_t full = std::size_t{1} << n;
  std::vector<double> best(full, std::numeric_limits<double>::infinity());
  best[0] = 0.0;
  for (std::size_t mask = 0; mask < full - 1; ++mask) {
    if (!std::isfinite(best[mask])) continue;
    std::size_t i = static_cast<std::size_t>(std::popcount(mask));  // next row
    for (std::size_t j = 0; j < n; ++j) {
      if (mask & (std::size_t{1} << j)) continue;
      const std::size_t next = mask | (std::size_t{1} << j);
      best[next] = std::min(best[next], best[mask] + cost(i, j));
    }
  }
  return best[full - 1];
}

// central finite differences of a scalar function of a parameter vector
inline std::vector<double> fd_grad(const std::function<double(const std::vector<double>&)>& f,
                                   std::vector<double> params, double h = 1e-6) {
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double keep = params[i];
    params[i] = keep + h;
    const double fp = f(params);
    params[i] = keep - h;
    const double fm = f(params);
    params[i] = keep;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// straight-line transcription of the sliced-plan attention map:
// project, sort both sides per slice, lift to plans, weight by transport
// cost, aggregate, mix the values
struct EspReference {
  Matrix plan;      // aggregated N x N coupling, query rows
  Vector sigma;     // slice weights
  Vector costs;     // per-slice transport costs
  Matrix out;       // values mixed through the plan, output tokens as columns
};

inline EspReference esp_reference(const Matrix& q, const Matrix& k, const Matrix& v,
                                  const Matrix& directions, double t, double tau,
                                  bool hard) {
  const std::size_t n = q.cols();
  const std::size_t slice_count = directions.rows();
  const Matrix cost = naive_pairwise_sq(q, k);

  auto project = [&](const Matrix& tokens, std::size_t l) {
    Vector p(tokens.cols());
    for (std::size_t j = 0; j < tokens.cols(); ++j) {
      long double acc = 0.0L;
      for (std::size_t a = 0; a < tokens.rows(); ++a)
        acc += static_cast<long double>(directions(l, a)) * tokens(a, j);
      p[j] = static_cast<double>(acc);
    }
    return p;
  };
  auto hard_perm = [](const Vector& vals) {
    std::vector<std::size_t> idx(vals.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
    Matrix p(vals.size(), vals.size());
    for (std::size_t r = 0; r < idx.size(); ++r) p(r, idx[r]) = 1.0;
    return p;
  };

  std::vector<Matrix> plans;
  Vector slice_costs(slice_count);
  for (std::size_t l = 0; l < slice_count; ++l) {
    const Vector qp = project(q, l), kp = project(k, l);
    const Matrix a = hard ? hard_perm(qp) : oracle_soft_sort(qp, t);
    const Matrix b = hard ? hard_perm(kp) : oracle_soft_sort(kp, t);
    Matrix u = naive_matmul(naive_transpose(a), b);
    for (std::size_t i = 0; i < u.size(); ++i) u.data()[i] /= static_cast<double>(n);
    long double d = 0.0L;
    for (std::size_t i = 0; i < u.size(); ++i)
      d += static_cast<long double>(u.data()[i]) * cost.data()[i];
    slice_costs[l] = static_cast<double>(d);
    plans.push_back(std::move(u));
  }

  // sigma = softmax(-tau * costs)
  Vector sigma(slice_count);
  {
    long double mx = -std::numeric_limits<long double>::infinity();
    for (double c : slice_costs) mx = std::max(mx, static_cast<long double>(-tau * c));
    long double sum = 0.0L;
    for (double c : slice_costs) sum += std::exp(-tau * static_cast<long double>(c) - mx);
    for (std::size_t l = 0; l < slice_count; ++l)
      sigma[l] = static_cast<double>(std::exp(-tau * static_cast<long double>(slice_costs[l]) - mx) / sum);
  }

  Matrix agg(n, n);
  for (std::size_t l = 0; l < slice_count; ++l)
    for (std::size_t i = 0; i < agg.size(); ++i)
      agg.data()[i] += sigma[l] * plans[l].data()[i];

  // output token j mixes values by the plan column of query j
  EspReference ref;
  ref.out = naive_matmul(v, naive_transpose(agg));
  ref.plan = std::move(agg);
  ref.sigma = std::move(sigma);
  ref.costs = std::move(slice_costs);
  return ref;
}

// per-column group normalization, two-pass, long double
inline Matrix reference_group_norm(const Matrix& x, std::size_t groups, double eps = 1e-5) {
  const std::size_t rows_per = x.rows() / groups;
  Matrix out(x.rows(), x.cols());
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t j = 0; j < x.cols(); ++j) {
      long double mean = 0.0L;
      for (std::size_t r = 0; r < rows_per; ++r) mean += x(g * rows_per + r, j);
      mean /= rows_per;
      long double var = 0.0L;
      for (std::size_t r = 0; r < rows_per; ++r) {
        const long double d = x(g * rows_per + r, j) - mean;
        var += d * d;
      }
      var /= rows_per;
      const long double inv = 1.0L / std::sqrt(var + static_cast<long double>(eps));
      for (std::size_t r = 0; r < rows_per; ++r)
        out(g * rows_per + r, j) = static_cast<double>((x(g * rows_per + r, j) - mean) * inv);
    }
  return out;
}

// plain-domain balancing with explicit row/column scalings; independently
// fixes the half-step semantics (even = rows, odd = columns, rows first)
inline Matrix reference_sinkhorn(const Matrix& z, std::size_t half_steps) {
  const std::size_t n = z.rows(), m = z.cols();
  Matrix kmat(n, m);
  for (std::size_t i = 0; i < kmat.size(); ++i) kmat.data()[i] = std::exp(z.data()[i]);
  std::vector<long double> r(n, 1.0L), c(m, 1.0L);
  for (std::size_t step = 0; step < half_steps; ++step) {
    if (step % 2 == 0) {
      for (std::size_t i = 0; i < n; ++i) {
        long double acc = 0.0L;
        for (std::size_t j = 0; j < m; ++j) acc += static_cast<long double>(kmat(i, j)) * c[j];
        r[i] = 1.0L / (static_cast<long double>(n) * acc);
      }
    } else {
      for (std::size_t j = 0; j < m; ++j) {
        long double acc = 0.0L;
        for (std::size_t i = 0; i < n; ++i) acc += r[i] * kmat(i, j);
        c[j] = 1.0L / (static_cast<long double>(m) * acc);
      }
    }
  }
  Matrix plan(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      plan(i, j) = static_cast<double>(r[i] * kmat(i, j) * c[j]);
  return plan;
}

// cross-size interpolation weight, transcribed in plain floating point on the
// grids i/N and j/M with 1-based ranks
inline double reference_interp_weight(std::size_t i1, std::size_t j1, std::size_t n,
                                      std::size_t m) {
  const double iN = static_cast<double>(i1) / n;
  const double jM = static_cast<double>(j1) / m;
  const double jm1M = static_cast<double>(j1 - 1) / m;
  const double jp1M = static_cast<double>(j1 + 1) / m;
  if (iN == jM) return 1.0;
  if (j1 < m && jM < iN && iN < jp1M) return static_cast<double>(i1) * m / n - j1;
  if (jm1M < iN && iN < jM) return j1 - static_cast<double>(i1) * m / n;
  return 0.0;
}

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max({std::abs(got), std::abs(want), 1e-12});
}

// worst entry difference relative to the largest magnitude present
inline double rel_err_matrix(const Matrix& got, const Matrix& want) {
  if (got.rows() != want.rows() || got.cols() != want.cols())
    return std::numeric_limits<double>::infinity();
  double scale = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < got.rows(); ++i)
    for (std::size_t j = 0; j < got.cols(); ++j) {
      scale = std::max({scale, std::abs(got(i, j)), std::abs(want(i, j))});
      diff = std::max(diff, std::abs(got(i, j) - want(i, j)));
    }
  return diff / std::max(scale, 1e-300);
}

}  // namespace oracles
