#include "espattn/sorting.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace espattn {

std::vector<std::size_t> argsort_stable(const Vector& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  return idx;
}

static void require_sortable(const Vector& v, double t, bool soft) {
  if (v.empty()) throw ShapeError("sort: empty input");
  for (double x : v)
    if (!std::isfinite(x)) throw ParameterError("sort: non-finite input");
  if (soft && !(t > 0.0)) throw ParameterError("soft_sort: temperature must be positive");
}

Matrix soft_sort(const Vector& v, double t) {
  require_sortable(v, t, true);
  const std::size_t n = v.size();
  const auto order = argsort_stable(v);
  Matrix neg_dist(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double si = v[order[i]];
    for (std::size_t j = 0; j < n; ++j) neg_dist(i, j) = -std::abs(si - v[j]);
  }
  return softmax_rows(neg_dist, t);
}

Matrix hard_argsort_perm(const Vector& v) {
  require_sortable(v, 0.0, false);
  const auto order = argsort_stable(v);
  Matrix p(v.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) p(i, order[i]) = 1.0;
  return p;
}

static double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

Vector soft_sort_backward(const Vector& v, double t, const Matrix& upstream) {
  require_sortable(v, t, true);
  const std::size_t n = v.size();
  if (upstream.rows() != n || upstream.cols() != n)
    throw ShapeError("soft_sort_backward: upstream shape disagrees with input");

  const auto order = argsort_stable(v);
  std::vector<std::size_t> pos(n);  // pos[k] = rank of v[k]
  for (std::size_t r = 0; r < n; ++r) pos[order[r]] = r;

  Matrix neg_dist(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double si = v[order[i]];
    for (std::size_t j = 0; j < n; ++j) neg_dist(i, j) = -std::abs(si - v[j]);
  }
  const Matrix p = softmax_rows(neg_dist, t);

  // d(loss)/d(dist matrix): softmax jacobian row by row, then the -1/t factor.
  Matrix gdist(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += upstream(i, j) * p(i, j);
    for (std::size_t j = 0; j < n; ++j)
      gdist(i, j) = -(p(i, j) * (upstream(i, j) - dot)) / t;
  }

  // dist(i, j) = |s_i - v_j| with s_i = v[order[i]]; both occurrences of v
  // contribute. sign(0) = 0 keeps the subgradient symmetric at ties.
  Vector grad(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double si = v[order[i]];
    for (std::size_t j = 0; j < n; ++j) {
      const double s = sign_of(si - v[j]);
      grad[order[i]] += gdist(i, j) * s;
      grad[j] -= gdist(i, j) * s;
    }
  }
  return grad;
}

}  // namespace espattn
