#include "espattn/transport.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "espattn/rng.hpp"

namespace espattn {

namespace {

void clamp_roundoff(Matrix& m) {
  // soft products are nonnegative by construction; aggregation round-off can
  // still leave a -1e-16 behind
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m.data()[i] < 0.0 && m.data()[i] >= -1e-15) m.data()[i] = 0.0;
}

std::vector<std::size_t> inverse_perm(const std::vector<std::size_t>& order) {
  std::vector<std::size_t> inv(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) inv[order[r]] = r;
  return inv;
}

}  // namespace

SliceSet SliceSet::axis_aligned(std::size_t m) {
  if (m == 0) throw ParameterError("SliceSet: zero feature dimension");
  SliceSet s;
  s.kind = Kind::kAxisAligned;
  s.directions = Matrix::identity(m);
  return s;
}

SliceSet SliceSet::frozen_random(std::size_t m, std::size_t count, std::uint64_t seed) {
  if (m == 0 || count == 0) throw ParameterError("SliceSet: zero dimension or count");
  SliceSet s;
  s.kind = Kind::kFrozenRandom;
  s.directions = Matrix(count, m);
  Rng rng(seed);
  for (std::size_t l = 0; l < count; ++l) {
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (std::size_t a = 0; a < m; ++a) {
        const double x = rng.normal();
        s.directions(l, a) = x;
        norm2 += x * x;
      }
    } while (norm2 == 0.0);
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t a = 0; a < m; ++a) s.directions(l, a) *= inv;
  }
  return s;
}

Matrix SliceSet::project(const Matrix& tokens) const {
  if (tokens.rows() != dim()) throw ShapeError("SliceSet::project: feature dimension disagrees");
  if (kind == Kind::kAxisAligned) {
    Matrix out(count(), tokens.cols());
    for (std::size_t l = 0; l < count(); ++l)
      std::copy(tokens.row(l), tokens.row(l) + tokens.cols(), out.row(l));
    return out;
  }
  return matmul(directions, tokens);
}

namespace {

// One lifted slice plan. Hard mode keeps the matching implicit; soft mode
// materializes (1/N) A^T B.
struct SinglePlan {
  std::vector<std::size_t> q_order, k_order, match;  // hard
  Matrix a, b, dense;                                // soft
};

SinglePlan single_slice_plan(const Vector& q_proj, const Vector& k_proj, double t,
                             SortMode mode) {
  if (q_proj.size() != k_proj.size())
    throw ShapeError("slice_plan: projection lengths disagree");
  if (q_proj.empty()) throw ShapeError("slice_plan: empty projection");
  SinglePlan out;
  const std::size_t n = q_proj.size();
  if (mode == SortMode::kHard) {
    for (double x : q_proj)
      if (!std::isfinite(x)) throw ParameterError("slice_plan: non-finite projection");
    for (double x : k_proj)
      if (!std::isfinite(x)) throw ParameterError("slice_plan: non-finite projection");
    out.q_order = argsort_stable(q_proj);
    out.k_order = argsort_stable(k_proj);
    out.match.resize(n);
    for (std::size_t r = 0; r < n; ++r) out.match[out.q_order[r]] = out.k_order[r];
  } else {
    out.a = soft_sort(q_proj, t);
    out.b = soft_sort(k_proj, t);
    out.dense = matmul(transpose(out.a), out.b);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < out.dense.size(); ++i) out.dense.data()[i] *= inv_n;
  }
  return out;
}

Matrix densify_hard(const std::vector<std::size_t>& match) {
  const std::size_t n = match.size();
  Matrix m(n, n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) m(i, match[i]) = inv_n;
  return m;
}

}  // namespace

TransportPlan slice_plan(const Vector& q_proj, const Vector& k_proj, double t,
                         SortMode mode) {
  SinglePlan sp = single_slice_plan(q_proj, k_proj, t, mode);
  TransportPlan plan;
  const std::size_t n = q_proj.size();
  plan.source_mass = 1.0 / static_cast<double>(n);
  plan.target_mass = plan.source_mass;
  if (mode == SortMode::kHard) {
    plan.matrix = densify_hard(sp.match);
    plan.exactness = PlanExactness::kExact;
  } else {
    plan.matrix = std::move(sp.dense);
    plan.exactness = PlanExactness::kRelaxed;
    clamp_roundoff(plan.matrix);
  }
  return plan;
}

double slice_cost(const TransportPlan& plan, const Matrix& cost, bool p_applied) {
  if (!p_applied)
    throw ParameterError("slice_cost: cost matrix must carry the exponent already");
  if (!plan.matrix.same_shape(cost)) throw ShapeError("slice_cost: shapes disagree");
  double acc = 0.0;
  for (std::size_t i = 0; i < cost.rows(); ++i) {
    const double* ci = cost.row(i);
    const double* pi = plan.matrix.row(i);
    for (std::size_t j = 0; j < cost.cols(); ++j) acc += ci[j] * pi[j];
  }
  return acc;
}

EspWeights esp_weights(const Vector& costs, double tau) {
  if (tau < 0.0) throw ParameterError("esp_weights: tau must be nonnegative");
  if (costs.empty()) throw ShapeError("esp_weights: no slices");
  for (double c : costs)
    if (!std::isfinite(c)) throw ParameterError("esp_weights: non-finite cost");
  EspWeights w;
  w.tau = tau;
  w.costs = costs;
  const std::size_t l = costs.size();
  // softmax(-tau * costs); tau = 0 lands on exactly 1/L since every
  // shifted exponent is exp(0) = 1
  Vector z(l);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < l; ++i) {
    z[i] = -tau * costs[i];
    mx = std::max(mx, z[i]);
  }
  w.sigma.resize(l);
  double sum = 0.0;
  for (std::size_t i = 0; i < l; ++i) {
    w.sigma[i] = std::exp(z[i] - mx);
    sum += w.sigma[i];
  }
  for (std::size_t i = 0; i < l; ++i) w.sigma[i] /= sum;
  return w;
}

EspDecomposition esp_decompose(const Matrix& q, const Matrix& k, const SliceSet& slices,
                               double t, double tau, SortMode mode, double p) {
  if (q.rows() != k.rows() || q.cols() != k.cols())
    throw ShapeError("esp_decompose: q and k shapes disagree");
  if (slices.dim() != q.rows())
    throw ShapeError("esp_decompose: slice dimension disagrees with features");
  if (q.cols() == 0) throw ShapeError("esp_decompose: no tokens");
  if (p < 1.0) throw ParameterError("esp_decompose: cost exponent must be >= 1");

  EspDecomposition d;
  d.mode = mode;
  d.t = t;
  d.tau = tau;
  d.p = p;

  const std::size_t n = q.cols();
  const std::size_t l = slices.count();
  d.sq_dist = pairwise_sq_dist(q, k);
  if (p == 2.0) {
    d.cost = d.sq_dist;  // bitwise identical, no pow round trip
  } else {
    d.cost = Matrix(n, n);
    for (std::size_t i = 0; i < d.cost.size(); ++i)
      d.cost.data()[i] = std::pow(d.sq_dist.data()[i], p / 2.0);
  }
  check_finite(d.cost, "esp_decompose cost");

  const Matrix qp = slices.project(q);
  const Matrix kp = slices.project(k);
  d.q_proj.resize(l);
  d.k_proj.resize(l);
  for (std::size_t s = 0; s < l; ++s) {
    d.q_proj[s].assign(qp.row(s), qp.row(s) + n);
    d.k_proj[s].assign(kp.row(s), kp.row(s) + n);
  }

  std::vector<SinglePlan> sp(l);
  // slices are independent; aggregation below stays ordered
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1) if (l > 1)
#endif
  for (long long s = 0; s < static_cast<long long>(l); ++s)
    sp[s] = single_slice_plan(d.q_proj[s], d.k_proj[s], t, mode);

  const double inv_n = 1.0 / static_cast<double>(n);
  d.slice_costs.resize(l);
  if (mode == SortMode::kHard) {
    d.q_order.resize(l);
    d.k_order.resize(l);
    d.match.resize(l);
    for (std::size_t s = 0; s < l; ++s) {
      d.q_order[s] = std::move(sp[s].q_order);
      d.k_order[s] = std::move(sp[s].k_order);
      d.match[s] = std::move(sp[s].match);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += d.cost(i, d.match[s][i]) * inv_n;
      d.slice_costs[s] = acc;
    }
  } else {
    d.a.resize(l);
    d.b.resize(l);
    d.plans.resize(l);
    for (std::size_t s = 0; s < l; ++s) {
      d.a[s] = std::move(sp[s].a);
      d.b[s] = std::move(sp[s].b);
      d.plans[s] = std::move(sp[s].dense);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* ci = d.cost.row(i);
        const double* pi = d.plans[s].row(i);
        for (std::size_t j = 0; j < n; ++j) acc += ci[j] * pi[j];
      }
      d.slice_costs[s] = acc;
    }
  }

  d.weights = esp_weights(d.slice_costs, tau);

  d.plan = Matrix(n, n);
  for (std::size_t s = 0; s < l; ++s) {
    const double w = d.weights.sigma[s];
    if (mode == SortMode::kHard) {
      for (std::size_t i = 0; i < n; ++i) d.plan(i, d.match[s][i]) += w * inv_n;
    } else {
      for (std::size_t i = 0; i < d.plan.size(); ++i)
        d.plan.data()[i] += w * d.plans[s].data()[i];
    }
  }
  clamp_roundoff(d.plan);
  return d;
}

EspPlanResult esp_plan(const Matrix& q, const Matrix& k, const SliceSet& slices,
                       double t, double tau, SortMode mode) {
  EspDecomposition d = esp_decompose(q, k, slices, t, tau, mode);
  EspPlanResult out;
  out.plan.matrix = std::move(d.plan);
  out.plan.source_mass = 1.0 / static_cast<double>(q.cols());
  out.plan.target_mass = out.plan.source_mass;
  out.plan.exactness =
      mode == SortMode::kHard ? PlanExactness::kExact : PlanExactness::kRelaxed;
  out.weights = std::move(d.weights);
  return out;
}

Matrix interpolation_matrix(std::size_t n, std::size_t m) {
  if (n == 0 || m == 0) throw ParameterError("interpolation_matrix: zero size");
  Matrix out(n, m);
  const double dn = static_cast<double>(n);
  // grid points i/n and j/m compared exactly via cross-multiplication;
  // a coincidence puts full weight on that column, otherwise the two
  // enclosing columns split it
  for (std::size_t i = 1; i <= n; ++i) {
    const std::uint64_t im = static_cast<std::uint64_t>(i) * m;
    if (im % n == 0) {
      const std::uint64_t j = im / n;  // 1..m since i <= n
      out(i - 1, j - 1) = 1.0;
      continue;
    }
    for (std::size_t j = 1; j <= m; ++j) {
      const std::uint64_t jn = static_cast<std::uint64_t>(j) * n;
      if (j < m && jn < im && im < jn + n) {
        out(i - 1, j - 1) = static_cast<double>(im - jn) / dn;
      } else if (jn < im + n && im < jn) {
        out(i - 1, j - 1) = static_cast<double>(jn - im) / dn;
      }
    }
  }
  return out;
}

TransportPlan cross_plan(const Vector& q_proj, const Vector& k_proj, double t,
                         SortMode mode) {
  const std::size_t n = q_proj.size();
  const std::size_t m = k_proj.size();
  if (n == 0 || m == 0) throw ShapeError("cross_plan: empty side");
  const Matrix interp = interpolation_matrix(n, m);

  TransportPlan plan;
  plan.source_mass = 1.0 / static_cast<double>(n);
  plan.target_mass = 1.0 / static_cast<double>(m);
  plan.exactness = PlanExactness::kRelaxed;  // interpolation splits mass

  if (mode == SortMode::kHard) {
    const auto qo = argsort_stable(q_proj);
    const auto ko = argsort_stable(k_proj);
    const auto qpos = inverse_perm(qo);
    const auto kpos = inverse_perm(ko);
    plan.matrix = Matrix(n, m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        plan.matrix(i, j) = plan.source_mass * interp(qpos[i], kpos[j]);
  } else {
    const Matrix a = soft_sort(q_proj, t);
    const Matrix b = soft_sort(k_proj, t);
    plan.matrix = matmul(matmul(transpose(a), interp), b);
    for (std::size_t i = 0; i < plan.matrix.size(); ++i)
      plan.matrix.data()[i] *= plan.source_mass;
    clamp_roundoff(plan.matrix);
  }
  return plan;
}

SinkhornTrace sinkhorn_core(const Matrix& z, std::size_t iters) {
  const std::size_t n = z.rows(), m = z.cols();
  SinkhornTrace tr;
  tr.z = z;
  tr.iters = iters;
  tr.f.assign(n, 0.0);
  tr.g.assign(m, 0.0);
  const double log_n = std::log(static_cast<double>(n));
  const double log_m = std::log(static_cast<double>(m));
  Matrix shifted(n, m);
  for (std::size_t s = 0; s < iters; ++s) {
    if (s % 2 == 0) {
      tr.used.push_back(tr.g);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) shifted(i, j) = z(i, j) + tr.g[j];
      const Vector lse = logsumexp_rows(shifted);
      for (std::size_t i = 0; i < n; ++i) tr.f[i] = -log_n - lse[i];
    } else {
      tr.used.push_back(tr.f);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) shifted(i, j) = z(i, j) + tr.f[i];
      const Vector lse = logsumexp_rows(transpose(shifted));
      for (std::size_t j = 0; j < m; ++j) tr.g[j] = -log_m - lse[j];
    }
  }
  for (double x : tr.f)
    if (!std::isfinite(x)) throw DivergenceError("sinkhorn: non-finite potential");
  for (double x : tr.g)
    if (!std::isfinite(x)) throw DivergenceError("sinkhorn: non-finite potential");
  return tr;
}

Matrix sinkhorn_matrix(const SinkhornTrace& trace) {
  const std::size_t n = trace.z.rows(), m = trace.z.cols();
  Matrix out(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      out(i, j) = std::exp(trace.f[i] + trace.z(i, j) + trace.g[j]);
  return out;
}

TransportPlan sinkhorn_plan(const Matrix& cost, double epsilon, std::size_t iters) {
  if (!(epsilon > 0.0)) throw ParameterError("sinkhorn_plan: epsilon must be positive");
  if (cost.rows() == 0 || cost.cols() == 0) throw ShapeError("sinkhorn_plan: empty cost");
  check_finite(cost, "sinkhorn_plan cost");
  Matrix z(cost.rows(), cost.cols());
  for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] = -cost.data()[i] / epsilon;

  TransportPlan plan;
  plan.source_mass = 1.0 / static_cast<double>(cost.rows());
  plan.target_mass = 1.0 / static_cast<double>(cost.cols());
  plan.exactness = PlanExactness::kRelaxed;
  if (iters == 0) {
    plan.matrix = softmax_rows(z, 1.0);  // classic attention rows
  } else {
    plan.matrix = sinkhorn_matrix(sinkhorn_core(z, iters));
  }
  return plan;
}

ExactOtResult exact_ot_oracle(const Matrix& cost) {
  const std::size_t n = cost.rows();
  if (n != cost.cols()) throw ShapeError("exact_ot_oracle: cost must be square");
  if (n == 0) throw ShapeError("exact_ot_oracle: empty cost");
  if (n > 8) throw SizeError("exact_ot_oracle: exhaustive search capped at N = 8");

  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::vector<std::size_t> best = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += cost(i, perm[i]) * inv_n;
    if (acc < best_cost) {
      best_cost = acc;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  ExactOtResult out;
  out.cost = best_cost;
  out.permutation = best;
  out.plan.matrix = densify_hard(best);
  out.plan.source_mass = inv_n;
  out.plan.target_mass = inv_n;
  out.plan.exactness = PlanExactness::kExact;
  return out;
}

}  // namespace espattn
