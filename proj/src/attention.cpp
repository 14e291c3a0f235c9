#include "espattn/attention.hpp"

#include <cmath>

namespace espattn {

namespace {

constexpr double kGroupNormEps = 1e-5;

// scale * Q^T K with rows indexing queries; the single construction point
// shared by the softmax and Sinkhorn kernels so their zero-iteration
// outputs agree bitwise.
Matrix similarity_logits(const Matrix& q, const Matrix& k, double scale) {
  if (q.rows() != k.rows()) throw ShapeError("attention: q/k feature dims disagree");
  Matrix z = matmul(transpose(q), k);
  for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] *= scale;
  return z;
}

Matrix output_from_row_probs(const Matrix& v, const Matrix& probs) {
  // probs rows index queries; out = V * probs^T
  return matmul(v, transpose(probs));
}

void softmax_rows_backward(const Matrix& probs, const Matrix& dprobs, Matrix& dz) {
  dz = Matrix(probs.rows(), probs.cols());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < probs.cols(); ++j) dot += dprobs(i, j) * probs(i, j);
    for (std::size_t j = 0; j < probs.cols(); ++j)
      dz(i, j) = probs(i, j) * (dprobs(i, j) - dot);
  }
}

void add_scaled(Matrix& acc, const Matrix& m, double w) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += w * m.data()[i];
}

double inner_product(const Matrix& a, const Matrix& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i] * b.data()[i];
  return acc;
}

Matrix rows_slice(const Matrix& m, std::size_t begin, std::size_t count) {
  Matrix out(count, m.cols());
  for (std::size_t i = 0; i < count; ++i)
    std::copy(m.row(begin + i), m.row(begin + i) + m.cols(), out.row(i));
  return out;
}

}  // namespace

void AttentionConfig::validate() const {
  if (sort_mode == SortMode::kSoft && !(sort_temperature > 0.0))
    throw ParameterError("AttentionConfig: sort temperature must be positive");
  if (inverse_temperature < 0.0)
    throw ParameterError("AttentionConfig: tau must be nonnegative");
  if (cost_exponent < 1.0)
    throw ParameterError("AttentionConfig: cost exponent must be >= 1");
  if (!(sinkhorn_epsilon > 0.0))
    throw ParameterError("AttentionConfig: epsilon must be positive");
  if (heads == 0) throw ParameterError("AttentionConfig: heads must be >= 1");
  if (!std::isfinite(lambda)) throw ParameterError("AttentionConfig: lambda must be finite");
}

SliceSet AttentionConfig::make_slices(std::size_t m) const {
  if (slicer == SliceSet::Kind::kAxisAligned) {
    if (slice_count != 0 && slice_count != m)
      throw ParameterError("AttentionConfig: axis-aligned slicing requires L == m");
    return SliceSet::axis_aligned(m);
  }
  return SliceSet::frozen_random(m, slice_count == 0 ? m : slice_count, slicer_seed);
}

MapTape attention_map_forward(AttentionKind kind, const Matrix& q, const Matrix& k,
                              const AttentionConfig& cfg) {
  cfg.validate();
  if (q.cols() == 0) throw ShapeError("attention: no tokens");
  MapTape tape;
  tape.kind = kind;
  tape.cfg = cfg;
  tape.q = q;
  tape.k = k;
  switch (kind) {
    case AttentionKind::kSoftmax: {
      tape.scale = 1.0 / std::sqrt(static_cast<double>(q.rows()));
      const Matrix z = similarity_logits(q, k, tape.scale);
      tape.probs = softmax_rows(z, 1.0);
      tape.mix = transpose(tape.probs);
      break;
    }
    case AttentionKind::kSinkhorn: {
      if (q.cols() != k.cols())
        throw ShapeError("sinkhorn attention: square token sets required");
      tape.scale = 1.0 / std::sqrt(static_cast<double>(q.rows()));
      const Matrix z = similarity_logits(q, k, tape.scale);
      if (cfg.sinkhorn_iters == 0) {
        tape.probs = softmax_rows(z, 1.0);
        tape.mix = transpose(tape.probs);
      } else {
        tape.sink = sinkhorn_core(z, cfg.sinkhorn_iters);
        tape.has_sink = true;
        const Matrix plan = sinkhorn_matrix(tape.sink);
        const double n = static_cast<double>(q.cols());
        tape.mix = Matrix(plan.cols(), plan.rows());
        for (std::size_t i = 0; i < plan.rows(); ++i)
          for (std::size_t j = 0; j < plan.cols(); ++j)
            tape.mix(j, i) = n * plan(i, j);
      }
      break;
    }
    case AttentionKind::kEsp: {
      if (q.cols() != k.cols())
        throw ShapeError("esp attention: square token sets required");
      const SliceSet slices = cfg.make_slices(q.rows());
      tape.esp = esp_decompose(q, k, slices, cfg.sort_temperature,
                               cfg.inverse_temperature, cfg.sort_mode, cfg.cost_exponent);
      tape.mix = transpose(tape.esp.plan);
      break;
    }
    case AttentionKind::kDifferential:
      throw ParameterError("attention_map_forward: differential is a composition, not a map");
  }
  return tape;
}

namespace {

std::pair<Matrix, Matrix> logits_backward(const MapTape& tape, const Matrix& dz) {
  // z = scale * q^T k, rows = queries
  Matrix dq = matmul(tape.k, transpose(dz));
  Matrix dk = matmul(tape.q, dz);
  for (std::size_t i = 0; i < dq.size(); ++i) dq.data()[i] *= tape.scale;
  for (std::size_t i = 0; i < dk.size(); ++i) dk.data()[i] *= tape.scale;
  return {std::move(dq), std::move(dk)};
}

}  // namespace

std::pair<Matrix, Matrix> attention_map_backward(const MapTape& tape, const Matrix& dmix) {
  if (!tape.mix.same_shape(dmix))
    throw ShapeError("attention_map_backward: upstream shape disagrees");
  switch (tape.kind) {
    case AttentionKind::kSoftmax: {
      const Matrix dprobs = transpose(dmix);
      Matrix dz;
      softmax_rows_backward(tape.probs, dprobs, dz);
      return logits_backward(tape, dz);
    }
    case AttentionKind::kSinkhorn: {
      if (!tape.has_sink) {
        const Matrix dprobs = transpose(dmix);
        Matrix dz;
        softmax_rows_backward(tape.probs, dprobs, dz);
        return logits_backward(tape, dz);
      }
      const SinkhornTrace& tr = tape.sink;
      const std::size_t n = tr.z.rows(), m = tr.z.cols();
      const double nn = static_cast<double>(n);
      const Matrix plan = sinkhorn_matrix(tr);
      // mix(j, i) = n * plan(i, j)
      Matrix dplan(n, m);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) dplan(i, j) = nn * dmix(j, i);

      Matrix dz(n, m);
      Vector df(n, 0.0), dg(m, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double w = dplan(i, j) * plan(i, j);
          dz(i, j) += w;
          df[i] += w;
          dg[j] += w;
        }
      // unwind the alternating potential updates
      for (std::size_t step = tr.iters; step-- > 0;) {
        if (step % 2 == 0) {
          // f_i = -log n - lse_j(z_ij + g_j) with g = used[step]
          const Vector& g_used = tr.used[step];
          for (std::size_t i = 0; i < n; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, tr.z(i, j) + g_used[j]);
            double sum = 0.0;
            Vector e(m);
            for (std::size_t j = 0; j < m; ++j) {
              e[j] = std::exp(tr.z(i, j) + g_used[j] - mx);
              sum += e[j];
            }
            for (std::size_t j = 0; j < m; ++j) {
              const double soft = e[j] / sum;
              dz(i, j) -= df[i] * soft;
              dg[j] -= df[i] * soft;
            }
          }
          std::fill(df.begin(), df.end(), 0.0);
        } else {
          const Vector& f_used = tr.used[step];
          for (std::size_t j = 0; j < m; ++j) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, tr.z(i, j) + f_used[i]);
            double sum = 0.0;
            Vector e(n);
            for (std::size_t i = 0; i < n; ++i) {
              e[i] = std::exp(tr.z(i, j) + f_used[i] - mx);
              sum += e[i];
            }
            for (std::size_t i = 0; i < n; ++i) {
              const double soft = e[i] / sum;
              dz(i, j) -= dg[j] * soft;
              df[i] -= dg[j] * soft;
            }
          }
          std::fill(dg.begin(), dg.end(), 0.0);
        }
      }
      return logits_backward(tape, dz);
    }
    case AttentionKind::kEsp: {
      const EspDecomposition& d = tape.esp;
      if (d.mode == SortMode::kHard)
        throw UnsupportedModeError(
            "esp backward: hard sorting admits no gradient; use soft mode");
      const std::size_t n = d.plan.rows();
      const std::size_t mdim = tape.q.rows();
      const std::size_t l = d.plans.size();
      const double inv_n = 1.0 / static_cast<double>(n);
      const Matrix dplan = transpose(dmix);

      Vector dsigma(l);
      for (std::size_t s = 0; s < l; ++s) dsigma[s] = inner_product(dplan, d.plans[s]);
      double mixdot = 0.0;
      for (std::size_t s = 0; s < l; ++s) mixdot += d.weights.sigma[s] * dsigma[s];
      Vector ddcost(l);
      for (std::size_t s = 0; s < l; ++s)
        ddcost[s] = -d.tau * d.weights.sigma[s] * (dsigma[s] - mixdot);

      Matrix dq(mdim, n), dk(mdim, n);
      Matrix dcost_matrix(n, n);
      const SliceSet slices = tape.cfg.make_slices(mdim);
      for (std::size_t s = 0; s < l; ++s) {
        Matrix dplans(n, n);
        for (std::size_t i = 0; i < dplans.size(); ++i)
          dplans.data()[i] = d.weights.sigma[s] * dplan.data()[i] +
                             ddcost[s] * d.cost.data()[i];
        add_scaled(dcost_matrix, d.plans[s], ddcost[s]);

        Matrix da = matmul(d.b[s], transpose(dplans));
        Matrix db = matmul(d.a[s], dplans);
        for (std::size_t i = 0; i < da.size(); ++i) da.data()[i] *= inv_n;
        for (std::size_t i = 0; i < db.size(); ++i) db.data()[i] *= inv_n;
        const Vector dqp = soft_sort_backward(d.q_proj[s], d.t, da);
        const Vector dkp = soft_sort_backward(d.k_proj[s], d.t, db);
        if (slices.kind == SliceSet::Kind::kAxisAligned) {
          for (std::size_t i = 0; i < n; ++i) {
            dq(s, i) += dqp[i];
            dk(s, i) += dkp[i];
          }
        } else {
          for (std::size_t a = 0; a < mdim; ++a) {
            const double dir = slices.directions(s, a);
            for (std::size_t i = 0; i < n; ++i) {
              dq(a, i) += dir * dqp[i];
              dk(a, i) += dir * dkp[i];
            }
          }
        }
      }

      // distance chain: cost = sq^(p/2) elementwise, sq_ij = ||q_i - k_j||^2
      Matrix dsq(n, n);
      if (d.p == 2.0) {
        dsq = dcost_matrix;
      } else {
        for (std::size_t i = 0; i < dsq.size(); ++i) {
          const double sq = d.sq_dist.data()[i];
          dsq.data()[i] =
              sq > 0.0 ? dcost_matrix.data()[i] * (d.p / 2.0) * std::pow(sq, d.p / 2.0 - 1.0)
                       : 0.0;
        }
      }
      for (std::size_t a = 0; a < mdim; ++a) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const double diff = 2.0 * dsq(i, j) * (tape.q(a, i) - tape.k(a, j));
            dq(a, i) += diff;
            dk(a, j) -= diff;
          }
        }
      }
      return {std::move(dq), std::move(dk)};
    }
    case AttentionKind::kDifferential:
      throw ParameterError("attention_map_backward: differential is a composition");
  }
  throw ParameterError("attention_map_backward: unknown kind");
}

Matrix group_norm_cols(const Matrix& x, std::size_t groups, GroupNormCache* cache) {
  if (groups == 0 || x.rows() % groups != 0)
    throw ShapeError("group_norm: feature dimension not divisible by groups");
  const std::size_t gs = x.rows() / groups;
  Matrix out(x.rows(), x.cols());
  Matrix inv_std(groups, x.cols());
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double mean = 0.0;
      for (std::size_t r = 0; r < gs; ++r) mean += x(g * gs + r, j);
      mean /= static_cast<double>(gs);
      double var = 0.0;
      for (std::size_t r = 0; r < gs; ++r) {
        const double c = x(g * gs + r, j) - mean;
        var += c * c;
      }
      var /= static_cast<double>(gs);
      const double inv = 1.0 / std::sqrt(var + kGroupNormEps);
      inv_std(g, j) = inv;
      for (std::size_t r = 0; r < gs; ++r)
        out(g * gs + r, j) = (x(g * gs + r, j) - mean) * inv;
    }
  }
  if (cache) {
    cache->groups = groups;
    cache->normalized = out;
    cache->inv_std = inv_std;
  }
  return out;
}

Matrix group_norm_backward(const GroupNormCache& cache, const Matrix& upstream) {
  const Matrix& xhat = cache.normalized;
  if (!xhat.same_shape(upstream)) throw ShapeError("group_norm_backward: shape disagrees");
  const std::size_t groups = cache.groups;
  const std::size_t gs = xhat.rows() / groups;
  Matrix dx(xhat.rows(), xhat.cols());
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t j = 0; j < xhat.cols(); ++j) {
      double mean_dy = 0.0, mean_dy_xhat = 0.0;
      for (std::size_t r = 0; r < gs; ++r) {
        const double dy = upstream(g * gs + r, j);
        mean_dy += dy;
        mean_dy_xhat += dy * xhat(g * gs + r, j);
      }
      mean_dy /= static_cast<double>(gs);
      mean_dy_xhat /= static_cast<double>(gs);
      const double inv = cache.inv_std(g, j);
      for (std::size_t r = 0; r < gs; ++r) {
        const double dy = upstream(g * gs + r, j);
        dx(g * gs + r, j) =
            inv * (dy - mean_dy - xhat(g * gs + r, j) * mean_dy_xhat);
      }
    }
  }
  return dx;
}

std::pair<Matrix, AttentionTape> attention_forward(AttentionKind kind, const Matrix& q,
                                                   const Matrix& k, const Matrix& v,
                                                   const AttentionConfig& cfg) {
  if (v.cols() != k.cols()) throw ShapeError("attention: v/k token counts disagree");
  AttentionTape tape;
  tape.kind = kind;
  tape.q = q;
  tape.k = k;
  tape.v = v;
  if (kind == AttentionKind::kDifferential) {
    if (q.rows() % 2 != 0 || !q.same_shape(k))
      throw ShapeError("differential attention: stacked q/k pairs need even rows");
    if (cfg.diff_inner == AttentionKind::kDifferential)
      throw ParameterError("attention: differential inner kernel cannot be differential");
    tape.differential = true;
    tape.lambda = cfg.lambda;
    const std::size_t half = q.rows() / 2;
    tape.map1 = attention_map_forward(cfg.diff_inner, rows_slice(q, 0, half),
                                      rows_slice(k, 0, half), cfg);
    tape.map2 = attention_map_forward(cfg.diff_inner, rows_slice(q, half, half),
                                      rows_slice(k, half, half), cfg);
    tape.mix = tape.map1.mix;
    add_scaled(tape.mix, tape.map2.mix, -cfg.lambda);
    const Matrix pre = matmul(v, tape.mix);
    tape.out = group_norm_cols(pre, cfg.heads, &tape.gn);
  } else {
    tape.map1 = attention_map_forward(kind, q, k, cfg);
    tape.mix = tape.map1.mix;
    tape.out = matmul(v, tape.mix);
  }
  return {tape.out, tape};
}

AttentionGrads attention_backward(const AttentionTape& tape, const Matrix& upstream) {
  if (!upstream.same_shape(tape.out))
    throw ShapeError("attention_backward: upstream shape disagrees");
  const Matrix dpre =
      tape.differential ? group_norm_backward(tape.gn, upstream) : upstream;
  AttentionGrads g;
  g.dv = matmul(dpre, transpose(tape.mix));
  const Matrix dmix = matmul(transpose(tape.v), dpre);
  if (tape.differential) {
    auto [dq1, dk1] = attention_map_backward(tape.map1, dmix);
    Matrix dmix2 = dmix;
    for (std::size_t i = 0; i < dmix2.size(); ++i) dmix2.data()[i] *= -tape.lambda;
    auto [dq2, dk2] = attention_map_backward(tape.map2, dmix2);
    g.dq = Matrix(dq1.rows() * 2, dq1.cols());
    g.dk = Matrix(dk1.rows() * 2, dk1.cols());
    for (std::size_t i = 0; i < dq1.rows(); ++i) {
      std::copy(dq1.row(i), dq1.row(i) + dq1.cols(), g.dq.row(i));
      std::copy(dq2.row(i), dq2.row(i) + dq2.cols(), g.dq.row(i + dq1.rows()));
      std::copy(dk1.row(i), dk1.row(i) + dk1.cols(), g.dk.row(i));
      std::copy(dk2.row(i), dk2.row(i) + dk2.cols(), g.dk.row(i + dk1.rows()));
    }
  } else {
    auto [dq, dk] = attention_map_backward(tape.map1, dmix);
    g.dq = std::move(dq);
    g.dk = std::move(dk);
  }
  return g;
}

std::pair<Matrix, AttentionTape> esp_attention_forward(const Matrix& q, const Matrix& k,
                                                       const Matrix& v,
                                                       const AttentionConfig& cfg) {
  return attention_forward(AttentionKind::kEsp, q, k, v, cfg);
}

AttentionGrads esp_attention_backward(const AttentionTape& tape, const Matrix& upstream) {
  if (tape.kind != AttentionKind::kEsp)
    throw ParameterError("esp_attention_backward: tape is not from esp attention");
  return attention_backward(tape, upstream);
}

Matrix softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v, double scale) {
  if (v.cols() != k.cols()) throw ShapeError("softmax_attention: v/k token counts disagree");
  if (!std::isfinite(scale)) throw ParameterError("softmax_attention: non-finite scale");
  const Matrix z = similarity_logits(q, k, scale);
  return output_from_row_probs(v, softmax_rows(z, 1.0));
}

Matrix sinkhorn_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                          const AttentionConfig& cfg) {
  if (v.cols() != k.cols()) throw ShapeError("sinkhorn_attention: v/k token counts disagree");
  cfg.validate();
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.rows()));
  if (cfg.sinkhorn_iters == 0) {
    // same code path as softmax_attention, so the identity is bitwise
    const Matrix z = similarity_logits(q, k, scale);
    return output_from_row_probs(v, softmax_rows(z, 1.0));
  }
  MapTape tape = attention_map_forward(AttentionKind::kSinkhorn, q, k, cfg);
  return matmul(v, tape.mix);
}

Matrix differential_attention(const Matrix& x, const DiffWeights& w, double lambda,
                              AttentionKind inner, const AttentionConfig& cfg) {
  if (inner == AttentionKind::kDifferential)
    throw ParameterError("differential_attention: inner kernel cannot be differential");
  if (!w.wq1.same_shape(w.wk1) || !w.wq2.same_shape(w.wk2) ||
      !w.wq1.same_shape(w.wq2))
    throw ShapeError("differential_attention: projection pair shapes disagree");
  const Matrix q1 = matmul(w.wq1, x), k1 = matmul(w.wk1, x);
  const Matrix q2 = matmul(w.wq2, x), k2 = matmul(w.wk2, x);
  const Matrix v = matmul(w.wv, x);
  const MapTape m1 = attention_map_forward(inner, q1, k1, cfg);
  const MapTape m2 = attention_map_forward(inner, q2, k2, cfg);
  Matrix mix = m1.mix;
  add_scaled(mix, m2.mix, -lambda);
  return group_norm_cols(matmul(v, mix), cfg.heads);
}

Matrix multi_head(const Matrix& x, const std::vector<HeadWeights>& heads,
                  const Matrix& w_out, AttentionKind kind, const AttentionConfig& cfg) {
  if (heads.empty()) throw ParameterError("multi_head: no heads");
  const std::size_t h = heads.size();
  const std::size_t d = x.rows();
  if (d % h != 0) throw ShapeError("multi_head: feature dimension not divisible by heads");
  const std::size_t dh = d / h;
  const std::size_t n = x.cols();
  Matrix concat(d, n);
  for (std::size_t hi = 0; hi < h; ++hi) {
    const HeadWeights& hw = heads[hi];
    if (hw.wq.cols() != dh || hw.wk.cols() != dh || hw.wv.cols() != dh ||
        hw.wv.rows() != dh)
      throw ShapeError("multi_head: head weight shapes disagree with head width");
    const Matrix xh = rows_slice(x, hi * dh, dh);
    const Matrix q = matmul(hw.wq, xh);
    const Matrix k = matmul(hw.wk, xh);
    const Matrix v = matmul(hw.wv, xh);
    AttentionConfig head_cfg = cfg;
    head_cfg.heads = 1;
    // slices live in the head's own projected subspace
    head_cfg.slicer = SliceSet::Kind::kAxisAligned;
    head_cfg.slice_count = 0;
    Matrix oh;
    if (kind == AttentionKind::kDifferential) {
      auto [out, tape] = attention_forward(kind, q, k, v, head_cfg);
      oh = out;
      for (std::size_t i = 0; i < oh.size(); ++i) oh.data()[i] *= (1.0 - cfg.lambda);
    } else {
      const MapTape mt = attention_map_forward(kind, q, k, head_cfg);
      oh = matmul(v, mt.mix);
    }
    for (std::size_t r = 0; r < dh; ++r)
      std::copy(oh.row(r), oh.row(r) + n, concat.row(hi * dh + r));
  }
  if (w_out.rows() != d || w_out.cols() != d)
    throw ShapeError("multi_head: output projection must be d x d");
  return matmul(w_out, concat);
}

}  // namespace espattn
