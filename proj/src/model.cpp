#include "espattn/model.hpp"

#include <cmath>
#include <numbers>

#include "espattn/rng.hpp"

namespace espattn {

TinyModel TinyModel::make(std::size_t m, std::size_t d, AttentionKind kind,
                          std::uint64_t seed, PoolMode pool, bool random_classifier) {
  if (m == 0 || d == 0) throw ParameterError("TinyModel: zero dimensions");
  TinyModel model;
  model.kind = kind;
  model.pool = pool;
  Rng rng(seed);
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const std::size_t qk_rows = kind == AttentionKind::kDifferential ? 2 * m : m;
  model.wq = rng.normal_matrix(qk_rows, d, proj_std);
  model.wk = rng.normal_matrix(qk_rows, d, proj_std);
  model.wv = rng.normal_matrix(d, d, proj_std);
  if (random_classifier) {
    model.wc = rng.normal_matrix(2, d, proj_std);
    model.bc = rng.normal_vector(2, 0.1);
  } else {
    model.wc = Matrix(2, d);
    model.bc.assign(2, 0.0);
  }
  return model;
}

SyntheticTask SyntheticTask::make(std::size_t n_points, std::size_t dim,
                                  std::uint64_t seed) {
  if (n_points == 0 || dim == 0) throw ParameterError("SyntheticTask: zero sizes");
  SyntheticTask task;
  task.n_points = n_points;
  task.dim = dim;
  Rng rng(seed);
  task.embed = rng.normal_matrix(dim, 2);
  return task;
}

std::vector<Sample> SyntheticTask::batch(std::size_t count, std::uint64_t seed) const {
  Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    Sample sample;
    sample.label = static_cast<int>(s % 2);  // balanced by construction
    Matrix points(2, n_points);
    if (sample.label == 1) {
      for (std::size_t j = 0; j < n_points; ++j) {
        const double theta = 2.0 * std::numbers::pi * rng.uniform();
        points(0, j) = std::cos(theta);
        points(1, j) = std::sin(theta);
      }
    } else {
      for (std::size_t j = 0; j < n_points; ++j) {
        points(0, j) = 0.4 * rng.normal();
        points(1, j) = 0.4 * rng.normal();
      }
    }
    sample.x = matmul(embed, points);
    out.push_back(std::move(sample));
  }
  return out;
}

namespace {

Vector pool_columns(const Matrix& o, PoolMode pool, std::vector<std::size_t>* argmax) {
  const std::size_t d = o.rows(), n = o.cols();
  Vector z(d, 0.0);
  if (pool == PoolMode::kMean) {
    for (std::size_t f = 0; f < d; ++f) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += o(f, j);
      z[f] = acc / static_cast<double>(n);
    }
  } else {
    if (argmax) argmax->assign(d, 0);
    for (std::size_t f = 0; f < d; ++f) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < n; ++j)
        if (o(f, j) > o(f, best)) best = j;
      z[f] = o(f, best);
      if (argmax) (*argmax)[f] = best;
    }
  }
  return z;
}

Vector class_probs(const TinyModel& model, const Vector& z) {
  Vector logits(2, 0.0);
  for (int c = 0; c < 2; ++c) {
    double acc = model.bc[c];
    for (std::size_t f = 0; f < z.size(); ++f) acc += model.wc(c, f) * z[f];
    logits[c] = acc;
  }
  const double mx = std::max(logits[0], logits[1]);
  const double e0 = std::exp(logits[0] - mx), e1 = std::exp(logits[1] - mx);
  const double sum = e0 + e1;
  return {e0 / sum, e1 / sum};
}

}  // namespace

std::pair<double, ModelTape> forward_loss(const TinyModel& model,
                                          const std::vector<Sample>& batch) {
  if (batch.empty()) throw ShapeError("forward_loss: empty batch");
  ModelTape tape;
  tape.samples.reserve(batch.size());
  double loss = 0.0;
  std::size_t correct = 0;
  for (const Sample& sample : batch) {
    if (sample.x.rows() != model.wv.cols())
      throw ShapeError("forward_loss: sample dimension disagrees with model");
    SampleTape st;
    st.x = sample.x;
    st.label = sample.label;
    const Matrix q = matmul(model.wq, sample.x);
    const Matrix k = matmul(model.wk, sample.x);
    const Matrix v = matmul(model.wv, sample.x);
    auto [out, att] = attention_forward(model.kind, q, k, v, model.cfg);
    st.attention = std::move(att);
    st.pooled = pool_columns(out, model.pool, &st.argmax);
    st.probs = class_probs(model, st.pooled);
    const double p = st.probs[static_cast<std::size_t>(sample.label)];
    loss += -std::log(std::max(p, 1e-300));
    const int pred = st.probs[1] > st.probs[0] ? 1 : 0;
    if (pred == sample.label) ++correct;
    tape.samples.push_back(std::move(st));
  }
  loss /= static_cast<double>(batch.size());
  if (!std::isfinite(loss)) throw DivergenceError("forward_loss: non-finite loss");
  tape.loss = loss;
  tape.accuracy = static_cast<double>(correct) / static_cast<double>(batch.size());
  return {loss, tape};
}

ModelGrads backward(const TinyModel& model, const ModelTape& tape) {
  ModelGrads g;
  g.dwq = Matrix(model.wq.rows(), model.wq.cols());
  g.dwk = Matrix(model.wk.rows(), model.wk.cols());
  g.dwv = Matrix(model.wv.rows(), model.wv.cols());
  g.dwc = Matrix(2, model.wc.cols());
  g.dbc.assign(2, 0.0);
  const double inv_b = 1.0 / static_cast<double>(tape.samples.size());
  const std::size_t d = model.wv.rows();
  for (const SampleTape& st : tape.samples) {
    Vector dlogits(2);
    for (int c = 0; c < 2; ++c)
      dlogits[c] = (st.probs[c] - (st.label == c ? 1.0 : 0.0)) * inv_b;
    Vector dz(d, 0.0);
    for (int c = 0; c < 2; ++c) {
      g.dbc[c] += dlogits[c];
      for (std::size_t f = 0; f < d; ++f) {
        g.dwc(c, f) += dlogits[c] * st.pooled[f];
        dz[f] += model.wc(c, f) * dlogits[c];
      }
    }
    const std::size_t n = st.attention.out.cols();
    Matrix dout(d, n);
    if (model.pool == PoolMode::kMean) {
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t f = 0; f < d; ++f)
        for (std::size_t j = 0; j < n; ++j) dout(f, j) = dz[f] * inv_n;
    } else {
      for (std::size_t f = 0; f < d; ++f) dout(f, st.argmax[f]) = dz[f];
    }
    const AttentionGrads ag = attention_backward(st.attention, dout);
    const Matrix xt = transpose(st.x);
    const Matrix dwq = matmul(ag.dq, xt);
    const Matrix dwk = matmul(ag.dk, xt);
    const Matrix dwv = matmul(ag.dv, xt);
    for (std::size_t i = 0; i < g.dwq.size(); ++i) g.dwq.data()[i] += dwq.data()[i];
    for (std::size_t i = 0; i < g.dwk.size(); ++i) g.dwk.data()[i] += dwk.data()[i];
    for (std::size_t i = 0; i < g.dwv.size(); ++i) g.dwv.data()[i] += dwv.data()[i];
  }
  return g;
}

namespace {

double evaluate_accuracy(TinyModel model, const std::vector<Sample>& batch,
                         SortMode mode, double temperature) {
  model.cfg.sort_mode = mode;
  if (mode == SortMode::kSoft) model.cfg.sort_temperature = temperature;
  auto [loss, tape] = forward_loss(model, batch);
  (void)loss;
  return tape.accuracy;
}

void sgd_step(Matrix& w, const Matrix& g, double lr) {
  for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] -= lr * g.data()[i];
  if (!all_finite(w)) throw DivergenceError("train: parameter diverged");
}

}  // namespace

TrainReport train(TinyModel& model, const SyntheticTask& task, std::size_t epochs,
                  const AnnealSchedule& schedule, const TrainOptions& options) {
  const std::vector<Sample> train_batch = task.batch(options.train_size, options.train_seed);
  const std::vector<Sample> test_batch = task.batch(options.test_size, options.test_seed);
  TrainReport report;
  report.rows.reserve(epochs + 1);
  for (std::size_t e = 0; e <= epochs; ++e) {
    const EffectiveMode em = effective_mode(schedule, e, /*training=*/true);
    model.cfg.sort_mode = em.mode;
    if (em.mode == SortMode::kSoft) model.cfg.sort_temperature = em.temperature;
    auto [loss, tape] = forward_loss(model, train_batch);
    EpochRow row;
    row.epoch = e;
    row.loss = loss;
    row.accuracy = tape.accuracy;
    row.temperature = em.temperature;
    row.mode = em.mode;
    if (options.log_eval) {
      row.soft_eval =
          evaluate_accuracy(model, test_batch, SortMode::kSoft, em.temperature);
      row.hard_eval = evaluate_accuracy(model, test_batch, SortMode::kHard, 0.0);
    }
    report.rows.push_back(row);
    if (e == epochs) break;
    if (em.mode == SortMode::kHard) continue;  // no gradient path through hard sort
    const ModelGrads g = backward(model, tape);
    sgd_step(model.wq, g.dwq, options.lr);
    sgd_step(model.wk, g.dwk, options.lr);
    sgd_step(model.wv, g.dwv, options.lr);
    sgd_step(model.wc, g.dwc, options.lr);
    for (int c = 0; c < 2; ++c) {
      model.bc[c] -= options.lr * g.dbc[c];
      if (!std::isfinite(model.bc[c])) throw DivergenceError("train: parameter diverged");
    }
  }
  const double final_temp = temperature_at(schedule, epochs);
  report.final_temperature = final_temp;
  report.final_test_accuracy_soft =
      evaluate_accuracy(model, test_batch, SortMode::kSoft, final_temp);
  report.final_test_accuracy_hard =
      evaluate_accuracy(model, test_batch, SortMode::kHard, 0.0);
  return report;
}

GradCheckReport grad_check(const TinyModel& model, const std::vector<Sample>& batch,
                           double tolerance, bool corrupt_dv) {
  if (model.cfg.sort_mode != SortMode::kSoft)
    throw UnsupportedModeError("grad_check: requires soft sorting mode");
  auto [loss0, tape] = forward_loss(model, batch);
  (void)loss0;
  ModelGrads g = backward(model, tape);
  if (corrupt_dv) {
    for (std::size_t i = 0; i < g.dwv.size(); ++i) g.dwv.data()[i] *= 1.02;
  }

  GradCheckReport report;
  const double h = 1e-5;
  TinyModel probe = model;
  auto fd_entry = [&](Matrix& target, std::size_t idx) {
    const double saved = target.data()[idx];
    target.data()[idx] = saved + h;
    const double up = forward_loss(probe, batch).first;
    target.data()[idx] = saved - h;
    const double down = forward_loss(probe, batch).first;
    target.data()[idx] = saved;
    return (up - down) / (2.0 * h);
  };
  auto check_matrix = [&](Matrix& target, const Matrix& analytic) {
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double numeric = fd_entry(target, i);
      const double a = analytic.data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      report.max_rel_error = std::max(report.max_rel_error, std::abs(a - numeric) / denom);
      ++report.checked;
    }
  };
  check_matrix(probe.wq, g.dwq);
  check_matrix(probe.wk, g.dwk);
  check_matrix(probe.wv, g.dwv);
  check_matrix(probe.wc, g.dwc);
  for (std::size_t c = 0; c < 2; ++c) {
    const double saved = probe.bc[c];
    probe.bc[c] = saved + h;
    const double up = forward_loss(probe, batch).first;
    probe.bc[c] = saved - h;
    const double down = forward_loss(probe, batch).first;
    probe.bc[c] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(g.dbc[c]), std::abs(numeric), 1e-6});
    report.max_rel_error =
        std::max(report.max_rel_error, std::abs(g.dbc[c] - numeric) / denom);
    ++report.checked;
  }
  report.pass = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace espattn
