#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "espattn/annealing.hpp"
#include "espattn/attention.hpp"
#include "espattn/matrix.hpp"
#include "espattn/sorting.hpp"
#include "espattn/transport.hpp"

namespace py = pybind11;

namespace {

using espattn::Matrix;
using espattn::Vector;

using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const DArray& a) {
  if (a.ndim() != 2) throw espattn::ShapeError("expected a 2-D array");
  Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + m.size(), m.data());
  return m;
}

Vector to_vector(const DArray& a) {
  if (a.ndim() != 1) throw espattn::ShapeError("expected a 1-D array");
  return Vector(a.data(), a.data() + a.shape(0));
}

py::array_t<double> from_matrix(const Matrix& m) {
  py::array_t<double> a({m.rows(), m.cols()});
  std::copy(m.data(), m.data() + m.size(), a.mutable_data());
  return a;
}

py::array_t<double> from_vector(const Vector& v) {
  // the (count, ptr) form copies; the bare-count constructor produces a
  // stride-0 array under older header versions of the numpy bindings
  return py::array_t<double>(static_cast<py::ssize_t>(v.size()), v.data());
}

espattn::SortMode parse_mode(const std::string& mode) {
  if (mode == "soft") return espattn::SortMode::kSoft;
  if (mode == "hard") return espattn::SortMode::kHard;
  throw espattn::ParameterError("mode must be 'soft' or 'hard'");
}

espattn::SliceSet make_slices(std::size_t m, std::size_t count, std::uint64_t seed) {
  return count == 0 ? espattn::SliceSet::axis_aligned(m)
                    : espattn::SliceSet::frozen_random(m, count, seed);
}

espattn::AttentionConfig esp_config(double sort_temp, double tau,
                                    const std::string& mode, std::size_t slices,
                                    std::uint64_t slice_seed) {
  espattn::AttentionConfig cfg;
  cfg.sort_temperature = sort_temp;
  cfg.inverse_temperature = tau;
  cfg.sort_mode = parse_mode(mode);
  if (slices > 0) {
    cfg.slicer = espattn::SliceSet::Kind::kFrozenRandom;
    cfg.slice_count = slices;
    cfg.slicer_seed = slice_seed;
  }
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_espattn, m) {
  m.doc() = "doubly-stochastic attention kernels (sliced transport, entropic, classic)";

  m.def(
      "soft_sort",
      [](const DArray& v, double t) { return from_matrix(espattn::soft_sort(to_vector(v), t)); },
      py::arg("v"), py::arg("t"),
      "Row-stochastic relaxation of the ascending sort permutation matrix");

  m.def(
      "hard_sort_permutation",
      [](const DArray& v) { return from_matrix(espattn::hard_argsort_perm(to_vector(v))); },
      py::arg("v"), "Exact ascending sort permutation matrix (stable ties)");

  m.def(
      "soft_sort_grad",
      [](const DArray& v, double t, const DArray& upstream) {
        return from_vector(espattn::soft_sort_backward(to_vector(v), t, to_matrix(upstream)));
      },
      py::arg("v"), py::arg("t"), py::arg("upstream"),
      "Gradient of soft_sort with respect to the input values");

  m.def(
      "slice_plan",
      [](const DArray& q_proj, const DArray& k_proj, double t, const std::string& mode) {
        return from_matrix(
            espattn::slice_plan(to_vector(q_proj), to_vector(k_proj), t, parse_mode(mode)).matrix);
      },
      py::arg("q_proj"), py::arg("k_proj"), py::arg("t"), py::arg("mode") = "hard",
      "Transport plan between two equal-size 1-D point sets");

  m.def(
      "esp_plan",
      [](const DArray& q, const DArray& k, std::size_t slices, double t, double tau,
         const std::string& mode, std::uint64_t slice_seed) {
        const Matrix qm = to_matrix(q);
        const espattn::EspPlanResult r =
            espattn::esp_plan(qm, to_matrix(k), make_slices(qm.rows(), slices, slice_seed),
                              t, tau, parse_mode(mode));
        return py::make_tuple(from_matrix(r.plan.matrix), from_vector(r.weights.sigma));
      },
      py::arg("q"), py::arg("k"), py::arg("slices") = 0, py::arg("t") = 1e-3,
      py::arg("tau") = 1.0, py::arg("mode") = "hard", py::arg("slice_seed") = 0,
      "Cost-weighted mixture of per-slice transport plans; returns (plan, slice_weights)");

  m.def(
      "interpolation_matrix",
      [](std::size_t n, std::size_t m_) { return from_matrix(espattn::interpolation_matrix(n, m_)); },
      py::arg("n"), py::arg("m"),
      "Piecewise-linear resampling matrix between rank grids of sizes n and m");

  m.def(
      "cross_plan",
      [](const DArray& q_proj, const DArray& k_proj, double t, const std::string& mode) {
        return from_matrix(
            espattn::cross_plan(to_vector(q_proj), to_vector(k_proj), t, parse_mode(mode)).matrix);
      },
      py::arg("q_proj"), py::arg("k_proj"), py::arg("t") = 1e-3, py::arg("mode") = "hard",
      "Transport plan between 1-D point sets of different sizes");

  m.def(
      "sinkhorn_plan",
      [](const DArray& cost, double epsilon, std::size_t iters) {
        return from_matrix(espattn::sinkhorn_plan(to_matrix(cost), epsilon, iters).matrix);
      },
      py::arg("cost"), py::arg("epsilon") = 0.1, py::arg("iters") = 5,
      "Entropic transport plan after a fixed number of balancing half-steps");

  m.def(
      "exact_ot_oracle",
      [](const DArray& cost) {
        const espattn::ExactOtResult r = espattn::exact_ot_oracle(to_matrix(cost));
        return py::make_tuple(r.cost, r.permutation, from_matrix(r.plan.matrix));
      },
      py::arg("cost"),
      "Brute-force optimal assignment for small problems: (cost, permutation, plan)");

  m.def(
      "esp_attention",
      [](const DArray& q, const DArray& k, const DArray& v, double sort_temp, double tau,
         const std::string& mode, std::size_t slices, std::uint64_t slice_seed) {
        return from_matrix(espattn::esp_attention_forward(
                               to_matrix(q), to_matrix(k), to_matrix(v),
                               esp_config(sort_temp, tau, mode, slices, slice_seed))
                               .first);
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("sort_temp") = 1e-3,
      py::arg("tau") = 1.0, py::arg("mode") = "soft", py::arg("slices") = 0,
      py::arg("slice_seed") = 0, "Attention output mixed through the sliced-transport plan");

  m.def(
      "esp_attention_grad",
      [](const DArray& q, const DArray& k, const DArray& v, const DArray& upstream,
         double sort_temp, double tau, std::size_t slices, std::uint64_t slice_seed) {
        const auto [out, tape] = espattn::esp_attention_forward(
            to_matrix(q), to_matrix(k), to_matrix(v),
            esp_config(sort_temp, tau, "soft", slices, slice_seed));
        const espattn::AttentionGrads g =
            espattn::esp_attention_backward(tape, to_matrix(upstream));
        return py::make_tuple(from_matrix(g.dq), from_matrix(g.dk), from_matrix(g.dv));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("upstream"),
      py::arg("sort_temp") = 1e-3, py::arg("tau") = 1.0, py::arg("slices") = 0,
      py::arg("slice_seed") = 0,
      "Reverse-mode input gradients for the soft sliced-transport attention");

  m.def(
      "softmax_attention",
      [](const DArray& q, const DArray& k, const DArray& v, double scale) {
        return from_matrix(
            espattn::softmax_attention(to_matrix(q), to_matrix(k), to_matrix(v), scale));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("scale"),
      "Classic row-softmax attention over scaled inner products");

  m.def(
      "sinkhorn_attention",
      [](const DArray& q, const DArray& k, const DArray& v, double epsilon,
         std::size_t iters) {
        espattn::AttentionConfig cfg;
        cfg.sinkhorn_epsilon = epsilon;
        cfg.sinkhorn_iters = iters;
        return from_matrix(
            espattn::sinkhorn_attention(to_matrix(q), to_matrix(k), to_matrix(v), cfg));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("epsilon") = 0.1,
      py::arg("iters") = 5,
      "Attention mixed through the iteratively balanced similarity kernel");

  m.def(
      "differential_attention",
      [](const DArray& x, const DArray& wq1, const DArray& wk1, const DArray& wq2,
         const DArray& wk2, const DArray& wv, double lambda, const std::string& inner) {
        espattn::DiffWeights w{to_matrix(wq1), to_matrix(wk1), to_matrix(wq2),
                               to_matrix(wk2), to_matrix(wv)};
        espattn::AttentionKind kind;
        if (inner == "softmax") kind = espattn::AttentionKind::kSoftmax;
        else if (inner == "esp") kind = espattn::AttentionKind::kEsp;
        else if (inner == "sinkhorn") kind = espattn::AttentionKind::kSinkhorn;
        else throw espattn::ParameterError("inner must be softmax, esp, or sinkhorn");
        return from_matrix(espattn::differential_attention(to_matrix(x), w, lambda, kind,
                                                           espattn::AttentionConfig{}));
      },
      py::arg("x"), py::arg("wq1"), py::arg("wk1"), py::arg("wq2"), py::arg("wk2"),
      py::arg("wv"), py::arg("lambda_") = 0.5, py::arg("inner") = "softmax",
      "Normalized difference of two attention maps applied to shared values");

  m.def(
      "temperature_at",
      [](double initial, double gamma, double floor, std::size_t epoch) {
        espattn::AnnealSchedule s;
        s.initial_temperature = initial;
        s.gamma = gamma;
        s.floor = floor;
        return espattn::temperature_at(s, epoch);
      },
      py::arg("initial"), py::arg("gamma"), py::arg("floor"), py::arg("epoch"),
      "Floored geometric temperature decay");
}
