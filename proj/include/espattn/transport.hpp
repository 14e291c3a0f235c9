#pragma once

#include <cstdint>
#include <vector>

#include "espattn/matrix.hpp"
#include "espattn/sorting.hpp"

namespace espattn {

enum class PlanExactness { kExact, kRelaxed };

// Coupling between two uniform discrete measures (tokens as columns upstream).
// Exact plans come from hard sorting: N * matrix is a permutation matrix (or a
// convex combination of them after aggregation). Relaxed plans come from soft
// sorting or cross-size interpolation and only approximate the marginals.
struct TransportPlan {
  Matrix matrix;           // N x M, nonnegative
  double source_mass = 0;  // 1/N per row
  double target_mass = 0;  // 1/M per column
  PlanExactness exactness = PlanExactness::kRelaxed;

  std::size_t n() const { return matrix.rows(); }
  std::size_t m() const { return matrix.cols(); }
};

struct SliceSet {
  enum class Kind { kAxisAligned, kFrozenRandom };

  Kind kind = Kind::kAxisAligned;
  Matrix directions;  // L x m, unit-norm rows; identity for axis-aligned

  static SliceSet axis_aligned(std::size_t m);
  static SliceSet frozen_random(std::size_t m, std::size_t count, std::uint64_t seed);

  std::size_t count() const { return directions.rows(); }
  std::size_t dim() const { return directions.cols(); }

  // L x N matrix of projected tokens; axis-aligned rows are copied verbatim
  // so no arithmetic perturbs the values.
  Matrix project(const Matrix& tokens) const;
};

struct EspWeights {
  Vector sigma;  // per-slice weights, nonnegative, sum 1
  Vector costs;  // per-slice transport costs
  double tau = 0.0;
};

TransportPlan slice_plan(const Vector& q_proj, const Vector& k_proj, double t,
                         SortMode mode);

// Total cost of a coupling. The cost matrix must already carry the exponent
// (it is applied when the matrix is built, nowhere else); the flag is the
// caller's attestation of that.
double slice_cost(const TransportPlan& plan, const Matrix& cost, bool p_applied = true);

EspWeights esp_weights(const Vector& costs, double tau);

// Full per-slice decomposition kept around for gradient replay.
struct EspDecomposition {
  SortMode mode = SortMode::kSoft;
  double t = 0.0, tau = 0.0, p = 2.0;
  Matrix sq_dist;  // raw squared pairwise distances, N x N
  Matrix cost;     // exponent applied
  std::vector<Vector> q_proj, k_proj;
  // hard mode: per-slice ascending orders and the query->key matching
  std::vector<std::vector<std::size_t>> q_order, k_order, match;
  // soft mode: per-slice sort relaxations and lifted plans
  std::vector<Matrix> a, b, plans;
  Vector slice_costs;
  EspWeights weights;
  Matrix plan;  // aggregated G, N x N
};

EspDecomposition esp_decompose(const Matrix& q, const Matrix& k, const SliceSet& slices,
                               double t, double tau, SortMode mode, double p = 2.0);

struct EspPlanResult {
  TransportPlan plan;
  EspWeights weights;
};

EspPlanResult esp_plan(const Matrix& q, const Matrix& k, const SliceSet& slices,
                       double t, double tau, SortMode mode);

// Cross-size interpolation weights on the grids i/N, j/M (1-based). A row is
// "interior" when i*M >= N; interior rows sum to 1 exactly.
Matrix interpolation_matrix(std::size_t n, std::size_t m);

TransportPlan cross_plan(const Vector& q_proj, const Vector& k_proj, double t,
                         SortMode mode);

// Log-domain Sinkhorn on arbitrary logits z (the caller picks z = -cost/eps or
// attention similarities). iters counts half-steps: even steps refresh the row
// potential f, odd steps the column potential g. The per-step inputs are kept
// so reverse mode can replay the recursion.
struct SinkhornTrace {
  Matrix z;
  std::vector<Vector> used;  // step s: the opposite potential consumed by step s
  Vector f, g;               // final potentials
  std::size_t iters = 0;
};

SinkhornTrace sinkhorn_core(const Matrix& z, std::size_t iters);
Matrix sinkhorn_matrix(const SinkhornTrace& trace);  // exp(f_i + z_ij + g_j)

TransportPlan sinkhorn_plan(const Matrix& cost, double epsilon, std::size_t iters);

struct ExactOtResult {
  double cost = 0.0;
  std::vector<std::size_t> permutation;  // row i matched to column permutation[i]
  TransportPlan plan;
};

// Brute force over all N! matchings; the ground truth the fast paths are
// measured against.
ExactOtResult exact_ot_oracle(const Matrix& cost);

}  // namespace espattn
