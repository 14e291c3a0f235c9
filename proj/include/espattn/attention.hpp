#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "espattn/matrix.hpp"
#include "espattn/sorting.hpp"
#include "espattn/transport.hpp"

namespace espattn {

enum class AttentionKind { kSoftmax, kSinkhorn, kEsp, kDifferential };

struct AttentionConfig {
  double sort_temperature = 1e-3;    // SoftSort t
  double inverse_temperature = 1.0;  // slice-weight tau
  double cost_exponent = 2.0;
  SortMode sort_mode = SortMode::kSoft;
  SliceSet::Kind slicer = SliceSet::Kind::kAxisAligned;
  std::size_t slice_count = 0;  // 0 = feature dimension
  std::uint64_t slicer_seed = 0;
  double sinkhorn_epsilon = 0.1;
  std::size_t sinkhorn_iters = 5;
  std::size_t heads = 1;
  double lambda = 0.5;  // differential mixing weight
  AttentionKind diff_inner = AttentionKind::kSoftmax;  // maps inside differential

  void validate() const;
  SliceSet make_slices(std::size_t m) const;
};

// Mixing-matrix level: mix is the N x N matrix with out = V * mix, so column
// j of mix is the distribution producing output token j.
struct MapTape {
  AttentionKind kind = AttentionKind::kSoftmax;
  AttentionConfig cfg;
  Matrix q, k;
  Matrix mix;
  double scale = 0.0;   // similarity scaling for softmax/sinkhorn
  Matrix probs;         // row-softmax over keys (softmax, sinkhorn iters=0)
  SinkhornTrace sink;   // sinkhorn iters >= 1
  bool has_sink = false;
  EspDecomposition esp;
};

MapTape attention_map_forward(AttentionKind kind, const Matrix& q, const Matrix& k,
                              const AttentionConfig& cfg);
// gradients of <dmix, mix> w.r.t. q and k
std::pair<Matrix, Matrix> attention_map_backward(const MapTape& tape, const Matrix& dmix);

struct GroupNormCache {
  std::size_t groups = 1;
  Matrix normalized;  // xhat
  Matrix inv_std;     // groups x N
};

// Per-column normalization over feature groups: zero mean, unit variance,
// eps 1e-5, no affine.
Matrix group_norm_cols(const Matrix& x, std::size_t groups, GroupNormCache* cache = nullptr);
Matrix group_norm_backward(const GroupNormCache& cache, const Matrix& upstream);

struct AttentionTape {
  AttentionKind kind = AttentionKind::kEsp;
  bool differential = false;
  double lambda = 0.0;
  Matrix q, k, v;  // differential: q/k carry both projection pairs stacked
  MapTape map1, map2;
  Matrix mix;  // effective mixing matrix (difference for differential)
  GroupNormCache gn;
  Matrix out;
};

struct AttentionGrads {
  Matrix dq, dk, dv;
};

std::pair<Matrix, AttentionTape> attention_forward(AttentionKind kind, const Matrix& q,
                                                   const Matrix& k, const Matrix& v,
                                                   const AttentionConfig& cfg);
AttentionGrads attention_backward(const AttentionTape& tape, const Matrix& upstream);

std::pair<Matrix, AttentionTape> esp_attention_forward(const Matrix& q, const Matrix& k,
                                                       const Matrix& v,
                                                       const AttentionConfig& cfg);
AttentionGrads esp_attention_backward(const AttentionTape& tape, const Matrix& upstream);

Matrix softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v, double scale);

Matrix sinkhorn_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                          const AttentionConfig& cfg);

struct DiffWeights {
  Matrix wq1, wk1, wq2, wk2;  // projection pairs
  Matrix wv;
};

Matrix differential_attention(const Matrix& x, const DiffWeights& w, double lambda,
                              AttentionKind inner, const AttentionConfig& cfg);

struct HeadWeights {
  Matrix wq, wk;  // rows doubled when the head runs differential attention
  Matrix wv;
};

Matrix multi_head(const Matrix& x, const std::vector<HeadWeights>& heads,
                  const Matrix& w_out, AttentionKind kind, const AttentionConfig& cfg);

}  // namespace espattn
