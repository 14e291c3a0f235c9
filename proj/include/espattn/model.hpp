#pragma once

#include <cstdint>
#include <vector>

#include "espattn/annealing.hpp"
#include "espattn/attention.hpp"
#include "espattn/matrix.hpp"

namespace espattn {

enum class PoolMode { kMean, kMax };

// Single attention layer over token columns, pooled, then a 2-way linear
// classifier. The classifier starts at zero so an untrained model sits
// exactly at chance loss.
struct TinyModel {
  Matrix wq, wk;  // m x d (2m x d for differential attention)
  Matrix wv;      // d x d
  Matrix wc;      // 2 x d
  Vector bc;      // 2
  AttentionKind kind = AttentionKind::kEsp;
  AttentionConfig cfg;
  PoolMode pool = PoolMode::kMean;

  static TinyModel make(std::size_t m, std::size_t d, AttentionKind kind,
                        std::uint64_t seed, PoolMode pool = PoolMode::kMean,
                        bool random_classifier = false);
};

struct Sample {
  Matrix x;  // d x N token columns
  int label = 0;
};

// Ring of radius 1 versus isotropic Gaussian (sigma 0.4), both pushed into
// d dimensions through one fixed random linear map.
struct SyntheticTask {
  std::size_t n_points = 16;
  std::size_t dim = 8;
  Matrix embed;  // dim x 2

  static SyntheticTask make(std::size_t n_points, std::size_t dim, std::uint64_t seed);
  std::vector<Sample> batch(std::size_t count, std::uint64_t seed) const;
};

struct SampleTape {
  AttentionTape attention;
  Matrix x;
  Vector pooled;
  std::vector<std::size_t> argmax;  // max-pool winners per feature
  Vector probs;                     // class probabilities
  int label = 0;
};

struct ModelTape {
  std::vector<SampleTape> samples;
  double loss = 0.0;
  double accuracy = 0.0;
};

std::pair<double, ModelTape> forward_loss(const TinyModel& model,
                                          const std::vector<Sample>& batch);

struct ModelGrads {
  Matrix dwq, dwk, dwv, dwc;
  Vector dbc;
};

ModelGrads backward(const TinyModel& model, const ModelTape& tape);

struct EpochRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double temperature = 0.0;
  SortMode mode = SortMode::kSoft;
  double soft_eval = -1.0;  // test accuracy, soft sorting (when logged)
  double hard_eval = -1.0;  // test accuracy, hard sorting (when logged)
};

struct TrainReport {
  std::vector<EpochRow> rows;
  double final_test_accuracy_soft = 0.0;
  double final_test_accuracy_hard = 0.0;
  double final_temperature = 0.0;
};

struct TrainOptions {
  double lr = 0.5;  // stable across every attention kind at this scale
  std::size_t train_size = 64;
  std::size_t test_size = 64;
  std::uint64_t train_seed = 101;
  std::uint64_t test_seed = 202;
  bool log_eval = false;  // per-epoch soft/hard test accuracy columns
};

TrainReport train(TinyModel& model, const SyntheticTask& task, std::size_t epochs,
                  const AnnealSchedule& schedule, const TrainOptions& options);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool pass = false;
};

// Central finite differences over every parameter entry. corrupt_dv skews the
// analytic value path on purpose so the check's failure mode stays honest.
GradCheckReport grad_check(const TinyModel& model, const std::vector<Sample>& batch,
                           double tolerance, bool corrupt_dv = false);

}  // namespace espattn
