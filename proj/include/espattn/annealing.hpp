#pragma once

#include <optional>

#include "espattn/matrix.hpp"
#include "espattn/sorting.hpp"

namespace espattn {

// Exponential decay temp(e) = gamma^e * initial, clipped at the floor so the
// sort softmax never overflows before the hard switch.
struct AnnealSchedule {
  double initial_temperature = 1e-3;
  double gamma = 0.8;
  double floor = 1e-8;
  std::optional<double> switch_to_hard_at;  // inclusive threshold
};

double temperature_at(const AnnealSchedule& schedule, std::size_t epoch);

struct EffectiveMode {
  SortMode mode = SortMode::kSoft;
  double temperature = 0.0;
};

// Hard sorting outside training, or once the scheduled temperature reaches
// the configured threshold; otherwise soft at the scheduled temperature.
EffectiveMode effective_mode(const AnnealSchedule& schedule, std::size_t epoch,
                             bool training);

}  // namespace espattn
