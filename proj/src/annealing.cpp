#include "espattn/annealing.hpp"

#include <algorithm>
#include <cmath>

namespace espattn {

static void validate(const AnnealSchedule& s) {
  if (!(s.initial_temperature > 0.0))
    throw ParameterError("AnnealSchedule: initial temperature must be positive");
  if (!(s.gamma > 0.0) || !(s.gamma < 1.0))
    throw ParameterError("AnnealSchedule: gamma must lie in (0, 1)");
  if (s.floor < 0.0) throw ParameterError("AnnealSchedule: negative floor");
}

double temperature_at(const AnnealSchedule& schedule, std::size_t epoch) {
  validate(schedule);
  const double t = schedule.initial_temperature *
                   std::pow(schedule.gamma, static_cast<double>(epoch));
  return std::max(schedule.floor, t);
}

EffectiveMode effective_mode(const AnnealSchedule& schedule, std::size_t epoch,
                             bool training) {
  EffectiveMode out;
  out.temperature = temperature_at(schedule, epoch);
  if (!training ||
      (schedule.switch_to_hard_at && out.temperature <= *schedule.switch_to_hard_at)) {
    out.mode = SortMode::kHard;
  } else {
    out.mode = SortMode::kSoft;
  }
  return out;
}

}  // namespace espattn
