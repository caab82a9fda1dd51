#include "d4pm/schedule.hpp"

#include <cmath>
#include <string>

namespace d4pm {

namespace {

void check_step(const NoiseSchedule& s, int t, int lo) {
  if (t < lo || t > s.T) {
    throw ConfigError("step t=" + std::to_string(t) + " outside [" +
                      std::to_string(lo) + ", " + std::to_string(s.T) + "]");
  }
}

}  // namespace

double NoiseSchedule::beta_at(int t) const {
  check_step(*this, t, 1);
  return beta[t - 1];
}

double NoiseSchedule::alpha_at(int t) const {
  check_step(*this, t, 1);
  return alpha[t - 1];
}

double NoiseSchedule::alpha_bar_at(int t) const {
  check_step(*this, t, 0);
  return t == 0 ? 1.0 : alpha_bar[t - 1];
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule requires T >= 1, got " + std::to_string(T));
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end) {
    throw ConfigError("schedule requires 0 < beta_start <= beta_end < 1, got [" +
                      std::to_string(beta_start) + ", " + std::to_string(beta_end) + "]");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double running = 1.0;
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    s.beta[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[i] = 1.0 - s.beta[i];
    running *= s.alpha[i];
    s.alpha_bar[i] = running;
  }
  return s;
}

ContinuousLevel sample_continuous_level(const NoiseSchedule& s, int t, Rng& rng) {
  check_step(s, t, 1);
  const double lo = std::sqrt(s.alpha_bar_at(t));
  const double hi = std::sqrt(s.alpha_bar_at(t - 1));
  return ContinuousLevel{rng.uniform(lo, hi), t};
}

ContinuousLevel inference_level(const NoiseSchedule& s, int t) {
  check_step(s, t, 1);
  return ContinuousLevel{std::sqrt(s.alpha_bar_at(t)), t};
}

}  // namespace d4pm
