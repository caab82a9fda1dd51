#pragma once

#include "d4pm/common.hpp"
#include "d4pm/rng.hpp"

namespace d4pm {

// Diffusion noise schedule. Arrays are 0-based storage for steps t = 1..T;
// use the *_at accessors, which take the 1-based step and pin the
// alpha_bar_at(0) == 1 convention.
struct NoiseSchedule {
  int T = 0;
  Vec beta;       // beta[t-1]  = beta_t
  Vec alpha;      // alpha[t-1] = 1 - beta_t
  Vec alpha_bar;  // alpha_bar[t-1] = prod_{n<=t} alpha_n
  double beta_start = 0.0;
  double beta_end = 0.0;

  double beta_at(int t) const;       // t in [1, T]
  double alpha_at(int t) const;      // t in [1, T]
  double alpha_bar_at(int t) const;  // t in [0, T], alpha_bar_at(0) == 1
};

// Continuous noise-level conditioning scalar and the step it belongs to.
struct ContinuousLevel {
  double value = 1.0;  // in (0, 1]
  int step = 0;
};

// Linear beta interpolation from beta_start to beta_end inclusive
// (beta_1 = beta_start when T == 1). Defaults used by the CLI:
// T=50, beta_start=1e-4, beta_end=5e-2.
NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

// Uniform draw on [sqrt(alpha_bar_t), sqrt(alpha_bar_{t-1})].
ContinuousLevel sample_continuous_level(const NoiseSchedule& s, int t, Rng& rng);

// Deterministic sqrt(alpha_bar_t), used at inference.
ContinuousLevel inference_level(const NoiseSchedule& s, int t);

}  // namespace d4pm
