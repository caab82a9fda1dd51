#pragma once

#include <cstdint>
#include <vector>

#include "d4pm/common.hpp"
#include "d4pm/denoiser.hpp"
#include "d4pm/rng.hpp"
#include "d4pm/schedule.hpp"
#include "d4pm/signals.hpp"

namespace d4pm {

// x0-prediction formula. kStandardInversion is the DDPM inversion
// (x_t - sqrt(1-alpha_bar)*eps)/sqrt(alpha_bar), used for both branches.
// kAsPrinted is the (x_t - beta_t/sqrt(1-alpha_bar_t)*eps)/sqrt(alpha_t)
// variant, kept behind this switch for comparison runs.
enum class X0Formula { kStandardInversion, kAsPrinted };

struct SamplerConfig {
  double lambda_dc = 0.5;   // in [0, 1]
  double lambda_snr = 1.0;  // measurement-model scale at inference
  bool share_eta = true;    // one eta draw feeds both branches
  bool stochastic_level = false;
  X0Formula x0_formula = X0Formula::kStandardInversion;
  std::uint64_t seed = 0;
};

void validate(const SamplerConfig& cfg);

// eps predictor interface so trained networks and analytic oracles plug into
// the same sampling loop.
class EpsPredictor {
 public:
  virtual ~EpsPredictor() = default;
  virtual Vec predict(const Vec& x_t, const Vec& y, const ContinuousLevel& level,
                      SignalClass z) const = 0;
};

class DenoiserEpsPredictor final : public EpsPredictor {
 public:
  explicit DenoiserEpsPredictor(const DenoiserParams& params) : params_(&params) {}
  Vec predict(const Vec& x_t, const Vec& y, const ContinuousLevel& level,
              SignalClass z) const override;

 private:
  const DenoiserParams* params_;
};

Vec predict_x0(const NoiseSchedule& s, int t, const Vec& x_t, const Vec& eps_hat,
               X0Formula formula = X0Formula::kStandardInversion);

struct Corrected {
  Vec x0;   // x0 + lambda_dc * r
  Vec x0p;  // x0' + (1 - lambda_dc) * r
  Vec r;    // y - (x0 + lambda_snr * x0')
};

Corrected consistency_step(const Vec& x0, const Vec& x0p, const Vec& y,
                           const SamplerConfig& cfg);

// mu = beta_t*sqrt(abar_{t-1})/(1-abar_t) * x0_hat
//    + (1-abar_{t-1})*sqrt(alpha_t)/(1-abar_t) * x_t
Vec posterior_mean(const NoiseSchedule& s, int t, const Vec& x0_hat, const Vec& x_t);

// sqrt(beta_t * (1 - abar_{t-1}) / (1 - abar_t)); zero at t=1.
double sigma_t(const NoiseSchedule& s, int t);

struct StepDiag {
  int t = 0;
  double residual_pre = 0.0;   // |y - (x0 + lambda*x0')| before correction
  double residual_post = 0.0;  // same norm after correction
};

struct JointSampleResult {
  Vec x0;   // clean estimate (final corrected x0_hat)
  Vec x0p;  // artifact estimate
};

// Algorithm: init x_T, x_T' as independent standard normal draws; for
// t = T..1 run both predictors, invert to x0, apply the consistency
// correction, take the posterior mean of both branches and add sigma_t*eta
// (eta shared across branches when cfg.share_eta; eta = 0 at t = 1).
// Per-step RNG order: optional stochastic level, then eta (second eta if not
// shared). Aborts with the step index on non-finite state.
JointSampleResult joint_sample(const EpsPredictor& eps_eeg, const EpsPredictor& eps_artifact,
                               const Vec& y, SignalClass z, const NoiseSchedule& s,
                               const SamplerConfig& cfg, Rng& rng,
                               std::vector<StepDiag>* diag = nullptr);

JointSampleResult joint_sample(const DenoiserParams& eps_eeg, const DenoiserParams& eps_artifact,
                               const Vec& y, SignalClass z, const NoiseSchedule& s,
                               const SamplerConfig& cfg, Rng& rng,
                               std::vector<StepDiag>* diag = nullptr);

// Plain conditional reverse process on the EEG branch only (no consistency
// correction); the ablation baseline.
Vec single_branch_sample(const EpsPredictor& eps_eeg, const Vec& y, SignalClass z,
                         const NoiseSchedule& s, const SamplerConfig& cfg, Rng& rng);

}  // namespace d4pm
