#pragma once

#include "d4pm/common.hpp"
#include "d4pm/sampler.hpp"
#include "d4pm/schedule.hpp"

namespace d4pm {

// Isotropic Gaussian prior over a length-N signal.
struct GaussianPrior {
  Vec mean;
  double std = 1.0;
};

void validate(const GaussianPrior& prior);

// E[x0 | x_t] under the prior and the forward marginal at alpha_bar.
Vec posterior_x0_mean(const GaussianPrior& prior, double alpha_bar, const Vec& x_t);

// Minimum-MSE eps predictor: (x_t - sqrt(abar) * E[x0|x_t]) / sqrt(1-abar).
Vec optimal_eps(const GaussianPrior& prior, double alpha_bar, const Vec& x_t);

struct JointGaussianPosterior {
  Vec mean_x;
  double var_x = 0.0;
  Vec mean_xp;
  double var_xp = 0.0;
};

// Exact posterior for the noiseless linear mixture y = x + lambda * x' with
// independent isotropic Gaussian priors on x and x'. The posterior mass lies
// on the measurement hyperplane: mean_x + lambda * mean_xp == y.
JointGaussianPosterior joint_gaussian_posterior(const GaussianPrior& px,
                                                const GaussianPrior& pxp,
                                                double lambda_snr, const Vec& y);

// Plugs the analytic eps predictor into the sampling loop. Uses the exact
// alpha_bar for the step carried by the level.
class GaussianEpsPredictor final : public EpsPredictor {
 public:
  GaussianEpsPredictor(GaussianPrior prior, const NoiseSchedule& s)
      : prior_(std::move(prior)), schedule_(&s) {
    validate(prior_);
  }

  Vec predict(const Vec& x_t, const Vec& y, const ContinuousLevel& level,
              SignalClass z) const override;

 private:
  GaussianPrior prior_;
  const NoiseSchedule* schedule_;
};

}  // namespace d4pm
