#pragma once

#include <cstdint>
#include <vector>

#include "d4pm/common.hpp"
#include "d4pm/denoiser.hpp"
#include "d4pm/oracle.hpp"
#include "d4pm/schedule.hpp"

// Test-side oracles, kept independent of the implementation paths they check.
namespace d4pm::testing {

// One-sided periodogram |X_k|^2 / N by direct summation.
Vec dft_periodogram(const Vec& x);

// Two-sided permutation p-value for the Pearson correlation.
double permutation_p_value(const Vec& a, const Vec& b, int shuffles, std::uint64_t seed);

// Batch L1 loss evaluated through forward() only.
double batch_loss(const DenoiserParams& params, const std::vector<BatchItem>& batch);

// Central finite difference of batch_loss wrt one flat parameter index.
double fd_loss_grad(const DenoiserParams& params, const std::vector<BatchItem>& batch,
                    std::size_t flat_index, double h);

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};
MeanSe mean_se(const std::vector<double>& samples);

// Normalized autocorrelation at the given lag (lag-0 normalized to 1).
double autocorrelation(const Vec& x, int lag);

// Posterior mean/variance of x for y = x + lambda x' with Gaussian priors,
// by Riemann quadrature over x.
struct ScalarPosterior {
  double mean = 0.0;
  double var = 0.0;
};
ScalarPosterior grid_bayes_posterior(double mx, double sx, double mp, double sp, double lambda,
                                     double y, int points = 40001);

// Closed-form mean recursion of the single-branch sampling chain driven by
// the analytic eps predictor, from x_T with mean zero.
Vec bridge_mean_recursion(const GaussianPrior& prior, const NoiseSchedule& s);

}  // namespace d4pm::testing
