#include "d4pm/oracle.hpp"

#include <cmath>
#include <string>

namespace d4pm {

void validate(const GaussianPrior& prior) {
  if (!(prior.std > 0.0) || !std::isfinite(prior.std)) {
    throw ConfigError("GaussianPrior: std must be positive and finite");
  }
  if (prior.mean.empty() || !all_finite(prior.mean)) {
    throw ConfigError("GaussianPrior: mean must be nonempty and finite");
  }
}

namespace {

void check_alpha_bar(double alpha_bar) {
  if (!(alpha_bar > 0.0) || !(alpha_bar < 1.0)) {
    throw ConfigError("oracle: alpha_bar must lie in (0,1), got " + std::to_string(alpha_bar));
  }
}

}  // namespace

Vec posterior_x0_mean(const GaussianPrior& prior, double alpha_bar, const Vec& x_t) {
  validate(prior);
  check_alpha_bar(alpha_bar);
  if (x_t.size() != prior.mean.size()) throw ConfigError("oracle: length mismatch");
  const double s2 = prior.std * prior.std;
  const double denom = alpha_bar * s2 + (1.0 - alpha_bar);
  const double root = std::sqrt(alpha_bar);
  Vec out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    out[i] = (root * s2 * x_t[i] + (1.0 - alpha_bar) * prior.mean[i]) / denom;
  }
  return out;
}

Vec optimal_eps(const GaussianPrior& prior, double alpha_bar, const Vec& x_t) {
  const Vec x0 = posterior_x0_mean(prior, alpha_bar, x_t);
  const double root = std::sqrt(alpha_bar);
  const double noise = std::sqrt(1.0 - alpha_bar);
  Vec eps(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) eps[i] = (x_t[i] - root * x0[i]) / noise;
  return eps;
}

JointGaussianPosterior joint_gaussian_posterior(const GaussianPrior& px,
                                                const GaussianPrior& pxp,
                                                double lambda_snr, const Vec& y) {
  validate(px);
  validate(pxp);
  if (!(lambda_snr > 0.0)) throw ConfigError("joint_gaussian_posterior: lambda must be positive");
  if (px.mean.size() != y.size() || pxp.mean.size() != y.size()) {
    throw ConfigError("joint_gaussian_posterior: length mismatch");
  }
  const double sx2 = px.std * px.std;
  const double sp2 = pxp.std * pxp.std;
  const double denom = sx2 + lambda_snr * lambda_snr * sp2;
  JointGaussianPosterior post;
  post.mean_x.resize(y.size());
  post.mean_xp.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double innovation = y[i] - px.mean[i] - lambda_snr * pxp.mean[i];
    post.mean_x[i] = px.mean[i] + (sx2 / denom) * innovation;
    post.mean_xp[i] = (y[i] - post.mean_x[i]) / lambda_snr;
  }
  post.var_x = sx2 * lambda_snr * lambda_snr * sp2 / denom;
  post.var_xp = post.var_x / (lambda_snr * lambda_snr);
  return post;
}

Vec GaussianEpsPredictor::predict(const Vec& x_t, const Vec& /*y*/,
                                  const ContinuousLevel& level, SignalClass /*z*/) const {
  return optimal_eps(prior_, schedule_->alpha_bar_at(level.step), x_t);
}

}  // namespace d4pm
