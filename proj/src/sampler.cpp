#include "d4pm/sampler.hpp"

#include <cmath>
#include <string>

namespace d4pm {

void validate(const SamplerConfig& cfg) {
  if (!(cfg.lambda_dc >= 0.0 && cfg.lambda_dc <= 1.0)) {
    throw ConfigError("sampler: lambda_dc must lie in [0, 1]");
  }
  if (!(cfg.lambda_snr > 0.0) || !std::isfinite(cfg.lambda_snr)) {
    throw ConfigError("sampler: lambda_snr must be positive and finite");
  }
}

Vec DenoiserEpsPredictor::predict(const Vec& x_t, const Vec& y, const ContinuousLevel& level,
                                  SignalClass z) const {
  return forward(*params_, x_t, y, level, z);
}

Vec predict_x0(const NoiseSchedule& s, int t, const Vec& x_t, const Vec& eps_hat,
               X0Formula formula) {
  if (x_t.size() != eps_hat.size()) throw ConfigError("predict_x0: length mismatch");
  const double abar = s.alpha_bar_at(t);
  Vec x0(x_t.size());
  if (formula == X0Formula::kStandardInversion) {
    const double noise = std::sqrt(1.0 - abar);
    const double inv = 1.0 / std::sqrt(abar);
    for (std::size_t i = 0; i < x_t.size(); ++i) x0[i] = (x_t[i] - noise * eps_hat[i]) * inv;
  } else {
    const double coef = s.beta_at(t) / std::sqrt(1.0 - abar);
    const double inv = 1.0 / std::sqrt(s.alpha_at(t));
    for (std::size_t i = 0; i < x_t.size(); ++i) x0[i] = (x_t[i] - coef * eps_hat[i]) * inv;
  }
  return x0;
}

Corrected consistency_step(const Vec& x0, const Vec& x0p, const Vec& y,
                           const SamplerConfig& cfg) {
  validate(cfg);
  if (x0.size() != x0p.size() || x0.size() != y.size()) {
    throw ConfigError("consistency_step: length mismatch");
  }
  Corrected out;
  out.r.resize(y.size());
  out.x0.resize(y.size());
  out.x0p.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    out.r[i] = y[i] - (x0[i] + cfg.lambda_snr * x0p[i]);
    out.x0[i] = x0[i] + cfg.lambda_dc * out.r[i];
    out.x0p[i] = x0p[i] + (1.0 - cfg.lambda_dc) * out.r[i];
  }
  return out;
}

Vec posterior_mean(const NoiseSchedule& s, int t, const Vec& x0_hat, const Vec& x_t) {
  if (x0_hat.size() != x_t.size()) throw ConfigError("posterior_mean: length mismatch");
  const double abar = s.alpha_bar_at(t);
  const double abar_prev = s.alpha_bar_at(t - 1);
  const double c0 = s.beta_at(t) * std::sqrt(abar_prev) / (1.0 - abar);
  const double ct = (1.0 - abar_prev) * std::sqrt(s.alpha_at(t)) / (1.0 - abar);
  Vec mu(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) mu[i] = c0 * x0_hat[i] + ct * x_t[i];
  return mu;
}

double sigma_t(const NoiseSchedule& s, int t) {
  const double abar = s.alpha_bar_at(t);
  const double abar_prev = s.alpha_bar_at(t - 1);
  return std::sqrt(s.beta_at(t) * (1.0 - abar_prev) / (1.0 - abar));
}

namespace {

void check_state(const Vec& v, int t, const char* what) {
  if (!all_finite(v)) {
    throw CheckFailure(std::string("sampler: non-finite ") + what + " at step t=" +
                       std::to_string(t));
  }
}

ContinuousLevel step_level(const NoiseSchedule& s, int t, const SamplerConfig& cfg, Rng& rng) {
  return cfg.stochastic_level ? sample_continuous_level(s, t, rng) : inference_level(s, t);
}

}  // namespace

JointSampleResult joint_sample(const EpsPredictor& eps_eeg, const EpsPredictor& eps_artifact,
                               const Vec& y, SignalClass z, const NoiseSchedule& s,
                               const SamplerConfig& cfg, Rng& rng,
                               std::vector<StepDiag>* diag) {
  validate(cfg);
  if (!all_finite(y)) throw ConfigError("joint_sample: non-finite observation");
  const std::size_t n = y.size();

  Vec x(n), xp(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = rng.normal();
  for (std::size_t i = 0; i < n; ++i) xp[i] = rng.normal();

  for (int t = s.T; t >= 1; --t) {
    const ContinuousLevel level = step_level(s, t, cfg, rng);
    const Vec eps1 = eps_eeg.predict(x, y, level, z);
    const Vec eps2 = eps_artifact.predict(xp, y, level, z);
    check_state(eps1, t, "EEG eps prediction");
    check_state(eps2, t, "artifact eps prediction");

    const Vec x0 = predict_x0(s, t, x, eps1, cfg.x0_formula);
    const Vec x0p = predict_x0(s, t, xp, eps2, cfg.x0_formula);
    Corrected corr = consistency_step(x0, x0p, y, cfg);
    check_state(corr.x0, t, "corrected x0");
    check_state(corr.x0p, t, "corrected x0'");
    if (diag) {
      double pre = 0.0, post = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        pre += corr.r[i] * corr.r[i];
        const double q = y[i] - (corr.x0[i] + cfg.lambda_snr * corr.x0p[i]);
        post += q * q;
      }
      diag->push_back(StepDiag{t, std::sqrt(pre), std::sqrt(post)});
    }
    if (t == 1) return JointSampleResult{std::move(corr.x0), std::move(corr.x0p)};

    const Vec mu = posterior_mean(s, t, corr.x0, x);
    const Vec mup = posterior_mean(s, t, corr.x0p, xp);
    const double sig = sigma_t(s, t);
    Vec eta(n), etap(n);
    for (std::size_t i = 0; i < n; ++i) eta[i] = rng.normal();
    if (cfg.share_eta) {
      etap = eta;
    } else {
      for (std::size_t i = 0; i < n; ++i) etap[i] = rng.normal();
    }
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = mu[i] + sig * eta[i];
      xp[i] = mup[i] + sig * etap[i];
    }
    check_state(x, t - 1, "x state");
    check_state(xp, t - 1, "x' state");
  }
  throw ConfigError("joint_sample: schedule has no steps");
}

JointSampleResult joint_sample(const DenoiserParams& eps_eeg, const DenoiserParams& eps_artifact,
                               const Vec& y, SignalClass z, const NoiseSchedule& s,
                               const SamplerConfig& cfg, Rng& rng,
                               std::vector<StepDiag>* diag) {
  const DenoiserEpsPredictor a(eps_eeg);
  const DenoiserEpsPredictor b(eps_artifact);
  return joint_sample(a, b, y, z, s, cfg, rng, diag);
}

Vec single_branch_sample(const EpsPredictor& eps_eeg, const Vec& y, SignalClass z,
                         const NoiseSchedule& s, const SamplerConfig& cfg, Rng& rng) {
  validate(cfg);
  if (!all_finite(y)) throw ConfigError("single_branch_sample: non-finite observation");
  const std::size_t n = y.size();
  Vec x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = rng.normal();

  for (int t = s.T; t >= 1; --t) {
    const ContinuousLevel level = step_level(s, t, cfg, rng);
    const Vec eps = eps_eeg.predict(x, y, level, z);
    check_state(eps, t, "eps prediction");
    const Vec x0 = predict_x0(s, t, x, eps, cfg.x0_formula);
    check_state(x0, t, "x0 prediction");
    if (t == 1) return x0;
    const Vec mu = posterior_mean(s, t, x0, x);
    const double sig = sigma_t(s, t);
    for (std::size_t i = 0; i < n; ++i) x[i] = mu[i] + sig * rng.normal();
    check_state(x, t - 1, "x state");
  }
  throw ConfigError("single_branch_sample: schedule has no steps");
}

}  // namespace d4pm
