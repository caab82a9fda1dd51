#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "d4pm/metrics.hpp"
#include "d4pm/rng.hpp"

namespace d4pm::testing {

Vec dft_periodogram(const Vec& x) {
  const int n = static_cast<int>(x.size());
  Vec out(n / 2 + 1);
  const double two_pi = 6.283185307179586476925286766559;
  for (int k = 0; k <= n / 2; ++k) {
    double re = 0.0, im = 0.0;
    for (int i = 0; i < n; ++i) {
      const double a = two_pi * k * i / n;
      re += x[i] * std::cos(a);
      im -= x[i] * std::sin(a);
    }
    out[k] = (re * re + im * im) / n;
  }
  return out;
}

double permutation_p_value(const Vec& a, const Vec& b, int shuffles, std::uint64_t seed) {
  const double observed = std::abs(cc(a, b));
  Rng rng(seed);
  Vec shuffled = b;
  int at_least = 0;
  for (int s = 0; s < shuffles; ++s) {
    for (int i = static_cast<int>(shuffled.size()) - 1; i > 0; --i) {
      std::swap(shuffled[i], shuffled[rng.uniform_int(0, i)]);
    }
    if (std::abs(cc(a, shuffled)) >= observed) ++at_least;
  }
  return static_cast<double>(at_least) / shuffles;
}

double batch_loss(const DenoiserParams& params, const std::vector<BatchItem>& batch) {
  double total = 0.0;
  long count = 0;
  for (const auto& item : batch) {
    const Vec eps_hat = forward(params, item.x_t, item.y, item.level, item.z);
    for (std::size_t j = 0; j < eps_hat.size(); ++j) {
      total += std::abs(item.eps_target[j] - eps_hat[j]);
    }
    count += static_cast<long>(eps_hat.size());
  }
  return total / static_cast<double>(count);
}

double fd_loss_grad(const DenoiserParams& params, const std::vector<BatchItem>& batch,
                    std::size_t flat_index, double h) {
  DenoiserParams p = params;
  const double v0 = p.get_flat(flat_index);
  p.set_flat(flat_index, v0 + h);
  const double up = batch_loss(p, batch);
  p.set_flat(flat_index, v0 - h);
  const double dn = batch_loss(p, batch);
  return (up - dn) / (2.0 * h);
}

MeanSe mean_se(const std::vector<double>& samples) {
  MeanSe out;
  const double n = static_cast<double>(samples.size());
  for (double s : samples) out.mean += s;
  out.mean /= n;
  double var = 0.0;
  for (double s : samples) var += (s - out.mean) * (s - out.mean);
  var /= (n - 1.0);
  out.se = std::sqrt(var / n);
  return out;
}

double autocorrelation(const Vec& x, int lag) {
  const int n = static_cast<int>(x.size());
  const double m = mean(x);
  double num = 0.0, den = 0.0;
  for (int i = 0; i < n; ++i) den += (x[i] - m) * (x[i] - m);
  for (int i = 0; i + lag < n; ++i) num += (x[i] - m) * (x[i + lag] - m);
  return num / den;
}

ScalarPosterior grid_bayes_posterior(double mx, double sx, double mp, double sp, double lambda,
                                     double y, int points) {
  // y = x + lambda x' exactly, so the likelihood over x is the prior density
  // of x' evaluated at (y - x)/lambda.
  const double lo = mx - 12.0 * sx;
  const double hi = mx + 12.0 * sx;
  const double dx = (hi - lo) / (points - 1);
  double w_sum = 0.0, m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < points; ++i) {
    const double x = lo + i * dx;
    const double xp = (y - x) / lambda;
    const double lp = -0.5 * ((x - mx) / sx) * ((x - mx) / sx) -
                      0.5 * ((xp - mp) / sp) * ((xp - mp) / sp);
    const double w = std::exp(lp);
    w_sum += w;
    m1 += w * x;
    m2 += w * x * x;
  }
  ScalarPosterior post;
  post.mean = m1 / w_sum;
  post.var = m2 / w_sum - post.mean * post.mean;
  return post;
}

Vec bridge_mean_recursion(const GaussianPrior& prior, const NoiseSchedule& s) {
  const std::size_t n = prior.mean.size();
  Vec u(n, 0.0);
  for (int t = s.T; t >= 1; --t) {
    const double ab = s.alpha_bar_at(t);
    const double abp = s.alpha_bar_at(t - 1);
    const double s2 = prior.std * prior.std;
    const double g = std::sqrt(ab) * s2 / (ab * s2 + 1.0 - ab);
    const double c = (1.0 - ab) / (ab * s2 + 1.0 - ab);
    const double a_coef = s.beta_at(t) * std::sqrt(abp) / (1.0 - ab);
    const double b_coef = (1.0 - abp) * std::sqrt(s.alpha_at(t)) / (1.0 - ab);
    for (std::size_t i = 0; i < n; ++i) {
      const double x0 = g * u[i] + c * prior.mean[i];
      u[i] = t == 1 ? x0 : a_coef * x0 + b_coef * u[i];
    }
  }
  return u;
}

}  // namespace d4pm::testing
