#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "d4pm/common.hpp"
#include "d4pm/signals.hpp"

namespace d4pm {

// |x_hat - x|_2 / |x|_2
double rrmse_t(const Vec& x_hat, const Vec& x);

// Same ratio on one-sided periodogram magnitudes |FFT|^2 / N.
double rrmse_s(const Vec& x_hat, const Vec& x);

// One-sided periodogram, bins 0..N/2.
Vec periodogram(const Vec& x);

// Pearson correlation coefficient; requires length >= 3 and nonzero variance.
double cc(const Vec& x_hat, const Vec& x);

// Two-sided p-value from t = r*sqrt((n-2)/(1-r^2)) with n-2 dof.
double cc_p_value(const Vec& x_hat, const Vec& x);

// 10*log10(|x|^2 / |x_hat - x|^2) dB; +infinity when x_hat == x exactly.
double snr_out(const Vec& x_hat, const Vec& x);

// Value used when serializing non-finite SNRs.
constexpr double kSnrCapDb = 120.0;

struct SegmentMetrics {
  int index = 0;
  SignalClass cls = SignalClass::kEog;
  double rrmse_t = 0.0;
  double rrmse_s = 0.0;
  double cc = 0.0;
  double cc_p_value = 0.0;
  double snr_out_db = 0.0;
  double input_snr_db = 0.0;
  double cc_noisy = 0.0;  // cc(mixture, clean), the do-nothing baseline
};

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;  // sample std, 0 for n < 2
  int count = 0;
};

// metric name -> aggregate; metric names are the SegmentMetrics field names.
using AggregateMap = std::map<std::string, Aggregate>;

struct MetricsReport {
  std::vector<SegmentMetrics> rows;
  std::map<SignalClass, AggregateMap> per_class;
  AggregateMap overall;
};

// Aggregates cap SNR values at +/- kSnrCapDb so exact reconstructions do not
// poison the means.
MetricsReport build_report(std::vector<SegmentMetrics> rows);

// CSV columns, in order: segment_index, class, rrmse_t, rrmse_s, cc,
// cc_p_value, snr_out_db, input_snr_db, cc_noisy.
void write_report_csv(const std::filesystem::path& path, const MetricsReport& report);
void write_report_json(const std::filesystem::path& path, const MetricsReport& report);

}  // namespace d4pm
