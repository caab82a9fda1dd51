#include "d4pm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>

#include <fftw3.h>

#include <boost/math/distributions/students_t.hpp>

#include <json.hpp>

namespace d4pm {

using nlohmann::json;

namespace {

void check_pair(const Vec& x_hat, const Vec& x, std::size_t min_len = 1) {
  if (x_hat.size() != x.size()) throw ConfigError("metrics: length mismatch");
  if (x.size() < min_len) {
    throw ConfigError("metrics: need at least " + std::to_string(min_len) + " samples");
  }
  if (!all_finite(x_hat) || !all_finite(x)) throw ConfigError("metrics: non-finite input");
}

double cap_snr(double v) { return std::clamp(v, -kSnrCapDb, kSnrCapDb); }

}  // namespace

double rrmse_t(const Vec& x_hat, const Vec& x) {
  check_pair(x_hat, x);
  const double ref = l2_norm(x);
  if (ref <= 0.0) throw ConfigError("rrmse_t: zero-energy reference");
  double diff = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    diff += (x_hat[i] - x[i]) * (x_hat[i] - x[i]);
  }
  return std::sqrt(diff) / ref;
}

Vec periodogram(const Vec& x) {
  const int n = static_cast<int>(x.size());
  Vec out(n / 2 + 1);
  std::vector<double> in(x.begin(), x.end());
  std::vector<fftw_complex> spec(n / 2 + 1);
  {
    // FFTW planning is not thread-safe; execution under the same lock is
    // cheap at these sizes.
    static std::mutex fftw_mutex;
    std::scoped_lock lock(fftw_mutex);
    fftw_plan plan = fftw_plan_dft_r2c_1d(n, in.data(), spec.data(), FFTW_ESTIMATE);
    fftw_execute(plan);
    fftw_destroy_plan(plan);
  }
  for (int k = 0; k <= n / 2; ++k) {
    out[k] = (spec[k][0] * spec[k][0] + spec[k][1] * spec[k][1]) / n;
  }
  return out;
}

double rrmse_s(const Vec& x_hat, const Vec& x) {
  check_pair(x_hat, x);
  const Vec p_hat = periodogram(x_hat);
  const Vec p = periodogram(x);
  const double ref = l2_norm(p);
  if (ref <= 0.0) throw ConfigError("rrmse_s: zero-energy reference");
  double diff = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) diff += (p_hat[k] - p[k]) * (p_hat[k] - p[k]);
  return std::sqrt(diff) / ref;
}

double cc(const Vec& x_hat, const Vec& x) {
  check_pair(x_hat, x, 3);
  const double ma = mean(x_hat);
  const double mb = mean(x);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = x_hat[i] - ma;
    const double b = x[i] - mb;
    sab += a * b;
    saa += a * a;
    sbb += b * b;
  }
  if (saa <= 0.0 || sbb <= 0.0) throw ConfigError("cc: constant input");
  return sab / std::sqrt(saa * sbb);
}

double cc_p_value(const Vec& x_hat, const Vec& x) {
  const double r = cc(x_hat, x);
  const double n = static_cast<double>(x.size());
  const double one_minus_r2 = 1.0 - r * r;
  if (one_minus_r2 <= 0.0) return 0.0;
  const double t = std::abs(r) * std::sqrt((n - 2.0) / one_minus_r2);
  const boost::math::students_t dist(n - 2.0);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, t));
}

double snr_out(const Vec& x_hat, const Vec& x) {
  check_pair(x_hat, x);
  double diff = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    diff += (x_hat[i] - x[i]) * (x_hat[i] - x[i]);
  }
  if (diff == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(sum_squares(x) / diff);
}

namespace {

struct FieldDef {
  const char* name;
  double SegmentMetrics::* member;
  bool is_snr;
};

constexpr FieldDef kFields[] = {
    {"rrmse_t", &SegmentMetrics::rrmse_t, false},
    {"rrmse_s", &SegmentMetrics::rrmse_s, false},
    {"cc", &SegmentMetrics::cc, false},
    {"cc_p_value", &SegmentMetrics::cc_p_value, false},
    {"snr_out_db", &SegmentMetrics::snr_out_db, true},
    {"input_snr_db", &SegmentMetrics::input_snr_db, true},
    {"cc_noisy", &SegmentMetrics::cc_noisy, false},
};

AggregateMap aggregate(const std::vector<const SegmentMetrics*>& rows) {
  AggregateMap out;
  for (const auto& f : kFields) {
    Aggregate a;
    a.count = static_cast<int>(rows.size());
    double s = 0.0;
    for (const auto* r : rows) {
      const double v = r->*(f.member);
      s += f.is_snr ? cap_snr(v) : v;
    }
    a.mean = rows.empty() ? 0.0 : s / rows.size();
    if (rows.size() >= 2) {
      double ss = 0.0;
      for (const auto* r : rows) {
        const double v = f.is_snr ? cap_snr(r->*(f.member)) : r->*(f.member);
        ss += (v - a.mean) * (v - a.mean);
      }
      a.stddev = std::sqrt(ss / (rows.size() - 1));
    }
    out[f.name] = a;
  }
  return out;
}

}  // namespace

MetricsReport build_report(std::vector<SegmentMetrics> rows) {
  MetricsReport report;
  report.rows = std::move(rows);
  std::map<SignalClass, std::vector<const SegmentMetrics*>> by_class;
  std::vector<const SegmentMetrics*> all;
  for (const auto& r : report.rows) {
    by_class[r.cls].push_back(&r);
    all.push_back(&r);
  }
  for (const auto& [cls, ptrs] : by_class) report.per_class[cls] = aggregate(ptrs);
  report.overall = aggregate(all);
  return report;
}

void write_report_csv(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream os(path);
  if (!os) throw IoError("write_report_csv: cannot open '" + path.string() + "'");
  os << "segment_index,class,rrmse_t,rrmse_s,cc,cc_p_value,snr_out_db,input_snr_db,cc_noisy\n";
  os.precision(12);
  for (const auto& r : report.rows) {
    os << r.index << ',' << to_string(r.cls) << ',' << r.rrmse_t << ',' << r.rrmse_s << ','
       << r.cc << ',' << r.cc_p_value << ',' << cap_snr(r.snr_out_db) << ','
       << cap_snr(r.input_snr_db) << ',' << r.cc_noisy << '\n';
  }
  if (!os) throw IoError("write_report_csv: failed writing '" + path.string() + "'");
}

namespace {

json aggregate_to_json(const AggregateMap& m) {
  json out;
  for (const auto& [name, a] : m) {
    out[name] = {{"mean", a.mean}, {"stddev", a.stddev}, {"count", a.count}};
  }
  return out;
}

}  // namespace

void write_report_json(const std::filesystem::path& path, const MetricsReport& report) {
  json out;
  out["n_segments"] = report.rows.size();
  out["overall"] = aggregate_to_json(report.overall);
  json per_class;
  for (const auto& [cls, m] : report.per_class) per_class[to_string(cls)] = aggregate_to_json(m);
  out["per_class"] = std::move(per_class);
  std::ofstream os(path);
  if (!os) throw IoError("write_report_json: cannot open '" + path.string() + "'");
  os << out.dump(2) << "\n";
  if (!os) throw IoError("write_report_json: failed writing '" + path.string() + "'");
}

}  // namespace d4pm
