// Acceptance suite: runs every gate criterion at its stated tolerance and
// prints one pass/fail line per criterion. Exits nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "d4pm/cli.hpp"
#include "d4pm/metrics.hpp"
#include "d4pm/oracle.hpp"
#include "d4pm/sampler.hpp"
#include "d4pm/schedule.hpp"
#include "d4pm/trainer.hpp"
#include "oracles.hpp"

using namespace d4pm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  bool pass = false;
  std::string detail;
};

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) return "<missing:" + p.string() + ">";
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------

Result criterion_1_schedule(double budget_s) {
  const double t0 = now_seconds();
  Rng rng(1001);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int T = rng.uniform_int(1, 300);
    double b0 = rng.uniform(1e-6, 0.5);
    double b1 = rng.uniform(1e-6, 0.999);
    if (b0 > b1) std::swap(b0, b1);
    const NoiseSchedule s = make_schedule(T, b0, b1);
    for (int t = 1; t <= T; ++t) {
      const double ratio = s.alpha_bar_at(t) / s.alpha_bar_at(t - 1);
      worst = std::max(worst, std::abs(ratio - s.alpha_at(t)) / s.alpha_at(t));
      if (!(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1))) {
        return {false, "monotonicity violated"};
      }
    }
  }
  const double elapsed = now_seconds() - t0;
  const bool pass = worst <= 1e-12 && elapsed < budget_s;
  return {pass, "100 configs, max relative recurrence error " + fmt(worst) + ", " +
                    fmt(elapsed) + " s (budget " + fmt(budget_s) + " s)"};
}

Result criterion_2_gradients(double budget_s) {
  const double t0 = now_seconds();
  DenoiserConfig cfg;
  cfg.n = 16;
  cfg.channels = 8;
  cfg.encoder_blocks = 1;
  cfg.heads = 4;
  cfg.film_embed_dim = 8;
  const DenoiserParams p = init_params(cfg, 24601);

  Rng rng(1313);
  std::vector<BatchItem> batch(2);
  const SignalClass classes[] = {SignalClass::kEog, SignalClass::kEmg};
  for (int i = 0; i < 2; ++i) {
    batch[i].x_t.resize(cfg.n);
    batch[i].y.resize(cfg.n);
    batch[i].eps_target.resize(cfg.n);
    for (double& v : batch[i].x_t) v = rng.normal();
    for (double& v : batch[i].y) v = rng.normal();
    for (double& v : batch[i].eps_target) v = rng.normal();
    batch[i].level = ContinuousLevel{rng.uniform(0.6, 0.95), 1};
    batch[i].z = classes[i];
  }
  const LossGrad lg = loss_and_grad(p, batch);

  const std::size_t total = p.flat_size();
  std::set<std::size_t> picked;
  while (picked.size() < 220) {
    picked.insert(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(total) - 1)));
  }
  int checked = 0;
  double worst_rel = 0.0;
  for (std::size_t idx : picked) {
    const double analytic = lg.grads.get_flat(idx);
    const double fd = testing::fd_loss_grad(p, batch, idx, 1e-4);
    const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-6});
    const double rel = std::abs(analytic - fd) / denom;
    worst_rel = std::max(worst_rel, rel);
    if (rel > 1e-3) {
      return {false, "flat index " + std::to_string(idx) + ": analytic " + fmt(analytic) +
                         " vs fd " + fmt(fd)};
    }
    ++checked;
  }
  const double elapsed = now_seconds() - t0;
  const bool pass = checked >= 200 && elapsed < budget_s;
  return {pass, std::to_string(checked) + " parameters, worst relative error " +
                    fmt(worst_rel) + ", " + fmt(elapsed) + " s (budget " + fmt(budget_s) + " s)"};
}

Result criterion_3_consistency(double budget_s) {
  const double t0 = now_seconds();
  Rng rng(33);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 32;
    SamplerConfig cfg;
    cfg.lambda_dc = rng.uniform(0.0, 1.0);
    cfg.lambda_snr = 1.0;
    Vec x0(n), x0p(n), y(n);
    for (int i = 0; i < n; ++i) {
      x0[i] = rng.normal();
      x0p[i] = rng.normal();
      y[i] = rng.normal();
    }
    const Corrected c = consistency_step(x0, x0p, y, cfg);
    double resid = 0.0;
    for (int i = 0; i < n; ++i) {
      const double q = y[i] - (c.x0[i] + c.x0p[i]);
      resid += q * q;
    }
    worst = std::max(worst, std::sqrt(resid) / l2_norm(y));
  }
  const double elapsed = now_seconds() - t0;
  const bool pass = worst <= 1e-6 && elapsed < budget_s;
  return {pass, "1000 draws, worst relative residual " + fmt(worst) + ", " + fmt(elapsed) +
                    " s (budget " + fmt(budget_s) + " s)"};
}

// Serializes the criterion-4 artifacts so the determinism criterion can
// compare reruns byte for byte.
Result criterion_4_oracle(double budget_s, const fs::path& artifact) {
  const double t0 = now_seconds();
  const int n = 16, runs = 1000;
  const NoiseSchedule s = make_schedule(50, 1e-4, 5e-2);
  const GaussianPrior px{Vec(n, 0.0), 1.0};
  const GaussianPrior pxp{Vec(n, 0.0), 1.0};
  const GaussianEpsPredictor pe(px, s);
  const GaussianEpsPredictor pa(pxp, s);
  SamplerConfig cfg;  // lambda_dc 0.5, lambda_snr 1: the calibrated configuration

  const Rng base(9e9);
  Rng ygen = base.derive(1);
  Vec y(n);
  for (double& v : y) v = std::sqrt(2.0) * ygen.normal();
  const JointGaussianPosterior post = joint_gaussian_posterior(px, pxp, cfg.lambda_snr, y);

  std::vector<std::vector<double>> samples(n);
  double worst_resid = 0.0;
  const double ynorm = l2_norm(y);
  std::ofstream art(artifact, std::ios::binary);
  art.precision(17);
  for (int r = 0; r < runs; ++r) {
    Rng rng = base.derive(100 + static_cast<std::uint64_t>(r));
    const JointSampleResult res = joint_sample(pe, pa, y, SignalClass::kEog, s, cfg, rng);
    double resid = 0.0;
    for (int i = 0; i < n; ++i) {
      samples[i].push_back(res.x0[i]);
      const double q = y[i] - (res.x0[i] + cfg.lambda_snr * res.x0p[i]);
      resid += q * q;
      art << res.x0[i] << (i + 1 == n ? '\n' : ' ');
    }
    worst_resid = std::max(worst_resid, std::sqrt(resid) / ynorm);
  }
  double worst_z = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto ms = testing::mean_se(samples[i]);
    worst_z = std::max(worst_z, std::abs(ms.mean - post.mean_x[i]) / ms.se);
    art << "mean " << i << ' ' << ms.mean << '\n';
  }
  double identity = 0.0;
  for (int i = 0; i < n; ++i) {
    identity = std::max(identity,
                        std::abs(post.mean_x[i] + cfg.lambda_snr * post.mean_xp[i] - y[i]));
  }
  const double elapsed = now_seconds() - t0;
  const bool pass = worst_z <= 3.0 && identity <= 1e-6 && worst_resid <= 1e-6 &&
                    elapsed < budget_s;
  return {pass, "1000 runs, worst |z| " + fmt(worst_z) + ", identity " + fmt(identity) +
                    ", per-run residual " + fmt(worst_resid) + ", " + fmt(elapsed) +
                    " s (budget " + fmt(budget_s) + " s)"};
}

Result criterion_5_mixing(double budget_s) {
  const double t0 = now_seconds();
  Rng rng(55);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    Segment x, xp;
    x.samples.resize(64);
    xp.samples.resize(64);
    for (double& v : x.samples) v = rng.normal();
    for (double& v : xp.samples) v = rng.normal();
    const double target = rng.uniform(-5.0, 5.0);
    const MixedExample ex = mix(x, xp, lambda_for_snr(x, xp, target));
    worst = std::max(worst, std::abs(ex.target_snr_db - target));
  }
  const double elapsed = now_seconds() - t0;
  const bool pass = worst <= 1e-9 && elapsed < budget_s;
  return {pass, "1000 targets in [-5, 5] dB, worst round-trip error " + fmt(worst) + " dB, " +
                    fmt(elapsed) + " s (budget " + fmt(budget_s) + " s)"};
}

Result criterion_6_metrics(double budget_s) {
  const double t0 = now_seconds();
  Rng rng(66);
  Vec x(64), e(64);
  for (double& v : x) v = rng.normal();
  for (double& v : e) v = rng.normal();

  if (rrmse_t(x, x) != 0.0) return {false, "rrmse_t(x,x) != 0"};
  if (std::abs(cc(x, x) - 1.0) > 1e-12) return {false, "cc(x,x) != 1"};
  Vec neg = x;
  for (double& v : neg) v = -v;
  if (std::abs(cc(neg, x) + 1.0) > 1e-12) return {false, "cc(-x,x) != -1"};

  Vec big(100, 1.0), shifted_ref(100, 1.1);
  if (std::abs(snr_out(shifted_ref, big) - 20.0) > 1e-9) return {false, "snr 20 dB case"};

  Vec rolled(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) rolled[i] = x[(i + 9) % x.size()];
  if (rrmse_s(rolled, x) > 1e-12) return {false, "rrmse_s shift invariance"};

  double worst_dft = 0.0;
  for (int n : {64, 50}) {
    for (int trial = 0; trial < 3; ++trial) {
      Vec a(n), b(n);
      for (double& v : a) v = rng.normal();
      for (double& v : b) v = rng.normal();
      const Vec pa = testing::dft_periodogram(a);
      const Vec pb = testing::dft_periodogram(b);
      double diff = 0.0, ref = 0.0;
      for (std::size_t k = 0; k < pa.size(); ++k) {
        diff += (pa[k] - pb[k]) * (pa[k] - pb[k]);
        ref += pb[k] * pb[k];
      }
      worst_dft = std::max(worst_dft,
                           std::abs(rrmse_s(a, b) - std::sqrt(diff) / std::sqrt(ref)));
    }
  }
  const double elapsed = now_seconds() - t0;
  const bool pass = worst_dft <= 1e-9 && elapsed < budget_s;
  return {pass, "identities hold, DFT-oracle disagreement " + fmt(worst_dft) + ", " +
                    fmt(elapsed) + " s (budget " + fmt(budget_s) + " s)"};
}

struct PipelineArtifacts {
  fs::path data, run, eval;
  json report;
  LossTrace eeg_trace, artifact_trace;
};

PipelineArtifacts run_desk_pipeline(const fs::path& root) {
  fs::remove_all(root);
  PipelineArtifacts a;
  a.data = root / "data";
  a.run = root / "run";
  a.eval = root / "eval";
  fs::create_directories(a.data);
  fs::create_directories(a.run);
  fs::create_directories(a.eval);

  SynthDataOptions synth;
  synth.out = a.data;
  synth.seed = 7;
  synth.n = 64;
  synth.count_per_class = 250;
  run_synth_data(synth);

  TrainOptions train;
  train.dataset = a.data;
  train.out = a.run;
  train.seed = 1;
  train.epochs = 30;
  train.batch_size = 32;
  train.learning_rate = 1e-3;
  train.steps = 50;
  train.channels = 16;
  train.encoder_blocks = 1;
  run_train(train);

  DenoiseOptions denoise;
  denoise.dataset = a.data;
  denoise.checkpoint_eeg = a.run / "eeg.ckpt";
  denoise.checkpoint_artifact = a.run / "artifact.ckpt";
  denoise.out = a.run;
  denoise.seed = 2;
  run_denoise(denoise);

  EvaluateOptions evaluate;
  evaluate.dataset = a.data;
  evaluate.denoised = a.run / "denoised.seg";
  evaluate.out = a.eval;
  run_evaluate(evaluate);

  a.report = json::parse(slurp(a.eval / "report.json"));
  a.eeg_trace = load_checkpoint(a.run / "eeg.ckpt").trace;
  a.artifact_trace = load_checkpoint(a.run / "artifact.ckpt").trace;
  return a;
}

Result criterion_7_end_to_end(double budget_s, const fs::path& root, PipelineArtifacts& out) {
  const double t0 = now_seconds();
  out = run_desk_pipeline(root);
  const double elapsed = now_seconds() - t0;

  std::ostringstream detail;
  bool pass = elapsed < budget_s;
  detail << "desk run " << fmt(elapsed) << " s (budget " << fmt(budget_s) << " s);";

  const auto check_group = [&](const std::string& name, const json& agg) {
    const double cc_den = agg.at("cc").at("mean").get<double>();
    const double cc_noisy = agg.at("cc_noisy").at("mean").get<double>();
    const double snr_den = agg.at("snr_out_db").at("mean").get<double>();
    const double snr_in = agg.at("input_snr_db").at("mean").get<double>();
    const bool ok = cc_den > cc_noisy && snr_den >= snr_in + 3.0;
    pass = pass && ok;
    detail << ' ' << name << ": cc " << fmt(cc_den) << (cc_den > cc_noisy ? ">" : "!>")
           << fmt(cc_noisy) << ", snr gain " << fmt(snr_den - snr_in) << " dB"
           << (ok ? ";" : " [FAIL];");
  };
  for (const char* cls : {"EOG", "EMG", "ECG"}) {
    check_group(cls, out.report.at("per_class").at(cls));
  }
  check_group("overall", out.report.at("overall"));

  for (const auto& [name, trace] : {std::pair<const char*, const LossTrace&>{"EEG", out.eeg_trace},
                                    {"ARTIFACT", out.artifact_trace}}) {
    const double drop = 1.0 - trace.train.back() / trace.train.front();
    const bool ok = drop >= 0.30;
    pass = pass && ok;
    detail << ' ' << name << " train-loss drop " << fmt(100.0 * drop) << '%'
           << (ok ? ";" : " [FAIL];");
  }
  detail << " (paper full-scale reference, not desk-reproducible: EOG CC 0.995, SNR 20.983)";
  return {pass, detail.str()};
}

Result criterion_8_ablation(const fs::path& data, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  AblateOptions opt;
  opt.dataset = data;
  opt.out = out_dir;
  opt.seed = 1;
  opt.epochs = 30;
  opt.batch_size = 32;
  opt.learning_rate = 1e-3;
  opt.steps = 50;
  opt.channels = 16;
  opt.encoder_blocks = 1;
  run_ablate(opt);

  std::ifstream is(out_dir / "ablation.csv");
  std::string line;
  std::getline(is, line);
  if (line != "artifact,metric,base,base_artifacts,full") {
    return {false, "unexpected header: " + line};
  }
  int rows = 0;
  double emg_cc_base = 0.0, emg_cc_full = 0.0;
  while (std::getline(is, line)) {
    ++rows;
    std::stringstream ss(line);
    std::string artifact, metric, base, base_art, full;
    std::getline(ss, artifact, ',');
    std::getline(ss, metric, ',');
    std::getline(ss, base, ',');
    std::getline(ss, base_art, ',');
    std::getline(ss, full, ',');
    if (base.empty() || base_art.empty() || full.empty()) {
      return {false, "empty cell in row: " + line};
    }
    if (artifact == "EMG" && metric == "cc") {
      emg_cc_base = std::stod(base);
      emg_cc_full = std::stod(full);
    }
  }
  const bool pass = rows == 16 && emg_cc_full >= emg_cc_base;
  return {pass, "16x3 table complete; EMG cc base " + fmt(emg_cc_base) + " -> full " +
                    fmt(emg_cc_full) +
                    (emg_cc_full >= emg_cc_base ? " (improved or equal)" : " [FAIL]")};
}

Result criterion_9_determinism(const fs::path& root, const PipelineArtifacts& first,
                               const fs::path& crit4_first) {
  // criterion 4 rerun
  const fs::path crit4_again = root / "crit4_rerun.txt";
  const Result c4 = criterion_4_oracle(120.0, crit4_again);
  if (!c4.pass) return {false, "criterion 4 rerun failed: " + c4.detail};
  if (slurp(crit4_first) != slurp(crit4_again)) {
    return {false, "criterion 4 artifacts differ between reruns"};
  }

  // criterion 7 rerun into a second directory
  const PipelineArtifacts second = run_desk_pipeline(root / "pipeline2");
  const std::vector<std::pair<fs::path, fs::path>> pairs = {
      {first.data / "dataset.json", second.data / "dataset.json"},
      {first.data / "clean.seg", second.data / "clean.seg"},
      {first.data / "eog.seg", second.data / "eog.seg"},
      {first.data / "emg.seg", second.data / "emg.seg"},
      {first.data / "ecg.seg", second.data / "ecg.seg"},
      {first.run / "eeg.ckpt", second.run / "eeg.ckpt"},
      {first.run / "eeg.ckpt.json", second.run / "eeg.ckpt.json"},
      {first.run / "artifact.ckpt", second.run / "artifact.ckpt"},
      {first.run / "denoised.seg", second.run / "denoised.seg"},
      {first.run / "artifact_estimate.seg", second.run / "artifact_estimate.seg"},
      {first.run / "residuals.csv", second.run / "residuals.csv"},
      {first.eval / "report.csv", second.eval / "report.csv"},
      {first.eval / "report.json", second.eval / "report.json"},
  };
  for (const auto& [a, b] : pairs) {
    if (slurp(a) != slurp(b)) {
      return {false, "artifact differs between reruns: " + a.filename().string()};
    }
  }
  return {true, "criteria 4 and 7 reruns are byte-identical on " +
                    std::to_string(pairs.size() + 1) + " serialized artifacts"};
}

}  // namespace

int main() {
  const fs::path root = fs::temp_directory_path() / "d4pm_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);

  int failures = 0;
  const auto report = [&](int id, const std::string& name, const Result& r) {
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << "criterion " << id << ": " << name << " — "
              << r.detail << "\n";
    std::cout.flush();
    if (!r.pass) ++failures;
  };

  try {
    report(1, "schedule correctness", criterion_1_schedule(1.0));
    report(2, "gradient exactness", criterion_2_gradients(120.0));
    report(3, "consistency identity", criterion_3_consistency(1.0));
    const fs::path crit4_artifact = root / "crit4_run1.txt";
    report(4, "oracle posterior recovery", criterion_4_oracle(120.0, crit4_artifact));
    report(5, "mixing exactness", criterion_5_mixing(1.0));
    report(6, "metric identities", criterion_6_metrics(10.0));

    PipelineArtifacts pipeline;
    report(7, "end-to-end desk-scale denoising",
           criterion_7_end_to_end(1800.0, root / "pipeline", pipeline));
    report(8, "ablation harness", criterion_8_ablation(pipeline.data, root / "ablation"));
    report(9, "determinism regression", criterion_9_determinism(root, pipeline, crit4_artifact));
  } catch (const std::exception& e) {
    std::cout << "[FAIL] acceptance suite aborted: " << e.what() << "\n";
    return 1;
  }

  std::cout << (failures == 0 ? "acceptance: all criteria passed\n"
                              : "acceptance: " + std::to_string(failures) + " criteria FAILED\n");
  return failures == 0 ? 0 : 1;
}
