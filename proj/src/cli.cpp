#include "d4pm/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "d4pm/metrics.hpp"
#include "d4pm/oracle.hpp"
#include "d4pm/rng.hpp"
#include "d4pm/sampler.hpp"
#include "d4pm/schedule.hpp"

namespace d4pm {

namespace {

void require_out_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw IoError("output directory '" + dir.string() + "' does not exist");
  }
}

X0Formula parse_x0_formula(const std::string& name) {
  if (name == "standard") return X0Formula::kStandardInversion;
  if (name == "printed") return X0Formula::kAsPrinted;
  throw ConfigError("unknown x0 formula '" + name + "' (expected standard|printed)");
}

constexpr std::uint64_t kCleanStream = 1, kEogStream = 2, kEmgStream = 3, kEcgStream = 4;
constexpr std::uint64_t kPairingStream = 5;
constexpr std::uint64_t kDenoiseStream = 0xd40150;

}  // namespace

void run_synth_data(const SynthDataOptions& opt) {
  require_out_dir(opt.out);
  if (opt.count_per_class < 1) throw ConfigError("synth-data: count-per-class must be >= 1");
  const Rng base(opt.seed);

  DatasetDir d;
  d.seed = opt.seed;
  d.snr_min_db = opt.snr_min_db;
  d.snr_max_db = opt.snr_max_db;
  // EOG and ECG pair without replacement, so the clean pool holds two
  // segments per artifact count; EMG reuses clean partners.
  d.clean = generate_synthetic(SignalClass::kClean, 2 * opt.count_per_class, opt.n,
                               base.derive(kCleanStream).seed(), opt.sample_rate_hz);
  d.artifacts[SignalClass::kEog] = generate_synthetic(
      SignalClass::kEog, opt.count_per_class, opt.n, base.derive(kEogStream).seed(),
      opt.sample_rate_hz);
  d.artifacts[SignalClass::kEmg] = generate_synthetic(
      SignalClass::kEmg, opt.count_per_class, opt.n, base.derive(kEmgStream).seed(),
      opt.sample_rate_hz);
  d.artifacts[SignalClass::kEcg] = generate_synthetic(
      SignalClass::kEcg, opt.count_per_class, opt.n, base.derive(kEcgStream).seed(),
      opt.sample_rate_hz);
  d.split = build_mixed_dataset(d.clean, d.artifacts, opt.snr_min_db, opt.snr_max_db,
                                base.derive(kPairingStream).seed(), &d.pairs);
  write_dataset_dir(opt.out, d);
  std::cout << "synth-data: wrote " << d.pairs.size() << " pairs (train "
            << d.split.train.size() << ", validation " << d.split.validation.size() << ", test "
            << d.split.test.size() << ") to " << opt.out.string() << "\n";
}

namespace {

DenoiserConfig denoiser_config_for(const TrainOptions& opt, int segment_length) {
  DenoiserConfig cfg;
  cfg.n = segment_length;
  cfg.channels = opt.channels;
  cfg.encoder_blocks = opt.encoder_blocks;
  cfg.heads = opt.heads;
  cfg.film_embed_dim = opt.film_embed_dim;
  cfg.use_class_embedding = opt.use_class_embedding;
  return cfg;
}

const char* checkpoint_name(Branch b) {
  return b == Branch::kEeg ? "eeg.ckpt" : "artifact.ckpt";
}

void write_loss_trace_csv(const std::filesystem::path& path,
                          const std::vector<std::pair<Branch, LossTrace>>& traces) {
  std::ofstream os(path);
  if (!os) throw IoError("train: cannot write '" + path.string() + "'");
  os << "branch,epoch,train_loss,val_loss\n";
  os.precision(12);
  for (const auto& [branch, trace] : traces) {
    for (std::size_t e = 0; e < trace.train.size(); ++e) {
      os << to_string(branch) << ',' << e << ',' << trace.train[e] << ','
         << trace.validation[e] << '\n';
    }
  }
}

}  // namespace

void run_train(const TrainOptions& opt) {
  std::vector<Branch> branches;
  if (opt.branch == "eeg") {
    branches = {Branch::kEeg};
  } else if (opt.branch == "artifact") {
    branches = {Branch::kArtifact};
  } else if (opt.branch == "both") {
    branches = {Branch::kEeg, Branch::kArtifact};
  } else {
    throw ConfigError("train: unknown branch '" + opt.branch + "' (expected eeg|artifact|both)");
  }
  const NoiseSchedule schedule = make_schedule(opt.steps, opt.beta_start, opt.beta_end);
  require_out_dir(opt.out);
  const DatasetDir data = read_dataset_dir(opt.dataset);
  if (data.split.train.empty()) throw ConfigError("train: dataset has an empty train split");
  const int n = static_cast<int>(data.split.train.front().mixture.samples.size());

  std::vector<std::pair<Branch, LossTrace>> traces;
  for (Branch branch : branches) {
    TrainConfig cfg;
    cfg.epochs = opt.epochs;
    cfg.batch_size = opt.batch_size;
    cfg.learning_rate = opt.learning_rate;
    cfg.seed = opt.seed;
    cfg.branch = branch;
    cfg.denoiser = denoiser_config_for(opt, n);

    const std::filesystem::path ckpt = opt.out / checkpoint_name(branch);
    TrainState resume_state;
    const TrainState* resume = nullptr;
    if (opt.resume) {
      CheckpointData prev = load_checkpoint(ckpt, branch);
      if (!prev.resume_state) {
        throw ConfigError("train: checkpoint '" + ckpt.string() + "' carries no resume state");
      }
      resume_state = std::move(*prev.resume_state);
      resume = &resume_state;
    }
    const TrainResult result = train_branch(data.split, cfg, schedule, resume);

    CheckpointData out;
    out.params = result.params;
    out.cfg = cfg;
    out.schedule = schedule;
    out.trace = result.trace;
    out.epochs_done = result.final_state.epochs_done;
    out.resume_state = result.final_state;
    save_checkpoint(ckpt, out);
    traces.emplace_back(branch, result.trace);
    std::cout << "train: " << to_string(branch) << " " << result.trace.train.size()
              << " epochs, final train loss "
              << (result.trace.train.empty() ? 0.0 : result.trace.train.back()) << ", wrote "
              << ckpt.string() << "\n";
  }
  write_loss_trace_csv(opt.out / "loss_trace.csv", traces);
}

namespace {

struct LoadedModels {
  CheckpointData eeg;
  CheckpointData artifact;
};

LoadedModels load_model_pair(const std::filesystem::path& eeg_path,
                             const std::filesystem::path& artifact_path) {
  LoadedModels m;
  m.eeg = load_checkpoint(eeg_path, Branch::kEeg);
  m.artifact = load_checkpoint(artifact_path, Branch::kArtifact);
  if (m.eeg.schedule.T != m.artifact.schedule.T ||
      m.eeg.schedule.beta_start != m.artifact.schedule.beta_start ||
      m.eeg.schedule.beta_end != m.artifact.schedule.beta_end) {
    throw ConfigError("denoise: the two checkpoints were trained on different schedules");
  }
  return m;
}

}  // namespace

void run_denoise(const DenoiseOptions& opt) {
  require_out_dir(opt.out);
  const DatasetDir data = read_dataset_dir(opt.dataset);
  const LoadedModels models = load_model_pair(opt.checkpoint_eeg, opt.checkpoint_artifact);
  const NoiseSchedule& schedule = models.eeg.schedule;

  SamplerConfig cfg;
  cfg.lambda_dc = opt.lambda_dc;
  cfg.lambda_snr = opt.lambda_snr;
  cfg.share_eta = opt.share_eta;
  cfg.stochastic_level = opt.stochastic_level;
  cfg.x0_formula = parse_x0_formula(opt.x0_formula);
  cfg.seed = opt.seed;
  validate(cfg);

  const auto& test = data.split.test;
  if (test.empty()) throw ConfigError("denoise: dataset has an empty test split");
  const int count = opt.limit > 0 ? std::min<int>(opt.limit, test.size())
                                  : static_cast<int>(test.size());

  std::vector<Segment> denoised(count), artifact_est(count);
  std::vector<std::vector<StepDiag>> diags(count);
  const Rng base(opt.seed);
  parallel_for(count, [&](int i) {
    const MixedExample& ex = test[i];
    Rng rng = base.derive(kDenoiseStream + static_cast<std::uint64_t>(i));
    std::vector<StepDiag> diag;
    const JointSampleResult res =
        joint_sample(models.eeg.params, models.artifact.params, ex.mixture.samples,
                     ex.artifact.label, schedule, cfg, rng, &diag);
    denoised[i] = Segment{res.x0, SignalClass::kClean, ex.mixture.sample_rate_hz};
    artifact_est[i] = Segment{res.x0p, SignalClass::kClean, ex.mixture.sample_rate_hz};
    diags[i] = std::move(diag);
  });

  save_segments(opt.out / "denoised.seg", denoised);
  save_segments(opt.out / "artifact_estimate.seg", artifact_est);
  std::ofstream rs(opt.out / "residuals.csv");
  if (!rs) throw IoError("denoise: cannot write residuals.csv");
  rs << "segment_index,t,residual_pre,residual_post\n";
  rs.precision(12);
  for (int i = 0; i < count; ++i) {
    for (const StepDiag& d : diags[i]) {
      rs << i << ',' << d.t << ',' << d.residual_pre << ',' << d.residual_post << '\n';
    }
  }
  std::cout << "denoise: wrote " << count << " segments to " << opt.out.string() << "\n";
}

namespace {

SegmentMetrics metrics_row(int index, const MixedExample& ex, const Vec& x_hat) {
  SegmentMetrics row;
  row.index = index;
  row.cls = ex.artifact.label;
  row.rrmse_t = rrmse_t(x_hat, ex.clean.samples);
  row.rrmse_s = rrmse_s(x_hat, ex.clean.samples);
  row.cc = cc(x_hat, ex.clean.samples);
  row.cc_p_value = cc_p_value(x_hat, ex.clean.samples);
  row.snr_out_db = snr_out(x_hat, ex.clean.samples);
  row.input_snr_db = ex.target_snr_db;
  row.cc_noisy = cc(ex.mixture.samples, ex.clean.samples);
  return row;
}

}  // namespace

void run_evaluate(const EvaluateOptions& opt) {
  require_out_dir(opt.out);
  const DatasetDir data = read_dataset_dir(opt.dataset);
  const std::vector<Segment> denoised = load_segments(opt.denoised);
  const auto& test = data.split.test;
  if (denoised.size() > test.size()) {
    throw ConfigError("evaluate: " + std::to_string(denoised.size()) +
                      " denoised segments but the test split has only " +
                      std::to_string(test.size()));
  }
  std::vector<SegmentMetrics> rows;
  for (std::size_t i = 0; i < denoised.size(); ++i) {
    rows.push_back(metrics_row(static_cast<int>(i), test[i], denoised[i].samples));
  }
  const MetricsReport report = build_report(std::move(rows));
  write_report_csv(opt.out / "report.csv", report);
  write_report_json(opt.out / "report.json", report);
  std::cout << "evaluate: " << report.rows.size() << " segments, mean cc "
            << report.overall.at("cc").mean << ", mean snr_out "
            << report.overall.at("snr_out_db").mean << " dB\n";
}

namespace {

struct VariantResult {
  // class (or "Avg") -> metric -> mean
  std::map<std::string, std::map<std::string, double>> table;
};

VariantResult summarize_variant(const std::vector<SegmentMetrics>& rows) {
  const MetricsReport report = build_report(rows);
  VariantResult v;
  for (const auto& [cls, agg] : report.per_class) {
    auto& dst = v.table[to_string(cls)];
    dst["rrmse_t"] = agg.at("rrmse_t").mean;
    dst["rrmse_s"] = agg.at("rrmse_s").mean;
    dst["cc"] = agg.at("cc").mean;
    dst["snr"] = agg.at("snr_out_db").mean;
  }
  auto& avg = v.table["Avg"];
  avg["rrmse_t"] = report.overall.at("rrmse_t").mean;
  avg["rrmse_s"] = report.overall.at("rrmse_s").mean;
  avg["cc"] = report.overall.at("cc").mean;
  avg["snr"] = report.overall.at("snr_out_db").mean;
  return v;
}

}  // namespace

void run_ablate(const AblateOptions& opt) {
  require_out_dir(opt.out);
  const DatasetDir data = read_dataset_dir(opt.dataset);
  if (data.split.test.empty()) throw ConfigError("ablate: dataset has an empty test split");
  const int n = static_cast<int>(data.split.test.front().mixture.samples.size());
  const NoiseSchedule schedule = make_schedule(opt.steps, opt.beta_start, opt.beta_end);

  bool want_base = false, want_base_art = false, want_full = false;
  for (const std::string& v : opt.variants) {
    if (v == "base") {
      want_base = true;
    } else if (v == "base+artifacts") {
      want_base_art = true;
    } else if (v == "full") {
      want_full = true;
    } else {
      throw ConfigError("ablate: unknown variant '" + v + "'");
    }
  }
  if (!(want_base || want_base_art || want_full)) {
    throw ConfigError("ablate: no variants selected");
  }

  const auto train_model = [&](Branch branch, bool labels) {
    TrainConfig cfg;
    cfg.epochs = opt.epochs;
    cfg.batch_size = opt.batch_size;
    cfg.learning_rate = opt.learning_rate;
    cfg.seed = opt.seed;
    cfg.branch = branch;
    cfg.denoiser.n = n;
    cfg.denoiser.channels = opt.channels;
    cfg.denoiser.encoder_blocks = opt.encoder_blocks;
    cfg.denoiser.heads = opt.heads;
    cfg.denoiser.film_embed_dim = opt.film_embed_dim;
    cfg.denoiser.use_class_embedding = labels;
    return train_branch(data.split, cfg, schedule).params;
  };

  std::optional<DenoiserParams> eeg_nolabel, art_nolabel, eeg_label, art_label;
  if (want_base || want_base_art) eeg_nolabel = train_model(Branch::kEeg, false);
  if (want_base_art) art_nolabel = train_model(Branch::kArtifact, false);
  if (want_full) {
    eeg_label = train_model(Branch::kEeg, true);
    art_label = train_model(Branch::kArtifact, true);
  }

  SamplerConfig cfg;
  cfg.lambda_dc = opt.lambda_dc;
  cfg.seed = opt.seed;

  const auto& test = data.split.test;
  const int count = static_cast<int>(test.size());
  const Rng base(opt.seed);
  std::vector<SegmentMetrics> rows_base(count), rows_base_art(count), rows_full(count);
  parallel_for(count, [&](int i) {
    const MixedExample& ex = test[i];
    const std::uint64_t stream = kDenoiseStream + static_cast<std::uint64_t>(i);
    // Identical per-segment seeds across variants keep the comparison paired.
    if (want_base) {
      Rng rng = base.derive(stream);
      const DenoiserEpsPredictor eeg(*eeg_nolabel);
      const Vec x0 =
          single_branch_sample(eeg, ex.mixture.samples, ex.artifact.label, schedule, cfg, rng);
      rows_base[i] = metrics_row(i, ex, x0);
    }
    if (want_base_art) {
      Rng rng = base.derive(stream);
      const JointSampleResult res = joint_sample(*eeg_nolabel, *art_nolabel, ex.mixture.samples,
                                                 ex.artifact.label, schedule, cfg, rng);
      rows_base_art[i] = metrics_row(i, ex, res.x0);
    }
    if (want_full) {
      Rng rng = base.derive(stream);
      const JointSampleResult res = joint_sample(*eeg_label, *art_label, ex.mixture.samples,
                                                 ex.artifact.label, schedule, cfg, rng);
      rows_full[i] = metrics_row(i, ex, res.x0);
    }
  });

  std::map<std::string, VariantResult> results;
  if (want_base) results["base"] = summarize_variant(rows_base);
  if (want_base_art) results["base_artifacts"] = summarize_variant(rows_base_art);
  if (want_full) results["full"] = summarize_variant(rows_full);

  std::ofstream os(opt.out / "ablation.csv");
  if (!os) throw IoError("ablate: cannot write ablation.csv");
  os << "artifact,metric,base,base_artifacts,full\n";
  os.precision(12);
  const char* classes[] = {"EOG", "EMG", "ECG", "Avg"};
  const char* metrics[] = {"rrmse_t", "rrmse_s", "cc", "snr"};
  for (const char* cls : classes) {
    for (const char* metric : metrics) {
      os << cls << ',' << metric;
      for (const char* variant : {"base", "base_artifacts", "full"}) {
        os << ',';
        const auto it = results.find(variant);
        if (it == results.end()) continue;
        const auto row = it->second.table.find(cls);
        if (row != it->second.table.end()) os << row->second.at(metric);
      }
      os << '\n';
    }
  }
  if (!os) throw IoError("ablate: failed writing ablation.csv");

  nlohmann::json j;
  for (const auto& [variant, res] : results) j[variant] = res.table;
  std::ofstream js(opt.out / "ablation.json");
  if (!js) throw IoError("ablate: cannot write ablation.json");
  js << j.dump(2) << "\n";
  std::cout << "ablate: wrote ablation.csv over " << count << " test segments\n";
}

namespace {

// Closed-form mean of the single-branch chain with the analytic eps
// predictor: u_{t-1} = A_t (g_t u_t + c_t) + B_t u_t from u_T = 0.
Vec bridge_mean(const GaussianPrior& prior, const NoiseSchedule& s) {
  const std::size_t n = prior.mean.size();
  Vec u(n, 0.0);
  for (int t = s.T; t >= 1; --t) {
    const double ab = s.alpha_bar_at(t);
    const double abp = s.alpha_bar_at(t - 1);
    const double s2 = prior.std * prior.std;
    const double g = std::sqrt(ab) * s2 / (ab * s2 + 1.0 - ab);
    const double c = (1.0 - ab) * 1.0 / (ab * s2 + 1.0 - ab);
    const double a_coef = s.beta_at(t) * std::sqrt(abp) / (1.0 - ab);
    const double b_coef = (1.0 - abp) * std::sqrt(s.alpha_at(t)) / (1.0 - ab);
    for (std::size_t i = 0; i < n; ++i) {
      const double x0 = g * u[i] + c * prior.mean[i];
      u[i] = t == 1 ? x0 : a_coef * x0 + b_coef * u[i];
    }
  }
  return u;
}

OracleCheckRow z_row(const std::string& name, const std::vector<Vec>& samples,
                     const Vec& expected) {
  const std::size_t n = expected.size();
  const double runs = static_cast<double>(samples.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = 0.0;
    for (const Vec& s : samples) m += s[i];
    m /= runs;
    double var = 0.0;
    for (const Vec& s : samples) var += (s[i] - m) * (s[i] - m);
    var /= (runs - 1.0);
    const double se = std::sqrt(var / runs);
    const double z = se > 0.0 ? std::abs(m - expected[i]) / se : 0.0;
    worst = std::max(worst, z);
  }
  OracleCheckRow row;
  row.name = name;
  row.value = worst;
  row.threshold = 3.0;
  row.pass = worst <= row.threshold;
  return row;
}

}  // namespace

OracleCheckReport run_oracle_check(const OracleCheckOptions& opt) {
  if (opt.runs < 10) throw ConfigError("oracle-check: need at least 10 runs");
  if (opt.n < 1) throw ConfigError("oracle-check: n must be >= 1");
  const NoiseSchedule schedule = make_schedule(opt.steps, opt.beta_start, opt.beta_end);
  const Rng base(opt.seed);

  OracleCheckReport report;

  // Joint recovery with calibrated standard-normal priors (the configuration
  // whose chain mean equals the closed-form posterior mean exactly).
  {
    Rng ygen = base.derive(11);
    Vec y(opt.n);
    for (double& v : y) v = std::sqrt(2.0) * ygen.normal();
    const GaussianPrior px{Vec(opt.n, 0.0), 1.0};
    const GaussianPrior pxp{Vec(opt.n, 0.0), 1.0};
    SamplerConfig cfg;
    cfg.lambda_dc = 0.5;
    cfg.lambda_snr = 1.0;
    const GaussianEpsPredictor pe(px, schedule);
    const GaussianEpsPredictor pa(pxp, schedule);
    const JointGaussianPosterior post = joint_gaussian_posterior(px, pxp, cfg.lambda_snr, y);

    std::vector<Vec> xs(opt.runs), xps(opt.runs);
    parallel_for(opt.runs, [&](int r) {
      Rng rng = base.derive(1000 + static_cast<std::uint64_t>(r));
      const JointSampleResult res = joint_sample(pe, pa, y, SignalClass::kEog, schedule, cfg, rng);
      xs[r] = res.x0;
      xps[r] = res.x0p;
    });
    report.rows.push_back(z_row("joint posterior mean (x)", xs, post.mean_x));
    report.rows.push_back(z_row("joint posterior mean (x')", xps, post.mean_xp));

    double worst_resid = 0.0;
    const double ynorm = l2_norm(y);
    for (int r = 0; r < opt.runs; ++r) {
      double resid = 0.0;
      for (int i = 0; i < opt.n; ++i) {
        const double q = y[i] - (xs[r][i] + cfg.lambda_snr * xps[r][i]);
        resid += q * q;
      }
      worst_resid = std::max(worst_resid, std::sqrt(resid) / ynorm);
    }
    OracleCheckRow row;
    row.name = "per-run measurement identity |y-(x+lambda*x')|/|y|";
    row.value = worst_resid;
    row.threshold = 1e-6;
    row.pass = worst_resid <= row.threshold;
    report.rows.push_back(row);

    double closed_form = 0.0;
    for (int i = 0; i < opt.n; ++i) {
      closed_form = std::max(closed_form,
                             std::abs(post.mean_x[i] + cfg.lambda_snr * post.mean_xp[i] - y[i]));
    }
    OracleCheckRow cf;
    cf.name = "closed-form identity mean_x + lambda*mean_x' = y";
    cf.value = closed_form;
    cf.threshold = 1e-6;
    cf.pass = closed_form <= cf.threshold;
    report.rows.push_back(cf);
  }

  // Single-branch chain against its own closed-form mean recursion, with a
  // general (non-calibrated) prior.
  {
    Rng mgen = base.derive(12);
    GaussianPrior prior;
    prior.mean.resize(opt.n);
    for (double& v : prior.mean) v = 0.5 * mgen.normal();
    prior.std = 0.8;
    const Vec expected = bridge_mean(prior, schedule);
    const GaussianEpsPredictor pe(prior, schedule);
    SamplerConfig cfg;
    const Vec y(opt.n, 0.0);  // ignored by the analytic predictor
    std::vector<Vec> xs(opt.runs);
    parallel_for(opt.runs, [&](int r) {
      Rng rng = base.derive(500000 + static_cast<std::uint64_t>(r));
      xs[r] = single_branch_sample(pe, y, SignalClass::kEog, schedule, cfg, rng);
    });
    report.rows.push_back(z_row("single-branch bridge mean", xs, expected));
  }

  report.pass = true;
  for (const auto& row : report.rows) report.pass = report.pass && row.pass;

  for (const auto& row : report.rows) {
    std::cout << (row.pass ? "[PASS] " : "[FAIL] ") << row.name << ": value " << row.value
              << " (threshold " << row.threshold << ")\n";
  }
  std::cout << (report.pass ? "oracle-check: all checks passed\n"
                            : "oracle-check: FAILURES detected\n");
  return report;
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"D4PM: dual-branch conditional diffusion for single-channel artifact removal"};
  app.require_subcommand(1);
  app.set_config("--config");

  SynthDataOptions synth;
  auto* synth_cmd = app.add_subcommand("synth-data", "Generate a synthetic mixed dataset");
  synth_cmd->add_option("--out", synth.out, "Output directory (must exist)")->required();
  synth_cmd->add_option("--seed", synth.seed, "RNG seed");
  synth_cmd->add_option("--n", synth.n, "Segment length");
  synth_cmd->add_option("--count-per-class", synth.count_per_class, "Artifacts per class");
  synth_cmd->add_option("--snr-min", synth.snr_min_db, "Lower SNR bound (dB)");
  synth_cmd->add_option("--snr-max", synth.snr_max_db, "Upper SNR bound (dB)");
  synth_cmd->add_option("--sample-rate", synth.sample_rate_hz, "Sample rate (Hz)");

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Train the diffusion branches");
  train_cmd->add_option("--dataset", train.dataset, "Dataset directory")->required();
  train_cmd->add_option("--out", train.out, "Output directory (must exist)")->required();
  train_cmd->add_option("--seed", train.seed, "RNG seed");
  train_cmd->add_option("--epochs", train.epochs, "Training epochs");
  train_cmd->add_option("--batch-size", train.batch_size, "Batch size");
  train_cmd->add_option("--lr", train.learning_rate, "Learning rate");
  train_cmd->add_option("--steps", train.steps, "Diffusion steps T");
  train_cmd->add_option("--beta-start", train.beta_start, "Schedule beta_start");
  train_cmd->add_option("--beta-end", train.beta_end, "Schedule beta_end");
  train_cmd->add_option("--channels", train.channels, "Denoiser channels");
  train_cmd->add_option("--encoder-blocks", train.encoder_blocks, "Encoder blocks per path");
  train_cmd->add_option("--heads", train.heads, "Attention heads");
  train_cmd->add_option("--film-dim", train.film_embed_dim, "FiLM embedding dim");
  train_cmd->add_flag("--no-class-embedding{false}", train.use_class_embedding,
                      "Disable class-label conditioning");
  train_cmd->add_option("--branch", train.branch, "eeg | artifact | both");
  train_cmd->add_flag("--resume", train.resume, "Continue from existing checkpoints");

  DenoiseOptions denoise;
  auto* denoise_cmd = app.add_subcommand("denoise", "Joint posterior sampling on the test split");
  denoise_cmd->add_option("--dataset", denoise.dataset, "Dataset directory")->required();
  denoise_cmd->add_option("--checkpoint-eeg", denoise.checkpoint_eeg, "EEG checkpoint")
      ->required();
  denoise_cmd
      ->add_option("--checkpoint-artifact", denoise.checkpoint_artifact, "Artifact checkpoint")
      ->required();
  denoise_cmd->add_option("--out", denoise.out, "Output directory (must exist)")->required();
  denoise_cmd->add_option("--seed", denoise.seed, "RNG seed");
  denoise_cmd->add_option("--lambda-dc", denoise.lambda_dc, "Data-consistency weight");
  denoise_cmd->add_option("--lambda-snr", denoise.lambda_snr, "Measurement-model scale");
  denoise_cmd->add_flag("--share-eta,!--no-share-eta", denoise.share_eta,
                        "Share the eta draw across branches");
  denoise_cmd->add_flag("--stochastic-level", denoise.stochastic_level,
                        "Sample the conditioning level at inference");
  denoise_cmd->add_option("--x0-formula", denoise.x0_formula, "standard | printed");
  denoise_cmd->add_option("--limit", denoise.limit, "Denoise only the first K test segments");

  EvaluateOptions evaluate;
  auto* eval_cmd = app.add_subcommand("evaluate", "Metrics for denoised segments");
  eval_cmd->add_option("--dataset", evaluate.dataset, "Dataset directory")->required();
  eval_cmd->add_option("--denoised", evaluate.denoised, "Denoised segment file")->required();
  eval_cmd->add_option("--out", evaluate.out, "Output directory (must exist)")->required();

  AblateOptions ablate;
  std::vector<std::string> ablate_variants;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run the three-variant ablation table");
  ablate_cmd->add_option("--dataset", ablate.dataset, "Dataset directory")->required();
  ablate_cmd->add_option("--out", ablate.out, "Output directory (must exist)")->required();
  ablate_cmd->add_option("--seed", ablate.seed, "RNG seed");
  ablate_cmd->add_option("--epochs", ablate.epochs, "Training epochs per branch");
  ablate_cmd->add_option("--batch-size", ablate.batch_size, "Batch size");
  ablate_cmd->add_option("--lr", ablate.learning_rate, "Learning rate");
  ablate_cmd->add_option("--steps", ablate.steps, "Diffusion steps T");
  ablate_cmd->add_option("--beta-start", ablate.beta_start, "Schedule beta_start");
  ablate_cmd->add_option("--beta-end", ablate.beta_end, "Schedule beta_end");
  ablate_cmd->add_option("--channels", ablate.channels, "Denoiser channels");
  ablate_cmd->add_option("--encoder-blocks", ablate.encoder_blocks, "Encoder blocks per path");
  ablate_cmd->add_option("--heads", ablate.heads, "Attention heads");
  ablate_cmd->add_option("--film-dim", ablate.film_embed_dim, "FiLM embedding dim");
  ablate_cmd->add_option("--lambda-dc", ablate.lambda_dc, "Data-consistency weight");
  ablate_cmd->add_option("--variant", ablate_variants,
                         "Variant to run (repeatable): base | base+artifacts | full");

  OracleCheckOptions oracle;
  auto* oracle_cmd = app.add_subcommand("oracle-check", "Analytic Gaussian sampler checks");
  oracle_cmd->add_option("--seed", oracle.seed, "RNG seed");
  oracle_cmd->add_option("--n", oracle.n, "Signal length");
  oracle_cmd->add_option("--steps", oracle.steps, "Diffusion steps T");
  oracle_cmd->add_option("--runs", oracle.runs, "Monte-Carlo runs");
  oracle_cmd->add_option("--beta-start", oracle.beta_start, "Schedule beta_start");
  oracle_cmd->add_option("--beta-end", oracle.beta_end, "Schedule beta_end");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth_cmd->parsed()) {
      run_synth_data(synth);
    } else if (train_cmd->parsed()) {
      run_train(train);
    } else if (denoise_cmd->parsed()) {
      run_denoise(denoise);
    } else if (eval_cmd->parsed()) {
      run_evaluate(evaluate);
    } else if (ablate_cmd->parsed()) {
      if (!ablate_variants.empty()) ablate.variants = ablate_variants;
      run_ablate(ablate);
    } else if (oracle_cmd->parsed()) {
      const OracleCheckReport report = run_oracle_check(oracle);
      return report.pass ? kExitOk : kExitCheckFailed;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CheckFailure& e) {
    std::cerr << "check failure: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

}  // namespace d4pm
