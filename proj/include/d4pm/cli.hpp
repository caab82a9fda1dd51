#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "d4pm/denoiser.hpp"
#include "d4pm/sampler.hpp"
#include "d4pm/trainer.hpp"

namespace d4pm {

// CLI exit codes.
constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

struct SynthDataOptions {
  std::filesystem::path out;
  std::uint64_t seed = 0;
  int n = 64;
  int count_per_class = 250;
  double snr_min_db = -5.0;
  double snr_max_db = 5.0;
  double sample_rate_hz = kDefaultSampleRateHz;
};

struct TrainOptions {
  std::filesystem::path dataset;
  std::filesystem::path out;
  std::uint64_t seed = 0;
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int steps = 50;
  double beta_start = 1e-4;
  double beta_end = 5e-2;
  int channels = 16;
  int encoder_blocks = 1;
  int heads = 4;
  int film_embed_dim = 32;
  bool use_class_embedding = true;
  std::string branch = "both";  // eeg | artifact | both
  bool resume = false;
};

struct DenoiseOptions {
  std::filesystem::path dataset;
  std::filesystem::path checkpoint_eeg;
  std::filesystem::path checkpoint_artifact;
  std::filesystem::path out;
  std::uint64_t seed = 0;
  double lambda_dc = 0.5;
  double lambda_snr = 1.0;
  bool share_eta = true;
  bool stochastic_level = false;
  std::string x0_formula = "standard";  // standard | printed
  int limit = 0;                        // 0 = whole test split
};

struct EvaluateOptions {
  std::filesystem::path dataset;
  std::filesystem::path denoised;  // segment file aligned with the test split
  std::filesystem::path out;
};

struct AblateOptions {
  std::filesystem::path dataset;
  std::filesystem::path out;
  std::uint64_t seed = 0;
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int steps = 50;
  double beta_start = 1e-4;
  double beta_end = 5e-2;
  int channels = 16;
  int encoder_blocks = 1;
  int heads = 4;
  int film_embed_dim = 32;
  double lambda_dc = 0.5;
  std::vector<std::string> variants = {"base", "base+artifacts", "full"};
};

struct OracleCheckOptions {
  std::uint64_t seed = 0;
  int n = 16;
  int steps = 50;
  int runs = 1000;
  double beta_start = 1e-4;
  double beta_end = 5e-2;
};

struct OracleCheckRow {
  std::string name;
  double value = 0.0;      // worst |z|-score, or max residual for identity rows
  double threshold = 0.0;  // pass iff value <= threshold
  bool pass = false;
};

struct OracleCheckReport {
  std::vector<OracleCheckRow> rows;
  bool pass = false;
};

void run_synth_data(const SynthDataOptions& opt);
void run_train(const TrainOptions& opt);
void run_denoise(const DenoiseOptions& opt);
void run_evaluate(const EvaluateOptions& opt);
void run_ablate(const AblateOptions& opt);
OracleCheckReport run_oracle_check(const OracleCheckOptions& opt);

// Parses argv, dispatches, maps errors to exit codes.
int cli_main(int argc, const char* const* argv);

}  // namespace d4pm
