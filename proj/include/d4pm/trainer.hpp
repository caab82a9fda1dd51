#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "d4pm/denoiser.hpp"
#include "d4pm/schedule.hpp"
#include "d4pm/signals.hpp"

namespace d4pm {

enum class Branch { kEeg, kArtifact };
const char* to_string(Branch b);
Branch branch_from_string(const std::string& name);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  Branch branch = Branch::kEeg;
  DenoiserConfig denoiser;
  // When set, the forward perturbation uses the sampled continuous level
  // instead of the discrete sqrt(alpha_bar_t).
  bool perturb_with_continuous_level = false;
};

void validate(const TrainConfig& cfg);

struct TrainingExample {
  Vec x_t;
  Vec eps_target;
  ContinuousLevel level;
  SignalClass z = SignalClass::kEog;
};

// x_t = sqrt(alpha_bar)*x0 + sqrt(1-alpha_bar)*eps. Exposed as the
// deterministic core of make_training_example (test hook for injected eps).
Vec diffuse(const Vec& x0, double alpha_bar, const Vec& eps);

// Draws t uniform in {1..T}, eps standard normal, the continuous level for t,
// and assembles the regression example. Draw order: t, then eps[0..N),
// then the level.
TrainingExample make_training_example(const Segment& x0, const Segment& y, SignalClass z,
                                      const NoiseSchedule& s, Rng& rng);

struct LossTrace {
  std::vector<double> train;       // per-epoch mean L1 over fresh draws
  std::vector<double> validation;  // per-epoch L1 over frozen validation draws
};

// Full optimizer state, sufficient to continue training deterministically.
struct TrainState {
  DenoiserParams params;
  std::vector<Vec> adam_m;  // parallel to params.tensors
  std::vector<Vec> adam_v;
  long adam_step = 0;
  int epochs_done = 0;
  LossTrace trace;
};

struct TrainResult {
  DenoiserParams params;  // best-validation snapshot
  LossTrace trace;
  TrainState final_state;
};

// Trains one branch (EEG regresses the clean signal, ARTIFACT the pre-scaled
// artifact contribution lambda_snr * x'). Examples are regenerated each epoch
// from a per-epoch derived stream; validation draws are frozen once, so the
// validation trace is comparable across epochs. Deterministic per seed.
TrainResult train_branch(const DatasetSplit& dataset, const TrainConfig& cfg,
                         const NoiseSchedule& s, const TrainState* resume = nullptr);

struct CheckpointData {
  DenoiserParams params;  // best-validation params
  TrainConfig cfg;
  NoiseSchedule schedule;
  LossTrace trace;
  int epochs_done = 0;
  std::optional<TrainState> resume_state;
};

// Checkpoint format: float32 tensor blob at `path` keyed by parameter name,
// JSON manifest at `path.json` (config, schedule {T, beta_start, beta_end},
// branch, epoch, loss trace, tensor table).
void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::filesystem::path& path,
                               std::optional<Branch> expected_branch = std::nullopt);

}  // namespace d4pm
