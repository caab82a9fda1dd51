#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "d4pm/common.hpp"

namespace d4pm {

enum class SignalClass { kClean, kEog, kEmg, kEcg };

const char* to_string(SignalClass c);
SignalClass signal_class_from_string(const std::string& name);
// Index of an artifact class in {EOG, EMG, ECG}; rejects kClean.
int artifact_class_index(SignalClass c);

constexpr double kDefaultSampleRateHz = 128.0;

struct Segment {
  Vec samples;
  SignalClass label = SignalClass::kClean;
  double sample_rate_hz = kDefaultSampleRateHz;
};

// y = x + lambda_snr * x'. mixture is stored exactly as that elementwise sum;
// target_snr_db is recomputed from the stored values.
struct MixedExample {
  Segment clean;
  Segment artifact;
  double lambda_snr = 1.0;
  Segment mixture;
  double target_snr_db = 0.0;
};

struct DatasetSplit {
  std::vector<MixedExample> train;
  std::vector<MixedExample> validation;
  std::vector<MixedExample> test;
  double fractions[3] = {0.8, 0.1, 0.1};
};

// Scaling factor so that 10*log10(|x|^2 / |lambda*x'|^2) == snr_db.
double lambda_for_snr(const Segment& x, const Segment& xp, double snr_db);

MixedExample mix(const Segment& x, const Segment& xp, double lambda_snr);

// Synthetic desk-scale segment pools, unit RMS, deterministic per seed.
// Clean: 3-6 random-phase sinusoids in 1-30 Hz plus 1/f-shaped noise.
// EOG: smooth drift bursts below 4 Hz. EMG: gated band-limited (>20 Hz)
// noise bursts. ECG: fixed spike template repeated with jittered period.
std::vector<Segment> generate_synthetic(SignalClass cls, int count, int n,
                                        std::uint64_t seed,
                                        double sample_rate_hz = kDefaultSampleRateHz);

// One row per generated pair, in pair-construction order.
struct PairRecord {
  int clean_index = 0;
  SignalClass artifact_class = SignalClass::kEog;
  int artifact_index = 0;
  double lambda_snr = 1.0;
  double snr_db = 0.0;
  int split = 0;  // 0 train, 1 validation, 2 test
};

// Pairs every artifact segment with a clean partner (EMG reuses clean
// segments with replacement; other classes consume the pool without
// replacement), draws one target SNR per pair uniform in
// [snr_min_db, snr_max_db], and splits 80/10/10 by largest remainder.
DatasetSplit build_mixed_dataset(const std::vector<Segment>& clean,
                                 const std::map<SignalClass, std::vector<Segment>>& artifacts_by_class,
                                 double snr_min_db, double snr_max_db,
                                 std::uint64_t pairing_seed,
                                 std::vector<PairRecord>* records = nullptr);

// Segment file format: little-endian float32 payload at `path`, JSON sidecar
// header at `path.json` with n_segments, length, sample_rate_hz, class.
void save_segments(const std::filesystem::path& path, const std::vector<Segment>& segments);
std::vector<Segment> load_segments(const std::filesystem::path& path);

// On-disk dataset directory: clean.seg / eog.seg / emg.seg / ecg.seg pools
// plus dataset.json recording seeds, SNR draws, pairings and the split.
struct DatasetDir {
  std::vector<Segment> clean;
  std::map<SignalClass, std::vector<Segment>> artifacts;
  std::vector<PairRecord> pairs;
  DatasetSplit split;
  std::uint64_t seed = 0;
  double snr_min_db = -5.0, snr_max_db = 5.0;
};

void write_dataset_dir(const std::filesystem::path& dir, const DatasetDir& d);
DatasetDir read_dataset_dir(const std::filesystem::path& dir);

}  // namespace d4pm
