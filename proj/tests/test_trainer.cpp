#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "d4pm/trainer.hpp"
#include "oracles.hpp"

using namespace d4pm;
namespace fs = std::filesystem;

namespace {

DatasetSplit tiny_dataset(int pairs_per_class, int n, std::uint64_t seed) {
  const auto clean = generate_synthetic(SignalClass::kClean, 2 * pairs_per_class, n, seed);
  std::map<SignalClass, std::vector<Segment>> artifacts;
  artifacts[SignalClass::kEog] = generate_synthetic(SignalClass::kEog, pairs_per_class, n, seed + 1);
  artifacts[SignalClass::kEmg] = generate_synthetic(SignalClass::kEmg, pairs_per_class, n, seed + 2);
  artifacts[SignalClass::kEcg] = generate_synthetic(SignalClass::kEcg, pairs_per_class, n, seed + 3);
  return build_mixed_dataset(clean, artifacts, -5.0, 5.0, seed + 4);
}

TrainConfig tiny_config(int n, int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.seed = 9;
  cfg.denoiser.n = n;
  cfg.denoiser.channels = 8;
  cfg.denoiser.encoder_blocks = 1;
  cfg.denoiser.heads = 4;
  cfg.denoiser.film_embed_dim = 8;
  return cfg;
}

fs::path temp_dir(const char* name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("diffuse with injected noise") {
  const Vec x0{0.5, -1.0, 2.0};
  SUBCASE("zero eps reproduces the scaled signal") {
    const Vec xt = diffuse(x0, 0.49, Vec(3, 0.0));
    for (std::size_t i = 0; i < x0.size(); ++i) {
      CHECK(xt[i] == doctest::Approx(0.7 * x0[i]).epsilon(1e-15));
    }
  }
  SUBCASE("alpha_bar near one is the identity limit") {
    const NoiseSchedule s = make_schedule(1, 1e-10, 1e-10);
    Rng rng(2);
    Segment seg;
    seg.samples = Vec(16, 1.0);
    const TrainingExample ex =
        make_training_example(seg, seg, SignalClass::kEog, s, rng);
    for (double v : ex.x_t) CHECK(std::abs(v - 1.0) <= 1e-4);
  }
  SUBCASE("length mismatch") {
    CHECK_THROWS_AS(diffuse(x0, 0.5, Vec(2, 0.0)), ConfigError);
  }
}

TEST_CASE("training example level matches its step interval") {
  const NoiseSchedule s = make_schedule(50, 1e-4, 5e-2);
  Rng rng(77);
  Segment x0, y;
  x0.samples = Vec(16, 0.3);
  y.samples = Vec(16, 0.5);
  for (int i = 0; i < 50; ++i) {
    const TrainingExample ex = make_training_example(x0, y, SignalClass::kEmg, s, rng);
    CHECK(ex.level.step >= 1);
    CHECK(ex.level.step <= 50);
    CHECK(ex.level.value >= std::sqrt(s.alpha_bar_at(ex.level.step)));
    CHECK(ex.level.value <= std::sqrt(s.alpha_bar_at(ex.level.step - 1)));
    CHECK(ex.eps_target.size() == 16);
  }
}

TEST_CASE("zero learning rate is a fixed point with a constant validation trace") {
  const DatasetSplit data = tiny_dataset(10, 16, 5);
  TrainConfig cfg = tiny_config(16, 3);
  cfg.learning_rate = 0.0;
  const NoiseSchedule s = make_schedule(10, 1e-4, 5e-2);
  const TrainResult res = train_branch(data, cfg, s);

  const DenoiserParams fresh =
      init_params(cfg.denoiser, Rng(cfg.seed).derive(0x696e6974ULL ^ 0).next_u64());
  REQUIRE(res.final_state.params.tensors.size() == fresh.tensors.size());
  for (std::size_t i = 0; i < fresh.tensors.size(); ++i) {
    CHECK(res.final_state.params.tensors[i].tensor.data == fresh.tensors[i].tensor.data);
  }
  REQUIRE(res.trace.validation.size() == 3);
  CHECK(res.trace.validation[1] == res.trace.validation[0]);
  CHECK(res.trace.validation[2] == res.trace.validation[0]);
}

TEST_CASE("same seed reproduces the loss trace") {
  const DatasetSplit data = tiny_dataset(8, 16, 6);
  const TrainConfig cfg = tiny_config(16, 2);
  const NoiseSchedule s = make_schedule(10, 1e-4, 5e-2);
  const TrainResult a = train_branch(data, cfg, s);
  const TrainResult b = train_branch(data, cfg, s);
  CHECK(a.trace.train == b.trace.train);
  CHECK(a.trace.validation == b.trace.validation);
  for (std::size_t i = 0; i < a.params.tensors.size(); ++i) {
    CHECK(a.params.tensors[i].tensor.data == b.params.tensors[i].tensor.data);
  }
}

TEST_CASE("loss decreases on a small run") {
  const DatasetSplit data = tiny_dataset(40, 32, 8);
  TrainConfig cfg = tiny_config(32, 15);
  cfg.learning_rate = 2e-3;
  const NoiseSchedule s = make_schedule(20, 1e-4, 5e-2);
  const TrainResult res = train_branch(data, cfg, s);
  REQUIRE(res.trace.train.size() == 15);
  CHECK(res.trace.train.back() < 0.8 * res.trace.train.front());
}

TEST_CASE("artifact branch regresses the scaled artifact") {
  // with lr=0 the branch choice only changes the frozen validation targets,
  // so differing validation losses witness the different regression sources
  const DatasetSplit data = tiny_dataset(8, 16, 12);
  TrainConfig cfg = tiny_config(16, 1);
  cfg.learning_rate = 0.0;
  const NoiseSchedule s = make_schedule(10, 1e-4, 5e-2);
  cfg.branch = Branch::kEeg;
  const TrainResult eeg = train_branch(data, cfg, s);
  cfg.branch = Branch::kArtifact;
  const TrainResult art = train_branch(data, cfg, s);
  CHECK(eeg.trace.validation[0] != art.trace.validation[0]);
}

TEST_CASE("divergent training aborts with a diagnostic") {
  const DatasetSplit data = tiny_dataset(8, 16, 14);
  TrainConfig cfg = tiny_config(16, 30);
  // large enough that activations overflow; layer norm absorbs anything less
  cfg.learning_rate = 1e150;
  const NoiseSchedule s = make_schedule(10, 1e-4, 5e-2);
  CHECK_THROWS_AS(train_branch(data, cfg, s), CheckFailure);
}

TEST_CASE("empty train split is rejected") {
  DatasetSplit data;
  const TrainConfig cfg = tiny_config(16, 1);
  const NoiseSchedule s = make_schedule(10, 1e-4, 5e-2);
  CHECK_THROWS_AS(train_branch(data, cfg, s), ConfigError);
}

TEST_CASE("checkpoint round trip is bit exact on the float32 payload") {
  const fs::path dir = temp_dir("d4pm_ckpt");
  const DatasetSplit data = tiny_dataset(8, 16, 16);
  const TrainConfig cfg = tiny_config(16, 1);
  const NoiseSchedule s = make_schedule(10, 1e-4, 5e-2);
  const TrainResult res = train_branch(data, cfg, s);

  CheckpointData out;
  out.params = res.params;
  out.cfg = cfg;
  out.schedule = s;
  out.trace = res.trace;
  out.epochs_done = 1;
  out.resume_state = res.final_state;
  save_checkpoint(dir / "a.ckpt", out);

  const CheckpointData loaded = load_checkpoint(dir / "a.ckpt");
  REQUIRE(loaded.params.tensors.size() == res.params.tensors.size());
  for (std::size_t i = 0; i < res.params.tensors.size(); ++i) {
    const Vec& orig = res.params.tensors[i].tensor.data;
    const Vec& back = loaded.params.tensors[i].tensor.data;
    REQUIRE(orig.size() == back.size());
    for (std::size_t k = 0; k < orig.size(); ++k) {
      CHECK(back[k] == static_cast<double>(static_cast<float>(orig[k])));
    }
  }
  CHECK(loaded.cfg.batch_size == cfg.batch_size);
  CHECK(loaded.schedule.T == s.T);
  CHECK(loaded.trace.train == res.trace.train);
  REQUIRE(loaded.resume_state.has_value());
  CHECK(loaded.resume_state->adam_step == res.final_state.adam_step);

  // a second save of the loaded data reproduces the payload bytes
  save_checkpoint(dir / "b.ckpt", loaded);
  std::ifstream fa(dir / "a.ckpt", std::ios::binary);
  std::ifstream fb(dir / "b.ckpt", std::ios::binary);
  const std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  const std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(ba == bb);
}

TEST_CASE("checkpoint errors are structured") {
  const fs::path dir = temp_dir("d4pm_ckpt_err");
  const DatasetSplit data = tiny_dataset(8, 16, 18);
  TrainConfig cfg = tiny_config(16, 1);
  const NoiseSchedule s = make_schedule(10, 1e-4, 5e-2);
  const TrainResult res = train_branch(data, cfg, s);
  CheckpointData out;
  out.params = res.params;
  out.cfg = cfg;
  out.schedule = s;
  out.trace = res.trace;
  out.epochs_done = 1;
  save_checkpoint(dir / "c.ckpt", out);

  SUBCASE("wrong expected branch") {
    CHECK_THROWS_AS(load_checkpoint(dir / "c.ckpt", Branch::kArtifact), ConfigError);
    CHECK_NOTHROW(load_checkpoint(dir / "c.ckpt", Branch::kEeg));
  }
  SUBCASE("corrupted payload length") {
    fs::resize_file(dir / "c.ckpt", fs::file_size(dir / "c.ckpt") - 7);
    try {
      load_checkpoint(dir / "c.ckpt");
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("expected") != std::string::npos);
    }
  }
  SUBCASE("version mismatch") {
    std::ifstream is(dir / "c.ckpt.json");
    std::string manifest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    is.close();
    const auto pos = manifest.find("d4pm-checkpoint-v1");
    manifest.replace(pos, 18, "d4pm-checkpoint-v9");
    std::ofstream(dir / "c.ckpt.json") << manifest;
    CHECK_THROWS_AS(load_checkpoint(dir / "c.ckpt"), IoError);
  }
  SUBCASE("missing tensor key") {
    std::ifstream is(dir / "c.ckpt.json");
    std::string manifest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    is.close();
    const auto pos = manifest.find("path_a.conv1.weight");
    manifest.replace(pos, 19, "path_a.conv1.w8ight");
    std::ofstream(dir / "c.ckpt.json") << manifest;
    CHECK_THROWS_AS(load_checkpoint(dir / "c.ckpt"), IoError);
  }
}

TEST_CASE("resume continues deterministically") {
  const DatasetSplit data = tiny_dataset(10, 16, 20);
  const NoiseSchedule s = make_schedule(10, 1e-4, 5e-2);
  TrainConfig cfg = tiny_config(16, 2);
  const TrainResult first = train_branch(data, cfg, s);

  const fs::path dir = temp_dir("d4pm_resume");
  CheckpointData out;
  out.params = first.params;
  out.cfg = cfg;
  out.schedule = s;
  out.trace = first.trace;
  out.epochs_done = first.final_state.epochs_done;
  out.resume_state = first.final_state;
  save_checkpoint(dir / "r.ckpt", out);

  cfg.epochs = 4;
  const CheckpointData l1 = load_checkpoint(dir / "r.ckpt");
  const CheckpointData l2 = load_checkpoint(dir / "r.ckpt");
  const TrainResult a = train_branch(data, cfg, s, &*l1.resume_state);
  const TrainResult b = train_branch(data, cfg, s, &*l2.resume_state);
  REQUIRE(a.trace.train.size() == 4);
  CHECK(a.trace.train == b.trace.train);
  CHECK(a.trace.validation == b.trace.validation);
  for (std::size_t i = 0; i < a.final_state.params.tensors.size(); ++i) {
    CHECK(a.final_state.params.tensors[i].tensor.data ==
          b.final_state.params.tensors[i].tensor.data);
  }
  // the resumed trace extends the original prefix
  CHECK(a.trace.train[0] == first.trace.train[0]);
  CHECK(a.trace.train[1] == first.trace.train[1]);
}

}  // TEST_SUITE
