#include "d4pm/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>

#include <json.hpp>

namespace d4pm {

using nlohmann::json;

const char* to_string(Branch b) { return b == Branch::kEeg ? "EEG" : "ARTIFACT"; }

Branch branch_from_string(const std::string& name) {
  if (name == "EEG") return Branch::kEeg;
  if (name == "ARTIFACT") return Branch::kArtifact;
  throw ConfigError("unknown branch '" + name + "'");
}

void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw ConfigError("trainer: epochs must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("trainer: batch_size must be >= 1");
  if (!(cfg.learning_rate >= 0.0)) throw ConfigError("trainer: learning rate must be >= 0");
  if (!(cfg.adam_beta1 > 0.0 && cfg.adam_beta1 < 1.0) ||
      !(cfg.adam_beta2 > 0.0 && cfg.adam_beta2 < 1.0) || !(cfg.adam_eps > 0.0)) {
    throw ConfigError("trainer: invalid adam hyperparameters");
  }
  validate(cfg.denoiser);
}

Vec diffuse(const Vec& x0, double alpha_bar, const Vec& eps) {
  if (x0.size() != eps.size()) throw ConfigError("diffuse: length mismatch");
  if (!(alpha_bar > 0.0) || alpha_bar > 1.0) throw ConfigError("diffuse: alpha_bar outside (0,1]");
  const double a = std::sqrt(alpha_bar);
  const double b = std::sqrt(1.0 - alpha_bar);
  Vec out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

TrainingExample make_training_example(const Segment& x0, const Segment& y, SignalClass z,
                                      const NoiseSchedule& s, Rng& rng) {
  if (x0.samples.size() != y.samples.size()) {
    throw ConfigError("make_training_example: length mismatch");
  }
  const int t = rng.uniform_int(1, s.T);
  Vec eps(x0.samples.size());
  for (double& e : eps) e = rng.normal();
  TrainingExample ex;
  ex.x_t = diffuse(x0.samples, s.alpha_bar_at(t), eps);
  ex.eps_target = std::move(eps);
  ex.level = sample_continuous_level(s, t, rng);
  ex.z = z;
  return ex;
}

namespace {

// Regression target per branch: EEG regresses the clean signal, ARTIFACT the
// pre-scaled contribution lambda_snr * x'.
Segment branch_target(const MixedExample& ex, Branch branch) {
  if (branch == Branch::kEeg) return ex.clean;
  Segment t = ex.artifact;
  for (double& v : t.samples) v *= ex.lambda_snr;
  return t;
}

BatchItem to_batch_item(const MixedExample& ex, const Segment& target, const TrainConfig& cfg,
                        const NoiseSchedule& s, Rng& rng) {
  TrainingExample te = make_training_example(target, ex.mixture, ex.artifact.label, s, rng);
  BatchItem item;
  if (cfg.perturb_with_continuous_level) {
    te.x_t = diffuse(target.samples, te.level.value * te.level.value, te.eps_target);
  }
  item.x_t = std::move(te.x_t);
  item.y = ex.mixture.samples;
  item.level = te.level;
  item.z = te.z;
  item.eps_target = std::move(te.eps_target);
  return item;
}

double forward_only_loss(const DenoiserParams& p, const std::vector<BatchItem>& items) {
  if (items.empty()) return 0.0;
  std::vector<double> losses(items.size(), 0.0);
  parallel_for(static_cast<int>(items.size()), [&](int i) {
    const Vec eps_hat = forward(p, items[i].x_t, items[i].y, items[i].level, items[i].z);
    double l = 0.0;
    for (std::size_t j = 0; j < eps_hat.size(); ++j) {
      l += std::abs(items[i].eps_target[j] - eps_hat[j]);
    }
    losses[i] = l;
  });
  double total = 0.0;
  for (double l : losses) total += l;
  return total / (static_cast<double>(items.size()) * p.cfg.n);
}

struct Adam {
  std::vector<Vec> m, v;
  long step = 0;

  void init_like(const DenoiserParams& p) {
    m.resize(p.tensors.size());
    v.resize(p.tensors.size());
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
      m[i].assign(p.tensors[i].tensor.size(), 0.0);
      v[i].assign(p.tensors[i].tensor.size(), 0.0);
    }
  }

  void update(DenoiserParams& p, const DenoiserParams& g, const TrainConfig& cfg) {
    ++step;
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
    for (std::size_t ti = 0; ti < p.tensors.size(); ++ti) {
      Vec& pw = p.tensors[ti].tensor.data;
      const Vec& gw = g.tensors[ti].tensor.data;
      Vec& mm = m[ti];
      Vec& vv = v[ti];
      for (std::size_t i = 0; i < pw.size(); ++i) {
        mm[i] = cfg.adam_beta1 * mm[i] + (1.0 - cfg.adam_beta1) * gw[i];
        vv[i] = cfg.adam_beta2 * vv[i] + (1.0 - cfg.adam_beta2) * gw[i] * gw[i];
        const double mh = mm[i] / c1;
        const double vh = vv[i] / c2;
        pw[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.adam_eps);
      }
    }
  }
};

constexpr std::uint64_t kValidationStream = 0x76616c6964ULL;  // frozen validation draws
constexpr std::uint64_t kInitStream = 0x696e6974ULL;

std::uint64_t epoch_stream(Branch branch, int epoch) {
  return (static_cast<std::uint64_t>(branch == Branch::kEeg ? 1 : 2) << 32) |
         static_cast<std::uint64_t>(epoch);
}

}  // namespace

TrainResult train_branch(const DatasetSplit& dataset, const TrainConfig& cfg,
                         const NoiseSchedule& s, const TrainState* resume) {
  validate(cfg);
  if (dataset.train.empty()) throw ConfigError("train_branch: empty train split");
  for (const auto& ex : dataset.train) {
    if (static_cast<int>(ex.mixture.samples.size()) != cfg.denoiser.n) {
      throw ConfigError("train_branch: dataset segment length differs from denoiser config");
    }
  }

  const Rng base(cfg.seed);
  TrainState state;
  Adam adam;
  if (resume) {
    state = *resume;
    adam.m = state.adam_m;
    adam.v = state.adam_v;
    adam.step = state.adam_step;
  } else {
    Rng init_rng = base.derive(kInitStream ^ (cfg.branch == Branch::kEeg ? 0 : 1));
    state.params = init_params(cfg.denoiser, init_rng.next_u64());
    adam.init_like(state.params);
    state.epochs_done = 0;
  }

  std::vector<Segment> targets;
  targets.reserve(dataset.train.size());
  for (const auto& ex : dataset.train) targets.push_back(branch_target(ex, cfg.branch));

  // Frozen validation examples make per-epoch validation losses comparable.
  std::vector<BatchItem> val_items;
  {
    Rng val_rng = base.derive(kValidationStream ^ (cfg.branch == Branch::kEeg ? 0 : 1));
    for (const auto& ex : dataset.validation) {
      val_items.push_back(to_batch_item(ex, branch_target(ex, cfg.branch), cfg, s, val_rng));
    }
  }

  DenoiserParams best = state.params;
  double best_val = val_items.empty() ? std::numeric_limits<double>::infinity()
                                      : forward_only_loss(state.params, val_items);

  LossTrace trace = state.trace;
  const int n_train = static_cast<int>(dataset.train.size());
  for (int epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
    Rng rng = base.derive(epoch_stream(cfg.branch, epoch));
    std::vector<int> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    for (int i = n_train - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);

    double epoch_abs_sum = 0.0;
    long epoch_count = 0;
    for (int start = 0; start < n_train; start += cfg.batch_size) {
      const int stop = std::min(n_train, start + cfg.batch_size);
      std::vector<BatchItem> batch;
      batch.reserve(stop - start);
      for (int bi = start; bi < stop; ++bi) {
        const int idx = order[bi];
        batch.push_back(to_batch_item(dataset.train[idx], targets[idx], cfg, s, rng));
      }
      const LossGrad lg = loss_and_grad(state.params, batch);
      if (!std::isfinite(lg.loss)) {
        throw CheckFailure("train_branch: loss diverged (non-finite) at epoch " +
                           std::to_string(epoch) + ", batch starting at " + std::to_string(start));
      }
      adam.update(state.params, lg.grads, cfg);
      epoch_abs_sum += lg.loss * static_cast<double>(batch.size()) * cfg.denoiser.n;
      epoch_count += static_cast<long>(batch.size()) * cfg.denoiser.n;
    }
    trace.train.push_back(epoch_abs_sum / static_cast<double>(epoch_count));

    double val_loss;
    if (val_items.empty()) {
      val_loss = trace.train.back();
    } else {
      val_loss = forward_only_loss(state.params, val_items);
    }
    if (!std::isfinite(val_loss)) {
      throw CheckFailure("train_branch: validation loss diverged at epoch " +
                         std::to_string(epoch));
    }
    trace.validation.push_back(val_loss);
    if (val_loss < best_val) {
      best_val = val_loss;
      best = state.params;
    }
  }

  state.epochs_done = std::max(state.epochs_done, cfg.epochs);
  state.adam_m = adam.m;
  state.adam_v = adam.v;
  state.adam_step = adam.step;
  state.trace = trace;

  TrainResult result;
  result.params = best;
  result.trace = trace;
  result.final_state = std::move(state);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "d4pm-checkpoint-v1";

void append_f32(std::string& blob, const Vec& data) {
  for (double v : data) {
    const std::uint32_t u = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    blob.push_back(static_cast<char>(u & 0xff));
    blob.push_back(static_cast<char>((u >> 8) & 0xff));
    blob.push_back(static_cast<char>((u >> 16) & 0xff));
    blob.push_back(static_cast<char>((u >> 24) & 0xff));
  }
}

json tensor_entry(const std::string& name, const Tensor& t, std::size_t offset_floats) {
  return {{"name", name}, {"shape", t.shape}, {"offset", offset_floats}, {"count", t.size()}};
}

json config_to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"learning_rate", cfg.learning_rate},
          {"adam_beta1", cfg.adam_beta1},
          {"adam_beta2", cfg.adam_beta2},
          {"adam_eps", cfg.adam_eps},
          {"seed", cfg.seed},
          {"perturb_with_continuous_level", cfg.perturb_with_continuous_level},
          {"denoiser",
           {{"n", cfg.denoiser.n},
            {"channels", cfg.denoiser.channels},
            {"encoder_blocks", cfg.denoiser.encoder_blocks},
            {"heads", cfg.denoiser.heads},
            {"film_embed_dim", cfg.denoiser.film_embed_dim},
            {"n_classes", cfg.denoiser.n_classes},
            {"use_class_embedding", cfg.denoiser.use_class_embedding}}}};
}

TrainConfig config_from_json(const json& j, Branch branch) {
  TrainConfig cfg;
  cfg.epochs = j.at("epochs").get<int>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.learning_rate = j.at("learning_rate").get<double>();
  cfg.adam_beta1 = j.at("adam_beta1").get<double>();
  cfg.adam_beta2 = j.at("adam_beta2").get<double>();
  cfg.adam_eps = j.at("adam_eps").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.perturb_with_continuous_level = j.at("perturb_with_continuous_level").get<bool>();
  const json& d = j.at("denoiser");
  cfg.denoiser.n = d.at("n").get<int>();
  cfg.denoiser.channels = d.at("channels").get<int>();
  cfg.denoiser.encoder_blocks = d.at("encoder_blocks").get<int>();
  cfg.denoiser.heads = d.at("heads").get<int>();
  cfg.denoiser.film_embed_dim = d.at("film_embed_dim").get<int>();
  cfg.denoiser.n_classes = d.at("n_classes").get<int>();
  cfg.denoiser.use_class_embedding = d.at("use_class_embedding").get<bool>();
  cfg.branch = branch;
  return cfg;
}

void read_tensor_f32(const std::string& blob, std::size_t offset_floats, Vec& dst) {
  const std::size_t byte_off = offset_floats * 4;
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const unsigned char* b =
        reinterpret_cast<const unsigned char*>(blob.data() + byte_off + 4 * i);
    const std::uint32_t u = static_cast<std::uint32_t>(b[0]) |
                            (static_cast<std::uint32_t>(b[1]) << 8) |
                            (static_cast<std::uint32_t>(b[2]) << 16) |
                            (static_cast<std::uint32_t>(b[3]) << 24);
    dst[i] = std::bit_cast<float>(u);
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["branch"] = to_string(data.cfg.branch);
  manifest["epochs_done"] = data.epochs_done;
  manifest["config"] = config_to_json(data.cfg);
  manifest["schedule"] = {{"T", data.schedule.T},
                          {"beta_start", data.schedule.beta_start},
                          {"beta_end", data.schedule.beta_end}};
  manifest["loss_trace"] = {{"train", data.trace.train}, {"validation", data.trace.validation}};

  std::string blob;
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& t : data.params.tensors) {
    tensors.push_back(tensor_entry(t.name, t.tensor, offset));
    append_f32(blob, t.tensor.data);
    offset += t.tensor.size();
  }
  manifest["has_resume_state"] = data.resume_state.has_value();
  if (data.resume_state) {
    const TrainState& st = *data.resume_state;
    manifest["adam_step"] = st.adam_step;
    for (std::size_t i = 0; i < st.params.tensors.size(); ++i) {
      const auto& t = st.params.tensors[i];
      tensors.push_back(tensor_entry("resume.param." + t.name, t.tensor, offset));
      append_f32(blob, t.tensor.data);
      offset += t.tensor.size();
      Tensor moment;
      moment.shape = t.tensor.shape;
      moment.data = st.adam_m[i];
      tensors.push_back(tensor_entry("resume.adam_m." + t.name, moment, offset));
      append_f32(blob, moment.data);
      offset += moment.size();
      moment.data = st.adam_v[i];
      tensors.push_back(tensor_entry("resume.adam_v." + t.name, moment, offset));
      append_f32(blob, moment.data);
      offset += moment.size();
    }
  }
  manifest["tensors"] = std::move(tensors);
  manifest["total_floats"] = offset;

  std::ofstream ms(path.string() + ".json");
  if (!ms) throw IoError("save_checkpoint: cannot open '" + path.string() + ".json'");
  ms << manifest.dump(2) << "\n";
  if (!ms) throw IoError("save_checkpoint: failed writing manifest");
  std::ofstream bs(path, std::ios::binary);
  if (!bs) throw IoError("save_checkpoint: cannot open '" + path.string() + "'");
  bs.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!bs) throw IoError("save_checkpoint: failed writing tensor payload");
}

namespace {

struct TensorTable {
  struct Entry {
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t count = 0;
  };
  std::map<std::string, Entry> entries;

  const Entry& require(const std::string& name) const {
    const auto it = entries.find(name);
    if (it == entries.end()) throw IoError("load_checkpoint: missing tensor key '" + name + "'");
    return it->second;
  }
};

void load_params_from_blob(const std::string& blob, const TensorTable& table,
                           const std::string& prefix, DenoiserParams& params) {
  for (auto& t : params.tensors) {
    const auto& e = table.require(prefix + t.name);
    if (e.shape != t.tensor.shape) {
      throw IoError("load_checkpoint: shape mismatch for tensor '" + prefix + t.name + "'");
    }
    if (e.count != t.tensor.size()) {
      throw IoError("load_checkpoint: count mismatch for tensor '" + prefix + t.name + "'");
    }
    read_tensor_f32(blob, e.offset, t.tensor.data);
  }
}

}  // namespace

CheckpointData load_checkpoint(const std::filesystem::path& path,
                               std::optional<Branch> expected_branch) {
  std::ifstream ms(path.string() + ".json");
  if (!ms) throw IoError("load_checkpoint: missing manifest '" + path.string() + ".json'");
  json manifest;
  try {
    ms >> manifest;
  } catch (const json::exception& e) {
    throw IoError(std::string("load_checkpoint: malformed manifest: ") + e.what());
  }

  CheckpointData data;
  try {
    const std::string format = manifest.at("format").get<std::string>();
    if (format != kCheckpointFormat) {
      throw IoError("load_checkpoint: version mismatch, got '" + format + "', expected '" +
                    kCheckpointFormat + "'");
    }
    const Branch branch = branch_from_string(manifest.at("branch").get<std::string>());
    if (expected_branch && branch != *expected_branch) {
      throw ConfigError(std::string("load_checkpoint: manifest branch is ") + to_string(branch) +
                        " but " + to_string(*expected_branch) + " was expected");
    }
    data.cfg = config_from_json(manifest.at("config"), branch);
    data.epochs_done = manifest.at("epochs_done").get<int>();
    data.schedule = make_schedule(manifest.at("schedule").at("T").get<int>(),
                                  manifest.at("schedule").at("beta_start").get<double>(),
                                  manifest.at("schedule").at("beta_end").get<double>());
    data.trace.train = manifest.at("loss_trace").at("train").get<std::vector<double>>();
    data.trace.validation =
        manifest.at("loss_trace").at("validation").get<std::vector<double>>();

    TensorTable table;
    std::size_t total_floats = manifest.at("total_floats").get<std::size_t>();
    for (const auto& jt : manifest.at("tensors")) {
      TensorTable::Entry e;
      e.shape = jt.at("shape").get<std::vector<int>>();
      e.offset = jt.at("offset").get<std::size_t>();
      e.count = jt.at("count").get<std::size_t>();
      if (e.offset + e.count > total_floats) {
        throw IoError("load_checkpoint: tensor '" + jt.at("name").get<std::string>() +
                      "' exceeds payload bounds");
      }
      table.entries[jt.at("name").get<std::string>()] = std::move(e);
    }

    std::ifstream bs(path, std::ios::binary);
    if (!bs) throw IoError("load_checkpoint: missing payload '" + path.string() + "'");
    std::string blob((std::istreambuf_iterator<char>(bs)), std::istreambuf_iterator<char>());
    if (blob.size() != total_floats * 4) {
      throw IoError("load_checkpoint: payload size mismatch for '" + path.string() +
                    "': expected " + std::to_string(total_floats * 4) + " bytes, got " +
                    std::to_string(blob.size()));
    }

    data.params = init_params(data.cfg.denoiser, 0);
    load_params_from_blob(blob, table, "", data.params);

    if (manifest.at("has_resume_state").get<bool>()) {
      TrainState st;
      st.params = init_params(data.cfg.denoiser, 0);
      load_params_from_blob(blob, table, "resume.param.", st.params);
      st.adam_m.resize(st.params.tensors.size());
      st.adam_v.resize(st.params.tensors.size());
      for (std::size_t i = 0; i < st.params.tensors.size(); ++i) {
        const auto& t = st.params.tensors[i];
        st.adam_m[i].assign(t.tensor.size(), 0.0);
        st.adam_v[i].assign(t.tensor.size(), 0.0);
        const auto& em = table.require("resume.adam_m." + t.name);
        const auto& ev = table.require("resume.adam_v." + t.name);
        if (em.count != t.tensor.size() || ev.count != t.tensor.size()) {
          throw IoError("load_checkpoint: adam moment size mismatch for '" + t.name + "'");
        }
        read_tensor_f32(blob, em.offset, st.adam_m[i]);
        read_tensor_f32(blob, ev.offset, st.adam_v[i]);
      }
      st.adam_step = manifest.at("adam_step").get<long>();
      st.epochs_done = data.epochs_done;
      st.trace = data.trace;
      data.resume_state = std::move(st);
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("load_checkpoint: malformed manifest: ") + e.what());
  }
  return data;
}

}  // namespace d4pm
