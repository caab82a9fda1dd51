#include "d4pm/signals.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "d4pm/rng.hpp"

namespace d4pm {

using nlohmann::json;

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

void normalize_rms(Vec& v) {
  double ms = 0.0;
  for (double x : v) ms += x * x;
  ms = std::sqrt(ms / static_cast<double>(v.size()));
  if (ms < 1e-12) return;
  for (double& x : v) x /= ms;
}

Vec gen_clean(int n, double fs, Rng& rng) {
  Vec x(n, 0.0);
  const int k = rng.uniform_int(3, 6);
  for (int s = 0; s < k; ++s) {
    const double f = rng.uniform(1.0, 30.0);
    const double ph = rng.uniform(0.0, kTwoPi);
    const double a = rng.uniform(0.5, 1.0);
    for (int i = 0; i < n; ++i) x[i] += a * std::sin(kTwoPi * f * i / fs + ph);
  }
  // 1/f-shaped noise by direct spectral synthesis over the DFT grid
  Vec pink(n, 0.0);
  for (int bin = 1; bin <= n / 2; ++bin) {
    const double f = bin * fs / n;
    const double g = rng.normal() / std::sqrt(f);
    const double ph = rng.uniform(0.0, kTwoPi);
    for (int i = 0; i < n; ++i) pink[i] += g * std::cos(kTwoPi * bin * i / n + ph);
  }
  normalize_rms(pink);
  for (int i = 0; i < n; ++i) x[i] += 0.3 * pink[i];
  normalize_rms(x);
  return x;
}

Vec gen_eog(int n, double fs, Rng& rng) {
  Vec x(n, 0.0);
  const double dur = n / fs;
  const int bursts = rng.uniform_int(1, 2);
  for (int b = 0; b < bursts; ++b) {
    const double f = rng.uniform(0.2, 2.5);
    const double ph = rng.uniform(0.0, kTwoPi);
    const double center = rng.uniform(0.0, dur);
    const double width = rng.uniform(0.2, 0.6);
    const double a = rng.uniform(0.5, 1.0);
    for (int i = 0; i < n; ++i) {
      const double t = i / fs;
      const double env = std::exp(-0.5 * ((t - center) / width) * ((t - center) / width));
      x[i] += a * env * std::sin(kTwoPi * f * t + ph);
    }
  }
  normalize_rms(x);
  return x;
}

Vec gen_emg(int n, double fs, Rng& rng) {
  // band-limited noise strictly above 20 Hz on the DFT grid
  Vec x(n, 0.0);
  for (int bin = 1; bin <= n / 2; ++bin) {
    const double f = bin * fs / n;
    if (f < 20.0) continue;
    const double g = rng.normal();
    const double ph = rng.uniform(0.0, kTwoPi);
    for (int i = 0; i < n; ++i) x[i] += g * std::cos(kTwoPi * bin * i / n + ph);
  }
  // random on/off gating with a small leak on the off runs
  Vec gate(n, 0.0);
  bool on = rng.uniform() < 0.5;
  int i = 0;
  bool any_on = false;
  while (i < n) {
    const int run = rng.uniform_int(8, 24);
    for (int j = i; j < std::min(n, i + run); ++j) gate[j] = on ? 1.0 : 0.0;
    any_on = any_on || on;
    on = !on;
    i += run;
  }
  if (!any_on) std::fill(gate.begin(), gate.end(), 1.0);
  for (int j = 0; j < n; ++j) x[j] *= 0.15 + gate[j];
  normalize_rms(x);
  return x;
}

Vec ecg_template(double fs) {
  const double scale = fs / 128.0;
  const int len = std::max(8, static_cast<int>(std::lround(16.0 * scale)));
  Vec tpl(len);
  for (int j = 0; j < len; ++j) {
    const double tt = (j - len / 3.0) / scale;
    tpl[j] = 1.2 * std::exp(-0.5 * (tt / 1.2) * (tt / 1.2)) -
             0.35 * std::exp(-0.5 * ((tt - 3.0) / 2.5) * ((tt - 3.0) / 2.5));
  }
  return tpl;
}

Vec gen_ecg(int n, double fs, Rng& rng) {
  Vec x(n, 0.0);
  const Vec tpl = ecg_template(fs);
  const int period = std::max(8, static_cast<int>(std::lround(0.75 * fs)));
  const int jitter = std::max(1, static_cast<int>(std::lround(0.05 * fs)));
  int pos = -rng.uniform_int(0, period - 1);
  while (pos < n) {
    const int p = pos + rng.uniform_int(-jitter, jitter);
    for (std::size_t j = 0; j < tpl.size(); ++j) {
      const int idx = p + static_cast<int>(j);
      if (idx >= 0 && idx < n) x[idx] += tpl[j];
    }
    pos += period;
  }
  double ms = 0.0;
  for (double v : x) ms += v * v;
  if (ms < 1e-18) x[n / 2] = 1.0;  // beat landed entirely outside the window
  normalize_rms(x);
  return x;
}

double snr_db_of(const Vec& x, const Vec& xp, double lambda) {
  const double ex = sum_squares(x);
  const double ea = lambda * lambda * sum_squares(xp);
  return 10.0 * std::log10(ex / ea);
}

void write_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32_le(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

const char* to_string(SignalClass c) {
  switch (c) {
    case SignalClass::kClean: return "CLEAN";
    case SignalClass::kEog: return "EOG";
    case SignalClass::kEmg: return "EMG";
    case SignalClass::kEcg: return "ECG";
  }
  return "?";
}

SignalClass signal_class_from_string(const std::string& name) {
  if (name == "CLEAN") return SignalClass::kClean;
  if (name == "EOG") return SignalClass::kEog;
  if (name == "EMG") return SignalClass::kEmg;
  if (name == "ECG") return SignalClass::kEcg;
  throw ConfigError("unknown signal class '" + name + "'");
}

int artifact_class_index(SignalClass c) {
  switch (c) {
    case SignalClass::kEog: return 0;
    case SignalClass::kEmg: return 1;
    case SignalClass::kEcg: return 2;
    default: throw ConfigError("CLEAN is not an artifact class");
  }
}

double lambda_for_snr(const Segment& x, const Segment& xp, double snr_db) {
  const double nx = l2_norm(x.samples);
  const double na = l2_norm(xp.samples);
  if (nx <= 0.0) throw ConfigError("lambda_for_snr: zero-energy clean signal");
  if (na <= 0.0) throw ConfigError("lambda_for_snr: zero-energy artifact signal");
  return (nx / na) * std::pow(10.0, -snr_db / 20.0);
}

MixedExample mix(const Segment& x, const Segment& xp, double lambda_snr) {
  if (x.samples.size() != xp.samples.size()) {
    throw ConfigError("mix: length mismatch (" + std::to_string(x.samples.size()) +
                      " vs " + std::to_string(xp.samples.size()) + ")");
  }
  if (!(lambda_snr > 0.0) || !std::isfinite(lambda_snr)) {
    throw ConfigError("mix: lambda_snr must be positive and finite");
  }
  if (!all_finite(x.samples) || !all_finite(xp.samples)) {
    throw ConfigError("mix: non-finite input samples");
  }
  if (sum_squares(x.samples) == 0.0 || sum_squares(xp.samples) == 0.0) {
    throw ConfigError("mix: zero-energy input; SNR undefined");
  }
  MixedExample ex;
  ex.clean = x;
  ex.artifact = xp;
  ex.lambda_snr = lambda_snr;
  ex.mixture.samples.resize(x.samples.size());
  for (std::size_t i = 0; i < x.samples.size(); ++i) {
    ex.mixture.samples[i] = x.samples[i] + lambda_snr * xp.samples[i];
  }
  ex.mixture.label = xp.label;
  ex.mixture.sample_rate_hz = x.sample_rate_hz;
  ex.target_snr_db = snr_db_of(x.samples, xp.samples, lambda_snr);
  return ex;
}

std::vector<Segment> generate_synthetic(SignalClass cls, int count, int n,
                                        std::uint64_t seed, double sample_rate_hz) {
  if (count < 1) throw ConfigError("generate_synthetic: count must be >= 1");
  if (n < 8) throw ConfigError("generate_synthetic: segment length must be >= 8");
  if (!(sample_rate_hz > 0.0)) throw ConfigError("generate_synthetic: sample rate must be positive");
  const Rng root(seed);
  std::vector<Segment> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng = root.derive(static_cast<std::uint64_t>(i));
    Segment seg;
    seg.label = cls;
    seg.sample_rate_hz = sample_rate_hz;
    switch (cls) {
      case SignalClass::kClean: seg.samples = gen_clean(n, sample_rate_hz, rng); break;
      case SignalClass::kEog: seg.samples = gen_eog(n, sample_rate_hz, rng); break;
      case SignalClass::kEmg: seg.samples = gen_emg(n, sample_rate_hz, rng); break;
      case SignalClass::kEcg: seg.samples = gen_ecg(n, sample_rate_hz, rng); break;
      default: throw ConfigError("generate_synthetic: unknown class");
    }
    out.push_back(std::move(seg));
  }
  return out;
}

DatasetSplit build_mixed_dataset(const std::vector<Segment>& clean,
                                 const std::map<SignalClass, std::vector<Segment>>& artifacts_by_class,
                                 double snr_min_db, double snr_max_db,
                                 std::uint64_t pairing_seed,
                                 std::vector<PairRecord>* records) {
  if (clean.empty()) throw ConfigError("build_mixed_dataset: empty clean pool");
  if (artifacts_by_class.empty()) throw ConfigError("build_mixed_dataset: no artifact pools");
  for (const auto& [cls, pool] : artifacts_by_class) {
    if (pool.empty()) {
      throw ConfigError(std::string("build_mixed_dataset: empty pool for ") + to_string(cls));
    }
    artifact_class_index(cls);  // rejects kClean
  }
  if (!(snr_min_db <= snr_max_db) || !std::isfinite(snr_min_db) || !std::isfinite(snr_max_db)) {
    throw ConfigError("build_mixed_dataset: invalid SNR range");
  }

  Rng rng(pairing_seed);
  const int n_clean = static_cast<int>(clean.size());
  std::vector<int> perm(n_clean);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n_clean - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);

  struct Pending {
    MixedExample ex;
    PairRecord rec;
  };
  std::vector<Pending> pairs;
  int cursor = 0;
  for (const auto& [cls, pool] : artifacts_by_class) {
    const bool with_replacement = cls == SignalClass::kEmg;
    for (int ai = 0; ai < static_cast<int>(pool.size()); ++ai) {
      int ci;
      if (with_replacement) {
        ci = perm[rng.uniform_int(0, n_clean - 1)];
      } else {
        if (cursor >= n_clean) {
          throw ConfigError("build_mixed_dataset: clean pool exhausted; need more clean "
                            "segments for pairing without replacement");
        }
        ci = perm[cursor++];
      }
      const double snr = rng.uniform(snr_min_db, snr_max_db);
      const double lambda = lambda_for_snr(clean[ci], pool[ai], snr);
      Pending p;
      p.ex = mix(clean[ci], pool[ai], lambda);
      p.rec = PairRecord{ci, cls, ai, lambda, snr, 0};
      pairs.push_back(std::move(p));
    }
  }

  const int m = static_cast<int>(pairs.size());
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  for (int i = m - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);

  // largest-remainder split sizes for (0.8, 0.1, 0.1)
  const double fr[3] = {0.8, 0.1, 0.1};
  int sizes[3];
  double rem[3];
  int assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = fr[k] * m;
    sizes[k] = static_cast<int>(std::floor(exact));
    rem[k] = exact - sizes[k];
    assigned += sizes[k];
  }
  while (assigned < m) {
    int best = 0;
    for (int k = 1; k < 3; ++k) {
      if (rem[k] > rem[best]) best = k;
    }
    ++sizes[best];
    rem[best] = -1.0;
    ++assigned;
  }

  DatasetSplit split;
  for (int pos = 0; pos < m; ++pos) {
    const int pi = order[pos];
    const int bucket = pos < sizes[0] ? 0 : (pos < sizes[0] + sizes[1] ? 1 : 2);
    pairs[pi].rec.split = bucket;
  }
  for (auto& p : pairs) {
    auto& dst = p.rec.split == 0 ? split.train : (p.rec.split == 1 ? split.validation : split.test);
    dst.push_back(std::move(p.ex));
    if (records) records->push_back(p.rec);
  }
  return split;
}

void save_segments(const std::filesystem::path& path, const std::vector<Segment>& segments) {
  std::size_t n = segments.empty() ? 0 : segments.front().samples.size();
  for (const auto& s : segments) {
    if (s.samples.size() != n) throw ConfigError("save_segments: segments differ in length");
    if (s.label != segments.front().label) {
      throw ConfigError("save_segments: segments differ in class");
    }
    if (!all_finite(s.samples)) throw ConfigError("save_segments: non-finite samples");
  }
  json header;
  header["format"] = "d4pm-segments-v1";
  header["n_segments"] = segments.size();
  header["length"] = n;
  header["sample_rate_hz"] = segments.empty() ? kDefaultSampleRateHz : segments.front().sample_rate_hz;
  header["class"] = to_string(segments.empty() ? SignalClass::kClean : segments.front().label);

  std::ofstream hs(path.string() + ".json");
  if (!hs) throw IoError("save_segments: cannot open '" + path.string() + ".json' for writing");
  hs << header.dump(2) << "\n";
  if (!hs) throw IoError("save_segments: failed writing header for '" + path.string() + "'");

  std::ofstream bs(path, std::ios::binary);
  if (!bs) throw IoError("save_segments: cannot open '" + path.string() + "' for writing");
  for (const auto& s : segments) {
    for (double v : s.samples) {
      write_u32_le(bs, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  if (!bs) throw IoError("save_segments: failed writing payload for '" + path.string() + "'");
}

std::vector<Segment> load_segments(const std::filesystem::path& path) {
  std::ifstream hs(path.string() + ".json");
  if (!hs) throw IoError("load_segments: missing header '" + path.string() + ".json'");
  json header;
  try {
    hs >> header;
  } catch (const json::exception& e) {
    throw IoError("load_segments: malformed header '" + path.string() + ".json': " + e.what());
  }
  std::size_t count = 0, length = 0;
  double fs = 0.0;
  SignalClass cls;
  try {
    if (header.at("format").get<std::string>() != "d4pm-segments-v1") {
      throw IoError("load_segments: unsupported format '" +
                    header.at("format").get<std::string>() + "'");
    }
    count = header.at("n_segments").get<std::size_t>();
    length = header.at("length").get<std::size_t>();
    fs = header.at("sample_rate_hz").get<double>();
    cls = signal_class_from_string(header.at("class").get<std::string>());
  } catch (const json::exception& e) {
    throw IoError("load_segments: malformed header '" + path.string() + ".json': " + e.what());
  }

  std::ifstream bs(path, std::ios::binary);
  if (!bs) throw IoError("load_segments: missing payload '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bs)),
                                   std::istreambuf_iterator<char>());
  const std::size_t expected = 4 * count * length;
  if (bytes.size() != expected) {
    throw IoError("load_segments: payload size mismatch for '" + path.string() + "': expected " +
                  std::to_string(expected) + " bytes, got " + std::to_string(bytes.size()));
  }
  std::vector<Segment> out(count);
  std::size_t off = 0;
  for (std::size_t k = 0; k < count; ++k) {
    out[k].label = cls;
    out[k].sample_rate_hz = fs;
    out[k].samples.resize(length);
    for (std::size_t i = 0; i < length; ++i, off += 4) {
      const float f = std::bit_cast<float>(read_u32_le(bytes.data() + off));
      if (!std::isfinite(f)) {
        throw IoError("load_segments: non-finite sample in '" + path.string() + "'");
      }
      out[k].samples[i] = f;
    }
  }
  return out;
}

namespace {

const char* pool_file(SignalClass c) {
  switch (c) {
    case SignalClass::kClean: return "clean.seg";
    case SignalClass::kEog: return "eog.seg";
    case SignalClass::kEmg: return "emg.seg";
    case SignalClass::kEcg: return "ecg.seg";
  }
  return "?";
}

}  // namespace

void write_dataset_dir(const std::filesystem::path& dir, const DatasetDir& d) {
  if (!std::filesystem::is_directory(dir)) {
    throw IoError("write_dataset_dir: output directory '" + dir.string() + "' does not exist");
  }
  save_segments(dir / pool_file(SignalClass::kClean), d.clean);
  for (const auto& [cls, pool] : d.artifacts) save_segments(dir / pool_file(cls), pool);

  json m;
  m["format"] = "d4pm-dataset-v1";
  m["seed"] = d.seed;
  m["snr_min_db"] = d.snr_min_db;
  m["snr_max_db"] = d.snr_max_db;
  json pairs = json::array();
  for (const auto& p : d.pairs) {
    pairs.push_back({{"clean_index", p.clean_index},
                     {"artifact_class", to_string(p.artifact_class)},
                     {"artifact_index", p.artifact_index},
                     {"lambda_snr", p.lambda_snr},
                     {"snr_db", p.snr_db},
                     {"split", p.split}});
  }
  m["pairs"] = std::move(pairs);
  std::ofstream os(dir / "dataset.json");
  if (!os) throw IoError("write_dataset_dir: cannot write '" + (dir / "dataset.json").string() + "'");
  os << m.dump(2) << "\n";
  if (!os) throw IoError("write_dataset_dir: failed writing dataset manifest");
}

DatasetDir read_dataset_dir(const std::filesystem::path& dir) {
  DatasetDir d;
  std::ifstream is(dir / "dataset.json");
  if (!is) throw IoError("read_dataset_dir: missing '" + (dir / "dataset.json").string() + "'");
  json m;
  try {
    is >> m;
    if (m.at("format").get<std::string>() != "d4pm-dataset-v1") {
      throw IoError("read_dataset_dir: unsupported dataset format");
    }
    d.seed = m.at("seed").get<std::uint64_t>();
    d.snr_min_db = m.at("snr_min_db").get<double>();
    d.snr_max_db = m.at("snr_max_db").get<double>();
    d.clean = load_segments(dir / pool_file(SignalClass::kClean));
    for (SignalClass cls : {SignalClass::kEog, SignalClass::kEmg, SignalClass::kEcg}) {
      if (std::filesystem::exists(dir / pool_file(cls))) {
        d.artifacts[cls] = load_segments(dir / pool_file(cls));
      }
    }
    for (const auto& jp : m.at("pairs")) {
      PairRecord p;
      p.clean_index = jp.at("clean_index").get<int>();
      p.artifact_class = signal_class_from_string(jp.at("artifact_class").get<std::string>());
      p.artifact_index = jp.at("artifact_index").get<int>();
      p.lambda_snr = jp.at("lambda_snr").get<double>();
      p.snr_db = jp.at("snr_db").get<double>();
      p.split = jp.at("split").get<int>();
      d.pairs.push_back(p);
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("read_dataset_dir: malformed dataset manifest: ") + e.what());
  }

  for (const auto& p : d.pairs) {
    const auto it = d.artifacts.find(p.artifact_class);
    if (it == d.artifacts.end() || p.artifact_index < 0 ||
        p.artifact_index >= static_cast<int>(it->second.size()) || p.clean_index < 0 ||
        p.clean_index >= static_cast<int>(d.clean.size()) || p.split < 0 || p.split > 2) {
      throw IoError("read_dataset_dir: pair record out of range");
    }
    MixedExample ex = mix(d.clean[p.clean_index], it->second[p.artifact_index], p.lambda_snr);
    auto& dst = p.split == 0   ? d.split.train
                : p.split == 1 ? d.split.validation
                               : d.split.test;
    dst.push_back(std::move(ex));
  }
  return d;
}

}  // namespace d4pm
