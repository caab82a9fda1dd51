#include "d4pm/denoiser.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "d4pm/rng.hpp"

namespace d4pm {

namespace {

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

inline double sign_or_zero(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// ---------------------------------------------------------------------------
// Parameter layout. Feature maps are row-major [C][N].
// ---------------------------------------------------------------------------

struct EncSlots {
  int ln1_g, ln1_b;
  int wq, bq, wk, bk, wv, bv, wo, bo;
  int ln2_g, ln2_b;
  int w1, b1, w2, b2;
};

struct PathSlots {
  int conv1_w, conv1_b, conv2_w, conv2_b, pos;
  std::vector<EncSlots> enc;
};

struct Slots {
  PathSlots a, b;
  int mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  int class_embed;  // -1 when class embedding disabled
  std::vector<std::array<int, 4>> sites;  // gamma_w, gamma_b, xi_w, xi_b
  int fuse_w, fuse_b, out_w, out_b;
};

int must_find(const DenoiserParams& p, const std::string& name) {
  const int i = p.index_of(name);
  if (i < 0) throw ConfigError("denoiser: missing tensor '" + name + "'");
  return i;
}

PathSlots resolve_path(const DenoiserParams& p, const std::string& prefix, int blocks) {
  PathSlots s;
  s.conv1_w = must_find(p, prefix + ".conv1.weight");
  s.conv1_b = must_find(p, prefix + ".conv1.bias");
  s.conv2_w = must_find(p, prefix + ".conv2.weight");
  s.conv2_b = must_find(p, prefix + ".conv2.bias");
  s.pos = must_find(p, prefix + ".pos_bias");
  for (int e = 0; e < blocks; ++e) {
    const std::string ep = prefix + ".enc" + std::to_string(e);
    EncSlots es;
    es.ln1_g = must_find(p, ep + ".ln1.gain");
    es.ln1_b = must_find(p, ep + ".ln1.bias");
    es.wq = must_find(p, ep + ".attn.wq");
    es.bq = must_find(p, ep + ".attn.bq");
    es.wk = must_find(p, ep + ".attn.wk");
    es.bk = must_find(p, ep + ".attn.bk");
    es.wv = must_find(p, ep + ".attn.wv");
    es.bv = must_find(p, ep + ".attn.bv");
    es.wo = must_find(p, ep + ".attn.wo");
    es.bo = must_find(p, ep + ".attn.bo");
    es.ln2_g = must_find(p, ep + ".ln2.gain");
    es.ln2_b = must_find(p, ep + ".ln2.bias");
    es.w1 = must_find(p, ep + ".ffn.w1");
    es.b1 = must_find(p, ep + ".ffn.b1");
    es.w2 = must_find(p, ep + ".ffn.w2");
    es.b2 = must_find(p, ep + ".ffn.b2");
    s.enc.push_back(es);
  }
  return s;
}

Slots resolve(const DenoiserParams& p) {
  const int blocks = p.cfg.encoder_blocks;
  Slots s;
  s.a = resolve_path(p, "path_a", blocks);
  s.b = resolve_path(p, "path_b", blocks);
  s.mlp_w1 = must_find(p, "film.level_mlp.w1");
  s.mlp_b1 = must_find(p, "film.level_mlp.b1");
  s.mlp_w2 = must_find(p, "film.level_mlp.w2");
  s.mlp_b2 = must_find(p, "film.level_mlp.b2");
  s.class_embed = p.cfg.use_class_embedding ? must_find(p, "film.class_embed") : -1;
  const int n_sites = 2 * (blocks + 1);
  for (int i = 0; i < n_sites; ++i) {
    const std::string sp = "film.site" + std::to_string(i);
    s.sites.push_back({must_find(p, sp + ".gamma.weight"), must_find(p, sp + ".gamma.bias"),
                       must_find(p, sp + ".xi.weight"), must_find(p, sp + ".xi.bias")});
  }
  s.fuse_w = must_find(p, "fuse.weight");
  s.fuse_b = must_find(p, "fuse.bias");
  s.out_w = must_find(p, "out.weight");
  s.out_b = must_find(p, "out.bias");
  return s;
}

constexpr int kKernel = 5;
constexpr int kPad = kKernel / 2;
constexpr double kLnEps = 1e-5;

// out[Cout][N] = conv(in[Cin][N]) with zero padding
void conv1d(const Vec& in, int c_in, const Vec& w, const Vec& b, int c_out, int n, Vec& out) {
  out.assign(static_cast<std::size_t>(c_out) * n, 0.0);
  for (int o = 0; o < c_out; ++o) {
    double* orow = &out[static_cast<std::size_t>(o) * n];
    for (int i = 0; i < n; ++i) orow[i] = b[o];
    for (int c = 0; c < c_in; ++c) {
      const double* irow = &in[static_cast<std::size_t>(c) * n];
      const double* wrow = &w[(static_cast<std::size_t>(o) * c_in + c) * kKernel];
      for (int j = 0; j < kKernel; ++j) {
        const double wv = wrow[j];
        const int lo = std::max(0, kPad - j);
        const int hi = std::min(n, n + kPad - j);
        for (int i = lo; i < hi; ++i) orow[i] += wv * irow[i + j - kPad];
      }
    }
  }
}

void conv1d_backward(const Vec& in, int c_in, const Vec& w, int c_out, int n, const Vec& gout,
                     Vec& gw, Vec& gb, Vec* gin) {
  for (int o = 0; o < c_out; ++o) {
    const double* grow = &gout[static_cast<std::size_t>(o) * n];
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += grow[i];
    gb[o] += acc;
    for (int c = 0; c < c_in; ++c) {
      const double* irow = &in[static_cast<std::size_t>(c) * n];
      double* gwrow = &gw[(static_cast<std::size_t>(o) * c_in + c) * kKernel];
      for (int j = 0; j < kKernel; ++j) {
        const int lo = std::max(0, kPad - j);
        const int hi = std::min(n, n + kPad - j);
        double s = 0.0;
        for (int i = lo; i < hi; ++i) s += grow[i] * irow[i + j - kPad];
        gwrow[j] += s;
      }
      if (gin) {
        double* girow = &(*gin)[static_cast<std::size_t>(c) * n];
        const double* wrow = &w[(static_cast<std::size_t>(o) * c_in + c) * kKernel];
        for (int j = 0; j < kKernel; ++j) {
          const double wv = wrow[j];
          const int lo = std::max(0, kPad - j);
          const int hi = std::min(n, n + kPad - j);
          for (int i = lo; i < hi; ++i) girow[i + j - kPad] += wv * grow[i];
        }
      }
    }
  }
}

// out[R][N] = w[R][C] * in[C][N] + b
void project(const Vec& in, int c, const Vec& w, const Vec& b, int r, int n, Vec& out) {
  out.assign(static_cast<std::size_t>(r) * n, 0.0);
  for (int o = 0; o < r; ++o) {
    double* orow = &out[static_cast<std::size_t>(o) * n];
    for (int i = 0; i < n; ++i) orow[i] = b[o];
    const double* wrow = &w[static_cast<std::size_t>(o) * c];
    for (int cc = 0; cc < c; ++cc) {
      const double wv = wrow[cc];
      if (wv == 0.0) continue;
      const double* irow = &in[static_cast<std::size_t>(cc) * n];
      for (int i = 0; i < n; ++i) orow[i] += wv * irow[i];
    }
  }
}

void project_backward(const Vec& in, int c, const Vec& w, int r, int n, const Vec& gout,
                      Vec& gw, Vec& gb, Vec* gin) {
  for (int o = 0; o < r; ++o) {
    const double* grow = &gout[static_cast<std::size_t>(o) * n];
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += grow[i];
    gb[o] += acc;
    double* gwrow = &gw[static_cast<std::size_t>(o) * c];
    const double* wrow = &w[static_cast<std::size_t>(o) * c];
    for (int cc = 0; cc < c; ++cc) {
      const double* irow = &in[static_cast<std::size_t>(cc) * n];
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += grow[i] * irow[i];
      gwrow[cc] += s;
      if (gin) {
        double* girow = &(*gin)[static_cast<std::size_t>(cc) * n];
        const double wv = wrow[cc];
        for (int i = 0; i < n; ++i) girow[i] += wv * grow[i];
      }
    }
  }
}

// Layer norm over channels at each time position.
void layer_norm(const Vec& in, int c, int n, const Vec& gain, const Vec& bias, Vec& out,
                Vec& mu, Vec& inv) {
  out.resize(static_cast<std::size_t>(c) * n);
  mu.resize(n);
  inv.resize(n);
  for (int i = 0; i < n; ++i) {
    double m = 0.0;
    for (int cc = 0; cc < c; ++cc) m += in[static_cast<std::size_t>(cc) * n + i];
    m /= c;
    double v = 0.0;
    for (int cc = 0; cc < c; ++cc) {
      const double d = in[static_cast<std::size_t>(cc) * n + i] - m;
      v += d * d;
    }
    v /= c;
    const double iv = 1.0 / std::sqrt(v + kLnEps);
    mu[i] = m;
    inv[i] = iv;
    for (int cc = 0; cc < c; ++cc) {
      const std::size_t idx = static_cast<std::size_t>(cc) * n + i;
      out[idx] = gain[cc] * ((in[idx] - m) * iv) + bias[cc];
    }
  }
}

void layer_norm_backward(const Vec& in, int c, int n, const Vec& gain, const Vec& mu,
                         const Vec& inv, const Vec& gout, Vec& ggain, Vec& gbias, Vec& gin) {
  for (int i = 0; i < n; ++i) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (int cc = 0; cc < c; ++cc) {
      const std::size_t idx = static_cast<std::size_t>(cc) * n + i;
      const double xhat = (in[idx] - mu[i]) * inv[i];
      const double g = gout[idx];
      ggain[cc] += g * xhat;
      gbias[cc] += g;
      const double dxhat = g * gain[cc];
      mean_dxhat += dxhat;
      mean_dxhat_xhat += dxhat * xhat;
    }
    mean_dxhat /= c;
    mean_dxhat_xhat /= c;
    for (int cc = 0; cc < c; ++cc) {
      const std::size_t idx = static_cast<std::size_t>(cc) * n + i;
      const double xhat = (in[idx] - mu[i]) * inv[i];
      const double dxhat = gout[idx] * gain[cc];
      gin[idx] += inv[i] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
  }
}

// ---------------------------------------------------------------------------
// Forward caches
// ---------------------------------------------------------------------------

struct FilmCache {
  Vec se, u1, a1, u2, hcond;
  std::vector<FilmSite> sites;
};

struct EncCache {
  Vec h_in;                 // [C][N]
  Vec ln1_mu, ln1_inv, t1;  // t1 = normed [C][N]
  Vec q, k, v;              // [C][N]
  Vec probs;                // [H][N][N]
  Vec attn_cat;             // [C][N], pre-output-projection
  Vec h_mid;                // after attention residual
  Vec ln2_mu, ln2_inv, t2;
  Vec ffn_pre;              // [2C][N]
  Vec h_out;                // after ffn residual (input of the block's film site)
};

struct PathCache {
  Vec conv1_pre, act1, conv2_pre, h0;  // h0 = silu(conv2_pre) + pos (film-site input)
  std::vector<EncCache> enc;
  Vec h_final;  // after last film site
};

struct Cache {
  FilmCache film;
  PathCache pa, pb;
  Vec cat;       // [2C][N]
  Vec fuse_pre;  // [C][N]
  Vec fused;     // silu(fuse_pre)
  Vec eps;       // [N]
};

Vec sinusoidal_embedding(double level, int dim) {
  const int half = dim / 2;
  Vec se(dim);
  for (int j = 0; j < half; ++j) {
    const double w = half == 1 ? 1.0 : std::pow(10.0, 4.0 * j / (half - 1));
    se[j] = std::sin(level * w);
    se[half + j] = std::cos(level * w);
  }
  return se;
}

void matvec(const Vec& w, const Vec& b, const Vec& x, int rows, int cols, Vec& out) {
  out.resize(rows);
  for (int r = 0; r < rows; ++r) {
    double s = b[r];
    const double* wrow = &w[static_cast<std::size_t>(r) * cols];
    for (int c = 0; c < cols; ++c) s += wrow[c] * x[c];
    out[r] = s;
  }
}

FilmCache film_forward(const DenoiserParams& p, const Slots& s, const ContinuousLevel& level,
                       SignalClass z) {
  const DenoiserConfig& cfg = p.cfg;
  if (!(level.value > 0.0) || level.value > 1.0 || !std::isfinite(level.value)) {
    throw ConfigError("denoiser: conditioning level must lie in (0,1]");
  }
  const int zi = artifact_class_index(z);
  const int d = cfg.film_embed_dim;
  FilmCache f;
  f.se = sinusoidal_embedding(level.value, d);
  matvec(p.tensors[s.mlp_w1].tensor.data, p.tensors[s.mlp_b1].tensor.data, f.se, d, d, f.u1);
  f.a1.resize(d);
  for (int i = 0; i < d; ++i) f.a1[i] = silu(f.u1[i]);
  matvec(p.tensors[s.mlp_w2].tensor.data, p.tensors[s.mlp_b2].tensor.data, f.a1, d, d, f.u2);
  f.hcond.resize(d);
  for (int i = 0; i < d; ++i) f.hcond[i] = silu(f.u2[i]);
  if (s.class_embed >= 0) {
    const Vec& emb = p.tensors[s.class_embed].tensor.data;
    for (int i = 0; i < d; ++i) f.hcond[i] += emb[static_cast<std::size_t>(zi) * d + i];
  }
  const int c = cfg.channels;
  f.sites.resize(s.sites.size());
  for (std::size_t k = 0; k < s.sites.size(); ++k) {
    FilmSite& site = f.sites[k];
    matvec(p.tensors[s.sites[k][0]].tensor.data, p.tensors[s.sites[k][1]].tensor.data, f.hcond,
           c, d, site.gamma);
    for (int cc = 0; cc < c; ++cc) site.gamma[cc] += 1.0;
    matvec(p.tensors[s.sites[k][2]].tensor.data, p.tensors[s.sites[k][3]].tensor.data, f.hcond,
           c, d, site.xi);
  }
  return f;
}

void apply_film(const FilmSite& site, const Vec& in, int c, int n, Vec& out) {
  out.resize(static_cast<std::size_t>(c) * n);
  for (int cc = 0; cc < c; ++cc) {
    const double g = site.gamma[cc];
    const double x = site.xi[cc];
    const double* irow = &in[static_cast<std::size_t>(cc) * n];
    double* orow = &out[static_cast<std::size_t>(cc) * n];
    for (int i = 0; i < n; ++i) orow[i] = g * irow[i] + x;
  }
}

void attention_forward(const DenoiserParams& p, const EncSlots& es, int c, int n, int heads,
                       EncCache& ec) {
  const int dh = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  project(ec.t1, c, p.tensors[es.wq].tensor.data, p.tensors[es.bq].tensor.data, c, n, ec.q);
  project(ec.t1, c, p.tensors[es.wk].tensor.data, p.tensors[es.bk].tensor.data, c, n, ec.k);
  project(ec.t1, c, p.tensors[es.wv].tensor.data, p.tensors[es.bv].tensor.data, c, n, ec.v);
  ec.probs.assign(static_cast<std::size_t>(heads) * n * n, 0.0);
  ec.attn_cat.assign(static_cast<std::size_t>(c) * n, 0.0);
  Vec scores(n);
  for (int m = 0; m < heads; ++m) {
    const int base = m * dh;
    double* pm = &ec.probs[static_cast<std::size_t>(m) * n * n];
    for (int i = 0; i < n; ++i) {
      double mx = -1e300;
      for (int j = 0; j < n; ++j) {
        double sc = 0.0;
        for (int dd = 0; dd < dh; ++dd) {
          sc += ec.q[static_cast<std::size_t>(base + dd) * n + i] *
                ec.k[static_cast<std::size_t>(base + dd) * n + j];
        }
        sc *= scale;
        scores[j] = sc;
        mx = std::max(mx, sc);
      }
      double denom = 0.0;
      for (int j = 0; j < n; ++j) {
        const double e = std::exp(scores[j] - mx);
        pm[static_cast<std::size_t>(i) * n + j] = e;
        denom += e;
      }
      for (int j = 0; j < n; ++j) pm[static_cast<std::size_t>(i) * n + j] /= denom;
      for (int dd = 0; dd < dh; ++dd) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
          s += pm[static_cast<std::size_t>(i) * n + j] * ec.v[static_cast<std::size_t>(base + dd) * n + j];
        }
        ec.attn_cat[static_cast<std::size_t>(base + dd) * n + i] = s;
      }
    }
  }
}

void attention_backward(const DenoiserParams& p, const EncSlots& es, int c, int n, int heads,
                        const EncCache& ec, const Vec& g_attn_cat, DenoiserParams& g, Vec& g_t1) {
  const int dh = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Vec gq(static_cast<std::size_t>(c) * n, 0.0);
  Vec gk(static_cast<std::size_t>(c) * n, 0.0);
  Vec gv(static_cast<std::size_t>(c) * n, 0.0);
  Vec dprobs(n), dscores(n);
  for (int m = 0; m < heads; ++m) {
    const int base = m * dh;
    const double* pm = &ec.probs[static_cast<std::size_t>(m) * n * n];
    for (int i = 0; i < n; ++i) {
      const double* prow = &pm[static_cast<std::size_t>(i) * n];
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int dd = 0; dd < dh; ++dd) {
          s += g_attn_cat[static_cast<std::size_t>(base + dd) * n + i] *
               ec.v[static_cast<std::size_t>(base + dd) * n + j];
        }
        dprobs[j] = s;
      }
      for (int dd = 0; dd < dh; ++dd) {
        const double go = g_attn_cat[static_cast<std::size_t>(base + dd) * n + i];
        if (go == 0.0) continue;
        for (int j = 0; j < n; ++j) {
          gv[static_cast<std::size_t>(base + dd) * n + j] += prow[j] * go;
        }
      }
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += dprobs[j] * prow[j];
      for (int j = 0; j < n; ++j) dscores[j] = prow[j] * (dprobs[j] - dot);
      for (int j = 0; j < n; ++j) {
        const double ds = dscores[j] * scale;
        if (ds == 0.0) continue;
        for (int dd = 0; dd < dh; ++dd) {
          gq[static_cast<std::size_t>(base + dd) * n + i] +=
              ds * ec.k[static_cast<std::size_t>(base + dd) * n + j];
          gk[static_cast<std::size_t>(base + dd) * n + j] +=
              ds * ec.q[static_cast<std::size_t>(base + dd) * n + i];
        }
      }
    }
  }
  project_backward(ec.t1, c, p.tensors[es.wq].tensor.data, c, n, gq,
                   g.tensors[es.wq].tensor.data, g.tensors[es.bq].tensor.data, &g_t1);
  project_backward(ec.t1, c, p.tensors[es.wk].tensor.data, c, n, gk,
                   g.tensors[es.wk].tensor.data, g.tensors[es.bk].tensor.data, &g_t1);
  project_backward(ec.t1, c, p.tensors[es.wv].tensor.data, c, n, gv,
                   g.tensors[es.wv].tensor.data, g.tensors[es.bv].tensor.data, &g_t1);
}

void path_forward(const DenoiserParams& p, const PathSlots& ps, const Vec& input,
                  const std::vector<FilmSite>& sites, PathCache& pc) {
  const DenoiserConfig& cfg = p.cfg;
  const int c = cfg.channels;
  const int n = cfg.n;
  conv1d(input, 1, p.tensors[ps.conv1_w].tensor.data, p.tensors[ps.conv1_b].tensor.data, c, n,
         pc.conv1_pre);
  pc.act1.resize(pc.conv1_pre.size());
  for (std::size_t i = 0; i < pc.conv1_pre.size(); ++i) pc.act1[i] = silu(pc.conv1_pre[i]);
  conv1d(pc.act1, c, p.tensors[ps.conv2_w].tensor.data, p.tensors[ps.conv2_b].tensor.data, c, n,
         pc.conv2_pre);
  pc.h0.resize(pc.conv2_pre.size());
  const Vec& pos = p.tensors[ps.pos].tensor.data;
  for (int cc = 0; cc < c; ++cc) {
    for (int i = 0; i < n; ++i) {
      pc.h0[static_cast<std::size_t>(cc) * n + i] =
          silu(pc.conv2_pre[static_cast<std::size_t>(cc) * n + i]) + pos[i];
    }
  }
  Vec h;
  apply_film(sites[0], pc.h0, c, n, h);
  pc.enc.resize(ps.enc.size());
  for (std::size_t e = 0; e < ps.enc.size(); ++e) {
    const EncSlots& es = ps.enc[e];
    EncCache& ec = pc.enc[e];
    ec.h_in = h;
    layer_norm(ec.h_in, c, n, p.tensors[es.ln1_g].tensor.data, p.tensors[es.ln1_b].tensor.data,
               ec.t1, ec.ln1_mu, ec.ln1_inv);
    attention_forward(p, es, c, n, cfg.heads, ec);
    Vec attn_out;
    project(ec.attn_cat, c, p.tensors[es.wo].tensor.data, p.tensors[es.bo].tensor.data, c, n,
            attn_out);
    ec.h_mid.resize(ec.h_in.size());
    for (std::size_t i = 0; i < ec.h_in.size(); ++i) ec.h_mid[i] = ec.h_in[i] + attn_out[i];
    layer_norm(ec.h_mid, c, n, p.tensors[es.ln2_g].tensor.data, p.tensors[es.ln2_b].tensor.data,
               ec.t2, ec.ln2_mu, ec.ln2_inv);
    project(ec.t2, c, p.tensors[es.w1].tensor.data, p.tensors[es.b1].tensor.data, 2 * c, n,
            ec.ffn_pre);
    Vec act(ec.ffn_pre.size());
    for (std::size_t i = 0; i < act.size(); ++i) act[i] = silu(ec.ffn_pre[i]);
    Vec ffn_out;
    project(act, 2 * c, p.tensors[es.w2].tensor.data, p.tensors[es.b2].tensor.data, c, n, ffn_out);
    ec.h_out.resize(ec.h_mid.size());
    for (std::size_t i = 0; i < ec.h_mid.size(); ++i) ec.h_out[i] = ec.h_mid[i] + ffn_out[i];
    apply_film(sites[e + 1], ec.h_out, c, n, h);
  }
  pc.h_final = std::move(h);
}

// Feature gradients flow back through the film site into g_site_in; gamma/xi
// gradients are collected per site for the trunk backward pass.
void film_site_backward(const FilmSite& site, const Vec& site_in, int c, int n, const Vec& gout,
                        Vec& ggamma, Vec& gxi, Vec& gin) {
  ggamma.assign(c, 0.0);
  gxi.assign(c, 0.0);
  gin.assign(static_cast<std::size_t>(c) * n, 0.0);
  for (int cc = 0; cc < c; ++cc) {
    const double g = site.gamma[cc];
    double sg = 0.0, sx = 0.0;
    const double* grow = &gout[static_cast<std::size_t>(cc) * n];
    const double* irow = &site_in[static_cast<std::size_t>(cc) * n];
    double* dst = &gin[static_cast<std::size_t>(cc) * n];
    for (int i = 0; i < n; ++i) {
      sg += grow[i] * irow[i];
      sx += grow[i];
      dst[i] = g * grow[i];
    }
    ggamma[cc] += sg;
    gxi[cc] += sx;
  }
}

void path_backward(const DenoiserParams& p, const PathSlots& ps,
                   const std::vector<FilmSite>& sites, const Vec& input, const PathCache& pc,
                   const Vec& g_final, DenoiserParams& g,
                   std::vector<Vec>& g_gamma, std::vector<Vec>& g_xi) {
  const DenoiserConfig& cfg = p.cfg;
  const int c = cfg.channels;
  const int n = cfg.n;
  const int blocks = static_cast<int>(ps.enc.size());
  g_gamma.resize(blocks + 1);
  g_xi.resize(blocks + 1);

  Vec gh = g_final;
  for (int e = blocks - 1; e >= 0; --e) {
    const EncSlots& es = ps.enc[e];
    const EncCache& ec = pc.enc[e];
    Vec g_hout;
    film_site_backward(sites[e + 1], ec.h_out, c, n, gh, g_gamma[e + 1], g_xi[e + 1], g_hout);

    // h_out = h_mid + W2*silu(W1*LN2(h_mid)+b1)+b2
    Vec g_hmid = g_hout;
    {
      Vec act(ec.ffn_pre.size());
      for (std::size_t i = 0; i < act.size(); ++i) act[i] = silu(ec.ffn_pre[i]);
      Vec g_act(act.size(), 0.0);
      project_backward(act, 2 * c, p.tensors[es.w2].tensor.data, c, n, g_hout,
                       g.tensors[es.w2].tensor.data, g.tensors[es.b2].tensor.data, &g_act);
      Vec g_pre(act.size());
      for (std::size_t i = 0; i < act.size(); ++i) g_pre[i] = g_act[i] * silu_grad(ec.ffn_pre[i]);
      Vec g_t2(static_cast<std::size_t>(c) * n, 0.0);
      project_backward(ec.t2, c, p.tensors[es.w1].tensor.data, 2 * c, n, g_pre,
                       g.tensors[es.w1].tensor.data, g.tensors[es.b1].tensor.data, &g_t2);
      layer_norm_backward(ec.h_mid, c, n, p.tensors[es.ln2_g].tensor.data, ec.ln2_mu, ec.ln2_inv,
                          g_t2, g.tensors[es.ln2_g].tensor.data, g.tensors[es.ln2_b].tensor.data,
                          g_hmid);
    }

    // h_mid = h_in + Wo*attention(LN1(h_in)) + bo
    Vec g_hin = g_hmid;
    {
      Vec g_attn_cat(static_cast<std::size_t>(c) * n, 0.0);
      project_backward(ec.attn_cat, c, p.tensors[es.wo].tensor.data, c, n, g_hmid,
                       g.tensors[es.wo].tensor.data, g.tensors[es.bo].tensor.data, &g_attn_cat);
      Vec g_t1(static_cast<std::size_t>(c) * n, 0.0);
      attention_backward(p, es, c, n, cfg.heads, ec, g_attn_cat, g, g_t1);
      layer_norm_backward(ec.h_in, c, n, p.tensors[es.ln1_g].tensor.data, ec.ln1_mu, ec.ln1_inv,
                          g_t1, g.tensors[es.ln1_g].tensor.data, g.tensors[es.ln1_b].tensor.data,
                          g_hin);
    }
    gh = std::move(g_hin);
  }

  Vec g_h0;
  film_site_backward(sites[0], pc.h0, c, n, gh, g_gamma[0], g_xi[0], g_h0);

  Vec& g_pos = g.tensors[ps.pos].tensor.data;
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int cc = 0; cc < c; ++cc) s += g_h0[static_cast<std::size_t>(cc) * n + i];
    g_pos[i] += s;
  }
  Vec g_conv2_pre(g_h0.size());
  for (std::size_t i = 0; i < g_h0.size(); ++i) {
    g_conv2_pre[i] = g_h0[i] * silu_grad(pc.conv2_pre[i]);
  }
  Vec g_act1(pc.act1.size(), 0.0);
  conv1d_backward(pc.act1, c, p.tensors[ps.conv2_w].tensor.data, c, n, g_conv2_pre,
                  g.tensors[ps.conv2_w].tensor.data, g.tensors[ps.conv2_b].tensor.data, &g_act1);
  Vec g_conv1_pre(pc.conv1_pre.size());
  for (std::size_t i = 0; i < g_conv1_pre.size(); ++i) {
    g_conv1_pre[i] = g_act1[i] * silu_grad(pc.conv1_pre[i]);
  }
  conv1d_backward(input, 1, p.tensors[ps.conv1_w].tensor.data, c, n, g_conv1_pre,
                  g.tensors[ps.conv1_w].tensor.data, g.tensors[ps.conv1_b].tensor.data, nullptr);
}

void film_backward(const DenoiserParams& p, const Slots& s, const FilmCache& f, SignalClass z,
                   const std::vector<Vec>& g_gamma, const std::vector<Vec>& g_xi,
                   DenoiserParams& g) {
  const int c = p.cfg.channels;
  const int d = p.cfg.film_embed_dim;
  Vec g_hcond(d, 0.0);
  for (std::size_t k = 0; k < s.sites.size(); ++k) {
    Vec& gw_gamma = g.tensors[s.sites[k][0]].tensor.data;
    Vec& gb_gamma = g.tensors[s.sites[k][1]].tensor.data;
    Vec& gw_xi = g.tensors[s.sites[k][2]].tensor.data;
    Vec& gb_xi = g.tensors[s.sites[k][3]].tensor.data;
    const Vec& w_gamma = p.tensors[s.sites[k][0]].tensor.data;
    const Vec& w_xi = p.tensors[s.sites[k][2]].tensor.data;
    for (int cc = 0; cc < c; ++cc) {
      const double gg = g_gamma[k][cc];
      const double gx = g_xi[k][cc];
      gb_gamma[cc] += gg;
      gb_xi[cc] += gx;
      for (int dd = 0; dd < d; ++dd) {
        gw_gamma[static_cast<std::size_t>(cc) * d + dd] += gg * f.hcond[dd];
        gw_xi[static_cast<std::size_t>(cc) * d + dd] += gx * f.hcond[dd];
        g_hcond[dd] += gg * w_gamma[static_cast<std::size_t>(cc) * d + dd] +
                       gx * w_xi[static_cast<std::size_t>(cc) * d + dd];
      }
    }
  }
  if (s.class_embed >= 0) {
    const int zi = artifact_class_index(z);
    Vec& gemb = g.tensors[s.class_embed].tensor.data;
    for (int dd = 0; dd < d; ++dd) gemb[static_cast<std::size_t>(zi) * d + dd] += g_hcond[dd];
  }
  Vec g_u2(d);
  for (int dd = 0; dd < d; ++dd) g_u2[dd] = g_hcond[dd] * silu_grad(f.u2[dd]);
  Vec& gw2 = g.tensors[s.mlp_w2].tensor.data;
  Vec& gb2 = g.tensors[s.mlp_b2].tensor.data;
  const Vec& w2 = p.tensors[s.mlp_w2].tensor.data;
  Vec g_a1(d, 0.0);
  for (int r = 0; r < d; ++r) {
    gb2[r] += g_u2[r];
    for (int cdim = 0; cdim < d; ++cdim) {
      gw2[static_cast<std::size_t>(r) * d + cdim] += g_u2[r] * f.a1[cdim];
      g_a1[cdim] += w2[static_cast<std::size_t>(r) * d + cdim] * g_u2[r];
    }
  }
  Vec g_u1(d);
  for (int dd = 0; dd < d; ++dd) g_u1[dd] = g_a1[dd] * silu_grad(f.u1[dd]);
  Vec& gw1 = g.tensors[s.mlp_w1].tensor.data;
  Vec& gb1 = g.tensors[s.mlp_b1].tensor.data;
  for (int r = 0; r < d; ++r) {
    gb1[r] += g_u1[r];
    for (int cdim = 0; cdim < d; ++cdim) {
      gw1[static_cast<std::size_t>(r) * d + cdim] += g_u1[r] * f.se[cdim];
    }
  }
}

void check_forward_inputs(const DenoiserParams& p, const Vec& x_t, const Vec& y) {
  const std::size_t n = static_cast<std::size_t>(p.cfg.n);
  if (x_t.size() != n || y.size() != n) {
    throw ConfigError("denoiser: input length mismatch (expected " + std::to_string(n) + ")");
  }
  if (!all_finite(x_t) || !all_finite(y)) throw ConfigError("denoiser: non-finite input");
}

Vec forward_cached(const DenoiserParams& p, const Slots& s, const Vec& x_t, const Vec& y,
                   const ContinuousLevel& level, SignalClass z, Cache& cache) {
  const DenoiserConfig& cfg = p.cfg;
  const int c = cfg.channels;
  const int n = cfg.n;
  check_forward_inputs(p, x_t, y);
  cache.film = film_forward(p, s, level, z);
  const int n_sites = cfg.encoder_blocks + 1;
  const std::vector<FilmSite> sites_a(cache.film.sites.begin(), cache.film.sites.begin() + n_sites);
  const std::vector<FilmSite> sites_b(cache.film.sites.begin() + n_sites, cache.film.sites.end());
  path_forward(p, s.a, x_t, sites_a, cache.pa);
  path_forward(p, s.b, y, sites_b, cache.pb);
  cache.cat.resize(static_cast<std::size_t>(2 * c) * n);
  std::copy(cache.pa.h_final.begin(), cache.pa.h_final.end(), cache.cat.begin());
  std::copy(cache.pb.h_final.begin(), cache.pb.h_final.end(),
            cache.cat.begin() + static_cast<std::ptrdiff_t>(cache.pa.h_final.size()));
  project(cache.cat, 2 * c, p.tensors[s.fuse_w].tensor.data, p.tensors[s.fuse_b].tensor.data, c,
          n, cache.fuse_pre);
  cache.fused.resize(cache.fuse_pre.size());
  for (std::size_t i = 0; i < cache.fused.size(); ++i) cache.fused[i] = silu(cache.fuse_pre[i]);
  Vec out;
  conv1d(cache.fused, c, p.tensors[s.out_w].tensor.data, p.tensors[s.out_b].tensor.data, 1, n,
         out);
  if (!all_finite(out)) throw CheckFailure("denoiser: non-finite forward output");
  cache.eps = out;
  return out;
}

void backward(const DenoiserParams& p, const Slots& s, const Vec& x_t, const Vec& y, SignalClass z,
              const Cache& cache, const Vec& g_eps, DenoiserParams& g) {
  const DenoiserConfig& cfg = p.cfg;
  const int c = cfg.channels;
  const int n = cfg.n;
  Vec g_fused(static_cast<std::size_t>(c) * n, 0.0);
  conv1d_backward(cache.fused, c, p.tensors[s.out_w].tensor.data, 1, n, g_eps,
                  g.tensors[s.out_w].tensor.data, g.tensors[s.out_b].tensor.data, &g_fused);
  Vec g_fuse_pre(g_fused.size());
  for (std::size_t i = 0; i < g_fused.size(); ++i) {
    g_fuse_pre[i] = g_fused[i] * silu_grad(cache.fuse_pre[i]);
  }
  Vec g_cat(static_cast<std::size_t>(2 * c) * n, 0.0);
  project_backward(cache.cat, 2 * c, p.tensors[s.fuse_w].tensor.data, c, n, g_fuse_pre,
                   g.tensors[s.fuse_w].tensor.data, g.tensors[s.fuse_b].tensor.data, &g_cat);
  const Vec g_ha(g_cat.begin(), g_cat.begin() + static_cast<std::ptrdiff_t>(c) * n);
  const Vec g_hb(g_cat.begin() + static_cast<std::ptrdiff_t>(c) * n, g_cat.end());

  const int n_sites = cfg.encoder_blocks + 1;
  const std::vector<FilmSite> sites_a(cache.film.sites.begin(), cache.film.sites.begin() + n_sites);
  const std::vector<FilmSite> sites_b(cache.film.sites.begin() + n_sites, cache.film.sites.end());
  std::vector<Vec> g_gamma_a, g_xi_a, g_gamma_b, g_xi_b;
  path_backward(p, s.a, sites_a, x_t, cache.pa, g_ha, g, g_gamma_a, g_xi_a);
  path_backward(p, s.b, sites_b, y, cache.pb, g_hb, g, g_gamma_b, g_xi_b);

  std::vector<Vec> g_gamma(std::move(g_gamma_a));
  g_gamma.insert(g_gamma.end(), g_gamma_b.begin(), g_gamma_b.end());
  std::vector<Vec> g_xi(std::move(g_xi_a));
  g_xi.insert(g_xi.end(), g_xi_b.begin(), g_xi_b.end());
  film_backward(p, s, cache.film, z, g_gamma, g_xi, g);
}

}  // namespace

// ---------------------------------------------------------------------------
// Public API
// ---------------------------------------------------------------------------

void validate(const DenoiserConfig& cfg) {
  if (cfg.n < 8) throw ConfigError("denoiser: segment length must be >= 8");
  if (cfg.channels < 1 || cfg.heads < 1 || cfg.channels % cfg.heads != 0) {
    throw ConfigError("denoiser: channels must be a positive multiple of heads");
  }
  if (cfg.encoder_blocks < 1) throw ConfigError("denoiser: encoder_blocks must be >= 1");
  if (cfg.film_embed_dim < 4 || cfg.film_embed_dim % 2 != 0) {
    throw ConfigError("denoiser: film_embed_dim must be even and >= 4");
  }
  if (cfg.n_classes != 3) throw ConfigError("denoiser: n_classes must be 3");
}

int DenoiserParams::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

const Tensor& DenoiserParams::tensor(std::string_view name) const {
  const int i = index_of(name);
  if (i < 0) throw ConfigError("denoiser: missing tensor '" + std::string(name) + "'");
  return tensors[i].tensor;
}

Tensor& DenoiserParams::tensor(std::string_view name) {
  const int i = index_of(name);
  if (i < 0) throw ConfigError("denoiser: missing tensor '" + std::string(name) + "'");
  return tensors[i].tensor;
}

std::size_t DenoiserParams::flat_size() const {
  std::size_t s = 0;
  for (const auto& t : tensors) s += t.tensor.size();
  return s;
}

double DenoiserParams::get_flat(std::size_t i) const {
  for (const auto& t : tensors) {
    if (i < t.tensor.size()) return t.tensor.data[i];
    i -= t.tensor.size();
  }
  throw ConfigError("denoiser: flat index out of range");
}

void DenoiserParams::set_flat(std::size_t i, double v) {
  for (auto& t : tensors) {
    if (i < t.tensor.size()) {
      t.tensor.data[i] = v;
      return;
    }
    i -= t.tensor.size();
  }
  throw ConfigError("denoiser: flat index out of range");
}

namespace {

enum class Init { kFanIn, kZero, kOne };

void add_tensor(DenoiserParams& p, Rng& rng, const std::string& name, std::vector<int> shape,
                Init init, int fan_in = 0) {
  Tensor t;
  t.shape = std::move(shape);
  std::size_t total = 1;
  for (int d : t.shape) total *= static_cast<std::size_t>(d);
  t.data.resize(total);
  switch (init) {
    case Init::kZero:
      std::fill(t.data.begin(), t.data.end(), 0.0);
      break;
    case Init::kOne:
      std::fill(t.data.begin(), t.data.end(), 1.0);
      break;
    case Init::kFanIn: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& v : t.data) v = rng.uniform(-bound, bound);
      break;
    }
  }
  p.tensors.push_back(NamedTensor{name, std::move(t)});
}

void add_path(DenoiserParams& p, Rng& rng, const std::string& prefix) {
  const int c = p.cfg.channels;
  const int n = p.cfg.n;
  add_tensor(p, rng, prefix + ".conv1.weight", {c, 1, kKernel}, Init::kFanIn, kKernel);
  add_tensor(p, rng, prefix + ".conv1.bias", {c}, Init::kFanIn, kKernel);
  add_tensor(p, rng, prefix + ".conv2.weight", {c, c, kKernel}, Init::kFanIn, c * kKernel);
  add_tensor(p, rng, prefix + ".conv2.bias", {c}, Init::kFanIn, c * kKernel);
  add_tensor(p, rng, prefix + ".pos_bias", {n}, Init::kZero);
  for (int e = 0; e < p.cfg.encoder_blocks; ++e) {
    const std::string ep = prefix + ".enc" + std::to_string(e);
    add_tensor(p, rng, ep + ".ln1.gain", {c}, Init::kOne);
    add_tensor(p, rng, ep + ".ln1.bias", {c}, Init::kZero);
    for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"}) {
      add_tensor(p, rng, ep + w, {c, c}, Init::kFanIn, c);
    }
    for (const char* b : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"}) {
      add_tensor(p, rng, ep + b, {c}, Init::kZero);
    }
    add_tensor(p, rng, ep + ".ln2.gain", {c}, Init::kOne);
    add_tensor(p, rng, ep + ".ln2.bias", {c}, Init::kZero);
    add_tensor(p, rng, ep + ".ffn.w1", {2 * c, c}, Init::kFanIn, c);
    add_tensor(p, rng, ep + ".ffn.b1", {2 * c}, Init::kFanIn, c);
    add_tensor(p, rng, ep + ".ffn.w2", {c, 2 * c}, Init::kFanIn, 2 * c);
    add_tensor(p, rng, ep + ".ffn.b2", {c}, Init::kFanIn, 2 * c);
  }
}

}  // namespace

DenoiserParams init_params(const DenoiserConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  DenoiserParams p;
  p.cfg = cfg;
  Rng rng(seed);
  const int c = cfg.channels;
  const int d = cfg.film_embed_dim;
  add_path(p, rng, "path_a");
  add_path(p, rng, "path_b");
  add_tensor(p, rng, "film.level_mlp.w1", {d, d}, Init::kFanIn, d);
  add_tensor(p, rng, "film.level_mlp.b1", {d}, Init::kFanIn, d);
  add_tensor(p, rng, "film.level_mlp.w2", {d, d}, Init::kFanIn, d);
  add_tensor(p, rng, "film.level_mlp.b2", {d}, Init::kFanIn, d);
  if (cfg.use_class_embedding) {
    add_tensor(p, rng, "film.class_embed", {cfg.n_classes, d}, Init::kFanIn, d);
  }
  for (int i = 0; i < 2 * (cfg.encoder_blocks + 1); ++i) {
    const std::string sp = "film.site" + std::to_string(i);
    add_tensor(p, rng, sp + ".gamma.weight", {c, d}, Init::kZero);
    add_tensor(p, rng, sp + ".gamma.bias", {c}, Init::kZero);
    add_tensor(p, rng, sp + ".xi.weight", {c, d}, Init::kZero);
    add_tensor(p, rng, sp + ".xi.bias", {c}, Init::kZero);
  }
  add_tensor(p, rng, "fuse.weight", {c, 2 * c}, Init::kFanIn, 2 * c);
  add_tensor(p, rng, "fuse.bias", {c}, Init::kFanIn, 2 * c);
  add_tensor(p, rng, "out.weight", {1, c, kKernel}, Init::kFanIn, c * kKernel);
  add_tensor(p, rng, "out.bias", {1}, Init::kFanIn, c * kKernel);
  return p;
}

DenoiserParams zeros_like(const DenoiserParams& p) {
  DenoiserParams z;
  z.cfg = p.cfg;
  z.tensors.reserve(p.tensors.size());
  for (const auto& t : p.tensors) {
    Tensor zt;
    zt.shape = t.tensor.shape;
    zt.data.assign(t.tensor.data.size(), 0.0);
    z.tensors.push_back(NamedTensor{t.name, std::move(zt)});
  }
  return z;
}

std::vector<FilmSite> film(const DenoiserParams& p, const ContinuousLevel& level, SignalClass z) {
  validate(p.cfg);
  const Slots s = resolve(p);
  return film_forward(p, s, level, z).sites;
}

Vec forward(const DenoiserParams& p, const Vec& x_t, const Vec& y, const ContinuousLevel& level,
            SignalClass z) {
  validate(p.cfg);
  const Slots s = resolve(p);
  Cache cache;
  return forward_cached(p, s, x_t, y, level, z, cache);
}

LossGrad loss_and_grad(const DenoiserParams& p, const std::vector<BatchItem>& batch) {
  validate(p.cfg);
  if (batch.empty()) throw ConfigError("loss_and_grad: empty batch");
  const Slots s = resolve(p);
  const int b = static_cast<int>(batch.size());
  const int n = p.cfg.n;
  const double inv_count = 1.0 / (static_cast<double>(b) * n);

  std::vector<double> losses(b, 0.0);
  std::vector<DenoiserParams> item_grads(b);
  for (int i = 0; i < b; ++i) item_grads[i] = zeros_like(p);

  parallel_for(b, [&](int i) {
    const BatchItem& item = batch[i];
    if (item.eps_target.size() != static_cast<std::size_t>(n)) {
      throw ConfigError("loss_and_grad: eps_target length mismatch");
    }
    Cache cache;
    const Vec eps_hat = forward_cached(p, s, item.x_t, item.y, item.level, item.z, cache);
    Vec g_eps(n);
    double loss = 0.0;
    for (int j = 0; j < n; ++j) {
      const double r = item.eps_target[j] - eps_hat[j];
      loss += std::abs(r);
      // d/d eps_hat |target - eps_hat| = -sign(target - eps_hat)
      g_eps[j] = -sign_or_zero(r) * inv_count;
    }
    losses[i] = loss;
    backward(p, s, item.x_t, item.y, item.z, cache, g_eps, item_grads[i]);
  });

  LossGrad out;
  out.grads = zeros_like(p);
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    total += losses[i];
    for (std::size_t t = 0; t < out.grads.tensors.size(); ++t) {
      Vec& dst = out.grads.tensors[t].tensor.data;
      const Vec& src = item_grads[i].tensors[t].tensor.data;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
  out.loss = total * inv_count;
  return out;
}

}  // namespace d4pm
