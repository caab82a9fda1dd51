#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "d4pm/common.hpp"
#include "d4pm/schedule.hpp"
#include "d4pm/signals.hpp"

namespace d4pm {

struct DenoiserConfig {
  int n = 64;               // segment length
  int channels = 32;        // C
  int encoder_blocks = 3;   // E
  int heads = 4;            // H, must divide C
  int film_embed_dim = 32;  // D, even
  int n_classes = 3;
  bool use_class_embedding = true;
};

void validate(const DenoiserConfig& cfg);

struct Tensor {
  std::vector<int> shape;
  Vec data;

  std::size_t size() const { return data.size(); }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// All learnable tensors of one denoising network, in a fixed construction
// order. The string keys are the stable checkpoint interface.
struct DenoiserParams {
  DenoiserConfig cfg;
  std::vector<NamedTensor> tensors;

  int index_of(std::string_view name) const;  // -1 if absent
  const Tensor& tensor(std::string_view name) const;
  Tensor& tensor(std::string_view name);

  std::size_t flat_size() const;
  double get_flat(std::size_t i) const;
  void set_flat(std::size_t i, double v);
};

// Fan-in-scaled uniform weights; layer-norm gains 1; FiLM heads zeroed so the
// initial modulation is exactly gamma=1, xi=0. Deterministic per seed.
DenoiserParams init_params(const DenoiserConfig& cfg, std::uint64_t seed);

DenoiserParams zeros_like(const DenoiserParams& p);

// Per-site channel-wise modulation h <- gamma * h + xi.
struct FilmSite {
  Vec gamma;  // [C]
  Vec xi;     // [C]
};

// The 2*(E+1) modulation pairs for a given level and class label: sites
// 0..E belong to the diffused-input path (after the conv stack, then after
// each encoder block), sites E+1..2E+1 to the conditioner path.
std::vector<FilmSite> film(const DenoiserParams& p, const ContinuousLevel& level, SignalClass z);

// eps prediction. Path A consumes x_t, path B consumes y; both are modulated
// by the shared FiLM trunk, fused by a 1x1 conv and projected to one channel.
Vec forward(const DenoiserParams& p, const Vec& x_t, const Vec& y,
            const ContinuousLevel& level, SignalClass z);

struct BatchItem {
  Vec x_t;
  Vec y;
  ContinuousLevel level;
  SignalClass z = SignalClass::kEog;
  Vec eps_target;
};

struct LossGrad {
  double loss = 0.0;
  DenoiserParams grads;
};

// Mean L1 loss over batch and samples with exact parameter gradients
// (L1 subgradient at 0 taken as 0). Items are evaluated in parallel but
// accumulated in batch order, so the result is independent of thread count.
LossGrad loss_and_grad(const DenoiserParams& p, const std::vector<BatchItem>& batch);

}  // namespace d4pm
