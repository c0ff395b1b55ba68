#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "picpq/network.hpp"
#include "picpq/tensor.hpp"

namespace picpq {

template <typename T>
struct LayerParams {
  BasicTensor<T> weight;  // conv: Co x Ci x K x K, fc: out x in
  BasicTensor<T> bias;    // Co or out
};

template <typename T>
using ParamSet = std::map<int, LayerParams<T>>;

struct ModelState {
  ParamSet<float> params;
  /// Per-conv post-activation maximum used to scale activations into [0, 1] before
  /// fake quantization; filled by calibrate_activations.
  std::map<int, float> activation_max;
  std::uint64_t rng_seed = 0;

  bool operator==(const ModelState& other) const;
};

/// Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
ModelState init_model(const NetworkSpec& spec, std::uint64_t seed);

/// Throws ValidationError unless every conv/fc layer has parameters of matching shape.
void check_state(const NetworkSpec& spec, const ModelState& state);

template <typename U, typename T>
ParamSet<U> cast_params(const ParamSet<T>& in) {
  ParamSet<U> out;
  for (const auto& [id, p] : in) out[id] = {p.weight.template cast<U>(), p.bias.template cast<U>()};
  return out;
}

// "PICW" weight container.
void save_weights(const std::string& path, const ModelState& state);
ModelState load_weights(const std::string& path);

/// Named tensors as stored in a PICW file (name -> tensor), for tools and tests.
std::map<std::string, Tensor> read_picw(const std::string& path);
void write_picw(const std::string& path, const std::map<std::string, Tensor>& entries);

}  // namespace picpq
