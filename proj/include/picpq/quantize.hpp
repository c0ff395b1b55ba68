#pragma once

#include <map>
#include <set>
#include <span>

#include <nlohmann/json.hpp>

#include "picpq/network.hpp"
#include "picpq/tensor.hpp"

namespace picpq {

/// Bitwidth used for full precision (exempt layers and unquantized plans).
inline constexpr int kFullPrecisionBits = 32;
inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 8;

struct MaxBits {
  int weight = kMaxBits;
  int activation = kMaxBits;
};

/// Available maximum bitwidth per parameterized layer plus the penalty factor of the
/// sparsity-to-bitwidth rule. Exempt layers stay at full precision.
struct BitwidthSchedule {
  std::map<int, MaxBits> max_bits;
  double penalty = 1.0 / 6.0;
  std::set<int> exempt;

  bool is_exempt(int id) const { return exempt.count(id) != 0; }
};

struct LayerBits {
  int weight = kFullPrecisionBits;
  int activation = kFullPrecisionBits;
  bool operator==(const LayerBits&) const = default;
};

using BitwidthAssignment = std::map<int, LayerBits>;

/// Linear interpolation of the maximum bitwidth over prunable-layer depth, from
/// `n_first` at the shallowest prunable layer to `n_last` at the deepest, rounded half
/// away from zero. The first and last parameterized layers, and the network's
/// full-precision layers, are exempt. Activation maxima default to the weight maxima.
BitwidthSchedule default_schedule(const NetworkSpec& spec, int n_first, int n_last,
                                  double penalty = 1.0 / 6.0);
BitwidthSchedule default_schedule(const NetworkSpec& spec, int n_first, int n_last,
                                  int n_first_act, int n_last_act, double penalty);

/// Schedule from {"n_first", "n_last", "p", "exempt", optional "n_first_act"/"n_last_act"}.
BitwidthSchedule schedule_from_json(const NetworkSpec& spec, const nlohmann::json& j);

/// ceil(max_bits - penalty / sparsity) clamped to [2, max_bits].
int assign_bitwidth(int max_bits, double penalty, double sparsity);

BitwidthAssignment assign_bitwidths(const std::map<int, double>& sparsity,
                                    const BitwidthSchedule& schedule);

/// round(tanh(w) * 2^(n-1) / layer_max) / 2^(n-1), rounding half away from zero.
/// A non-positive layer_max (all-zero layer) passes zeros through.
double quantize_weight_value(double w, int bits, double layer_max);

/// round(clamp(a, 0, 1) * 2^n) / 2^n.
double quantize_activation_value(double a, int bits);

/// round(x * 2^(n-1)) / 2^(n-1): the grid projection of the weight quantizer.
double project_weight_grid(double x, int bits);

Tensor quantize_weights(const Tensor& weights, int bits, double layer_max);
Tensor quantize_activations(const Tensor& activations, int bits);

/// max |w| over the tensor.
double max_abs(std::span<const float> values);

}  // namespace picpq
