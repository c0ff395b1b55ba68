#include "picpq/quantize.hpp"

#include <algorithm>
#include <cmath>

#include "picpq/errors.hpp"

namespace picpq {

namespace {

void check_bounds(int n_first, int n_last) {
  if (!(kMinBits <= n_last && n_last <= n_first && n_first <= kMaxBits)) {
    throw ValidationError("maximum bitwidths must satisfy 2 <= n_last <= n_first <= 8");
  }
}

int interpolate(int n_first, int n_last, std::size_t i, std::size_t count) {
  if (count <= 1) return n_first;
  const double t = static_cast<double>(i) / static_cast<double>(count - 1);
  return static_cast<int>(std::round(n_first + (n_last - n_first) * t));
}

}  // namespace

BitwidthSchedule default_schedule(const NetworkSpec& spec, int n_first, int n_last,
                                  double penalty) {
  return default_schedule(spec, n_first, n_last, n_first, n_last, penalty);
}

BitwidthSchedule default_schedule(const NetworkSpec& spec, int n_first, int n_last,
                                  int n_first_act, int n_last_act, double penalty) {
  check_bounds(n_first, n_last);
  check_bounds(n_first_act, n_last_act);
  if (!(penalty > 0)) throw ValidationError("penalty factor must be positive");
  BitwidthSchedule s;
  s.penalty = penalty;
  const auto prunable = spec.prunable_ids();
  const auto params = spec.parameterized_ids();
  MaxBits current{n_first, n_first_act};
  std::size_t depth = 0;
  for (int id : params) {
    if (spec.layer(id).prunable) {
      current = {interpolate(n_first, n_last, depth, prunable.size()),
                 interpolate(n_first_act, n_last_act, depth, prunable.size())};
      ++depth;
    }
    s.max_bits[id] = current;
  }
  if (!params.empty()) {
    s.exempt.insert(params.front());
    s.exempt.insert(params.back());
  }
  s.exempt.insert(spec.full_precision_layers.begin(), spec.full_precision_layers.end());
  return s;
}

BitwidthSchedule schedule_from_json(const NetworkSpec& spec, const nlohmann::json& j) {
  const int n_first = j.value("n_first", 8);
  const int n_last = j.value("n_last", 2);
  auto s = default_schedule(spec, n_first, n_last, j.value("n_first_act", n_first),
                            j.value("n_last_act", n_last), j.value("p", 1.0 / 6.0));
  if (j.contains("exempt")) {
    for (int id : j.at("exempt")) {
      if (!spec.layer(id).has_params()) throw ValidationError("exempt layer has no parameters");
      s.exempt.insert(id);
    }
  }
  return s;
}

int assign_bitwidth(int max_bits, double penalty, double sparsity) {
  if (!(sparsity > 0.0 && sparsity <= 1.0)) {
    throw ValidationError("layer sparsity must lie in (0, 1]");
  }
  // The small slack keeps exact-integer cases such as 8 - 2 from rounding up.
  const double raw = std::ceil(max_bits - penalty / sparsity - 1e-9);
  return static_cast<int>(std::clamp(raw, static_cast<double>(kMinBits), static_cast<double>(max_bits)));
}

BitwidthAssignment assign_bitwidths(const std::map<int, double>& sparsity,
                                    const BitwidthSchedule& schedule) {
  BitwidthAssignment out;
  for (const auto& [id, bounds] : schedule.max_bits) {
    if (schedule.is_exempt(id)) {
      out[id] = {kFullPrecisionBits, kFullPrecisionBits};
      continue;
    }
    auto it = sparsity.find(id);
    const double s = it == sparsity.end() ? 1.0 : it->second;
    out[id] = {assign_bitwidth(bounds.weight, schedule.penalty, s),
               assign_bitwidth(bounds.activation, schedule.penalty, s)};
  }
  return out;
}

double project_weight_grid(double x, int bits) {
  const double scale = std::ldexp(1.0, bits - 1);
  return std::round(x * scale) / scale;
}

double quantize_weight_value(double w, int bits, double layer_max) {
  if (!(layer_max > 0)) return 0.0;
  return project_weight_grid(std::tanh(w) / layer_max, bits);
}

double quantize_activation_value(double a, int bits) {
  const double scale = std::ldexp(1.0, bits);
  return std::round(std::clamp(a, 0.0, 1.0) * scale) / scale;
}

double max_abs(std::span<const float> values) {
  double m = 0;
  for (float v : values) m = std::max(m, static_cast<double>(std::abs(v)));
  return m;
}

Tensor quantize_weights(const Tensor& weights, int bits, double layer_max) {
  if (bits < kMinBits) throw ValidationError("weight bitwidth below 2");
  Tensor out(weights.shape());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out[i] = static_cast<float>(quantize_weight_value(weights[i], bits, layer_max));
  }
  return out;
}

Tensor quantize_activations(const Tensor& activations, int bits) {
  if (bits < kMinBits) throw ValidationError("activation bitwidth below 2");
  Tensor out(activations.shape());
  for (std::size_t i = 0; i < activations.size(); ++i) {
    out[i] = static_cast<float>(quantize_activation_value(activations[i], bits));
  }
  return out;
}

}  // namespace picpq
