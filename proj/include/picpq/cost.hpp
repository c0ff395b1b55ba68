#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "picpq/network.hpp"
#include "picpq/plan.hpp"

namespace picpq {

/// kept_in * kept_out * K^2 * out_h * out_w * b_w * b_a. An fc layer is a 1x1 conv on a
/// 1x1 output.
std::uint64_t layer_bops(const LayerSpec& layer, int kept_in, int kept_out, int b_w, int b_a,
                         int out_h, int out_w);

struct LayerCost {
  int id = 0;
  int kept_in = 0;
  int kept_out = 0;
  int b_w = kFullPrecisionBits;
  int b_a = kFullPrecisionBits;
  std::uint64_t flops = 0;  // multiply-accumulates
  std::uint64_t bops = 0;
};

struct StageAccuracy {
  std::optional<double> baseline;
  std::optional<double> pruned;
  std::optional<double> activation_quantized;
  std::optional<double> fully_quantized;
};

struct CostReport {
  std::vector<LayerCost> layers;
  std::uint64_t flops = 0;
  std::uint64_t bops = 0;
  std::uint64_t baseline_flops = 0;
  std::uint64_t baseline_bops = 0;
  double flops_ratio = 1.0;
  double bops_ratio = 1.0;
  StageAccuracy accuracy;
};

/// Costs of `plan` (identity when null) against the unpruned 32/32 baseline. Input
/// channels of each layer are the kept output channels of the layer that produces them;
/// exempt layers count at 32 bits; ReLU, pooling and adds cost nothing.
CostReport model_cost(const NetworkSpec& spec, const CompressionPlan* plan);

nlohmann::json report_to_json(const CostReport& report);

/// Fast cost evaluation from kept-filter counts and bitwidths; shared by model_cost and
/// the greedy mask derivation.
class CostModel {
 public:
  explicit CostModel(const NetworkSpec& spec);

  struct Totals {
    std::uint64_t flops = 0;
    std::uint64_t bops = 0;
  };

  /// kept: output filters kept per parameterized layer (missing = all kept);
  /// bits: per-layer bitwidths (missing = 32).
  Totals evaluate(const std::map<int, int>& kept, const BitwidthAssignment& bits,
                  std::vector<LayerCost>* per_layer = nullptr) const;

  const Totals& baseline() const { return baseline_; }

 private:
  struct Entry {
    const LayerSpec* layer = nullptr;
    int source = -1;  // producing parameterized layer, -1 = network input
    int features_per_channel = 1;
    int fixed_in = 0;  // input channels/features when source == -1
    int out_h = 1;
    int out_w = 1;
    int out_total = 0;
  };
  std::vector<Entry> entries_;
  Totals baseline_;
};

}  // namespace picpq
