#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "picpq/network.hpp"
#include "picpq/quantize.hpp"

namespace picpq {

struct FilterPropertyTable;

/// Per-layer deformation scale `a` and relative shift `b` of the importance transform.
struct LayerAB {
  double a = 1.0;
  double b = 0.0;
  bool operator==(const LayerAB&) const = default;
};

struct ABVector {
  std::vector<int> layers;  // prunable layer ids, depth order
  std::vector<LayerAB> values;

  static ABVector identity(const NetworkSpec& spec);
  std::size_t size() const { return layers.size(); }
  const LayerAB& at_layer(int id) const;
  bool operator==(const ABVector&) const = default;
};

nlohmann::json ab_to_json(const ABVector& ab);
ABVector ab_from_json(const nlohmann::json& j);

struct FilterRef {
  int layer = 0;
  int index = 0;
  bool operator==(const FilterRef&) const = default;
};

struct ImportanceTable {
  std::map<int, std::vector<double>> values;
  /// All prunable filters, descending by importance; ties go to the smaller
  /// (layer id, filter index).
  std::vector<FilterRef> order;
};

/// I = a_l * FP + b_l for every filter, plus the global ordering.
ImportanceTable importance(const FilterPropertyTable& fp, const ABVector& ab);

enum class BudgetMode {
  bops,   // joint pruning + quantization, bit-operation ratio
  flops,  // pruning only, bitwidths pinned at 32
};

std::string to_string(BudgetMode mode);

struct LayerPlan {
  std::vector<bool> keep;  // one entry per output channel
  double sparsity = 1.0;
  int n_w = kFullPrecisionBits;
  int n_a = kFullPrecisionBits;
  bool exempt = false;
  bool prunable = false;

  int kept() const;
  bool operator==(const LayerPlan&) const = default;
};

struct CompressionPlan {
  std::map<int, LayerPlan> layers;  // every conv/fc layer
  BudgetMode mode = BudgetMode::bops;
  double requested_ratio = 1.0;
  double achieved_ratio = 1.0;
  std::uint64_t achieved_bops = 0;

  /// Keep-everything, full-precision plan.
  static CompressionPlan identity(const NetworkSpec& spec);

  /// Same masks with every bitwidth at 32.
  CompressionPlan without_quantization() const;
  /// Same masks and activation bits, weights at 32.
  CompressionPlan activations_only() const;

  bool quantizes_activations() const;
  bool operator==(const CompressionPlan&) const = default;
};

/// Throws ValidationError when the plan does not match the network (missing layers, mask
/// sizes, empty layers, unequal residual-group masks, bitwidths outside [2, 8] on
/// quantized layers).
void check_plan(const NetworkSpec& spec, const CompressionPlan& plan);

nlohmann::json plan_to_json(const CompressionPlan& plan);
CompressionPlan plan_from_json(const NetworkSpec& spec, const nlohmann::json& j);

/// Minimum number of filters each prunable layer keeps.
struct FloorPolicy {
  double fraction = 0.0625;
  std::map<int, int> overrides;

  int floor_for(int layer_id, int filters) const;
};

/// Greedy removal of the globally least important removable filter until the model's
/// compression ratio reaches `budget_ratio`. Residual groups are removed jointly by the
/// summed importance of their members. Throws InfeasibleBudget when every layer reaches
/// its floor first.
CompressionPlan derive_masks(const ImportanceTable& importance, const NetworkSpec& spec,
                             const BitwidthSchedule& schedule, double budget_ratio,
                             BudgetMode mode = BudgetMode::bops,
                             const FloorPolicy& floors = {});

/// kept filters / total filters per prunable layer.
std::map<int, double> layer_sparsity(const CompressionPlan& plan);

/// Total importance of the pruned filters.
double objective_value(const ImportanceTable& importance, const CompressionPlan& plan);

}  // namespace picpq
