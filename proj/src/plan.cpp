#include "picpq/plan.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "picpq/cost.hpp"
#include "picpq/errors.hpp"
#include "picpq/rank.hpp"

namespace picpq {

ABVector ABVector::identity(const NetworkSpec& spec) {
  ABVector ab;
  ab.layers = spec.prunable_ids();
  ab.values.assign(ab.layers.size(), LayerAB{});
  return ab;
}

const LayerAB& ABVector::at_layer(int id) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] == id) return values[i];
  }
  throw ValidationError("a-b vector has no entry for layer " + std::to_string(id));
}

nlohmann::json ab_to_json(const ABVector& ab) {
  auto layers = nlohmann::json::array();
  for (std::size_t i = 0; i < ab.size(); ++i) {
    layers.push_back({{"id", ab.layers[i]}, {"a", ab.values[i].a}, {"b", ab.values[i].b}});
  }
  return {{"layers", layers}};
}

ABVector ab_from_json(const nlohmann::json& j) {
  ABVector ab;
  try {
    for (const auto& e : j.at("layers")) {
      ab.layers.push_back(e.at("id").get<int>());
      ab.values.push_back({e.at("a").get<double>(), e.at("b").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed a-b vector JSON: ") + e.what());
  }
  return ab;
}

ImportanceTable importance(const FilterPropertyTable& fp, const ABVector& ab) {
  if (fp.values.size() != ab.size()) {
    throw ValidationError("a-b vector length " + std::to_string(ab.size()) +
                          " does not match " + std::to_string(fp.values.size()) +
                          " prunable layers");
  }
  ImportanceTable t;
  for (std::size_t k = 0; k < ab.size(); ++k) {
    auto it = fp.values.find(ab.layers[k]);
    if (it == fp.values.end()) {
      throw ValidationError("filter property table lacks layer " + std::to_string(ab.layers[k]));
    }
    const auto& [a, b] = ab.values[k];
    auto& out = t.values[ab.layers[k]];
    out.reserve(it->second.size());
    for (double v : it->second) out.push_back(a * v + b);
  }
  for (const auto& [id, vals] : t.values) {
    for (std::size_t i = 0; i < vals.size(); ++i) t.order.push_back({id, static_cast<int>(i)});
  }
  std::stable_sort(t.order.begin(), t.order.end(), [&](const FilterRef& x, const FilterRef& y) {
    const double ix = t.values.at(x.layer)[static_cast<std::size_t>(x.index)];
    const double iy = t.values.at(y.layer)[static_cast<std::size_t>(y.index)];
    if (ix != iy) return ix > iy;
    if (x.layer != y.layer) return x.layer < y.layer;
    return x.index < y.index;
  });
  return t;
}

std::string to_string(BudgetMode mode) { return mode == BudgetMode::bops ? "bops" : "flops"; }

int LayerPlan::kept() const { return static_cast<int>(std::count(keep.begin(), keep.end(), true)); }

CompressionPlan CompressionPlan::identity(const NetworkSpec& spec) {
  CompressionPlan p;
  for (const auto& l : spec.layers) {
    if (!l.has_params()) continue;
    LayerPlan lp;
    lp.keep.assign(static_cast<std::size_t>(l.kind == LayerKind::conv ? l.out_channels : l.out_features), true);
    lp.prunable = l.prunable;
    lp.exempt = spec.full_precision_layers.count(l.id) != 0;
    p.layers[l.id] = lp;
  }
  const CostModel cm(spec);
  p.achieved_bops = cm.baseline().bops;
  return p;
}

CompressionPlan CompressionPlan::without_quantization() const {
  CompressionPlan p = *this;
  for (auto& [id, lp] : p.layers) lp.n_w = lp.n_a = kFullPrecisionBits;
  return p;
}

CompressionPlan CompressionPlan::activations_only() const {
  CompressionPlan p = *this;
  for (auto& [id, lp] : p.layers) lp.n_w = kFullPrecisionBits;
  return p;
}

bool CompressionPlan::quantizes_activations() const {
  return std::any_of(layers.begin(), layers.end(), [](const auto& kv) {
    return !kv.second.exempt && kv.second.n_a < kFullPrecisionBits;
  });
}

void check_plan(const NetworkSpec& spec, const CompressionPlan& plan) {
  std::ostringstream bad;
  for (const auto& l : spec.layers) {
    if (!l.has_params()) continue;
    auto it = plan.layers.find(l.id);
    if (it == plan.layers.end()) {
      bad << " [" << l.id << ": missing from plan]";
      continue;
    }
    const auto& lp = it->second;
    const auto filters = static_cast<std::size_t>(l.kind == LayerKind::conv ? l.out_channels : l.out_features);
    if (lp.keep.size() != filters) {
      bad << " [" << l.id << ": mask has " << lp.keep.size() << " entries, expected " << filters << "]";
      continue;
    }
    if (lp.kept() < 1) bad << " [" << l.id << ": keeps no filters]";
    if (!l.prunable && lp.kept() != static_cast<int>(filters)) {
      bad << " [" << l.id << ": non-prunable layer is masked]";
    }
    if (!lp.exempt) {
      for (int n : {lp.n_w, lp.n_a}) {
        if (n != kFullPrecisionBits && (n < kMinBits || n > kMaxBits)) {
          bad << " [" << l.id << ": bitwidth " << n << " outside [2, 8]]";
        }
      }
    }
  }
  for (const auto& [id, lp] : plan.layers) {
    bool found = false;
    for (const auto& l : spec.layers) found |= (l.id == id && l.has_params());
    if (!found) bad << " [" << id << ": not a parameterized layer]";
  }
  for (const auto& group : spec.residual_groups) {
    for (int id : group) {
      auto a = plan.layers.find(group.front());
      auto b = plan.layers.find(id);
      if (a != plan.layers.end() && b != plan.layers.end() && a->second.keep != b->second.keep) {
        bad << " [" << id << ": mask differs from residual group partner " << group.front() << "]";
      }
    }
  }
  if (!bad.str().empty()) throw ValidationError("plan does not match spec:" + bad.str());
}

nlohmann::json plan_to_json(const CompressionPlan& plan) {
  auto layers = nlohmann::json::array();
  for (const auto& [id, lp] : plan.layers) {
    std::vector<int> keep;
    for (std::size_t i = 0; i < lp.keep.size(); ++i) {
      if (lp.keep[i]) keep.push_back(static_cast<int>(i));
    }
    layers.push_back({{"id", id},
                      {"filters", lp.keep.size()},
                      {"keep_indices", keep},
                      {"sparsity", lp.sparsity},
                      {"n_w", lp.n_w},
                      {"n_a", lp.n_a},
                      {"exempt", lp.exempt},
                      {"prunable", lp.prunable}});
  }
  return {{"layers", layers},
          {"mode", to_string(plan.mode)},
          {"requested_ratio", plan.requested_ratio},
          {"achieved_ratio", plan.achieved_ratio},
          {"achieved_bops", plan.achieved_bops}};
}

CompressionPlan plan_from_json(const NetworkSpec& spec, const nlohmann::json& j) {
  CompressionPlan p;
  try {
    for (const auto& e : j.at("layers")) {
      LayerPlan lp;
      const int id = e.at("id").get<int>();
      lp.keep.assign(e.at("filters").get<std::size_t>(), false);
      for (int k : e.at("keep_indices")) {
        if (k < 0 || static_cast<std::size_t>(k) >= lp.keep.size()) {
          throw ValidationError("keep index out of range in plan layer " + std::to_string(id));
        }
        lp.keep[static_cast<std::size_t>(k)] = true;
      }
      lp.sparsity = e.at("sparsity").get<double>();
      lp.n_w = e.at("n_w").get<int>();
      lp.n_a = e.at("n_a").get<int>();
      lp.exempt = e.at("exempt").get<bool>();
      lp.prunable = e.value("prunable", spec.layer(id).prunable);
      p.layers[id] = lp;
    }
    p.mode = j.value("mode", std::string("bops")) == "flops" ? BudgetMode::flops : BudgetMode::bops;
    p.requested_ratio = j.at("requested_ratio").get<double>();
    p.achieved_ratio = j.at("achieved_ratio").get<double>();
    p.achieved_bops = j.at("achieved_bops").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed plan JSON: ") + e.what());
  }
  check_plan(spec, p);
  return p;
}

int FloorPolicy::floor_for(int layer_id, int filters) const {
  if (auto it = overrides.find(layer_id); it != overrides.end()) {
    return std::clamp(it->second, 1, filters);
  }
  return std::clamp(static_cast<int>(std::ceil(fraction * filters - 1e-12)), 1, filters);
}

namespace {

/// One removable unit: a single filter, or the same filter slot across a residual group.
struct Unit {
  std::vector<int> layers;
  int index = 0;
  double importance = 0;
};

}  // namespace

CompressionPlan derive_masks(const ImportanceTable& imp, const NetworkSpec& spec,
                             const BitwidthSchedule& schedule, double budget_ratio,
                             BudgetMode mode, const FloorPolicy& floors) {
  if (!(budget_ratio >= 1.0)) throw ValidationError("budget ratio must be >= 1");
  const auto prunable = spec.prunable_ids();
  for (int id : prunable) {
    auto it = imp.values.find(id);
    if (it == imp.values.end() ||
        it->second.size() != static_cast<std::size_t>(spec.layer(id).out_channels)) {
      throw ValidationError("importance table does not cover prunable layer " + std::to_string(id));
    }
  }

  // Removal units in ascending importance; ties broken opposite to the global
  // descending order so the least important end of that order goes first.
  std::vector<Unit> units;
  std::set<int> grouped;
  for (const auto& group : spec.residual_groups) {
    if (!spec.layer(group.front()).prunable) continue;
    const int filters = spec.layer(group.front()).out_channels;
    for (int i = 0; i < filters; ++i) {
      Unit u{group, i, 0.0};
      for (int id : group) u.importance += imp.values.at(id)[static_cast<std::size_t>(i)];
      units.push_back(u);
    }
    grouped.insert(group.begin(), group.end());
  }
  for (int id : prunable) {
    if (grouped.count(id)) continue;
    const auto& vals = imp.values.at(id);
    for (std::size_t i = 0; i < vals.size(); ++i) units.push_back({{id}, static_cast<int>(i), vals[i]});
  }
  auto key_layer = [](const Unit& u) { return *std::min_element(u.layers.begin(), u.layers.end()); };
  std::stable_sort(units.begin(), units.end(), [&](const Unit& x, const Unit& y) {
    if (x.importance != y.importance) return x.importance < y.importance;
    if (key_layer(x) != key_layer(y)) return key_layer(x) > key_layer(y);
    return x.index > y.index;
  });

  CompressionPlan plan = CompressionPlan::identity(spec);
  plan.mode = mode;
  plan.requested_ratio = budget_ratio;
  for (auto& [id, lp] : plan.layers) lp.exempt = schedule.is_exempt(id);

  std::map<int, int> kept;
  std::map<int, int> floor;
  for (int id : prunable) {
    const int filters = spec.layer(id).out_channels;
    kept[id] = filters;
    floor[id] = floors.floor_for(id, filters);
  }
  const CostModel cost(spec);

  auto bits_for = [&](const std::map<int, int>& k) {
    BitwidthAssignment bits;
    if (mode == BudgetMode::flops) return bits;
    std::map<int, double> sparsity;
    for (const auto& [id, n] : k) sparsity[id] = static_cast<double>(n) / spec.layer(id).out_channels;
    return assign_bitwidths(sparsity, schedule);
  };
  auto measure = [&](const BitwidthAssignment& bits) {
    const auto t = cost.evaluate(kept, bits);
    return mode == BudgetMode::flops ? t.flops : t.bops;
  };
  const std::uint64_t baseline = mode == BudgetMode::flops ? cost.baseline().flops : cost.baseline().bops;

  auto bits = bits_for(kept);
  std::uint64_t current = measure(bits);
  auto ratio = [&] { return static_cast<double>(baseline) / static_cast<double>(current); };

  for (const auto& u : units) {
    if (ratio() >= budget_ratio) break;
    const bool removable = std::all_of(u.layers.begin(), u.layers.end(),
                                       [&](int id) { return kept[id] > floor[id]; });
    if (!removable) continue;
    for (int id : u.layers) {
      plan.layers[id].keep[static_cast<std::size_t>(u.index)] = false;
      --kept[id];
    }
    bits = bits_for(kept);
    current = measure(bits);
  }
  if (ratio() < budget_ratio) throw InfeasibleBudget(budget_ratio, ratio());

  for (auto& [id, lp] : plan.layers) {
    lp.sparsity = static_cast<double>(lp.kept()) / static_cast<double>(lp.keep.size());
    if (auto it = bits.find(id); it != bits.end() && !lp.exempt) {
      lp.n_w = it->second.weight;
      lp.n_a = it->second.activation;
    } else {
      lp.n_w = lp.n_a = kFullPrecisionBits;
    }
  }
  const auto totals = cost.evaluate(kept, bits);
  plan.achieved_bops = totals.bops;
  plan.achieved_ratio = ratio();
  return plan;
}

std::map<int, double> layer_sparsity(const CompressionPlan& plan) {
  std::map<int, double> out;
  for (const auto& [id, lp] : plan.layers) {
    if (!lp.prunable) continue;
    out[id] = static_cast<double>(lp.kept()) / static_cast<double>(lp.keep.size());
  }
  return out;
}

double objective_value(const ImportanceTable& importance, const CompressionPlan& plan) {
  double total = 0;
  for (const auto& [id, vals] : importance.values) {
    auto it = plan.layers.find(id);
    if (it == plan.layers.end() || it->second.keep.size() != vals.size()) {
      throw ValidationError("plan does not match importance table at layer " + std::to_string(id));
    }
    for (std::size_t i = 0; i < vals.size(); ++i) {
      if (!it->second.keep[i]) total += vals[i];
    }
  }
  return total;
}

}  // namespace picpq
