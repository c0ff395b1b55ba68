#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "../fixtures.hpp"
#include "../oracles.hpp"
#include "picpq/cost.hpp"
#include "picpq/errors.hpp"
#include "picpq/plan.hpp"
#include "picpq/rank.hpp"

using namespace picpq;

namespace {

FilterPropertyTable table(std::map<int, std::vector<double>> values) {
  FilterPropertyTable fp;
  fp.values = std::move(values);
  fp.sample_count = 1;
  return fp;
}

ABVector ab_of(std::vector<int> layers, std::vector<LayerAB> values) {
  ABVector ab;
  ab.layers = std::move(layers);
  ab.values = std::move(values);
  return ab;
}

std::vector<double> uniform_values(std::mt19937_64& rng, int n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = u(rng);
  return v;
}

unsigned mask_bits(const LayerPlan& lp) {
  unsigned m = 0;
  for (std::size_t i = 0; i < lp.keep.size(); ++i) m |= lp.keep[i] ? 1u << i : 0u;
  return m;
}

bool subset(const LayerPlan& inner, const LayerPlan& outer) {
  for (std::size_t i = 0; i < inner.keep.size(); ++i) {
    if (inner.keep[i] && !outer.keep[i]) return false;
  }
  return true;
}

NetworkSpec residual_net() {
  nlohmann::json j = {
      {"name", "res"},
      {"input_shape", {2, 6, 6}},
      {"layers",
       {{{"id", 1}, {"kind", "conv"}, {"in_channels", 2}, {"out_channels", 4}, {"kernel", 3}, {"padding", 1}, {"prunable", true}},
        {{"id", 2}, {"kind", "relu"}},
        {{"id", 3}, {"kind", "conv"}, {"in_channels", 4}, {"out_channels", 4}, {"kernel", 3}, {"padding", 1}, {"prunable", true}},
        {{"id", 4}, {"kind", "residual_add"}, {"skip_from", 2}},
        {{"id", 5}, {"kind", "relu"}},
        {{"id", 6}, {"kind", "conv"}, {"in_channels", 4}, {"out_channels", 4}, {"kernel", 3}, {"padding", 1}, {"prunable", true}},
        {{"id", 7}, {"kind", "relu"}},
        {{"id", 8}, {"kind", "avgpool"}, {"kernel", 6}},
        {{"id", 9}, {"kind", "flatten"}},
        {{"id", 10}, {"kind", "fc"}, {"in_features", 4}, {"out_features", 2}}}},
      {"residual_groups", {{1, 3}}}};
  return network_from_json(j);
}

}  // namespace

TEST_CASE("importance: affine map examples") {
  const auto t = importance(table({{1, {5.2}}}), ab_of({1}, {{2.0, -1.0}}));
  CHECK(t.values.at(1)[0] == doctest::Approx(9.4).epsilon(1e-15));

  const auto fp = table({{1, {3.0, 1.0, 2.0}}, {3, {0.5, 4.0}}});
  const auto spec = desk_cnn();
  const auto id = importance(fp, ab_of({1, 3}, {{1, 0}, {1, 0}}));
  CHECK(id.values == fp.values);
  CHECK(id.order.size() == 5);
  CHECK(id.order.front() == FilterRef{3, 1});
  CHECK(id.order.back() == FilterRef{3, 0});

  const auto shifted = importance(table({{1, {3.0, 1.0}}, {2, {2.5}}}), ab_of({1, 2}, {{1, 0}, {1, 10}}));
  CHECK(shifted.order.front() == FilterRef{2, 0});

  CHECK_THROWS_AS(importance(fp, ab_of({1}, {{1, 0}})), ValidationError);
  CHECK_THROWS_AS(importance(fp, ab_of({1, 6}, {{1, 0}, {1, 0}})), ValidationError);
  (void)spec;
}

TEST_CASE("importance: ties go to the smaller layer id, then filter index") {
  const auto t = importance(table({{1, {2.0, 2.0}}, {3, {2.0}}}), ab_of({1, 3}, {{1, 0}, {1, 0}}));
  CHECK(t.order == std::vector<FilterRef>{{1, 0}, {1, 1}, {3, 0}});
}

TEST_CASE("importance property: exact affine values and a permutation ordering") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    FilterPropertyTable fp;
    ABVector ab;
    for (int id : {1, 3, 5}) {
      fp.values[id] = uniform_values(rng, 1 + static_cast<int>(rng() % 9), 0.0, 8.0);
      ab.layers.push_back(id);
      ab.values.push_back({uniform_values(rng, 1, 0.1, 3.0)[0], uniform_values(rng, 1, -2.0, 2.0)[0]});
    }
    const auto t = importance(fp, ab);
    std::size_t total = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      const auto& vals = fp.values.at(ab.layers[k]);
      total += vals.size();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        CHECK(t.values.at(ab.layers[k])[i] == ab.values[k].a * vals[i] + ab.values[k].b);
      }
    }
    REQUIRE(t.order.size() == total);
    auto sorted = t.order;
    std::sort(sorted.begin(), sorted.end(), [](auto x, auto y) { return std::pair(x.layer, x.index) < std::pair(y.layer, y.index); });
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    for (std::size_t i = 1; i < t.order.size(); ++i) {
      const double prev = t.values.at(t.order[i - 1].layer)[static_cast<std::size_t>(t.order[i - 1].index)];
      const double cur = t.values.at(t.order[i].layer)[static_cast<std::size_t>(t.order[i].index)];
      CHECK(prev >= cur);
    }
  }
}

TEST_CASE("affine equivariance: bit-exact for powers of two, within rounding otherwise") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const auto fp_vals = uniform_values(rng, 6, 0.0, 8.0);
    const LayerAB base{uniform_values(rng, 1, 0.1, 3.0)[0], uniform_values(rng, 1, -2.0, 2.0)[0]};
    const auto ref = importance(table({{1, fp_vals}}), ab_of({1}, {base}));
    for (double c : {0.25, 2.0, 1024.0, 3.0, 0.1, 7.3}) {
      auto scaled = fp_vals;
      for (auto& v : scaled) v *= c;
      const auto t = importance(table({{1, scaled}}), ab_of({1}, {{base.a / c, base.b}}));
      const bool power_of_two = std::exp2(std::round(std::log2(c))) == c;
      for (std::size_t i = 0; i < fp_vals.size(); ++i) {
        if (power_of_two) {
          CHECK(t.values.at(1)[i] == ref.values.at(1)[i]);
        } else {
          CHECK(t.values.at(1)[i] == doctest::Approx(ref.values.at(1)[i]).epsilon(1e-14));
        }
      }
    }
  }
}

TEST_CASE("global-order invariance under a common shift") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    FilterPropertyTable fp;
    ABVector ab;
    for (int id : {1, 3}) {
      // Quarter-step values and shifts keep every sum exact, so ties stay ties.
      std::vector<double> v(6);
      for (auto& x : v) x = static_cast<double>(rng() % 32) / 4.0;
      fp.values[id] = v;
      ab.layers.push_back(id);
      ab.values.push_back({1.0 + static_cast<double>(rng() % 4), static_cast<double>(rng() % 16) / 4.0});
    }
    const auto before = importance(fp, ab);
    auto moved = ab;
    const double shift = static_cast<double>(rng() % 40) / 4.0 - 5.0;
    for (auto& v : moved.values) v.b += shift;
    CHECK(importance(fp, moved).order == before.order);
  }
}

TEST_CASE("layer_sparsity and objective_value examples") {
  CompressionPlan plan;
  LayerPlan half;
  half.prunable = true;
  half.keep = std::vector<bool>(16, true);
  fixture::keep_first(half, 8);
  LayerPlan full = half;
  fixture::keep_first(full, 16);
  LayerPlan one = half;
  fixture::keep_first(one, 1);
  LayerPlan fixed;
  fixed.keep = std::vector<bool>(4, true);
  plan.layers = {{1, half}, {2, full}, {3, one}, {4, fixed}};
  const auto s = layer_sparsity(plan);
  CHECK(s.size() == 3);
  CHECK(s.at(1) == 0.5);
  CHECK(s.at(2) == 1.0);
  CHECK(s.at(3) == 0.0625);

  ImportanceTable imp;
  imp.values[1] = {2.0, 5.0};
  CompressionPlan two;
  LayerPlan lp;
  lp.keep = {true, true};
  two.layers[1] = lp;
  CHECK(objective_value(imp, two) == 0.0);
  two.layers[1].keep = {false, true};
  CHECK(objective_value(imp, two) == 2.0);
  imp.values[1].push_back(1.0);
  CHECK_THROWS_AS(objective_value(imp, two), ValidationError);
}

TEST_CASE("derive_masks: budget 1 keeps every filter") {
  const auto spec = fixture::two_conv_8();
  const auto sched = default_schedule(spec, 8, 4);
  std::mt19937_64 rng(14);
  const auto imp = importance(table({{1, uniform_values(rng, 8, 0, 6)}, {3, uniform_values(rng, 8, 0, 6)}}),
                              ABVector::identity(spec));
  const auto flops = derive_masks(imp, spec, sched, 1.0, BudgetMode::flops);
  const auto joint = derive_masks(imp, spec, sched, 1.0, BudgetMode::bops);
  for (const CompressionPlan* plan : {&flops, &joint}) {
    for (const auto& [id, lp] : plan->layers) CHECK(lp.kept() == static_cast<int>(lp.keep.size()));
  }
  CHECK(flops.achieved_ratio == 1.0);
  for (const auto& [id, lp] : flops.layers) CHECK(lp.n_w == kFullPrecisionBits);
  // Quantization alone already compresses in joint mode.
  CHECK(joint.achieved_ratio >= 1.0);
  CHECK(joint.layers.at(3).n_w == 4);
  CHECK(joint.layers.at(1).n_w == kFullPrecisionBits);
  CHECK(joint.layers.at(1).exempt);
  CHECK_THROWS_AS(derive_masks(imp, spec, sched, 0.5), ValidationError);
}

TEST_CASE("derive_masks: infeasible budget reports the ratio at the floors") {
  const auto spec = fixture::two_conv_8();
  const auto sched = default_schedule(spec, 8, 4);
  std::mt19937_64 rng(15);
  const auto imp = importance(table({{1, uniform_values(rng, 8, 0, 6)}, {3, uniform_values(rng, 8, 0, 6)}}),
                              ABVector::identity(spec));
  const double max_ratio = oracle::TwoConvSearch::ratio(1, 1);
  try {
    derive_masks(imp, spec, sched, max_ratio * 1.01);
    FAIL("expected InfeasibleBudget");
  } catch (const InfeasibleBudget& e) {
    CHECK(e.max_achievable() == doctest::Approx(max_ratio).epsilon(1e-12));
    CHECK(e.requested() == doctest::Approx(max_ratio * 1.01));
  }
  const auto at_floor = derive_masks(imp, spec, sched, max_ratio);
  CHECK(at_floor.layers.at(1).kept() == 1);
  CHECK(at_floor.layers.at(3).kept() == 1);

  FloorPolicy floors;
  floors.overrides[1] = 3;
  CHECK_THROWS_AS(derive_masks(imp, spec, sched, max_ratio, BudgetMode::bops, floors), InfeasibleBudget);
  const auto floored = derive_masks(imp, spec, sched, oracle::TwoConvSearch::ratio(3, 1), BudgetMode::bops, floors);
  CHECK(floored.layers.at(1).kept() == 3);
}

TEST_CASE("FloorPolicy default is max(1, ceil(0.0625 * filters))") {
  const FloorPolicy f;
  CHECK(f.floor_for(1, 8) == 1);
  CHECK(f.floor_for(1, 16) == 1);
  CHECK(f.floor_for(1, 17) == 2);
  CHECK(f.floor_for(1, 64) == 4);
  CHECK(f.floor_for(1, 65) == 5);
}

TEST_CASE("derive_masks agrees with the cost oracle and stops at the first feasible prefix") {
  const auto spec = fixture::two_conv_8();
  const auto sched = default_schedule(spec, 8, 4);
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 60; ++trial) {
    const auto imp = importance(table({{1, uniform_values(rng, 8, 0, 6)}, {3, uniform_values(rng, 8, 0, 6)}}),
                                ABVector::identity(spec));
    const double budget = 1.0 + uniform_values(rng, 1, 0.0, 20.0)[0];
    const auto plan = derive_masks(imp, spec, sched, budget);
    const int k1 = plan.layers.at(1).kept(), k3 = plan.layers.at(3).kept();
    CHECK(plan.achieved_bops == oracle::TwoConvSearch::bops(k1, k3));
    CHECK(plan.achieved_ratio >= budget);
    CHECK(plan.layers.at(3).n_w == oracle::bitwidth(4, oracle::Rational(1, 6), oracle::Rational(k3, 8)));
    CHECK_NOTHROW(check_plan(spec, plan));

    // Replay: walk the ascending global order, skip layers at their floor, stop once the
    // oracle ratio meets the budget.
    std::map<int, std::vector<bool>> keep{{1, std::vector<bool>(8, true)}, {3, std::vector<bool>(8, true)}};
    int r1 = 8, r3 = 8;
    for (auto it = imp.order.rbegin(); it != imp.order.rend(); ++it) {
      if (oracle::TwoConvSearch::ratio(r1, r3) >= budget) break;
      int& k = it->layer == 1 ? r1 : r3;
      if (k == 1) continue;
      --k;
      keep[it->layer][static_cast<std::size_t>(it->index)] = false;
    }
    CHECK(plan.layers.at(1).keep == keep[1]);
    CHECK(plan.layers.at(3).keep == keep[3]);
  }
}

TEST_CASE("nested masks: the kept set is antitone in the budget") {
  const auto spec = desk_cnn();
  const auto sched = default_schedule(spec, 8, 2);
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    FilterPropertyTable fp;
    for (int id : spec.prunable_ids()) fp.values[id] = uniform_values(rng, spec.layer(id).out_channels, 0, 16);
    ABVector ab = ABVector::identity(spec);
    for (auto& v : ab.values) v = {uniform_values(rng, 1, 0.2, 2.0)[0], uniform_values(rng, 1, -3.0, 3.0)[0]};
    const auto imp = importance(fp, ab);
    for (auto mode : {BudgetMode::bops, BudgetMode::flops}) {
      std::optional<CompressionPlan> prev;
      std::uint64_t prev_cost = 0;
      for (double budget : {1.0, 1.5, 2.0, 4.0, 8.0, 16.0, 30.0}) {
        CompressionPlan plan;
        try {
          plan = derive_masks(imp, spec, sched, budget, mode);
        } catch (const InfeasibleBudget&) {
          break;
        }
        const auto cost = model_cost(spec, &plan);
        const std::uint64_t c = mode == BudgetMode::flops ? cost.flops : cost.bops;
        if (prev) {
          for (const auto& [id, lp] : plan.layers) CHECK(subset(lp, prev->layers.at(id)));
          CHECK(c <= prev_cost);
        }
        prev = plan;
        prev_cost = c;
      }
    }
  }
}

TEST_CASE("termination: every greedy removal strictly lowers the cost") {
  const auto spec = desk_cnn();
  const auto sched = default_schedule(spec, 8, 2);
  std::mt19937_64 rng(18);
  FilterPropertyTable fp;
  for (int id : spec.prunable_ids()) fp.values[id] = uniform_values(rng, spec.layer(id).out_channels, 0, 16);
  const auto imp = importance(fp, ABVector::identity(spec));
  const CostModel cost(spec);
  // Replays the greedy removals one at a time through the public cost model.
  std::map<int, int> kept;
  for (int id : spec.prunable_ids()) kept[id] = spec.layer(id).out_channels;
  auto bops_of = [&] {
    std::map<int, double> s;
    for (auto [id, k] : kept) s[id] = static_cast<double>(k) / spec.layer(id).out_channels;
    return cost.evaluate(kept, assign_bitwidths(s, sched)).bops;
  };
  std::uint64_t last = bops_of();
  for (auto it = imp.order.rbegin(); it != imp.order.rend(); ++it) {
    if (kept[it->layer] == 1) continue;
    --kept[it->layer];
    const auto now = bops_of();
    CHECK(now < last);
    last = now;
  }
}

TEST_CASE("residual groups are pruned jointly by summed importance") {
  const auto spec = residual_net();
  const auto sched = default_schedule(spec, 8, 2);
  // Slot 2 has the smallest group sum (0.5 + 0.5) though slot 0 holds the single
  // smallest member importance.
  const auto fp = table({{1, {0.1, 3.0, 0.5, 4.0}}, {3, {5.0, 3.0, 0.5, 4.0}}, {6, {9.0, 9.0, 9.0, 9.0}}});
  const auto imp = importance(fp, ABVector::identity(spec));
  const auto flops_after_one = [&] {
    CompressionPlan p = CompressionPlan::identity(spec);
    p.mode = BudgetMode::flops;
    p.layers.at(1).keep[2] = p.layers.at(3).keep[2] = false;
    return model_cost(spec, &p).flops_ratio;
  }();
  const auto plan = derive_masks(imp, spec, sched, flops_after_one, BudgetMode::flops);
  CHECK(plan.layers.at(1).keep == std::vector<bool>{true, true, false, true});
  CHECK(plan.layers.at(3).keep == plan.layers.at(1).keep);
  CHECK(plan.layers.at(6).kept() == 4);

  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 40; ++trial) {
    FilterPropertyTable r;
    for (int id : {1, 3, 6}) r.values[id] = uniform_values(rng, 4, 0, 6);
    const auto ri = importance(r, ABVector::identity(spec));
    try {
      const auto p = derive_masks(ri, spec, sched, 1.0 + uniform_values(rng, 1, 0, 30)[0]);
      CHECK(p.layers.at(1).keep == p.layers.at(3).keep);
      CHECK(p.layers.at(1).kept() >= 1);
      CHECK(p.layers.at(6).kept() >= 1);
      CHECK_NOTHROW(check_plan(spec, p));
    } catch (const InfeasibleBudget&) {
    }
  }
}

TEST_CASE("greedy is optimal among plans with the same per-layer counts") {
  // Cost depends only on per-layer kept counts, so equal counts means equal cost.
  const auto spec = fixture::two_conv_8();
  const auto sched = default_schedule(spec, 8, 4);
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 12; ++trial) {
    std::vector<double> i1(8), i3(8);
    for (auto* v : {&i1, &i3}) {
      for (auto& x : *v) x = static_cast<double>(rng() % 25) / 4.0;
    }
    const oracle::TwoConvSearch exhaustive(i1, i3, 1.0);
    const auto imp = importance(table({{1, i1}, {3, i3}}), ABVector::identity(spec));
    for (double budget : {2.0, 4.0, 6.0, 8.0, 16.0}) {
      const auto plan = derive_masks(imp, spec, sched, budget);
      const auto counts = std::pair(plan.layers.at(1).kept(), plan.layers.at(3).kept());
      CHECK(objective_value(imp, plan) == doctest::Approx(exhaustive.best_by_counts.at(counts)).epsilon(1e-12));
    }
  }
}

TEST_CASE("greedy matches exhaustive search wherever the budget is met by quantization alone") {
  const auto spec = fixture::two_conv_8();
  const auto sched = default_schedule(spec, 8, 4);
  const std::vector<double> i1{6.0, 6.0, 5.8, 5.4, 6.0, 6.0, 4.6, 4.6};
  const std::vector<double> i3{6.0, 5.2, 5.1, 5.3, 2.1, 5.7, 6.0, 6.0};
  const auto imp = importance(table({{1, i1}, {3, i3}}), ABVector::identity(spec));
  for (double budget : {1.0, 2.0, 3.0}) {
    const oracle::TwoConvSearch exhaustive(i1, i3, budget);
    const auto plan = derive_masks(imp, spec, sched, budget);
    CHECK(objective_value(imp, plan) == exhaustive.best_removed);
    CHECK(mask_bits(plan.layers.at(1)) == 0xFFu);
  }
}

TEST_CASE("plan JSON round trip and validation") {
  const auto spec = desk_cnn();
  std::mt19937_64 rng(21);
  auto plan = fixture::random_mask_plan(spec, rng);
  const auto sched = default_schedule(spec, 8, 2);
  FilterPropertyTable fp;
  for (int id : spec.prunable_ids()) fp.values[id] = uniform_values(rng, spec.layer(id).out_channels, 0, 16);
  const auto derived = derive_masks(importance(fp, ABVector::identity(spec)), spec, sched, 20.0);
  for (const CompressionPlan* p : std::initializer_list<const CompressionPlan*>{&plan, &derived}) {
    const auto j = plan_to_json(*p);
    CHECK(plan_from_json(spec, j) == *p);
    CHECK(plan_to_json(plan_from_json(spec, j)).dump() == j.dump());
  }
  const auto j = plan_to_json(derived);
  CHECK(j.contains("requested_ratio"));
  CHECK(j.contains("achieved_ratio"));
  CHECK(j.contains("achieved_bops"));
  std::size_t at3 = 0;
  while (j.at("layers").at(at3).at("id") != 3) ++at3;
  CHECK(j.at("layers").at(at3).contains("keep_indices"));
  CHECK(j.at("layers").at(at3).contains("exempt"));

  auto bad = j;
  bad["layers"][at3]["keep_indices"] = nlohmann::json::array();
  CHECK_THROWS_AS(plan_from_json(spec, bad), ValidationError);
  bad = j;
  bad["layers"][at3]["keep_indices"] = {0, 99};
  CHECK_THROWS_AS(plan_from_json(spec, bad), ValidationError);
  bad = j;
  bad["layers"][at3]["n_w"] = 1;
  bad["layers"][at3]["exempt"] = false;
  CHECK_THROWS_AS(plan_from_json(spec, bad), ValidationError);
  bad = j;
  bad["layers"].erase(at3);
  CHECK_THROWS_AS(plan_from_json(spec, bad), ValidationError);
  CHECK_THROWS_AS(plan_from_json(spec, nlohmann::json::array()), ValidationError);
}

TEST_CASE("a-b vector JSON round trip") {
  const auto spec = desk_cnn();
  auto ab = ABVector::identity(spec);
  CHECK(ab.layers == spec.prunable_ids());
  ab.values[1] = {0.75, -1.25};
  CHECK(ab_from_json(ab_to_json(ab)) == ab);
  CHECK(ab.at_layer(ab.layers[1]) == LayerAB{0.75, -1.25});
  CHECK_THROWS_AS(ab_from_json(nlohmann::json{{"x", 1}}), ValidationError);
}
