#include "picpq/cost.hpp"

#include "picpq/errors.hpp"

namespace picpq {

std::uint64_t layer_bops(const LayerSpec& layer, int kept_in, int kept_out, int b_w, int b_a,
                         int out_h, int out_w) {
  const std::uint64_t k = layer.kind == LayerKind::conv ? static_cast<std::uint64_t>(layer.kernel) : 1;
  if (layer.kind == LayerKind::fc) out_h = out_w = 1;
  return static_cast<std::uint64_t>(kept_in) * static_cast<std::uint64_t>(kept_out) * k * k *
         static_cast<std::uint64_t>(out_h) * static_cast<std::uint64_t>(out_w) *
         static_cast<std::uint64_t>(b_w) * static_cast<std::uint64_t>(b_a);
}

CostModel::CostModel(const NetworkSpec& spec) {
  const auto geo = infer_geometry(spec);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (!l.has_params()) continue;
    Entry e;
    e.layer = &l;
    e.source = geo[i].channel_source;
    e.features_per_channel = geo[i].features_per_channel;
    e.fixed_in = l.kind == LayerKind::conv ? geo[i].in.c : l.in_features;
    e.out_h = geo[i].out.h;
    e.out_w = geo[i].out.w;
    e.out_total = l.kind == LayerKind::conv ? l.out_channels : l.out_features;
    entries_.push_back(e);
  }
  baseline_ = evaluate({}, {});
}

CostModel::Totals CostModel::evaluate(const std::map<int, int>& kept, const BitwidthAssignment& bits,
                                      std::vector<LayerCost>* per_layer) const {
  auto kept_of = [&](int id, int total) {
    auto it = kept.find(id);
    return it == kept.end() ? total : it->second;
  };
  std::map<int, int> out_kept;
  Totals t;
  if (per_layer) per_layer->clear();
  for (const auto& e : entries_) {
    const int kin = e.source < 0 ? e.fixed_in : out_kept.at(e.source) * e.features_per_channel;
    const int kout = kept_of(e.layer->id, e.out_total);
    out_kept[e.layer->id] = kout;
    LayerBits b;
    if (auto it = bits.find(e.layer->id); it != bits.end()) b = it->second;
    const auto flops = layer_bops(*e.layer, kin, kout, 1, 1, e.out_h, e.out_w);
    const auto bops = flops * static_cast<std::uint64_t>(b.weight) * static_cast<std::uint64_t>(b.activation);
    t.flops += flops;
    t.bops += bops;
    if (per_layer) per_layer->push_back({e.layer->id, kin, kout, b.weight, b.activation, flops, bops});
  }
  return t;
}

CostReport model_cost(const NetworkSpec& spec, const CompressionPlan* plan) {
  CostModel model(spec);
  std::map<int, int> kept;
  BitwidthAssignment bits;
  if (plan) {
    check_plan(spec, *plan);
    for (const auto& [id, lp] : plan->layers) {
      kept[id] = lp.kept();
      bits[id] = lp.exempt ? LayerBits{} : LayerBits{lp.n_w, lp.n_a};
    }
  }
  CostReport r;
  const auto totals = model.evaluate(kept, bits, &r.layers);
  r.flops = totals.flops;
  r.bops = totals.bops;
  r.baseline_flops = model.baseline().flops;
  r.baseline_bops = model.baseline().bops;
  r.flops_ratio = static_cast<double>(r.baseline_flops) / static_cast<double>(r.flops);
  r.bops_ratio = static_cast<double>(r.baseline_bops) / static_cast<double>(r.bops);
  return r;
}

nlohmann::json report_to_json(const CostReport& report) {
  nlohmann::json j;
  auto layers = nlohmann::json::array();
  for (const auto& l : report.layers) {
    layers.push_back({{"id", l.id},
                      {"kept_in", l.kept_in},
                      {"kept_out", l.kept_out},
                      {"b_w", l.b_w},
                      {"b_a", l.b_a},
                      {"flops", l.flops},
                      {"bops", l.bops}});
  }
  j["layers"] = layers;
  j["flops"] = report.flops;
  j["bops"] = report.bops;
  j["baseline_flops"] = report.baseline_flops;
  j["baseline_bops"] = report.baseline_bops;
  j["flops_ratio"] = report.flops_ratio;
  j["bops_ratio"] = report.bops_ratio;
  nlohmann::json acc = nlohmann::json::object();
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v) acc[key] = *v;
  };
  put("baseline", report.accuracy.baseline);
  put("pruned", report.accuracy.pruned);
  put("activation_quantized", report.accuracy.activation_quantized);
  put("fully_quantized", report.accuracy.fully_quantized);
  j["accuracy"] = acc;
  return j;
}

}  // namespace picpq
