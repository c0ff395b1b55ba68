#include "picpq/network.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "picpq/errors.hpp"
#include "picpq/tensor.hpp"

namespace picpq {

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::fc: return "fc";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::residual_add: return "residual_add";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  static const std::map<std::string, LayerKind> kinds = {
      {"conv", LayerKind::conv},       {"fc", LayerKind::fc},
      {"relu", LayerKind::relu},       {"maxpool", LayerKind::maxpool},
      {"avgpool", LayerKind::avgpool}, {"flatten", LayerKind::flatten},
      {"residual_add", LayerKind::residual_add}};
  auto it = kinds.find(name);
  if (it == kinds.end()) throw ValidationError("unknown layer kind '" + name + "'");
  return it->second;
}

const LayerSpec& NetworkSpec::layer(int id) const {
  return layers.at(static_cast<std::size_t>(index_of(id)));
}

int NetworkSpec::index_of(int id) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].id == id) return static_cast<int>(i);
  }
  throw ValidationError("no layer with id " + std::to_string(id));
}

std::vector<int> NetworkSpec::prunable_ids() const {
  std::vector<int> ids;
  for (const auto& l : layers) {
    if (l.prunable) ids.push_back(l.id);
  }
  return ids;
}

std::vector<int> NetworkSpec::parameterized_ids() const {
  std::vector<int> ids;
  for (const auto& l : layers) {
    if (l.has_params()) ids.push_back(l.id);
  }
  return ids;
}

int NetworkSpec::num_classes() const {
  const auto geo = infer_geometry(*this);
  return geo.back().out.size();
}

const std::vector<int>* NetworkSpec::group_of(int id) const {
  for (const auto& g : residual_groups) {
    if (std::find(g.begin(), g.end(), id) != g.end()) return &g;
  }
  return nullptr;
}

namespace {

struct Inference {
  std::vector<LayerGeometry> geometry;
  std::map<int, std::string> problems;  // layer id -> reason
};

void note(Inference& inf, int id, const std::string& why) {
  auto& s = inf.problems[id];
  if (!s.empty()) s += "; ";
  s += why;
}

Inference infer(const NetworkSpec& spec) {
  Inference inf;
  std::set<int> seen;
  std::map<int, int> source_of_output;  // layer id -> channel source of its output
  std::map<int, Shape3> out_of;
  Shape3 cur = spec.input_shape;
  int source = -1;
  int features_per_channel = 1;

  if (cur.c <= 0 || cur.h <= 0 || cur.w <= 0) note(inf, -1, "input shape must be positive");

  for (const auto& l : spec.layers) {
    if (!seen.insert(l.id).second) note(inf, l.id, "duplicate layer id");
    LayerGeometry g;
    g.in = cur;
    g.channel_source = source;
    g.features_per_channel = features_per_channel;
    Shape3 out = cur;
    switch (l.kind) {
      case LayerKind::conv: {
        if (l.kernel < 1 || l.stride < 1 || l.padding < 0) {
          note(inf, l.id, "kernel and stride must be >= 1, padding >= 0");
          break;
        }
        if (features_per_channel != 1) note(inf, l.id, "conv after flatten");
        if (l.in_channels != cur.c) {
          note(inf, l.id, "in_channels " + std::to_string(l.in_channels) +
                              " does not match incoming " + std::to_string(cur.c));
        }
        if (l.out_channels < 1) note(inf, l.id, "out_channels must be >= 1");
        out.c = l.out_channels;
        out.h = (cur.h + 2 * l.padding - l.kernel) / l.stride + 1;
        out.w = (cur.w + 2 * l.padding - l.kernel) / l.stride + 1;
        if (cur.h + 2 * l.padding < l.kernel || cur.w + 2 * l.padding < l.kernel) {
          note(inf, l.id, "kernel larger than padded input");
          out.h = out.w = 1;
        }
        source = l.id;
        features_per_channel = 1;
        break;
      }
      case LayerKind::fc: {
        if (l.in_features != cur.size()) {
          note(inf, l.id, "in_features " + std::to_string(l.in_features) +
                              " does not match incoming " + std::to_string(cur.size()));
        }
        if (l.out_features < 1) note(inf, l.id, "out_features must be >= 1");
        if (l.prunable) note(inf, l.id, "only conv layers can be prunable");
        if (cur.h != 1 || cur.w != 1) note(inf, l.id, "fc input must be flattened");
        out = {l.out_features, 1, 1};
        source = l.id;
        features_per_channel = 1;
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool: {
        if (l.kernel < 1 || l.stride < 1 || l.kernel > cur.h || l.kernel > cur.w) {
          note(inf, l.id, "pool window must be >= 1 and fit the input");
          break;
        }
        out.h = (cur.h - l.kernel) / l.stride + 1;
        out.w = (cur.w - l.kernel) / l.stride + 1;
        break;
      }
      case LayerKind::flatten: {
        features_per_channel *= cur.h * cur.w;
        out = {cur.size(), 1, 1};
        break;
      }
      case LayerKind::residual_add: {
        auto it = out_of.find(l.skip_from);
        if (it == out_of.end()) {
          note(inf, l.id, "skip_from must name an earlier layer");
          break;
        }
        if (!(it->second == cur)) note(inf, l.id, "residual operands differ in shape");
        const int other = source_of_output[l.skip_from];
        if (other != source) {
          auto prunable = [&](int id) { return id >= 0 && spec.layer(id).prunable; };
          const auto* ga = source >= 0 ? spec.group_of(source) : nullptr;
          const bool same_group =
              ga && std::find(ga->begin(), ga->end(), other) != ga->end();
          if ((prunable(source) || prunable(other)) && !same_group) {
            note(inf, l.id, "prunable residual operands must share a residual group");
          }
        }
        break;
      }
    }
    if (l.prunable && l.kind != LayerKind::conv && l.kind != LayerKind::fc) {
      note(inf, l.id, "only conv layers can be prunable");
    }
    g.out = out;
    inf.geometry.push_back(g);
    out_of[l.id] = out;
    source_of_output[l.id] = source;
    cur = out;
  }
  if (spec.layers.empty()) note(inf, -1, "network has no layers");

  for (const auto& group : spec.residual_groups) {
    int channels = -1;
    for (int id : group) {
      if (!seen.count(id)) {
        note(inf, id, "residual group references unknown layer");
        continue;
      }
      const auto& l = spec.layer(id);
      if (l.kind != LayerKind::conv) {
        note(inf, id, "residual group member is not a conv layer");
        continue;
      }
      if (channels >= 0 && l.out_channels != channels) {
        note(inf, id, "residual group members differ in out_channels");
      }
      channels = l.out_channels;
      if (!l.prunable && group.size() > 1) {
        for (int other : group) {
          if (seen.count(other) && spec.layer(other).prunable) {
            note(inf, id, "residual group mixes prunable and fixed layers");
            break;
          }
        }
      }
    }
  }
  for (int id : spec.full_precision_layers) {
    if (!seen.count(id) || !spec.layer(id).has_params()) {
      note(inf, id, "full-precision layer must be an existing conv or fc layer");
    }
  }
  return inf;
}

}  // namespace

void validate(const NetworkSpec& spec) {
  const auto inf = infer(spec);
  if (inf.problems.empty()) return;
  std::ostringstream os;
  os << "invalid network '" << spec.name << "': offending layer ids";
  for (const auto& [id, why] : inf.problems) os << " [" << id << ": " << why << "]";
  throw ValidationError(os.str());
}

std::vector<LayerGeometry> infer_geometry(const NetworkSpec& spec) {
  auto inf = infer(spec);
  if (!inf.problems.empty()) validate(spec);
  return std::move(inf.geometry);
}

int activation_site(const NetworkSpec& spec, int layer_id) {
  const int idx = spec.index_of(layer_id);
  const auto next = static_cast<std::size_t>(idx + 1);
  if (next < spec.layers.size() && spec.layers[next].kind == LayerKind::relu) {
    return spec.layers[next].id;
  }
  return layer_id;
}

NetworkSpec network_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  try {
    spec.name = j.value("name", "network");
    const auto& in = j.at("input_shape");
    spec.input_shape = {in.at(0).get<int>(), in.at(1).get<int>(), in.at(2).get<int>()};
    for (const auto& jl : j.at("layers")) {
      LayerSpec l;
      l.id = jl.at("id").get<int>();
      l.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
      l.in_channels = jl.value("in_channels", 0);
      l.out_channels = jl.value("out_channels", 0);
      l.kernel = jl.value("kernel", 1);
      l.stride = jl.value("stride", l.kind == LayerKind::maxpool || l.kind == LayerKind::avgpool
                                        ? l.kernel
                                        : 1);
      l.padding = jl.value("padding", 0);
      l.in_features = jl.value("in_features", 0);
      l.out_features = jl.value("out_features", 0);
      l.skip_from = jl.value("skip_from", -1);
      l.prunable = jl.value("prunable", false);
      spec.layers.push_back(l);
    }
    if (j.contains("residual_groups")) {
      spec.residual_groups = j.at("residual_groups").get<std::vector<std::vector<int>>>();
    }
    if (j.contains("full_precision_layers")) {
      for (int id : j.at("full_precision_layers")) spec.full_precision_layers.insert(id);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed network JSON: ") + e.what());
  }
  validate(spec);
  return spec;
}

nlohmann::json network_to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["name"] = spec.name;
  j["input_shape"] = {spec.input_shape.c, spec.input_shape.h, spec.input_shape.w};
  auto layers = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    nlohmann::json jl{{"id", l.id}, {"kind", to_string(l.kind)}};
    switch (l.kind) {
      case LayerKind::conv:
        jl["in_channels"] = l.in_channels;
        jl["out_channels"] = l.out_channels;
        jl["kernel"] = l.kernel;
        jl["stride"] = l.stride;
        jl["padding"] = l.padding;
        jl["prunable"] = l.prunable;
        break;
      case LayerKind::fc:
        jl["in_features"] = l.in_features;
        jl["out_features"] = l.out_features;
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool:
        jl["kernel"] = l.kernel;
        jl["stride"] = l.stride;
        break;
      case LayerKind::residual_add:
        jl["skip_from"] = l.skip_from;
        break;
      default:
        break;
    }
    layers.push_back(jl);
  }
  j["layers"] = layers;
  j["residual_groups"] = spec.residual_groups;
  j["full_precision_layers"] = spec.full_precision_layers;
  return j;
}

NetworkSpec load_network(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open network spec " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("cannot parse " + path + ": " + e.what());
  }
  return network_from_json(j);
}

NetworkSpec desk_cnn(int num_classes) {
  NetworkSpec spec;
  spec.name = "desk_cnn";
  spec.input_shape = {3, 16, 16};
  auto conv = [](int id, int in, int out) {
    LayerSpec l;
    l.id = id;
    l.kind = LayerKind::conv;
    l.in_channels = in;
    l.out_channels = out;
    l.kernel = 3;
    l.stride = 1;
    l.padding = 1;
    l.prunable = true;
    return l;
  };
  auto simple = [](int id, LayerKind kind, int kernel = 1) {
    LayerSpec l;
    l.id = id;
    l.kind = kind;
    l.kernel = kernel;
    l.stride = kernel;
    return l;
  };
  spec.layers = {conv(1, 3, 16),
                 simple(2, LayerKind::relu),
                 conv(3, 16, 16),
                 simple(4, LayerKind::relu),
                 simple(5, LayerKind::maxpool, 2),
                 conv(6, 16, 32),
                 simple(7, LayerKind::relu),
                 conv(8, 32, 32),
                 simple(9, LayerKind::relu),
                 simple(10, LayerKind::avgpool, 8),
                 simple(11, LayerKind::flatten)};
  LayerSpec fc;
  fc.id = 12;
  fc.kind = LayerKind::fc;
  fc.in_features = 32;
  fc.out_features = num_classes;
  spec.layers.push_back(fc);
  validate(spec);
  return spec;
}

}  // namespace picpq
