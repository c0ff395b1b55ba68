#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace picpq {

enum class LayerKind { conv, fc, relu, maxpool, avgpool, flatten, residual_add };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
  int id = 0;
  LayerKind kind = LayerKind::relu;
  // conv
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;  // also the pooling window
  int stride = 1;
  int padding = 0;
  // fc
  int in_features = 0;
  int out_features = 0;
  // residual_add: output = previous output + output of layer `skip_from`
  int skip_from = -1;
  bool prunable = false;

  bool has_params() const { return kind == LayerKind::conv || kind == LayerKind::fc; }
};

/// Channels x height x width of an activation.
struct Shape3 {
  int c = 0;
  int h = 0;
  int w = 0;

  int size() const { return c * h * w; }
  bool operator==(const Shape3&) const = default;
};

struct NetworkSpec {
  std::string name;
  Shape3 input_shape;
  std::vector<LayerSpec> layers;
  std::vector<std::vector<int>> residual_groups;
  std::set<int> full_precision_layers;

  const LayerSpec& layer(int id) const;
  int index_of(int id) const;
  std::vector<int> prunable_ids() const;
  std::vector<int> parameterized_ids() const;
  int num_classes() const;
  /// Residual group containing `id`, if any.
  const std::vector<int>* group_of(int id) const;
};

/// Static per-layer geometry derived from a validated spec.
struct LayerGeometry {
  Shape3 in;
  Shape3 out;
  /// Parameterized layer whose output channels feed this layer's input, or -1 for the
  /// network input. For an fc layer after a flatten this is the conv before the flatten.
  int channel_source = -1;
  /// Input features per source channel (spatial size collapsed by a flatten, else 1).
  int features_per_channel = 1;
};

/// Validates the network and throws ValidationError listing every offending layer id.
void validate(const NetworkSpec& spec);

/// Per-layer geometry keyed by layer index (same order as spec.layers).
std::vector<LayerGeometry> infer_geometry(const NetworkSpec& spec);

/// For a conv/fc layer id, the id of the layer whose output is its post-activation map:
/// the relu directly following it when there is one, otherwise the layer itself.
int activation_site(const NetworkSpec& spec, int layer_id);

NetworkSpec network_from_json(const nlohmann::json& j);
nlohmann::json network_to_json(const NetworkSpec& spec);
NetworkSpec load_network(const std::string& path);

/// Four-conv desk network (16/16/32/32 filters, one fc) over 3x16x16 inputs.
NetworkSpec desk_cnn(int num_classes = 3);

}  // namespace picpq
