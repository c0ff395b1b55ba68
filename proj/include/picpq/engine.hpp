#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "picpq/dataset.hpp"
#include "picpq/model.hpp"
#include "picpq/network.hpp"
#include "picpq/plan.hpp"
#include "picpq/tensor.hpp"

namespace picpq {

struct ForwardResult {
  Tensor logits;  // N x num_classes
  /// Post-activation maps of every prunable conv (keyed by conv id) when captured.
  std::map<int, Tensor> feature_maps;
};

/// Runs the network on `batch`. Filters masked by `plan` produce exactly-zero channels;
/// layers whose plan bitwidth is below 32 (and are not exempt) see fake-quantized
/// weights and/or activations.
ForwardResult forward(const NetworkSpec& spec, const ModelState& state, const Tensor& batch,
                      const CompressionPlan* plan = nullptr, bool capture = false);

struct FineTuneConfig {
  double learning_rate = 0.01;
  int steps = 200;
  int batch_size = 16;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  bool nesterov = false;
  /// (fraction of steps, multiplier): once step >= fraction * steps the learning rate
  /// is multiplied by `multiplier`; entries compound.
  std::vector<std::pair<double, double>> lr_schedule;
  std::uint64_t seed = 0;
};

void validate(const FineTuneConfig& config);
FineTuneConfig finetune_from_json(const nlohmann::json& j, const FineTuneConfig& defaults = {});
nlohmann::json finetune_to_json(const FineTuneConfig& config);

/// Exactly `config.steps` SGD-with-momentum steps on mean softmax cross-entropy.
/// Parameters of masked filters (and weights reading masked channels) receive no
/// update. Throws NumericError with the step index if the loss turns non-finite.
ModelState finetune(const NetworkSpec& spec, const ModelState& state, const Dataset& data,
                    const FineTuneConfig& config, const CompressionPlan* plan = nullptr);

/// Fraction of argmax-correct predictions; ties resolve to the lowest class index.
double evaluate(const NetworkSpec& spec, const ModelState& state, const Dataset& data,
                const CompressionPlan* plan = nullptr);

/// Records the maximum post-activation value of every quantized layer (with the plan's
/// weight quantization active) over up to `max_samples` images.
ModelState calibrate_activations(const NetworkSpec& spec, const ModelState& state,
                                 const Dataset& data, const CompressionPlan& plan,
                                 std::size_t max_samples = 256);

/// Mean cross-entropy and (optionally) its gradient with respect to the raw parameters.
template <typename T>
T loss_and_gradient(const NetworkSpec& spec, const ParamSet<T>& params,
                    const std::map<int, float>& activation_max, const BasicTensor<T>& images,
                    const std::vector<int>& labels, const CompressionPlan* plan,
                    ParamSet<T>* gradient);

struct GradCheckOptions {
  int max_params = 200;
  double step = 1e-5;
  std::uint64_t seed = 0;
  const CompressionPlan* plan = nullptr;
  /// Test hook applied to the analytic gradient before comparison.
  std::function<void(ParamSet<double>&)> tamper;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  int checked = 0;
  /// Parameters whose +/- step straddles a ReLU or max-pool switch, where central
  /// differences are not valid; they are replaced by other draws.
  int skipped = 0;
  bool passed = false;
};

/// Compares analytic gradients against central differences in 64-bit precision on up to
/// `max_params` randomly chosen parameters. Relative error is
/// |g - fd| / max(|g|, |fd|, 1e-7).
GradCheckReport gradient_check(const NetworkSpec& spec, const ModelState& state,
                               const Dataset& batch, double tolerance,
                               const GradCheckOptions& options = {});

struct ShrunkModel {
  NetworkSpec spec;
  ModelState state;
};

/// Physically deletes masked filters and the input channels that consumed them.
ShrunkModel shrink(const NetworkSpec& spec, const ModelState& state, const CompressionPlan& plan);

}  // namespace picpq
