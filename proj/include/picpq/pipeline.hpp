#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "picpq/cost.hpp"
#include "picpq/dataset.hpp"
#include "picpq/engine.hpp"
#include "picpq/model.hpp"
#include "picpq/network.hpp"
#include "picpq/plan.hpp"
#include "picpq/quantize.hpp"
#include "picpq/rank.hpp"
#include "picpq/search.hpp"

namespace picpq {

struct StageConfigs {
  FineTuneConfig pruned;
  FineTuneConfig activation_quantized;
  FineTuneConfig fully_quantized;
};

struct RankConfig {
  int batches = kDefaultRankBatches;
  int batch_size = 16;
  double tolerance = kDefaultRankTolerance;
};

struct PipelineConfig {
  /// Network JSON path, or "desk_cnn" for the built-in desk network.
  std::string network = "desk_cnn";
  /// Baseline PICW; when empty the baseline is trained from init_model.
  std::string weights;
  /// Either PICD paths or synthetic generator parameters.
  std::string train_data;
  std::string test_data;
  SyntheticParams synthetic;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
  double budget_ratio = 30.0;
  bool prune_only = false;
  int n_first = 8;
  int n_last = 2;
  double penalty = 1.0 / 6.0;
  std::optional<nlohmann::json> schedule;  // full schedule object, overrides the three above
  FloorPolicy floors;
  RankConfig rank;
  SearchConfig search;
  FineTuneConfig baseline{0.05, 1500, 32, 5e-4, 0.9, false, {{0.6, 0.2}, {0.85, 0.2}}, 1};
  StageConfigs stages;
  /// Saved a-b vector; when set the search is skipped ("just-searching-once").
  std::string ab;
  int threads = 1;
};

/// Relative paths inside the file are resolved against the file's directory.
PipelineConfig load_pipeline_config(const std::string& path);
PipelineConfig pipeline_from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
nlohmann::json pipeline_to_json(const PipelineConfig& config);

/// Spec, data splits and schedule resolved from a config.
struct Workspace {
  NetworkSpec spec;
  Dataset train;       // training split without the validation hold-out
  Dataset validation;  // hold-out used for search scores
  Dataset test;
  BitwidthSchedule schedule;
};

Workspace load_workspace(const PipelineConfig& config);

/// Loads config.weights, or trains a baseline on the training split.
ModelState obtain_baseline(const PipelineConfig& config, const Workspace& ws);

FilterPropertyTable extract_fp(const PipelineConfig& config, const Workspace& ws, const ModelState& state);

CompressionPlan make_plan(const PipelineConfig& config, const Workspace& ws, const FilterPropertyTable& fp,
                          const ABVector& ab);

/// The search configuration with budget, mode, seed, floors and threads taken from the
/// pipeline config.
SearchConfig effective_search(const PipelineConfig& config);

struct StagedModels {
  ModelState pruned;
  ModelState activation_quantized;
  ModelState fully_quantized;
  CostReport report;
};

/// Step 1 fine-tunes the pruned full-precision model; steps 2 (activations quantized)
/// and 3 (weights and activations quantized) both start from the step-1 weights.
/// Accuracies in the report are measured on `test`. Prune-only plans stop after step 1
/// and leave the later states equal to it.
StagedModels three_step_finetune(const NetworkSpec& spec, const ModelState& baseline,
                                 const CompressionPlan& plan, const Dataset& train, const Dataset& test,
                                 const StageConfigs& configs);

/// Exclusive lock on an output directory, released on destruction.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Full run: baseline, ranks, search (or saved a-b vector), plan, staged fine-tune.
/// Writes baseline.picw, fp.json, best_ab.json, history.jsonl, plan.json, report.json
/// and stage1/2/3.picw into `out_dir`. Progress lines go to `log` when given. Errors keep their type and
/// gain a "stage <name>: " prefix.
void run_pipeline(const PipelineConfig& config, const std::filesystem::path& out_dir,
                  const std::function<void(const std::string&)>& log = {});

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace picpq
