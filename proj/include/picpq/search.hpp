#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "picpq/dataset.hpp"
#include "picpq/engine.hpp"
#include "picpq/model.hpp"
#include "picpq/network.hpp"
#include "picpq/plan.hpp"
#include "picpq/quantize.hpp"
#include "picpq/rank.hpp"

namespace picpq {

struct SearchConfig {
  double random_walk = 0.5;  // W
  int iterations = 100;      // E
  int sample_size = 4;       // S
  double mutation_ratio = 0.1;
  int population = 16;  // P
  int scoring_steps = 200;
  double budget_ratio = 30.0;
  BudgetMode mode = BudgetMode::bops;
  std::uint64_t seed = 0;
  /// Optimizer settings of the scoring fine-tune; `steps` is replaced by scoring_steps
  /// and `seed` by the search seed.
  FineTuneConfig finetune;
  FloorPolicy floors;
  int threads = 1;
};

void validate(const SearchConfig& config);
SearchConfig search_from_json(const nlohmann::json& j, const SearchConfig& defaults = {});
nlohmann::json search_to_json(const SearchConfig& config);

/// Everything a candidate is scored against. The baseline state is read-only.
struct SearchInputs {
  const NetworkSpec* spec = nullptr;
  const ModelState* baseline = nullptr;
  const FilterPropertyTable* fp = nullptr;
  const BitwidthSchedule* schedule = nullptr;
  const Dataset* train = nullptr;
  const Dataset* validation = nullptr;
};

struct Candidate {
  ABVector ab;
  std::optional<double> score;
  std::int64_t birth_index = 0;
  double achieved_ratio = 0.0;
  bool feasible = false;
};

struct HistoryRecord {
  int iter = 0;  // 0 for the initial population
  Candidate candidate;
};

nlohmann::json history_to_json(const HistoryRecord& record);

struct ScoreResult {
  double score = 0.0;
  double achieved_ratio = 0.0;
  bool feasible = false;
};

/// Masks at the budget, fine-tunes a copy of the baseline (pruned, unquantized) for
/// scoring_steps steps and returns validation accuracy. Infeasible budgets score 0.
ScoreResult score(const ABVector& ab, const SearchInputs& inputs, const SearchConfig& config);

/// Largest per-layer FP range (max - min), the scale of shift mutations.
double fp_spread(const FilterPropertyTable& fp);

/// RNG stream of the candidate born at `birth_index`.
std::mt19937_64 candidate_rng(std::uint64_t seed, std::int64_t birth_index);

/// ceil(u * L) distinct layers get a += N(0, W) and b += N(0, W * spread).
ABVector mutate(const ABVector& parent, const SearchConfig& config, double spread, std::mt19937_64& rng);

/// Identity plus P - 1 Gaussian perturbations (every layer, scale W and W * spread);
/// all scored.
std::vector<Candidate> init_population(const SearchInputs& inputs, const SearchConfig& config);

struct SearchResult {
  Candidate best;
  std::vector<HistoryRecord> history;
  std::vector<Candidate> population;  // final pool, oldest first
};

/// Regularized evolution: tournament of S, mutate, score, replace the oldest.
/// `on_record` (optional) sees every history record as it is produced.
SearchResult search(const SearchInputs& inputs, const SearchConfig& config,
                    const std::function<void(const HistoryRecord&)>& on_record = {});

}  // namespace picpq
