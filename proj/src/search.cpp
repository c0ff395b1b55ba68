#include "picpq/search.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

#include "picpq/errors.hpp"

namespace picpq {

void validate(const SearchConfig& c) {
  if (!(c.random_walk >= 0)) throw ValidationError("random walk size must be nonnegative");
  if (c.iterations < 0) throw ValidationError("iterations must be nonnegative");
  if (c.population < 1) throw ValidationError("population must be >= 1");
  if (c.sample_size < 1 || c.sample_size > c.population) {
    throw ValidationError("sample size must lie in [1, population]");
  }
  if (!(c.mutation_ratio > 0 && c.mutation_ratio <= 1)) throw ValidationError("mutation ratio must lie in (0, 1]");
  if (c.scoring_steps < 1) throw ValidationError("scoring steps must be >= 1");
  if (!(c.budget_ratio >= 1)) throw ValidationError("budget ratio must be >= 1");
  if (c.threads < 1) throw ValidationError("threads must be >= 1");
  FineTuneConfig ft = c.finetune;
  ft.steps = c.scoring_steps;
  validate(ft);
}

SearchConfig search_from_json(const nlohmann::json& j, const SearchConfig& d) {
  SearchConfig c = d;
  try {
    c.random_walk = j.value("random_walk", d.random_walk);
    c.iterations = j.value("iterations", d.iterations);
    c.sample_size = j.value("sample_size", d.sample_size);
    c.mutation_ratio = j.value("mutation_ratio", d.mutation_ratio);
    c.population = j.value("population", d.population);
    c.scoring_steps = j.value("scoring_steps", d.scoring_steps);
    if (j.contains("finetune")) c.finetune = finetune_from_json(j.at("finetune"), d.finetune);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed search config: ") + e.what());
  }
  validate(c);
  return c;
}

nlohmann::json search_to_json(const SearchConfig& c) {
  return {{"random_walk", c.random_walk},
          {"iterations", c.iterations},
          {"sample_size", c.sample_size},
          {"mutation_ratio", c.mutation_ratio},
          {"population", c.population},
          {"scoring_steps", c.scoring_steps},
          {"budget_ratio", c.budget_ratio},
          {"mode", to_string(c.mode)},
          {"seed", c.seed},
          {"finetune", finetune_to_json(c.finetune)}};
}

nlohmann::json history_to_json(const HistoryRecord& r) {
  const auto& c = r.candidate;
  return {{"iter", r.iter},
          {"birth_index", c.birth_index},
          {"ab", ab_to_json(c.ab)},
          {"score", c.score.value_or(0.0)},
          {"achieved_ratio", c.achieved_ratio},
          {"feasible", c.feasible}};
}

ScoreResult score(const ABVector& ab, const SearchInputs& in, const SearchConfig& config) {
  if (!in.validation || in.validation->size() == 0) throw ValidationError("validation split is empty");
  ScoreResult r;
  CompressionPlan plan;
  try {
    plan = derive_masks(importance(*in.fp, ab), *in.spec, *in.schedule, config.budget_ratio, config.mode,
                        config.floors);
  } catch (const InfeasibleBudget& e) {
    r.achieved_ratio = e.max_achievable();
    return r;
  }
  r.feasible = true;
  r.achieved_ratio = plan.achieved_ratio;
  FineTuneConfig ft = config.finetune;
  ft.steps = config.scoring_steps;
  // Every candidate sees the same mini-batch sequence, so scores differ only by plan.
  ft.seed = config.seed;
  const CompressionPlan pruned = plan.without_quantization();
  const ModelState tuned = finetune(*in.spec, *in.baseline, *in.train, ft, &pruned);
  r.score = evaluate(*in.spec, tuned, *in.validation, &pruned);
  return r;
}

double fp_spread(const FilterPropertyTable& fp) {
  double spread = 0.0;
  for (const auto& [id, v] : fp.values) {
    if (v.empty()) continue;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    spread = std::max(spread, *hi - *lo);
  }
  return spread;
}

std::mt19937_64 candidate_rng(std::uint64_t seed, std::int64_t birth_index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(birth_index), static_cast<std::uint32_t>(birth_index >> 32)};
  return std::mt19937_64(seq);
}

ABVector mutate(const ABVector& parent, const SearchConfig& config, double spread, std::mt19937_64& rng) {
  ABVector child = parent;
  const std::size_t L = parent.size();
  if (L == 0) return child;
  const auto k = std::min(L, static_cast<std::size_t>(std::ceil(config.mutation_ratio * static_cast<double>(L) - 1e-12)));
  std::vector<std::size_t> idx(L);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first k entries are a uniform sample without replacement.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, L - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < k; ++i) {
    auto& v = child.values[idx[i]];
    v.a += config.random_walk * unit(rng);
    v.b += config.random_walk * spread * unit(rng);
  }
  return child;
}

namespace {

void score_into(Candidate& c, const SearchInputs& inputs, const SearchConfig& config) {
  const ScoreResult r = score(c.ab, inputs, config);
  c.score = r.score;
  c.achieved_ratio = r.achieved_ratio;
  c.feasible = r.feasible;
}

void check_inputs(const SearchInputs& in) {
  if (!in.spec || !in.baseline || !in.fp || !in.schedule || !in.train || !in.validation) {
    throw ValidationError("search inputs are incomplete");
  }
}

}  // namespace

std::vector<Candidate> init_population(const SearchInputs& inputs, const SearchConfig& config) {
  validate(config);
  check_inputs(inputs);
  const double spread = fp_spread(*inputs.fp);
  const ABVector identity = ABVector::identity(*inputs.spec);
  std::vector<Candidate> pool(static_cast<std::size_t>(config.population));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    auto& c = pool[i];
    c.birth_index = static_cast<std::int64_t>(i);
    c.ab = identity;
    if (i == 0) continue;
    auto rng = candidate_rng(config.seed, c.birth_index);
    std::normal_distribution<double> unit(0.0, 1.0);
    for (auto& v : c.ab.values) {
      v.a += config.random_walk * unit(rng);
      v.b += config.random_walk * spread * unit(rng);
    }
  }
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(config.threads), pool.size());
  if (workers <= 1) {
    for (auto& c : pool) score_into(c, inputs, config);
    return pool;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i; (i = next.fetch_add(1)) < pool.size();) score_into(pool[i], inputs, config);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return pool;
}

SearchResult search(const SearchInputs& inputs, const SearchConfig& config,
                    const std::function<void(const HistoryRecord&)>& on_record) {
  SearchResult result;
  result.population = init_population(inputs, config);
  auto record = [&](int iter, const Candidate& c) {
    result.history.push_back({iter, c});
    if (on_record) on_record(result.history.back());
    const bool better = !result.best.score || *c.score > *result.best.score;
    if (better) result.best = c;
  };
  for (const auto& c : result.population) record(0, c);

  const double spread = fp_spread(*inputs.fp);
  auto& pool = result.population;
  std::int64_t next_birth = static_cast<std::int64_t>(pool.size());
  for (int e = 1; e <= config.iterations; ++e) {
    auto rng = candidate_rng(config.seed, next_birth);
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::size_t parent = pool.size();
    for (int s = 0; s < config.sample_size; ++s) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(s), idx.size() - 1);
      std::swap(idx[static_cast<std::size_t>(s)], idx[pick(rng)]);
      const std::size_t cand = idx[static_cast<std::size_t>(s)];
      if (parent == pool.size() || *pool[cand].score > *pool[parent].score ||
          (*pool[cand].score == *pool[parent].score && pool[cand].birth_index < pool[parent].birth_index)) {
        parent = cand;
      }
    }
    Candidate child;
    child.birth_index = next_birth++;
    child.ab = mutate(pool[parent].ab, config, spread, rng);
    score_into(child, inputs, config);
    const auto oldest = std::min_element(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) {
      return a.birth_index < b.birth_index;
    });
    pool.erase(oldest);
    pool.push_back(child);
    record(e, child);
  }
  return result;
}

}  // namespace picpq
