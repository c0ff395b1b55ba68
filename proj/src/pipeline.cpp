#include "picpq/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include "picpq/errors.hpp"

namespace picpq {

namespace fs = std::filesystem;

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

namespace {

std::string resolve(const fs::path& base, const std::string& p) {
  if (p.empty() || base.empty() || fs::path(p).is_absolute()) return p;
  return (base / p).lexically_normal().string();
}

void require_file(const std::string& p, const char* what) {
  if (!p.empty() && !fs::exists(p)) throw ValidationError(std::string(what) + " file not found: " + p);
}

}  // namespace

PipelineConfig pipeline_from_json(const nlohmann::json& j, const fs::path& base) {
  PipelineConfig c;
  try {
    if (!j.is_object()) throw ValidationError("pipeline config must be a JSON object");
    c.network = j.value("network", c.network);
    if (c.network != "desk_cnn") c.network = resolve(base, c.network);
    c.weights = resolve(base, j.value("weights", std::string()));
    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.train_data = resolve(base, d.value("train", std::string()));
      c.test_data = resolve(base, d.value("test", std::string()));
      if (d.contains("synthetic")) c.synthetic = synthetic_from_json(d.at("synthetic"));
    }
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.seed = j.value("seed", c.seed);
    c.budget_ratio = j.value("budget_ratio", c.budget_ratio);
    c.prune_only = j.value("prune_only", c.prune_only);
    if (j.contains("schedule")) c.schedule = j.at("schedule");
    if (j.contains("floor_fraction")) c.floors.fraction = j.at("floor_fraction").get<double>();
    if (j.contains("rank")) {
      const auto& r = j.at("rank");
      c.rank.batches = r.value("batches", c.rank.batches);
      c.rank.batch_size = r.value("batch_size", c.rank.batch_size);
      c.rank.tolerance = r.value("tolerance", c.rank.tolerance);
    }
    if (j.contains("search")) c.search = search_from_json(j.at("search"));
    if (j.contains("baseline")) c.baseline = finetune_from_json(j.at("baseline"), c.baseline);
    if (j.contains("stages")) {
      const auto& s = j.at("stages");
      if (s.contains("pruned")) c.stages.pruned = finetune_from_json(s.at("pruned"));
      if (s.contains("activation_quantized")) {
        c.stages.activation_quantized = finetune_from_json(s.at("activation_quantized"));
      }
      if (s.contains("fully_quantized")) c.stages.fully_quantized = finetune_from_json(s.at("fully_quantized"));
    }
    c.ab = resolve(base, j.value("ab", std::string()));
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed pipeline config: ") + e.what());
  }
  if (!(c.validation_fraction > 0 && c.validation_fraction <= 0.5)) {
    throw ValidationError("validation_fraction must lie in (0, 0.5]");
  }
  if (!(c.budget_ratio >= 1)) throw ValidationError("budget_ratio must be >= 1");
  if (c.threads < 1) throw ValidationError("threads must be >= 1");
  if (c.rank.batches < 1 || c.rank.batch_size < 1) throw ValidationError("rank sampling needs >= 1 batch of >= 1 image");
  if (c.network != "desk_cnn") require_file(c.network, "network");
  require_file(c.weights, "weights");
  require_file(c.train_data, "training data");
  require_file(c.test_data, "test data");
  require_file(c.ab, "a-b vector");
  if (c.train_data.empty() != c.test_data.empty()) {
    throw ValidationError("data needs both 'train' and 'test' paths, or neither");
  }
  return c;
}

PipelineConfig load_pipeline_config(const std::string& path) {
  return pipeline_from_json(read_json(path), fs::absolute(path).parent_path());
}

nlohmann::json pipeline_to_json(const PipelineConfig& c) {
  nlohmann::json data;
  if (c.train_data.empty()) {
    data["synthetic"] = synthetic_to_json(c.synthetic);
  } else {
    data["train"] = c.train_data;
    data["test"] = c.test_data;
  }
  nlohmann::json j{{"network", c.network},
                   {"data", data},
                   {"validation_fraction", c.validation_fraction},
                   {"seed", c.seed},
                   {"budget_ratio", c.budget_ratio},
                   {"prune_only", c.prune_only},
                   {"floor_fraction", c.floors.fraction},
                   {"rank", {{"batches", c.rank.batches}, {"batch_size", c.rank.batch_size}, {"tolerance", c.rank.tolerance}}},
                   {"search", search_to_json(c.search)},
                   {"baseline", finetune_to_json(c.baseline)},
                   {"stages",
                    {{"pruned", finetune_to_json(c.stages.pruned)},
                     {"activation_quantized", finetune_to_json(c.stages.activation_quantized)},
                     {"fully_quantized", finetune_to_json(c.stages.fully_quantized)}}},
                   {"threads", c.threads}};
  if (c.schedule) {
    j["schedule"] = *c.schedule;
  } else {
    j["schedule"] = {{"n_first", c.n_first}, {"n_last", c.n_last}, {"p", c.penalty}};
  }
  if (!c.weights.empty()) j["weights"] = c.weights;
  if (!c.ab.empty()) j["ab"] = c.ab;
  return j;
}

Workspace load_workspace(const PipelineConfig& c) {
  Workspace ws;
  ws.spec = c.network == "desk_cnn" ? desk_cnn(c.synthetic.classes) : load_network(c.network);
  Dataset train_all;
  if (c.train_data.empty()) {
    auto synth = make_synthetic(c.synthetic);
    train_all = std::move(synth.train);
    ws.test = std::move(synth.test);
  } else {
    train_all = load_dataset(c.train_data);
    ws.test = load_dataset(c.test_data);
  }
  auto split = split_validation(train_all, c.validation_fraction, c.synthetic.seed);
  ws.train = std::move(split.train);
  ws.validation = std::move(split.validation);
  ws.schedule = c.schedule ? schedule_from_json(ws.spec, *c.schedule)
                           : default_schedule(ws.spec, c.n_first, c.n_last, c.penalty);
  return ws;
}

ModelState obtain_baseline(const PipelineConfig& c, const Workspace& ws) {
  if (!c.weights.empty()) {
    ModelState s = load_weights(c.weights);
    check_state(ws.spec, s);
    return s;
  }
  const ModelState init = init_model(ws.spec, c.baseline.seed);
  return finetune(ws.spec, init, ws.train, c.baseline);
}

FilterPropertyTable extract_fp(const PipelineConfig& c, const Workspace& ws, const ModelState& state) {
  const auto batches = sample_batches(ws.train, c.rank.batches, c.rank.batch_size, c.seed);
  return average_rank(ws.spec, state, batches, c.rank.tolerance);
}

SearchConfig effective_search(const PipelineConfig& c) {
  SearchConfig s = c.search;
  s.budget_ratio = c.budget_ratio;
  s.mode = c.prune_only ? BudgetMode::flops : BudgetMode::bops;
  s.seed = c.seed;
  s.floors = c.floors;
  s.threads = c.threads;
  validate(s);
  return s;
}

CompressionPlan make_plan(const PipelineConfig& c, const Workspace& ws, const FilterPropertyTable& fp,
                          const ABVector& ab) {
  return derive_masks(importance(fp, ab), ws.spec, ws.schedule, c.budget_ratio,
                      c.prune_only ? BudgetMode::flops : BudgetMode::bops, c.floors);
}

StagedModels three_step_finetune(const NetworkSpec& spec, const ModelState& baseline, const CompressionPlan& plan,
                                 const Dataset& train, const Dataset& test, const StageConfigs& configs) {
  validate(configs.pruned);
  validate(configs.activation_quantized);
  validate(configs.fully_quantized);
  StagedModels out;
  out.report = model_cost(spec, &plan);
  out.report.accuracy.baseline = evaluate(spec, baseline, test);

  const CompressionPlan pruned_plan = plan.without_quantization();
  out.pruned = finetune(spec, baseline, train, configs.pruned, &pruned_plan);
  out.report.accuracy.pruned = evaluate(spec, out.pruned, test, &pruned_plan);
  if (plan.mode == BudgetMode::flops) {
    out.activation_quantized = out.pruned;
    out.fully_quantized = out.pruned;
    return out;
  }

  const CompressionPlan act_plan = plan.activations_only();
  ModelState start = calibrate_activations(spec, out.pruned, train, act_plan);
  out.activation_quantized = finetune(spec, start, train, configs.activation_quantized, &act_plan);
  out.report.accuracy.activation_quantized = evaluate(spec, out.activation_quantized, test, &act_plan);

  start = calibrate_activations(spec, out.pruned, train, plan);
  out.fully_quantized = finetune(spec, start, train, configs.fully_quantized, &plan);
  out.report.accuracy.fully_quantized = evaluate(spec, out.fully_quantized, test, &plan);
  return out;
}

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".picpq.lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw ValidationError("output directory " + dir.string() + " is locked by another pipeline (" +
                            path_.string() + ")");
    }
    throw ValidationError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

namespace {

template <typename F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
  const std::string prefix = "stage " + name + ": ";
  try {
    return fn();
  } catch (const InfeasibleBudget& e) {
    throw InfeasibleBudget(e.requested(), e.max_achievable(), prefix);
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what(), e.step());
  } catch (const ValidationError& e) {
    throw ValidationError(prefix + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(prefix + e.what());
  }
}

}  // namespace

void run_pipeline(const PipelineConfig& config, const fs::path& out_dir,
                  const std::function<void(const std::string&)>& log) {
  DirectoryLock lock(out_dir);
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  const Workspace ws = stage("load", [&] { return load_workspace(config); });
  const ModelState baseline = stage("baseline", [&] {
    ModelState s = obtain_baseline(config, ws);
    save_weights((out_dir / "baseline.picw").string(), s);
    return s;
  });
  say("baseline test accuracy " + std::to_string(evaluate(ws.spec, baseline, ws.test)));

  const FilterPropertyTable fp = stage("rank", [&] {
    auto t = extract_fp(config, ws, baseline);
    write_json(out_dir / "fp.json", fp_to_json(t));
    return t;
  });

  const ABVector ab = stage("search", [&] {
    if (!config.ab.empty()) {
      say("using saved a-b vector " + config.ab);
      return ab_from_json(read_json(config.ab));
    }
    const SearchConfig sc = effective_search(config);
    const SearchInputs inputs{&ws.spec, &baseline, &fp, &ws.schedule, &ws.train, &ws.validation};
    std::ofstream history(out_dir / "history.jsonl", std::ios::binary | std::ios::trunc);
    const auto result = search(inputs, sc, [&](const HistoryRecord& r) {
      history << history_to_json(r).dump() << '\n';
      say("iter " + std::to_string(r.iter) + " birth " + std::to_string(r.candidate.birth_index) + " score " +
          std::to_string(r.candidate.score.value_or(0.0)));
    });
    write_json(out_dir / "best_ab.json", ab_to_json(result.best.ab));
    return result.best.ab;
  });

  const CompressionPlan plan = stage("plan", [&] {
    auto p = make_plan(config, ws, fp, ab);
    write_json(out_dir / "plan.json", plan_to_json(p));
    return p;
  });
  say("plan achieved ratio " + std::to_string(plan.achieved_ratio));

  stage("finetune", [&] {
    const auto staged = three_step_finetune(ws.spec, baseline, plan, ws.train, ws.test, config.stages);
    save_weights((out_dir / "stage1.picw").string(), staged.pruned);
    if (plan.mode == BudgetMode::bops) {
      save_weights((out_dir / "stage2.picw").string(), staged.activation_quantized);
      save_weights((out_dir / "stage3.picw").string(), staged.fully_quantized);
    }
    nlohmann::json report = report_to_json(staged.report);
    report["mode"] = to_string(plan.mode);
    report["requested_ratio"] = plan.requested_ratio;
    write_json(out_dir / "report.json", report);
    return 0;
  });
}

}  // namespace picpq
