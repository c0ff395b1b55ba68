// Command-line front end: rank, search, plan, finetune, report, pipeline.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "picpq/cost.hpp"
#include "picpq/errors.hpp"
#include "picpq/pipeline.hpp"

namespace fs = std::filesystem;
using namespace picpq;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> budget_ratio;
  bool prune_only = false;
  std::string ab;
  std::string out = "picpq_out";
  std::optional<int> threads;
  std::string fp;
  std::string plan;
  std::string network;
};

PipelineConfig resolve_config(const Options& o) {
  PipelineConfig c = o.config.empty() ? pipeline_from_json(nlohmann::json::object()) : load_pipeline_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.budget_ratio) c.budget_ratio = *o.budget_ratio;
  if (o.prune_only) c.prune_only = true;
  if (!o.ab.empty()) c.ab = o.ab;
  if (o.threads) c.threads = *o.threads;
  if (!(c.budget_ratio >= 1)) throw ValidationError("budget ratio must be >= 1");
  if (c.threads < 1) throw ValidationError("threads must be >= 1");
  return c;
}

ModelState baseline_for(const PipelineConfig& c, const Workspace& ws, const fs::path& out) {
  const fs::path cached = out / "baseline.picw";
  if (c.weights.empty() && fs::exists(cached)) {
    ModelState s = load_weights(cached.string());
    check_state(ws.spec, s);
    return s;
  }
  ModelState s = obtain_baseline(c, ws);
  if (c.weights.empty()) save_weights(cached.string(), s);
  return s;
}

std::string or_default(const std::string& value, const fs::path& fallback) {
  return value.empty() ? fallback.string() : value;
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

int run(const std::string& command, const Options& o) {
  const PipelineConfig c = resolve_config(o);
  const fs::path out(o.out);
  if (command == "pipeline") {
    run_pipeline(c, out, log_line);
    return 0;
  }
  if (command == "report") {
    const NetworkSpec spec = !o.network.empty()                                   ? load_network(o.network)
                             : c.network == "desk_cnn"                            ? desk_cnn(c.synthetic.classes)
                                                                                  : load_network(c.network);
    if (o.plan.empty()) throw ValidationError("report needs --plan");
    const CompressionPlan plan = plan_from_json(spec, read_json(o.plan));
    nlohmann::json j = report_to_json(model_cost(spec, &plan));
    j["mode"] = to_string(plan.mode);
    std::cout << j.dump(2) << '\n';
    return 0;
  }

  DirectoryLock lock(out);
  const Workspace ws = load_workspace(c);
  const ModelState baseline = baseline_for(c, ws, out);
  if (command == "rank") {
    write_json(out / "fp.json", fp_to_json(extract_fp(c, ws, baseline)));
    return 0;
  }
  if (command == "search") {
    const auto fp = fp_from_json(read_json(or_default(o.fp, out / "fp.json")));
    const SearchInputs inputs{&ws.spec, &baseline, &fp, &ws.schedule, &ws.train, &ws.validation};
    std::ofstream history(out / "history.jsonl", std::ios::binary | std::ios::trunc);
    const auto result = search(inputs, effective_search(c), [&](const HistoryRecord& r) {
      history << history_to_json(r).dump() << '\n';
    });
    write_json(out / "best_ab.json", ab_to_json(result.best.ab));
    log_line("best score " + std::to_string(result.best.score.value_or(0.0)));
    return 0;
  }
  if (command == "plan") {
    const auto fp = fp_from_json(read_json(or_default(o.fp, out / "fp.json")));
    const std::string ab_path = or_default(c.ab, out / "best_ab.json");
    const ABVector ab = ab_from_json(read_json(ab_path));
    const CompressionPlan plan = make_plan(c, ws, fp, ab);
    write_json(out / "plan.json", plan_to_json(plan));
    log_line("achieved ratio " + std::to_string(plan.achieved_ratio));
    return 0;
  }
  if (command == "finetune") {
    const CompressionPlan plan = plan_from_json(ws.spec, read_json(or_default(o.plan, out / "plan.json")));
    const auto staged = three_step_finetune(ws.spec, baseline, plan, ws.train, ws.test, c.stages);
    save_weights((out / "stage1.picw").string(), staged.pruned);
    if (plan.mode == BudgetMode::bops) {
      save_weights((out / "stage2.picw").string(), staged.activation_quantized);
      save_weights((out / "stage3.picw").string(), staged.fully_quantized);
    }
    nlohmann::json report = report_to_json(staged.report);
    report["mode"] = to_string(plan.mode);
    report["requested_ratio"] = plan.requested_ratio;
    write_json(out / "report.json", report);
    return 0;
  }
  throw ValidationError("unknown command " + command);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint filter pruning and mixed-precision quantization"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "pipeline config JSON");
    sub->add_option("--seed", o.seed, "search and sampling seed");
    sub->add_option("--budget-ratio", o.budget_ratio, "target compression ratio (>= 1)");
    sub->add_flag("--prune-only", o.prune_only, "prune without quantization; budget in FLOPs");
    sub->add_option("--ab", o.ab, "saved a-b vector JSON (skips the search)");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--threads", o.threads, "worker threads for candidate scoring");
  };
  struct Sub {
    const char* name;
    const char* help;
  };
  for (const Sub& s : {Sub{"rank", "filter property table -> fp.json"},
                       Sub{"search", "evolutionary a-b search -> best_ab.json, history.jsonl"},
                       Sub{"plan", "a-b vector + budget -> plan.json"},
                       Sub{"finetune", "three-step fine-tune of a plan -> stage weights, report.json"},
                       Sub{"report", "cost report of a plan (stdout)"},
                       Sub{"pipeline", "every stage end to end"}}) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_common(sub);
    if (std::string(s.name) == "search" || std::string(s.name) == "plan") {
      sub->add_option("--fp", o.fp, "filter property JSON (default <out>/fp.json)");
    }
    if (std::string(s.name) == "finetune" || std::string(s.name) == "report") {
      sub->add_option("--plan", o.plan, "plan JSON");
    }
    if (std::string(s.name) == "report") sub->add_option("--network", o.network, "network JSON");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const InfeasibleBudget& e) {
    std::cerr << "infeasible budget: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
