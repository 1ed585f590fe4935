// prune-lab: train a toy encoder-decoder, probe pruning sensitivity, sweep
// sparsities and compress under a plan. Every subcommand reads one JSON config.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "prunelab/errors.hpp"
#include "prunelab/pipeline.hpp"

namespace fs = std::filesystem;
using namespace prunelab;

namespace {

struct Args {
  std::string config;
  std::optional<std::string> checkpoint;
  std::optional<std::string> out;
  std::size_t jobs = 1;
  std::string scope = "components";
  std::optional<std::string> plan;
  bool recipe = false;
};

std::optional<fs::path> as_path(const std::optional<std::string>& s) {
  return s ? std::optional<fs::path>(*s) : std::nullopt;
}

Workspace open_workspace(const Args& a) {
  RunConfig cfg = load_run_config(a.config);
  return Workspace(cfg, resolve_out_dir(cfg, as_path(a.out)), a.jobs);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Magnitude-pruning lab for a toy encoder-decoder transformer"};
  app.require_subcommand(1);
  Args a;

  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", a.config, "run config (JSON)")->required();
    sub->add_option("--out", a.out, "output directory (overrides config and $PRUNE_LAB_OUT_DIR)");
  };
  auto with_checkpoint = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", a.checkpoint, "model checkpoint (default: <out>/model.ckpt)");
  };

  auto* train = app.add_subcommand("train", "train a model; writes model.ckpt and loss_curve.csv");
  with_config(train);

  auto* diagnose = app.add_subcommand("diagnose", "first-order and Fisher sensitivity per side and split");
  with_config(diagnose);
  with_checkpoint(diagnose);

  auto* sweep = app.add_subcommand("sweep", "one-shot pruning sweep; writes sweep_<scope>.csv/.json");
  with_config(sweep);
  with_checkpoint(sweep);
  sweep->add_option("--scope", a.scope, "global | side | layer_blocks | components")
      ->check(CLI::IsMember({"global", "side", "layer_blocks", "components"}));
  sweep->add_option("--jobs", a.jobs, "worker threads")->check(CLI::PositiveNumber);

  auto* allocate = app.add_subcommand("allocate", "derive a plan from the component sweep; writes plan_greedy.json");
  with_config(allocate);

  auto* compress = app.add_subcommand("compress", "apply a plan; writes pruned.ckpt and compression.csv");
  with_config(compress);
  with_checkpoint(compress);
  auto* plan_opt = compress->add_option("--plan", a.plan, "plan file (JSON)");
  compress->add_flag("--recipe", a.recipe, "use the fixed per-component recipe")->excludes(plan_opt);

  auto* report = app.add_subcommand("report", "validate artifacts and merge them into report.json");
  report->add_option("--config", a.config, "run config, used only to locate the output directory");
  report->add_option("--out", a.out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) {
      auto ws = open_workspace(a);
      const auto r = cmd_train(ws);
      std::printf("trained %zu steps, final loss %.6g -> %s\n", r.curve.size(), r.curve.back(),
                  ws.path("model.ckpt").c_str());
    } else if (diagnose->parsed()) {
      auto ws = open_workspace(a);
      std::fputs(sensitivity_csv(cmd_diagnose(ws, as_path(a.checkpoint))).c_str(), stdout);
    } else if (sweep->parsed()) {
      auto ws = open_workspace(a);
      const auto scope = parse_scope(a.scope);
      std::fputs(sweep_csv(cmd_sweep(ws, as_path(a.checkpoint), scope)).c_str(), stdout);
    } else if (allocate->parsed()) {
      auto ws = open_workspace(a);
      const auto plan = cmd_allocate(ws);
      std::printf("%s\n", plan_to_json(plan).dump(1).c_str());
      if (plan.infeasible) std::fprintf(stderr, "warning: target sparsity not reachable within the budget\n");
    } else if (compress->parsed()) {
      auto ws = open_workspace(a);
      std::fputs(compression_csv(cmd_compress(ws, as_path(a.checkpoint), {as_path(a.plan), a.recipe})).c_str(),
                 stdout);
    } else if (report->parsed()) {
      fs::path dir;
      if (a.out) {
        dir = *a.out;
      } else if (!a.config.empty()) {
        dir = resolve_out_dir(load_run_config(a.config), std::nullopt);
      } else {
        throw ConfigError("report needs --out DIR or --config PATH");
      }
      const auto r = cmd_report(dir);
      std::printf("report for config %s -> %s\n", r.at("config_hash").get<std::string>().c_str(),
                  (dir / "report.json").c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "prune-lab: %s\n", e.what());
    return exit_code_for(e);
  }
  return 0;
}
