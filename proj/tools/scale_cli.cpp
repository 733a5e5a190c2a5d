// Experiment runner: run, sweep, grid, ablate, report.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "scale/checkpoint.hpp"
#include "scale/errors.hpp"
#include "scale/experiment.hpp"

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "Config file (key = value lines)")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "Run a single seed");
  app->add_option("--seeds", o.seeds, "Comma-separated seed list")->delimiter(',');
  app->add_option("--out", o.out, "Output directory");
  app->add_option("--set", o.sets, "Override a config key (KEY=VALUE), repeatable");
}

scale::RunConfig resolve(const CommonOptions& o) {
  scale::RunConfig cfg = o.config.empty() ? scale::RunConfig{} : scale::load_config(o.config);
  scale::apply_overrides(cfg, o.sets);
  if (!o.seeds.empty()) cfg.seeds = o.seeds;
  if (o.seed) cfg.seeds = {*o.seed};
  if (!o.out.empty()) cfg.out = o.out;
  return cfg;
}

void print_records(const std::vector<scale::ResultRecord>& records) {
  std::cout << scale::format_table(scale::summarize(records));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SCALE online continual learning experiments"};
  app.require_subcommand(1);

  CommonOptions run_opts, sweep_opts, grid_opts, ablate_opts;
  auto* run = app.add_subcommand("run", "Train one method over every seed");
  add_common(run, run_opts);

  auto* sweep = app.add_subcommand("sweep", "Memory-budget or lambda3 sweep");
  add_common(sweep, sweep_opts);
  std::string axis = "memory";
  std::vector<double> values;
  sweep->add_option("--axis", axis, "memory or lambda")->check(CLI::IsMember({"memory", "lambda"}));
  sweep->add_option("--values", values, "Comma-separated axis values")->delimiter(',');

  auto* grid = app.add_subcommand("grid", "Hyperparameter grid on the first three tasks");
  add_common(grid, grid_opts);

  auto* ablate = app.add_subcommand("ablate", "Full SCALE and ablations A, B, C");
  add_common(ablate, ablate_opts);

  auto* report = app.add_subcommand("report", "Summarize every record under a directory");
  std::string result_dir;
  report->add_option("dir", result_dir, "Result directory")->required();

  auto* show = app.add_subcommand("config", "Print the resolved configuration");
  CommonOptions show_opts;
  add_common(show, show_opts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      const auto cfg = resolve(run_opts);
      print_records(scale::run(cfg));
    } else if (sweep->parsed()) {
      const auto cfg = resolve(sweep_opts);
      const auto parsed_axis = scale::parse_axis(axis);
      if (values.empty()) {
        values = scale::default_sweep_values(parsed_axis);
      }
      const auto points = scale::sweep(cfg, parsed_axis, values);
      std::cout << scale::sweep_csv(parsed_axis, points);
    } else if (grid->parsed()) {
      const auto cfg = resolve(grid_opts);
      const auto points = scale::grid(cfg);
      fmt::print("best: inner_lr={} outer_lr={} lambda1=lambda2={} lambda3={} acc={:.2f}\n",
                 points.front().inner_lr, points.front().outer_lr, points.front().lambda12,
                 points.front().lambda3, 100.0 * points.front().mean_acc);
    } else if (ablate->parsed()) {
      const auto cfg = resolve(ablate_opts);
      std::vector<scale::ResultRecord> all;
      for (auto& [ablation, records] : scale::ablate(cfg)) {
        all.insert(all.end(), records.begin(), records.end());
      }
      print_records(all);
    } else if (report->parsed()) {
      const auto rows = scale::summarize(scale::collect_records(result_dir));
      std::cout << scale::format_table(rows);
      scale::write_atomically(std::filesystem::path(result_dir) / "report.csv",
                              scale::report_csv(rows));
    } else if (show->parsed()) {
      const auto cfg = resolve(show_opts);
      std::cout << scale::serialize_config(cfg);
      fmt::print("# hash {}\n", scale::config_hash(cfg));
    }
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
