#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "scale/datasets.hpp"
#include "scale/networks.hpp"
#include "scale/trainer.hpp"

namespace scale {

enum class DataSource { synthetic, mnist };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  // Synthetic stream parameters. The stream seed is the run seed.
  SyntheticSpec synthetic;
  // Directory holding the four MNIST IDX files (permuted protocol).
  std::string mnist_dir;
  std::size_t mnist_tasks = 23;
  std::size_t mnist_train_per_task = 1000;
  std::size_t mnist_test_per_task = 1000;
  // Train and evaluate only the first N tasks (0 = all).
  std::size_t task_limit = 0;
};

// Everything a run needs. Every field has a default; the defaults are the
// desk configuration.
struct RunConfig {
  RunConfig();

  TrainerConfig trainer;
  ModelConfig model;
  DataConfig data;
  std::size_t memory_budget = 50;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string out = "results";
};

// The config file is plain text, one `key = value` per line. Blank lines and
// lines starting with '#' are ignored. Unknown keys and malformed values are
// rejected with a ConfigError naming every offending key.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
// Canonical form: every key, in a fixed order. parse(serialize(c)) == c.
std::string serialize_config(const RunConfig& cfg);
// Applies `key=value` overrides on top of `cfg`.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides);
std::vector<std::string> config_keys();

// FNV-1a over the canonical text with the seed list and output directory
// removed, so it identifies the experiment independently of where it ran.
std::string config_hash(const RunConfig& cfg);

bool configs_equal(const RunConfig& a, const RunConfig& b);

struct ResultRecord {
  std::string config_hash;
  std::string method;
  std::string ablation;
  std::uint64_t seed = 0;
  std::vector<std::vector<double>> accuracy;
  double final_acc = 0.0;
  std::optional<double> final_fm;
  std::vector<std::size_t> consumed;
  std::vector<std::size_t> task_sizes;
  std::size_t memory_size = 0;
  UpdateCounters updates;
  double wall_s = 0.0;

  friend bool operator==(const ResultRecord&, const ResultRecord&) = default;
};

// record.json omits wall time so identical runs emit identical bytes; the
// timing goes to timing.json next to it.
std::string record_json(const ResultRecord& record);
std::string timing_json(const ResultRecord& record);
ResultRecord parse_record(const std::string& record_text, const std::string& timing_text);
void write_record(const std::filesystem::path& seed_dir, const ResultRecord& record);
ResultRecord load_record(const std::filesystem::path& seed_dir);

std::string method_name(Method m);
std::string ablation_name(Ablation a);
Method parse_method(const std::string& s);
Ablation parse_ablation(const std::string& s);

TaskStream build_stream(const RunConfig& cfg, std::uint64_t seed);

// Trains one seed in memory; no files are written.
ResultRecord run_seed(const RunConfig& cfg, std::uint64_t seed);

// Directory name of a run-set: <method>_<ablation>_<hash>.
std::string run_name(const RunConfig& cfg);

// Runs every seed, writing <out>/<run_name>/seed_<n>/record.json, a run log
// (log.jsonl), config.txt and summary.csv. Returns one record per seed.
std::vector<ResultRecord> run(const RunConfig& cfg);
std::vector<ResultRecord> run_in(const RunConfig& cfg, const std::filesystem::path& dir);

// summary.csv rows: one per (seed, task_index).
std::string summary_csv(const std::vector<ResultRecord>& records);

enum class SweepAxis { memory, lambda };
SweepAxis parse_axis(const std::string& s);
std::vector<double> default_sweep_values(SweepAxis axis);

struct SweepPoint {
  double value = 0.0;
  std::vector<ResultRecord> records;
};

// One run-set per value under <out>/sweep_<axis>/, plus a tidy sweep.csv.
std::vector<SweepPoint> sweep(const RunConfig& cfg, SweepAxis axis, const std::vector<double>& values);
std::string sweep_csv(SweepAxis axis, const std::vector<SweepPoint>& points);

struct GridPoint {
  double inner_lr = 0.0;
  double outer_lr = 0.0;
  double lambda12 = 0.0;
  double lambda3 = 0.0;
  double mean_acc = 0.0;
};

// Grid search over fixed value sets (see README) on the first three tasks.
// Returns every point, best first, and writes <out>/grid/grid.csv.
std::vector<GridPoint> grid(const RunConfig& cfg);

// Full SCALE and ablations A, B, C under <out>/ablate/.
std::vector<std::pair<Ablation, std::vector<ResultRecord>>> ablate(const RunConfig& cfg);

struct SummaryRow {
  std::string method;
  std::string ablation;
  std::string config_hash;
  std::size_t runs = 0;
  // Percentages (x100).
  double acc_mean = 0.0;
  double acc_std = 0.0;
  double fm_mean = 0.0;
  double fm_std = 0.0;

  friend bool operator==(const SummaryRow&, const SummaryRow&) = default;
};

double mean(const std::vector<double>& xs);
// Sample standard deviation; 0 for fewer than two values.
double stddev(const std::vector<double>& xs);

// Groups records by (method, ablation, config hash). FM columns are NaN
// when no record of a group defines FM.
std::vector<SummaryRow> summarize(const std::vector<ResultRecord>& records);
// Recursively collects every record under `dir`. NoDataError when none.
std::vector<ResultRecord> collect_records(const std::filesystem::path& dir);
std::string format_table(const std::vector<SummaryRow>& rows);
std::string report_csv(const std::vector<SummaryRow>& rows);
std::vector<SummaryRow> parse_report_csv(const std::string& text);

}  // namespace scale
