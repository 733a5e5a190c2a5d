#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "scale/checkpoint.hpp"
#include "scale/errors.hpp"
#include "scale/experiment.hpp"

using namespace scale;
namespace fs = std::filesystem;

namespace {

// A small stream and network so whole runs take milliseconds.
RunConfig tiny() {
  RunConfig c;
  apply_overrides(c, {"model.hidden=16,12", "model.embedding_dim=6", "model.max_tasks=4",
                      "model.discriminator_hidden=8", "data.tasks=3", "data.train_per_task=30",
                      "data.test_per_task=20", "data.input_dim=8", "trainer.replay_size=16",
                      "seeds=0,1"});
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("config defaults and round trip") {
  const RunConfig d;
  CHECK(d.seeds.size() == 5);
  CHECK(d.memory_budget == 50);
  CHECK(d.trainer.adversarial_lr == 0.001);
  CHECK(d.trainer.n_in == 1);
  CHECK(d.trainer.n_out == 1);
  CHECK(d.trainer.n_ad == 1);
  CHECK(parse_config("").seeds == d.seeds);
  CHECK(configs_equal(parse_config(serialize_config(d)), d));

  RunConfig c = tiny();
  apply_overrides(c, {"method=er", "loss.lambda3=0.09", "trainer.outer_lr=0.001", "model.norm_eps=1e-7",
                      "adversarial.mode=negative_ce", "data.noise=0.37", "out=somewhere"});
  const std::string text = serialize_config(c);
  const RunConfig back = parse_config(text);
  CHECK(configs_equal(back, c));
  CHECK(serialize_config(back) == text);
  CHECK(back.trainer.method == Method::er);
  CHECK(back.trainer.weights.lambda3 == 0.09);
  CHECK(back.data.synthetic.noise == 0.37);

  const std::string commented = "# comment\n\nmethod = finetune\n";
  CHECK(parse_config(commented).trainer.method == Method::finetune);
  CHECK(config_keys().size() == 44);
}

TEST_CASE("config validation names every offending key") {
  const std::string msg = config_error("bogus = 1\ntrainer.inner_lr = -1\nloss.lambda1 = x\n");
  CHECK(msg.find("bogus") != std::string::npos);
  CHECK(msg.find("trainer.inner_lr") != std::string::npos);
  CHECK(msg.find("loss.lambda1") != std::string::npos);
  CHECK_FALSE(config_error("method = scale\nmethod = er\n").empty());
  CHECK_FALSE(config_error("method = sgd\n").empty());
  CHECK_FALSE(config_error("no equals sign\n").empty());
  CHECK_FALSE(config_error("seeds = \n").empty());
  RunConfig c;
  CHECK_THROWS_AS(apply_overrides(c, {"trainer.batch_size=0"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(c, {"nokey"}), ConfigError);
}

TEST_CASE("config hash ignores seeds and output location") {
  RunConfig a = tiny();
  RunConfig b = a;
  b.seeds = {7};
  b.out = "elsewhere";
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b.trainer.inner_lr = 0.1;
  CHECK(config_hash(a) != config_hash(b));
  CHECK(run_name(a).rfind("scale_full_", 0) == 0);
}

TEST_CASE("records round trip exactly") {
  ResultRecord r;
  r.config_hash = "0123456789abcdef";
  r.method = "scale";
  r.ablation = "B";
  r.seed = 3;
  r.accuracy = {{0.1 + 0.2}, {1.0 / 3.0, 0.7}};
  r.final_acc = (1.0 / 3.0 + 0.7) / 2.0;
  r.final_fm = 0.1 + 0.2 - 1.0 / 3.0;
  r.consumed = {200, 200};
  r.task_sizes = {200, 200};
  r.memory_size = 100;
  r.updates = {40, 40, 40};
  r.wall_s = 1.25;
  CHECK(parse_record(record_json(r), timing_json(r)) == r);
  CHECK(record_json(r).find("wall") == std::string::npos);

  ResultRecord single = r;
  single.accuracy = {{0.5}};
  single.final_fm.reset();
  CHECK(parse_record(record_json(single), timing_json(single)) == single);

  TempDir dir("scale_record_test");
  write_record(dir.path / "seed_3", r);
  CHECK(load_record(dir.path / "seed_3") == r);
  CHECK_THROWS_AS(parse_record("{", ""), FormatError);
}

TEST_CASE("identical config and seed emit identical records") {
  const RunConfig c = tiny();
  const ResultRecord a = run_seed(c, 1);
  const ResultRecord b = run_seed(c, 1);
  CHECK(record_json(a) == record_json(b));
  CHECK(a.consumed == a.task_sizes);
  CHECK(a.accuracy.size() == 3);
  CHECK(record_json(run_seed(c, 2)) != record_json(a));
}

TEST_CASE("fine-tuning equals SCALE with everything switched off") {
  RunConfig ft = tiny();
  apply_overrides(ft, {"method=finetune"});
  RunConfig reduced = tiny();
  apply_overrides(reduced, {"loss.lambda1=0", "loss.lambda2=0", "loss.lambda3=0", "memory.budget=0",
                            "adversarial.enabled=false", "ablation=C"});
  RunConfig er = tiny();
  apply_overrides(er, {"method=er", "memory.budget=0"});
  const ResultRecord a = run_seed(ft, 0);
  const ResultRecord b = run_seed(reduced, 0);
  const ResultRecord c = run_seed(er, 0);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.final_acc == b.final_acc);
  CHECK(a.accuracy == c.accuracy);
}

TEST_CASE("run writes the documented layout") {
  TempDir dir("scale_run_test");
  const RunConfig c = tiny();
  const auto records = run_in(c, dir.path);
  REQUIRE(records.size() == 2);
  const fs::path base = dir.path / run_name(c);
  CHECK(fs::exists(base / "config.txt"));
  CHECK(configs_equal(load_config(base / "config.txt"), c));
  for (std::uint64_t s : {0, 1}) {
    const fs::path seed_dir = base / ("seed_" + std::to_string(s));
    CHECK(fs::exists(seed_dir / "log.jsonl"));
    CHECK(load_record(seed_dir) == records[s]);
  }
  const std::string csv = slurp(base / "summary.csv");
  CHECK(csv.rfind("method,ablation,seed,task_index,acc_row,final_acc,final_fm,wall_s\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 3);
  CHECK(csv == summary_csv(records));
}

TEST_CASE("summary statistics") {
  CHECK(mean({0.7, 0.9}) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(stddev({0.5}) == 0.0);
  CHECK(stddev({1.0, 3.0}) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));

  ResultRecord r;
  r.method = "er";
  r.ablation = "full";
  r.config_hash = "h";
  r.accuracy = {{0.5}, {0.4, 0.9}};
  r.final_acc = 0.65;
  r.final_fm = 0.1;
  const auto one = summarize({r});
  REQUIRE(one.size() == 1);
  CHECK(one[0].runs == 1);
  CHECK(one[0].acc_mean == doctest::Approx(65.0).epsilon(1e-12));
  CHECK(one[0].acc_std == 0.0);
  CHECK(one[0].fm_std == 0.0);

  ResultRecord s = r;
  s.final_acc = 0.85;
  ResultRecord other = r;
  other.method = "scale";
  const auto rows = summarize({r, s, other});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].runs + rows[1].runs == 3);

  ResultRecord lone = r;
  lone.method = "finetune";
  lone.accuracy = {{0.5}};
  lone.final_fm.reset();
  const auto nan_rows = summarize({lone});
  CHECK(std::isnan(nan_rows[0].fm_mean));

  std::vector<SummaryRow> all = rows;
  all.push_back(nan_rows[0]);
  const auto back = parse_report_csv(report_csv(all));
  REQUIRE(back.size() == all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    CHECK(back[i].method == all[i].method);
    CHECK(back[i].runs == all[i].runs);
    CHECK(back[i].acc_mean == all[i].acc_mean);
    CHECK(back[i].acc_std == all[i].acc_std);
    CHECK((back[i].fm_mean == all[i].fm_mean || (std::isnan(back[i].fm_mean) && std::isnan(all[i].fm_mean))));
  }
  CHECK(format_table(all).find("±") != std::string::npos);
}

TEST_CASE("report on a directory") {
  TempDir dir("scale_report_test");
  CHECK_THROWS_AS(collect_records(dir.path), NoDataError);
  CHECK_THROWS_AS(collect_records(dir.path / "missing"), NoDataError);
  const RunConfig c = tiny();
  const auto records = run_in(c, dir.path);
  const auto found = collect_records(dir.path);
  CHECK(found.size() == 2);
  const auto rows = summarize(found);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].runs == 2);
  CHECK(rows[0].acc_mean ==
        doctest::Approx(100.0 * (records[0].final_acc + records[1].final_acc) / 2).epsilon(1e-12));
}

TEST_CASE("sweeps") {
  CHECK(default_sweep_values(SweepAxis::memory) == std::vector<double>{50, 100, 150, 200});
  CHECK(default_sweep_values(SweepAxis::lambda) == std::vector<double>{0.03, 0.09, 0.3, 0.9});
  CHECK_THROWS_AS(parse_axis("depth"), ConfigError);

  RunConfig c = tiny();
  c.seeds = {0};
  TempDir dir("scale_sweep_test");
  c.out = dir.path.string();
  CHECK_THROWS_AS(sweep(c, SweepAxis::memory, {}), ConfigError);
  CHECK_THROWS_AS(sweep(c, SweepAxis::memory, {75}), ConfigError);

  const auto points = sweep(c, SweepAxis::memory, {100});
  REQUIRE(points.size() == 1);
  RunConfig plain = c;
  plain.memory_budget = 100;
  CHECK(points[0].records[0].accuracy == run_seed(plain, 0).accuracy);
  CHECK(record_json(points[0].records[0]) == record_json(run_seed(plain, 0)));
  CHECK(fs::exists(dir.path / "sweep_memory" / "sweep.csv"));

  const auto lam = sweep(c, SweepAxis::lambda, {0.3});
  RunConfig l = c;
  l.trainer.weights.lambda3 = 0.3;
  CHECK(record_json(lam[0].records[0]) == record_json(run_seed(l, 0)));
}

TEST_CASE("checkpoints restore models and memory bit-exactly") {
  const RunConfig c = tiny();
  const TaskStream stream = build_stream(c, 0);
  TrainerConfig t = c.trainer;
  RunState state = run_stream(stream, c.model, t, 5);
  const std::string text = serialize_checkpoint(state.model, &state.memory);
  Checkpoint back = deserialize_checkpoint(text);
  REQUIRE(back.memory.has_value());
  const auto a = state.model.named_parameters();
  const auto b = back.model.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.value() == b[i].second.value());
  }
  CHECK(back.model.tasks() == state.model.tasks());
  CHECK(back.memory->slots() == state.memory.slots());
  CHECK(back.memory->reservoir_rng() == state.memory.reservoir_rng());
  CHECK(back.model.head_rng() == state.model.head_rng());
  CHECK(serialize_checkpoint(back.model, &*back.memory) == text);
  CHECK(evaluate(back.model, stream.tasks) == evaluate(state.model, stream.tasks));

  TempDir dir("scale_ckpt_test");
  save_checkpoint(dir.path / "model.json", state.model);
  CHECK_FALSE(load_checkpoint(dir.path / "model.json").memory.has_value());
  CHECK_FALSE(fs::exists(dir.path / "model.json.tmp"));

  CHECK_THROWS_AS(deserialize_checkpoint("not json"), FormatError);
  std::string wrong = text;
  const auto at = wrong.find("\"version\"");
  REQUIRE(at != std::string::npos);
  const auto digit = wrong.find('1', at);
  wrong[digit] = '9';
  CHECK_THROWS_AS(deserialize_checkpoint(wrong), FormatError);
}
