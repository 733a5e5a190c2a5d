#include "scale/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <fmt/core.h>
#include <fmt/format.h>
#include <json.hpp>

#include "scale/checkpoint.hpp"
#include "scale/errors.hpp"

namespace scale {

namespace {

using nlohmann::json;

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string part;
  std::istringstream in(s);
  while (std::getline(in, part, sep)) parts.push_back(trim(part));
  return parts;
}

// Setters throw std::invalid_argument with a short reason; the caller turns
// that into a ConfigError naming the key.
double to_double(const std::string& s) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw std::invalid_argument(fmt::format("'{}' is not a finite number", s));
  }
  return v;
}

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc() || ptr != end) {
    throw std::invalid_argument(fmt::format("'{}' is not a non-negative integer", s));
  }
  return v;
}

std::size_t to_size(const std::string& s) { return static_cast<std::size_t>(to_u64(s)); }

bool to_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw std::invalid_argument(fmt::format("'{}' is not true or false", s));
}

template <typename T>
std::string join(const std::vector<T>& xs, const char* sep) {
  return fmt::format("{}", fmt::join(xs, sep));
}

template <typename T>
std::vector<T> to_list(const std::string& s, T (*convert)(const std::string&)) {
  std::vector<T> out;
  if (s.empty()) return out;
  for (const auto& part : split(s, ',')) out.push_back(convert(part));
  return out;
}

std::string transform_name(TransformMode m) {
  switch (m) {
    case TransformMode::all_hidden:
      return "all_hidden";
    case TransformMode::last_hidden:
      return "last_hidden";
    case TransformMode::disabled:
      return "disabled";
  }
  return "disabled";
}

TransformMode to_transform(const std::string& s) {
  if (s == "all_hidden") return TransformMode::all_hidden;
  if (s == "last_hidden") return TransformMode::last_hidden;
  if (s == "disabled") return TransformMode::disabled;
  throw std::invalid_argument(fmt::format("'{}' is not all_hidden, last_hidden or disabled", s));
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Member>
Field size_field(std::string key, Member member) {
  return {std::move(key), [member](const RunConfig& c) { return fmt::format("{}", member(c)); },
          [member](RunConfig& c, const std::string& v) { member(c) = to_size(v); }};
}

template <typename Member>
Field double_field(std::string key, Member member) {
  return {std::move(key), [member](const RunConfig& c) { return fmt::format("{}", member(c)); },
          [member](RunConfig& c, const std::string& v) { member(c) = to_double(v); }};
}

template <typename Member>
Field bool_field(std::string key, Member member) {
  return {std::move(key),
          [member](const RunConfig& c) { return std::string(member(c) ? "true" : "false"); },
          [member](RunConfig& c, const std::string& v) { member(c) = to_bool(v); }};
}

// Accessor usable on both const and mutable configs.
#define SCALE_MEMBER(expr) \
  [](auto& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"method", [](const RunConfig& c) { return method_name(c.trainer.method); },
       [](RunConfig& c, const std::string& v) { c.trainer.method = parse_method(v); }},
      {"ablation", [](const RunConfig& c) { return ablation_name(c.trainer.ablation); },
       [](RunConfig& c, const std::string& v) { c.trainer.ablation = parse_ablation(v); }},
      {"seeds", [](const RunConfig& c) { return join(c.seeds, ","); },
       [](RunConfig& c, const std::string& v) { c.seeds = to_list<std::uint64_t>(v, to_u64); }},
      {"out", [](const RunConfig& c) { return c.out; },
       [](RunConfig& c, const std::string& v) { c.out = v; }},
      size_field("memory.budget", SCALE_MEMBER(memory_budget)),
      double_field("trainer.inner_lr", SCALE_MEMBER(trainer.inner_lr)),
      double_field("trainer.outer_lr", SCALE_MEMBER(trainer.outer_lr)),
      double_field("trainer.adversarial_lr", SCALE_MEMBER(trainer.adversarial_lr)),
      size_field("trainer.n_in", SCALE_MEMBER(trainer.n_in)),
      size_field("trainer.n_out", SCALE_MEMBER(trainer.n_out)),
      size_field("trainer.n_ad", SCALE_MEMBER(trainer.n_ad)),
      size_field("trainer.batch_size", SCALE_MEMBER(trainer.batch_size)),
      size_field("trainer.replay_size", SCALE_MEMBER(trainer.replay_size)),
      double_field("loss.lambda1", SCALE_MEMBER(trainer.weights.lambda1)),
      double_field("loss.lambda2", SCALE_MEMBER(trainer.weights.lambda2)),
      double_field("loss.lambda3", SCALE_MEMBER(trainer.weights.lambda3)),
      bool_field("adversarial.enabled", SCALE_MEMBER(trainer.adversarial.enabled)),
      {"adversarial.mode",
       [](const RunConfig& c) {
         return std::string(c.trainer.adversarial.mode == GeneratorMode::uniform_confusion
                                ? "uniform_confusion"
                                : "negative_ce");
       },
       [](RunConfig& c, const std::string& v) {
         if (v == "uniform_confusion") {
           c.trainer.adversarial.mode = GeneratorMode::uniform_confusion;
         } else if (v == "negative_ce") {
           c.trainer.adversarial.mode = GeneratorMode::negative_ce;
         } else {
           throw std::invalid_argument(
               fmt::format("'{}' is not uniform_confusion or negative_ce", v));
         }
       }},
      double_field("adversarial.noise_mean", SCALE_MEMBER(trainer.adversarial.noise_mean)),
      double_field("adversarial.noise_std", SCALE_MEMBER(trainer.adversarial.noise_std)),
      double_field("adversarial.noise_ratio", SCALE_MEMBER(trainer.adversarial.noise_ratio)),
      {"model.hidden", [](const RunConfig& c) { return join(c.model.hidden, ","); },
       [](RunConfig& c, const std::string& v) {
         c.model.hidden = to_list<std::size_t>(v, to_size);
       }},
      {"model.transform", [](const RunConfig& c) { return transform_name(c.model.transform); },
       [](RunConfig& c, const std::string& v) { c.model.transform = to_transform(v); }},
      size_field("model.embedding_dim", SCALE_MEMBER(model.embedding_dim)),
      bool_field("model.shared_embedding", SCALE_MEMBER(model.shared_embedding)),
      size_field("model.max_tasks", SCALE_MEMBER(model.max_tasks)),
      size_field("model.discriminator_hidden", SCALE_MEMBER(model.discriminator_hidden)),
      double_field("model.norm_eps", SCALE_MEMBER(model.norm_eps)),
      {"data.source",
       [](const RunConfig& c) {
         return std::string(c.data.source == DataSource::synthetic ? "synthetic" : "mnist");
       },
       [](RunConfig& c, const std::string& v) {
         if (v == "synthetic") {
           c.data.source = DataSource::synthetic;
         } else if (v == "mnist") {
           c.data.source = DataSource::mnist;
         } else {
           throw std::invalid_argument(fmt::format("'{}' is not synthetic or mnist", v));
         }
       }},
      {"data.protocol",
       [](const RunConfig& c) {
         return std::string(c.data.synthetic.protocol == Protocol::split ? "split" : "permuted");
       },
       [](RunConfig& c, const std::string& v) {
         if (v == "split") {
           c.data.synthetic.protocol = Protocol::split;
         } else if (v == "permuted") {
           c.data.synthetic.protocol = Protocol::permuted;
         } else {
           throw std::invalid_argument(fmt::format("'{}' is not split or permuted", v));
         }
       }},
      size_field("data.tasks", SCALE_MEMBER(data.synthetic.n_tasks)),
      size_field("data.classes_per_task", SCALE_MEMBER(data.synthetic.classes_per_task)),
      size_field("data.train_per_task", SCALE_MEMBER(data.synthetic.train_per_task)),
      size_field("data.test_per_task", SCALE_MEMBER(data.synthetic.test_per_task)),
      size_field("data.input_dim", SCALE_MEMBER(data.synthetic.input_dim)),
      double_field("data.center_scale", SCALE_MEMBER(data.synthetic.center_scale)),
      double_field("data.noise", SCALE_MEMBER(data.synthetic.noise)),
      size_field("data.clusters_per_class", SCALE_MEMBER(data.synthetic.clusters_per_class)),
      size_field("data.center_pool", SCALE_MEMBER(data.synthetic.center_pool)),
      {"data.mnist_dir", [](const RunConfig& c) { return c.data.mnist_dir; },
       [](RunConfig& c, const std::string& v) { c.data.mnist_dir = v; }},
      size_field("data.mnist_tasks", SCALE_MEMBER(data.mnist_tasks)),
      size_field("data.mnist_train_per_task", SCALE_MEMBER(data.mnist_train_per_task)),
      size_field("data.mnist_test_per_task", SCALE_MEMBER(data.mnist_test_per_task)),
      size_field("data.task_limit", SCALE_MEMBER(data.task_limit)),
  };
  return table;
}

#undef SCALE_MEMBER

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

struct Problems {
  std::vector<std::string> items;

  void add(const std::string& key, const std::string& why) {
    items.push_back(fmt::format("{}: {}", key, why));
  }
  void raise_if_any() const {
    if (items.empty()) return;
    throw ConfigError(fmt::format("invalid configuration:\n  {}", fmt::join(items, "\n  ")));
  }
};

void set_value(RunConfig& cfg, const std::string& key, const std::string& value, Problems& problems) {
  const Field* f = find_field(key);
  if (f == nullptr) {
    problems.add(key, "unknown key");
    return;
  }
  try {
    f->set(cfg, value);
  } catch (const std::invalid_argument& e) {
    problems.add(key, e.what());
  } catch (const ConfigError& e) {
    problems.add(key, e.what());
  }
}

void validate(const RunConfig& c, Problems& p) {
  const auto positive = [&](const char* key, double v) {
    if (!(v > 0.0)) p.add(key, "must be positive");
  };
  const auto non_negative = [&](const char* key, double v) {
    if (v < 0.0) p.add(key, "must be non-negative");
  };
  const auto at_least_one = [&](const char* key, std::size_t v) {
    if (v < 1) p.add(key, "must be at least 1");
  };
  if (c.seeds.empty()) p.add("seeds", "needs at least one seed");
  positive("trainer.inner_lr", c.trainer.inner_lr);
  positive("trainer.outer_lr", c.trainer.outer_lr);
  positive("trainer.adversarial_lr", c.trainer.adversarial_lr);
  at_least_one("trainer.n_in", c.trainer.n_in);
  at_least_one("trainer.n_out", c.trainer.n_out);
  at_least_one("trainer.n_ad", c.trainer.n_ad);
  at_least_one("trainer.batch_size", c.trainer.batch_size);
  non_negative("loss.lambda1", c.trainer.weights.lambda1);
  non_negative("loss.lambda2", c.trainer.weights.lambda2);
  non_negative("loss.lambda3", c.trainer.weights.lambda3);
  positive("adversarial.noise_std", c.trainer.adversarial.noise_std);
  positive("adversarial.noise_ratio", c.trainer.adversarial.noise_ratio);
  if (c.model.hidden.empty() ||
      std::any_of(c.model.hidden.begin(), c.model.hidden.end(), [](auto h) { return h == 0; })) {
    p.add("model.hidden", "needs at least one layer, all widths positive");
  }
  at_least_one("model.embedding_dim", c.model.embedding_dim);
  at_least_one("model.max_tasks", c.model.max_tasks);
  at_least_one("model.discriminator_hidden", c.model.discriminator_hidden);
  positive("model.norm_eps", c.model.norm_eps);
  at_least_one("data.tasks", c.data.synthetic.n_tasks);
  at_least_one("data.classes_per_task", c.data.synthetic.classes_per_task);
  at_least_one("data.train_per_task", c.data.synthetic.train_per_task);
  at_least_one("data.test_per_task", c.data.synthetic.test_per_task);
  at_least_one("data.input_dim", c.data.synthetic.input_dim);
  positive("data.center_scale", c.data.synthetic.center_scale);
  non_negative("data.noise", c.data.synthetic.noise);
  at_least_one("data.clusters_per_class", c.data.synthetic.clusters_per_class);
  if (c.data.source == DataSource::mnist) {
    if (c.data.mnist_dir.empty()) p.add("data.mnist_dir", "required when data.source = mnist");
    at_least_one("data.mnist_tasks", c.data.mnist_tasks);
    at_least_one("data.mnist_train_per_task", c.data.mnist_train_per_task);
    at_least_one("data.mnist_test_per_task", c.data.mnist_test_per_task);
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open {}", path.string()));
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Dataset take_rows(const Dataset& data, std::size_t n, std::uint64_t seed) {
  if (n > data.size()) {
    throw ConfigError(fmt::format("requested {} samples, file holds {}", n, data.size()));
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_stream(seed, streams::kData);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[uniform_index(rng, i)]);
  }
  Dataset out{Tensor(n, data.dim()), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = data.inputs.row(order[i]);
    std::copy(src.begin(), src.end(), out.inputs.row(i).begin());
    out.labels.push_back(data.labels[order[i]]);
  }
  return out;
}

struct SeedOutcome {
  ResultRecord record;
  std::vector<TaskLog> log;
};

SeedOutcome execute(const RunConfig& cfg, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  const TaskStream stream = build_stream(cfg, seed);
  TrainerConfig trainer = cfg.trainer;
  trainer.seed = seed;
  RunState state = run_stream(stream, cfg.model, trainer, cfg.memory_budget);
  const auto stop = std::chrono::steady_clock::now();

  ResultRecord r;
  r.config_hash = config_hash(cfg);
  r.method = method_name(cfg.trainer.method);
  r.ablation = ablation_name(cfg.trainer.ablation);
  r.seed = seed;
  r.accuracy = state.accuracy.rows();
  r.final_acc = final_acc(state.accuracy);
  r.final_fm = final_fm(state.accuracy);
  r.consumed = state.consumed;
  for (const auto& t : stream.tasks) r.task_sizes.push_back(t.train.size());
  r.memory_size = state.memory.size();
  r.updates = state.updates;
  r.wall_s = std::chrono::duration<double>(stop - start).count();
  return {std::move(r), std::move(state.log)};
}

std::string log_jsonl(const std::vector<TaskLog>& log) {
  std::string out;
  for (const auto& t : log) {
    json line = {{"task", t.task},
                 {"accuracies", t.accuracies},
                 {"acc_so_far", t.acc_so_far},
                 {"mean_loss", t.mean_loss},
                 {"mean_disc_loss", t.mean_disc_loss},
                 {"consumed", t.consumed},
                 {"memory_size", t.memory_size},
                 {"wall_s", t.wall_s}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

std::string csv_double(double v) { return std::isnan(v) ? std::string() : fmt::format("{}", v); }

double parse_csv_double(const std::string& s) {
  return s.empty() ? std::numeric_limits<double>::quiet_NaN() : to_double(s);
}

}  // namespace

RunConfig::RunConfig() {
  // Desk defaults: a learning rate the small synthetic stream can fit in
  // one pass, everything else as published.
  trainer.inner_lr = 0.3;
  trainer.outer_lr = 0.1;
  trainer.adversarial_lr = 0.001;
  trainer.batch_size = 10;
  trainer.replay_size = 64;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  Problems problems;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped.front() == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      problems.add(fmt::format("line {}", number), "expected 'key = value'");
      continue;
    }
    const std::string key = trim(std::string_view(stripped).substr(0, eq));
    const std::string value = trim(std::string_view(stripped).substr(eq + 1));
    if (seen[key]++ > 0) {
      problems.add(key, "given more than once");
      continue;
    }
    set_value(cfg, key, value, problems);
  }
  validate(cfg, problems);
  problems.raise_if_any();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += fmt::format("{} = {}\n", f.key, f.get(cfg));
  return out;
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
  Problems problems;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) {
      problems.add(o, "override must be key=value");
      continue;
    }
    set_value(cfg, trim(std::string_view(o).substr(0, eq)), trim(std::string_view(o).substr(eq + 1)),
              problems);
  }
  validate(cfg, problems);
  problems.raise_if_any();
}

std::string config_hash(const RunConfig& cfg) {
  std::string text;
  for (const auto& f : fields()) {
    if (f.key == "seeds" || f.key == "out") continue;
    text += fmt::format("{} = {}\n", f.key, f.get(cfg));
  }
  return fmt::format("{:016x}", fnv1a(text));
}

bool configs_equal(const RunConfig& a, const RunConfig& b) {
  return serialize_config(a) == serialize_config(b);
}

std::string method_name(Method m) {
  switch (m) {
    case Method::scale:
      return "scale";
    case Method::er:
      return "er";
    case Method::finetune:
      return "finetune";
  }
  return "scale";
}

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::full:
      return "full";
    case Ablation::A:
      return "A";
    case Ablation::B:
      return "B";
    case Ablation::C:
      return "C";
  }
  return "full";
}

Method parse_method(const std::string& s) {
  if (s == "scale") return Method::scale;
  if (s == "er") return Method::er;
  if (s == "finetune") return Method::finetune;
  throw std::invalid_argument(fmt::format("'{}' is not scale, er or finetune", s));
}

Ablation parse_ablation(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "A") return Ablation::A;
  if (s == "B") return Ablation::B;
  if (s == "C") return Ablation::C;
  throw std::invalid_argument(fmt::format("'{}' is not full, A, B or C", s));
}

TaskStream build_stream(const RunConfig& cfg, std::uint64_t seed) {
  TaskStream stream;
  if (cfg.data.source == DataSource::synthetic) {
    SyntheticSpec spec = cfg.data.synthetic;
    spec.seed = seed;
    stream = make_synthetic(spec);
  } else {
    const std::filesystem::path dir = cfg.data.mnist_dir;
    const Dataset train =
        load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
    const Dataset test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
    stream = make_permuted_stream(take_rows(train, cfg.data.mnist_train_per_task, seed),
                                  take_rows(test, cfg.data.mnist_test_per_task, seed + 1),
                                  cfg.data.mnist_tasks, seed);
  }
  if (cfg.data.task_limit > 0 && cfg.data.task_limit < stream.tasks.size()) {
    stream.tasks.resize(cfg.data.task_limit);
  }
  return stream;
}

ResultRecord run_seed(const RunConfig& cfg, std::uint64_t seed) {
  return execute(cfg, seed).record;
}

std::string record_json(const ResultRecord& r) {
  json doc = {{"config_hash", r.config_hash},
              {"method", r.method},
              {"ablation", r.ablation},
              {"seed", r.seed},
              {"accuracy", r.accuracy},
              {"final_acc", r.final_acc},
              {"final_fm", r.final_fm ? json(*r.final_fm) : json(nullptr)},
              {"consumed", r.consumed},
              {"task_sizes", r.task_sizes},
              {"memory_size", r.memory_size},
              {"updates",
               {{"inner", r.updates.inner},
                {"outer", r.updates.outer},
                {"adversarial", r.updates.adversarial}}}};
  return doc.dump(1) + "\n";
}

std::string timing_json(const ResultRecord& r) {
  return json{{"wall_s", r.wall_s}}.dump() + "\n";
}

ResultRecord parse_record(const std::string& record_text, const std::string& timing_text) {
  try {
    const json doc = json::parse(record_text);
    ResultRecord r;
    r.config_hash = doc.at("config_hash").get<std::string>();
    r.method = doc.at("method").get<std::string>();
    r.ablation = doc.at("ablation").get<std::string>();
    r.seed = doc.at("seed").get<std::uint64_t>();
    r.accuracy = doc.at("accuracy").get<std::vector<std::vector<double>>>();
    r.final_acc = doc.at("final_acc").get<double>();
    if (!doc.at("final_fm").is_null()) r.final_fm = doc.at("final_fm").get<double>();
    r.consumed = doc.at("consumed").get<std::vector<std::size_t>>();
    r.task_sizes = doc.at("task_sizes").get<std::vector<std::size_t>>();
    r.memory_size = doc.at("memory_size").get<std::size_t>();
    const json& u = doc.at("updates");
    r.updates.inner = u.at("inner").get<std::size_t>();
    r.updates.outer = u.at("outer").get<std::size_t>();
    r.updates.adversarial = u.at("adversarial").get<std::size_t>();
    if (!timing_text.empty()) r.wall_s = json::parse(timing_text).at("wall_s").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("malformed result record: {}", e.what()));
  }
}

void write_record(const std::filesystem::path& seed_dir, const ResultRecord& record) {
  write_atomically(seed_dir / "record.json", record_json(record));
  write_atomically(seed_dir / "timing.json", timing_json(record));
}

ResultRecord load_record(const std::filesystem::path& seed_dir) {
  const auto timing = seed_dir / "timing.json";
  return parse_record(read_file(seed_dir / "record.json"),
                      std::filesystem::exists(timing) ? read_file(timing) : std::string());
}

std::string run_name(const RunConfig& cfg) {
  return fmt::format("{}_{}_{}", method_name(cfg.trainer.method),
                     ablation_name(cfg.trainer.ablation), config_hash(cfg).substr(0, 8));
}

std::vector<ResultRecord> run_in(const RunConfig& cfg, const std::filesystem::path& dir) {
  const auto run_dir = dir / run_name(cfg);
  write_atomically(run_dir / "config.txt", serialize_config(cfg));
  std::vector<ResultRecord> records;
  for (auto seed : cfg.seeds) {
    auto outcome = execute(cfg, seed);
    const auto seed_dir = run_dir / fmt::format("seed_{}", seed);
    write_record(seed_dir, outcome.record);
    write_atomically(seed_dir / "log.jsonl", log_jsonl(outcome.log));
    records.push_back(std::move(outcome.record));
  }
  write_atomically(run_dir / "summary.csv", summary_csv(records));
  return records;
}

std::vector<ResultRecord> run(const RunConfig& cfg) { return run_in(cfg, cfg.out); }

std::string summary_csv(const std::vector<ResultRecord>& records) {
  std::string out = "method,ablation,seed,task_index,acc_row,final_acc,final_fm,wall_s\n";
  for (const auto& r : records) {
    for (std::size_t k = 0; k < r.accuracy.size(); ++k) {
      out += fmt::format("{},{},{},{},{},{},{},{}\n", r.method, r.ablation, r.seed, k,
                         join(r.accuracy[k], ";"), r.final_acc,
                         r.final_fm ? fmt::format("{}", *r.final_fm) : std::string(), r.wall_s);
    }
  }
  return out;
}

SweepAxis parse_axis(const std::string& s) {
  if (s == "memory") return SweepAxis::memory;
  if (s == "lambda") return SweepAxis::lambda;
  throw ConfigError(fmt::format("unknown sweep axis '{}' (memory or lambda)", s));
}

std::vector<double> default_sweep_values(SweepAxis axis) {
  if (axis == SweepAxis::memory) return {50, 100, 150, 200};
  return {0.03, 0.09, 0.3, 0.9};
}

std::vector<SweepPoint> sweep(const RunConfig& cfg, SweepAxis axis, const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  const auto allowed = default_sweep_values(axis);
  for (double v : values) {
    if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
      throw ConfigError(fmt::format("sweep value {} is not one of {}", v, join(allowed, ", ")));
    }
  }
  const char* name = axis == SweepAxis::memory ? "memory" : "lambda";
  const std::filesystem::path dir = std::filesystem::path(cfg.out) / fmt::format("sweep_{}", name);
  std::vector<SweepPoint> points;
  for (double v : values) {
    RunConfig point = cfg;
    if (axis == SweepAxis::memory) {
      point.memory_budget = static_cast<std::size_t>(v);
    } else {
      point.trainer.weights.lambda3 = v;
    }
    points.push_back({v, run_in(point, dir / fmt::format("{}_{}", name, v))});
  }
  write_atomically(dir / "sweep.csv", sweep_csv(axis, points));
  return points;
}

std::string sweep_csv(SweepAxis axis, const std::vector<SweepPoint>& points) {
  std::string out = fmt::format("{},method,ablation,runs,acc_mean,acc_std,fm_mean,fm_std\n",
                                axis == SweepAxis::memory ? "memory" : "lambda3");
  for (const auto& p : points) {
    for (const auto& row : summarize(p.records)) {
      out += fmt::format("{},{},{},{},{},{},{},{}\n", p.value, row.method, row.ablation, row.runs,
                         row.acc_mean, row.acc_std, csv_double(row.fm_mean),
                         csv_double(row.fm_std));
    }
  }
  return out;
}

std::vector<GridPoint> grid(const RunConfig& cfg) {
  const std::vector<double> rates{0.001, 0.01, 0.1};
  const std::vector<double> lambda12{1, 3};
  const std::vector<double> lambda3{0.03, 0.09, 0.3, 0.9};
  std::vector<GridPoint> points;
  for (double a : rates) {
    for (double b : rates) {
      for (double l12 : lambda12) {
        for (double l3 : lambda3) {
          RunConfig point = cfg;
          point.trainer.method = Method::scale;
          point.trainer.inner_lr = a;
          point.trainer.outer_lr = b;
          point.trainer.weights.lambda1 = l12;
          point.trainer.weights.lambda2 = l12;
          point.trainer.weights.lambda3 = l3;
          point.data.task_limit = 3;
          std::vector<double> accs;
          for (auto seed : cfg.seeds) accs.push_back(run_seed(point, seed).final_acc);
          points.push_back({a, b, l12, l3, mean(accs)});
        }
      }
    }
  }
  std::stable_sort(points.begin(), points.end(),
                   [](const GridPoint& x, const GridPoint& y) { return x.mean_acc > y.mean_acc; });
  std::string csv = "inner_lr,outer_lr,lambda12,lambda3,mean_acc\n";
  for (const auto& p : points) {
    csv += fmt::format("{},{},{},{},{}\n", p.inner_lr, p.outer_lr, p.lambda12, p.lambda3, p.mean_acc);
  }
  write_atomically(std::filesystem::path(cfg.out) / "grid" / "grid.csv", csv);
  return points;
}

std::vector<std::pair<Ablation, std::vector<ResultRecord>>> ablate(const RunConfig& cfg) {
  std::vector<std::pair<Ablation, std::vector<ResultRecord>>> out;
  const auto dir = std::filesystem::path(cfg.out) / "ablate";
  for (Ablation a : {Ablation::full, Ablation::A, Ablation::B, Ablation::C}) {
    RunConfig variant = cfg;
    variant.trainer.method = Method::scale;
    variant.trainer.ablation = a;
    out.emplace_back(a, run_in(variant, dir));
  }
  return out;
}

double mean(const std::vector<double>& xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double stddev(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

std::vector<SummaryRow> summarize(const std::vector<ResultRecord>& records) {
  struct Group {
    std::vector<double> acc;
    std::vector<double> fm;
  };
  std::map<std::tuple<std::string, std::string, std::string>, Group> groups;
  for (const auto& r : records) {
    auto& g = groups[{r.method, r.ablation, r.config_hash}];
    g.acc.push_back(100.0 * r.final_acc);
    if (r.final_fm) g.fm.push_back(100.0 * *r.final_fm);
  }
  std::vector<SummaryRow> rows;
  for (const auto& [key, g] : groups) {
    SummaryRow row;
    std::tie(row.method, row.ablation, row.config_hash) = key;
    row.runs = g.acc.size();
    row.acc_mean = mean(g.acc);
    row.acc_std = stddev(g.acc);
    row.fm_mean = mean(g.fm);
    row.fm_std = g.fm.empty() ? std::numeric_limits<double>::quiet_NaN() : stddev(g.fm);
    rows.push_back(row);
  }
  return rows;
}

std::vector<ResultRecord> collect_records(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> seed_dirs;
  if (std::filesystem::is_directory(dir)) {
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().filename() == "record.json") {
        seed_dirs.push_back(entry.path().parent_path());
      }
    }
  }
  if (seed_dirs.empty()) throw NoDataError(fmt::format("no result records under {}", dir.string()));
  std::sort(seed_dirs.begin(), seed_dirs.end());
  std::vector<ResultRecord> records;
  for (const auto& d : seed_dirs) records.push_back(load_record(d));
  return records;
}

std::string format_table(const std::vector<SummaryRow>& rows) {
  const auto cell = [](double m, double s) {
    return std::isnan(m) ? std::string("n/a") : fmt::format("{:.2f} ± {:.2f}", m, s);
  };
  std::vector<std::array<std::string, 6>> lines{{"method", "ablation", "config", "runs", "ACC", "FM"}};
  for (const auto& r : rows) {
    lines.push_back({r.method, r.ablation, r.config_hash.substr(0, 8), std::to_string(r.runs),
                     cell(r.acc_mean, r.acc_std), cell(r.fm_mean, r.fm_std)});
  }
  // "±" is two bytes but one column wide.
  const auto width = [](const std::string& s) {
    return s.size() - static_cast<std::size_t>(std::count(s.begin(), s.end(), '\xc2'));
  };
  std::array<std::size_t, 6> widths{};
  for (const auto& l : lines) {
    for (std::size_t i = 0; i < l.size(); ++i) widths[i] = std::max(widths[i], width(l[i]));
  }
  std::string out;
  for (const auto& l : lines) {
    std::string line;
    for (std::size_t i = 0; i < l.size(); ++i) {
      line += l[i] + std::string(widths[i] - width(l[i]) + (i + 1 < l.size() ? 2 : 0), ' ');
    }
    out += trim(line) + "\n";
  }
  return out;
}

std::string report_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "method,ablation,config_hash,runs,acc_mean,acc_std,fm_mean,fm_std\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{},{}\n", r.method, r.ablation, r.config_hash, r.runs,
                       r.acc_mean, r.acc_std, csv_double(r.fm_mean), csv_double(r.fm_std));
  }
  return out;
}

std::vector<SummaryRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) ||
      line != "method,ablation,config_hash,runs,acc_mean,acc_std,fm_mean,fm_std") {
    throw FormatError("report CSV has an unexpected header");
  }
  std::vector<SummaryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::string col;
    std::istringstream fields_in(line);
    while (std::getline(fields_in, col, ',')) cols.push_back(col);
    if (!line.empty() && line.back() == ',') cols.emplace_back();
    if (cols.size() != 8) throw FormatError(fmt::format("report CSV row has {} columns", cols.size()));
    try {
      rows.push_back({cols[0], cols[1], cols[2], to_size(cols[3]), to_double(cols[4]),
                      to_double(cols[5]), parse_csv_double(cols[6]), parse_csv_double(cols[7])});
    } catch (const std::invalid_argument& e) {
      throw FormatError(fmt::format("bad report CSV row: {}", e.what()));
    }
  }
  return rows;
}

}  // namespace scale
