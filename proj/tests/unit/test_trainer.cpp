#include <cmath>
#include <vector>

#include <doctest.h>

#include "helpers.hpp"
#include "scale/errors.hpp"
#include "scale/trainer.hpp"

using namespace scale;
using scale::test::gradient_error;
using scale::test::random_tensor;

namespace {

SyntheticSpec small_spec(std::size_t tasks = 3, std::size_t train = 40) {
  SyntheticSpec s;
  s.n_tasks = tasks;
  s.train_per_task = train;
  s.test_per_task = 30;
  s.input_dim = 8;
  s.seed = 4;
  return s;
}

ModelConfig small_model() {
  ModelConfig c;
  c.hidden = {16, 12};
  c.embedding_dim = 6;
  c.max_tasks = 6;
  c.discriminator_hidden = 10;
  return c;
}

// The model configuration run_stream builds for `stream`.
ModelConfig model_for(const TaskStream& stream, ModelConfig c) {
  c.input_dim = stream.input_dim;
  c.classes_per_head = stream.classes_per_task;
  c.head_mode = stream.protocol == Protocol::split ? HeadMode::multi : HeadMode::single;
  return c;
}

TrainerConfig desk_trainer(std::uint64_t seed = 0) {
  TrainerConfig t;
  t.inner_lr = 0.3;
  t.replay_size = 16;
  t.seed = seed;
  return t;
}

std::vector<Tensor> values(const std::vector<Variable>& params) { return parameter_values(params); }

std::vector<Tensor> all_values(const ScaleModel& m) {
  std::vector<Tensor> out;
  for (const auto& [name, p] : m.named_parameters()) out.push_back(p.value());
  return out;
}

void jitter_biases(ScaleModel& model, Rng& rng) {
  for (auto& [name, p] : model.named_parameters()) {
    if (name.find("bias") == std::string::npos) continue;
    for (auto& v : p.mutable_value().data()) v = 0.5 * (uniform_unit(rng) - 0.5);
  }
}

std::vector<MemoryEntry> replay_for(const ScaleModel& model, const Batch& b) {
  std::vector<MemoryEntry> out;
  const Tensor logits = model.snapshot_logits(b.inputs, b.tasks.front());
  const Tensor disc = model.snapshot_discriminator(b.inputs);
  for (std::size_t i = 0; i < b.size(); ++i) {
    MemoryEntry e;
    e.x.assign(b.inputs.row(i).begin(), b.inputs.row(i).end());
    e.label = b.labels[i];
    e.task = b.tasks[i];
    for (auto& v : (e.logits = {logits.row(i).begin(), logits.row(i).end()})) v += 0.1;
    e.disc_logits.assign(disc.row(i).begin(), disc.row(i).end());
    out.push_back(std::move(e));
  }
  return out;
}

// Records every parameter group around each step and checks that only the
// group a step owns moved.
struct FreezeAudit {
  struct Groups {
    std::vector<Tensor> extractor, heads, generator, discriminator;
  };
  Groups before;
  std::size_t violations = 0;
  std::size_t steps = 0;

  static Groups capture(const ScaleModel& m) {
    return {values(m.extractor_parameters()), values(m.head_parameters()),
            values(m.generator_parameters()), values(m.discriminator_parameters())};
  }

  StepHook hook() {
    return [this](StepKind kind, bool after, const ScaleModel& m) {
      if (!after) {
        before = capture(m);
        return;
      }
      ++steps;
      const Groups now = capture(m);
      const bool base_same = now.extractor == before.extractor && now.heads == before.heads;
      const bool gen_same = now.generator == before.generator;
      const bool disc_same = now.discriminator == before.discriminator;
      bool ok = true;
      switch (kind) {
        case StepKind::inner: ok = gen_same && disc_same; break;
        case StepKind::outer: ok = base_same && disc_same; break;
        case StepKind::adversarial: ok = base_same && gen_same; break;
      }
      if (!ok) ++violations;
    };
  }
};

}  // namespace

TEST_CASE("each step moves only its own parameter group") {
  const TaskStream stream = make_synthetic(small_spec());
  ModelConfig mcfg = model_for(stream, small_model());
  TrainerConfig cfg = desk_trainer();
  cfg.weights = {1.0, 1.0, 0.3};
  ScaleModel model(mcfg, 1);
  model.add_task(0);
  model.add_task(1);
  const auto schedule = batches(stream.tasks[1].train, 10, 1, 1);
  const auto replay = replay_for(model, batches(stream.tasks[0].train, 10, 2, 0).front());
  Rng noise = make_stream(1, 9);

  const auto check = [&](auto&& step, bool base, bool gen, bool disc) {
    const auto g = FreezeAudit::capture(model);
    step();
    const auto n = FreezeAudit::capture(model);
    CHECK((n.extractor == g.extractor) == !base);
    CHECK((n.heads == g.heads) == !base);
    CHECK((n.generator == g.generator) == !gen);
    CHECK((n.discriminator == g.discriminator) == !disc);
  };
  check([&] { inner_step(model, schedule[0], replay, cfg); }, true, false, false);
  check([&] { outer_step(model, schedule[0], replay, cfg); }, false, true, false);
  check([&] { adversarial_step(model, schedule[0], replay, cfg, noise); }, false, false, true);
  CHECK(cfg.adversarial_lr == 0.001);
  for (const auto& [name, p] : model.named_parameters()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("freeze contracts hold across whole runs") {
  const TaskStream stream = make_synthetic(small_spec());
  for (Ablation ab : {Ablation::full, Ablation::A, Ablation::B, Ablation::C}) {
    TrainerConfig cfg = desk_trainer(2);
    cfg.ablation = ab;
    cfg.n_in = 2;
    cfg.n_ad = 2;
    FreezeAudit audit;
    const RunState state = run_stream(stream, small_model(), cfg, 50, audit.hook());
    CHECK(audit.violations == 0);
    const auto& u = state.updates;
    CHECK(audit.steps == u.inner + u.outer + u.adversarial);
  }
}

TEST_CASE("update counters and one-epoch consumption") {
  const TaskStream stream = make_synthetic(small_spec(3, 45));
  TrainerConfig cfg = desk_trainer();
  cfg.n_in = 2;
  cfg.n_out = 3;
  cfg.n_ad = 4;
  const RunState state = run_stream(stream, small_model(), cfg, 50);
  const std::size_t rounds = 3 * 5;  // 45 samples in batches of 10
  CHECK(state.updates.inner == rounds * 6);
  CHECK(state.updates.outer == rounds * 3);
  CHECK(state.updates.adversarial == rounds * 4);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(state.consumed[k] == 45);
    CHECK(state.log[k].consumed == 45);
    CHECK(state.samples_seen[k] == 45);
  }

  TrainerConfig single = desk_trainer();
  const RunState one = run_stream(stream, small_model(), single, 50);
  CHECK(one.updates.inner == rounds);
  CHECK(one.updates.outer == rounds);
  CHECK(one.updates.adversarial == rounds);
}

TEST_CASE("memory grows by min(N, budget) per task") {
  for (std::size_t n : {30, 80}) {
    const TaskStream stream = make_synthetic(small_spec(3, n));
    for (Method m : {Method::scale, Method::er}) {
      TrainerConfig cfg = desk_trainer();
      cfg.method = m;
      const RunState state = run_stream(stream, small_model(), cfg, 50);
      std::size_t expected = 0;
      for (std::size_t k = 0; k < 3; ++k) {
        expected += std::min<std::size_t>(n, 50);
        CHECK(state.log[k].memory_size == expected);
        CHECK(state.consumed[k] == n);
      }
    }
  }
}

TEST_CASE("outer gradient matches finite differences") {
  const TaskStream stream = make_synthetic(small_spec());
  const ModelConfig mcfg = model_for(stream, small_model());
  Rng rng = make_stream(3, 3);
  for (int trial = 0; trial < 20; ++trial) {
    ScaleModel model(mcfg, static_cast<std::uint64_t>(trial));
    model.add_task(0);
    model.add_task(1);
    jitter_biases(model, rng);
    for (auto& p : model.generator_parameters()) {
      for (auto& v : p.mutable_value().data()) v += 0.1 * (uniform_unit(rng) - 0.5);
    }
    const Batch current = batches(stream.tasks[1].train, 4, trial, 1).front();
    const auto replay = replay_for(model, batches(stream.tasks[0].train, 3, trial, 0).front());
    const LossWeights w{1.0, 1.0, 0.3};
    const AdversarialConfig adv;
    const auto loss = [&] { return total_loss(model, current, replay, w, adv, 2).total; };
    CHECK(gradient_error(loss, model.generator_parameters()) < 1e-4);
  }
}

TEST_CASE("without the transform the generator gets no gradient") {
  const TaskStream stream = make_synthetic(small_spec());
  ModelConfig mcfg = model_for(stream, small_model());
  mcfg.transform = TransformMode::disabled;
  ScaleModel model(mcfg, 5);
  model.add_task(0);
  const Batch current = batches(stream.tasks[0].train, 10, 0, 0).front();
  const auto replay = replay_for(model, current);
  const TrainerConfig cfg = desk_trainer();

  const LossTerms terms =
      total_loss(model, current, replay, cfg.weights, cfg.adversarial, 1);
  ad::backward(terms.total);
  for (const auto& p : model.generator_parameters()) {
    if (p.has_grad()) {
      for (double g : p.grad().data()) CHECK(g == 0.0);
    }
  }
  for (auto& [name, p] : model.named_parameters()) p.zero_grad();

  const auto gen = values(model.generator_parameters());
  outer_step(model, current, replay, cfg);
  CHECK(values(model.generator_parameters()) == gen);

  TrainerConfig c = desk_trainer();
  c.ablation = Ablation::C;
  std::size_t moved = 0;
  std::vector<Tensor> last;
  const StepHook hook = [&](StepKind kind, bool after, const ScaleModel& m) {
    if (kind != StepKind::outer) return;
    if (!after) last = values(m.generator_parameters());
    else if (values(m.generator_parameters()) != last) ++moved;
  };
  run_stream(stream, small_model(), c, 50, hook);
  CHECK(moved == 0);
}

TEST_CASE("a small inner step does not increase the training loss") {
  const TaskStream stream = make_synthetic(small_spec());
  const ModelConfig mcfg = model_for(stream, small_model());
  TrainerConfig cfg = desk_trainer();
  cfg.inner_lr = 1e-3;
  cfg.weights = {1.0, 1.0, 0.3};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ScaleModel model(mcfg, seed);
    model.add_task(0);
    model.add_task(1);
    const Batch current = batches(stream.tasks[1].train, 10, seed, 1).front();
    const auto replay = replay_for(model, batches(stream.tasks[0].train, 8, seed, 0).front());
    const auto loss = [&] {
      return total_loss(model, current, replay, cfg.weights, cfg.adversarial, 2).total.item();
    };
    const double before = loss();
    inner_step(model, current, replay, cfg);
    CHECK(loss() <= before);
  }
}

TEST_CASE("zero weights, no adversary and no memory reduce to plain SGD") {
  const TaskStream stream = make_synthetic(small_spec());
  TrainerConfig cfg = desk_trainer(3);
  cfg.weights = {0.0, 0.0, 0.0};
  cfg.adversarial.enabled = false;
  cfg.ablation = Ablation::C;
  const RunState state = run_stream(stream, small_model(), cfg, 0);

  // Reference: one SGD step on the head's cross-entropy per minibatch.
  ModelConfig mcfg = model_for(stream, small_model());
  mcfg.transform = TransformMode::disabled;
  ScaleModel ref(mcfg, cfg.seed);
  std::vector<std::vector<double>> rows;
  for (const TaskData& task : stream.tasks) {
    ref.add_task(task.task);
    for (const Batch& b : batches(task.train, cfg.batch_size, batch_seed(cfg.seed, task.task), task.task)) {
      std::vector<Variable> params = ref.extractor_parameters();
      for (auto& p : ref.head_parameters()) params.push_back(p);
      for (auto& p : params) p.zero_grad();
      ad::backward(ad::softmax_cross_entropy(ref.logits(Variable(b.inputs), task.task), b.labels));
      std::vector<Variable> touched;
      for (auto& p : params) {
        if (p.has_grad()) touched.push_back(p);
      }
      ad::sgd_step(touched, cfg.inner_lr);
    }
    std::vector<double> row;
    for (int j = 0; j <= task.task; ++j) {
      row.push_back(accuracy(ref, stream.tasks[static_cast<std::size_t>(j)].test, j));
    }
    rows.push_back(row);
  }
  CHECK(all_values(state.model) == all_values(ref));
  for (std::size_t k = 0; k < rows.size(); ++k) CHECK(state.accuracy.rows()[k] == rows[k]);
}

TEST_CASE("fine-tuning and replay at budget zero coincide with reduced SCALE") {
  const TaskStream stream = make_synthetic(small_spec());
  TrainerConfig reduced = desk_trainer(1);
  reduced.weights = {0.0, 0.0, 0.0};
  reduced.adversarial.enabled = false;
  reduced.ablation = Ablation::C;
  const RunState a = run_stream(stream, small_model(), reduced, 0);

  TrainerConfig ft = desk_trainer(1);
  ft.method = Method::finetune;
  const RunState b = run_stream(stream, small_model(), ft, 50);
  TrainerConfig er = desk_trainer(1);
  er.method = Method::er;
  const RunState c = run_stream(stream, small_model(), er, 0);

  CHECK(all_values(a.model) == all_values(b.model));
  CHECK(all_values(b.model) == all_values(c.model));
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(a.accuracy.rows()[k] == b.accuracy.rows()[k]);
    CHECK(b.accuracy.rows()[k] == c.accuracy.rows()[k]);
  }
  CHECK(b.memory.empty());
}

TEST_CASE("ablation full is the default pipeline") {
  const TaskStream stream = make_synthetic(small_spec());
  TrainerConfig cfg = desk_trainer(6);
  const RunState piped = run_stream(stream, small_model(), cfg, 50);

  const ModelConfig mcfg = model_for(stream, small_model());
  RunState manual(ScaleModel(mcfg, cfg.seed), EpisodicMemory(50, cfg.seed), cfg.seed);
  for (const TaskData& task : stream.tasks) train_task(manual, task, cfg);
  CHECK(all_values(piped.model) == all_values(manual.model));
  CHECK(piped.memory.slots() == manual.memory.slots());
  CHECK(piped.updates == manual.updates);

  const TrainerConfig a = apply_ablation([] { TrainerConfig t; t.ablation = Ablation::A; return t; }());
  CHECK(a.weights.lambda3 == 0.0);
  CHECK_FALSE(a.adversarial.enabled);
  const TrainerConfig b = apply_ablation([] { TrainerConfig t; t.ablation = Ablation::B; return t; }());
  CHECK(b.weights.lambda1 == 0.0);
  CHECK(b.weights.lambda2 == 0.0);
  CHECK(b.adversarial.enabled);
  TrainerConfig c;
  c.ablation = Ablation::C;
  CHECK(apply_ablation(ModelConfig{}, c).transform == TransformMode::disabled);
}

TEST_CASE("evaluation") {
  const TaskStream stream = make_synthetic(small_spec());
  const RunState state = run_stream(stream, small_model(), desk_trainer(), 50);
  for (std::size_t k = 0; k < 3; ++k) CHECK(state.accuracy.rows()[k].size() == k + 1);

  SUBCASE("an untrained model sits at chance") {
    ModelConfig mcfg = model_for(stream, small_model());
    ScaleModel model(mcfg, 9);
    model.add_task(0);
    Rng rng = make_stream(9, 9);
    Dataset data{random_tensor(2000, 8, rng, 0.0, 1.0), {}};
    for (std::size_t i = 0; i < 2000; ++i) data.labels.push_back(static_cast<int>(uniform_index(rng, 2)));
    CHECK(std::abs(accuracy(model, data, 0) - 0.5) <= 0.05);
  }

  SUBCASE("evaluation mutates nothing") {
    const auto before = all_values(state.model);
    const auto rows = evaluate(state.model, stream.tasks);
    CHECK(rows.size() == 3);
    CHECK(all_values(state.model) == before);
    for (const auto& [name, p] : state.model.named_parameters()) CHECK_FALSE(p.has_grad());
    CHECK(rows == evaluate(state.model, stream.tasks));
  }

  SUBCASE("unseen tasks are rejected") {
    ScaleModel model(model_for(stream, small_model()), 1);
    CHECK_THROWS_AS(accuracy(model, stream.tasks[0].test, 0), UnknownTaskError);
  }
}

TEST_CASE("the discriminator learns separable frozen features") {
  ModelConfig mcfg = small_model();
  mcfg.input_dim = 8;
  ScaleModel model(mcfg, 11);
  model.add_task(0);
  model.add_task(1);
  Rng rng = make_stream(11, 11);
  Batch batch;
  batch.inputs = Tensor(40, 8);
  for (std::size_t i = 0; i < 40; ++i) {
    const int task = static_cast<int>(i % 2);
    for (std::size_t c = 0; c < 8; ++c) {
      const bool hot = (c < 4) == (task == 0);
      batch.inputs(i, c) = (hot ? 3.0 : 0.0) + 0.1 * uniform_unit(rng);
    }
    batch.labels.push_back(0);
    batch.tasks.push_back(task);
  }
  TrainerConfig cfg;
  // The default rate is tuned for the interleaved game, not a 200-step probe.
  cfg.adversarial_lr = 0.2;
  const auto extractor = values(model.extractor_parameters());
  Rng noise = make_stream(11, 12);
  for (int step = 0; step < 200; ++step) adversarial_step(model, batch, {}, cfg, noise);
  CHECK(values(model.extractor_parameters()) == extractor);

  const Tensor logits =
      model.discriminator().discriminate_frozen(model.extract(Variable(batch.inputs)), 2).logits.value();
  std::size_t correct = 0;
  for (std::size_t r = 0; r < 40; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < 3; ++c) {
      if (logits(r, c) > logits(r, best)) best = c;
    }
    if (static_cast<int>(best) == batch.tasks[r] + 1) ++correct;
  }
  CHECK(static_cast<double>(correct) / 40.0 > 0.9);
}

TEST_CASE("invalid trainer settings are rejected") {
  const TaskStream stream = make_synthetic(small_spec());
  TrainerConfig cfg = desk_trainer();
  cfg.inner_lr = 0.0;
  CHECK_THROWS_AS(run_stream(stream, small_model(), cfg, 50), ConfigError);
  cfg = desk_trainer();
  cfg.batch_size = 0;
  CHECK_THROWS_AS(run_stream(stream, small_model(), cfg, 50), ConfigError);
  cfg = desk_trainer();
  cfg.weights.lambda2 = -1.0;
  CHECK_THROWS_AS(run_stream(stream, small_model(), cfg, 50), ConfigError);
}

TEST_CASE("runs are deterministic") {
  const TaskStream stream = make_synthetic(small_spec());
  const RunState a = run_stream(stream, small_model(), desk_trainer(8), 50);
  const RunState b = run_stream(stream, small_model(), desk_trainer(8), 50);
  CHECK(all_values(a.model) == all_values(b.model));
  for (std::size_t k = 0; k < 3; ++k) CHECK(a.accuracy.rows()[k] == b.accuracy.rows()[k]);
}
