#include <cmath>
#include <map>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <doctest.h>

#include "scale/errors.hpp"
#include "scale/memory.hpp"

using namespace scale;

namespace {

MemoryEntry entry(int task, double value) {
  MemoryEntry e;
  e.x = {value, -value};
  e.label = 0;
  e.task = task;
  e.logits = {value, 0.0};
  e.disc_logits = {0.0, value};
  return e;
}

Batch batch_of(std::size_t n, int task) {
  Batch b;
  b.inputs = Tensor(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    b.inputs(i, 0) = static_cast<double>(i);
    b.labels.push_back(1);
    b.tasks.push_back(task);
  }
  return b;
}

void fill(EpisodicMemory& memory, int task, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) memory.observe(entry(task, static_cast<double>(i)), i + 1);
}

}  // namespace

TEST_CASE("reservoir keeps the first budget observations") {
  EpisodicMemory memory;
  CHECK(memory.budget() == 50);
  fill(memory, 0, 50);
  CHECK(memory.size(0) == 50);
  for (std::size_t i = 0; i < 50; ++i) CHECK(memory.slots().at(0)[i].x[0] == static_cast<double>(i));
  fill(memory, 0, 0);
  for (std::uint64_t seen = 51; seen <= 500; ++seen) {
    memory.observe(entry(0, static_cast<double>(seen)), seen);
  }
  CHECK(memory.size(0) == 50);
  CHECK_THROWS_AS(memory.observe(entry(0, 1.0), 0), ContractError);
}

TEST_CASE("a zero budget stores nothing") {
  EpisodicMemory memory(0);
  fill(memory, 0, 10);
  CHECK(memory.empty());
  Rng rng = make_stream(0, 1);
  CHECK(memory.sample(64, rng).empty());
}

TEST_CASE("tasks never evict each other") {
  EpisodicMemory memory(5, 3);
  fill(memory, 0, 5);
  const auto before = memory.slots().at(0);
  fill(memory, 1, 200);
  CHECK(memory.slots().at(0) == before);
  CHECK(memory.size(1) == 5);
  CHECK(memory.size() == 10);
}

TEST_CASE("budget-one reservoir is uniform") {
  constexpr std::size_t kLength = 100;
  constexpr int kTrials = 20000;
  std::vector<double> counts(kLength, 0.0);
  for (int t = 0; t < kTrials; ++t) {
    EpisodicMemory memory(1, static_cast<std::uint64_t>(t));
    fill(memory, 0, kLength);
    counts[static_cast<std::size_t>(memory.slots().at(0)[0].x[0])] += 1.0;
  }
  const double expected = static_cast<double>(kTrials) / kLength;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  const boost::math::chi_squared dist(kLength - 1);
  CHECK(boost::math::cdf(boost::math::complement(dist, chi2)) > 0.01);
}

TEST_CASE("sampling") {
  EpisodicMemory single(50, 1);
  single.observe(entry(2, 7.0), 1);
  Rng rng = make_stream(1, 2);
  const auto draws = single.sample(64, rng);
  CHECK(draws.size() == 64);
  for (const auto& d : draws) CHECK(d == entry(2, 7.0));

  SUBCASE("task frequencies follow slot proportions") {
    EpisodicMemory memory(50, 2);
    fill(memory, 0, 50);
    fill(memory, 1, 30);
    fill(memory, 2, 10);
    constexpr int kDraws = 10000;
    std::map<int, int> hits;
    Rng r = make_stream(2, 3);
    for (const auto& e : memory.sample(kDraws, r)) ++hits[e.task];
    const std::map<int, double> share{{0, 50.0 / 90}, {1, 30.0 / 90}, {2, 10.0 / 90}};
    for (const auto& [task, p] : share) {
      const double sigma = std::sqrt(kDraws * p * (1 - p));
      CHECK(std::abs(hits[task] - kDraws * p) < 3 * sigma);
    }
  }

  SUBCASE("same generator state, same draws") {
    EpisodicMemory memory(50, 2);
    fill(memory, 0, 40);
    Rng a = make_stream(9, 9);
    Rng b = make_stream(9, 9);
    CHECK(memory.sample(64, a) == memory.sample(64, b));
  }
}

TEST_CASE("partition") {
  Rng rng = make_stream(3, 3);
  const Batch current = batch_of(10, 0);

  SUBCASE("empty memory") {
    EpisodicMemory memory;
    const Partition p = memory.partition(current, 64, rng);
    CHECK(p.train_set().inputs == current.inputs);
    CHECK(p.val_set().inputs == current.inputs);
    CHECK(p.train_set().labels == current.labels);
  }

  SUBCASE("both sides hold the whole current batch") {
    EpisodicMemory memory(50, 1);
    fill(memory, 0, 50);
    const Partition p = memory.partition(current, 64, rng);
    CHECK(p.train_replay.size() == 64);
    CHECK(p.val_replay.size() == 64);
    for (const Batch& side : {p.train_set(), p.val_set()}) {
      REQUIRE(side.size() == 74);
      for (std::size_t r = 0; r < current.size(); ++r) {
        CHECK(side.inputs(r, 0) == current.inputs(r, 0));
      }
    }
  }

  SUBCASE("the two replay draws differ") {
    EpisodicMemory memory(64, 1);
    fill(memory, 0, 64);
    int identical = 0;
    for (int t = 0; t < 1000; ++t) {
      const Partition p = memory.partition(current, 64, rng);
      if (p.train_replay == p.val_replay) ++identical;
    }
    // Identical draws have probability 64^-64 per partition.
    CHECK(identical == 0);
  }

  CHECK_THROWS_AS(EpisodicMemory().partition(Batch{}, 64, rng), ContractError);
}

TEST_CASE("restore enforces the budget") {
  EpisodicMemory memory(2);
  std::map<int, std::vector<MemoryEntry>> slots{{0, {entry(0, 1), entry(0, 2), entry(0, 3)}}};
  CHECK_THROWS_AS(memory.restore(slots, make_stream(0, 0)), CapacityError);
  slots[0].pop_back();
  memory.restore(slots, make_stream(0, 0));
  CHECK(memory.size() == 2);
}
