#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "doctest.h"

#include "lossprio/errors.hpp"
#include "lossprio/prioritizer.hpp"
#include "lossprio/stats.hpp"

using namespace lossprio;

namespace {

// Brute-force oracle: fraction of window entries <= score, raised to beta.
double oracle_probability(const std::vector<double>& window, double score, double beta) {
  std::size_t below = 0;
  for (double w : window) below += w <= score ? 1 : 0;
  return std::pow(static_cast<double>(below) / static_cast<double>(window.size()), beta);
}

std::vector<Candidate> candidates_for(const std::vector<double>& losses, std::size_t first_id = 0) {
  std::vector<Candidate> out;
  for (std::size_t i = 0; i < losses.size(); ++i) out.push_back({first_id + i, losses[i], {}});
  return out;
}

}  // namespace

TEST_CASE("score histogram keeps the most recent window") {
  ScoreHistogram hist(3);
  CHECK(hist.empty());
  CHECK(hist.cdf(1.0) == 0.0);
  for (double v : {5.0, 1.0, 3.0, 2.0}) hist.insert(v);
  CHECK(hist.size() == 3);
  CHECK(hist.window() == std::deque<double>{1.0, 3.0, 2.0});
  CHECK(hist.cdf(0.5) == 0.0);
  CHECK(hist.cdf(2.0) == doctest::Approx(2.0 / 3.0));
  CHECK(hist.cdf(5.0) == 1.0);
}

TEST_CASE("selection probability is CDF^beta with inclusive ties") {
  ScoreHistogram hist(1024);
  const std::vector<double> window{1.0, 2.0, 3.0, 4.0};
  for (double v : window) hist.insert(v);

  CHECK(*selection_probability(2.0, hist, 2.0) == doctest::Approx(0.25));
  CHECK(*selection_probability(2.0, hist, 2.0) == doctest::Approx(oracle_probability(window, 2.0, 2.0)));
  CHECK(*selection_probability(2.0, hist, 0.0) == 1.0);
  CHECK(*selection_probability(4.0, hist, 3.0) == 1.0);
  CHECK(*selection_probability(0.5, hist, 1.0) == 0.0);
  CHECK_FALSE(selection_probability(1.0, ScoreHistogram(4), 1.0).has_value());

  Rng rng(3);
  std::vector<double> random_window;
  ScoreHistogram big(50);
  for (int i = 0; i < 50; ++i) {
    const double v = std::floor(uniform01(rng) * 10.0);
    random_window.push_back(v);
    big.insert(v);
  }
  double last = 0.0;
  for (double s = -1.0; s <= 11.0; s += 0.25) {
    const double p = *selection_probability(s, big, 1.5);
    CHECK(p == doctest::Approx(oracle_probability(random_window, s, 1.5)).epsilon(1e-12));
    CHECK(p >= last);
    last = p;
  }
}

TEST_CASE("expected selectivity is 1/(beta+1)") {
  CHECK(expected_selection_fraction(0.0) == 1.0);
  CHECK(expected_selection_fraction(1.0) == doctest::Approx(0.5));
  CHECK(expected_selection_fraction(2.0) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("candidate buffer emits exact batches in arrival order") {
  CandidateBuffer buf(3);
  CHECK_FALSE(buf.pop_batch().has_value());
  for (std::size_t id : {7, 8, 9, 10}) buf.push(id);
  CHECK(*buf.pop_batch() == BatchIds{7, 8, 9});
  CHECK(buf.size() == 1);
  CHECK_FALSE(buf.pop_batch().has_value());
  CHECK_THROWS_AS(CandidateBuffer(0), ConfigError);
}

TEST_CASE("beta zero admits every example in order") {
  const std::size_t b = 16;
  ScoreHistogram hist(64);
  CandidateBuffer buf(b);
  Rng rng(1);
  std::vector<ScoredId> scored;
  for (std::size_t i = 0; i < 2 * b; ++i) scored.push_back({i, uniform01(rng)});
  const auto batches = sb_step(scored, hist, buf, 0.0, rng);
  REQUIRE(batches.size() == 2);
  for (std::size_t i = 0; i < 2 * b; ++i) CHECK(batches[i / b][i % b] == i);
  CHECK(buf.size() == 0);
}

TEST_CASE("beta one admits half of a continuous score stream") {
  ScoreHistogram hist(1024);
  CandidateBuffer buf(128);
  Rng scores(7);
  Rng coins(8);
  std::vector<ScoredId> scored;
  for (std::size_t i = 0; i < 100000; ++i) scored.push_back({i, uniform01(scores)});
  const auto batches = sb_step(scored, hist, buf, 1.0, coins, 128);
  const double rate = static_cast<double>(batches.size() * 128 + buf.size()) / 100000.0;
  CHECK(rate == doctest::Approx(0.5).epsilon(0.02));
  for (const auto& batch : batches) CHECK(batch.size() == 128);
}

TEST_CASE("constant scores are all admitted") {
  ScoreHistogram hist(1024);
  CandidateBuffer buf(10);
  Rng rng(2);
  std::vector<ScoredId> scored;
  for (std::size_t i = 0; i < 5000; ++i) scored.push_back({i, 0.42});
  const auto batches = sb_step(scored, hist, buf, 3.0, rng);
  CHECK(batches.size() == 500);
}

TEST_CASE("warm-up admits everything until the window holds warmup scores") {
  ScoreHistogram hist(1024);
  CandidateBuffer buf(4);
  Rng rng(2);
  // Strictly decreasing scores would each have CDF 1/n; with warm-up they pass anyway.
  std::vector<ScoredId> scored;
  for (std::size_t i = 0; i < 3; ++i) scored.push_back({i, 10.0 - static_cast<double>(i)});
  sb_step(scored, hist, buf, 50.0, rng, 4);
  CHECK(buf.size() == 3);
}

TEST_CASE("selective backprop oversamples a planted high-loss group") {
  PrioritizerConfig cfg;
  cfg.kind = PrioritizerKind::sb_loss;
  cfg.beta = 1.0;
  auto sb = make_prioritizer(cfg, 32);
  Rng rng(5);
  std::map<std::size_t, std::size_t> picks;
  std::set<std::size_t> planted;
  std::size_t planted_offered = 0;
  for (std::size_t round = 0; round < 200; ++round) {
    std::vector<double> losses(100);
    for (std::size_t i = 0; i < 100; ++i) {
      losses[i] = i < 10 ? 2.0 + uniform01(rng) : uniform01(rng);
      if (i < 10) {
        planted.insert(round * 100 + i);
        ++planted_offered;
      }
    }
    for (const auto& batch : sb->feed(candidates_for(losses, round * 100))) {
      for (std::size_t id : batch.ids) ++picks[id];
    }
  }
  std::size_t planted_picked = 0;
  for (const auto& [id, n] : picks) planted_picked += planted.count(id) ? n : 0;
  // Under uniform 50% admission this many planted picks would be very unlikely.
  CHECK(binomial_upper_tail(planted_picked, planted_offered, 0.5) < 0.001);
}

TEST_CASE("selective backprop never emits unknown ids or partial batches") {
  for (auto kind : {PrioritizerKind::sb_loss, PrioritizerKind::sb_entropy, PrioritizerKind::vr,
                    PrioritizerKind::uniform}) {
    PrioritizerConfig cfg;
    cfg.kind = kind;
    cfg.beta = 2.0;
    cfg.pool_capacity = 24;
    auto p = make_prioritizer(cfg, 8);
    Rng rng(9);
    std::set<std::size_t> offered;
    std::vector<double> probs{0.2, 0.3, 0.5};
    for (std::size_t round = 0; round < 50; ++round) {
      std::vector<Candidate> cs;
      for (std::size_t i = 0; i < 13; ++i) {
        const std::size_t id = round * 13 + i;
        offered.insert(id);
        cs.push_back({id, uniform01(rng), probs});
      }
      for (const auto& batch : p->feed(cs)) {
        CHECK(batch.ids.size() == 8);
        CHECK(batch.gate_on.has_value() == (kind == PrioritizerKind::vr));
        for (std::size_t id : batch.ids) CHECK(offered.count(id) == 1);
      }
    }
  }
}

TEST_CASE("VR gate stays off for constant losses") {
  SamplingPool pool(6, 0.0);
  for (std::size_t i = 0; i < 6; ++i) pool.push(i, 0.3);
  CHECK(pool.full());
  CHECK(pool.distance_from_uniform() == 0.0);
  Rng rng(1);
  const PoolDraw draw = draw_from_pool(pool, 3, rng);
  CHECK_FALSE(draw.gate_on);
  CHECK(draw.ids.size() == 3);
  CHECK(std::set<std::size_t>(draw.ids.begin(), draw.ids.end()).size() == 3);
  CHECK(pool.entries().empty());
}

TEST_CASE("VR draws are proportional to loss when the gate is open") {
  SamplingPool probe(2, 0.0);
  probe.push(0, 3.0);
  probe.push(1, 1.0);
  const auto q = probe.draw_probabilities();
  CHECK(q[0] == doctest::Approx(0.75));
  CHECK(q[1] == doctest::Approx(0.25));
  // n * sum (q - 1/2)^2 = 2 * (0.0625 + 0.0625)
  CHECK(probe.distance_from_uniform() == doctest::Approx(0.25));

  Rng rng(4);
  std::uint64_t first = 0;
  for (int i = 0; i < 40000; ++i) {
    SamplingPool pool(2, 0.0);
    pool.push(0, 3.0);
    pool.push(1, 1.0);
    const PoolDraw d = draw_from_pool(pool, 1, rng);
    CHECK(d.gate_on);
    first += d.ids.front() == 0 ? 1 : 0;
  }
  CHECK(static_cast<double>(first) / 40000.0 == doctest::Approx(0.75).epsilon(0.02));
}

TEST_CASE("a high gate threshold forces uniform draws") {
  Rng rng(6);
  std::vector<std::uint64_t> counts(2, 0);
  for (int i = 0; i < 20000; ++i) {
    SamplingPool pool(2, 10.0);
    pool.push(0, 9.0);
    pool.push(1, 1.0);
    const PoolDraw d = draw_from_pool(pool, 1, rng);
    CHECK_FALSE(d.gate_on);
    ++counts[d.ids.front()];
  }
  CHECK(chi_square_uniform_pvalue(counts) > 0.001);
}

TEST_CASE("VR with pool 3B backpropagates one third of the stream") {
  PrioritizerConfig cfg;
  cfg.kind = PrioritizerKind::vr;
  cfg.pool_capacity = 48;
  auto vr = make_prioritizer(cfg, 16);
  Rng rng(2);
  std::size_t emitted = 0;
  std::vector<double> losses(4800);
  for (auto& l : losses) l = uniform01(rng);
  for (const auto& batch : vr->feed(candidates_for(losses))) emitted += batch.ids.size();
  CHECK(emitted == 1600);
}

TEST_CASE("make_prioritizer validates its configuration") {
  PrioritizerConfig cfg;
  cfg.kind = PrioritizerKind::sb_loss;
  cfg.beta = -1.0;
  CHECK_THROWS_AS(make_prioritizer(cfg, 8), ConfigError);
  cfg.beta = 1.0;
  cfg.histogram_capacity = 4;
  CHECK_THROWS_AS(make_prioritizer(cfg, 8), ConfigError);
  cfg.kind = PrioritizerKind::vr;
  cfg.pool_capacity = 4;
  CHECK_THROWS_AS(make_prioritizer(cfg, 8), ConfigError);
  CHECK_THROWS_AS(parse_prioritizer_kind("bogus"), ConfigError);
  for (auto kind : {PrioritizerKind::uniform, PrioritizerKind::sb_loss, PrioritizerKind::sb_entropy,
                    PrioritizerKind::vr}) {
    CHECK(parse_prioritizer_kind(to_string(kind)) == kind);
  }
  PrioritizerConfig uniform;
  CHECK_FALSE(make_prioritizer(uniform, 8)->needs_scores());
}

TEST_CASE("entropy scoring rejects invalid distributions") {
  PrioritizerConfig cfg;
  cfg.kind = PrioritizerKind::sb_entropy;
  auto sbe = make_prioritizer(cfg, 2);
  const std::vector<double> bad{0.9, 0.9};
  const std::vector<Candidate> cs{{0, 1.0, bad}};
  CHECK_THROWS_AS(sbe->feed(cs), NumericalError);
}

TEST_CASE("snapshots record internal state") {
  PrioritizerConfig cfg;
  cfg.kind = PrioritizerKind::sb_loss;
  cfg.beta = 0.0;
  auto sb = make_prioritizer(cfg, 4);
  CHECK(sb->feed(candidates_for({0.5, 0.25, 1.5}, 10)).empty());
  CHECK(sb->snapshot() == "kind sb_loss\nwindow 3 0.5 0.25 1.5\nbuffer 3 10 11 12\n");

  PrioritizerConfig vr_cfg;
  vr_cfg.kind = PrioritizerKind::vr;
  vr_cfg.pool_capacity = 4;
  auto vr = make_prioritizer(vr_cfg, 2);
  CHECK(vr->snapshot() == "kind vr\npool 0\ngate none\n");
  vr->feed(candidates_for({1.0, 2.0}));
  CHECK(vr->snapshot() == "kind vr\npool 2 0:1 1:2\ngate none\n");
  vr->feed(candidates_for({1.0, 1.0}, 2));
  CHECK(vr->snapshot() == "kind vr\npool 0\ngate on\n");

  auto uniform = make_prioritizer(PrioritizerConfig{}, 3);
  uniform->feed(candidates_for({0.0, 0.0, 0.0, 0.0}));
  CHECK(uniform->snapshot() == "kind uniform\nbuffer 1 3\n");
}
