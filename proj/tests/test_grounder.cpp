#include <doctest.h>

#include <cmath>
#include <numeric>

#include "dlr/errors.hpp"
#include "dlr/grounder.hpp"
#include "helpers.hpp"

using namespace dlr;
using ad::Tensor;

namespace {

struct Fixture {
  ParamStore store;
  std::mt19937_64 rng{11};
  Grounder grounder;
  explicit Fixture(int d = 64, GrounderConfig cfg = {}) : grounder(d, cfg, store, rng) {}
};

}  // namespace

TEST_SUITE("grounder") {

TEST_CASE("default shapes") {
  Fixture f;
  std::mt19937_64 rng(1);
  const auto out = f.grounder.ground(testutil::param({64, 64}, rng), testutil::param({64}, rng));
  CHECK(out.mu.shape() == std::vector<int>{32, 64});
  CHECK(out.attn.size() == 64u);
}

TEST_CASE("unit rows and a valid attention map on random inputs") {
  GrounderConfig cfg;
  cfg.slots = 4;
  cfg.heads = 2;
  Fixture f(8, cfg);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> scale(-2.0, 2.0);
  ad::NoGradGuard guard;
  for (int i = 0; i < 10000; ++i) {
    const double s = std::pow(10.0, scale(rng));
    const auto out = f.grounder.ground(testutil::param({9, 8}, rng, s), testutil::param({8}, rng, s));
    for (int r = 0; r < 4; ++r) {
      double n = 0.0;
      for (int c = 0; c < 8; ++c) n += out.mu.at(r, c) * out.mu.at(r, c);
      CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
    }
    CHECK(std::accumulate(out.attn.begin(), out.attn.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
    for (double p : out.attn) CHECK(p >= 0.0);
  }
}

TEST_CASE("the condition changes the means") {
  Fixture f(16, GrounderConfig{8, 4, 4});
  std::mt19937_64 rng(3);
  const auto V = testutil::param({64, 16}, rng);
  const auto a = f.grounder.ground(V, testutil::param({16}, rng));
  const auto b = f.grounder.ground(V, testutil::param({16}, rng));
  double diff = 0.0;
  for (std::size_t i = 0; i < a.mu.size(); ++i) diff += std::abs(a.mu[i] - b.mu[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("attention precedes the feed-forward output") {
  Fixture f(16, GrounderConfig{8, 4, 4});
  std::mt19937_64 rng(4);
  const auto V = testutil::param({64, 16}, rng);
  const auto c = testutil::param({16}, rng);
  const auto before = f.grounder.ground(V, c);
  for (const char* name : {"grounder.ffn.w2", "grounder.ffn.b2"}) {
    auto t = f.store.find(name)->tensor;
    for (double& x : t.mutable_data()) x = 3.0 * x + 0.5;
  }
  const auto after = f.grounder.ground(V, c);
  CHECK(before.attn == after.attn);
  CHECK(before.mu.to_vector() != after.mu.to_vector());
}

TEST_CASE("attention map identity cases") {
  ad::AttentionProbe one;
  one.heads = 1;
  one.tq = 1;
  one.tk = 3;
  one.weights = {0.2, 0.5, 0.3};
  const auto m = attention_map(one);
  CHECK(m[0] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(m[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(m[2] == doctest::Approx(0.3).epsilon(1e-15));

  ad::AttentionProbe flat;
  flat.heads = 2;
  flat.tq = 3;
  flat.tk = 4;
  flat.weights.assign(24, 0.25);
  for (double p : attention_map(flat)) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

  ad::AttentionProbe mixed;
  mixed.heads = 2;
  mixed.tq = 1;
  mixed.tk = 2;
  mixed.weights = {1.0, 0.0, 0.0, 1.0};
  const auto half = attention_map(mixed);
  CHECK(half[0] == doctest::Approx(0.5));
  CHECK(half[1] == doctest::Approx(0.5));

  CHECK_THROWS_AS(attention_map(ad::AttentionProbe{}), NoForwardYet);
}

TEST_CASE("shape errors and configuration checks") {
  Fixture f(16, GrounderConfig{4, 4, 4});
  std::mt19937_64 rng(5);
  CHECK_THROWS_AS(f.grounder.ground(testutil::param({64, 8}, rng), testutil::param({16}, rng)), ShapeMismatch);
  CHECK_THROWS_AS(f.grounder.ground(testutil::param({64, 16}, rng), testutil::param({15}, rng)), ShapeMismatch);
  ParamStore store;
  CHECK_THROWS_AS(Grounder(16, GrounderConfig{0, 4, 4}, store, rng), ConfigError);
  CHECK_THROWS_AS(Grounder(16, GrounderConfig{4, 3, 4}, store, rng), ConfigError);
}

TEST_CASE("gradients reach every grounder parameter") {
  Fixture f(8, GrounderConfig{3, 2, 2});
  std::mt19937_64 rng(6);
  const auto V = testutil::param({5, 8}, rng);
  const auto c = testutil::param({8}, rng);
  const auto target = testutil::param({3, 8}, rng);
  auto loss = [&] { return ad::sum(ad::mul(f.grounder.ground(V, c).mu, target)); };
  const auto params = f.store.with_prefix("grounder.");
  CHECK(ad::grad_check(loss, params, {1e-5, 200, 2}) < 1e-5);
}

}
