#include <doctest.h>

#include <cmath>
#include <numeric>

#include "dlr/errors.hpp"
#include "dlr/sglp.hpp"
#include "helpers.hpp"

using namespace dlr;
using doctest::Approx;

namespace {

double dotp(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

}  // namespace

TEST_SUITE("sglp") {

TEST_CASE("projection examples") {
  const std::vector<double> mu{1.0, 0.0};
  const auto z = sglp::project_noise(mu, std::vector<double>{0.0, 1.0});
  CHECK(z[0] == Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(z[1] == Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(sglp::project_noise(mu, std::vector<double>{0.0, 0.0}) == mu);
  CHECK_THROWS_AS(sglp::project_noise(mu, std::vector<double>{-1.0, 0.0}), DegenerateNorm);
}

TEST_CASE("samples stay on the sphere and are reproducible") {
  std::mt19937_64 rng(1);
  for (double sigma : {0.05, 0.1, 0.5}) {
    for (int i = 0; i < 1000; ++i) {
      const auto mu = testutil::unit(64, rng);
      CHECK(std::abs(testutil::norm(sglp::sample(mu, sigma, rng)) - 1.0) < 1e-6);
    }
  }
  const auto mu = testutil::unit(8, rng);
  std::mt19937_64 a(9);
  std::mt19937_64 b(9);
  CHECK(sglp::sample(mu, 0.1, a) == sglp::sample(mu, 0.1, b));
}

TEST_CASE("density examples and the sphere identity") {
  const std::vector<double> e0{1.0, 0.0};
  const std::vector<double> e1{0.0, 1.0};
  CHECK(sglp::log_density_unnorm(e0, e0, 0.3) == 0.0);
  CHECK(sglp::log_density_unnorm(e1, e0, 1.0) == Approx(-1.0).epsilon(1e-12));
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    const auto z = testutil::unit(16, rng);
    const auto mu = testutil::unit(16, rng);
    const double sigma = 0.05 + 0.5 * (i % 10) / 10.0;
    const double dot_form = (dotp(z, mu) - 1.0) / (sigma * sigma);
    CHECK(std::abs(sglp::log_density_unnorm(z, mu, sigma) - dot_form) < 1e-9 * std::max(1.0, std::abs(dot_form)));
  }
}

TEST_CASE("importance ratio examples and identities") {
  const std::vector<double> e0{1.0, 0.0};
  const std::vector<double> e1{0.0, 1.0};
  CHECK(sglp::importance_ratio(e0, e0, e1, 1.0) == Approx(std::exp(1.0)).epsilon(1e-12));
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const auto z = testutil::unit(8, rng);
    const auto a = testutil::unit(8, rng);
    const auto b = testutil::unit(8, rng);
    CHECK(sglp::importance_ratio(z, a, a, 0.1) == 1.0);
    const double expect = std::exp(sglp::log_density_unnorm(z, a, 1.0) - sglp::log_density_unnorm(z, b, 1.0));
    CHECK(std::abs(sglp::importance_ratio(z, a, b, 1.0) - expect) < 1e-9 * std::max(1.0, expect));
  }
  // Tiny σ would overflow without the exponent clamp.
  CHECK(sglp::log_importance_ratio(e0, e0, e1, 1e-3) == sglp::kMaxLogRatio);
  CHECK(std::isfinite(sglp::importance_ratio(e0, e0, e1, 1e-3)));
  CHECK(sglp::log_importance_ratio(e0, e1, e0, 1e-3) == -sglp::kMaxLogRatio);
}

TEST_CASE("group advantages") {
  const auto a = sglp::group_advantages(std::vector<double>{1, 0, 0, 1});
  CHECK(a == std::vector<double>{0.5, -0.5, -0.5, 0.5});
  const auto z = sglp::group_advantages(std::vector<double>{0.7, 0.7, 0.7});
  for (double x : z) CHECK(x == 0.0);
  CHECK_THROWS_AS(sglp::group_advantages(std::vector<double>{1.0}), GroupTooSmall);
  // Centering only: a spread-out group is not rescaled.
  const auto w = sglp::group_advantages(std::vector<double>{10, 0});
  CHECK(w[0] == 5.0);
}

TEST_CASE("clipped term examples") {
  CHECK(sglp::clipped_term(1.5, 1.0, 0.2) == Approx(1.2));
  CHECK(sglp::clipped_term(0.5, -1.0, 0.2) == Approx(-0.8));
  CHECK(sglp::clipped_term(1.0, -0.37, 0.2) == -0.37);
  CHECK(sglp::clipped_term(0.5, 1.0, 0.2) == Approx(0.5));
  CHECK(sglp::clipped_latent_objective(std::vector<double>{1.5, 0.5}, std::vector<double>{1.0, -1.0}, 0.2) ==
        Approx(0.2));
  CHECK_THROWS_AS(sglp::clipped_latent_objective(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}, 0.2),
                  ShapeMismatch);
}

TEST_CASE("config validation") {
  sglp::SglpConfig c;
  CHECK_NOTHROW(c.validate());
  c.sigma = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.sigma = 0.1;
  c.clip_eps = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("surrogate is inert at the snapshot") {
  std::mt19937_64 rng(4);
  const int n = 5;
  const int d = 6;
  std::vector<double> mu;
  std::vector<double> z;
  for (int i = 0; i < n; ++i) {
    const auto m = testutil::unit(d, rng);
    mu.insert(mu.end(), m.begin(), m.end());
    const auto s = sglp::sample(m, 0.1, rng);
    z.insert(z.end(), s.begin(), s.end());
  }
  const std::vector<double> adv{0.3, -0.1, 0.25, -0.45, 0.0};
  const auto mu_new = ad::Tensor::from(mu, {n, d}, true);
  const double value = sglp::latent_objective(mu_new, z, mu, adv, {}).item();
  CHECK(value == Approx(std::accumulate(adv.begin(), adv.end(), 0.0) / n).epsilon(1e-15));
}

TEST_CASE("ascent moves the mean toward advantaged samples") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> adv(-1.0, 1.0);
  int agree = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 16;
    auto raw = ad::Tensor::from(testutil::randn(d, rng), {1, d}, true);
    const auto mu0 = ad::l2_normalize(raw.data());
    const auto z = sglp::sample(mu0, 0.3, rng);
    double a = adv(rng);
    if (a == 0.0) a = 0.5;
    const std::vector<double> av{a};
    ad::backward(sglp::latent_objective(ad::l2_normalize_rows(raw), z, mu0, av, {}));
    const auto g = raw.grad();
    auto stepped = raw.to_vector();
    for (int i = 0; i < d; ++i) stepped[i] += 1e-4 * g[i];
    const double change = dotp(z, ad::l2_normalize(stepped)) - dotp(z, mu0);
    agree += (change > 0.0) == (a > 0.0) && change != 0.0 ? 1 : 0;
    CHECK((dotp(g, z) > 0.0) == (a > 0.0));
  }
  CHECK(agree == 100);
}

TEST_CASE("surrogate gradient matches finite differences") {
  std::mt19937_64 rng(6);
  const int n = 3;
  const int d = 5;
  auto raw = testutil::param({n, d}, rng);
  std::vector<double> mu_old;
  std::vector<double> z;
  for (int i = 0; i < n; ++i) {
    const auto m = testutil::unit(d, rng);
    mu_old.insert(mu_old.end(), m.begin(), m.end());
    const auto s = sglp::sample(m, 0.5, rng);
    z.insert(z.end(), s.begin(), s.end());
  }
  const std::vector<double> adv{0.5, -0.25, -0.25};
  sglp::SglpConfig cfg;
  cfg.sigma = 2.0;
  cfg.clip_eps = 0.9;
  const std::vector<ad::Tensor> ps{raw};
  const double err = ad::grad_check(
      [&] { return sglp::latent_objective(ad::l2_normalize_rows(raw), z, mu_old, adv, cfg); }, ps, {1e-6, 15, 3});
  CHECK(err < 1e-6);
}

}
