#include "dlr/sglp.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dlr/errors.hpp"

namespace dlr::sglp {

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeMismatch("vector widths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

void SglpConfig::validate() const {
  if (!(sigma > 0.0)) throw ConfigError("sglp.sigma must be positive");
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("sglp.clip_eps must be in (0, 1)");
}

std::vector<double> project_noise(std::span<const double> mu, std::span<const double> noise) {
  if (mu.size() != noise.size()) throw ShapeMismatch("noise width differs from mean width");
  std::vector<double> v(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) v[i] = mu[i] + noise[i];
  return ad::l2_normalize(v, 0.0);
}

std::vector<double> sample(std::span<const double> mu, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, sigma);
  std::vector<double> noise(mu.size());
  for (int attempt = 0;; ++attempt) {
    for (double& e : noise) e = normal(rng);
    try {
      return project_noise(mu, noise);
    } catch (const DegenerateNorm&) {
      if (attempt >= 1) throw;
    }
  }
}

double log_density_unnorm(std::span<const double> z, std::span<const double> mu, double sigma) {
  return -sq_dist(z, mu) / (2.0 * sigma * sigma);
}

double log_importance_ratio(std::span<const double> z, std::span<const double> mu_new,
                            std::span<const double> mu_old, double sigma) {
  const double e = (sq_dist(z, mu_old) - sq_dist(z, mu_new)) / (2.0 * sigma * sigma);
  return std::clamp(e, -kMaxLogRatio, kMaxLogRatio);
}

double importance_ratio(std::span<const double> z, std::span<const double> mu_new,
                        std::span<const double> mu_old, double sigma) {
  return std::exp(log_importance_ratio(z, mu_new, mu_old, sigma));
}

std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw GroupTooSmall("group needs at least two rewards, got " + std::to_string(rewards.size()));
  // Rounding in the mean must not leak a signal out of a tied group.
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) {
    return std::vector<double>(rewards.size(), 0.0);
  }
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  std::vector<double> out(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = rewards[i] - mean;
  return out;
}

double clipped_term(double ratio, double advantage, double clip_eps) {
  const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
  return std::min(ratio * advantage, clipped * advantage);
}

double clipped_latent_objective(std::span<const double> ratios, std::span<const double> advantages,
                                double clip_eps) {
  if (ratios.size() != advantages.size()) throw ShapeMismatch("ratios and advantages differ in length");
  if (ratios.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < ratios.size(); ++i) s += clipped_term(ratios[i], advantages[i], clip_eps);
  return s / static_cast<double>(ratios.size());
}

ad::Tensor latent_objective(const ad::Tensor& mu_new, std::span<const double> z,
                            std::span<const double> mu_old, std::span<const double> advantages,
                            const SglpConfig& config) {
  const int n = mu_new.rows();
  const int d = mu_new.cols();
  const auto count = static_cast<std::size_t>(n) * d;
  if (z.size() != count || mu_old.size() != count || advantages.size() != static_cast<std::size_t>(n)) {
    throw ShapeMismatch("latent objective inputs disagree in shape");
  }
  const double inv = 1.0 / (2.0 * config.sigma * config.sigma);
  std::vector<double> old_term(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    old_term[i] = sq_dist(z.subspan(static_cast<std::size_t>(i) * d, d),
                          mu_old.subspan(static_cast<std::size_t>(i) * d, d)) * inv;
  }
  auto zt = ad::Tensor::from(std::vector<double>(z.begin(), z.end()), {n, d});
  auto new_term = ad::scale(ad::row_sq_norm(ad::sub(zt, mu_new)), -inv);
  auto log_ratio = ad::add(ad::Tensor::from(std::move(old_term), {n}), new_term);
  log_ratio = ad::clamp(log_ratio, -kMaxLogRatio, kMaxLogRatio);
  return ad::scale(ad::clipped_surrogate_sum(log_ratio, advantages, config.clip_eps), 1.0 / n);
}

}  // namespace dlr::sglp
