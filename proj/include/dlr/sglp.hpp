#pragma once
// Spherical Gaussian latent policy: perturb a unit mean with isotropic
// noise and project back to the sphere; densities, ratios and the clipped
// surrogate used for the latent update.

#include <random>
#include <span>
#include <vector>

#include "dlr/diff.hpp"

namespace dlr::sglp {

struct SglpConfig {
  double sigma = 0.1;
  double clip_eps = 0.2;
  void validate() const;
};

constexpr double kMaxLogRatio = 50.0;

// z = (mu + noise) / ‖mu + noise‖. Throws DegenerateNorm on exact cancellation.
std::vector<double> project_noise(std::span<const double> mu, std::span<const double> noise);
// Draws noise ~ N(0, σ²I); resamples once on exact cancellation.
std::vector<double> sample(std::span<const double> mu, double sigma, std::mt19937_64& rng);

double log_density_unnorm(std::span<const double> z, std::span<const double> mu, double sigma);
double log_importance_ratio(std::span<const double> z, std::span<const double> mu_new,
                            std::span<const double> mu_old, double sigma);
double importance_ratio(std::span<const double> z, std::span<const double> mu_new,
                        std::span<const double> mu_old, double sigma);

// A_i = r_i - mean(r). Throws GroupTooSmall for fewer than two rewards.
std::vector<double> group_advantages(std::span<const double> rewards);

double clipped_term(double ratio, double advantage, double clip_eps);
// Mean over entries of min(ρA, clip(ρ)A).
double clipped_latent_objective(std::span<const double> ratios, std::span<const double> advantages,
                                double clip_eps);

// Differentiable latent surrogate: rows of mu_new (n×d) against constant
// samples z and snapshot means mu_old, one advantage per row. Mean over rows.
ad::Tensor latent_objective(const ad::Tensor& mu_new, std::span<const double> z,
                            std::span<const double> mu_old, std::span<const double> advantages,
                            const SglpConfig& config);

}  // namespace dlr::sglp
