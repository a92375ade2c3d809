#pragma once
// Outcome and attention-focus rewards.

#include <span>
#include <vector>

#include "dlr/generate.hpp"
#include "dlr/synthtask.hpp"

namespace dlr {

struct RewardConfig {
  double beta = 0.1;
  double lambda = 1.0;
  void validate() const;
};

inline constexpr double kAttentionFloor = 1e-8;

struct RewardBreakdown {
  double outcome = 0.0;
  double focus = 0.0;
  double total = 0.0;
};

// Floors every entry at kAttentionFloor, then renormalizes.
std::vector<double> smooth_distribution(std::span<const double> q);
// KL(p ‖ smooth(q)).
double kl_divergence(std::span<const double> p, std::span<const double> q);
// Mean per-step KL over aligned steps; nullopt when nothing aligns.
std::optional<double> trajectory_kl(const std::vector<std::vector<double>>& oracle,
                                    const std::vector<std::vector<double>>& latent);

double outcome_reward(const Generation& g, const TaskInstance& task, const Vocab& vocab, int max_steps);
// exp(-λ · mean_k KL_k); 0 when no step aligns.
double focus_reward(const std::vector<std::vector<double>>& latent, const TaskInstance& task, double lambda);
double total_reward(double outcome, double focus, double beta);

std::vector<std::vector<double>> step_attention(const Generation& g);

}  // namespace dlr
