#include "dlr/reward.hpp"

#include <cmath>

#include "dlr/errors.hpp"

namespace dlr {

void RewardConfig::validate() const {
  if (!(beta >= 0.0)) throw ConfigError("reward.beta must be non-negative");
  if (!(lambda > 0.0)) throw ConfigError("reward.lambda must be positive");
}

std::vector<double> smooth_distribution(std::span<const double> q) {
  std::vector<double> out(q.begin(), q.end());
  double total = 0.0;
  for (double& v : out) {
    v = std::max(v, kAttentionFloor);
    total += v;
  }
  for (double& v : out) v /= total;
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw SizeMismatch("distributions differ in length");
  const auto qs = smooth_distribution(q);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / qs[i]);
  }
  return kl;
}

std::optional<double> trajectory_kl(const std::vector<std::vector<double>>& oracle,
                                    const std::vector<std::vector<double>>& latent) {
  const std::size_t k = std::min(oracle.size(), latent.size());
  if (k == 0) return std::nullopt;
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) total += kl_divergence(oracle[i], latent[i]);
  return total / static_cast<double>(k);
}

double outcome_reward(const Generation& g, const TaskInstance& task, const Vocab& vocab, int max_steps) {
  const auto traj = parse_generation(g, vocab, max_steps);
  if (!traj) return 0.0;
  return exact_match(traj->answer_text(), task.answer);
}

double focus_reward(const std::vector<std::vector<double>>& latent, const TaskInstance& task, double lambda) {
  const auto kl = trajectory_kl(task.oracle_masks, latent);
  if (!kl) return 0.0;
  return std::exp(-lambda * *kl);
}

double total_reward(double outcome, double focus, double beta) {
  return outcome + beta * (outcome > 0.0 ? 1.0 : 0.0) * focus;
}

std::vector<std::vector<double>> step_attention(const Generation& g) {
  std::vector<std::vector<double>> out;
  for (const auto& s : g.steps) out.push_back(s.attn);
  return out;
}

}  // namespace dlr
