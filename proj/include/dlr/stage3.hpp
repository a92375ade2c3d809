#pragma once
// Reinforcement finetuning with group rollouts: a clipped token-level text
// objective plus the clipped spherical-Gaussian latent objective.

#include <optional>
#include <span>
#include <vector>

#include "dlr/evaluate.hpp"
#include "dlr/metrics.hpp"
#include "dlr/model.hpp"
#include "dlr/reward.hpp"
#include "dlr/sglp.hpp"

namespace dlr {

struct RlConfig {
  int group = 4;
  int batch = 8;                  // tasks per optimizer step
  double lr = 1e-4;               // decoder and vision encoder
  double latent_lr_ratio = 10.0;  // grounder lr = lr * ratio
  double warmup = 0.1;
  int inner_epochs = 1;
  int max_tasks = 0;  // 0 = every training task once
  int eval_every = 0;
  int eval_count = 500;
  GenerateCaps caps;
  void validate() const;
};

struct Stage3Ablations {
  bool no_focus_reward = false;
  bool freeze_latent_policy = false;
};

struct RolloutTrajectory {
  Generation generation;
  RewardBreakdown reward;
  double advantage = 0.0;
};

struct RolloutGroup {
  const TaskInstance* task = nullptr;
  std::vector<double> features;  // m×d image features under the snapshot
  std::vector<RolloutTrajectory> items;
  std::uint64_t snapshot = 0;  // parameter checksum at rollout time
  bool all_equal() const;
};

RolloutGroup rollout_group(const DlrModel& model, const TaskInstance& task, int group_size,
                           const sglp::SglpConfig& sglp, const RewardConfig& reward, const GenerateCaps& caps,
                           std::mt19937_64& rng);

struct ObjectiveStats {
  double value = 0.0;
  double mean_ratio = 0.0;
  double clip_frac = 0.0;
  int entries = 0;
};

// Sum over sampled text tokens of the clipped surrogate, divided by the
// fixed `normalizer`, averaged over the group.
ad::Tensor text_policy_objective(const DlrModel& model, const RolloutGroup& group, double clip_eps,
                                 double normalizer, ObjectiveStats* stats = nullptr);
// Mean over every stored (trajectory, step, slot) of the clipped latent
// surrogate with means replayed under the current grounder.
ad::Tensor latent_policy_objective(const DlrModel& model, const RolloutGroup& group, const sglp::SglpConfig& sglp,
                                   ObjectiveStats* stats = nullptr);
// Grounder means for one stored step, replayed under current parameters.
ad::Tensor replay_means(const DlrModel& model, const RolloutGroup& group, std::size_t traj, std::size_t step);

struct JointStepStats {
  ObjectiveStats text;
  ObjectiveStats latent;
  double grad_norm = 0.0;
};

// The optimizer is expected to hold the text parameters and, unless the
// latent policy is frozen, the grounder parameters.
JointStepStats joint_step(DlrModel& model, AdamW& optimizer, const RolloutGroup& group, const RlConfig& config,
                          const sglp::SglpConfig& sglp, bool latent_enabled, double lr_scale = 1.0);
// One optimizer step on the mean of the per-group objectives.
JointStepStats joint_step(DlrModel& model, AdamW& optimizer, std::span<const RolloutGroup> groups,
                          const RlConfig& config, const sglp::SglpConfig& sglp, bool latent_enabled,
                          double lr_scale = 1.0);

// Text-policy parameters (everything except the grounder) and the grounder
// group, lr-scaled per the config.
std::vector<ParamGroup> rl_param_groups(const DlrModel& model, const RlConfig& config, bool freeze_latent);

struct Stage3Result {
  long iterations = 0;
  long updates = 0;
  EvalReport eval;
};

Stage3Result train_stage3(DlrModel& model, const std::vector<TaskInstance>& tasks,
                          const std::vector<TaskInstance>& eval_tasks, const RlConfig& config,
                          const sglp::SglpConfig& sglp, RewardConfig reward, const Stage3Ablations& ablations,
                          std::uint64_t seed, const MetricsFn& metrics);

}  // namespace dlr
