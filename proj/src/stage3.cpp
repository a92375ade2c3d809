#include "dlr/stage3.hpp"

#include <cmath>
#include <numeric>

#include "dlr/errors.hpp"

namespace dlr {

void RlConfig::validate() const {
  if (group < 2) throw ConfigError("stage3.group must be at least 2");
  if (!(lr > 0.0) || !(latent_lr_ratio > 0.0)) throw ConfigError("stage3 learning rates must be positive");
  if (warmup < 0.0 || warmup >= 1.0) throw ConfigError("stage3.warmup must be in [0, 1)");
  if (batch < 1) throw ConfigError("stage3.batch must be at least 1");
  if (inner_epochs < 1) throw ConfigError("stage3.inner_epochs must be at least 1");
  if (max_tasks < 0 || eval_every < 0 || eval_count < 0) throw ConfigError("stage3 counts must be >= 0");
  if (caps.max_steps < 1 || caps.max_new_tokens < 1) throw ConfigError("generation caps must be positive");
}

bool RolloutGroup::all_equal() const {
  for (const auto& it : items)
    if (it.reward.total != items.front().reward.total) return false;
  return true;
}

RolloutGroup rollout_group(const DlrModel& model, const TaskInstance& task, int group_size,
                           const sglp::SglpConfig& sglp, const RewardConfig& reward, const GenerateCaps& caps,
                           std::mt19937_64& rng) {
  ad::NoGradGuard no_grad;
  const auto& vocab = model.vocab();
  RolloutGroup g;
  g.task = &task;
  g.snapshot = model.store().checksum();
  const auto V = model.vlm().encode_image(task.image);
  g.features = V.to_vector();
  GenerateOptions opt;
  opt.mode = LatentMode::sample;
  opt.sigma = sglp.sigma;
  opt.greedy = false;
  opt.caps = caps;
  const auto prompt = prompt_tokens(task.question, vocab);
  std::vector<double> totals;
  for (int i = 0; i < group_size; ++i) {
    RolloutTrajectory t;
    t.generation = generate(model.vlm(), model.grounder(), vocab, V, prompt, opt, rng);
    t.reward.outcome = outcome_reward(t.generation, task, vocab, caps.max_steps);
    t.reward.focus = focus_reward(step_attention(t.generation), task, reward.lambda);
    t.reward.total = total_reward(t.reward.outcome, t.reward.focus, reward.beta);
    totals.push_back(t.reward.total);
    g.items.push_back(std::move(t));
  }
  const auto adv = sglp::group_advantages(totals);
  for (int i = 0; i < group_size; ++i) g.items[i].advantage = adv[i];
  return g;
}

namespace {

void check_snapshot(const RolloutGroup& group) {
  if (group.task == nullptr || group.features.empty()) throw SnapshotMissing("rollout group has no snapshot");
  for (const auto& it : group.items) {
    if (it.generation.old_logprobs.size() != it.generation.sampled_positions.size()) {
      throw SnapshotMissing("rollout is missing stored token log-probabilities");
    }
  }
}

void fill_stats(ObjectiveStats* stats, std::span<const double> log_ratio, std::span<const double> adv,
                double clip_eps, double value) {
  if (stats == nullptr) return;
  stats->value = value;
  stats->entries = static_cast<int>(log_ratio.size());
  double rsum = 0.0;
  int clipped = 0;
  for (std::size_t i = 0; i < log_ratio.size(); ++i) {
    const double rho = std::exp(log_ratio[i]);
    rsum += rho;
    if ((adv[i] > 0.0 && rho > 1.0 + clip_eps) || (adv[i] < 0.0 && rho < 1.0 - clip_eps)) ++clipped;
  }
  stats->mean_ratio = log_ratio.empty() ? 1.0 : rsum / static_cast<double>(log_ratio.size());
  stats->clip_frac = log_ratio.empty() ? 0.0 : static_cast<double>(clipped) / static_cast<double>(log_ratio.size());
}

}  // namespace

ad::Tensor text_policy_objective(const DlrModel& model, const RolloutGroup& group, double clip_eps,
                                 double normalizer, ObjectiveStats* stats) {
  check_snapshot(group);
  const int d = model.settings().d;
  const auto V = model.vlm().encode_image(group.task->image);
  ad::Tensor total = ad::Tensor::scalar(0.0);
  std::vector<double> all_ratio;
  std::vector<double> all_adv;
  for (const auto& it : group.items) {
    const auto& g = it.generation;
    if (g.sampled_positions.empty()) continue;
    auto logits = model.vlm().forward(g.tokens, injections_of(g, d), V, true).logits;
    std::vector<int> rows;
    std::vector<int> toks;
    for (int p : g.sampled_positions) {
      rows.push_back(p - 1);
      toks.push_back(g.tokens[p]);
    }
    auto logp = ad::log_softmax_pick(logits, rows, toks);
    const int n = static_cast<int>(rows.size());
    auto log_ratio = ad::sub(logp, ad::Tensor::from(g.old_logprobs, {n}));
    std::vector<double> adv(static_cast<std::size_t>(n), it.advantage);
    total = ad::add(total, ad::clipped_surrogate_sum(log_ratio, adv, clip_eps));
    const auto lr = log_ratio.data();
    all_ratio.insert(all_ratio.end(), lr.begin(), lr.end());
    all_adv.insert(all_adv.end(), adv.begin(), adv.end());
  }
  auto obj = ad::scale(total, 1.0 / (normalizer * static_cast<double>(group.items.size())));
  fill_stats(stats, all_ratio, all_adv, clip_eps, obj.item());
  return obj;
}

ad::Tensor replay_means(const DlrModel& model, const RolloutGroup& group, std::size_t traj, std::size_t step) {
  const int d = model.settings().d;
  const int m = static_cast<int>(group.features.size()) / d;
  const auto& s = group.items.at(traj).generation.steps.at(step);
  auto V = ad::Tensor::from(group.features, {m, d});
  return model.grounder().ground(V, ad::Tensor::from(s.state, {d})).mu;
}

ad::Tensor latent_policy_objective(const DlrModel& model, const RolloutGroup& group, const sglp::SglpConfig& sglp,
                                   ObjectiveStats* stats) {
  check_snapshot(group);
  const int slots = model.grounder().slots();
  std::vector<ad::Tensor> means;
  std::vector<double> z;
  std::vector<double> mu_old;
  std::vector<double> adv;
  for (std::size_t i = 0; i < group.items.size(); ++i) {
    const auto& g = group.items[i].generation;
    for (std::size_t k = 0; k < g.steps.size(); ++k) {
      means.push_back(replay_means(model, group, i, k));
      z.insert(z.end(), g.steps[k].z.begin(), g.steps[k].z.end());
      mu_old.insert(mu_old.end(), g.steps[k].mu.begin(), g.steps[k].mu.end());
      adv.insert(adv.end(), static_cast<std::size_t>(slots), group.items[i].advantage);
    }
  }
  if (means.empty()) {
    if (stats) *stats = ObjectiveStats{0.0, 1.0, 0.0, 0};
    return ad::Tensor::scalar(0.0);
  }
  auto mu_new = means.size() == 1 ? means.front() : ad::concat_rows(means);
  auto obj = sglp::latent_objective(mu_new, z, mu_old, adv, sglp);
  if (stats) {
    const int d = mu_new.cols();
    std::vector<double> log_ratio;
    for (int r = 0; r < mu_new.rows(); ++r) {
      const auto off = static_cast<std::size_t>(r) * d;
      log_ratio.push_back(sglp::log_importance_ratio(std::span<const double>(z).subspan(off, d),
                                                     mu_new.data().subspan(off, d),
                                                     std::span<const double>(mu_old).subspan(off, d), sglp.sigma));
    }
    fill_stats(stats, log_ratio, adv, sglp.clip_eps, obj.item());
  }
  return obj;
}

std::vector<ParamGroup> rl_param_groups(const DlrModel& model, const RlConfig& config, bool freeze_latent) {
  std::vector<ParamGroup> groups{ParamGroup{model.vlm_params(), config.lr}};
  if (!freeze_latent) groups.push_back(ParamGroup{model.grounder_params(), config.lr * config.latent_lr_ratio});
  return groups;
}

JointStepStats joint_step(DlrModel& model, AdamW& optimizer, const RolloutGroup& group, const RlConfig& config,
                          const sglp::SglpConfig& sglp, bool latent_enabled, double lr_scale) {
  return joint_step(model, optimizer, std::span<const RolloutGroup>(&group, 1), config, sglp, latent_enabled,
                    lr_scale);
}

JointStepStats joint_step(DlrModel& model, AdamW& optimizer, std::span<const RolloutGroup> groups,
                          const RlConfig& config, const sglp::SglpConfig& sglp, bool latent_enabled,
                          double lr_scale) {
  if (groups.empty()) throw EmptyInput("joint step needs at least one group");
  JointStepStats st;
  model.store().zero_grad();
  const double w = 1.0 / static_cast<double>(groups.size());
  ad::Tensor total;
  for (const auto& group : groups) {
    ObjectiveStats text;
    ObjectiveStats latent;
    auto objective = text_policy_objective(model, group, sglp.clip_eps, config.caps.max_new_tokens, &text);
    if (latent_enabled) objective = ad::add(objective, latent_policy_objective(model, group, sglp, &latent));
    total = total.defined() ? ad::add(total, objective) : objective;
    for (auto [acc, cur] : {std::pair{&st.text, &text}, std::pair{&st.latent, &latent}}) {
      acc->value += w * cur->value;
      acc->mean_ratio += cur->mean_ratio * cur->entries;
      acc->clip_frac += cur->clip_frac * cur->entries;
      acc->entries += cur->entries;
    }
  }
  for (auto* acc : {&st.text, &st.latent}) {
    if (acc->entries > 0) {
      acc->mean_ratio /= acc->entries;
      acc->clip_frac /= acc->entries;
    }
  }
  ad::backward(ad::scale(total, -w));
  st.grad_norm = optimizer.step(lr_scale);
  model.store().zero_grad();
  return st;
}

Stage3Result train_stage3(DlrModel& model, const std::vector<TaskInstance>& tasks,
                          const std::vector<TaskInstance>& eval_tasks, const RlConfig& config,
                          const sglp::SglpConfig& sglp, RewardConfig reward, const Stage3Ablations& ablations,
                          std::uint64_t seed, const MetricsFn& metrics) {
  config.validate();
  sglp.validate();
  if (ablations.no_focus_reward) reward.beta = 0.0;
  reward.validate();
  if (tasks.empty()) throw EmptyInput("stage3 needs training tasks");
  const bool latent_enabled = !ablations.freeze_latent_policy;
  AdamW opt(rl_param_groups(model, config, ablations.freeze_latent_policy));

  std::vector<TaskInstance> evals(eval_tasks.begin(),
                                  eval_tasks.begin() + std::min<std::size_t>(eval_tasks.size(), config.eval_count));
  const int n = static_cast<int>(tasks.size());
  const long total = config.max_tasks > 0 ? std::min(config.max_tasks, n) : n;
  std::mt19937_64 rng(seed);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  shuffle_indices(order, rng);

  Stage3Result res;
  // Rollouts of one batch all come from the same parameters; tied groups
  // carry no gradient and are left out of the update.
  std::vector<RolloutGroup> pending;
  for (long it = 0; it < total; ++it) {
    const auto& task = tasks[order[it]];
    auto group = rollout_group(model, task, config.group, sglp, reward, config.caps, rng);
    double mean_reward = 0.0;
    double correct = 0.0;
    double focus = 0.0;
    for (const auto& t : group.items) {
      mean_reward += t.reward.total;
      correct += t.reward.outcome;
      focus += t.reward.focus;
    }
    const double g = static_cast<double>(group.items.size());
    Json rec{{"iter", it + 1},
             {"mean_reward", mean_reward / g},
             {"frac_correct", correct / g},
             {"mean_focus", focus / g}};
    const bool skip = group.all_equal();
    if (!skip) pending.push_back(std::move(group));
    JointStepStats st;
    const bool boundary = (it + 1) % config.batch == 0 || it + 1 == total;
    if (boundary && !pending.empty()) {
      const double scale = cosine_schedule(it, total, config.warmup);
      for (int e = 0; e < config.inner_epochs; ++e) st = joint_step(model, opt, pending, config, sglp, latent_enabled, scale);
      ++res.updates;
    }
    if (boundary) pending.clear();
    rec["skipped"] = skip;
    rec["J_text"] = st.text.value;
    rec["J_latent"] = st.latent.value;
    rec["clip_frac"] = st.text.entries + st.latent.entries == 0
                           ? 0.0
                           : (st.text.clip_frac * st.text.entries + st.latent.clip_frac * st.latent.entries) /
                                 (st.text.entries + st.latent.entries);
    ++res.iterations;
    const bool last = it + 1 == total;
    if (!evals.empty() && (last || (config.eval_every > 0 && (it + 1) % config.eval_every == 0))) {
      res.eval = evaluate(model, evals, config.caps);
      rec["eval_acc"] = res.eval.accuracy;
      rec["eval_kl"] = res.eval.mean_kl;
    }
    if (metrics) metrics(rec);
  }
  return res;
}

}  // namespace dlr
