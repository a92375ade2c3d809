#include "dlr/stage1.hpp"

#include <cmath>
#include <numeric>

#include "dlr/errors.hpp"
#include "dlr/generate.hpp"

namespace dlr {

void PretrainConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("stage1.tau must be positive");
  if (batch < 2) throw ConfigError("stage1.batch must be at least 2");
  if (epochs < 1) throw ConfigError("stage1.epochs must be at least 1");
  if (!(lr > 0.0)) throw ConfigError("stage1.lr must be positive");
  if (warmup < 0.0 || warmup >= 1.0) throw ConfigError("stage1.warmup must be in [0, 1)");
}

ad::Tensor pool_latents(const ad::Tensor& mu) {
  if (mu.rows() < 1) throw EmptyInput("no latent rows to pool");
  auto m = ad::mean_rows(mu);
  return ad::reshape(ad::l2_normalize_rows(ad::reshape(m, {1, mu.cols()}), 0.0), {mu.cols()});
}

ad::Tensor infonce(const ad::Tensor& z_hat, const ad::Tensor& h_hat, double tau) {
  if (z_hat.rows() != h_hat.rows() || z_hat.cols() != h_hat.cols()) {
    throw ShapeMismatch("infonce batches differ in shape");
  }
  const int n = z_hat.rows();
  std::vector<int> diag(static_cast<std::size_t>(n));
  std::iota(diag.begin(), diag.end(), 0);
  auto sim = ad::scale(ad::pairwise_dot(z_hat, h_hat), 1.0 / tau);
  auto v2t = ad::cross_entropy(sim, diag);
  auto t2v = ad::cross_entropy(ad::transpose(sim), diag);
  return ad::scale(ad::add(v2t, t2v), 0.5);
}

double retrieval_top1(const ad::Tensor& similarity, const std::vector<std::string>& answers) {
  const int n = similarity.rows();
  if (static_cast<int>(answers.size()) != n || similarity.cols() != n) {
    throw ShapeMismatch("similarity and answers disagree");
  }
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < n; ++j)
      if (similarity.at(i, j) > similarity.at(i, best)) best = j;
    if (answers[best] == answers[i]) ++hits;
  }
  return static_cast<double>(hits) / n;
}

std::vector<ContrastiveItem> prepare_contrastive(const DlrModel& model, const std::vector<TaskInstance>& tasks) {
  ad::NoGradGuard no_grad;
  const auto& vocab = model.vocab();
  std::vector<ContrastiveItem> items;
  items.reserve(tasks.size());
  for (const auto& t : tasks) {
    ContrastiveItem it;
    it.features = model.vlm().encode_image(t.image).detach();
    it.question = model.vlm().last_valid_hidden(prompt_tokens(t.question, vocab), vocab.pad()).detach();
    const auto h_a = model.vlm().last_valid_hidden(prompt_tokens(t.answer, vocab), vocab.pad());
    it.answer_unit = ad::l2_normalize(h_a.data());
    it.answer = normalize_answer(t.answer);
    items.push_back(std::move(it));
  }
  return items;
}

namespace {

struct BatchOut {
  ad::Tensor loss;
  ad::Tensor sim;
};

BatchOut run_batch(const DlrModel& model, const std::vector<ContrastiveItem>& items, std::span<const int> idx,
                   double tau) {
  const int d = model.settings().d;
  std::vector<ad::Tensor> pooled;
  std::vector<double> targets;
  for (int i : idx) {
    const auto& it = items[i];
    auto out = model.grounder().ground(it.features, it.question);
    pooled.push_back(ad::reshape(pool_latents(out.mu), {1, d}));
    targets.insert(targets.end(), it.answer_unit.begin(), it.answer_unit.end());
  }
  const int n = static_cast<int>(idx.size());
  auto z = ad::concat_rows(pooled);
  auto h = ad::Tensor::from(std::move(targets), {n, d});
  BatchOut b;
  b.loss = infonce(z, h, tau);
  b.sim = ad::pairwise_dot(z, h).detach();
  return b;
}

std::vector<std::string> answers_of(const std::vector<ContrastiveItem>& items, std::span<const int> idx) {
  std::vector<std::string> out;
  for (int i : idx) out.push_back(items[i].answer);
  return out;
}

}  // namespace

Stage1Result train_stage1(DlrModel& model, const std::vector<TaskInstance>& tasks, const PretrainConfig& config,
                          std::uint64_t seed, const MetricsFn& metrics) {
  config.validate();
  if (static_cast<int>(tasks.size()) < config.batch) throw ConfigError("stage1 needs at least one full batch");
  const auto items = prepare_contrastive(model, tasks);
  const int n = static_cast<int>(items.size());
  const int per_epoch = n / config.batch;
  const long total = static_cast<long>(per_epoch) * config.epochs;

  AdamW opt({ParamGroup{model.grounder_params(), config.lr}});
  std::mt19937_64 rng(seed);
  std::vector<int> order(static_cast<std::size_t>(n));
  Stage1Result res;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle_indices(order, rng);
    for (int b = 0; b < per_epoch; ++b) {
      std::span<const int> idx(order.data() + static_cast<std::size_t>(b) * config.batch, config.batch);
      opt.zero_grad();
      auto out = run_batch(model, items, idx, config.tau);
      ad::backward(out.loss);
      opt.step(cosine_schedule(res.steps, total, config.warmup));
      ++res.steps;
      if (metrics) {
        metrics(Json{{"step", res.steps},
                     {"loss", out.loss.item()},
                     {"top1", retrieval_top1(out.sim, answers_of(items, idx))}});
      }
    }
  }

  ad::NoGradGuard no_grad;
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  double loss = 0.0;
  double top1 = 0.0;
  for (int b = 0; b < per_epoch; ++b) {
    std::span<const int> idx(all.data() + static_cast<std::size_t>(b) * config.batch, config.batch);
    auto out = run_batch(model, items, idx, config.tau);
    loss += out.loss.item();
    top1 += retrieval_top1(out.sim, answers_of(items, idx));
  }
  res.final_loss = loss / per_epoch;
  res.final_top1 = top1 / per_epoch;
  return res;
}

}  // namespace dlr
