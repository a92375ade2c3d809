#include "dlr/stage2.hpp"

#include <numeric>

#include "dlr/errors.hpp"

namespace dlr {

void SftConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("stage2.lr must be positive");
  if (epochs < 1) throw ConfigError("stage2.epochs must be at least 1");
  if (batch < 1) throw ConfigError("stage2.batch must be at least 1");
  if (warmup < 0.0 || warmup >= 1.0) throw ConfigError("stage2.warmup must be in [0, 1)");
  if (dev_every < 0 || dev_count < 0) throw ConfigError("stage2.dev_every and stage2.dev_count must be >= 0");
  if (caps.max_steps < 1 || caps.max_new_tokens < 1) throw ConfigError("generation caps must be positive");
}

SftExample make_sft_example(const TaskInstance& task, const Vocab& vocab, int max_steps) {
  SftExample ex;
  ex.tokens = render(task.gold_trajectory, vocab);
  ex.layout = parse_with_layout(ex.tokens, vocab, max_steps).layout;
  ex.mask = supervision_mask(ex.tokens, vocab, max_steps);
  return ex;
}

TwoPassOutput two_pass_forward(const DlrModel& model, const SftExample& example, const ad::Tensor& image_features) {
  const int d = model.settings().d;
  const int slots = model.grounder().slots();
  const auto& vlm = model.vlm();
  TwoPassOutput out;
  std::vector<Injection> injections;
  std::span<const int> tokens(example.tokens);
  for (std::size_t t = 0; t < example.layout.premise_close.size(); ++t) {
    const int close = example.layout.premise_close[t];
    auto capture = vlm.forward(tokens.subspan(0, static_cast<std::size_t>(close) + 1), injections, image_features,
                               false);
    ++out.passes;
    auto state = ad::reshape(ad::rows(capture.hidden, close, 1), {d});
    auto g = model.grounder().ground(image_features, state);
    Injection inj;
    for (int s = 0; s < slots; ++s) inj.positions.push_back(example.layout.block_start[t] + s);
    inj.vectors = g.mu;
    injections.push_back(std::move(inj));
    out.grounded.push_back(std::move(g));
  }
  out.logits = vlm.forward(tokens, injections, image_features, true).logits;
  ++out.passes;
  return out;
}

namespace {

void shifted_targets(const SftExample& ex, std::vector<int>& targets, std::vector<std::uint8_t>& mask) {
  targets.assign(ex.tokens.begin() + 1, ex.tokens.end());
  mask.assign(ex.mask.begin() + 1, ex.mask.end());
}

}  // namespace

ad::Tensor sft_loss(const ad::Tensor& logits, const SftExample& example) {
  const int t_len = static_cast<int>(example.tokens.size());
  if (logits.rows() != t_len || example.mask.size() != example.tokens.size()) {
    throw ShapeMismatch("logits rows do not match the example length");
  }
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
  shifted_targets(example, targets, mask);
  return ad::masked_cross_entropy(ad::rows(logits, 0, t_len - 1), targets, mask);
}

std::pair<int, int> teacher_forced_hits(const ad::Tensor& logits, const SftExample& example) {
  const int vocab = logits.cols();
  int hits = 0;
  int count = 0;
  for (std::size_t t = 0; t + 1 < example.tokens.size(); ++t) {
    if (!example.mask[t + 1]) continue;
    auto row = logits.data().subspan(t * vocab, vocab);
    const int best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    hits += best == example.tokens[t + 1] ? 1 : 0;
    ++count;
  }
  return {hits, count};
}

double teacher_forced_accuracy(const DlrModel& model, const std::vector<TaskInstance>& tasks) {
  ad::NoGradGuard no_grad;
  long hits = 0;
  long count = 0;
  for (const auto& t : tasks) {
    const auto ex = make_sft_example(t, model.vocab());
    const auto out = two_pass_forward(model, ex, model.vlm().encode_image(t.image));
    const auto [h, c] = teacher_forced_hits(out.logits, ex);
    hits += h;
    count += c;
  }
  return count == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(count);
}

Stage2Result train_stage2(DlrModel& model, const std::vector<TaskInstance>& tasks,
                          const std::vector<TaskInstance>& dev_tasks, const SftConfig& config, std::uint64_t seed,
                          const MetricsFn& metrics) {
  config.validate();
  if (tasks.empty()) throw EmptyInput("stage2 needs training tasks");
  std::vector<SftExample> examples;
  examples.reserve(tasks.size());
  for (const auto& t : tasks) examples.push_back(make_sft_example(t, model.vocab()));
  std::vector<TaskInstance> dev(dev_tasks.begin(),
                                dev_tasks.begin() + std::min<std::size_t>(dev_tasks.size(), config.dev_count));

  const int n = static_cast<int>(examples.size());
  const int per_epoch = (n + config.batch - 1) / config.batch;
  const long total = static_cast<long>(per_epoch) * config.epochs;
  AdamW opt({ParamGroup{model.store().with_prefix(""), config.lr}});
  std::mt19937_64 rng(seed);
  std::vector<int> order(static_cast<std::size_t>(n));
  Stage2Result res;

  auto dev_check = [&](Json& rec) {
    if (dev.empty()) return;
    res.dev = evaluate(model, dev, config.caps);
    res.dev_tf_acc = teacher_forced_accuracy(model, dev);
    rec["fmt_valid"] = res.dev.format_valid;
    rec["dev_acc"] = res.dev.accuracy;
    rec["dev_tf_acc"] = res.dev_tf_acc;
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle_indices(order, rng);
    for (int b = 0; b < per_epoch; ++b) {
      const int lo = b * config.batch;
      const int hi = std::min(n, lo + config.batch);
      opt.zero_grad();
      double loss_sum = 0.0;
      long hits = 0;
      long count = 0;
      for (int k = lo; k < hi; ++k) {
        const auto& ex = examples[order[k]];
        const auto& task = tasks[order[k]];
        const auto out = two_pass_forward(model, ex, model.vlm().encode_image(task.image));
        auto loss = sft_loss(out.logits, ex);
        ad::backward(ad::scale(loss, 1.0 / (hi - lo)));
        loss_sum += loss.item();
        const auto [h, c] = teacher_forced_hits(out.logits, ex);
        hits += h;
        count += c;
      }
      opt.step(cosine_schedule(res.steps, total, config.warmup));
      ++res.steps;
      Json rec{{"step", res.steps},
               {"loss", loss_sum / (hi - lo)},
               {"tf_acc", count == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(count)}};
      const bool last = res.steps == total;
      if (last || (config.dev_every > 0 && res.steps % config.dev_every == 0)) dev_check(rec);
      if (metrics) metrics(rec);
    }
  }
  return res;
}

}  // namespace dlr
