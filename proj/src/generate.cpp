#include "dlr/generate.hpp"

#include <cmath>

#include "dlr/errors.hpp"
#include "dlr/sglp.hpp"

namespace dlr {

std::vector<int> prompt_tokens(std::string_view question, const Vocab& vocab) {
  std::vector<int> out{vocab.bos()};
  for (const auto& w : split_words(question)) out.push_back(vocab.id(w));
  return out;
}

Generation generate(const ToyVlm& model, const Grounder& grounder, const Vocab& vocab,
                    const ad::Tensor& image_features, std::span<const int> prompt,
                    const GenerateOptions& options, std::mt19937_64& rng) {
  if (prompt.empty()) throw EmptyInput("generation needs a prompt");
  ad::NoGradGuard no_grad;
  const int d = model.config().d;
  const int slots = grounder.slots();
  if (slots != vocab.latent_slots()) throw SizeMismatch("grounder slots differ from vocabulary placeholders");

  Generation g;
  g.tokens.assign(prompt.begin(), prompt.end());
  g.prompt_len = static_cast<int>(prompt.size());
  const int limit = std::min(g.prompt_len + options.caps.max_new_tokens, model.config().max_seq);

  DecodeSession session(model, image_features);
  for (int t : prompt) session.push_token(t);
  auto room = [&](int n) { return static_cast<int>(g.tokens.size()) + n <= limit; };

  while (true) {
    if (!room(1)) {
      g.truncated = true;
      break;
    }
    auto logits = session.logits();
    double mx = -INFINITY;
    int best = 0;
    for (int i = 0; i < static_cast<int>(logits.size()); ++i) {
      if (logits[i] > mx) {
        mx = logits[i];
        best = i;
      }
    }
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    int token = best;
    if (!options.greedy) {
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      double u = unif(rng) * z;
      token = static_cast<int>(logits.size()) - 1;
      for (int i = 0; i < static_cast<int>(logits.size()); ++i) {
        u -= std::exp(logits[i] - mx);
        if (u < 0.0) {
          token = i;
          break;
        }
      }
    }
    g.sampled_positions.push_back(static_cast<int>(g.tokens.size()));
    g.old_logprobs.push_back(logits[token] - log_z);
    g.tokens.push_back(token);
    session.push_token(token);
    if (token == vocab.eos()) {
      g.finished = true;
      break;
    }
    if (token != vocab.premise_close()) continue;

    if (static_cast<int>(g.steps.size()) >= options.caps.max_steps || !room(slots + 2)) {
      g.truncated = true;
      break;
    }
    StepRecord step;
    step.premise_close = static_cast<int>(g.tokens.size()) - 1;
    const auto h = session.hidden();
    step.state.assign(h.begin(), h.end());
    auto cond = ad::Tensor::from(step.state, {d});
    auto out = grounder.ground(image_features, cond);
    step.mu = out.mu.to_vector();
    step.attn = std::move(out.attn);
    if (options.mode == LatentMode::mean) {
      step.z = step.mu;
    } else {
      step.z.reserve(step.mu.size());
      for (int s = 0; s < slots; ++s) {
        auto row = std::span<const double>(step.mu).subspan(static_cast<std::size_t>(s) * d, d);
        auto zs = sglp::sample(row, options.sigma, rng);
        step.z.insert(step.z.end(), zs.begin(), zs.end());
      }
    }
    g.tokens.push_back(vocab.vis_open());
    session.push_token(vocab.vis_open());
    step.block_start = static_cast<int>(g.tokens.size());
    for (int s = 0; s < slots; ++s) {
      g.tokens.push_back(vocab.placeholder(s));
      session.push_vector(std::span<const double>(step.z).subspan(static_cast<std::size_t>(s) * d, d));
    }
    g.tokens.push_back(vocab.vis_close());
    session.push_token(vocab.vis_close());
    g.steps.push_back(std::move(step));
  }
  return g;
}

std::optional<Trajectory> parse_generation(const Generation& g, const Vocab& vocab, int max_steps) {
  if (!g.finished || g.truncated) return std::nullopt;
  try {
    return parse(g.tokens, vocab, max_steps);
  } catch (const FormatError&) {
    return std::nullopt;
  }
}

std::vector<Injection> injections_of(const Generation& g, int d) {
  std::vector<Injection> out;
  for (const auto& s : g.steps) {
    Injection inj;
    const int slots = static_cast<int>(s.z.size()) / d;
    for (int i = 0; i < slots; ++i) inj.positions.push_back(s.block_start + i);
    inj.vectors = ad::Tensor::from(s.z, {slots, d});
    out.push_back(std::move(inj));
  }
  return out;
}

}  // namespace dlr
