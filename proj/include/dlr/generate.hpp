#pragma once
// Interleaved decoding: text until </premise>, then a latent block from the
// grounder conditioned on the state at </premise>, then text again.

#include <random>
#include <span>
#include <string>
#include <vector>

#include "dlr/format.hpp"
#include "dlr/grounder.hpp"
#include "dlr/vlm.hpp"

namespace dlr {

struct GenerateCaps {
  int max_steps = kDefaultMaxSteps;
  int max_new_tokens = 192;  // counts forced tags and placeholders
};

enum class LatentMode { mean, sample };

struct GenerateOptions {
  LatentMode mode = LatentMode::mean;
  double sigma = 0.1;
  bool greedy = true;  // otherwise sample text at temperature 1
  GenerateCaps caps;
};

struct StepRecord {
  int premise_close = 0;      // position of </premise>
  int block_start = 0;        // position of the first placeholder
  std::vector<double> state;  // d, hidden state at </premise>
  std::vector<double> mu;     // L×d
  std::vector<double> z;      // L×d, the injected vectors
  std::vector<double> attn;   // m
};

struct Generation {
  std::vector<int> tokens;
  int prompt_len = 0;
  std::vector<StepRecord> steps;
  // Freely decoded positions and their log-probabilities when chosen.
  std::vector<int> sampled_positions;
  std::vector<double> old_logprobs;
  bool finished = false;   // ended with <eos>
  bool truncated = false;  // stopped by a cap
};

// <bos> question.
std::vector<int> prompt_tokens(std::string_view question, const Vocab& vocab);

Generation generate(const ToyVlm& model, const Grounder& grounder, const Vocab& vocab,
                    const ad::Tensor& image_features, std::span<const int> prompt,
                    const GenerateOptions& options, std::mt19937_64& rng);

// Parses a finished generation; nullopt on any format error or truncation.
std::optional<Trajectory> parse_generation(const Generation& g, const Vocab& vocab, int max_steps);

// Injections that reproduce the generation's latent blocks.
std::vector<Injection> injections_of(const Generation& g, int d);

}  // namespace dlr
