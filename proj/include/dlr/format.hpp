#pragma once
// Vocabulary and the premise, latent block, rationale token grammar.
//
//   <bos> question <premise> p </premise> <vis_thought> <VIS0>..<VIS{L-1}> </vis_thought>
//   <rationale> r </rationale> ... answer <eos>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dlr {

using Words = std::vector<std::string>;

struct TrajectoryStep {
  Words premise;
  Words rationale;
  // L continuous vectors once filled; empty means UNFILLED.
  std::vector<std::vector<double>> latents;

  bool operator==(const TrajectoryStep&) const = default;
};

struct Trajectory {
  Words question;
  std::vector<TrajectoryStep> steps;
  Words answer;

  bool operator==(const Trajectory&) const = default;
  std::string answer_text() const;
};

inline constexpr int kDefaultMaxSteps = 4;

class Vocab {
 public:
  // Specials, then <VIS0>..<VIS{latent_slots-1}>, then the closed word list.
  static Vocab build(int latent_slots);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int size() const { return static_cast<int>(tokens_.size()); }
  int latent_slots() const { return latent_slots_; }
  int id(std::string_view token) const;  // throws OovWord
  bool contains(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  int pad() const { return 0; }
  int bos() const { return 1; }
  int eos() const { return 2; }
  int premise_open() const { return 3; }
  int premise_close() const { return 4; }
  int vis_open() const { return 5; }
  int vis_close() const { return 6; }
  int rationale_open() const { return 7; }
  int rationale_close() const { return 8; }
  int placeholder(int slot) const { return kFirstPlaceholder + slot; }
  bool is_placeholder(int id) const {
    return id >= kFirstPlaceholder && id < kFirstPlaceholder + latent_slots_;
  }
  bool is_special(int id) const { return id < kFirstPlaceholder + latent_slots_; }

  static constexpr int kFirstPlaceholder = 9;

 private:
  void index();
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  int latent_slots_ = 0;
};

// The closed word list of the synthetic task language.
const std::vector<std::string>& task_words();

// Token positions recovered while parsing.
struct SequenceLayout {
  int question_end = 0;                 // index one past the last question token
  std::vector<int> premise_close;       // position of each </premise>
  std::vector<int> block_start;         // position of each <VIS0>
  std::vector<int> answer_span;         // [first, last+1) of the answer words
};

struct ParsedSequence {
  Trajectory trajectory;
  SequenceLayout layout;
};

std::vector<int> render(const Trajectory& traj, const Vocab& vocab);
// Strict single-pass parse; throws FormatError.
ParsedSequence parse_with_layout(std::span<const int> tokens, const Vocab& vocab,
                                 int max_steps = kDefaultMaxSteps);
Trajectory parse(std::span<const int> tokens, const Vocab& vocab, int max_steps = kDefaultMaxSteps);
// 1 on supervised target positions, 0 on the prompt and on placeholders.
std::vector<std::uint8_t> supervision_mask(std::span<const int> tokens, const Vocab& vocab,
                                           int max_steps = kDefaultMaxSteps);

std::string detokenize(std::span<const int> tokens, const Vocab& vocab);
Words split_words(std::string_view text);
std::string join_words(const Words& words);

}  // namespace dlr
