#include "dlr/format.hpp"

#include <fstream>
#include <sstream>

#include "dlr/errors.hpp"

namespace dlr {

namespace {

const char* const kSpecials[] = {"<pad>",         "<bos>",      "<eos>",       "<premise>", "</premise>",
                                 "<vis_thought>", "</vis_thought>", "<rationale>", "</rationale>"};

}  // namespace

const std::vector<std::string>& task_words() {
  static const std::vector<std::string> words = {
      // question scaffolding
      "what", "color", "shape", "is", "the", "object", "of", "left", "right", "above", "below", "dominant",
      "how", "many", "shapes", "are", "there", "?",
      // premises and rationales
      "locate", "look", "count", "colors", "found", "it", "a", "most", "cells", "at",
      // colors
      "red", "green", "blue", "yellow", "white", "black",
      // shapes
      "circle", "square", "star", "triangle",
      // counts
      "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "."};
  return words;
}

std::string Trajectory::answer_text() const { return join_words(answer); }

Vocab Vocab::build(int latent_slots) {
  if (latent_slots <= 0) throw ConfigError("latent_slots must be positive");
  Vocab v;
  v.latent_slots_ = latent_slots;
  for (const char* s : kSpecials) v.tokens_.emplace_back(s);
  for (int i = 0; i < latent_slots; ++i) v.tokens_.push_back("<VIS" + std::to_string(i) + ">");
  for (const auto& w : task_words()) v.tokens_.push_back(w);
  v.index();
  return v;
}

void Vocab::index() {
  ids_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<int>(i));
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocab " + path.string());
  Vocab v;
  std::string line;
  while (std::getline(in, line)) v.tokens_.push_back(line);
  int slots = 0;
  while (kFirstPlaceholder + slots < static_cast<int>(v.tokens_.size()) &&
         v.tokens_[kFirstPlaceholder + slots] == "<VIS" + std::to_string(slots) + ">") {
    ++slots;
  }
  for (int i = 0; i < kFirstPlaceholder; ++i) {
    if (i >= static_cast<int>(v.tokens_.size()) || v.tokens_[i] != kSpecials[i]) {
      throw IoError("vocab file " + path.string() + " has unexpected special tokens");
    }
  }
  v.latent_slots_ = slots;
  v.index();
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocab " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

int Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) throw OovWord("'" + std::string(token) + "' is not in the vocabulary");
  return it->second;
}

bool Vocab::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

std::vector<int> render(const Trajectory& traj, const Vocab& vocab) {
  auto word_id = [&](const std::string& w) {
    const int id = vocab.id(w);
    if (vocab.is_special(id)) throw OovWord("'" + w + "' is a reserved token");
    return id;
  };
  std::vector<int> out;
  out.push_back(vocab.bos());
  for (const auto& w : traj.question) out.push_back(word_id(w));
  for (const auto& step : traj.steps) {
    out.push_back(vocab.premise_open());
    for (const auto& w : step.premise) out.push_back(word_id(w));
    out.push_back(vocab.premise_close());
    out.push_back(vocab.vis_open());
    for (int i = 0; i < vocab.latent_slots(); ++i) out.push_back(vocab.placeholder(i));
    out.push_back(vocab.vis_close());
    out.push_back(vocab.rationale_open());
    for (const auto& w : step.rationale) out.push_back(word_id(w));
    out.push_back(vocab.rationale_close());
  }
  for (const auto& w : traj.answer) out.push_back(word_id(w));
  out.push_back(vocab.eos());
  return out;
}

ParsedSequence parse_with_layout(std::span<const int> tokens, const Vocab& vocab, int max_steps) {
  ParsedSequence result;
  Trajectory& traj = result.trajectory;
  SequenceLayout& layout = result.layout;
  const std::size_t n = tokens.size();
  std::size_t pos = 0;

  auto valid_id = [&](int id) { return id >= 0 && id < vocab.size(); };
  auto is_word = [&](std::size_t i) { return valid_id(tokens[i]) && !vocab.is_special(tokens[i]); };
  auto fail = [](std::size_t at, const char* reason) -> FormatError { return FormatError(at, reason); };
  // Reads words up to the closing tag; classifies whatever interrupts it.
  auto read_words_until = [&](int close, int open, Words& into) {
    while (true) {
      if (pos >= n) throw fail(pos, "unclosed_tag");
      if (!valid_id(tokens[pos])) throw fail(pos, "unknown_token");
      if (tokens[pos] == close) {
        ++pos;
        return;
      }
      if (tokens[pos] == open) throw fail(pos, "nested_tag");
      if (!is_word(pos)) throw fail(pos, "unclosed_tag");
      into.push_back(vocab.token(tokens[pos]));
      ++pos;
    }
  };

  if (n == 0 || tokens[0] != vocab.bos()) throw fail(0, "missing_bos");
  pos = 1;
  while (pos < n && is_word(pos)) traj.question.push_back(vocab.token(tokens[pos++]));
  if (traj.question.empty()) throw fail(pos, "empty_question");
  layout.question_end = static_cast<int>(pos);
  if (pos >= n) throw fail(pos, "missing_step");
  if (tokens[pos] != vocab.premise_open()) throw fail(pos, "unexpected_token");

  while (pos < n && tokens[pos] == vocab.premise_open()) {
    if (static_cast<int>(traj.steps.size()) >= max_steps) throw fail(pos, "too_many_steps");
    TrajectoryStep step;
    ++pos;
    read_words_until(vocab.premise_close(), vocab.premise_open(), step.premise);
    layout.premise_close.push_back(static_cast<int>(pos - 1));

    if (pos >= n || tokens[pos] != vocab.vis_open()) throw fail(pos, "bad_latent_block");
    ++pos;
    layout.block_start.push_back(static_cast<int>(pos));
    for (int slot = 0; slot < vocab.latent_slots(); ++slot, ++pos) {
      if (pos >= n || tokens[pos] != vocab.placeholder(slot)) throw fail(pos, "bad_latent_block");
    }
    if (pos >= n || tokens[pos] != vocab.vis_close()) throw fail(pos, "bad_latent_block");
    ++pos;

    if (pos >= n) throw fail(pos, "unclosed_tag");
    if (tokens[pos] != vocab.rationale_open()) throw fail(pos, "unexpected_token");
    ++pos;
    read_words_until(vocab.rationale_close(), vocab.rationale_open(), step.rationale);
    traj.steps.push_back(std::move(step));
  }

  const std::size_t answer_begin = pos;
  while (pos < n && is_word(pos)) traj.answer.push_back(vocab.token(tokens[pos++]));
  if (pos >= n) throw fail(pos, "missing_eos");
  if (tokens[pos] != vocab.eos()) throw fail(pos, "unexpected_token");
  if (traj.answer.empty()) throw fail(pos, "empty_answer");
  layout.answer_span = {static_cast<int>(answer_begin), static_cast<int>(pos)};
  ++pos;
  if (pos != n) throw fail(pos, "trailing_tokens");
  return result;
}

Trajectory parse(std::span<const int> tokens, const Vocab& vocab, int max_steps) {
  return parse_with_layout(tokens, vocab, max_steps).trajectory;
}

std::vector<std::uint8_t> supervision_mask(std::span<const int> tokens, const Vocab& vocab, int max_steps) {
  const auto parsed = parse_with_layout(tokens, vocab, max_steps);
  std::vector<std::uint8_t> mask(tokens.size(), 1);
  for (int i = 0; i < parsed.layout.question_end; ++i) mask[i] = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (vocab.is_placeholder(tokens[i])) mask[i] = 0;
  }
  return mask;
}

std::string detokenize(std::span<const int> tokens, const Vocab& vocab) {
  std::string out;
  int run = 0;  // collapses placeholder runs for readability
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int id = tokens[i];
    if (id >= 0 && id < vocab.size() && vocab.is_placeholder(id)) {
      ++run;
      const bool last = i + 1 == tokens.size() || !vocab.is_placeholder(tokens[i + 1]);
      if (!last) continue;
      if (!out.empty()) out += ' ';
      out += "<VIS x" + std::to_string(run) + ">";
      run = 0;
      continue;
    }
    if (!out.empty()) out += ' ';
    out += (id >= 0 && id < vocab.size()) ? vocab.token(id) : "<unk:" + std::to_string(id) + ">";
  }
  return out;
}

Words split_words(std::string_view text) {
  Words out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::string join_words(const Words& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace dlr
