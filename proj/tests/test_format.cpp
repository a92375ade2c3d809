#include <doctest.h>

#include <set>

#include "dlr/errors.hpp"
#include "dlr/format.hpp"
#include "dlr/synthtask.hpp"
#include "helpers.hpp"

using namespace dlr;

namespace {

Trajectory sample_traj() {
  Trajectory t;
  t.question = split_words("what color is the star ?");
  t.steps.push_back({split_words("locate the star"), split_words("the star is red"), {}});
  t.answer = {"red"};
  return t;
}

std::string reason_of(const std::vector<int>& toks, const Vocab& v) {
  try {
    parse(toks, v);
  } catch (const FormatError& e) {
    return e.reason();
  }
  return "ok";
}

}  // namespace

TEST_SUITE("format") {

TEST_CASE("vocabulary layout") {
  const auto v = Vocab::build(32);
  std::set<int> ids;
  for (const char* s : {"<pad>", "<bos>", "<eos>", "<premise>", "</premise>", "<vis_thought>", "</vis_thought>",
                        "<rationale>", "</rationale>"}) {
    ids.insert(v.id(s));
  }
  for (int i = 0; i < 32; ++i) ids.insert(v.id("<VIS" + std::to_string(i) + ">"));
  CHECK(ids.size() == 9u + 32u);
  int placeholders = 0;
  for (int i = 0; i < v.size(); ++i) placeholders += v.is_placeholder(i) ? 1 : 0;
  CHECK(placeholders == 32);
  CHECK_THROWS_AS(v.id("banana"), OovWord);
  CHECK(v.size() < 130);
}

TEST_CASE("vocabulary file round trip") {
  const auto dir = testutil::scratch_dir("vocab");
  const auto v = Vocab::build(8);
  v.save(dir / "vocab.txt");
  const auto w = Vocab::load(dir / "vocab.txt");
  REQUIRE(w.size() == v.size());
  for (int i = 0; i < v.size(); ++i) CHECK(w.token(i) == v.token(i));
  CHECK(w.latent_slots() == 8);
}

TEST_CASE("render emits the step grammar") {
  const auto v = Vocab::build(32);
  auto t = sample_traj();
  t.steps[0].rationale.clear();
  const auto toks = render(t, v);
  std::vector<std::string> expect{"<bos>", "what", "color", "is", "the", "star", "?", "<premise>", "locate", "the",
                                  "star", "</premise>", "<vis_thought>"};
  for (int i = 0; i < 32; ++i) expect.push_back("<VIS" + std::to_string(i) + ">");
  for (const char* s : {"</vis_thought>", "<rationale>", "</rationale>", "red", "<eos>"}) expect.push_back(s);
  REQUIRE(toks.size() == expect.size());
  for (std::size_t i = 0; i < toks.size(); ++i) CHECK(v.token(toks[i]) == expect[i]);
}

TEST_CASE("render rejects unknown and reserved words") {
  const auto v = Vocab::build(4);
  auto t = sample_traj();
  t.answer = {"banana"};
  CHECK_THROWS_AS(render(t, v), OovWord);
  t.answer = {"<eos>"};
  CHECK_THROWS_AS(render(t, v), OovWord);
}

TEST_CASE("parse inverts render on generated trajectories") {
  const auto v = Vocab::build(32);
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto task = generate_task(seed, static_cast<Family>(seed % 3));
    const auto toks = render(task.gold_trajectory, v);
    REQUIRE(parse(toks, v) == task.gold_trajectory);
  }
}

TEST_CASE("parse error reasons") {
  const auto v = Vocab::build(32);
  const auto good = render(sample_traj(), v);
  REQUIRE(reason_of(good, v) == "ok");

  auto no_close = good;
  no_close.erase(std::find(no_close.begin(), no_close.end(), v.rationale_close()));
  CHECK(reason_of(no_close, v) == "unclosed_tag");

  auto short_block = good;
  short_block.erase(std::find(short_block.begin(), short_block.end(), v.placeholder(31)));
  CHECK(reason_of(short_block, v) == "bad_latent_block");

  auto trailing = good;
  trailing.push_back(v.id("red"));
  CHECK(reason_of(trailing, v) == "trailing_tokens");

  auto nested = good;
  nested.insert(std::find(nested.begin(), nested.end(), v.premise_close()), v.premise_open());
  CHECK(reason_of(nested, v) == "nested_tag");

  auto no_bos = std::vector<int>(good.begin() + 1, good.end());
  CHECK(reason_of(no_bos, v) == "missing_bos");

  auto no_eos = std::vector<int>(good.begin(), good.end() - 1);
  CHECK(reason_of(no_eos, v) == "missing_eos");

  auto no_answer = good;
  no_answer.erase(no_answer.end() - 2);
  CHECK(reason_of(no_answer, v) == "empty_answer");

  auto unknown = good;
  unknown[9] = 9999;
  CHECK(reason_of(unknown, v) == "unknown_token");

  Trajectory five = sample_traj();
  while (five.steps.size() < 5) five.steps.push_back(five.steps.front());
  const auto too_many = render(five, v);
  CHECK(reason_of(too_many, v) == "too_many_steps");
  CHECK_NOTHROW(parse(too_many, v, 5));

  try {
    parse(short_block, v);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.position() > 0u);
  }
}

TEST_CASE("parse is total on random token soup") {
  const auto v = Vocab::build(4);
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> len(0, 40);
  std::uniform_int_distribution<int> tok(-3, v.size() + 3);
  for (int i = 0; i < 20000; ++i) {
    std::vector<int> toks(static_cast<std::size_t>(len(rng)));
    for (int& t : toks) t = tok(rng);
    if (i % 2 == 0 && !toks.empty()) toks[0] = v.bos();
    try {
      parse(toks, v);
    } catch (const FormatError&) {
    }
  }
  CHECK(true);
}

TEST_CASE("supervision mask") {
  const auto v = Vocab::build(32);
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const auto task = generate_task(seed, static_cast<Family>(seed % 3));
    const auto toks = render(task.gold_trajectory, v);
    const auto mask = supervision_mask(toks, v);
    const auto layout = parse_with_layout(toks, v).layout;
    int zero_placeholders = 0;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (v.is_placeholder(toks[i])) {
        CHECK(mask[i] == 0);
        ++zero_placeholders;
      } else if (static_cast<int>(i) < layout.question_end) {
        CHECK(mask[i] == 0);
      } else {
        CHECK(mask[i] == 1);
      }
    }
    CHECK(zero_placeholders == static_cast<int>(task.gold_trajectory.steps.size()) * 32);
    for (int i = layout.answer_span[0]; i < layout.answer_span[1]; ++i) CHECK(mask[i] == 1);
  }
}

TEST_CASE("detokenize collapses placeholder runs") {
  const auto v = Vocab::build(4);
  const auto s = detokenize(render(sample_traj(), v), v);
  CHECK(s.find("<vis_thought> <VIS x4> </vis_thought>") != std::string::npos);
}

}
