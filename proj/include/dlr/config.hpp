#pragma once
// Strict sectioned key = value run configuration.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dlr/model.hpp"
#include "dlr/sglp.hpp"
#include "dlr/stage1.hpp"
#include "dlr/stage2.hpp"
#include "dlr/stage3.hpp"

namespace dlr {

struct RunSection {
  std::uint64_t seed = 0;
  std::string init_checkpoint;  // previous-stage checkpoint
  std::string dev_data;         // held-out tasks for dev checks and RL eval
};

struct RunConfig {
  std::string text;  // the source, stored verbatim in checkpoints
  RunSection run;
  ModelSettings model;
  PretrainConfig stage1;
  std::vector<Family> stage1_families{Family::attribute, Family::global};
  SftConfig stage2;
  sglp::SglpConfig sglp;
  RewardConfig reward;
  RlConfig stage3;
  GenerateCaps caps;

  // Unknown sections or keys, duplicates and malformed values are errors.
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  void validate() const;
};

std::vector<Family> parse_families(const std::string& list);

}  // namespace dlr
