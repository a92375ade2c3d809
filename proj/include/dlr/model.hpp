#pragma once
// The full trainable system (decoder VLM + grounder) and its checkpoint file.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "dlr/format.hpp"
#include "dlr/grounder.hpp"
#include "dlr/params.hpp"
#include "dlr/vlm.hpp"

namespace dlr {

struct ModelSettings {
  int d = 64;
  int layers = 4;
  int heads = 4;
  int ffn_mult = 4;
  int grid = 8;
  int patch = 4;
  int max_seq = 512;
  GrounderConfig grounder;
};

class DlrModel {
 public:
  DlrModel(const ModelSettings& settings, std::uint64_t seed);
  DlrModel(const DlrModel&) = delete;
  DlrModel& operator=(const DlrModel&) = delete;

  const ModelSettings& settings() const { return settings_; }
  const Vocab& vocab() const { return vocab_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  const ToyVlm& vlm() const { return *vlm_; }
  const Grounder& grounder() const { return *grounder_; }

  std::vector<ad::Tensor> vlm_params() const { return store_.with_prefix("vlm."); }
  std::vector<ad::Tensor> grounder_params() const { return store_.with_prefix("grounder."); }

 private:
  ModelSettings settings_;
  Vocab vocab_;
  ParamStore store_;
  std::unique_ptr<ToyVlm> vlm_;
  std::unique_ptr<Grounder> grounder_;
};

struct CheckpointManifest {
  int stage = 0;
  std::uint64_t seed = 0;
  std::string config_text;
  std::uint64_t config_hash() const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::uint64_t fnv1a(std::string_view bytes);

// Parameters are written in registration order as little-endian float32.
void save_checkpoint(const std::filesystem::path& path, const ParamStore& store, const CheckpointManifest& manifest);
// Reads the manifest only.
CheckpointManifest read_manifest(const std::filesystem::path& path);
// Copies stored values into `store`; names and shapes must match exactly.
CheckpointManifest load_checkpoint(const std::filesystem::path& path, ParamStore& store);

}  // namespace dlr
