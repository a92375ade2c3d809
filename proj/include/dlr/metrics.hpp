#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <vector>

#include "json.hpp"

namespace dlr {

using Json = nlohmann::json;
using MetricsFn = std::function<void(const Json&)>;

// Appends one compact JSON object per line.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path);
  void write(const Json& record);
  MetricsFn sink() {
    return [this](const Json& j) { write(j); };
  }

 private:
  std::ofstream out_;
};

// Deterministic index shuffle built only on the raw engine output.
void shuffle_indices(std::vector<int>& idx, std::mt19937_64& rng);

}  // namespace dlr
