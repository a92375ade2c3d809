#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dlr/diff.hpp"

namespace testutil {

inline std::vector<double> randn(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

inline dlr::ad::Tensor param(std::vector<int> shape, std::mt19937_64& rng, double sd = 1.0) {
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  return dlr::ad::Tensor::from(randn(n, rng, sd), std::move(shape), true);
}

inline std::vector<double> unit(std::size_t d, std::mt19937_64& rng) {
  return dlr::ad::l2_normalize(randn(d, rng));
}

inline double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Fresh scratch directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::current_path() / "scratch" / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
