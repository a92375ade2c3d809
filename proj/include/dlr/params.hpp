#pragma once
// Named trainable parameters and the AdamW optimizer.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dlr/diff.hpp"

namespace dlr {

struct Parameter {
  std::string name;
  ad::Tensor tensor;
};

// Ordered registry of parameters. Names are unique and define the
// checkpoint block order.
class ParamStore {
 public:
  ad::Tensor add_normal(const std::string& name, std::vector<int> shape, double stddev, std::mt19937_64& rng);
  ad::Tensor add_constant(const std::string& name, std::vector<int> shape, double value);

  const std::vector<Parameter>& params() const { return params_; }
  const Parameter* find(const std::string& name) const;
  // Parameters whose names start with `prefix`.
  std::vector<ad::Tensor> with_prefix(const std::string& prefix) const;
  void zero_grad() const;
  // FNV-1a over the raw value bytes of the selected parameters.
  std::uint64_t checksum(const std::string& prefix = "") const;

 private:
  ad::Tensor add(const std::string& name, ad::Tensor t);
  std::vector<Parameter> params_;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global norm; <= 0 disables
};

struct ParamGroup {
  std::vector<ad::Tensor> params;
  double lr = 1e-3;
};

// Decoupled weight decay Adam. Weight decay applies to rank-2 tensors only.
class AdamW {
 public:
  AdamW(std::vector<ParamGroup> groups, AdamWConfig config = {});

  // One update with every group's lr multiplied by `lr_scale`.
  // Returns the global gradient norm before clipping.
  double step(double lr_scale = 1.0);
  void zero_grad() const;
  long steps_taken() const { return t_; }

 private:
  std::vector<ParamGroup> groups_;
  AdamWConfig config_;
  std::vector<std::vector<std::vector<double>>> m_;
  std::vector<std::vector<std::vector<double>>> v_;
  long t_ = 0;
};

// Linear warmup over the first `warmup_frac` of steps, then cosine decay to 0.
double cosine_schedule(long step, long total_steps, double warmup_frac = 0.1);

}  // namespace dlr
