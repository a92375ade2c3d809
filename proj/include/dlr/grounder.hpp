#pragma once
// Latent visual grounder: learnable query slots read a condition vector,
// then attend over image features and emit L unit-norm directions.

#include <random>
#include <string>
#include <vector>

#include "dlr/diff.hpp"
#include "dlr/params.hpp"

namespace dlr {

struct GrounderConfig {
  int slots = 32;  // L
  int heads = 4;
  int ffn_mult = 4;
};

struct GrounderOutput {
  ad::Tensor mu;            // L×d, unit rows
  std::vector<double> attn; // distribution over patches
  ad::AttentionProbe probe; // raw image-attention weights
};

// Mean over heads and query rows of recorded attention weights.
std::vector<double> attention_map(const ad::AttentionProbe& probe);

class Grounder {
 public:
  Grounder(int d, const GrounderConfig& config, ParamStore& store, std::mt19937_64& rng,
           const std::string& prefix = "grounder.");

  // V: m×d image features, condition: d-vector (rank 1 or 1×d).
  GrounderOutput ground(const ad::Tensor& V, const ad::Tensor& condition) const;

  int slots() const { return config_.slots; }
  int width() const { return d_; }

 private:
  int d_;
  GrounderConfig config_;
  ad::Tensor z0_;
  ad::Tensor lnq1_g_, lnq1_b_, lnc_g_, lnc_b_, c_wq_, c_bq_, c_wk_, c_bk_, c_wv_, c_bv_, c_wo_, c_bo_;
  ad::Tensor lnq2_g_, lnq2_b_, lnv_g_, lnv_b_, v_wq_, v_bq_, v_wk_, v_bk_, v_wv_, v_bv_, v_wo_, v_bo_;
  ad::Tensor lnf_g_, lnf_b_, f_w1_, f_b1_, f_w2_, f_b2_;
};

}  // namespace dlr
