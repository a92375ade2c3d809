#include "dlr/grounder.hpp"

#include <cmath>

#include "dlr/errors.hpp"

namespace dlr {

std::vector<double> attention_map(const ad::AttentionProbe& probe) {
  if (probe.weights.empty() || probe.heads <= 0 || probe.tq <= 0 || probe.tk <= 0) {
    throw NoForwardYet("attention map requested before a grounding pass");
  }
  std::vector<double> out(static_cast<std::size_t>(probe.tk), 0.0);
  const std::size_t rows = static_cast<std::size_t>(probe.heads) * probe.tq;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* w = probe.weights.data() + r * probe.tk;
    for (int j = 0; j < probe.tk; ++j) out[j] += w[j];
  }
  double total = 0.0;
  for (double v : out) total += v;
  for (double& v : out) v /= total;
  return out;
}

Grounder::Grounder(int d, const GrounderConfig& config, ParamStore& store, std::mt19937_64& rng,
                   const std::string& prefix)
    : d_(d), config_(config) {
  if (config_.slots < 1) throw ConfigError("grounder.slots must be at least 1");
  if (config_.heads < 1 || d % config_.heads != 0) throw ConfigError("grounder.heads must divide d");
  if (config_.ffn_mult < 1) throw ConfigError("grounder.ffn_mult must be positive");
  const int f = config_.ffn_mult * d;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = 0.5 * in_std;
  auto w = [&](const std::string& n, int r, int c, double s) { return store.add_normal(prefix + n, {r, c}, s, rng); };
  auto zeros = [&](const std::string& n, int k) { return store.add_constant(prefix + n, {k}, 0.0); };
  auto ones = [&](const std::string& n, int k) { return store.add_constant(prefix + n, {k}, 1.0); };

  z0_ = w("z0", config_.slots, d, 1.0);
  lnq1_g_ = ones("cond.lnq_g", d);
  lnq1_b_ = zeros("cond.lnq_b", d);
  lnc_g_ = ones("cond.lnc_g", d);
  lnc_b_ = zeros("cond.lnc_b", d);
  c_wq_ = w("cond.wq", d, d, in_std);
  c_bq_ = zeros("cond.bq", d);
  c_wk_ = w("cond.wk", d, d, in_std);
  c_bk_ = zeros("cond.bk", d);
  c_wv_ = w("cond.wv", d, d, in_std);
  c_bv_ = zeros("cond.bv", d);
  c_wo_ = w("cond.wo", d, d, in_std);
  c_bo_ = zeros("cond.bo", d);
  lnq2_g_ = ones("image.lnq_g", d);
  lnq2_b_ = zeros("image.lnq_b", d);
  lnv_g_ = ones("image.lnv_g", d);
  lnv_b_ = zeros("image.lnv_b", d);
  v_wq_ = w("image.wq", d, d, in_std);
  v_bq_ = zeros("image.bq", d);
  v_wk_ = w("image.wk", d, d, in_std);
  v_bk_ = zeros("image.bk", d);
  v_wv_ = w("image.wv", d, d, in_std);
  v_bv_ = zeros("image.bv", d);
  v_wo_ = w("image.wo", d, d, in_std);
  v_bo_ = zeros("image.bo", d);
  lnf_g_ = ones("ffn.ln_g", d);
  lnf_b_ = zeros("ffn.ln_b", d);
  f_w1_ = w("ffn.w1", d, f, in_std);
  f_b1_ = zeros("ffn.b1", f);
  f_w2_ = w("ffn.w2", f, d, out_std * std::sqrt(static_cast<double>(d) / f));
  f_b2_ = zeros("ffn.b2", d);
}

GrounderOutput Grounder::ground(const ad::Tensor& V, const ad::Tensor& condition) const {
  if (V.rank() != 2 || V.cols() != d_) throw ShapeMismatch("image features must be m x d");
  if (static_cast<int>(condition.size()) != d_) throw ShapeMismatch("condition must have width d");
  const auto cond = condition.rank() == 2 ? condition : ad::reshape(condition, {1, d_});

  // Slots read the condition (a single key).
  auto q = ad::layer_norm(z0_, lnq1_g_, lnq1_b_);
  auto c = ad::layer_norm(cond, lnc_g_, lnc_b_);
  auto att = ad::attention(ad::linear(q, c_wq_, c_bq_), ad::linear(c, c_wk_, c_bk_),
                           ad::linear(c, c_wv_, c_bv_), config_.heads, false);
  auto x = ad::add(z0_, ad::linear(att, c_wo_, c_bo_));

  GrounderOutput out;
  q = ad::layer_norm(x, lnq2_g_, lnq2_b_);
  auto v = ad::layer_norm(V, lnv_g_, lnv_b_);
  att = ad::attention(ad::linear(q, v_wq_, v_bq_), ad::linear(v, v_wk_, v_bk_), ad::linear(v, v_wv_, v_bv_),
                      config_.heads, false, &out.probe);
  x = ad::add(x, ad::linear(att, v_wo_, v_bo_));

  auto h = ad::gelu(ad::linear(ad::layer_norm(x, lnf_g_, lnf_b_), f_w1_, f_b1_));
  x = ad::add(x, ad::linear(h, f_w2_, f_b2_));
  out.mu = ad::l2_normalize_rows(x);
  out.attn = attention_map(out.probe);
  return out;
}

}  // namespace dlr
