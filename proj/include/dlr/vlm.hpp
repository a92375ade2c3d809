#pragma once
// Tiny vision encoder + causal decoder with cross-attention to image
// features in every block and continuous-vector injection at placeholder
// positions.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dlr/diff.hpp"
#include "dlr/params.hpp"
#include "dlr/synthtask.hpp"

namespace dlr {

struct ModelConfig {
  int d = 64;
  int layers = 4;
  int heads = 4;
  int ffn_mult = 4;
  int grid = 8;
  int patch = 4;
  int max_seq = 512;
  int vocab = 0;
  // Token ids [placeholder_begin, placeholder_end) may carry injected vectors.
  int placeholder_begin = 0;
  int placeholder_end = 0;

  int patches() const { return grid * grid; }
  void validate() const;
};

// Continuous vectors injected in place of token embeddings.
struct Injection {
  std::vector<int> positions;
  ad::Tensor vectors;  // positions.size() × d
};

struct BlockParams {
  ad::Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  ad::Tensor ln2_g, ln2_b, xq, xbq, xk, xbk, xv, xbv, xo, xbo;
  ad::Tensor ln3_g, ln3_b, w1, b1, w2, b2;
};

class ToyVlm {
 public:
  ToyVlm(const ModelConfig& config, ParamStore& store, std::mt19937_64& rng,
         const std::string& prefix = "vlm.");

  const ModelConfig& config() const { return config_; }

  // m×d patch features aligned with the task's patch indexing.
  ad::Tensor encode_image(const GridImage& image) const;

  struct Output {
    ad::Tensor hidden;  // T×d, final layer after the output norm
    ad::Tensor logits;  // T×vocab
  };
  // `image` may be undefined for text-only encoding (no cross-attention).
  Output forward(std::span<const int> tokens, const std::vector<Injection>& injections,
                 const ad::Tensor& image, bool with_logits = true) const;
  // Hidden state of the last non-pad token, text only.
  ad::Tensor last_valid_hidden(std::span<const int> tokens, int pad_id) const;

  // Read-only access used by the incremental decoder.
  const ad::Tensor& token_embedding() const { return tok_emb_; }
  const ad::Tensor& position_embedding() const { return pos_emb_; }
  const std::vector<BlockParams>& blocks() const { return blocks_; }
  const ad::Tensor& final_gain() const { return lnf_g_; }
  const ad::Tensor& final_bias() const { return lnf_b_; }
  const ad::Tensor& head_weight() const { return head_w_; }
  const ad::Tensor& head_bias() const { return head_b_; }

 private:
  ModelConfig config_;
  ad::Tensor patch_w_, patch_b_, row_emb_, col_emb_;
  ad::Tensor tok_emb_, pos_emb_;
  std::vector<BlockParams> blocks_;
  ad::Tensor lnf_g_, lnf_b_, head_w_, head_b_;
};

// KV-cached single-position decoding that mirrors ToyVlm::forward.
class DecodeSession {
 public:
  DecodeSession(const ToyVlm& model, const ad::Tensor& image);

  void push_token(int token);
  void push_vector(std::span<const double> v);
  int length() const { return length_; }
  // Final-layer hidden state of the last pushed position.
  std::span<const double> hidden() const { return hidden_; }
  // Next-token logits from the last pushed position.
  std::vector<double> logits() const;

 private:
  void push_embedding(std::vector<double> x);

  const ToyVlm& model_;
  int d_;
  int length_ = 0;
  bool has_image_;
  std::vector<std::vector<double>> k_cache_, v_cache_;    // per layer, growing T×d
  std::vector<std::vector<double>> img_k_, img_v_;        // per layer, m×d
  std::vector<double> hidden_;
};

}  // namespace dlr
