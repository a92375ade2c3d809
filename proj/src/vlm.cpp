#include "dlr/vlm.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "dlr/errors.hpp"

namespace dlr {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using ConstVec = Eigen::Map<const Eigen::RowVectorXd>;
using Vec = Eigen::Map<Eigen::RowVectorXd>;

ConstMat mat(const ad::Tensor& t) { return ConstMat(t.data().data(), t.rows(), t.cols()); }
ConstVec vec(const ad::Tensor& t) { return ConstVec(t.data().data(), static_cast<Eigen::Index>(t.size())); }

// x·w + b for a single row.
std::vector<double> affine(std::span<const double> x, const ad::Tensor& w, const ad::Tensor& b) {
  std::vector<double> out(static_cast<std::size_t>(w.cols()));
  Vec(out.data(), w.cols()).noalias() = ConstVec(x.data(), w.rows()) * mat(w) + vec(b);
  return out;
}

std::vector<double> layer_norm_row(std::span<const double> x, const ad::Tensor& g, const ad::Tensor& b) {
  const std::size_t k = x.size();
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(k);
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(k);
  const double rstd = 1.0 / std::sqrt(var + 1e-5);
  std::vector<double> out(k);
  for (std::size_t j = 0; j < k; ++j) out[j] = (x[j] - mu) * rstd * g[j] + b[j];
  return out;
}

double gelu_value(double x) {
  constexpr double c = 0.7978845608028654;
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

// Attention of one query row against `count` cached key/value rows.
std::vector<double> attend(const std::vector<double>& q, const double* keys, const double* values, int count,
                           int d, int heads) {
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(static_cast<std::size_t>(d), 0.0);
  std::vector<double> w(static_cast<std::size_t>(count));
  for (int h = 0; h < heads; ++h) {
    double mx = -INFINITY;
    for (int j = 0; j < count; ++j) {
      double s = 0.0;
      const double* kr = keys + static_cast<std::size_t>(j) * d + h * dh;
      for (int t = 0; t < dh; ++t) s += q[h * dh + t] * kr[t];
      w[j] = s * inv_sqrt;
      mx = std::max(mx, w[j]);
    }
    double z = 0.0;
    for (int j = 0; j < count; ++j) {
      w[j] = std::exp(w[j] - mx);
      z += w[j];
    }
    for (int j = 0; j < count; ++j) {
      const double p = w[j] / z;
      const double* vr = values + static_cast<std::size_t>(j) * d + h * dh;
      for (int t = 0; t < dh; ++t) out[h * dh + t] += p * vr[t];
    }
  }
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (d <= 0 || heads <= 0 || d % heads != 0) throw ConfigError("model.d must be divisible by model.heads");
  if (layers <= 0 || ffn_mult <= 0) throw ConfigError("model.layers and model.ffn_mult must be positive");
  if (grid <= 0 || patch <= 0) throw ConfigError("grid and patch must be positive");
  if (max_seq <= 0 || vocab <= 0) throw ConfigError("max_seq and vocab must be positive");
  if (placeholder_begin < 0 || placeholder_end < placeholder_begin || placeholder_end > vocab) {
    throw ConfigError("placeholder id range outside the vocabulary");
  }
}

ToyVlm::ToyVlm(const ModelConfig& config, ParamStore& store, std::mt19937_64& rng, const std::string& prefix)
    : config_(config) {
  config_.validate();
  const int d = config_.d;
  const int f = config_.ffn_mult * d;
  const int pd = config_.patch * config_.patch * 3;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = 0.5 / std::sqrt(static_cast<double>(d) * config_.layers);
  auto zeros = [&](const std::string& n, int k) { return store.add_constant(prefix + n, {k}, 0.0); };
  auto ones = [&](const std::string& n, int k) { return store.add_constant(prefix + n, {k}, 1.0); };

  patch_w_ = store.add_normal(prefix + "vision.patch_w", {pd, d}, 1.0 / std::sqrt(static_cast<double>(pd)), rng);
  patch_b_ = zeros("vision.patch_b", d);
  row_emb_ = store.add_normal(prefix + "vision.row_emb", {config_.grid, d}, in_std, rng);
  col_emb_ = store.add_normal(prefix + "vision.col_emb", {config_.grid, d}, in_std, rng);
  tok_emb_ = store.add_normal(prefix + "tok_emb", {config_.vocab, d}, in_std, rng);
  pos_emb_ = store.add_normal(prefix + "pos_emb", {config_.max_seq, d}, 0.5 * in_std, rng);
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    BlockParams b;
    b.ln1_g = ones(p + "ln1_g", d);
    b.ln1_b = zeros(p + "ln1_b", d);
    b.wq = store.add_normal(prefix + p + "attn.wq", {d, d}, in_std, rng);
    b.bq = zeros(p + "attn.bq", d);
    b.wk = store.add_normal(prefix + p + "attn.wk", {d, d}, in_std, rng);
    b.bk = zeros(p + "attn.bk", d);
    b.wv = store.add_normal(prefix + p + "attn.wv", {d, d}, in_std, rng);
    b.bv = zeros(p + "attn.bv", d);
    b.wo = store.add_normal(prefix + p + "attn.wo", {d, d}, out_std, rng);
    b.bo = zeros(p + "attn.bo", d);
    b.ln2_g = ones(p + "ln2_g", d);
    b.ln2_b = zeros(p + "ln2_b", d);
    b.xq = store.add_normal(prefix + p + "xattn.wq", {d, d}, in_std, rng);
    b.xbq = zeros(p + "xattn.bq", d);
    b.xk = store.add_normal(prefix + p + "xattn.wk", {d, d}, in_std, rng);
    b.xbk = zeros(p + "xattn.bk", d);
    b.xv = store.add_normal(prefix + p + "xattn.wv", {d, d}, in_std, rng);
    b.xbv = zeros(p + "xattn.bv", d);
    b.xo = store.add_normal(prefix + p + "xattn.wo", {d, d}, out_std, rng);
    b.xbo = zeros(p + "xattn.bo", d);
    b.ln3_g = ones(p + "ln3_g", d);
    b.ln3_b = zeros(p + "ln3_b", d);
    b.w1 = store.add_normal(prefix + p + "ffn.w1", {d, f}, in_std, rng);
    b.b1 = zeros(p + "ffn.b1", f);
    b.w2 = store.add_normal(prefix + p + "ffn.w2", {f, d}, out_std * std::sqrt(static_cast<double>(d) / f), rng);
    b.b2 = zeros(p + "ffn.b2", d);
    blocks_.push_back(std::move(b));
  }
  lnf_g_ = ones("lnf_g", d);
  lnf_b_ = zeros("lnf_b", d);
  head_w_ = store.add_normal(prefix + "head_w", {d, config_.vocab}, in_std, rng);
  head_b_ = zeros("head_b", config_.vocab);
}

ad::Tensor ToyVlm::encode_image(const GridImage& image) const {
  if (image.size != config_.grid || image.patch != config_.patch) {
    throw SizeMismatch("image grid " + std::to_string(image.size) + "x" + std::to_string(image.patch) +
                       " does not match model grid " + std::to_string(config_.grid) + "x" +
                       std::to_string(config_.patch));
  }
  const int m = config_.patches();
  const int pd = image.patch_dim();
  std::vector<double> feats;
  feats.reserve(static_cast<std::size_t>(m) * pd);
  std::vector<int> row_ids(m);
  std::vector<int> col_ids(m);
  for (int i = 0; i < m; ++i) {
    const auto f = image.patch_features(i);
    feats.insert(feats.end(), f.begin(), f.end());
    row_ids[i] = i / config_.grid;
    col_ids[i] = i % config_.grid;
  }
  auto patches = ad::Tensor::from(std::move(feats), {m, pd});
  auto v = ad::linear(patches, patch_w_, patch_b_);
  v = ad::add(v, ad::gather_rows(row_emb_, row_ids));
  return ad::add(v, ad::gather_rows(col_emb_, col_ids));
}

ToyVlm::Output ToyVlm::forward(std::span<const int> tokens, const std::vector<Injection>& injections,
                               const ad::Tensor& image, bool with_logits) const {
  const int t_len = static_cast<int>(tokens.size());
  if (t_len == 0) throw EmptyInput("forward on an empty token sequence");
  if (t_len > config_.max_seq) {
    throw PositionOutOfRange("sequence of " + std::to_string(t_len) + " exceeds max_seq " +
                             std::to_string(config_.max_seq));
  }
  ad::Tensor x = ad::gather_rows(tok_emb_, tokens);
  if (!injections.empty()) {
    std::vector<int> positions;
    std::vector<ad::Tensor> parts;
    for (const auto& inj : injections) {
      if (static_cast<int>(inj.positions.size()) != inj.vectors.rows() || inj.vectors.cols() != config_.d) {
        throw ShapeMismatch("injection vectors do not match their positions");
      }
      for (int p : inj.positions) {
        if (p < 0 || p >= t_len) {
          throw PositionOutOfRange("injection at " + std::to_string(p) + " outside sequence of " +
                                   std::to_string(t_len));
        }
        if (tokens[p] < config_.placeholder_begin || tokens[p] >= config_.placeholder_end) {
          throw PositionOutOfRange("injection at " + std::to_string(p) + " is not a placeholder position");
        }
        positions.push_back(p);
      }
      parts.push_back(inj.vectors);
    }
    x = ad::replace_rows(x, positions, parts.size() == 1 ? parts.front() : ad::concat_rows(parts));
  }
  x = ad::add(x, ad::rows(pos_emb_, 0, t_len));

  const bool has_image = image.defined();
  for (const auto& b : blocks_) {
    auto a = ad::layer_norm(x, b.ln1_g, b.ln1_b);
    auto att = ad::attention(ad::linear(a, b.wq, b.bq), ad::linear(a, b.wk, b.bk), ad::linear(a, b.wv, b.bv),
                             config_.heads, true);
    x = ad::add(x, ad::linear(att, b.wo, b.bo));
    if (has_image) {
      a = ad::layer_norm(x, b.ln2_g, b.ln2_b);
      att = ad::attention(ad::linear(a, b.xq, b.xbq), ad::linear(image, b.xk, b.xbk),
                          ad::linear(image, b.xv, b.xbv), config_.heads, false);
      x = ad::add(x, ad::linear(att, b.xo, b.xbo));
    }
    a = ad::layer_norm(x, b.ln3_g, b.ln3_b);
    x = ad::add(x, ad::linear(ad::gelu(ad::linear(a, b.w1, b.b1)), b.w2, b.b2));
  }
  Output out;
  out.hidden = ad::layer_norm(x, lnf_g_, lnf_b_);
  if (with_logits) out.logits = ad::linear(out.hidden, head_w_, head_b_);
  return out;
}

ad::Tensor ToyVlm::last_valid_hidden(std::span<const int> tokens, int pad_id) const {
  int last = static_cast<int>(tokens.size()) - 1;
  while (last >= 0 && tokens[last] == pad_id) --last;
  if (last < 0) throw EmptyInput("text has no non-pad tokens");
  auto out = forward(tokens.subspan(0, static_cast<std::size_t>(last) + 1), {}, ad::Tensor{}, false);
  return ad::reshape(ad::rows(out.hidden, last, 1), {config_.d});
}

// ---------------------------------------------------------------------------
// DecodeSession

DecodeSession::DecodeSession(const ToyVlm& model, const ad::Tensor& image)
    : model_(model), d_(model.config().d), has_image_(image.defined()) {
  const auto& blocks = model_.blocks();
  k_cache_.resize(blocks.size());
  v_cache_.resize(blocks.size());
  if (!has_image_) return;
  const int m = image.rows();
  for (const auto& b : blocks) {
    RowMat k = mat(image) * mat(b.xk);
    k.rowwise() += vec(b.xbk);
    RowMat v = mat(image) * mat(b.xv);
    v.rowwise() += vec(b.xbv);
    img_k_.emplace_back(k.data(), k.data() + static_cast<std::ptrdiff_t>(m) * d_);
    img_v_.emplace_back(v.data(), v.data() + static_cast<std::ptrdiff_t>(m) * d_);
  }
}

void DecodeSession::push_token(int token) {
  const auto& emb = model_.token_embedding();
  if (token < 0 || token >= emb.rows()) throw PositionOutOfRange("token id " + std::to_string(token));
  auto row = emb.data().subspan(static_cast<std::size_t>(token) * d_, d_);
  push_embedding(std::vector<double>(row.begin(), row.end()));
}

void DecodeSession::push_vector(std::span<const double> v) {
  if (static_cast<int>(v.size()) != d_) throw ShapeMismatch("injected vector has wrong width");
  push_embedding(std::vector<double>(v.begin(), v.end()));
}

void DecodeSession::push_embedding(std::vector<double> x) {
  const auto& cfg = model_.config();
  if (length_ >= cfg.max_seq) throw PositionOutOfRange("decode past max_seq");
  auto pos = model_.position_embedding().data().subspan(static_cast<std::size_t>(length_) * d_, d_);
  for (int j = 0; j < d_; ++j) x[j] += pos[j];
  const auto& blocks = model_.blocks();
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    auto a = layer_norm_row(x, b.ln1_g, b.ln1_b);
    const auto q = affine(a, b.wq, b.bq);
    const auto k = affine(a, b.wk, b.bk);
    const auto v = affine(a, b.wv, b.bv);
    k_cache_[l].insert(k_cache_[l].end(), k.begin(), k.end());
    v_cache_[l].insert(v_cache_[l].end(), v.begin(), v.end());
    auto att = attend(q, k_cache_[l].data(), v_cache_[l].data(), length_ + 1, d_, cfg.heads);
    auto o = affine(att, b.wo, b.bo);
    for (int j = 0; j < d_; ++j) x[j] += o[j];
    if (has_image_) {
      a = layer_norm_row(x, b.ln2_g, b.ln2_b);
      const auto xq = affine(a, b.xq, b.xbq);
      const int m = static_cast<int>(img_k_[l].size()) / d_;
      att = attend(xq, img_k_[l].data(), img_v_[l].data(), m, d_, cfg.heads);
      o = affine(att, b.xo, b.xbo);
      for (int j = 0; j < d_; ++j) x[j] += o[j];
    }
    a = layer_norm_row(x, b.ln3_g, b.ln3_b);
    auto h = affine(a, b.w1, b.b1);
    for (double& e : h) e = gelu_value(e);
    o = affine(h, b.w2, b.b2);
    for (int j = 0; j < d_; ++j) x[j] += o[j];
  }
  hidden_ = layer_norm_row(x, model_.final_gain(), model_.final_bias());
  ++length_;
}

std::vector<double> DecodeSession::logits() const {
  if (length_ == 0) throw EmptyInput("logits requested before any position was pushed");
  return affine(hidden_, model_.head_weight(), model_.head_bias());
}

}  // namespace dlr
