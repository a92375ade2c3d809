#pragma once
// Reverse-mode differentiable dense arrays.
//
// Graphs are built on the fly: every op returns a Tensor whose node keeps
// its parents alive and knows how to push its gradient back to them.
// Tensors are rank 1 or rank 2, row-major, stored in double precision.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dlr::ad {

struct Node {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor from(std::vector<double> values, std::vector<int> shape,
                     bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  int cols() const { return node_->shape.back(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(int r, int c) const { return node_->value[static_cast<std::size_t>(r) * cols() + c]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient values; zeros when nothing has been accumulated yet.
  std::vector<double> grad() const;
  void zero_grad() const { node_->grad.clear(); }

  // Copy of the values with no graph history.
  Tensor detach() const;
  std::vector<double> to_vector() const { return node_->value; }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// ---- elementwise and shape ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor add_row(const Tensor& a, const Tensor& row);  // broadcast a 1×k row over a n×k matrix
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor gelu(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor rows(const Tensor& a, int start, int count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
// out = base with rows `positions[i]` replaced by row i of `src`.
Tensor replace_rows(const Tensor& base, std::span<const int> positions, const Tensor& src);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_rows(const Tensor& a);      // n×k -> 1×k
Tensor row_sq_norm(const Tensor& a);    // n×k -> n
Tensor dot(const Tensor& a, const Tensor& b);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);     // a·b
Tensor matmul_bt(const Tensor& a, const Tensor& b);  // a·bᵀ
// a·bᵀ with each entry summed in a fixed order, so pairwise_dot(b, a) is
// exactly the transpose of pairwise_dot(a, b).
Tensor pairwise_dot(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x·w + b
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// ---- normalization / probabilities ----
Tensor l2_normalize_rows(const Tensor& a, double norm_floor = 1e-12);
Tensor softmax_rows(const Tensor& a);

// Records the per-head softmax weights of an attention call:
// weights[h][i][j] flattened as (h * tq + i) * tk + j.
struct AttentionProbe {
  int heads = 0;
  int tq = 0;
  int tk = 0;
  std::vector<double> weights;
};

// Multi-head scaled dot-product attention over pre-projected q (tq×d),
// k and v (tk×d). Causal masking requires tq == tk.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, bool causal,
                 AttentionProbe* probe = nullptr);

// ---- losses ----
// Mean over positions with mask != 0 of -log softmax(logits_t)[target_t];
// 0 when nothing is masked in.
Tensor masked_cross_entropy(const Tensor& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> mask);
// Per-row cross entropy against targets, averaged over rows.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
// log softmax(logits[row_i])[token_i] for each requested (row, token).
Tensor log_softmax_pick(const Tensor& logits, std::span<const int> row_ids,
                        std::span<const int> tokens);
// Σ_i min(ρ_i A_i, clip(ρ_i, 1-ε, 1+ε) A_i) with ρ = exp(log_ratio).
Tensor clipped_surrogate_sum(const Tensor& log_ratio, std::span<const double> advantages,
                             double clip_eps);

// Runs reverse accumulation from a scalar.
void backward(const Tensor& loss);

// ---- plain vector helpers (no graph) ----
std::vector<double> l2_normalize(std::span<const double> v, double norm_floor = 1e-12);
std::vector<double> softmax(std::span<const double> v);
double masked_cross_entropy_value(std::span<const double> logits, int vocab,
                                  std::span<const int> targets,
                                  std::span<const std::uint8_t> mask);

// ---- finite-difference gradient check ----
struct GradCheckOptions {
  double eps = 1e-4;
  int samples = 64;
  std::uint64_t seed = 0;
};

// Compares analytic gradients of `f` against central differences on randomly
// sampled coordinates of `params`. Returns max |a - n| / max(1, |a|, |n|).
double grad_check(const std::function<Tensor()>& f, std::span<const Tensor> params,
                  const GradCheckOptions& options = {});

}  // namespace dlr::ad
