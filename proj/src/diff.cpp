#include "dlr/diff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "dlr/errors.hpp"

namespace dlr::ad {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

int rows_of(const Node& n) { return n.shape.size() == 2 ? n.shape[0] : 1; }
int cols_of(const Node& n) { return n.shape.back(); }

ConstMap view(const Node& n) { return ConstMap(n.value.data(), rows_of(n), cols_of(n)); }
ConstMap grad_view(const Node& n) { return ConstMap(n.grad.data(), rows_of(n), cols_of(n)); }
MutMap grad_acc(Node& n) {
  auto& g = n.grad_buffer();
  return MutMap(g.data(), rows_of(n), cols_of(n));
}

std::size_t numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  return n;
}

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor make_op(std::vector<int> shape, std::vector<double> value,
               std::initializer_list<const Tensor*> parents, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor* p : parents) needs = needs || p->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* p : parents) node->parents.push_back(p->ptr());
    node->backward = std::move(bw);
  }
  return Tensor(std::move(node));
}

Tensor make_op_n(std::vector<int> shape, std::vector<double> value, const std::vector<Tensor>& parents,
                 std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& p : parents) node->parents.push_back(p.ptr());
    node->backward = std::move(bw);
  }
  return Tensor(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NonFinite(std::string(op) + ": non-finite input");
  }
}

Tensor unary(const Tensor& a, const std::function<double(double)>& f,
             const std::function<double(double, double)>& df) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
  return make_op(a.shape(), std::move(out), {&a}, [df](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(numel(shape), 0.0);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(std::vector<double> values, std::vector<int> shape, bool requires_grad) {
  if (values.size() != numel(shape)) {
    throw ShapeMismatch("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                        shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(values);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) { return from({v}, {1}); }

double Tensor::item() const {
  if (size() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach() const { return from(node_->value, node_->shape, false); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  const int n = a.rows();
  const int k = a.cols();
  if (static_cast<int>(row.size()) != k) {
    throw ShapeMismatch("add_row: row of " + std::to_string(row.size()) + " for " + shape_str(a.shape()));
  }
  std::vector<double> out(a.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i) * k + j] = a.at(i, j) + row[j];
  return make_op(a.shape(), std::move(out), {&a, &row}, [n, k](Node& self) {
    Node& pa = *self.parents[0];
    Node& pr = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pr.requires_grad) {
      auto& g = pr.grad_buffer();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) g[j] += self.grad[static_cast<std::size_t>(i) * k + j];
    }
  });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(c * (x + k * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
      });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (numel(shape) != a.size()) throw ShapeMismatch("reshape to " + shape_str(shape));
  return make_op(std::move(shape), a.to_vector(), {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor rows(const Tensor& a, int start, int count) {
  const int k = a.cols();
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeMismatch("rows(" + std::to_string(start) + "," + std::to_string(count) + ") of " +
                        shape_str(a.shape()));
  }
  auto d = a.data();
  std::vector<double> out(d.begin() + static_cast<std::ptrdiff_t>(start) * k,
                          d.begin() + static_cast<std::ptrdiff_t>(start + count) * k);
  return make_op({count, k}, std::move(out), {&a}, [start, k](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    const std::size_t off = static_cast<std::size_t>(start) * k;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows: no inputs");
  const int k = parts.front().cols();
  int n = 0;
  for (const auto& p : parts) {
    if (p.cols() != k) throw ShapeMismatch("concat_rows: column mismatch");
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n) * k);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_op_n({n, k}, std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += p->value.size();
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  const int n = static_cast<int>(ids.size());
  const int k = table.cols();
  const int vocab = table.rows();
  std::vector<double> out(static_cast<std::size_t>(n) * k);
  for (int i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw PositionOutOfRange("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                               std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i]) * k, k,
                out.begin() + static_cast<std::ptrdiff_t>(i) * k);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return make_op({n, k}, std::move(out), {&table}, [idv = std::move(idv), k](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (int j = 0; j < k; ++j)
        g[static_cast<std::size_t>(idv[i]) * k + j] += self.grad[i * k + j];
  });
}

Tensor replace_rows(const Tensor& base, std::span<const int> positions, const Tensor& src) {
  const int n = base.rows();
  const int k = base.cols();
  if (src.cols() != k || src.rows() != static_cast<int>(positions.size())) {
    throw ShapeMismatch("replace_rows: source " + shape_str(src.shape()) + " for " +
                        std::to_string(positions.size()) + " positions");
  }
  std::vector<std::uint8_t> taken(static_cast<std::size_t>(n), 0);
  std::vector<double> out = base.to_vector();
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const int pos = positions[i];
    if (pos < 0 || pos >= n || taken[pos]) {
      throw PositionOutOfRange("replace_rows: position " + std::to_string(pos));
    }
    taken[pos] = 1;
    std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>(i) * k, k,
                out.begin() + static_cast<std::ptrdiff_t>(pos) * k);
  }
  std::vector<int> posv(positions.begin(), positions.end());
  return make_op(base.shape(), std::move(out), {&base, &src},
                 [posv = std::move(posv), taken = std::move(taken), k](Node& self) {
                   Node& pb = *self.parents[0];
                   Node& ps = *self.parents[1];
                   if (pb.requires_grad) {
                     auto& g = pb.grad_buffer();
                     for (std::size_t r = 0; r < taken.size(); ++r) {
                       if (taken[r]) continue;
                       for (int j = 0; j < k; ++j) g[r * k + j] += self.grad[r * k + j];
                     }
                   }
                   if (ps.requires_grad) {
                     auto& g = ps.grad_buffer();
                     for (std::size_t i = 0; i < posv.size(); ++i)
                       for (int j = 0; j < k; ++j)
                         g[i * k + j] += self.grad[static_cast<std::size_t>(posv[i]) * k + j];
                   }
                 });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_op({1}, {s}, {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (double& x : g) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor mean_rows(const Tensor& a) {
  const int n = a.rows();
  const int k = a.cols();
  std::vector<double> out(k, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) out[j] += a.at(i, j);
  for (double& x : out) x /= n;
  return make_op({k}, std::move(out), {&a}, [n, k](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) g[static_cast<std::size_t>(i) * k + j] += self.grad[j] / n;
  });
}

Tensor row_sq_norm(const Tensor& a) {
  const int n = a.rows();
  const int k = a.cols();
  std::vector<double> out(n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) out[i] += a.at(i, j) * a.at(i, j);
  return make_op({n}, std::move(out), {&a}, [n, k](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * k + j;
        g[idx] += 2.0 * p.value[idx] * self.grad[i];
      }
  });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeMismatch("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return make_op({1}, {s}, {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double g0 = self.grad[0];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * pa.value[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int n = a.rows();
  const int m = b.cols();
  std::vector<double> out(static_cast<std::size_t>(n) * m);
  MutMap(out.data(), n, m).noalias() = view(*a.node()) * view(*b.node());
  return make_op({n, m}, std::move(out), {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    auto dc = grad_view(self);
    if (pa.requires_grad) grad_acc(pa).noalias() += dc * view(pb).transpose();
    if (pb.requires_grad) grad_acc(pb).noalias() += view(pa).transpose() * dc;
  });
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw ShapeMismatch("matmul_bt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  const int n = a.rows();
  const int m = b.rows();
  std::vector<double> out(static_cast<std::size_t>(n) * m);
  MutMap(out.data(), n, m).noalias() = view(*a.node()) * view(*b.node()).transpose();
  return make_op({n, m}, std::move(out), {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    auto dc = grad_view(self);
    if (pa.requires_grad) grad_acc(pa).noalias() += dc * view(pb);
    if (pb.requires_grad) grad_acc(pb).noalias() += dc.transpose() * view(pa);
  });
}

Tensor pairwise_dot(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw ShapeMismatch("pairwise_dot: widths differ");
  const int n = a.rows();
  const int m = b.rows();
  const int k = a.cols();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  std::vector<double> out(static_cast<std::size_t>(n) * m);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) s += pa[static_cast<std::size_t>(i) * k + t] * pb[static_cast<std::size_t>(j) * k + t];
      out[static_cast<std::size_t>(i) * m + j] = s;
    }
  }
  return make_op({n, m}, std::move(out), {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    auto dc = grad_view(self);
    if (pa.requires_grad) grad_acc(pa).noalias() += dc * view(pb);
    if (pb.requires_grad) grad_acc(pb).noalias() += dc.transpose() * view(pa);
  });
}

Tensor transpose(const Tensor& a) {
  const int n = a.rows();
  const int m = a.cols();
  std::vector<double> out(static_cast<std::size_t>(n) * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[static_cast<std::size_t>(j) * n + i] = a.at(i, j);
  return make_op({m, n}, std::move(out), {&a}, [n, m](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) g[static_cast<std::size_t>(i) * m + j] += self.grad[static_cast<std::size_t>(j) * n + i];
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.cols() != w.rows() || static_cast<int>(b.size()) != w.cols()) {
    throw ShapeMismatch("linear: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()) + ", b " +
                        shape_str(b.shape()));
  }
  const int n = x.rows();
  const int m = w.cols();
  std::vector<double> out(static_cast<std::size_t>(n) * m);
  MutMap y(out.data(), n, m);
  y.noalias() = view(*x.node()) * view(*w.node());
  Eigen::Map<const Eigen::RowVectorXd> bias(b.data().data(), m);
  y.rowwise() += bias;
  std::vector<int> shape = x.rank() == 1 ? std::vector<int>{m} : std::vector<int>{n, m};
  return make_op(std::move(shape), std::move(out), {&x, &w, &b}, [n, m](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    ConstMap dy(self.grad.data(), n, m);
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      MutMap(g.data(), n, pw.shape[0]).noalias() += dy * view(pw).transpose();
    }
    if (pw.requires_grad) {
      ConstMap xv(px.value.data(), n, pw.shape[0]);
      grad_acc(pw).noalias() += xv.transpose() * dy;
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      Eigen::Map<Eigen::RowVectorXd>(g.data(), m) += dy.colwise().sum();
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const int n = x.rows();
  const int k = x.cols();
  if (static_cast<int>(gain.size()) != k || static_cast<int>(bias.size()) != k) {
    throw ShapeMismatch("layer_norm: affine size mismatch");
  }
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> rstd(n);
  for (int i = 0; i < n; ++i) {
    const double* row = x.data().data() + static_cast<std::size_t>(i) * k;
    double mu = 0.0;
    for (int j = 0; j < k; ++j) mu += row[j];
    mu /= k;
    double var = 0.0;
    for (int j = 0; j < k; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= k;
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < k; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * k + j;
      xhat[idx] = (row[j] - mu) * rstd[i];
      out[idx] = xhat[idx] * gain[j] + bias[j];
    }
  }
  return make_op(x.shape(), std::move(out), {&x, &gain, &bias},
                 [n, k, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                   Node& px = *self.parents[0];
                   Node& pg = *self.parents[1];
                   Node& pb = *self.parents[2];
                   if (pg.requires_grad || pb.requires_grad) {
                     auto& gg = pg.grad_buffer();
                     auto& gb = pb.grad_buffer();
                     for (int i = 0; i < n; ++i)
                       for (int j = 0; j < k; ++j) {
                         const std::size_t idx = static_cast<std::size_t>(i) * k + j;
                         gg[j] += self.grad[idx] * xhat[idx];
                         gb[j] += self.grad[idx];
                       }
                   }
                   if (!px.requires_grad) return;
                   auto& gx = px.grad_buffer();
                   std::vector<double> dxhat(k);
                   for (int i = 0; i < n; ++i) {
                     double m1 = 0.0;
                     double m2 = 0.0;
                     for (int j = 0; j < k; ++j) {
                       const std::size_t idx = static_cast<std::size_t>(i) * k + j;
                       dxhat[j] = self.grad[idx] * pg.value[j];
                       m1 += dxhat[j];
                       m2 += dxhat[j] * xhat[idx];
                     }
                     m1 /= k;
                     m2 /= k;
                     for (int j = 0; j < k; ++j) {
                       const std::size_t idx = static_cast<std::size_t>(i) * k + j;
                       gx[idx] += rstd[i] * (dxhat[j] - m1 - xhat[idx] * m2);
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Normalization and probabilities

Tensor l2_normalize_rows(const Tensor& a, double norm_floor) {
  const int n = a.rows();
  const int k = a.cols();
  std::vector<double> out(a.size());
  std::vector<double> norms(n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += a.at(i, j) * a.at(i, j);
    const double nrm = std::sqrt(s);
    if (!(nrm > norm_floor)) {
      throw DegenerateNorm("row " + std::to_string(i) + " has norm " + std::to_string(nrm));
    }
    norms[i] = nrm;
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i) * k + j] = a.at(i, j) / nrm;
  }
  return make_op(a.shape(), std::move(out), {&a}, [n, k, norms = std::move(norms)](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * k;
      double yd = 0.0;
      for (int j = 0; j < k; ++j) yd += self.value[off + j] * self.grad[off + j];
      for (int j = 0; j < k; ++j) {
        g[off + j] += (self.grad[off + j] - self.value[off + j] * yd) / norms[i];
      }
    }
  });
}

Tensor softmax_rows(const Tensor& a) {
  const int n = a.rows();
  const int k = a.cols();
  std::vector<double> out(a.size());
  for (int i = 0; i < n; ++i) {
    auto row = softmax(a.data().subspan(static_cast<std::size_t>(i) * k, k));
    std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(i) * k);
  }
  return make_op(a.shape(), std::move(out), {&a}, [n, k](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * k;
      double s = 0.0;
      for (int j = 0; j < k; ++j) s += self.grad[off + j] * self.value[off + j];
      for (int j = 0; j < k; ++j) g[off + j] += self.value[off + j] * (self.grad[off + j] - s);
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, bool causal,
                 AttentionProbe* probe) {
  const int tq = q.rows();
  const int tk = k.rows();
  const int d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != tk || heads <= 0 || d % heads != 0) {
    throw ShapeMismatch("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                        shape_str(v.shape()) + ", heads " + std::to_string(heads));
  }
  if (causal && tq != tk) throw ShapeMismatch("attention: causal mask needs tq == tk");
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  ConstMap Q = view(*q.node());
  ConstMap K = view(*k.node());
  ConstMap Vv = view(*v.node());
  std::vector<double> probs(static_cast<std::size_t>(heads) * tq * tk);
  std::vector<double> out(static_cast<std::size_t>(tq) * d);
  MutMap O(out.data(), tq, d);
  for (int h = 0; h < heads; ++h) {
    MutMap P(probs.data() + static_cast<std::size_t>(h) * tq * tk, tq, tk);
    P.noalias() = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
    P *= inv_sqrt;
    for (int i = 0; i < tq; ++i) {
      const int limit = causal ? i + 1 : tk;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < limit; ++j) mx = std::max(mx, P(i, j));
      double s = 0.0;
      for (int j = 0; j < limit; ++j) {
        P(i, j) = std::exp(P(i, j) - mx);
        s += P(i, j);
      }
      for (int j = 0; j < limit; ++j) P(i, j) /= s;
      for (int j = limit; j < tk; ++j) P(i, j) = 0.0;
    }
    O.middleCols(h * dh, dh).noalias() = P * Vv.middleCols(h * dh, dh);
  }
  if (probe != nullptr) {
    probe->heads = heads;
    probe->tq = tq;
    probe->tk = tk;
    probe->weights = probs;
  }
  return make_op({tq, d}, std::move(out), {&q, &k, &v},
                 [probs = std::move(probs), heads, tq, tk, d, dh, inv_sqrt](Node& self) {
                   Node& pq = *self.parents[0];
                   Node& pk = *self.parents[1];
                   Node& pv = *self.parents[2];
                   ConstMap dO(self.grad.data(), tq, d);
                   ConstMap Qm = view(pq);
                   ConstMap Km = view(pk);
                   ConstMap Vm = view(pv);
                   RowMat dS(tq, tk);
                   for (int h = 0; h < heads; ++h) {
                     ConstMap P(probs.data() + static_cast<std::size_t>(h) * tq * tk, tq, tk);
                     auto dOh = dO.middleCols(h * dh, dh);
                     if (pv.requires_grad) grad_acc(pv).middleCols(h * dh, dh).noalias() += P.transpose() * dOh;
                     if (!pq.requires_grad && !pk.requires_grad) continue;
                     dS.noalias() = dOh * Vm.middleCols(h * dh, dh).transpose();
                     for (int i = 0; i < tq; ++i) {
                       double s = 0.0;
                       for (int j = 0; j < tk; ++j) s += dS(i, j) * P(i, j);
                       for (int j = 0; j < tk; ++j) dS(i, j) = P(i, j) * (dS(i, j) - s) * inv_sqrt;
                     }
                     if (pq.requires_grad)
                       grad_acc(pq).middleCols(h * dh, dh).noalias() += dS * Km.middleCols(h * dh, dh);
                     if (pk.requires_grad)
                       grad_acc(pk).middleCols(h * dh, dh).noalias() += dS.transpose() * Qm.middleCols(h * dh, dh);
                   }
                 });
}

// ---------------------------------------------------------------------------
// Losses

Tensor masked_cross_entropy(const Tensor& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> mask) {
  const int t_len = logits.rows();
  const int vocab = logits.cols();
  if (static_cast<int>(targets.size()) != t_len || mask.size() != targets.size()) {
    throw ShapeMismatch("masked_cross_entropy: " + std::to_string(t_len) + " logit rows, " +
                        std::to_string(targets.size()) + " targets, " + std::to_string(mask.size()) +
                        " mask flags");
  }
  int count = 0;
  for (int t = 0; t < t_len; ++t) {
    if (!mask[t]) continue;
    if (targets[t] < 0 || targets[t] >= vocab) {
      throw ShapeMismatch("masked_cross_entropy: target " + std::to_string(targets[t]) + " >= vocab " +
                          std::to_string(vocab));
    }
    ++count;
  }
  std::vector<double> probs;
  double loss = 0.0;
  if (count > 0) {
    probs.assign(static_cast<std::size_t>(t_len) * vocab, 0.0);
    for (int t = 0; t < t_len; ++t) {
      if (!mask[t]) continue;
      auto row = logits.data().subspan(static_cast<std::size_t>(t) * vocab, vocab);
      const double mx = *std::max_element(row.begin(), row.end());
      double s = 0.0;
      for (int j = 0; j < vocab; ++j) s += std::exp(row[j] - mx);
      const double lse = mx + std::log(s);
      loss += lse - row[targets[t]];
      for (int j = 0; j < vocab; ++j) probs[static_cast<std::size_t>(t) * vocab + j] = std::exp(row[j] - lse);
    }
    loss /= count;
  }
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return make_op({1}, {loss}, {&logits},
                 [probs = std::move(probs), tg = std::move(tg), mk = std::move(mk), count, vocab](Node& self) {
                   Node& p = *self.parents[0];
                   if (!p.requires_grad || count == 0) return;
                   auto& g = p.grad_buffer();
                   const double scale_g = self.grad[0] / count;
                   for (std::size_t t = 0; t < tg.size(); ++t) {
                     if (!mk[t]) continue;
                     const std::size_t off = t * vocab;
                     for (int j = 0; j < vocab; ++j) g[off + j] += scale_g * probs[off + j];
                     g[off + tg[t]] -= scale_g;
                   }
                 });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  std::vector<std::uint8_t> mask(targets.size(), 1);
  return masked_cross_entropy(logits, targets, mask);
}

Tensor log_softmax_pick(const Tensor& logits, std::span<const int> row_ids, std::span<const int> tokens) {
  const int vocab = logits.cols();
  const int n = static_cast<int>(row_ids.size());
  if (tokens.size() != row_ids.size()) throw ShapeMismatch("log_softmax_pick: length mismatch");
  std::vector<double> out(n);
  std::vector<double> probs(static_cast<std::size_t>(n) * vocab);
  for (int i = 0; i < n; ++i) {
    if (row_ids[i] < 0 || row_ids[i] >= logits.rows() || tokens[i] < 0 || tokens[i] >= vocab) {
      throw ShapeMismatch("log_softmax_pick: index out of range");
    }
    auto row = logits.data().subspan(static_cast<std::size_t>(row_ids[i]) * vocab, vocab);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (int j = 0; j < vocab; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    out[i] = row[tokens[i]] - lse;
    for (int j = 0; j < vocab; ++j) probs[static_cast<std::size_t>(i) * vocab + j] = std::exp(row[j] - lse);
  }
  std::vector<int> rv(row_ids.begin(), row_ids.end());
  std::vector<int> tv(tokens.begin(), tokens.end());
  return make_op({n}, std::move(out), {&logits},
                 [rv = std::move(rv), tv = std::move(tv), probs = std::move(probs), vocab](Node& self) {
                   Node& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = p.grad_buffer();
                   for (std::size_t i = 0; i < rv.size(); ++i) {
                     const std::size_t off = static_cast<std::size_t>(rv[i]) * vocab;
                     const double gi = self.grad[i];
                     for (int j = 0; j < vocab; ++j) g[off + j] -= gi * probs[i * vocab + j];
                     g[off + tv[i]] += gi;
                   }
                 });
}

Tensor clipped_surrogate_sum(const Tensor& log_ratio, std::span<const double> advantages, double clip_eps) {
  if (log_ratio.size() != advantages.size()) throw ShapeMismatch("clipped_surrogate_sum: length mismatch");
  const std::size_t n = advantages.size();
  std::vector<double> active(n, 0.0);  // dρ/dlog_ratio · A on the unclipped branch, else 0
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double rho = std::exp(log_ratio[i]);
    const double a = advantages[i];
    const double unclipped = rho * a;
    const double clipped = std::clamp(rho, 1.0 - clip_eps, 1.0 + clip_eps) * a;
    if (unclipped <= clipped) {
      total += unclipped;
      active[i] = rho * a;
    } else {
      total += clipped;
    }
  }
  return make_op({1}, {total}, {&log_ratio}, [active = std::move(active)](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < active.size(); ++i) g[i] += self.grad[0] * active[i];
  });
}

// ---------------------------------------------------------------------------
// Backward

void backward(const Tensor& loss) {
  if (loss.size() != 1) throw NotScalar("backward on tensor with " + std::to_string(loss.size()) + " elements");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Plain helpers

std::vector<double> l2_normalize(std::span<const double> v, double norm_floor) {
  double s = 0.0;
  for (double x : v) s += x * x;
  const double nrm = std::sqrt(s);
  if (!(nrm > norm_floor)) throw DegenerateNorm("vector norm " + std::to_string(nrm));
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / nrm;
  return out;
}

std::vector<double> softmax(std::span<const double> v) {
  check_finite(v, "softmax");
  std::vector<double> out(v.size());
  if (v.empty()) return out;
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    s += out[i];
  }
  for (double& x : out) x /= s;
  return out;
}

double masked_cross_entropy_value(std::span<const double> logits, int vocab, std::span<const int> targets,
                                  std::span<const std::uint8_t> mask) {
  NoGradGuard guard;
  const int t_len = static_cast<int>(targets.size());
  if (logits.size() != static_cast<std::size_t>(t_len) * vocab) {
    throw ShapeMismatch("masked_cross_entropy_value: logits size");
  }
  auto t = Tensor::from(std::vector<double>(logits.begin(), logits.end()), {t_len, vocab});
  return masked_cross_entropy(t, targets, mask).item();
}

// ---------------------------------------------------------------------------
// Gradient check

double grad_check(const std::function<Tensor()>& f, std::span<const Tensor> params,
                  const GradCheckOptions& options) {
  for (const auto& p : params) p.zero_grad();
  {
    Tensor loss = f();
    backward(loss);
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t pi = 0; pi < params.size(); ++pi)
    for (std::size_t j = 0; j < params[pi].size(); ++j) coords.emplace_back(pi, j);
  if (static_cast<int>(coords.size()) > options.samples) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(options.samples));
  }
  double worst = 0.0;
  NoGradGuard guard;
  for (auto [pi, j] : coords) {
    Tensor p = params[pi];
    const double analytic = p.has_grad() ? p.node()->grad[j] : 0.0;
    double& slot = p.mutable_data()[j];
    const double orig = slot;
    slot = orig + options.eps;
    const double fp = f().item();
    slot = orig - options.eps;
    const double fm = f().item();
    slot = orig;
    const double numeric = (fp - fm) / (2.0 * options.eps);
    const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  }
  return worst;
}

}  // namespace dlr::ad
