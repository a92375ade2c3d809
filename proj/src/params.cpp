#include "dlr/params.hpp"

#include <cmath>
#include <cstring>

#include "dlr/errors.hpp"

namespace dlr {

ad::Tensor ParamStore::add(const std::string& name, ad::Tensor t) {
  if (find(name) != nullptr) throw ConfigError("duplicate parameter name " + name);
  params_.push_back({name, t});
  return t;
}

ad::Tensor ParamStore::add_normal(const std::string& name, std::vector<int> shape, double stddev,
                                  std::mt19937_64& rng) {
  auto t = ad::Tensor::zeros(std::move(shape), true);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& x : t.mutable_data()) x = dist(rng);
  return add(name, t);
}

ad::Tensor ParamStore::add_constant(const std::string& name, std::vector<int> shape, double value) {
  auto t = ad::Tensor::zeros(std::move(shape), true);
  for (double& x : t.mutable_data()) x = value;
  return add(name, t);
}

const Parameter* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::vector<ad::Tensor> ParamStore::with_prefix(const std::string& prefix) const {
  std::vector<ad::Tensor> out;
  for (const auto& p : params_) {
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p.tensor);
  }
  return out;
}

void ParamStore::zero_grad() const {
  for (const auto& p : params_) p.tensor.zero_grad();
}

std::uint64_t ParamStore::checksum(const std::string& prefix) const {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& p : params_) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    for (double x : p.tensor.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &x, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

AdamW::AdamW(std::vector<ParamGroup> groups, AdamWConfig config)
    : groups_(std::move(groups)), config_(config) {
  for (const auto& g : groups_) {
    m_.emplace_back();
    v_.emplace_back();
    for (const auto& p : g.params) {
      m_.back().emplace_back(p.size(), 0.0);
      v_.back().emplace_back(p.size(), 0.0);
    }
  }
}

void AdamW::zero_grad() const {
  for (const auto& g : groups_)
    for (const auto& p : g.params) p.zero_grad();
}

double AdamW::step(double lr_scale) {
  double sq = 0.0;
  for (const auto& g : groups_)
    for (const auto& p : g.params) {
      if (!p.has_grad()) continue;
      for (double x : p.node()->grad) sq += x * x;
    }
  const double norm = std::sqrt(sq);
  const double clip = (config_.grad_clip > 0.0 && norm > config_.grad_clip) ? config_.grad_clip / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    const double lr = groups_[gi].lr * lr_scale;
    for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
      ad::Tensor p = groups_[gi].params[pi];
      auto values = p.mutable_data();
      auto& m = m_[gi][pi];
      auto& v = v_[gi][pi];
      const bool has = p.has_grad();
      const bool decay = p.rank() == 2;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double grad = has ? p.node()->grad[i] * clip : 0.0;
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * grad;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * grad * grad;
        if (decay) values[i] -= lr * config_.weight_decay * values[i];
        values[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
      }
    }
  }
  return norm;
}

double cosine_schedule(long step, long total_steps, double warmup_frac) {
  if (total_steps <= 0) return 1.0;
  const long warmup = static_cast<long>(std::ceil(warmup_frac * static_cast<double>(total_steps)));
  if (step < warmup) return static_cast<double>(step + 1) / static_cast<double>(warmup);
  const long span = std::max(1L, total_steps - warmup);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  return 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace dlr
