#pragma once

#include <cmath>
#include <vector>

#include "nn/tensor.hpp"

namespace pnptlab::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
};

// Adam over a fixed list of leaf tensors. Leaves without a gradient for the
// current step are left untouched.
template <class T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  long steps() const { return t_; }

  void step() {
    ++t_;
    double clip_scale = 1.0;
    if (cfg_.grad_clip > 0.0) {
      double sq = 0.0;
      for (const auto& p : params_)
        for (T g : p.grad()) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.grad_clip) clip_scale = cfg_.grad_clip / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_value();
      for (std::size_t j = 0; j < w.size(); ++j) {
        double gj = static_cast<double>(g[j]) * clip_scale;
        if (cfg_.weight_decay > 0.0) gj += cfg_.weight_decay * w[j];
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * gj;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * gj * gj;
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        w[j] = static_cast<T>(w[j] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
      p.zero_grad();
    }
  }

 private:
  std::vector<Var<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace pnptlab::nn
