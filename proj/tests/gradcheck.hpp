#pragma once

// Central finite-difference oracle for reverse-mode gradients (double only).

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "nn/ops.hpp"

namespace pnptlab::testing {

using nn::Var;

struct GradCheckResult {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs = 0.0;
  double analytic_norm = 0.0;
};

// `f` must rebuild the graph from the leaves on every call.
inline GradCheckResult grad_check(std::vector<Var<double>> leaves, const std::function<Var<double>()>& f,
                                  double h = 1e-6, std::size_t max_coords_per_leaf = 0) {
  for (auto& l : leaves) l.zero_grad();
  nn::backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    const auto g = l.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(l.size(), 0.0);
  }
  double diff2 = 0, a2 = 0, n2 = 0, max_abs = 0;
  std::mt19937_64 rng(1234);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    std::vector<std::size_t> coords(leaf.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords_per_leaf && coords.size() > max_coords_per_leaf) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_leaf);
    }
    for (std::size_t i : coords) {
      auto w = leaf.mutable_value();
      const double orig = w[i];
      w[i] = orig + h;
      const double fp = f().item();
      w[i] = orig - h;
      const double fm = f().item();
      w[i] = orig;
      const double num = (fp - fm) / (2 * h);
      const double an = analytic[li][i];
      diff2 += (an - num) * (an - num);
      a2 += an * an;
      n2 += num * num;
      max_abs = std::max(max_abs, std::abs(an - num));
    }
  }
  GradCheckResult r;
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
  r.rel_error = std::sqrt(diff2) / denom;
  r.max_abs = max_abs;
  r.analytic_norm = std::sqrt(a2);
  for (auto& l : leaves) l.zero_grad();
  return r;
}

inline Var<double> random_leaf(nn::Shape shape, std::mt19937_64& rng, double stddev = 1.0, bool grad = true) {
  std::normal_distribution<double> d(0.0, stddev);
  std::vector<double> v(nn::numel(shape));
  for (auto& x : v) x = d(rng);
  return grad ? Var<double>::parameter(std::move(shape), std::move(v)) : Var<double>::constant(std::move(shape), std::move(v));
}

}  // namespace pnptlab::testing
