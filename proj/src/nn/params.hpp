#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "nn/tensor.hpp"
#include "util/hash.hpp"

namespace pnptlab::nn {

// Ordered, named collection of the leaf tensors of one model.
template <class T>
class ParamSet {
 public:
  Var<T> add(std::string name, Shape shape, std::vector<T> data) {
    auto v = Var<T>::parameter(std::move(shape), std::move(data));
    names_.push_back(std::move(name));
    vars_.push_back(v);
    return v;
  }

  const std::vector<Var<T>>& vars() const { return vars_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return vars_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : vars_) n += v.size();
    return n;
  }

  void set_trainable(bool on) {
    for (auto& v : vars_) {
      v.set_requires_grad(on);
      v.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& v : vars_) v.zero_grad();
  }

  // Content hash over names, shapes and values.
  std::string fingerprint() const {
    util::Sha256 h;
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      h.update(names_[i]);
      const auto& s = vars_[i].shape();
      h.update(s.data(), s.size() * sizeof(int));
      h.update_values(vars_[i].value());
    }
    return h.hex();
  }

  // Copies values by position from a set with identical layout.
  template <class U>
  void copy_values_from(const ParamSet<U>& other) {
    if (other.size() != size()) throw ShapeError("copy_values_from: parameter count mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
      if (other.vars()[i].shape() != vars_[i].shape())
        throw ShapeError("copy_values_from: shape mismatch for " + names_[i]);
      auto dst = vars_[i].mutable_value();
      auto src = other.vars()[i].value();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(src[j]);
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var<T>> vars_;
};

template <class T>
std::vector<T> normal_init(std::size_t n, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(dist(rng));
  return out;
}

// He-normal for a weight with the given fan-in, scaled by `gain`.
template <class T>
std::vector<T> he_init(std::size_t n, int fan_in, std::mt19937_64& rng, double gain = 1.0) {
  return normal_init<T>(n, gain * std::sqrt(2.0 / fan_in), rng);
}

}  // namespace pnptlab::nn
