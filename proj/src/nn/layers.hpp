#pragma once

#include <random>
#include <string>

#include "nn/ops.hpp"
#include "nn/params.hpp"

// Thin parameter-owning wrappers over the ops; all weights live in a ParamSet.
namespace pnptlab::nn {

template <class T>
struct Conv {
  Var<T> w, b;
  int stride = 1;
  int pad = 0;
  Var<T> operator()(const Var<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <class T>
Conv<T> make_conv(ParamSet<T>& ps, const std::string& name, int in, int out, int k, int stride, std::mt19937_64& rng,
                  double gain = 1.0) {
  Conv<T> c;
  c.w = ps.add(name + ".w", {out, in, k, k}, he_init<T>(static_cast<std::size_t>(out) * in * k * k, in * k * k, rng, gain));
  c.b = ps.add(name + ".b", {out}, std::vector<T>(static_cast<std::size_t>(out), T(0)));
  c.stride = stride;
  c.pad = k / 2;
  return c;
}

template <class T>
struct Linear {
  Var<T> w, b;
  Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }
};

template <class T>
Linear<T> make_linear(ParamSet<T>& ps, const std::string& name, int in, int out, std::mt19937_64& rng,
                      double gain = 1.0, bool bias = true) {
  Linear<T> l;
  l.w = ps.add(name + ".w", {in, out}, he_init<T>(static_cast<std::size_t>(in) * out, in, rng, gain));
  if (bias) l.b = ps.add(name + ".b", {out}, std::vector<T>(static_cast<std::size_t>(out), T(0)));
  return l;
}

template <class T>
struct GroupNorm {
  Var<T> gamma, beta;
  int groups = 1;
  Var<T> operator()(const Var<T>& x) const { return group_norm(x, gamma, beta, groups); }
};

template <class T>
GroupNorm<T> make_group_norm(ParamSet<T>& ps, const std::string& name, int channels, int groups) {
  GroupNorm<T> g;
  g.gamma = ps.add(name + ".gamma", {channels}, std::vector<T>(static_cast<std::size_t>(channels), T(1)));
  g.beta = ps.add(name + ".beta", {channels}, std::vector<T>(static_cast<std::size_t>(channels), T(0)));
  g.groups = groups;
  return g;
}

}  // namespace pnptlab::nn
