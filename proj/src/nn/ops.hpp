#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "nn/tensor.hpp"

// Differentiable tensor ops. Image tensors are NCHW; sequences are [N, L, D].
// Every op is instantiated for float (production) and double (gradient checks).
namespace pnptlab::nn {

template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, T s);
// alpha * a + beta * b
template <class T> Var<T> axpby(const Var<T>& a, T alpha, const Var<T>& b, T beta);
// Multiplies sample n of a (leading dim N) by coeff[n].
template <class T> Var<T> scale_per_sample(const Var<T>& a, std::span<const T> coeff);

template <class T> Var<T> silu(const Var<T>& a);
template <class T> Var<T> tanh(const Var<T>& a);
template <class T> Var<T> reshape(const Var<T>& a, Shape shape);

// x [N,C,H,W], w [O,C,k,k], b [O] (optional), square kernel.
template <class T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);
template <class T> Var<T> upsample_nearest2x(const Var<T>& x);
template <class T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5));
// x [N,C,H,W] + v[N,C] broadcast over space.
template <class T> Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v);
template <class T> Var<T> global_avg_pool(const Var<T>& x);
template <class T> Var<T> space_to_depth(const Var<T>& x, int factor);
template <class T> Var<T> depth_to_space(const Var<T>& x, int factor);

// x [N,In] W [In,Out] b [Out] (optional)
template <class T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
// a [N,D], b [M,D] -> a b^T [N,M]
template <class T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
// x [N,L,D] + pos [L,D] broadcast over N.
template <class T> Var<T> add_positional(const Var<T>& x, const Var<T>& pos);
template <class T> Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-8));

// Single-head cross-attention: queries from x [N,C,H,W], keys/values from
// ctx [N,L,D]. wq [C,dk], wk [D,dk], wv [D,dk], wo [dk,C]. Returns [N,C,H,W].
template <class T>
Var<T> cross_attention(const Var<T>& x, const Var<T>& ctx, const Var<T>& wq, const Var<T>& wk,
                       const Var<T>& wv, const Var<T>& wo);

// Row i of the output is row `index[i].second` of `sources[index[i].first]`.
// All sources share the same trailing width D. Output [index.size(), D].
template <class T>
Var<T> gather_rows(const std::vector<Var<T>>& sources, const std::vector<std::pair<int, int>>& index);

template <class T> Var<T> mse_loss(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> l1_loss(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mean(const Var<T>& a);
template <class T> Var<T> sum(const Var<T>& a);
// Mean softmax cross-entropy of logits [N,K] against integer labels.
template <class T> Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels);

// Converts a value-only tensor between precisions.
template <class To, class From>
Var<To> cast(const Var<From>& v, bool requires_grad) {
  std::vector<To> out(v.value().begin(), v.value().end());
  return requires_grad ? Var<To>::parameter(v.shape(), std::move(out)) : Var<To>::constant(v.shape(), std::move(out));
}

}  // namespace pnptlab::nn
