#include "nn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace pnptlab::nn {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// Message expressions are only evaluated on failure.
#define PNPTLAB_REQUIRE(cond, ...) \
  do {                             \
    if (!(cond)) throw ShapeError(__VA_ARGS__); \
  } while (0)

template <class T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  PNPTLAB_REQUIRE(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

template <class T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

struct ConvGeom {
  int n, c, h, w, o, k, stride, pad, ho, wo;
  int ckk() const { return c * k * k; }
  int hw_out() const { return ho * wo; }
};

// Output columns [lo, hi) read in-bounds input for kernel column offset kj.
inline void valid_cols(const ConvGeom& g, int kj, int& lo, int& hi) {
  lo = 0;
  while (lo < g.wo && lo * g.stride - g.pad + kj < 0) ++lo;
  hi = g.wo;
  while (hi > lo && (hi - 1) * g.stride - g.pad + kj >= g.w) --hi;
}

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const int P = g.hw_out();
  for (int c = 0; c < g.c; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * P;
        int lo, hi;
        valid_cols(g, kj, lo, hi);
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + ki;
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * g.h + ih) * g.w - g.pad + kj;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow] = src[ow * g.stride];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
}

template <class T>
void col2im(const T* cols, const ConvGeom& g, T* dx) {
  const int P = g.hw_out();
  for (int c = 0; c < g.c; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * P;
        int lo, hi;
        valid_cols(g, kj, lo, hi);
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.h) continue;
          T* dst = dx + (static_cast<std::size_t>(c) * g.h + ih) * g.w - g.pad + kj;
          const T* src = row + oh * g.wo;
          for (int ow = lo; ow < hi; ++ow) dst[ow * g.stride] += src[ow];
        }
      }
}

template <class T>
T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

}  // namespace

template <class T>
void backward(const Var<T>& root) {
  if (root.size() != 1) throw ShapeError("backward() requires a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return axpby(a, T(1), b, T(1));
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return axpby(a, T(1), b, T(-1));
}

template <class T>
Var<T> axpby(const Var<T>& a, T alpha, const Var<T>& b, T beta) {
  require_same(a, b, "axpby");
  std::vector<T> out(a.size());
  auto av = a.value();
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * av[i] + beta * bv[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [alpha, beta](Node<T>& self) {
    if (auto ga = parent_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += alpha * self.grad[i];
    if (auto gb = parent_grad(self, 1); !gb.empty())
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += beta * self.grad[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto ga = parent_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += bv[i] * self.grad[i];
    if (auto gb = parent_grad(self, 1); !gb.empty())
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += av[i] * self.grad[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a.value()[i];
  return make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * self.grad[i];
  });
}

template <class T>
Var<T> scale_per_sample(const Var<T>& a, std::span<const T> coeff) {
  PNPTLAB_REQUIRE(a.rank() >= 1 && static_cast<std::size_t>(a.dim(0)) == coeff.size(), "scale_per_sample: coeff count");
  const std::size_t per = a.size() / coeff.size();
  std::vector<T> c(coeff.begin(), coeff.end());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c[i / per] * a.value()[i];
  return make_result<T>(a.shape(), std::move(out), {a}, [c = std::move(c), per](Node<T>& self) {
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c[i / per] * self.grad[i];
  });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = a.value()[i];
    out[i] = v * sigmoid(v);
  }
  return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T s = sigmoid(av[i]);
      ga[i] += self.grad[i] * s * (T(1) + av[i] * (T(1) - s));
    }
  });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.value()[i]);
  return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * (T(1) - self.value[i] * self.value[i]);
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  PNPTLAB_REQUIRE(numel(shape) == a.size(), "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return make_result<T>(std::move(shape), a.data(), {a}, [](Node<T>& self) {
    auto ga = parent_grad(self, 0);
    accumulate<T>(ga, self.grad);
  });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  PNPTLAB_REQUIRE(x.rank() == 4 && w.rank() == 4, "conv2d: expects 4-d input and weight");
  PNPTLAB_REQUIRE(w.dim(1) == x.dim(1) && w.dim(2) == w.dim(3), "conv2d: weight " + shape_str(w.shape()) +
                                                             " incompatible with input " + shape_str(x.shape()));
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  PNPTLAB_REQUIRE(g.ho > 0 && g.wo > 0, "conv2d: empty output");
  const bool has_bias = b.defined();
  if (has_bias) PNPTLAB_REQUIRE(b.size() == static_cast<std::size_t>(g.o), "conv2d: bias size");
  const bool direct = g.k == 1 && stride == 1 && pad == 0;

  const std::size_t in_per = static_cast<std::size_t>(g.c) * g.h * g.w;
  const std::size_t out_per = static_cast<std::size_t>(g.o) * g.hw_out();
  std::vector<T> out(static_cast<std::size_t>(g.n) * out_per);
  std::vector<T> cols(direct ? 0 : static_cast<std::size_t>(g.ckk()) * g.hw_out());
  CMapMat<T> W(w.value().data(), g.o, g.ckk());
  for (int n = 0; n < g.n; ++n) {
    const T* xn = x.value().data() + n * in_per;
    if (!direct) im2col(xn, g, cols.data());
    CMapMat<T> C(direct ? xn : cols.data(), g.ckk(), g.hw_out());
    MapMat<T> Y(out.data() + n * out_per, g.o, g.hw_out());
    Y.noalias() = W * C;
    if (has_bias)
      for (int o = 0; o < g.o; ++o) Y.row(o).array() += b.value()[o];
  }
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_result<T>({g.n, g.o, g.ho, g.wo}, std::move(out), std::move(inputs),
                        [g, has_bias, direct, in_per, out_per](Node<T>& self) {
    const Node<T>& xn = *self.parents[0];
    const Node<T>& wn = *self.parents[1];
    auto gx = parent_grad(self, 0);
    auto gw = parent_grad(self, 1);
    std::span<T> gb = has_bias ? parent_grad(self, 2) : std::span<T>{};
    CMapMat<T> W(wn.value.data(), g.o, g.ckk());
    std::vector<T> cols(direct ? 0 : static_cast<std::size_t>(g.ckk()) * g.hw_out());
    std::vector<T> dcols(static_cast<std::size_t>(g.ckk()) * g.hw_out());
    for (int n = 0; n < g.n; ++n) {
      CMapMat<T> dY(self.grad.data() + n * out_per, g.o, g.hw_out());
      if (!gb.empty())
        for (int o = 0; o < g.o; ++o) {
          const T* row = self.grad.data() + n * out_per + static_cast<std::size_t>(o) * g.hw_out();
          T acc = 0;
          for (int i = 0; i < g.hw_out(); ++i) acc += row[i];
          gb[o] += acc;
        }
      const T* x_n = xn.value.data() + n * in_per;
      if (!gw.empty()) {
        if (!direct) im2col(x_n, g, cols.data());
        CMapMat<T> C(direct ? x_n : cols.data(), g.ckk(), g.hw_out());
        MapMat<T> dW(gw.data(), g.o, g.ckk());
        dW.noalias() += dY * C.transpose();
      }
      if (!gx.empty()) {
        if (direct) {
          MapMat<T> dX(gx.data() + n * in_per, g.ckk(), g.hw_out());
          dX.noalias() += W.transpose() * dY;
        } else {
          MapMat<T> dC(dcols.data(), g.ckk(), g.hw_out());
          dC.noalias() = W.transpose() * dY;
          col2im(dcols.data(), g, gx.data() + n * in_per);
        }
      }
    }
  });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  PNPTLAB_REQUIRE(x.rank() == 4, "upsample: expects NCHW");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(N) * C * H * W * 4);
  const auto& xv = x.data();
  for (int p = 0; p < N * C; ++p)
    for (int i = 0; i < 2 * H; ++i)
      for (int j = 0; j < 2 * W; ++j)
        out[(static_cast<std::size_t>(p) * 2 * H + i) * 2 * W + j] = xv[(static_cast<std::size_t>(p) * H + i / 2) * W + j / 2];
  return make_result<T>({N, C, 2 * H, 2 * W}, std::move(out), {x}, [N, C, H, W](Node<T>& self) {
    auto gx = parent_grad(self, 0);
    for (int p = 0; p < N * C; ++p)
      for (int i = 0; i < 2 * H; ++i)
        for (int j = 0; j < 2 * W; ++j)
          gx[(static_cast<std::size_t>(p) * H + i / 2) * W + j / 2] +=
              self.grad[(static_cast<std::size_t>(p) * 2 * H + i) * 2 * W + j];
  });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  PNPTLAB_REQUIRE(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int N = a.dim(0);
  const std::size_t pa = a.size() / N, pb = b.size() / N;
  std::vector<T> out;
  out.reserve(a.size() + b.size());
  for (int n = 0; n < N; ++n) {
    out.insert(out.end(), a.data().begin() + n * pa, a.data().begin() + (n + 1) * pa);
    out.insert(out.end(), b.data().begin() + n * pb, b.data().begin() + (n + 1) * pb);
  }
  return make_result<T>({N, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)}, std::move(out), {a, b},
                        [N, pa, pb](Node<T>& self) {
    auto ga = parent_grad(self, 0);
    auto gb = parent_grad(self, 1);
    for (int n = 0; n < N; ++n) {
      const T* src = self.grad.data() + n * (pa + pb);
      if (!ga.empty())
        for (std::size_t i = 0; i < pa; ++i) ga[n * pa + i] += src[i];
      if (!gb.empty())
        for (std::size_t i = 0; i < pb; ++i) gb[n * pb + i] += src[pa + i];
    }
  });
}

template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps) {
  PNPTLAB_REQUIRE(x.rank() == 4, "group_norm: expects NCHW");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t HW = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  PNPTLAB_REQUIRE(groups > 0 && C % groups == 0, "group_norm: channels not divisible by groups");
  PNPTLAB_REQUIRE(gamma.size() == static_cast<std::size_t>(C) && beta.size() == static_cast<std::size_t>(C),
          "group_norm: affine size");
  const int cpg = C / groups;
  const std::size_t gsize = cpg * HW;
  std::vector<T> xhat(x.size()), out(x.size()), inv_std(static_cast<std::size_t>(N) * groups);
  const auto& xv = x.data();
  for (int n = 0; n < N; ++n)
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + gi * cpg) * HW;
      T m = 0;
      for (std::size_t i = 0; i < gsize; ++i) m += xv[off + i];
      m /= T(gsize);
      T v = 0;
      for (std::size_t i = 0; i < gsize; ++i) v += (xv[off + i] - m) * (xv[off + i] - m);
      v /= T(gsize);
      const T is = T(1) / std::sqrt(v + eps);
      inv_std[n * groups + gi] = is;
      for (std::size_t i = 0; i < gsize; ++i) {
        const int c = gi * cpg + static_cast<int>(i / HW);
        const T h = (xv[off + i] - m) * is;
        xhat[off + i] = h;
        out[off + i] = h * gamma.value()[c] + beta.value()[c];
      }
    }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [N, C, HW, groups, cpg, gsize, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
    auto gx = parent_grad(self, 0);
    auto gg = parent_grad(self, 1);
    auto gbeta = parent_grad(self, 2);
    const auto& gam = self.parents[1]->value;
    for (int n = 0; n < N; ++n)
      for (int gi = 0; gi < groups; ++gi) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + gi * cpg) * HW;
        T sum_d = 0, sum_dh = 0;
        for (std::size_t i = 0; i < gsize; ++i) {
          const int c = gi * cpg + static_cast<int>(i / HW);
          const T dy = self.grad[off + i];
          if (!gg.empty()) gg[c] += dy * xhat[off + i];
          if (!gbeta.empty()) gbeta[c] += dy;
          const T d = dy * gam[c];
          sum_d += d;
          sum_dh += d * xhat[off + i];
        }
        if (gx.empty()) continue;
        const T is = inv_std[n * groups + gi];
        const T md = sum_d / T(gsize), mdh = sum_dh / T(gsize);
        for (std::size_t i = 0; i < gsize; ++i) {
          const int c = gi * cpg + static_cast<int>(i / HW);
          const T d = self.grad[off + i] * gam[c];
          gx[off + i] += is * (d - md - xhat[off + i] * mdh);
        }
      }
  });
}

template <class T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v) {
  PNPTLAB_REQUIRE(x.rank() == 4 && v.rank() == 2 && v.dim(0) == x.dim(0) && v.dim(1) == x.dim(1),
          "add_channel_bias: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
  const std::size_t HW = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t NC = static_cast<std::size_t>(x.dim(0)) * x.dim(1);
  std::vector<T> out(x.size());
  for (std::size_t p = 0; p < NC; ++p)
    for (std::size_t i = 0; i < HW; ++i) out[p * HW + i] = x.value()[p * HW + i] + v.value()[p];
  return make_result<T>(x.shape(), std::move(out), {x, v}, [HW, NC](Node<T>& self) {
    auto gx = parent_grad(self, 0);
    auto gv = parent_grad(self, 1);
    if (!gx.empty()) accumulate<T>(gx, self.grad);
    if (!gv.empty())
      for (std::size_t p = 0; p < NC; ++p) {
        T s = 0;
        for (std::size_t i = 0; i < HW; ++i) s += self.grad[p * HW + i];
        gv[p] += s;
      }
  });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  PNPTLAB_REQUIRE(x.rank() == 4, "global_avg_pool: expects NCHW");
  const std::size_t HW = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t NC = static_cast<std::size_t>(x.dim(0)) * x.dim(1);
  std::vector<T> out(NC);
  for (std::size_t p = 0; p < NC; ++p) {
    T s = 0;
    for (std::size_t i = 0; i < HW; ++i) s += x.value()[p * HW + i];
    out[p] = s / T(HW);
  }
  return make_result<T>({x.dim(0), x.dim(1)}, std::move(out), {x}, [HW, NC](Node<T>& self) {
    auto gx = parent_grad(self, 0);
    for (std::size_t p = 0; p < NC; ++p)
      for (std::size_t i = 0; i < HW; ++i) gx[p * HW + i] += self.grad[p] / T(HW);
  });
}

namespace {
// Index map for space_to_depth: out[n, c*f*f + di*f + dj, i, j] = in[n, c, i*f+di, j*f+dj].
std::vector<std::size_t> s2d_index(int N, int C, int H, int W, int f) {
  const int Ho = H / f, Wo = W / f;
  std::vector<std::size_t> idx(static_cast<std::size_t>(N) * C * H * W);
  std::size_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int di = 0; di < f; ++di)
        for (int dj = 0; dj < f; ++dj)
          for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j)
              idx[o++] = ((static_cast<std::size_t>(n) * C + c) * H + i * f + di) * W + j * f + dj;
  return idx;
}
}  // namespace

template <class T>
Var<T> space_to_depth(const Var<T>& x, int f) {
  PNPTLAB_REQUIRE(x.rank() == 4 && f >= 1 && x.dim(2) % f == 0 && x.dim(3) % f == 0, "space_to_depth: shape/factor");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto idx = s2d_index(N, C, H, W, f);
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x.value()[idx[o]];
  return make_result<T>({N, C * f * f, H / f, W / f}, std::move(out), {x}, [idx = std::move(idx)](Node<T>& self) {
    auto gx = parent_grad(self, 0);
    for (std::size_t o = 0; o < idx.size(); ++o) gx[idx[o]] += self.grad[o];
  });
}

template <class T>
Var<T> depth_to_space(const Var<T>& x, int f) {
  PNPTLAB_REQUIRE(x.rank() == 4 && f >= 1 && x.dim(1) % (f * f) == 0, "depth_to_space: shape/factor");
  const int N = x.dim(0), C = x.dim(1) / (f * f), H = x.dim(2) * f, W = x.dim(3) * f;
  auto idx = s2d_index(N, C, H, W, f);
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[idx[o]] = x.value()[o];
  return make_result<T>({N, C, H, W}, std::move(out), {x}, [idx = std::move(idx)](Node<T>& self) {
    auto gx = parent_grad(self, 0);
    for (std::size_t o = 0; o < idx.size(); ++o) gx[o] += self.grad[idx[o]];
  });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  PNPTLAB_REQUIRE(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(0),
          "linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const int N = x.dim(0), In = w.dim(0), Out = w.dim(1);
  const bool has_bias = b.defined();
  if (has_bias) PNPTLAB_REQUIRE(b.size() == static_cast<std::size_t>(Out), "linear: bias size");
  std::vector<T> out(static_cast<std::size_t>(N) * Out);
  MapMat<T> Y(out.data(), N, Out);
  Y.noalias() = CMapMat<T>(x.value().data(), N, In) * CMapMat<T>(w.value().data(), In, Out);
  if (has_bias)
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < Out; ++o) Y(n, o) += b.value()[o];
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return make_result<T>({N, Out}, std::move(out), std::move(inputs), [N, In, Out, has_bias](Node<T>& self) {
    CMapMat<T> dY(self.grad.data(), N, Out);
    if (auto gx = parent_grad(self, 0); !gx.empty())
      MapMat<T>(gx.data(), N, In).noalias() += dY * CMapMat<T>(self.parents[1]->value.data(), In, Out).transpose();
    if (auto gw = parent_grad(self, 1); !gw.empty())
      MapMat<T>(gw.data(), In, Out).noalias() += CMapMat<T>(self.parents[0]->value.data(), N, In).transpose() * dY;
    if (has_bias)
      if (auto gb = parent_grad(self, 2); !gb.empty())
        for (int n = 0; n < N; ++n)
          for (int o = 0; o < Out; ++o) gb[o] += dY(n, o);
  });
}

template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  PNPTLAB_REQUIRE(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
          "matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const int N = a.dim(0), M = b.dim(0), D = a.dim(1);
  std::vector<T> out(static_cast<std::size_t>(N) * M);
  MapMat<T>(out.data(), N, M).noalias() = CMapMat<T>(a.value().data(), N, D) * CMapMat<T>(b.value().data(), M, D).transpose();
  return make_result<T>({N, M}, std::move(out), {a, b}, [N, M, D](Node<T>& self) {
    CMapMat<T> dY(self.grad.data(), N, M);
    if (auto ga = parent_grad(self, 0); !ga.empty())
      MapMat<T>(ga.data(), N, D).noalias() += dY * CMapMat<T>(self.parents[1]->value.data(), M, D);
    if (auto gb = parent_grad(self, 1); !gb.empty())
      MapMat<T>(gb.data(), M, D).noalias() += dY.transpose() * CMapMat<T>(self.parents[0]->value.data(), N, D);
  });
}

template <class T>
Var<T> add_positional(const Var<T>& x, const Var<T>& pos) {
  PNPTLAB_REQUIRE(x.rank() == 3 && pos.rank() == 2 && x.dim(1) == pos.dim(0) && x.dim(2) == pos.dim(1),
          "add_positional: " + shape_str(x.shape()) + " + " + shape_str(pos.shape()));
  const std::size_t per = pos.size();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] + pos.value()[i % per];
  return make_result<T>(x.shape(), std::move(out), {x, pos}, [per](Node<T>& self) {
    if (auto gx = parent_grad(self, 0); !gx.empty()) accumulate<T>(gx, self.grad);
    if (auto gp = parent_grad(self, 1); !gp.empty())
      for (std::size_t i = 0; i < self.grad.size(); ++i) gp[i % per] += self.grad[i];
  });
}

template <class T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps) {
  PNPTLAB_REQUIRE(x.rank() == 2, "l2_normalize_rows: expects [N,D]");
  const int N = x.dim(0), D = x.dim(1);
  std::vector<T> out(x.size()), norms(N);
  for (int n = 0; n < N; ++n) {
    T s = 0;
    for (int d = 0; d < D; ++d) s += x.value()[n * D + d] * x.value()[n * D + d];
    norms[n] = std::sqrt(s);
    for (int d = 0; d < D; ++d) out[n * D + d] = x.value()[n * D + d] / (norms[n] + eps);
  }
  // y = x / (r + eps):  dx = g / (r + eps) - x (g.y) / (r (r + eps))
  return make_result<T>(x.shape(), std::move(out), {x}, [N, D, eps, norms = std::move(norms)](Node<T>& self) {
    auto gx = parent_grad(self, 0);
    const auto& xv = self.parents[0]->value;
    for (int n = 0; n < N; ++n) {
      const T r = norms[n];
      T dot = 0;
      for (int d = 0; d < D; ++d) dot += self.grad[n * D + d] * self.value[n * D + d];
      const T coef = r > T(0) ? dot / (r * (r + eps)) : T(0);
      for (int d = 0; d < D; ++d) gx[n * D + d] += self.grad[n * D + d] / (r + eps) - xv[n * D + d] * coef;
    }
  });
}

template <class T>
Var<T> cross_attention(const Var<T>& x, const Var<T>& ctx, const Var<T>& wq, const Var<T>& wk, const Var<T>& wv,
                       const Var<T>& wo) {
  PNPTLAB_REQUIRE(x.rank() == 4 && ctx.rank() == 3 && ctx.dim(0) == x.dim(0), "cross_attention: input ranks / batch");
  const int N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3), L = ctx.dim(1), D = ctx.dim(2);
  PNPTLAB_REQUIRE(wq.rank() == 2 && wq.dim(0) == C, "cross_attention: wq shape " + shape_str(wq.shape()));
  const int dk = wq.dim(1);
  PNPTLAB_REQUIRE((wk.shape() == Shape{D, dk} && wv.shape() == Shape{D, dk} && wo.shape() == Shape{dk, C}),
          "cross_attention: projection shapes");
  const T sc = T(1) / std::sqrt(T(dk));
  // Saved per sample: Q [P,dk], K [L,dk], V [L,dk], A [P,L], O [P,dk].
  struct Saved {
    std::vector<T> Q, K, V, A, O;
  };
  auto saved = std::make_shared<std::vector<Saved>>(N);
  std::vector<T> out(x.size());
  CMapMat<T> Wq(wq.value().data(), C, dk), Wk(wk.value().data(), D, dk), Wv(wv.value().data(), D, dk),
      Wo(wo.value().data(), dk, C);
  for (int n = 0; n < N; ++n) {
    auto& s = (*saved)[n];
    s.Q.resize(static_cast<std::size_t>(P) * dk);
    s.K.resize(static_cast<std::size_t>(L) * dk);
    s.V.resize(static_cast<std::size_t>(L) * dk);
    s.A.resize(static_cast<std::size_t>(P) * L);
    s.O.resize(static_cast<std::size_t>(P) * dk);
    CMapMat<T> Xt(x.value().data() + static_cast<std::size_t>(n) * C * P, C, P);
    CMapMat<T> Ctx(ctx.value().data() + static_cast<std::size_t>(n) * L * D, L, D);
    MapMat<T> Q(s.Q.data(), P, dk), K(s.K.data(), L, dk), V(s.V.data(), L, dk), A(s.A.data(), P, L),
        O(s.O.data(), P, dk);
    Q.noalias() = Xt.transpose() * Wq;
    K.noalias() = Ctx * Wk;
    V.noalias() = Ctx * Wv;
    A.noalias() = (Q * K.transpose()) * sc;
    for (int p = 0; p < P; ++p) {
      T* a = s.A.data() + static_cast<std::size_t>(p) * L;
      const T m = *std::max_element(a, a + L);
      T z = 0;
      for (int l = 0; l < L; ++l) z += (a[l] = std::exp(a[l] - m));
      for (int l = 0; l < L; ++l) a[l] /= z;
    }
    O.noalias() = A * V;
    MapMat<T> Yt(out.data() + static_cast<std::size_t>(n) * C * P, C, P);
    Yt.noalias() = (O * Wo).transpose();
  }
  return make_result<T>(x.shape(), std::move(out), {x, ctx, wq, wk, wv, wo},
                        [N, C, P, L, D, dk, sc, saved](Node<T>& self) {
    auto gx = parent_grad(self, 0);
    auto gctx = parent_grad(self, 1);
    auto gwq = parent_grad(self, 2);
    auto gwk = parent_grad(self, 3);
    auto gwv = parent_grad(self, 4);
    auto gwo = parent_grad(self, 5);
    const auto& xv = self.parents[0]->value;
    const auto& cv = self.parents[1]->value;
    CMapMat<T> Wq(self.parents[2]->value.data(), C, dk), Wk(self.parents[3]->value.data(), D, dk),
        Wv(self.parents[4]->value.data(), D, dk), Wo(self.parents[5]->value.data(), dk, C);
    RowMat<T> dO, dA, dS, dQ, dK, dV;
    for (int n = 0; n < N; ++n) {
      const auto& s = (*saved)[n];
      CMapMat<T> Q(s.Q.data(), P, dk), K(s.K.data(), L, dk), V(s.V.data(), L, dk), A(s.A.data(), P, L),
          O(s.O.data(), P, dk);
      CMapMat<T> dYt(self.grad.data() + static_cast<std::size_t>(n) * C * P, C, P);
      CMapMat<T> Xt(xv.data() + static_cast<std::size_t>(n) * C * P, C, P);
      CMapMat<T> Ctx(cv.data() + static_cast<std::size_t>(n) * L * D, L, D);
      if (!gwo.empty()) MapMat<T>(gwo.data(), dk, C).noalias() += O.transpose() * dYt.transpose();
      dO.noalias() = dYt.transpose() * Wo.transpose();
      dA.noalias() = dO * V.transpose();
      dV.noalias() = A.transpose() * dO;
      dS.resize(P, L);
      for (int p = 0; p < P; ++p) {
        const T* a = s.A.data() + static_cast<std::size_t>(p) * L;
        const T* da = dA.data() + static_cast<std::size_t>(p) * L;
        T* ds = dS.data() + static_cast<std::size_t>(p) * L;
        T r = 0;
        for (int l = 0; l < L; ++l) r += da[l] * a[l];
        for (int l = 0; l < L; ++l) ds[l] = a[l] * (da[l] - r) * sc;
      }
      dQ.noalias() = dS * K;
      dK.noalias() = dS.transpose() * Q;
      if (!gwq.empty()) MapMat<T>(gwq.data(), C, dk).noalias() += Xt * dQ;
      if (!gx.empty())
        MapMat<T>(gx.data() + static_cast<std::size_t>(n) * C * P, C, P).noalias() += Wq * dQ.transpose();
      if (!gwk.empty()) MapMat<T>(gwk.data(), D, dk).noalias() += Ctx.transpose() * dK;
      if (!gwv.empty()) MapMat<T>(gwv.data(), D, dk).noalias() += Ctx.transpose() * dV;
      if (!gctx.empty()) {
        MapMat<T> dC(gctx.data() + static_cast<std::size_t>(n) * L * D, L, D);
        dC.noalias() += dK * Wk.transpose();
        dC.noalias() += dV * Wv.transpose();
      }
    }
  });
}

template <class T>
Var<T> gather_rows(const std::vector<Var<T>>& sources, const std::vector<std::pair<int, int>>& index) {
  PNPTLAB_REQUIRE(!sources.empty(), "gather_rows: no sources");
  const int D = sources[0].dim(-1);
  for (const auto& s : sources)
    PNPTLAB_REQUIRE(s.rank() == 2 && s.dim(1) == D, "gather_rows: source width mismatch " + shape_str(s.shape()));
  for (auto [src, row] : index)
    PNPTLAB_REQUIRE(src >= 0 && static_cast<std::size_t>(src) < sources.size() && row >= 0 && row < sources[src].dim(0),
            "gather_rows: index out of range");
  std::vector<T> out(index.size() * D);
  for (std::size_t i = 0; i < index.size(); ++i) {
    auto [src, row] = index[i];
    std::copy_n(sources[src].value().data() + static_cast<std::size_t>(row) * D, D, out.data() + i * D);
  }
  return make_result<T>({static_cast<int>(index.size()), D}, std::move(out), sources, [index, D](Node<T>& self) {
    for (std::size_t i = 0; i < index.size(); ++i) {
      auto [src, row] = index[i];
      auto g = parent_grad(self, static_cast<std::size_t>(src));
      if (g.empty()) continue;
      for (int d = 0; d < D; ++d) g[static_cast<std::size_t>(row) * D + d] += self.grad[i * D + d];
    }
  });
}

template <class T>
Var<T> mse_loss(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "mse_loss");
  const std::size_t n = a.size();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  return make_result<T>({}, {s / T(n)}, {a, b}, [n](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const T g = self.grad[0] * T(2) / T(n);
    if (auto ga = parent_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < n; ++i) ga[i] += g * (av[i] - bv[i]);
    if (auto gb = parent_grad(self, 1); !gb.empty())
      for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (av[i] - bv[i]);
  });
}

template <class T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
  require_same(a, b, "l1_loss");
  const std::size_t n = a.size();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(a.value()[i] - b.value()[i]);
  return make_result<T>({}, {s / T(n)}, {a, b}, [n](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const T g = self.grad[0] / T(n);
    auto sign = [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); };
    if (auto ga = parent_grad(self, 0); !ga.empty())
      for (std::size_t i = 0; i < n; ++i) ga[i] += g * sign(av[i] - bv[i]);
    if (auto gb = parent_grad(self, 1); !gb.empty())
      for (std::size_t i = 0; i < n; ++i) gb[i] -= g * sign(av[i] - bv[i]);
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value()) s += v;
  return make_result<T>({}, {s}, {a}, [](Node<T>& self) {
    auto ga = parent_grad(self, 0);
    for (auto& g : ga) g += self.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / T(a.size()));
}

template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  PNPTLAB_REQUIRE(logits.rank() == 2 && static_cast<std::size_t>(logits.dim(0)) == labels.size(), "cross_entropy: shape");
  const int N = logits.dim(0), K = logits.dim(1);
  std::vector<T> prob(logits.size());
  std::vector<int> lab(labels.begin(), labels.end());
  T loss = 0;
  for (int n = 0; n < N; ++n) {
    PNPTLAB_REQUIRE(lab[n] >= 0 && lab[n] < K, "cross_entropy: label out of range");
    const T* row = logits.value().data() + n * K;
    const T m = *std::max_element(row, row + K);
    T z = 0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
    for (int k = 0; k < K; ++k) prob[n * K + k] = std::exp(row[k] - m) / z;
    loss += -(row[lab[n]] - m - std::log(z));
  }
  return make_result<T>({}, {loss / T(N)}, {logits}, [N, K, prob = std::move(prob), lab = std::move(lab)](Node<T>& self) {
    auto g = parent_grad(self, 0);
    const T s = self.grad[0] / T(N);
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) g[n * K + k] += s * (prob[n * K + k] - (k == lab[n] ? T(1) : T(0)));
  });
}

#define PNPTLAB_INSTANTIATE(T)                                                                                     \
  template void backward<T>(const Var<T>&);                                                                        \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                            \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                            \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                            \
  template Var<T> scale<T>(const Var<T>&, T);                                                                      \
  template Var<T> axpby<T>(const Var<T>&, T, const Var<T>&, T);                                                    \
  template Var<T> scale_per_sample<T>(const Var<T>&, std::span<const T>);                                          \
  template Var<T> silu<T>(const Var<T>&);                                                                          \
  template Var<T> tanh<T>(const Var<T>&);                                                                          \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                                \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                                \
  template Var<T> upsample_nearest2x<T>(const Var<T>&);                                                            \
  template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                                                \
  template Var<T> group_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, T);                              \
  template Var<T> add_channel_bias<T>(const Var<T>&, const Var<T>&);                                               \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                                               \
  template Var<T> space_to_depth<T>(const Var<T>&, int);                                                           \
  template Var<T> depth_to_space<T>(const Var<T>&, int);                                                           \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                          \
  template Var<T> matmul_nt<T>(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> add_positional<T>(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> l2_normalize_rows<T>(const Var<T>&, T);                                                          \
  template Var<T> cross_attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&,    \
                                     const Var<T>&);                                                               \
  template Var<T> gather_rows<T>(const std::vector<Var<T>>&, const std::vector<std::pair<int, int>>&);             \
  template Var<T> mse_loss<T>(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> l1_loss<T>(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> mean<T>(const Var<T>&);                                                                          \
  template Var<T> sum<T>(const Var<T>&);                                                                           \
  template Var<T> cross_entropy<T>(const Var<T>&, std::span<const int>);

PNPTLAB_INSTANTIATE(float)
PNPTLAB_INSTANTIATE(double)

}  // namespace pnptlab::nn
