#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nn/ops.hpp"

// Discrete-time DDPM arithmetic with epsilon-prediction. Timesteps are
// 1-based: t in [1, T]; t = 0 denotes the clean latent (alpha_bar = 1).
namespace pnptlab::diffusion {

class RangeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ScheduleKind { linear, cosine };

ScheduleKind parse_schedule_kind(const std::string& s);
std::string to_string(ScheduleKind k);

struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  int T = 0;
  std::vector<double> betas;       // index t-1
  std::vector<double> alphas;      // 1 - beta
  std::vector<double> alpha_bars;  // running product

  // alpha_bar at 1-based t; alpha_bar(0) == 1.
  double alpha_bar(int t) const {
    if (t == 0) return 1.0;
    check_t(t);
    return alpha_bars[static_cast<std::size_t>(t - 1)];
  }
  void check_t(int t) const {
    if (t < 1 || t > T) throw RangeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
};

// linear: betas evenly spaced in [beta_min, beta_max].
// cosine: betas from the squared-cosine alpha_bar curve, clamped to [beta_min, beta_max].
NoiseSchedule build_schedule(ScheduleKind kind, int T, double beta_min, double beta_max);

// Evenly strided descending timesteps for a `steps`-step sampler, e.g. 50
// steps over T=1000 gives 1000, 980, ..., 20. The implied final target is 0.
std::vector<int> strided_timesteps(int T, int steps);

// Smallest alpha_bar eps_to_x0 will divide by.
inline constexpr double kMinAlphaBar = 1e-8;

template <class T>
void require_finite(const nn::Var<T>& v, const char* where) {
  for (T x : v.value())
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + where);
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, one t for the whole batch.
template <class T>
nn::Var<T> q_sample(const nn::Var<T>& z0, int t, const nn::Var<T>& eps, const NoiseSchedule& s) {
  if (z0.shape() != eps.shape())
    throw nn::ShapeError("q_sample: z0 " + nn::shape_str(z0.shape()) + " vs eps " + nn::shape_str(eps.shape()));
  s.check_t(t);
  const double ab = s.alpha_bar(t);
  return nn::axpby(z0, static_cast<T>(std::sqrt(ab)), eps, static_cast<T>(std::sqrt(1.0 - ab)));
}

// Per-sample timesteps: ts[n] applies to sample n.
template <class T>
nn::Var<T> q_sample(const nn::Var<T>& z0, std::span<const int> ts, const nn::Var<T>& eps, const NoiseSchedule& s) {
  if (z0.shape() != eps.shape())
    throw nn::ShapeError("q_sample: z0 " + nn::shape_str(z0.shape()) + " vs eps " + nn::shape_str(eps.shape()));
  std::vector<T> a(ts.size()), b(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    s.check_t(ts[i]);
    const double ab = s.alpha_bar(ts[i]);
    a[i] = static_cast<T>(std::sqrt(ab));
    b[i] = static_cast<T>(std::sqrt(1.0 - ab));
  }
  return nn::add(nn::scale_per_sample(z0, std::span<const T>(a)), nn::scale_per_sample(eps, std::span<const T>(b)));
}

// z0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t). Differentiable in
// both tensor arguments.
template <class T>
nn::Var<T> eps_to_x0(const nn::Var<T>& z_t, int t, const nn::Var<T>& eps_hat, const NoiseSchedule& s) {
  s.check_t(t);
  if (z_t.shape() != eps_hat.shape())
    throw nn::ShapeError("eps_to_x0: z_t " + nn::shape_str(z_t.shape()) + " vs eps " + nn::shape_str(eps_hat.shape()));
  const double ab = s.alpha_bar(t);
  if (ab < kMinAlphaBar)
    throw NumericError("eps_to_x0: alpha_bar(" + std::to_string(t) + ") = " + std::to_string(ab) + " below guard");
  const double inv = 1.0 / std::sqrt(ab);
  return nn::axpby(z_t, static_cast<T>(inv), eps_hat, static_cast<T>(-std::sqrt(1.0 - ab) * inv));
}

// One DDIM update from t to t_prev (t_prev = 0 returns the z0 estimate).
// `noise` is required iff eta > 0.
template <class T>
nn::Var<T> ddim_step(const nn::Var<T>& z_t, const nn::Var<T>& eps_hat, int t, int t_prev, double eta,
                     const NoiseSchedule& s, const std::optional<nn::Var<T>>& noise = std::nullopt) {
  if (t_prev >= t) throw RangeError("ddim_step: t_prev must be < t");
  if (t_prev < 0) throw RangeError("ddim_step: t_prev must be >= 0");
  if (eta < 0) throw RangeError("ddim_step: eta must be >= 0");
  if (eta > 0 && !noise) throw std::invalid_argument("ddim_step: noise required when eta > 0");
  auto x0 = eps_to_x0(z_t, t, eps_hat, s);
  if (t_prev == 0) return x0;
  const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  auto out = nn::axpby(x0, static_cast<T>(std::sqrt(ab_prev)), eps_hat, static_cast<T>(dir));
  if (eta > 0) {
    if (noise->shape() != z_t.shape()) throw nn::ShapeError("ddim_step: noise shape");
    out = nn::axpby(out, T(1), *noise, static_cast<T>(sigma));
  }
  return out;
}

}  // namespace pnptlab::diffusion
