#include "diffusion/diffusion.hpp"

#include <algorithm>
#include <numbers>

namespace pnptlab::diffusion {

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw RangeError("unknown schedule kind '" + s + "'");
}

std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

NoiseSchedule build_schedule(ScheduleKind kind, int T, double beta_min, double beta_max) {
  if (T < 2) throw RangeError("schedule: T must be >= 2");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw RangeError("schedule: require 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.kind = kind;
  s.T = T;
  s.betas.resize(T);
  if (kind == ScheduleKind::linear) {
    for (int i = 0; i < T; ++i) s.betas[i] = beta_min + (beta_max - beta_min) * i / (T - 1);
  } else {
    constexpr double off = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / T + off) / (1.0 + off) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int i = 0; i < T; ++i) s.betas[i] = std::clamp(1.0 - f(i + 1) / f(i), beta_min, beta_max);
  }
  s.alphas.resize(T);
  s.alpha_bars.resize(T);
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    s.alphas[i] = 1.0 - s.betas[i];
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
  return s;
}

std::vector<int> strided_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw RangeError("sampler steps must be in [1, T]");
  std::vector<int> ts;
  ts.reserve(steps);
  for (int i = steps; i >= 1; --i) ts.push_back(static_cast<int>(static_cast<long long>(i) * T / steps));
  return ts;
}

}  // namespace pnptlab::diffusion
