#include "guidance/guidance.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace pnptlab::guidance {

using nn::Var;

template <class T>
Var<T> fuse(const Var<T>& z_p, const Var<T>& z_n, T gamma) {
  if (z_p.shape() != z_n.shape())
    throw nn::ShapeError("fuse: " + nn::shape_str(z_p.shape()) + " vs " + nn::shape_str(z_n.shape()));
  if (gamma == T(1)) return nn::axpby(z_p, T(1), z_n, T(0));
  return nn::add(z_n, nn::scale(nn::sub(z_p, z_n), gamma));
}

template <class T>
Var<T> cfg_combine(const Var<T>& cond, const Var<T>& uncond, T s) {
  return nn::axpby(uncond, T(1) - s, cond, s);
}

template Var<float> fuse<float>(const Var<float>&, const Var<float>&, float);
template Var<double> fuse<double>(const Var<double>&, const Var<double>&, double);
template Var<float> cfg_combine<float>(const Var<float>&, const Var<float>&, float);
template Var<double> cfg_combine<double>(const Var<double>&, const Var<double>&, double);

void GuidanceSpec::validate(std::vector<std::string>* warnings) const {
  if (steps < 1) throw std::invalid_argument("guidance: steps must be >= 1");
  if (eta < 0) throw std::invalid_argument("guidance: eta must be >= 0");
  if (!(gamma > 0)) throw std::invalid_argument("guidance: gamma must be > 0");
  if (gamma < 1 && warnings) warnings->push_back("gamma < 1 interpolates between the prompts instead of extrapolating");
}

Var<float> guided_eps(const Stack& s, const Var<float>& z_t, int t, const Var<float>& cond_p, const Var<float>& cond_n,
                      double gamma) {
  if (gamma == 1.0) return s.net.predict_eps(z_t, t, cond_p);
  const auto eps_p = s.net.predict_eps(z_t, t, cond_p);
  const auto eps_n = s.net.predict_eps(z_t, t, cond_n);
  return fuse(eps_p, eps_n, static_cast<float>(gamma));
}

std::pair<Var<float>, Var<float>> prompt_conditioning(const text::TextConditioner<float>& cond, const GuidanceSpec& spec) {
  return {cond.embed(cond.tokenize(spec.positive_prompt, text::Polarity::positive)).detach(),
          cond.embed(cond.tokenize(spec.negative_prompt, text::Polarity::negative)).detach()};
}

namespace {

Var<float> gaussian(const nn::Shape& shape, std::mt19937_64& rng) {
  return Var<float>::constant(shape, nn::normal_init<float>(nn::numel(shape), 1.0, rng));
}

nn::Shape batch1(const nn::Shape& s) { return {1, s[0], s[1], s[2]}; }

// Runs the chain over `ts` (descending, ending above 0) to 0. `after_step`
// may rewrite the latent at t_prev.
template <class F>
Var<float> run_chain(const GuidanceSpec& spec, const Stack& s, Var<float> z, const std::vector<int>& ts,
                     std::mt19937_64& rng, F&& after_step) {
  const auto [cp, cn] = prompt_conditioning(s.cond, spec);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i], t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    const auto eps = guided_eps(s, z, t, cp, cn, spec.gamma);
    std::optional<Var<float>> noise;
    if (spec.eta > 0) noise = gaussian(z.shape(), rng);
    z = diffusion::ddim_step(z, eps, t, t_prev, spec.eta, s.sched, noise);
    diffusion::require_finite(z, "guided sampling");
    after_step(z, t_prev);
  }
  return z;
}

}  // namespace

Var<float> sample_latent(const GuidanceSpec& spec, const Stack& s, std::vector<std::string>* warnings) {
  spec.validate(warnings);
  std::mt19937_64 rng(spec.seed);
  auto z = gaussian(batch1(s.ae.latent_shape()), rng);
  return run_chain(spec, s, z, diffusion::strided_timesteps(s.sched.T, spec.steps), rng, [](Var<float>&, int) {});
}

data::Image sample(const GuidanceSpec& spec, const Stack& s, std::vector<std::string>* warnings) {
  auto img = data::from_tensor(s.ae.decode(sample_latent(spec, s, warnings)));
  img.clamp();
  return img;
}

std::vector<std::uint8_t> latent_edit_mask(const data::Mask& mask, int latent_size) {
  if (mask.height % latent_size != 0 || mask.width % latent_size != 0)
    throw nn::ShapeError("edit: mask size not a multiple of the latent size");
  const int fy = mask.height / latent_size, fx = mask.width / latent_size;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(latent_size) * latent_size, 0);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.bits[static_cast<std::size_t>(y) * mask.width + x]) out[static_cast<std::size_t>(y / fy) * latent_size + x / fx] = 1;
  return out;
}

data::Image edit(const data::Image& image, const data::Mask& mask, const GuidanceSpec& spec, double strength,
                 const Stack& s, std::vector<std::string>* warnings) {
  spec.validate(warnings);
  if (mask.height != image.height || mask.width != image.width)
    throw nn::ShapeError("edit: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " does not match image " + std::to_string(image.height) + "x" + std::to_string(image.width));
  if (!(strength > 0 && strength <= 1)) throw std::invalid_argument("edit: strength must be in (0, 1]");
  const auto z0 = s.ae.encode(data::to_tensor<float>(image));
  if (!mask.any()) {
    if (warnings) warnings->push_back("edit: mask is empty; returning the codec round trip");
    auto img = data::from_tensor(s.ae.decode(z0));
    img.clamp();
    return img;
  }
  const int t0 = std::max(1, static_cast<int>(std::lround(strength * s.sched.T)));
  std::vector<int> ts{t0};
  for (int t : diffusion::strided_timesteps(s.sched.T, spec.steps))
    if (t < t0) ts.push_back(t);

  const auto ls = s.ae.latent_shape();
  const auto editable = latent_edit_mask(mask, ls[1]);
  const std::size_t plane = editable.size();
  std::mt19937_64 rng(spec.seed);
  auto z = diffusion::q_sample<float>(z0, t0, gaussian(z0.shape(), rng), s.sched);
  z = run_chain(spec, s, z, ts, rng, [&](Var<float>& zp, int t_prev) {
    Var<float> orig = t_prev == 0 ? z0 : diffusion::q_sample<float>(z0, t_prev, gaussian(z0.shape(), rng), s.sched);
    auto dst = zp.mutable_value();
    for (std::size_t i = 0; i < dst.size(); ++i)
      if (!editable[i % plane]) dst[i] = orig.value()[i];
  });
  auto img = data::from_tensor(s.ae.decode(z));
  img.clamp();
  return img;
}

}  // namespace pnptlab::guidance
