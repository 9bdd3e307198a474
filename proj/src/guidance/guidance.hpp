#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "codec/autoencoder.hpp"
#include "data/image.hpp"
#include "denoiser/unet.hpp"
#include "diffusion/diffusion.hpp"
#include "text/conditioner.hpp"

// Positive/negative guidance inside a deterministic DDIM loop, plus masked editing.
namespace pnptlab::guidance {

// z_n + gamma * (z_p - z_n); exactly z_p when gamma == 1.
template <class T>
nn::Var<T> fuse(const nn::Var<T>& z_p, const nn::Var<T>& z_n, T gamma);

// Classifier-free-guidance form (1 - s) * uncond + s * cond, an independent
// code path for the same algebra.
template <class T>
nn::Var<T> cfg_combine(const nn::Var<T>& cond, const nn::Var<T>& uncond, T s);

struct GuidanceSpec {
  std::string positive_prompt;
  std::string negative_prompt;
  double gamma = 3.0;
  int steps = 50;
  double eta = 0.0;
  std::uint64_t seed = 0;

  void validate(std::vector<std::string>* warnings = nullptr) const;
};

// Frozen inference components; all borrowed.
struct Stack {
  const diffusion::NoiseSchedule& sched;
  const denoiser::Denoiser<float>& net;
  const text::TextConditioner<float>& cond;
  const codec::Autoencoder<float>& ae;
};

// Fused noise prediction for one latent. The negative branch is skipped when
// gamma == 1 since fusion then returns the positive prediction exactly.
nn::Var<float> guided_eps(const Stack& s, const nn::Var<float>& z_t, int t, const nn::Var<float>& cond_p,
                          const nn::Var<float>& cond_n, double gamma);

// Conditioning matrices [1, L, d] for the positive and negative prompt.
std::pair<nn::Var<float>, nn::Var<float>> prompt_conditioning(const text::TextConditioner<float>& cond,
                                                             const GuidanceSpec& spec);

// Final latent of the guided DDIM chain started from seeded Gaussian noise.
nn::Var<float> sample_latent(const GuidanceSpec& spec, const Stack& s, std::vector<std::string>* warnings = nullptr);
data::Image sample(const GuidanceSpec& spec, const Stack& s, std::vector<std::string>* warnings = nullptr);

// Latent-resolution edit mask: a latent cell is editable if any pixel of its
// footprint is set.
std::vector<std::uint8_t> latent_edit_mask(const data::Mask& mask, int latent_size);

// Masked editing: noise E(image) to t0 = round(strength * T), run the guided
// chain and after every step restore unmasked latent cells from the noised
// original. An all-zero mask returns the codec round trip with a warning.
data::Image edit(const data::Image& image, const data::Mask& mask, const GuidanceSpec& spec, double strength,
                 const Stack& s, std::vector<std::string>* warnings = nullptr);

}  // namespace pnptlab::guidance
