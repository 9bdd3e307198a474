#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "codec/autoencoder.hpp"
#include "data/toy_data.hpp"
#include "diffusion/diffusion.hpp"
#include "nn/layers.hpp"
#include "text/conditioner.hpp"

// Conditional noise predictor: a two-resolution UNet with cross-attention
// over the conditioning matrix at every level.
namespace pnptlab::denoiser {

struct DenoiserConfig {
  int latent_channels = 4;
  int latent_size = 16;
  int c0 = 64;  // width at latent resolution
  int c1 = 128; // width at half resolution
  int text_dim = 128;
  int seq_len = text::kSeqLen;
  int attn_dim = 64;
  int groups = 8;
  int temb_dim = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
  // 8x8x2 latents, d = 32.
  static DenoiserConfig tiny();
};

template <class T>
class Denoiser {
 public:
  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed);

  const DenoiserConfig& config() const { return cfg_; }

  // z_t [N, c, h, w], one timestep per sample, cond [N, L, d] -> eps_hat [N, c, h, w].
  nn::Var<T> predict_eps(const nn::Var<T>& z_t, std::span<const int> ts, const nn::Var<T>& cond) const;
  nn::Var<T> predict_eps(const nn::Var<T>& z_t, int t, const nn::Var<T>& cond) const;

  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }
  void set_trainable(bool on) { params_.set_trainable(on); }
  std::string fingerprint() const { return params_.fingerprint(); }

 private:
  struct ResBlock {
    nn::GroupNorm<T> n1, n2;
    nn::Conv<T> c1, c2, skip;
    nn::Linear<T> temb;
    bool has_skip = false;
  };
  struct AttnBlock {
    nn::GroupNorm<T> norm;
    nn::Var<T> wq, wk, wv, wo;
  };
  ResBlock make_res(const std::string& name, int in, int out, std::mt19937_64& rng);
  AttnBlock make_attn(const std::string& name, int channels, std::mt19937_64& rng);
  nn::Var<T> res(const ResBlock& b, const nn::Var<T>& x, const nn::Var<T>& temb) const;
  nn::Var<T> attn(const AttnBlock& b, const nn::Var<T>& x, const nn::Var<T>& ctx) const;

  DenoiserConfig cfg_;
  nn::ParamSet<T> params_;
  nn::Var<T> pos_;
  nn::Linear<T> t1_, t2_;
  nn::Conv<T> in_, down_, up_, out_;
  nn::GroupNorm<T> out_norm_;
  ResBlock r0_, r1_, rm_, ru_;
  AttnBlock a0_, a1_, am_, au_;
};

// Sinusoidal features of the timestep, [N, dim].
template <class T>
nn::Var<T> timestep_features(std::span<const int> ts, int dim);

using codec::TrainingError;

struct BaseTrainConfig {
  int steps = 8000;
  int batch = 32;
  double lr = 1e-3;
  double final_lr_fraction = 0.1;
  int warmup = 200;
  double cond_dropout = 0.1;
  double ema_decay = 0.999;  // 0 disables
  std::uint64_t seed = 0;
  int val_images = 256;
  int val_every = 1000;
  int log_every = 100;
};

struct BaseTrainReport {
  std::vector<std::pair<int, double>> loss_curve;  // (step, mean train loss since last log)
  std::vector<std::pair<int, double>> val_curve;   // (step, validation L_LDM)
  double eps_norm_ratio = 0.0;                     // mean ||eps_hat||^2 / numel on validation noisings
};

// Latents of a set of images through a frozen codec, [N, c, h, w].
nn::Var<float> encode_images(const codec::Autoencoder<float>& ae, const std::vector<data::Image>& images, int batch = 32);

// Validation L_LDM over fixed (t, eps) draws derived from `seed`.
double validation_loss(const Denoiser<float>& net, const text::TextConditioner<float>& cond,
                       const diffusion::NoiseSchedule& sched, const nn::Var<float>& latents,
                       const std::vector<std::string>& captions, std::uint64_t seed, double* eps_norm_ratio = nullptr);

// Jointly trains a fresh denoiser and the conditioner's base table on the
// captioned set (the last val_images items are held out), then freezes both.
Denoiser<float> train_base(const std::vector<data::CaptionedImage>& dataset, const diffusion::NoiseSchedule& sched,
                           const codec::Autoencoder<float>& ae, text::TextConditioner<float>& cond,
                           const DenoiserConfig& cfg, const BaseTrainConfig& tcfg, BaseTrainReport* report = nullptr);

// `extra` is stored verbatim in the checkpoint metadata (e.g. the schedule).
void save_denoiser(const Denoiser<float>& net, const std::filesystem::path& path, const nlohmann::json& extra = {});
Denoiser<float> load_denoiser(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

}  // namespace pnptlab::denoiser
