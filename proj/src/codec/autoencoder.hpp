#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "data/image.hpp"
#include "nn/layers.hpp"

// Deterministic convolutional codec E / D between images and latents.
namespace pnptlab::codec {

struct AutoencoderConfig {
  int image_size = 64;
  int image_channels = 3;
  int latent_channels = 4;
  int levels = 2;                       // each level halves the resolution
  std::vector<int> widths{16, 48, 64};  // channel width at full resolution, then after each level
  // Exact space-to-depth codec; latent channels become image_channels * 4^levels.
  bool identity = false;

  int latent_size() const { return image_size >> levels; }
  int latent_depth() const { return identity ? image_channels << (2 * levels) : latent_channels; }
  void validate() const;
  nlohmann::json to_json() const;
  static AutoencoderConfig from_json(const nlohmann::json& j);
  // 16x16 images to 8x8x2 latents, for finite-difference checks.
  static AutoencoderConfig tiny();
};

template <class T>
class Autoencoder {
 public:
  Autoencoder(const AutoencoderConfig& cfg, std::uint64_t seed);

  const AutoencoderConfig& config() const { return cfg_; }
  nn::Shape latent_shape() const { return {cfg_.latent_depth(), cfg_.latent_size(), cfg_.latent_size()}; }

  // [N, C, H, W] images in [-1, 1] to [N, c, h, w] latents scaled by latent_scale.
  nn::Var<T> encode(const nn::Var<T>& x) const;
  // Inverse direction; output in [-1, 1] (tanh head) and differentiable in z.
  nn::Var<T> decode(const nn::Var<T>& z) const;

  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }
  // Every weight except the latent scale.
  std::vector<nn::Var<T>> weights() const;
  void set_trainable(bool on);

  T latent_scale() const { return scale_.item(); }
  void set_latent_scale(T s) { scale_.mutable_value()[0] = s; }
  std::string fingerprint() const { return params_.fingerprint(); }

 private:
  void check_image(const nn::Var<T>& x) const;
  void check_latent(const nn::Var<T>& z) const;

  AutoencoderConfig cfg_;
  nn::ParamSet<T> params_;
  nn::Var<T> scale_;
  nn::Conv<T> enc_in_, enc_out_, dec_in_, dec_mid_, dec_out_;
  std::vector<nn::Conv<T>> enc_down_, enc_res_, dec_up_, dec_res_;
};

struct AutoencoderTrainConfig {
  int steps = 2500;
  int batch = 16;
  double lr = 2e-3;
  double final_lr_fraction = 0.05;  // cosine decay floor
  std::uint64_t seed = 0;
  double holdout_fraction = 0.1;
  double l1_threshold = 0.05;
  int min_images = 1000;
  int log_every = 100;
};

struct AutoencoderTrainReport {
  std::vector<std::pair<int, double>> loss_curve;  // (step, mean train L1 since last log)
  double heldout_l1 = 0.0;
  double latent_std = 0.0;  // of raw latents before scaling
  int train_images = 0;
  int heldout_images = 0;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Trains on all but a held-out tail split, then fixes latent_scale so training
// latents have unit variance. Throws TrainingError if held-out L1 stays above
// the threshold; the report is filled either way.
Autoencoder<float> train_autoencoder(const std::vector<data::Image>& images, const AutoencoderConfig& cfg,
                                     const AutoencoderTrainConfig& tcfg, AutoencoderTrainReport* report = nullptr);

// Mean per-pixel |D(E(x)) - x| over the set.
double reconstruction_l1(const Autoencoder<float>& ae, const std::vector<data::Image>& images, int batch = 32);

void save_autoencoder(const Autoencoder<float>& ae, const std::filesystem::path& path);
Autoencoder<float> load_autoencoder(const std::filesystem::path& path);

}  // namespace pnptlab::codec
