#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "data/toy_data.hpp"
#include "nn/layers.hpp"
#include "text/conditioner.hpp"

// Evaluation suite built on one small frozen feature encoder: a perceptual
// distance, a Gram style loss, and embedding-based diversity, alignment and
// detail scores.
namespace pnptlab::metrics {

struct FeatureEncoderConfig {
  int image_size = 64;
  std::vector<int> widths{16, 32, 64, 64};  // strides 2, 2, 2, 1
  int embed_dim = 64;
  int n_shapes = 4;
  int n_colors = 6;
  int n_backgrounds = 3;
  double temperature = 0.1;  // contrastive logit scale is 1 / temperature

  nlohmann::json to_json() const;
  static FeatureEncoderConfig from_json(const nlohmann::json& j);
};

struct Activations {
  std::vector<nn::Var<float>> layers;  // post-activation conv outputs, shallow to deep
  nn::Var<float> pooled;               // [N, widths.back()]
};

struct Logits {
  nn::Var<float> shape, color, background;
};

class FeatureEncoder {
 public:
  FeatureEncoder(const FeatureEncoderConfig& cfg, text::Vocabulary vocab, std::uint64_t seed);

  const FeatureEncoderConfig& config() const { return cfg_; }
  const text::Vocabulary& vocab() const { return vocab_; }

  Activations forward(const nn::Var<float>& x) const;
  Activations forward(const std::vector<data::Image>& images) const;
  // Unit-normalized image embeddings [N, E].
  nn::Var<float> image_embedding(const Activations& a) const;
  Logits classify(const Activations& a) const;

  // Base-vocabulary words of a text; pseudo-word names and unknown words are dropped.
  std::vector<int> caption_words(const std::string& text) const;
  // Unit-normalized bag-of-words caption embeddings [M, E]; throws
  // std::invalid_argument when a text has no base-vocabulary word.
  nn::Var<float> caption_embedding(const std::vector<std::string>& texts) const;

  nn::ParamSet<float>& params() { return params_; }
  const nn::ParamSet<float>& params() const { return params_; }
  std::string fingerprint() const { return params_.fingerprint(); }

 private:
  FeatureEncoderConfig cfg_;
  text::Vocabulary vocab_;
  nn::ParamSet<float> params_;
  std::vector<nn::Conv<float>> convs_;
  nn::Linear<float> embed_, shape_head_, color_head_, bg_head_;
  nn::Var<float> words_;  // [V, E]
};

struct EncoderTrainConfig {
  int steps = 1500;
  int batch = 64;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  double holdout_fraction = 0.1;
  int log_every = 100;
};

struct EncoderTrainReport {
  std::vector<std::pair<int, double>> loss_curve;
  double shape_accuracy = 0, color_accuracy = 0, background_accuracy = 0;  // held-out
  double caption_retrieval = 0;  // held-out top-1 over the (shape, color) caption set
};

// Supervised heads plus a symmetric contrastive loss between image and
// caption embeddings; the result is frozen.
FeatureEncoder train_feature_encoder(const std::vector<data::CaptionedImage>& dataset, const text::Vocabulary& vocab,
                                     const FeatureEncoderConfig& cfg, const EncoderTrainConfig& tcfg,
                                     EncoderTrainReport* report = nullptr);

void save_feature_encoder(const FeatureEncoder& enc, const std::filesystem::path& path);
FeatureEncoder load_feature_encoder(const std::filesystem::path& path);

// Mean over layers of squared differences between normalized channel
// vectors, averaged over space. Symmetric, zero on identical inputs.
double perceptual_distance(const data::Image& a, const data::Image& b, const FeatureEncoder& enc);
// Distance of each image to one reference.
std::vector<double> perceptual_distances(const std::vector<data::Image>& images, const data::Image& reference,
                                         const FeatureEncoder& enc);

// Sum over layers of ||G(a) - G(b)||_F^2 / C^2 with G = F F^T / HW.
double style_loss(const data::Image& a, const data::Image& b, const FeatureEncoder& enc);
std::vector<double> style_losses(const std::vector<data::Image>& images, const data::Image& reference,
                                 const FeatureEncoder& enc);

// trace(cov) / d of unit-normalized image embeddings, population covariance.
double cfv(const std::vector<data::Image>& images, const FeatureEncoder& enc);
double cfv_embeddings(const std::vector<std::vector<double>>& rows);

// Mean cosine similarity between image embeddings and the caption embedding.
double cas(const std::vector<data::Image>& images, const std::string& text, const FeatureEncoder& enc);

// Not a paper metric: mean ratio of the RMS of the spatially high-passed
// deepest activations to the RMS of the shallowest ones.
double cds_standin(const std::vector<data::Image>& images, const FeatureEncoder& enc);

// Caption-probe class posteriors over every (shape, color) base class: a
// softmax of image-caption cosines at the contrastive temperature against
// "a {color} {shape}". Row-major [shape][color].
std::vector<double> class_posteriors(const data::Image& image, const FeatureEncoder& enc);

struct MetricsReport {
  double lpips_analog = 0;
  double style_loss = 0;
  double cfv = 0;
  double cas = 0;
  double cds_standin = 0;
  int n_images = 0;

  nlohmann::json to_json() const;
  static std::string csv_header();  // metric columns only
  std::string csv_values() const;
};

// lpips_analog and style_loss are means against the reference; cas uses the
// base words of `text`. Needs at least two images.
MetricsReport evaluate(const std::vector<data::Image>& images, const data::Image& reference, const std::string& text,
                       const FeatureEncoder& enc);

}  // namespace pnptlab::metrics
