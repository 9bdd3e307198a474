#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "metrics/metrics.hpp"

using namespace pnptlab;
using metrics::FeatureEncoder;

namespace {

FeatureEncoder untrained(std::uint64_t seed = 3) {
  return FeatureEncoder(metrics::FeatureEncoderConfig{}, text::Vocabulary::toy_default(), seed);
}

data::Image noisy(const data::Image& img, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, static_cast<float>(sigma));
  auto out = img;
  for (auto& p : out.pixels) p += n(rng);
  out.clamp();
  return out;
}

data::Image inverted(const data::Image& img) {
  auto out = img;
  for (auto& p : out.pixels) p = -p;
  return out;
}

// Swaps the 32x32 quadrants diagonally; Gram statistics of a stride-aligned
// stack are almost unchanged.
data::Image shuffle_tiles(const data::Image& img) {
  auto out = img;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) out.at(c, (y + 32) % 64, (x + 32) % 64) = img.at(c, y, x);
  return out;
}

}  // namespace

TEST_CASE("perceptual distance and style loss vanish on identical inputs and are symmetric") {
  const auto enc = untrained();
  const auto items = data::generate_dataset(4, 11);
  const auto& a = items[0].image;
  const auto& b = items[1].image;
  CHECK(metrics::perceptual_distance(a, a, enc) == 0.0);
  CHECK(metrics::style_loss(a, a, enc) == 0.0);
  CHECK(metrics::perceptual_distance(a, b, enc) == metrics::perceptual_distance(b, a, enc));
  CHECK(metrics::style_loss(a, b, enc) == metrics::style_loss(b, a, enc));
  CHECK(metrics::perceptual_distance(a, b, enc) > 0.0);
}

TEST_CASE("perceptual distance ranks a light perturbation below an inversion") {
  const auto enc = untrained();
  const auto items = data::generate_dataset(6, 5);
  for (int i = 0; i < 6; ++i) {
    const auto& x = items[static_cast<std::size_t>(i)].image;
    CHECK(metrics::perceptual_distance(x, noisy(x, 0.02, i), enc) < metrics::perceptual_distance(x, inverted(x), enc));
  }
}

TEST_CASE("style loss is far less sensitive to spatial rearrangement than to content") {
  const auto enc = untrained();
  const auto ref = data::make_reference(data::ReferenceKind::novel_texture_style, 2);
  const auto other = data::generate_dataset(1, 9)[0].image;
  CHECK(metrics::style_loss(ref, shuffle_tiles(ref), enc) < 0.25 * metrics::style_loss(ref, other, enc));
}

TEST_CASE("batched distances match the pairwise forms") {
  const auto enc = untrained();
  const auto items = data::generate_dataset(5, 8);
  std::vector<data::Image> imgs;
  for (const auto& it : items) imgs.push_back(it.image);
  const auto ref = data::make_reference(data::ReferenceKind::composite_novel_shape, 1);
  const auto pd = metrics::perceptual_distances(imgs, ref, enc);
  const auto sl = metrics::style_losses(imgs, ref, enc);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    CHECK(pd[i] == doctest::Approx(metrics::perceptual_distance(imgs[i], ref, enc)).epsilon(1e-5));
    CHECK(sl[i] == doctest::Approx(metrics::style_loss(imgs[i], ref, enc)).epsilon(1e-5));
  }
  CHECK_THROWS_AS(metrics::perceptual_distance(imgs[0], data::Image::filled(3, 32, 32), enc), nn::ShapeError);
}

TEST_CASE("cfv of orthonormal basis vectors matches the closed form") {
  for (int d : {2, 4, 16}) {
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(d), std::vector<double>(static_cast<std::size_t>(d), 0.0));
    for (int i = 0; i < d; ++i) rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1.0;
    CHECK(metrics::cfv_embeddings(rows) == doctest::Approx(static_cast<double>(d - 1) / (d * d)).epsilon(1e-12));
  }
  std::vector<std::vector<double>> same(5, {0.6, 0.8});
  CHECK(metrics::cfv_embeddings(same) == 0.0);
  CHECK_THROWS(metrics::cfv_embeddings({{1.0, 0.0}}));
}

TEST_CASE("cfv is zero for identical images and invariant to order") {
  const auto enc = untrained();
  const auto items = data::generate_dataset(6, 4);
  std::vector<data::Image> imgs;
  for (const auto& it : items) imgs.push_back(it.image);
  CHECK(metrics::cfv(std::vector<data::Image>(4, imgs[0]), enc) == 0.0);
  auto rev = imgs;
  std::reverse(rev.begin(), rev.end());
  CHECK(metrics::cfv(imgs, enc) == doctest::Approx(metrics::cfv(rev, enc)).epsilon(1e-9));
  CHECK(metrics::cfv(imgs, enc) > 0.0);
  CHECK_THROWS(metrics::cfv({imgs[0]}, enc));
}

TEST_CASE("cas is a mean cosine and rejects captions without base words") {
  const auto enc = untrained();
  const auto items = data::generate_dataset(3, 6);
  std::vector<data::Image> imgs;
  for (const auto& it : items) imgs.push_back(it.image);
  const double c = metrics::cas(imgs, "a red circle", enc);
  CHECK(c <= 1.0 + 1e-9);
  CHECK(c >= -1.0 - 1e-9);
  double manual = 0;
  for (const auto& im : imgs) manual += metrics::cas({im}, "a red circle", enc);
  CHECK(c == doctest::Approx(manual / 3).epsilon(1e-6));
  CHECK(enc.caption_words("a photo of S*^p, red") == enc.caption_words("a photo of red"));
  CHECK_THROWS(metrics::cas(imgs, "", enc));
  CHECK_THROWS(metrics::cas(imgs, "S*^p zzzz", enc));
}

TEST_CASE("cds stand-in is lower for flat images and unchanged by duplication") {
  const auto enc = untrained();
  const auto items = data::generate_dataset(4, 12);
  std::vector<data::Image> imgs, flat;
  for (const auto& it : items) imgs.push_back(it.image);
  for (float v : {-0.5f, 0.0f, 0.3f, 0.7f}) flat.push_back(data::Image::filled(3, 64, 64, v));
  CHECK(metrics::cds_standin(flat, enc) < metrics::cds_standin(imgs, enc));
  auto doubled = imgs;
  doubled.insert(doubled.end(), imgs.begin(), imgs.end());
  CHECK(metrics::cds_standin(doubled, enc) == doctest::Approx(metrics::cds_standin(imgs, enc)).epsilon(1e-9));
}

TEST_CASE("class posteriors form a distribution over shape and color") {
  const auto enc = untrained();
  const auto p = metrics::class_posteriors(data::generate_dataset(1, 1)[0].image, enc);
  REQUIRE(p.size() == 24);
  double s = 0;
  for (double v : p) {
    CHECK(v >= 0.0);
    s += v;
  }
  CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("a short training run learns and the checkpoint round trips") {
  const auto data = data::generate_dataset(480, 21);
  metrics::EncoderTrainConfig tc;
  tc.steps = 120;
  tc.batch = 32;
  tc.log_every = 40;
  tc.seed = 5;
  metrics::EncoderTrainReport rep;
  const auto enc = metrics::train_feature_encoder(data, text::Vocabulary::toy_default(), {}, tc, &rep);
  REQUIRE(rep.loss_curve.size() == 3);
  CHECK(rep.loss_curve.back().second < rep.loss_curve.front().second);
  CHECK(rep.background_accuracy > 0.6);
  CHECK(rep.color_accuracy > 1.0 / 6);

  const auto path = std::filesystem::temp_directory_path() / "pnptlab_test_encoder.ckpt";
  metrics::save_feature_encoder(enc, path);
  const auto back = metrics::load_feature_encoder(path);
  CHECK(back.fingerprint() == enc.fingerprint());
  const auto& x = data[0].image;
  const auto& y = data[1].image;
  CHECK(metrics::perceptual_distance(x, y, back) == metrics::perceptual_distance(x, y, enc));
  std::filesystem::remove(path);
}
