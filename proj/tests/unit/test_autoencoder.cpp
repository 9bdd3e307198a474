#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "codec/autoencoder.hpp"
#include "data/toy_data.hpp"
#include "gradcheck.hpp"

using namespace pnptlab;
using codec::Autoencoder;
using codec::AutoencoderConfig;

namespace {
std::vector<data::Image> tiny_images(int n, std::uint64_t seed) {
  data::GrammarConfig g;
  g.image_size = 16;
  std::vector<data::Image> out;
  for (auto& it : data::generate_dataset(n, seed, g)) out.push_back(std::move(it.image));
  return out;
}
}  // namespace

TEST_CASE("encode of an all-zeros image gives a finite latent of configured shape") {
  Autoencoder<float> ae(AutoencoderConfig{}, 1);
  auto z = ae.encode(nn::Var<float>::constant({1, 3, 64, 64}, 0.0f));
  CHECK(z.shape() == nn::Shape{1, 4, 16, 16});
  for (float v : z.value()) CHECK(std::isfinite(v));
  auto x = ae.decode(z);
  CHECK(x.shape() == nn::Shape{1, 3, 64, 64});
  for (float v : x.value()) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("shape mismatches are rejected") {
  Autoencoder<float> ae(AutoencoderConfig{}, 1);
  CHECK_THROWS_AS(ae.encode(nn::Var<float>::constant({1, 3, 32, 32})), nn::ShapeError);
  CHECK_THROWS_AS(ae.decode(nn::Var<float>::constant({1, 4, 8, 8})), nn::ShapeError);
}

TEST_CASE("identity codec is an exact space-to-depth round trip") {
  AutoencoderConfig cfg;
  cfg.identity = true;
  Autoencoder<float> ae(cfg, 0);
  CHECK(ae.latent_shape() == nn::Shape{48, 16, 16});
  auto img = data::generate_dataset(1, 5)[0].image;
  auto x = data::to_tensor<float>(img);
  auto z = ae.encode(x);
  CHECK(z.shape() == nn::Shape{1, 48, 16, 16});
  // channel (c * 4 + dy) * 4 + dx holds pixel (4y + dy, 4x + dx) of channel c
  CHECK(z.data()[((static_cast<std::size_t>(1 * 4 + 2) * 4 + 3) * 16 + 5) * 16 + 7] == img.at(1, 4 * 5 + 2, 4 * 7 + 3));
  CHECK(ae.decode(z).data() == x.data());
}

TEST_CASE("decoder gradient matches central finite differences") {
  Autoencoder<double> ae(AutoencoderConfig::tiny(), 3);
  ae.set_latent_scale(1.7);
  std::mt19937_64 rng(11);
  auto z = pnptlab::testing::random_leaf({2, 2, 8, 8}, rng);
  auto target = pnptlab::testing::random_leaf({2, 3, 16, 16}, rng, 0.5, false);
  auto res = pnptlab::testing::grad_check({z}, [&] { return nn::l1_loss(ae.decode(z), target); });
  CHECK(res.analytic_norm > 0);
  CHECK(res.rel_error < 1e-3);
}

TEST_CASE("encoder and decoder weights receive gradients only when trainable") {
  Autoencoder<double> ae(AutoencoderConfig::tiny(), 3);
  std::mt19937_64 rng(2);
  auto x = pnptlab::testing::random_leaf({1, 3, 16, 16}, rng, 0.5, false);
  nn::backward(nn::l1_loss(ae.decode(ae.encode(x)), x));
  for (const auto& w : ae.params().vars()) CHECK_FALSE(w.has_grad());
  ae.set_trainable(true);
  auto ws = ae.weights();
  CHECK(ws.size() + 1 == ae.params().size());
  auto res = pnptlab::testing::grad_check(ws, [&] { return nn::l1_loss(ae.decode(ae.encode(x)), x); }, 1e-6, 6);
  CHECK(res.rel_error < 1e-3);
}

TEST_CASE("fingerprint tracks weights") {
  Autoencoder<float> a(AutoencoderConfig::tiny(), 9), b(AutoencoderConfig::tiny(), 9), c(AutoencoderConfig::tiny(), 10);
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.fingerprint() != c.fingerprint());
  b.params().vars()[3].mutable_value()[0] += 1e-3f;
  CHECK(a.fingerprint() != b.fingerprint());
  a.set_latent_scale(2.0f);
  CHECK(a.fingerprint() != c.fingerprint());
}

TEST_CASE("train_autoencoder preconditions and determinism") {
  codec::AutoencoderTrainConfig tc;
  CHECK_THROWS_AS(codec::train_autoencoder({}, AutoencoderConfig::tiny(), tc), std::invalid_argument);

  auto images = tiny_images(1000, 4);
  tc.steps = 30;
  tc.batch = 8;
  tc.l1_threshold = 10.0;
  codec::AutoencoderTrainReport r1, r2;
  auto a = codec::train_autoencoder(images, AutoencoderConfig::tiny(), tc, &r1);
  auto b = codec::train_autoencoder(images, AutoencoderConfig::tiny(), tc, &r2);
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(r1.heldout_l1 == r2.heldout_l1);
  CHECK(r1.heldout_images == 100);
  CHECK(r1.loss_curve.back().second < r1.loss_curve.front().second * 1.5);
  CHECK(a.latent_scale() == doctest::Approx(1.0 / r1.latent_std));

  tc.l1_threshold = 1e-6;
  CHECK_THROWS_AS(codec::train_autoencoder(images, AutoencoderConfig::tiny(), tc), codec::TrainingError);
}

TEST_CASE("autoencoder checkpoint round trip") {
  Autoencoder<float> ae(AutoencoderConfig::tiny(), 5);
  ae.set_latent_scale(0.37f);
  const auto path = std::filesystem::temp_directory_path() / "pnptlab_test_ae.ckpt";
  codec::save_autoencoder(ae, path);
  auto back = codec::load_autoencoder(path);
  CHECK(back.fingerprint() == ae.fingerprint());
  CHECK(back.latent_scale() == 0.37f);
  CHECK(back.config().to_json() == ae.config().to_json());
  std::filesystem::remove(path);
}
