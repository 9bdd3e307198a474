#include <doctest.h>

#include <filesystem>

#include "denoiser/unet.hpp"
#include "gradcheck.hpp"

using namespace pnptlab;
using denoiser::Denoiser;
using denoiser::DenoiserConfig;

TEST_CASE("predict_eps preserves the latent shape for every t") {
  Denoiser<float> net(DenoiserConfig{}, 1);
  std::mt19937_64 rng(1);
  auto z = nn::Var<float>::constant({2, 4, 16, 16}, nn::normal_init<float>(2 * 4 * 256, 1.0, rng));
  auto cond = nn::Var<float>::constant({2, 16, 128}, nn::normal_init<float>(2 * 16 * 128, 1.0, rng));
  for (int t : {1, 500, 1000}) {
    auto e = net.predict_eps(z, t, cond);
    CHECK(e.shape() == z.shape());
    for (float v : e.value()) CHECK(std::isfinite(v));
  }
  CHECK_THROWS_AS(net.predict_eps(nn::Var<float>::constant({2, 4, 8, 8}), 1, cond), nn::ShapeError);
  CHECK_THROWS_AS(net.predict_eps(z, 1, nn::Var<float>::constant({2, 16, 64})), nn::ShapeError);
  std::vector<int> one{3};
  CHECK_THROWS_AS(net.predict_eps(z, one, cond), nn::ShapeError);
}

TEST_CASE("predict_eps is deterministic and sensitive to conditioning") {
  Denoiser<float> net(DenoiserConfig{}, 2);
  std::mt19937_64 rng(2);
  auto z = nn::Var<float>::constant({1, 4, 16, 16}, nn::normal_init<float>(4 * 256, 1.0, rng));
  auto c1 = nn::Var<float>::constant({1, 16, 128}, nn::normal_init<float>(16 * 128, 1.0, rng));
  auto c2 = nn::Var<float>::constant({1, 16, 128}, nn::normal_init<float>(16 * 128, 1.0, rng));
  auto a = net.predict_eps(z, 400, c1), b = net.predict_eps(z, 400, c1), c = net.predict_eps(z, 400, c2);
  CHECK(a.data() == b.data());
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a.data()[i] - c.data()[i]);
  CHECK(diff / a.size() > 0);
}

TEST_CASE("gradient with respect to conditioning matches finite differences") {
  Denoiser<double> net(DenoiserConfig::tiny(), 3);
  std::mt19937_64 rng(3);
  auto z = pnptlab::testing::random_leaf({2, 2, 8, 8}, rng, 1.0, false);
  auto cond = pnptlab::testing::random_leaf({2, 16, 32}, rng);
  std::vector<int> ts{17, 640};
  auto res = pnptlab::testing::grad_check({cond}, [&] {
    auto e = net.predict_eps(z, ts, cond);
    return nn::sum(nn::mul(e, e));
  });
  CHECK(res.analytic_norm > 0);
  CHECK(res.rel_error < 1e-4);
}

TEST_CASE("weight gradients match finite differences") {
  Denoiser<double> net(DenoiserConfig::tiny(), 4);
  net.set_trainable(true);
  std::mt19937_64 rng(4);
  auto z = pnptlab::testing::random_leaf({1, 2, 8, 8}, rng, 1.0, false);
  auto cond = pnptlab::testing::random_leaf({1, 16, 32}, rng, 1.0, false);
  auto target = pnptlab::testing::random_leaf({1, 2, 8, 8}, rng, 1.0, false);
  auto res = pnptlab::testing::grad_check(net.params().vars(),
                                          [&] { return nn::mse_loss(net.predict_eps(z, 250, cond), target); }, 1e-6, 4);
  CHECK(res.rel_error < 1e-4);
}

TEST_CASE("timestep features") {
  std::vector<int> ts{0, 10};
  auto f = denoiser::timestep_features<double>(ts, 8);
  CHECK(f.shape() == nn::Shape{2, 8});
  CHECK(f.data()[0] == 0.0);
  CHECK(f.data()[4] == 1.0);
  CHECK(f.data()[8] == doctest::Approx(std::sin(10.0)));
}

namespace {
struct TinyStack {
  std::vector<data::CaptionedImage> items;
  codec::Autoencoder<float> ae{codec::AutoencoderConfig::tiny(), 1};
  text::TextConditioner<float> cond{text::Vocabulary::toy_default(), 32, 5};
  diffusion::NoiseSchedule sched = diffusion::build_schedule(diffusion::ScheduleKind::linear, 1000, 1e-4, 2e-2);
  TinyStack() {
    data::GrammarConfig g;
    g.image_size = 16;
    items = data::generate_dataset(120, 3, g);
  }
};
}  // namespace

TEST_CASE("train_base is deterministic, freezes its outputs and leaves the table trained") {
  denoiser::BaseTrainConfig tc;
  tc.steps = 12;
  tc.batch = 4;
  tc.val_images = 20;
  tc.val_every = 6;
  tc.warmup = 2;
  TinyStack s1, s2;
  const auto table_before = s1.cond.table_fingerprint();
  denoiser::BaseTrainReport r1, r2;
  std::string fp1, fp2;
  bool converged = true;
  try {
    fp1 = denoiser::train_base(s1.items, s1.sched, s1.ae, s1.cond, DenoiserConfig::tiny(), tc, &r1).fingerprint();
    fp2 = denoiser::train_base(s2.items, s2.sched, s2.ae, s2.cond, DenoiserConfig::tiny(), tc, &r2).fingerprint();
  } catch (const denoiser::TrainingError&) {
    converged = false;
  }
  REQUIRE(r1.val_curve.size() == 2);
  CHECK(r1.val_curve == r2.val_curve);
  if (converged) {
    CHECK(fp1 == fp2);
    CHECK(s1.cond.table_fingerprint() == s2.cond.table_fingerprint());
  }
  CHECK(s1.cond.table_fingerprint() != table_before);
  CHECK_FALSE(s1.cond.table().requires_grad());
}

TEST_CASE("train_base validates its inputs") {
  TinyStack s;
  denoiser::BaseTrainConfig tc;
  tc.val_images = 500;
  CHECK_THROWS_AS(denoiser::train_base(s.items, s.sched, s.ae, s.cond, DenoiserConfig::tiny(), tc), std::invalid_argument);
  tc.val_images = 20;
  CHECK_THROWS_AS(denoiser::train_base(s.items, s.sched, s.ae, s.cond, DenoiserConfig{}, tc), std::invalid_argument);
}

TEST_CASE("denoiser checkpoint round trip keeps extra metadata") {
  Denoiser<float> net(DenoiserConfig::tiny(), 8);
  const auto path = std::filesystem::temp_directory_path() / "pnptlab_test_unet.ckpt";
  denoiser::save_denoiser(net, path, {{"schedule", "linear"}});
  nlohmann::json extra;
  auto back = denoiser::load_denoiser(path, &extra);
  CHECK(back.fingerprint() == net.fingerprint());
  CHECK(extra["schedule"] == "linear");
  std::filesystem::remove(path);
}
