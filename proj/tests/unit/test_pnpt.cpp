#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "pnpt/trainer.hpp"

using namespace pnptlab;
using nn::Var;

namespace {

template <class T>
struct TinyStack {
  diffusion::NoiseSchedule sched = diffusion::build_schedule(diffusion::ScheduleKind::linear, 1000, 1e-4, 2e-2);
  codec::Autoencoder<T> ae{codec::AutoencoderConfig::tiny(), 1};
  denoiser::Denoiser<T> net{denoiser::DenoiserConfig::tiny(), 2};
  text::TextConditioner<T> cond{text::Vocabulary::toy_default(), 32, 5};
  TinyStack() {
    ae.set_trainable(false);
    net.set_trainable(false);
    cond.table_params().set_trainable(false);
  }
  pnpt::Components<T> comps() { return {sched, net, cond, ae}; }
};

data::Image tiny_image(std::uint64_t seed) {
  data::GrammarConfig g;
  g.image_size = 16;
  return data::generate_dataset(1, seed, g)[0].image;
}

pnpt::PNPTConfig tiny_config() {
  pnpt::PNPTConfig cfg;
  cfg.max_steps = 6;
  cfg.checkpoint_every = 3;
  cfg.preview_every = 0;
  cfg.seed = 7;
  cfg.init.kind = text::InitKind::gaussian;  // distinct positive and negative starts
  cfg.init.sigma = 0.3;
  return cfg;
}

template <class T>
std::vector<T> values(const Var<T>& v) {
  return {v.value().begin(), v.value().end()};
}

}  // namespace

TEST_CASE("an exact noise prediction maps back to the clean latent") {
  const auto sched = diffusion::build_schedule(diffusion::ScheduleKind::linear, 1000, 1e-4, 2e-2);
  std::mt19937_64 rng(3);
  const auto z0 = pnptlab::testing::random_leaf({1, 2, 8, 8}, rng, 1.0, false);
  const auto eps = pnptlab::testing::random_leaf({1, 2, 8, 8}, rng, 1.0, false);
  for (int t : {1, 250, 999}) {
    const auto zt = diffusion::q_sample(z0, t, eps, sched);
    CHECK(nn::mse_loss(diffusion::eps_to_x0(zt, t, eps, sched), z0).item() < 1e-20);
  }
}

TEST_CASE("total loss gradients match central differences on the tiny stack") {
  TinyStack<double> s;
  auto c = s.comps();
  const auto x = data::to_tensor<double>(tiny_image(4));
  const auto z0 = s.ae.encode(x).detach();
  std::mt19937_64 rng(9);
  const auto eps = pnptlab::testing::random_leaf(z0.shape(), rng, 1.0, false);

  SUBCASE("full PNPT with reconstruction") {
    const auto cfg = tiny_config();
    auto st = pnpt::begin_training<double>(cfg, c);
    for (int t : {40, 400}) {
      const auto r = pnptlab::testing::grad_check({st.positive->vectors, st.negative->vectors},
                                                  [&] { return pnpt::pnpt_loss(z0, x, t, eps, cfg, c, true).total; });
      CHECK(r.analytic_norm > 0);
      CHECK(r.rel_error < 1e-4);
    }
  }
  SUBCASE("epsilon target") {
    auto cfg = tiny_config();
    cfg.loss_target = pnpt::LossTarget::epsilon;
    auto st = pnpt::begin_training<double>(cfg, c);
    const auto r = pnptlab::testing::grad_check({st.positive->vectors, st.negative->vectors},
                                                [&] { return pnpt::pnpt_loss(z0, x, 300, eps, cfg, c, true).total; });
    CHECK(r.rel_error < 1e-4);
  }
  SUBCASE("ti-like") {
    auto cfg = tiny_config();
    cfg.ablation_mode = pnpt::AblationMode::ti_like;
    auto st = pnpt::begin_training<double>(cfg, c);
    CHECK(st.negative == nullptr);
    const auto r = pnptlab::testing::grad_check({st.positive->vectors},
                                                [&] { return pnpt::pnpt_loss(z0, x, 300, eps, cfg, c, false).total; });
    CHECK(r.rel_error < 1e-4);
  }
}

TEST_CASE("with gamma 1 the loss collapses to positive-only tuning") {
  TinyStack<double> s;
  auto c = s.comps();
  const auto x = data::to_tensor<double>(tiny_image(2));
  const auto z0 = s.ae.encode(x).detach();
  std::mt19937_64 rng(1);
  const auto eps = pnptlab::testing::random_leaf(z0.shape(), rng, 1.0, false);
  auto cfg = tiny_config();
  cfg.gamma = 1.0;
  auto st = pnpt::begin_training<double>(cfg, c);
  auto ti = cfg;
  ti.ablation_mode = pnpt::AblationMode::ti_like;
  for (int t : {10, 500, 990}) {
    const auto full = pnpt::pnpt_loss(z0, x, t, eps, cfg, c, false);
    const auto pos = pnpt::pnpt_loss(z0, x, t, eps, ti, c, false);
    CHECK(full.l_pnpt.item() == pos.l_pnpt.item());
    nn::backward(full.l_pnpt);
    const auto gp = values(Var<double>::constant(st.positive->vectors.shape(),
                                                 std::vector<double>(st.positive->vectors.grad().begin(),
                                                                     st.positive->vectors.grad().end())));
    for (double g : st.negative->vectors.grad()) CHECK(g == 0.0);
    st.positive->vectors.zero_grad();
    st.negative->vectors.zero_grad();
    nn::backward(pos.l_pnpt);
    CHECK(values(Var<double>::constant(st.positive->vectors.shape(),
                                       std::vector<double>(st.positive->vectors.grad().begin(),
                                                           st.positive->vectors.grad().end()))) == gp);
    st.positive->vectors.zero_grad();
  }
}

TEST_CASE("a zero learning rate leaves the vectors bit-identical") {
  TinyStack<float> s;
  auto c = s.comps();
  const auto x = data::to_tensor<float>(tiny_image(3));
  const auto z0 = s.ae.encode(x).detach();
  auto cfg = tiny_config();
  cfg.learning_rate = 0.0;
  auto st = pnpt::begin_training<float>(cfg, c);
  const auto p0 = values(st.positive->vectors), n0 = values(st.negative->vectors);
  const auto& log = pnpt::pnpt_step<float>(z0, x, st, cfg, c);
  CHECK(log.step == 1);
  CHECK(std::isfinite(log.total));
  CHECK(values(st.positive->vectors) == p0);
  CHECK(values(st.negative->vectors) == n0);
}

TEST_CASE("training touches only the pseudo-word vectors") {
  TinyStack<float> s;
  auto c = s.comps();
  const auto before = pnpt::fingerprints<float>(c);
  auto cfg = tiny_config();
  cfg.max_steps = 5;
  const std::vector<data::Image> ref{tiny_image(5)};
  const auto r = pnpt::train(ref, cfg, c);
  CHECK(pnpt::fingerprints<float>(c) == before);
  CHECK(r.fingerprints == before);
  CHECK(r.history.size() == 5);
  CHECK(r.changed_values > 0);
  CHECK(r.changed_values <= (cfg.k_pos + cfg.k_neg) * s.cond.dim());
  REQUIRE(r.embeddings.entries.size() == 2);
  for (const auto& e : r.embeddings.entries) CHECK(e.steps == 5);
}

TEST_CASE("training is deterministic for a fixed seed and depends on it") {
  auto run = [](std::uint64_t seed) {
    TinyStack<float> s;
    auto c = s.comps();
    auto cfg = tiny_config();
    cfg.seed = seed;
    const std::vector<data::Image> ref{tiny_image(6)};
    return pnpt::train(ref, cfg, c).embeddings.entries[0].vectors;
  };
  CHECK(run(1) == run(1));
  CHECK(run(1) != run(2));
}

TEST_CASE("ti-like runs tune one word and still log reconstruction") {
  TinyStack<float> s;
  auto c = s.comps();
  auto cfg = tiny_config();
  cfg.ablation_mode = pnpt::AblationMode::ti_like;
  const std::vector<data::Image> ref{tiny_image(8)};
  const auto r = pnpt::train(ref, cfg, c);
  REQUIRE(r.embeddings.entries.size() == 1);
  CHECK(r.embeddings.entries[0].polarity == text::Polarity::positive);
  CHECK(r.changed_values <= cfg.k_pos * s.cond.dim());
  for (const auto& h : r.history) {
    CHECK(h.l_rec > 0);
    CHECK(h.total == h.l_pnpt);
  }
  CHECK(std::isfinite(pnpt::reconstruction_error(ref[0], cfg, c, 4)));
}

TEST_CASE("one-shot contract and frozen preconditions") {
  TinyStack<float> s;
  auto c = s.comps();
  const auto cfg = tiny_config();
  const std::vector<data::Image> two{tiny_image(1), tiny_image(2)};
  CHECK_THROWS_AS(pnpt::train(two, cfg, c), pnpt::PreconditionError);
  CHECK_THROWS_AS(pnpt::train(std::span<const data::Image>(), cfg, c), pnpt::PreconditionError);
  const std::vector<data::Image> wrong{data::Image::filled(3, 32, 32)};
  CHECK_THROWS_AS(pnpt::train(wrong, cfg, c), pnpt::PreconditionError);
  s.net.set_trainable(true);
  CHECK_THROWS_AS(pnpt::begin_training<float>(cfg, c), pnpt::PreconditionError);
}

TEST_CASE("non-finite losses abort and weight drift is detected") {
  TinyStack<float> s;
  auto c = s.comps();
  const auto x = data::to_tensor<float>(tiny_image(3));
  const auto z0 = s.ae.encode(x).detach();
  const auto cfg = tiny_config();
  auto st = pnpt::begin_training<float>(cfg, c);
  pnpt::verify_frozen(st, c);
  s.net.params().vars()[0].mutable_value()[0] += 1.0f;
  CHECK_THROWS_AS(pnpt::verify_frozen(st, c), pnpt::FrozenDriftError);
  st.positive->vectors.mutable_value()[0] = std::nanf("");
  CHECK_THROWS_AS(pnpt::pnpt_step<float>(z0, x, st, cfg, c), diffusion::NumericError);
}

TEST_CASE("config validation and JSON round trip") {
  pnpt::PNPTConfig cfg;
  CHECK(cfg.gamma == 3.0);
  CHECK(cfg.learning_rate == 0.0025);
  CHECK(cfg.k_pos == 3);
  CHECK(cfg.k_neg == 3);
  cfg.validate();
  auto bad = cfg;
  bad.gamma = 0;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.batch_size = 2;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.concept_name = "S*^p";
  CHECK_THROWS(bad.validate());

  cfg.gamma = 5;
  cfg.ablation_mode = pnpt::AblationMode::ti_like;
  cfg.loss_target = pnpt::LossTarget::epsilon;
  cfg.init.kind = text::InitKind::specific_word;
  cfg.init.word = "circle";
  const auto back = pnpt::PNPTConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(pnpt::PNPTConfig::from_json({{"gamma", 7.0}}).gamma == 7.0);
  CHECK_THROWS(pnpt::PNPTConfig::from_json({{"gama", 7.0}}));
  CHECK_THROWS(pnpt::PNPTConfig::from_json({{"gamma", "high"}}));
  CHECK_THROWS(pnpt::parse_ablation("none"));
}

TEST_CASE("loss smoothing windows") {
  std::vector<pnpt::StepLog> h;
  for (int i = 1; i <= 200; ++i) h.push_back({i, 1, i <= 50 ? 2.0 : (i > 180 ? 0.1 : 1.0), 0, 0, false});
  CHECK(pnpt::initial_loss(h) == 2.0);
  CHECK(pnpt::smoothed_final_loss(h) == doctest::Approx(0.1));
}

TEST_CASE("run directory layout") {
  TinyStack<float> s;
  auto c = s.comps();
  auto cfg = tiny_config();
  cfg.preview_every = 6;
  pnpt::TrainOptions opts;
  opts.run_dir = std::filesystem::temp_directory_path() / "pnptlab_test_learn";
  opts.preview_steps = 3;
  std::filesystem::remove_all(opts.run_dir);
  const std::vector<data::Image> ref{tiny_image(5)};
  const auto r = pnpt::train(ref, cfg, c, opts);
  REQUIRE(r.checkpoints.size() == 3);  // steps 0, 3, 6
  CHECK(r.checkpoints.front().filename() == "step_000000.json");
  CHECK(r.checkpoints.back().filename() == "step_000006.json");
  for (const auto& rel : r.artifacts) CHECK(std::filesystem::exists(opts.run_dir / rel));
  CHECK(std::filesystem::exists(opts.run_dir / "previews" / "step_000006.png"));
  std::ifstream csv(opts.run_dir / "loss.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "step,L_pnpt,L_rec,total");
  int rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  CHECK(rows == 6);
  const auto init = text::load_embeddings(r.checkpoints.front());
  const auto fin = text::load_embeddings(opts.run_dir / "embeddings.json");
  CHECK(fin.entries[0].vectors == r.embeddings.entries[0].vectors);
  CHECK(init.entries[0].vectors != fin.entries[0].vectors);
  std::filesystem::remove_all(opts.run_dir);
}

TEST_CASE("rectification probe grid") {
  TinyStack<float> s;
  auto c = s.comps();
  auto cfg = tiny_config();
  pnpt::TrainOptions opts;
  opts.run_dir = std::filesystem::temp_directory_path() / "pnptlab_test_probe";
  std::filesystem::remove_all(opts.run_dir);
  const std::vector<data::Image> ref{tiny_image(5)};
  const auto r = pnpt::train(ref, cfg, c, opts);
  metrics::FeatureEncoderConfig ec;
  ec.image_size = 16;
  const metrics::FeatureEncoder enc(ec, text::Vocabulary::toy_default(), 1);
  guidance::GuidanceSpec spec;
  spec.steps = 4;
  const auto init = text::load_embeddings(r.checkpoints.front());
  const auto probe = pnpt::rectification_probe(r.embeddings, {init, init, r.embeddings}, {"0", "0b", "final"}, "S*",
                                               {1, 2}, spec, ref[0], c, enc);
  REQUIRE(probe.grid.size() == 3);
  for (const auto& row : probe.grid) CHECK(row.size() == 2);
  CHECK(probe.grid[0][0] == probe.grid[1][0]);
  CHECK(probe.grid[0][1] == probe.grid[1][1]);
  CHECK(probe.mean_distance[0] == probe.mean_distance[1]);
  CHECK(probe.grid[0][0] != probe.grid[0][1]);
  CHECK_THROWS_AS(pnpt::rectification_probe(r.embeddings, {}, {}, "S*", {1}, spec, ref[0], c, enc),
                  pnpt::PreconditionError);
  CHECK_THROWS_AS(pnpt::rectification_probe(r.embeddings, {init}, {"0"}, "T*", {1}, spec, ref[0], c, enc),
                  pnpt::PreconditionError);
  std::filesystem::remove_all(opts.run_dir);
}
