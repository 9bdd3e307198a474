// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
// Pretrained components are cached in --cache and built on first use; every
// other run is recreated under <cache>/work.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "gradcheck.hpp"
#include "harness/commands.hpp"
#include "harness/probes.hpp"
#include "util/io.hpp"

using namespace pnptlab;
using harness::CommandResult;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kRoundTripRel = 1e-5;
constexpr int kRoundTripCases = 1000;
constexpr int kVarianceDraws = 10000;
constexpr double kVarianceSigmas = 3.0;
constexpr double kGradRel = 1e-4;
constexpr int kOverfitSteps = 2000;
constexpr double kOverfitRatio = 0.1;
constexpr double kPercentile = 0.10;
constexpr int kRandomBaseImages = 200;
constexpr int kProbeSeeds = 8;
constexpr int kTrainings = 5;
constexpr int kRectifyNeeded = 4;
constexpr int kAblationNeeded = 3;
constexpr int kSweepRepetitions = 5;
constexpr int kSweepTrendNeeded = 4;
constexpr int kSweepSteps = 1000;
constexpr int kCasSamples = 50;

struct Outcome {
  int id;
  bool pass;
  std::string detail;
  double seconds;
};

// Shortest decimal that round-trips to the same double.
std::string shortest(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

class Acceptance {
 public:
  Acceptance(fs::path cache, bool verbose) : cache_(std::move(cache)), work_(cache_ / "work"), verbose_(verbose) {}

  void prepare() {
    std::error_code ec;
    fs::remove_all(work_, ec);
    fs::create_directories(work_);
    if (!fs::exists(components() / "base" / "manifest.json")) {
      log() << "building pretrained components in " << components() << " (one-time)\n";
      if (!fs::exists(components() / "ae" / "manifest.json")) run("pretrain-ae", {});
      run("pretrain-base", {});
    }
  }

  std::vector<Outcome> run_all(const std::vector<int>& only) {
    const std::vector<std::pair<int, std::function<std::pair<bool, std::string>()>>> all{
        {1, [&] { return c1_fusion(); }},        {2, [&] { return c2_forward(); }},
        {3, [&] { return c3_gradients(); }},     {4, [&] { return c4_frozen(); }},
        {5, [&] { return c5_overfit(); }},       {6, [&] { return c6_rectification(); }},
        {7, [&] { return c7_ablation(); }},      {8, [&] { return c8_determinism(); }},
        {9, [&] { return c9_metrics(); }},       {10, [&] { return c10_artifacts(); }},
    };
    std::vector<Outcome> out;
    for (const auto& [id, fn] : all) {
      if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
      const auto t0 = std::chrono::steady_clock::now();
      Outcome o{id, false, "", 0};
      try {
        std::tie(o.pass, o.detail) = fn();
      } catch (const std::exception& e) {
        o.pass = false;
        o.detail = std::string("exception: ") + e.what();
      }
      o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cout << "criterion " << std::setw(2) << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail
                << "  [" << fmt(o.seconds, 4) << " s]" << std::endl;
      out.push_back(o);
    }
    return out;
  }

  const fs::path& work() const { return work_; }

 private:
  fs::path cache_, work_;
  bool verbose_;
  std::ostringstream sink_;
  std::optional<CommandResult> overfit_;  // learn run shared by criteria 4, 5, 8, 10
  std::optional<harness::Loaded> loaded_;

  std::ostream& log() { return verbose_ ? std::cerr : static_cast<std::ostream&>(sink_); }
  fs::path components() const { return cache_ / "components"; }

  CommandResult run(const std::string& cmd, json flags) {
    flags["components"] = components().string();
    flags["log_progress"] = false;
    return harness::run_command(cmd, harness::resolve_config(nullptr, flags), verbose_ ? &std::cerr : nullptr);
  }

  harness::Loaded& loaded() {
    if (!loaded_) loaded_.emplace(harness::load_components(components()));
    return *loaded_;
  }

  static std::string reference(int k) { return "builtin:composite-novel-shape:" + std::to_string(k); }

  CommandResult learn(const std::string& name, int ref, std::uint64_t seed, const std::string& mode = "full",
                      int steps = kOverfitSteps) {
    return run("learn", {{"out", (work_ / name).string()},
                         {"reference", reference(ref)},
                         {"seed", seed},
                         {"max_steps", steps},
                         {"ablation_mode", mode}});
  }

  const CommandResult& overfit() {
    if (!overfit_) overfit_ = learn("overfit", 1, 0);
    return *overfit_;
  }

  // 1. fuse(a,b,1)=a, fuse(a,a,g)=a and 0.2+3*(0.6-0.2)=1.4, all bitwise.
  std::pair<bool, std::string> c1_fusion() {
    using V = nn::Var<double>;
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    bool ok = true;
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> a(64), b(64);
      for (auto& x : a) x = nd(rng);
      for (auto& x : b) x = nd(rng);
      const auto va = V::constant({64}, a), vb = V::constant({64}, b);
      const double g = 0.5 + 10.0 * std::abs(nd(rng));
      const auto f1 = guidance::fuse(va, vb, 1.0).data();
      const auto f2 = guidance::fuse(va, va, g).data();
      ok &= f1 == a && f2 == a;
    }
    const double ex = guidance::fuse(V::constant({1}, {0.6}), V::constant({1}, {0.2}), 3.0).item();
    ok &= ex == 1.4;
    return {ok, "identities over 100 random pairs; fuse(0.6, 0.2, 3) = " + shortest(ex) + (ex == 1.4 ? " == 1.4" : " != 1.4")};
  }

  // 2. eps_to_x0(q_sample(z0, t, eps), t, eps) == z0 and Var[q_sample] == 1 - alpha_bar.
  std::pair<bool, std::string> c2_forward() {
    const auto sched = diffusion::build_schedule(diffusion::ScheduleKind::linear, 1000, 0.00085, 0.012);
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<int> ut(1, sched.T);
    double worst = 0;
    for (int i = 0; i < kRoundTripCases; ++i) {
      const auto z0 = testing::random_leaf({1, 4, 8, 8}, rng, 1.0, false);
      const auto eps = testing::random_leaf({1, 4, 8, 8}, rng, 1.0, false);
      const int t = ut(rng);
      const auto back = diffusion::eps_to_x0(diffusion::q_sample(z0, t, eps, sched), t, eps, sched).data();
      double num = 0, den = 0;
      for (std::size_t k = 0; k < back.size(); ++k) {
        num += (back[k] - z0.value()[k]) * (back[k] - z0.value()[k]);
        den += z0.value()[k] * z0.value()[k];
      }
      worst = std::max(worst, std::sqrt(num / den));
    }
    bool var_ok = true;
    std::string var_detail;
    for (int t : {1, 100, 500, 1000}) {
      const auto z0 = nn::Var<double>::constant({kVarianceDraws}, std::vector<double>(kVarianceDraws, 0.7));
      const auto eps = testing::random_leaf({kVarianceDraws}, rng, 1.0, false);
      const auto zt = diffusion::q_sample(z0, t, eps, sched).data();
      double m = 0;
      for (double v : zt) m += v;
      m /= kVarianceDraws;
      double var = 0;
      for (double v : zt) var += (v - m) * (v - m);
      var /= (kVarianceDraws - 1);
      const double target = 1.0 - sched.alpha_bar(t);
      const double se = target * std::sqrt(2.0 / (kVarianceDraws - 1));
      const double z = std::abs(var - target) / se;
      var_ok &= z < kVarianceSigmas;
      var_detail += " t=" + std::to_string(t) + ":" + fmt(z, 3) + "se";
    }
    return {worst < kRoundTripRel && var_ok,
            "max relative round-trip error " + fmt(worst, 3) + " (< " + fmt(kRoundTripRel) + "); variance" + var_detail};
  }

  // 3. Total-loss gradients against central differences on an 8x8x2 latent, d=32 stack, in double.
  std::pair<bool, std::string> c3_gradients() {
    const auto sched = diffusion::build_schedule(diffusion::ScheduleKind::linear, 1000, 0.00085, 0.012);
    codec::Autoencoder<double> ae{codec::AutoencoderConfig::tiny(), 1};
    denoiser::Denoiser<double> net{denoiser::DenoiserConfig::tiny(), 2};
    text::TextConditioner<double> cond{text::Vocabulary::toy_default(), 32, 5};
    ae.set_trainable(false);
    net.set_trainable(false);
    cond.table_params().set_trainable(false);
    pnpt::Components<double> c{sched, net, cond, ae};
    data::GrammarConfig g;
    g.image_size = 16;
    const auto x = data::to_tensor<double>(data::generate_dataset(1, 4, g)[0].image);
    const auto z0 = ae.encode(x).detach();
    if (z0.shape() != nn::Shape{1, 2, 8, 8}) return {false, "tiny latent shape is " + nn::shape_str(z0.shape())};
    pnpt::PNPTConfig cfg;
    cfg.seed = 7;
    cfg.init.kind = text::InitKind::gaussian;
    cfg.init.sigma = 0.3;
    auto st = pnpt::begin_training<double>(cfg, c);
    std::mt19937_64 rng(31);
    const auto eps = testing::random_leaf(z0.shape(), rng, 1.0, false);
    double worst = 0;
    for (int t : {40, 400, 900}) {
      const auto r = testing::grad_check({st.positive->vectors, st.negative->vectors},
                                         [&] { return pnpt::pnpt_loss(z0, x, t, eps, cfg, c, true).total; });
      if (!(r.analytic_norm > 0)) return {false, "zero analytic gradient at t=" + std::to_string(t)};
      worst = std::max(worst, r.rel_error);
    }
    return {worst < kGradRel, "max relative error " + fmt(worst, 3) + " over t in {40, 400, 900}, " +
                                  std::to_string(2 * 3 * 32) + " coordinates each"};
  }

  // 4. Frozen fingerprints after a full learn run, at most (k+ + k-) * d changed values.
  std::pair<bool, std::string> c4_frozen() {
    const auto& r = overfit();
    auto& L = loaded();
    const auto& base = L.base_manifest.fingerprints;
    const auto& fp = r.manifest.fingerprints;
    // Reload from disk: the learn run must not have rewritten any component.
    const auto fresh = harness::load_components(components());
    const bool same = fp.at("denoiser") == base.at("denoiser") && fp.at("text_table") == base.at("text_table") &&
                      fp.at("autoencoder") == L.ae_manifest.fingerprints.at("autoencoder") &&
                      fresh.net->fingerprint() == base.at("denoiser").get<std::string>() &&
                      fresh.cond->table_fingerprint() == base.at("text_table").get<std::string>() &&
                      fresh.ae->fingerprint() == L.ae_manifest.fingerprints.at("autoencoder").get<std::string>();
    const int changed = r.manifest.results.at("changed_values").get<int>();
    const int budget = (3 + 3) * L.cond->dim();
    const int tuned = r.manifest.results.at("tuned_parameters").get<int>();
    return {same && changed > 0 && changed <= budget && tuned == budget,
            std::string("fingerprints ") + (same ? "bit-identical" : "DIFFER") + "; changed values " +
                std::to_string(changed) + " of budget " + std::to_string(budget)};
  }

  // 5. Overfit ratio and sample distance below the 10th percentile of reference-to-base distances.
  std::pair<bool, std::string> c5_overfit() {
    const auto& r = overfit();
    const double ratio = r.manifest.results.at("ratio").get<double>();
    auto& L = loaded();
    const auto ref = harness::load_reference(reference(1));
    const auto gen = run("generate", {{"out", (work_ / "overfit_samples").string()},
                                      {"embeddings", {(r.out_dir / "embeddings.json").string()}},
                                      {"gamma", 3.0},
                                      {"seed", 0},
                                      {"n_samples", 8}});
    std::vector<data::Image> samples;
    for (int i = 0; i < 8; ++i) {
      std::ostringstream name;
      name << "sample_" << std::setw(3) << std::setfill('0') << i << ".png";
      samples.push_back(data::read_png(gen.out_dir / name.str()));
    }
    const auto d = metrics::perceptual_distances(samples, ref, *L.enc);
    std::vector<data::Image> base_imgs;
    for (auto& it : data::generate_dataset(kRandomBaseImages, 505)) base_imgs.push_back(std::move(it.image));
    auto bd = metrics::perceptual_distances(base_imgs, ref, *L.enc);
    std::sort(bd.begin(), bd.end());
    const double p10 = bd[static_cast<std::size_t>(kPercentile * (bd.size() - 1))];
    const int below = static_cast<int>(std::count_if(d.begin(), d.end(), [&](double v) { return v < p10; }));
    const bool pass = ratio <= kOverfitRatio && d[0] < p10;
    return {pass, "L_pnpt ratio " + fmt(ratio, 4) + " (<= " + fmt(kOverfitRatio) + "); sample distance " +
                      fmt(d[0], 4) + " vs 10th percentile " + fmt(p10, 4) + " (" + std::to_string(below) +
                      "/8 samples below)"};
  }

  // 6. Final S*n beats init S*n on mean distance over >= 8 seeds in >= 4 of 5 trainings.
  std::pair<bool, std::string> c6_rectification() {
    int wins = 0;
    std::string detail;
    for (int k = 1; k <= kTrainings; ++k) {
      const auto lr = learn("rectify_train" + std::to_string(k), 1, static_cast<std::uint64_t>(k));
      const auto pr = run("rectify-probe", {{"out", (work_ / ("rectify_probe" + std::to_string(k))).string()},
                                            {"learn_run", lr.out_dir.string()},
                                            {"probe_seeds", kProbeSeeds},
                                            {"seed", 100}});
      const double diff = pr.manifest.results.at("init_minus_final").get<double>();
      wins += diff > 0;
      detail += " " + fmt(diff, 3);
    }
    return {wins >= kRectifyNeeded, std::to_string(wins) + "/" + std::to_string(kTrainings) +
                                        " trainings with final S*n closer (init minus final:" + detail + ")"};
  }

  // 7. Full beats ti-like on final reconstruction error on >= 3 of 5 references;
  // sweep CSV complete in every repetition, CAS trend reported.
  std::pair<bool, std::string> c7_ablation() {
    int wins = 0;
    std::string detail;
    for (int k = 1; k <= kTrainings; ++k) {
      const auto full = k == 1 ? overfit() : learn("ablation_full" + std::to_string(k), k, 0);
      const auto ti = learn("ablation_ti" + std::to_string(k), k, 0, "ti-like");
      const double ef = full.manifest.results.at("reconstruction_error").get<double>();
      const double et = ti.manifest.results.at("reconstruction_error").get<double>();
      wins += ef < et;
      detail += " " + fmt(ef, 3) + "/" + fmt(et, 3);
    }
    int complete = 0, trend = 0;
    for (int rep = 1; rep <= kSweepRepetitions; ++rep) {
      const auto sw = run("sweep-gamma", {{"out", (work_ / ("sweep" + std::to_string(rep))).string()},
                                          {"reference", reference(1)},
                                          {"seed", rep},
                                          {"sweep", {{"max_steps", kSweepSteps}}}});
      std::istringstream in(util::read_text(sw.out_dir / "table5.csv"));
      std::string line;
      std::getline(in, line);
      std::vector<std::string> settings;
      std::vector<double> cas;
      bool cols_ok = line == harness::table5_header();
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        cols_ok &= f.size() == 6;
        settings.push_back(f.at(0));
        cas.push_back(std::stod(f.back()));
      }
      const bool rows_ok = cols_ok && settings == harness::sweep_settings();
      complete += rows_ok;
      // Rows 1..4 are gamma 2, 3, 5, 7.
      if (rows_ok && cas[1] <= cas[2] && cas[2] <= cas[3] && cas[3] <= cas[4]) ++trend;
    }
    const bool pass = wins >= kAblationNeeded && complete == kSweepRepetitions;
    return {pass, "full < ti-like reconstruction error on " + std::to_string(wins) + "/" +
                      std::to_string(kTrainings) + " references (full/ti:" + detail + "); table5.csv complete in " +
                      std::to_string(complete) + "/" + std::to_string(kSweepRepetitions) +
                      "; CAS non-decreasing in gamma in " + std::to_string(trend) + "/" +
                      std::to_string(kSweepRepetitions) + " (soft, target " + std::to_string(kSweepTrendNeeded) + ")"};
  }

  // 8. generate and edit with pinned seeds give bit-identical PNGs.
  std::pair<bool, std::string> c8_determinism() {
    const auto emb = (overfit().out_dir / "embeddings.json").string();
    data::Mask mask{64, 64, std::vector<std::uint8_t>(64 * 64, 0)};
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 32; ++x) mask.bits[static_cast<std::size_t>(y * 64 + x)] = 1;
    const auto mask_path = work_ / "left_half_mask.png";
    data::write_mask_png(mask_path, mask);
    bool same = true;
    int files = 0;
    for (const char* cmd : {"generate", "edit"}) {
      CommandResult r[2];
      for (int i = 0; i < 2; ++i) {
        json f = {{"out", (work_ / ("determinism_" + std::string(cmd) + std::to_string(i))).string()},
                  {"embeddings", {emb}},
                  {"seed", 77},
                  {"n_samples", 4}};
        if (std::string(cmd) == "edit")
          f.update({{"mask", mask_path.string()}, {"strength", 0.6}, {"reference", "builtin:composite-novel-shape:2"}});
        r[i] = run(cmd, f);
      }
      same &= r[0].manifest.output_hash == r[1].manifest.output_hash;
      for (const auto& a : r[0].manifest.artifacts) {
        if (a.path.size() < 4 || a.path.substr(a.path.size() - 4) != ".png") continue;
        same &= util::read_text(r[0].out_dir / a.path) == util::read_text(r[1].out_dir / a.path);
        ++files;
      }
    }
    return {same && files == 5, std::to_string(files) + " PNGs compared byte for byte across two runs; " +
                                    (same ? "identical" : "DIFFERENT")};
  }

  // 9. CFV(identical)=0, style(x,x)=0, exact symmetry, CAS margin > 0 on the caption probe.
  std::pair<bool, std::string> c9_metrics() {
    auto& L = loaded();
    const auto& enc = *L.enc;
    std::vector<data::Image> imgs;
    for (auto& it : data::generate_dataset(24, 909)) imgs.push_back(std::move(it.image));
    imgs.push_back(harness::load_reference(reference(1)));
    const double cfv0 = metrics::cfv(std::vector<data::Image>(8, imgs[0]), enc);
    bool style0 = true, sym = true;
    for (std::size_t i = 0; i + 1 < imgs.size(); ++i) {
      style0 &= metrics::style_loss(imgs[i], imgs[i], enc) == 0.0;
      sym &= metrics::perceptual_distance(imgs[i], imgs[i + 1], enc) ==
             metrics::perceptual_distance(imgs[i + 1], imgs[i], enc);
    }
    const auto probe = harness::caption_probe(loaded().stack(), enc, kCasSamples, 4242);
    const auto& base_probe = L.base_manifest.results.at("caption_probe");
    const bool pass = cfv0 == 0.0 && style0 && sym && probe.cas_margin > 0;
    return {pass, "CFV(identical) " + fmt(cfv0) + "; style(x,x) " + (style0 ? "0" : "NONZERO") + "; symmetry " +
                      (sym ? "exact" : "BROKEN") + "; CAS margin " + fmt(probe.cas_margin, 4) + " over " +
                      std::to_string(kCasSamples) + " samples; classifier separability " +
                      fmt(probe.accuracy, 4) + " here, " + fmt(base_probe.at("accuracy").get<double>(), 4) +
                      " at pretraining"};
  }

  // 10. Embedding save/load bit-exact, corrupted checksum rejected, Table-5 header exact.
  std::pair<bool, std::string> c10_artifacts() {
    const auto src = overfit().out_dir / "embeddings.json";
    const auto a = text::load_embeddings(src);
    const auto copy = work_ / "roundtrip" / "embeddings.json";
    fs::create_directories(copy.parent_path());
    text::save_embeddings(a, copy);
    const auto b = text::load_embeddings(copy);
    bool exact = a.dim == b.dim && a.entries.size() == b.entries.size() && !a.entries.empty();
    for (std::size_t i = 0; exact && i < a.entries.size(); ++i) {
      const auto& x = a.entries[i].vectors;
      const auto& y = b.entries[i].vectors;
      exact &= a.entries[i].name == b.entries[i].name && a.entries[i].polarity == b.entries[i].polarity &&
               x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size() * sizeof(x[0])) == 0;
    }
    const bool same_bytes = util::read_text(src) == util::read_text(copy);

    auto j = json::parse(util::read_text(copy));
    j["checksum"] = j.at("checksum").get<std::uint32_t>() ^ 1u;
    const auto bad = work_ / "roundtrip" / "corrupt.json";
    util::write_text_atomic(bad, j.dump(2));
    bool rejected = false;
    try {
      text::load_embeddings(bad);
    } catch (const text::ArtifactError&) {
      rejected = true;
    }

    const auto sweep_csv = work_ / "sweep1" / "table5.csv";
    std::string header;
    if (fs::exists(sweep_csv)) {
      std::istringstream in(util::read_text(sweep_csv));
      std::getline(in, header);
    } else {
      header = harness::table5_header();
    }
    const bool header_ok = header == "setting,lpips_analog,style_loss,cds_standin,cfv,cas";
    return {exact && same_bytes && rejected && header_ok,
            std::string("round trip ") + (exact && same_bytes ? "bit-exact" : "MISMATCH") + "; corrupted checksum " +
                (rejected ? "rejected" : "ACCEPTED") + "; header '" + header + "'" +
                (fs::exists(sweep_csv) ? "" : " (from code, no sweep run)")};
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-10"};
  std::string cache = PNPTLAB_ACCEPTANCE_CACHE;
  std::vector<int> only;
  bool verbose = false;
  app.add_option("--cache", cache, "Directory holding cached pretrained components");
  app.add_option("--only", only, "Run only these criteria");
  app.add_flag("-v,--verbose", verbose, "Show command progress");
  CLI11_PARSE(app, argc, argv);

  Acceptance acc(cache, verbose);
  try {
    acc.prepare();
  } catch (const std::exception& e) {
    std::cout << "acceptance setup failed: " << e.what() << std::endl;
    return 1;
  }
  const auto results = acc.run_all(only);
  json report = json::array();
  int failed = 0;
  for (const auto& r : results) {
    report.push_back({{"criterion", r.id}, {"pass", r.pass}, {"detail", r.detail}, {"seconds", r.seconds}});
    failed += !r.pass;
  }
  util::write_text_atomic(acc.work() / "acceptance_report.json", report.dump(2));
  std::cout << (results.size() - failed) << "/" << results.size() << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
