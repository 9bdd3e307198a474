#include <doctest.h>

#include <fstream>
#include <sstream>
#include <unistd.h>

#include "harness/commands.hpp"
#include "util/io.hpp"

using namespace pnptlab;
using namespace pnptlab::harness;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Scratch root removed when the test binary exits.
struct Scratch {
  fs::path root = fs::temp_directory_path() / ("pnptlab_harness_" + std::to_string(::getpid()));
  Scratch() { fs::create_directories(root); }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(root, ec);
  }
};

Scratch& scratch() {
  static Scratch s;
  return s;
}

json tiny_flags() {
  return json::parse(R"({
    "ae_dataset": {"size": 48},
    "autoencoder_train": {"steps": 3, "min_images": 16, "l1_threshold": 10, "log_every": 1},
    "base_dataset": {"size": 48},
    "base_train": {"steps": 3, "val_images": 16, "val_every": 3, "log_every": 1, "warmup": 1},
    "encoder_dataset": {"size": 48},
    "encoder_train": {"steps": 3, "log_every": 1},
    "caption_probe": {"per_class": 2, "min_accuracy": 0.0},
    "max_steps": 4, "checkpoint_every": 2, "preview_every": 4, "steps": 3,
    "n_samples": 2, "probe_seeds": 2, "log_progress": false,
    "sweep": {"samples": 2, "max_steps": 2}
  })");
}

json with(json base, const json& extra) {
  base.merge_patch(extra);
  return base;
}

int run(const std::string& cmd, const json& flags, std::string* msg = nullptr, CommandResult* res = nullptr) {
  std::string m;
  const int rc = run_guarded(cmd, std::nullopt, flags, msg ? msg : &m, res);
  return rc;
}

// Tiny pretrained components shared by the tests below.
const fs::path& tiny_components() {
  static const fs::path dir = [] {
    const auto d = scratch().root / "components";
    auto f = with(tiny_flags(), {{"components", d.string()}});
    std::string msg;
    REQUIRE_MESSAGE(run("pretrain-ae", f, &msg) == 0, msg);
    REQUIRE_MESSAGE(run("pretrain-base", f, &msg) == 0, msg);
    return d;
  }();
  return dir;
}

json tiny_run_flags(const std::string& out) {
  return with(tiny_flags(), {{"components", tiny_components().string()}, {"out", (scratch().root / out).string()}});
}

}  // namespace

TEST_CASE("config precedence: flag over file over default") {
  const auto def = default_config();
  CHECK(def.at("gamma").get<double>() == 3.0);
  CHECK(def.at("learning_rate").get<double>() == 0.0025);
  CHECK(def.at("k_pos").get<int>() == 3);
  CHECK(def.at("k_neg").get<int>() == 3);
  CHECK(def.at("batch_size").get<int>() == 1);
  CHECK(def.at("max_steps").get<int>() == 4000);

  const json file = {{"gamma", 5.0}, {"max_steps", 100}, {"sweep", {{"samples", 3}}}};
  const json flags = {{"gamma", 7.0}};
  const auto r = resolve_config(file, flags);
  CHECK(r.at("gamma").get<double>() == 7.0);
  CHECK(r.at("max_steps").get<int>() == 100);
  CHECK(r.at("sweep").at("samples").get<int>() == 3);
  CHECK(r.at("sweep").at("prompt") == def.at("sweep").at("prompt"));
  CHECK(r.at("learning_rate") == def.at("learning_rate"));
}

TEST_CASE("config rejects unknown keys and type mismatches") {
  CHECK_THROWS_AS(resolve_config(json{{"gama", 3}}, nullptr), ConfigError);
  CHECK_THROWS_AS(resolve_config(nullptr, json{{"sweep", {{"bogus", 1}}}}), ConfigError);
  CHECK_THROWS_AS(resolve_config(json{{"gamma", "three"}}, nullptr), ConfigError);
  CHECK_THROWS_AS(pnpt_config(resolve_config(nullptr, json{{"ablation_mode", "none"}})), ConfigError);
  CHECK_THROWS_AS(pnpt_config(resolve_config(nullptr, json{{"learning_rate", -1.0}})), ConfigError);
}

TEST_CASE("config file errors map to exit code 2") {
  const auto bad = scratch().root / "bad.json";
  util::write_text_atomic(bad, "{ not json");
  std::string msg;
  CHECK(run_guarded("learn", bad, nullptr, &msg) == kConfigError);
  CHECK(msg.find("config") != std::string::npos);
  CHECK(run_guarded("learn", scratch().root / "absent.json", nullptr, &msg) == kConfigError);
  CHECK(run("no-such-command", json::object(), &msg) == kConfigError);
}

TEST_CASE("config is validated before prerequisites are checked") {
  std::string msg;
  // Config is bad and components are missing; the config error wins.
  CHECK(run("learn", {{"components", "/nonexistent"}, {"gamma", -1.0}}, &msg) == kConfigError);
}

TEST_CASE("missing prerequisites give a dependency error naming the artifact") {
  const auto empty = scratch().root / "empty_components";
  std::string msg;
  CHECK(run("learn", {{"components", empty.string()}, {"out", (scratch().root / "x").string()}}, &msg) ==
        kDependencyError);
  CHECK(msg.find("pretrain-ae") != std::string::npos);
  CHECK(msg.find("manifest.json") != std::string::npos);

  // Autoencoder present, base absent.
  const auto half = scratch().root / "half_components";
  REQUIRE(run("pretrain-ae", with(tiny_flags(), {{"components", half.string()}}), &msg) == 0);
  CHECK(run("learn", with(tiny_flags(), {{"components", half.string()}, {"out", (scratch().root / "y").string()}}),
            &msg) == kDependencyError);
  CHECK(msg.find("pretrain-base") != std::string::npos);
  CHECK(run("generate", with(tiny_flags(), {{"components", half.string()}}), &msg) == kDependencyError);
}

TEST_CASE("a non-converging autoencoder is a numerical failure") {
  std::string msg;
  auto f = with(tiny_flags(), {{"components", (scratch().root / "nonconv").string()},
                               {"autoencoder_train", {{"l1_threshold", 1e-6}}}});
  CHECK(run("pretrain-ae", f, &msg) == kNumericalFailure);
  CHECK(msg.find("converge") != std::string::npos);
}

TEST_CASE("a base model failing the caption probe is rejected downstream") {
  std::string msg;
  const auto comps = scratch().root / "probe_fail";
  auto f = with(tiny_flags(), {{"components", comps.string()}, {"caption_probe", {{"min_accuracy", 1.5}}}});
  REQUIRE(run("pretrain-ae", f, &msg) == 0);
  CHECK(run("pretrain-base", f, &msg) == kNumericalFailure);
  CHECK(msg.find("caption probe") != std::string::npos);
  const auto m = RunManifest::load(comps / "base" / "manifest.json");
  CHECK(m.results.at("caption_probe").at("passed") == false);
  CHECK(run("learn", with(f, {{"out", (scratch().root / "z").string()}}), &msg) == kDependencyError);
  CHECK(msg.find("caption probe") != std::string::npos);
}

TEST_CASE("learn writes a manifest with the resolved config, fingerprints and results") {
  CommandResult res;
  std::string msg;
  const auto flags = tiny_run_flags("learn_a");
  REQUIRE_MESSAGE(run("learn", flags, &msg, &res) == 0, msg);
  const auto& m = res.manifest;
  CHECK(m.command == "learn");
  CHECK(m.config == resolve_config(nullptr, flags));
  CHECK(m.fingerprints.contains("denoiser"));
  CHECK(m.fingerprints.contains("autoencoder"));
  CHECK(m.fingerprints.contains("text_table"));
  CHECK(m.results.at("changed_values").get<int>() <= m.results.at("tuned_parameters").get<int>());
  const auto art = text::load_embeddings(res.out_dir / "embeddings.json");
  CHECK(m.results.at("tuned_parameters").get<int>() == 6 * art.dim);
  CHECK(m.inputs.size() == 2);
  CHECK(fs::exists(res.out_dir / "embeddings.json"));
  CHECK(fs::exists(res.out_dir / "embeddings" / "step_000000.json"));
  CHECK(fs::exists(res.out_dir / "embeddings" / "step_000004.json"));
  CHECK(res.manifest.run_id.size() == 16);
}

TEST_CASE("generate and edit with pinned seeds reproduce identical output hashes") {
  std::string msg;
  CommandResult learn;
  REQUIRE_MESSAGE(run("learn", tiny_run_flags("learn_b"), &msg, &learn) == 0, msg);
  const auto emb = (learn.out_dir / "embeddings.json").string();

  CommandResult g1, g2;
  REQUIRE_MESSAGE(run("generate", with(tiny_run_flags("gen1"), {{"embeddings", {emb}}, {"seed", 11}}), &msg, &g1) == 0,
                  msg);
  REQUIRE(run("generate", with(tiny_run_flags("gen2"), {{"embeddings", {emb}}, {"seed", 11}}), &msg, &g2) == 0);
  CHECK(g1.manifest.output_hash == g2.manifest.output_hash);
  CHECK(util::read_text(g1.out_dir / "sample_000.png") == util::read_text(g2.out_dir / "sample_000.png"));
  CommandResult g3;
  REQUIRE(run("generate", with(tiny_run_flags("gen3"), {{"embeddings", {emb}}, {"seed", 12}}), &msg, &g3) == 0);
  CHECK(g1.manifest.output_hash != g3.manifest.output_hash);

  data::Mask mask{64, 64, std::vector<std::uint8_t>(64 * 64, 0)};
  for (int y = 0; y < 64; ++y)
    for (int x = 32; x < 64; ++x) mask.bits[static_cast<std::size_t>(y * 64 + x)] = 1;
  const auto mask_path = scratch().root / "half_mask.png";
  data::write_mask_png(mask_path, mask);
  CommandResult e1, e2;
  const json ef = {{"embeddings", {emb}}, {"mask", mask_path.string()}, {"strength", 0.5}, {"seed", 5}};
  REQUIRE_MESSAGE(run("edit", with(tiny_run_flags("edit1"), ef), &msg, &e1) == 0, msg);
  REQUIRE(run("edit", with(tiny_run_flags("edit2"), ef), &msg, &e2) == 0);
  CHECK(e1.manifest.output_hash == e2.manifest.output_hash);
}

TEST_CASE("generate without the pseudo-word embeddings is a dependency error") {
  std::string msg;
  CHECK(run("generate", tiny_run_flags("gen_noemb"), &msg) == kDependencyError);
  CHECK(msg.find("S*^p") != std::string::npos);
}

TEST_CASE("compose needs distinct concept names") {
  std::string msg;
  CommandResult a;
  REQUIRE(run("learn", tiny_run_flags("learn_c"), &msg, &a) == 0);
  const auto emb = (a.out_dir / "embeddings.json").string();
  CHECK(run("compose", with(tiny_run_flags("comp_dup"), {{"embeddings", {emb, emb}}}), &msg) == kConfigError);
  CommandResult c;
  REQUIRE_MESSAGE(run("compose", with(tiny_run_flags("comp_ok"), {{"embeddings", {emb, emb}}, {"concepts", {"A", "B"}}}),
                      &msg, &c) == 0,
                  msg);
  CHECK(c.manifest.results.at("positive_prompt") == "A^p and B^p");
  CHECK(c.manifest.results.at("negative_prompt") == "A^n B^n");
}

TEST_CASE("sweep-gamma emits the five-setting CSV with the documented header") {
  std::string msg;
  CommandResult res;
  REQUIRE_MESSAGE(run("sweep-gamma", tiny_run_flags("sweep"), &msg, &res) == 0, msg);
  std::istringstream in(util::read_text(res.out_dir / "table5.csv"));
  std::string line;
  std::getline(in, line);
  CHECK(line == "setting,lpips_analog,style_loss,cds_standin,cfv,cas");
  CHECK(line == table5_header());
  std::vector<std::string> settings;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    settings.push_back(line.substr(0, line.find(',')));
    CHECK(std::count(line.begin(), line.end(), ',') == 5);
  }
  CHECK(settings == sweep_settings());
  CHECK(find_orphans(res.out_dir).clean());
}

TEST_CASE("evaluate and rectify-probe write their reports") {
  std::string msg;
  CommandResult learn, gen, ev, probe;
  REQUIRE(run("learn", tiny_run_flags("learn_d"), &msg, &learn) == 0);
  const auto emb = (learn.out_dir / "embeddings.json").string();
  REQUIRE(run("generate", with(tiny_run_flags("gen_d"), {{"embeddings", {emb}}}), &msg, &gen) == 0);
  CHECK(run("evaluate", with(tiny_run_flags("eval_bad"), {{"images", gen.out_dir.string()}}), &msg) == kConfigError);
  REQUIRE_MESSAGE(run("evaluate",
                      with(tiny_run_flags("eval_d"), {{"images", gen.out_dir.string()}, {"eval_text", "a red S*^p"}}),
                      &msg, &ev) == 0,
                  msg);
  CHECK(fs::exists(ev.out_dir / "metrics.json"));
  CHECK(fs::exists(ev.out_dir / "metrics.csv"));
  REQUIRE_MESSAGE(run("rectify-probe", with(tiny_run_flags("probe_d"), {{"learn_run", learn.out_dir.string()}}), &msg,
                      &probe) == 0,
                  msg);
  CHECK(fs::exists(probe.out_dir / "probe.csv"));
  CHECK(fs::exists(probe.out_dir / "grid.png"));
  CHECK(probe.manifest.results.contains("init_minus_final"));
}

TEST_CASE("every artifact belongs to exactly one manifest") {
  std::string msg;
  const auto root = scratch().root / "orphans";
  auto f = with(tiny_flags(), {{"components", tiny_components().string()}});
  CommandResult learn;
  REQUIRE(run("learn", with(f, {{"out", (root / "learn").string()}}), &msg, &learn) == 0);
  REQUIRE(run("generate",
              with(f, {{"out", (root / "gen").string()}, {"embeddings", {(learn.out_dir / "embeddings.json").string()}}}),
              &msg) == 0);
  CHECK(find_orphans(root).clean());
  CHECK(find_orphans(tiny_components()).clean());

  util::write_text_atomic(root / "gen" / "stray.txt", "x");
  auto rep = find_orphans(root);
  REQUIRE(rep.orphans.size() == 1);
  CHECK(rep.orphans[0].filename() == "stray.txt");
  fs::remove(root / "gen" / "stray.txt");

  fs::remove(root / "gen" / "sample_000.png");
  rep = find_orphans(root);
  CHECK(rep.missing.size() == 1);
}

TEST_CASE("manifest round trip and output hash ignore timestamps") {
  const auto dir = scratch().root / "manifest_rt";
  fs::create_directories(dir);
  util::write_text_atomic(dir / "a.txt", "alpha");
  util::write_text_atomic(dir / "b.txt", "beta");
  RunManifest m;
  m.command = "evaluate";
  m.config = {{"k", 1}};
  m.run_id = run_id_for(m.command, m.config);
  m.started = "2026-01-01T00:00:00Z";
  write_manifest(m, dir, {"b.txt", "a.txt"});
  const auto first = RunManifest::load(dir / "manifest.json");
  CHECK(first.artifacts.size() == 2);
  CHECK(first.artifacts[0].path == "a.txt");
  CHECK(first.artifacts[0].sha256 == file_sha256(dir / "a.txt"));
  m.started = "2027-01-01T00:00:00Z";
  write_manifest(m, dir, {"a.txt", "b.txt"});
  const auto second = RunManifest::load(dir / "manifest.json");
  CHECK(second.output_hash == first.output_hash);
  CHECK(RunManifest::from_json(second.to_json()).to_json() == second.to_json());
  CHECK(run_id_for("evaluate", {{"k", 2}}) != m.run_id);
}
