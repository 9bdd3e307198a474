#include "harness/commands.hpp"

#include "harness/probes.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <iterator>
#include <sstream>

#include "data/toy_data.hpp"
#include "nn/checkpoint.hpp"
#include "util/io.hpp"

namespace pnptlab::harness {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"pretrain-ae", "pretrain-base", "learn",       "generate",     "compose",
                                              "edit",        "evaluate",      "sweep-gamma", "rectify-probe"};
  return names;
}

std::string table5_header() { return "setting," + metrics::MetricsReport::csv_header(); }

namespace {

using Clock = std::chrono::steady_clock;

struct Run {
  std::string command;
  fs::path dir;
  RunManifest manifest;
  std::vector<fs::path> artifacts;
  Clock::time_point t0 = Clock::now();
  std::ostream* log = nullptr;

  Run(std::string cmd, fs::path d, const json& cfg, std::ostream* l) : command(std::move(cmd)), dir(std::move(d)), log(l) {
    fs::create_directories(dir);
    manifest.command = command;
    manifest.config = cfg;
    manifest.run_id = run_id_for(command, cfg);
    manifest.started = iso_now();
  }
  void add(const fs::path& rel) { artifacts.push_back(rel); }
  void note(const std::string& msg) const {
    if (log) *log << "[" << command << "] " << msg << std::endl;
  }
  CommandResult finish() {
    manifest.finished = iso_now();
    manifest.wall_clock_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    write_manifest(manifest, dir, artifacts);
    CommandResult r{dir, RunManifest::load(dir / "manifest.json")};
    note("wrote " + (dir / "manifest.json").string());
    return r;
  }
};

fs::path out_dir(const json& cfg, const std::string& command) {
  const auto out = cfg.at("out").get<std::string>();
  return out.empty() ? fs::path("runs") / command : fs::path(out);
}

fs::path components_dir(const json& cfg) { return cfg.at("components").get<std::string>(); }

json input_ref(const fs::path& dir, const RunManifest& m) {
  return {{"path", fs::absolute(dir).lexically_normal().generic_string()},
          {"command", m.command},
          {"run_id", m.run_id},
          {"output_hash", m.output_hash}};
}

void write_curve(const fs::path& path, const char* header, const std::vector<std::pair<int, double>>& curve) {
  std::ostringstream os;
  os << header << "\n" << std::setprecision(9);
  for (const auto& [s, v] : curve) os << s << ',' << v << '\n';
  util::write_text_atomic(path, os.str());
}

// Prepends round(fraction * size) clutter scenes with empty captions, so a
// validation tail taken from the end stays in-grammar.
std::vector<data::CaptionedImage> dataset_with_clutter(const json& ds) {
  const int n = ds.at("size").get<int>();
  const double fraction = ds.at("clutter_fraction").get<double>();
  if (fraction < 0.0 || fraction >= 1.0) throw ConfigError("clutter_fraction must be in [0, 1)");
  const auto seed = ds.at("seed").get<std::uint64_t>();
  const int n_clutter = static_cast<int>(std::lround(fraction * n));
  std::vector<data::CaptionedImage> out;
  out.reserve(static_cast<std::size_t>(n + n_clutter));
  for (int i = 0; i < n_clutter; ++i)
    out.push_back({data::make_clutter(data::mix_seed(seed, 0xC10000ull + static_cast<std::uint64_t>(i))), "", {}});
  auto grammar = data::generate_dataset(n, seed);
  std::move(grammar.begin(), grammar.end(), std::back_inserter(out));
  return out;
}

std::vector<data::Image> images_of(const std::vector<data::CaptionedImage>& items) {
  std::vector<data::Image> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.image);
  return out;
}

RunManifest require_manifest(const fs::path& dir, const std::string& producer, const std::string& needed_by) {
  const auto path = dir / "manifest.json";
  if (!fs::exists(path))
    throw DependencyError(needed_by + " requires " + producer + " artifacts: missing " + path.string() + " (run " +
                          producer + " first)");
  auto m = RunManifest::load(path);
  if (m.command != producer)
    throw DependencyError(path.string() + " was produced by " + m.command + ", expected " + producer);
  return m;
}

void expect_fingerprint(const std::string& what, const std::string& expected, const std::string& found) {
  if (expected != found)
    throw DependencyError("missing " + what + " with fingerprint " + expected + " (found " + found + ")");
}

// Every "<name>^p" / "<name>^n" chunk must name a registered pseudo-word.
void require_pseudo_words(const text::TextConditioner<float>& cond, const std::string& prompt) {
  std::istringstream in(prompt);
  std::string chunk;
  while (in >> chunk) {
    while (!chunk.empty() && std::string(",.;!").find(chunk.back()) != std::string::npos) chunk.pop_back();
    if (chunk.size() < 3 || chunk[chunk.size() - 2] != '^') continue;
    const char pol = chunk.back();
    if (pol != 'p' && pol != 'n') continue;
    const auto name = chunk.substr(0, chunk.size() - 2);
    if (!cond.find(name, pol == 'p' ? text::Polarity::positive : text::Polarity::negative))
      throw DependencyError("prompt references " + chunk + " but no loaded embedding provides it (pass --embeddings)");
  }
}

struct EmbeddingInput {
  fs::path path;
  text::EmbeddingArtifact art;
  std::optional<RunManifest> manifest;
};

std::vector<EmbeddingInput> load_embedding_inputs(const json& cfg, const Loaded& L) {
  std::vector<EmbeddingInput> out;
  auto list = cfg.at("embeddings");
  if (list.is_string()) list = json::array({list});
  for (const auto& p : list) {
    EmbeddingInput in;
    in.path = p.get<std::string>();
    if (!fs::exists(in.path)) throw DependencyError("missing embedding artifact " + in.path.string());
    in.art = text::load_embeddings(in.path);
    // Learn runs record the components their embeddings were tuned against.
    const auto mpath = in.path.parent_path() / "manifest.json";
    if (fs::exists(mpath)) {
      in.manifest = RunManifest::load(mpath);
      const auto& fp = in.manifest->fingerprints;
      if (fp.contains("denoiser")) expect_fingerprint("denoiser", fp.at("denoiser"), L.net->fingerprint());
      if (fp.contains("text_table")) expect_fingerprint("text table", fp.at("text_table"), L.cond->table_fingerprint());
      if (fp.contains("autoencoder")) expect_fingerprint("autoencoder", fp.at("autoencoder"), L.ae->fingerprint());
    }
    out.push_back(std::move(in));
  }
  return out;
}

void record_inputs(Run& run, const Loaded& L, const fs::path& comps, const std::vector<EmbeddingInput>& embs) {
  run.manifest.inputs.push_back(input_ref(comps / "ae", L.ae_manifest));
  run.manifest.inputs.push_back(input_ref(comps / "base", L.base_manifest));
  for (const auto& e : embs)
    if (e.manifest) run.manifest.inputs.push_back(input_ref(e.path.parent_path(), *e.manifest));
  run.manifest.fingerprints = {{"denoiser", L.net->fingerprint()},
                               {"autoencoder", L.ae->fingerprint()},
                               {"text_table", L.cond->table_fingerprint()}};
}

std::string sample_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%03d.png", i);
  return buf;
}

std::vector<std::string> sample_files(Run& run, const std::vector<data::Image>& images) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < images.size(); ++i) {
    names.push_back(sample_name(static_cast<int>(i)));
    data::write_png(run.dir / names.back(), images[i]);
    run.add(names.back());
  }
  return names;
}

std::vector<data::Image> sample_set(const guidance::GuidanceSpec& base, int n, const Loaded& L,
                                    std::vector<std::string>* warnings) {
  std::vector<data::Image> out;
  for (int i = 0; i < n; ++i) {
    auto g = base;
    g.seed = base.seed + static_cast<std::uint64_t>(i);
    out.push_back(guidance::sample(g, L.stack(), i == 0 ? warnings : nullptr));
  }
  return out;
}

data::Image tile_grid(const std::vector<std::vector<data::Image>>& grid) {
  const auto& first = grid.at(0).at(0);
  const int h = first.height, w = first.width;
  std::size_t cols = 0;
  for (const auto& row : grid) cols = std::max(cols, row.size());
  auto out = data::Image::filled(3, h * static_cast<int>(grid.size()), w * static_cast<int>(cols), -1.0f);
  for (std::size_t r = 0; r < grid.size(); ++r)
    for (std::size_t c = 0; c < grid[r].size(); ++c)
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            out.at(ch, static_cast<int>(r) * h + y, static_cast<int>(c) * w + x) = grid[r][c].at(ch, y, x);
  return out;
}

std::string eval_text(const json& cfg) {
  const auto t = cfg.at("eval_text").get<std::string>();
  return t.empty() ? cfg.at("positive_prompt").get<std::string>() : t;
}

metrics::MetricsReport evaluate_set(const std::vector<data::Image>& images, const data::Image& reference,
                                    const std::string& text, const metrics::FeatureEncoder& enc) {
  if (images.size() < 2) throw ConfigError("evaluate: need at least two images");
  if (enc.caption_words(text).empty())
    throw ConfigError("evaluate: text '" + text + "' has no base-vocabulary word for CAS (set eval_text)");
  return metrics::evaluate(images, reference, text, enc);
}

void write_metrics(Run& run, const std::string& setting, const metrics::MetricsReport& r) {
  auto j = r.to_json();
  util::write_text_atomic(run.dir / "metrics.json", j.dump(2) + "\n");
  util::write_text_atomic(run.dir / "metrics.csv", table5_header() + "\n" + setting + "," + r.csv_values() + "\n");
  run.add("metrics.json");
  run.add("metrics.csv");
  run.manifest.results["metrics"] = j;
}

// ---------------------------------------------------------------- commands

CommandResult cmd_pretrain_ae(const json& cfg, std::ostream* log) {
  const auto acfg = autoencoder_config(cfg);
  auto tcfg = autoencoder_train_config(cfg);
  tcfg.seed = cfg.at("seed").get<std::uint64_t>();
  const auto& ds = cfg.at("ae_dataset");
  Run run("pretrain-ae", components_dir(cfg) / "ae", cfg, log);
  const auto images = images_of(dataset_with_clutter(ds));
  run.note("generated " + std::to_string(images.size()) + " toy and clutter images");
  codec::AutoencoderTrainReport rep;
  run.note("training autoencoder for " + std::to_string(tcfg.steps) + " steps");
  auto ae = codec::train_autoencoder(images, acfg, tcfg, &rep);
  codec::save_autoencoder(ae, run.dir / "autoencoder.ckpt");
  run.add("autoencoder.ckpt");
  write_curve(run.dir / "loss.csv", "step,l1", rep.loss_curve);
  run.add("loss.csv");
  run.manifest.fingerprints = {{"autoencoder", ae.fingerprint()}};
  run.manifest.seeds = {{"train", tcfg.seed}, {"dataset", ds.at("seed")}};
  // Diagnostics outside the training distribution; not gating.
  std::vector<data::Image> fresh_clutter, references;
  for (std::uint64_t i = 0; i < 64; ++i) fresh_clutter.push_back(data::make_clutter(data::mix_seed(0xF5E5ull, i)));
  for (std::uint64_t i = 1; i <= 5; ++i)
    for (auto kind : {data::ReferenceKind::composite_novel_shape, data::ReferenceKind::novel_texture_style})
      references.push_back(data::make_reference(kind, i));
  const double clutter_l1 = codec::reconstruction_l1(ae, fresh_clutter);
  const double reference_l1 = codec::reconstruction_l1(ae, references);
  run.manifest.results = {{"heldout_l1", rep.heldout_l1},
                          {"clutter_l1", clutter_l1},
                          {"reference_l1", reference_l1},
                          {"latent_std", rep.latent_std}};
  run.note("held-out L1 " + std::to_string(rep.heldout_l1) + ", clutter L1 " + std::to_string(clutter_l1) +
           ", reference L1 " + std::to_string(reference_l1));
  return run.finish();
}

CommandResult cmd_pretrain_base(const json& cfg, std::ostream* log) {
  const auto comps = components_dir(cfg);
  const auto ae_m = require_manifest(comps / "ae", "pretrain-ae", "pretrain-base");
  const auto ae = codec::load_autoencoder(comps / "ae" / "autoencoder.ckpt");
  expect_fingerprint("autoencoder", ae_m.fingerprints.at("autoencoder"), ae.fingerprint());
  const auto sched = schedule_from(cfg.at("schedule"));
  const auto dcfg = denoiser_config(cfg);
  auto tcfg = base_train_config(cfg);
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  tcfg.seed = seed;
  auto ecfg = encoder_config(cfg);
  auto etcfg = encoder_train_config(cfg);
  etcfg.seed = seed;
  if (dcfg.latent_channels != ae.config().latent_depth() || dcfg.latent_size != ae.config().latent_size())
    throw ConfigError("denoiser latent shape does not match the autoencoder's");

  Run run("pretrain-base", comps / "base", cfg, log);
  run.manifest.inputs.push_back(input_ref(comps / "ae", ae_m));
  const auto& ds = cfg.at("base_dataset");
  const auto data = dataset_with_clutter(ds);
  run.note("generated " + std::to_string(data.size()) + " captioned and clutter images");
  text::TextConditioner<float> cond(text::Vocabulary::toy_default(), dcfg.text_dim, data::mix_seed(seed, 0x7AB));
  denoiser::BaseTrainReport rep;
  run.note("training denoiser for " + std::to_string(tcfg.steps) + " steps");
  const auto net = denoiser::train_base(data, sched, ae, cond, dcfg, tcfg, &rep);
  const json sched_json = cfg.at("schedule");
  denoiser::save_denoiser(net, run.dir / "denoiser.ckpt", {{"schedule", sched_json}});
  text::save_conditioner(cond, run.dir / "text_table.ckpt");
  write_curve(run.dir / "loss.csv", "step,l_ldm", rep.loss_curve);
  write_curve(run.dir / "val.csv", "step,val_l_ldm", rep.val_curve);
  for (const char* f : {"denoiser.ckpt", "text_table.ckpt", "loss.csv", "val.csv"}) run.add(f);

  const auto& es = cfg.at("encoder_dataset");
  run.note("training feature encoder for " + std::to_string(etcfg.steps) + " steps");
  metrics::EncoderTrainReport erep;
  const auto enc = metrics::train_feature_encoder(
      data::generate_dataset(es.at("size").get<int>(), es.at("seed").get<std::uint64_t>()),
      text::Vocabulary::toy_default(), ecfg, etcfg, &erep);
  metrics::save_feature_encoder(enc, run.dir / "feature_encoder.ckpt");
  run.add("feature_encoder.ckpt");

  run.manifest.fingerprints = {{"autoencoder", ae.fingerprint()},
                               {"denoiser", net.fingerprint()},
                               {"text_table", cond.table_fingerprint()},
                               {"feature_encoder", enc.fingerprint()}};
  run.manifest.seeds = {{"train", seed}, {"dataset", ds.at("seed")}, {"encoder_dataset", es.at("seed")}};
  run.manifest.results = {{"val_curve", rep.val_curve},
                          {"eps_norm_ratio", rep.eps_norm_ratio},
                          {"encoder",
                           {{"shape_accuracy", erep.shape_accuracy},
                            {"color_accuracy", erep.color_accuracy},
                            {"background_accuracy", erep.background_accuracy},
                            {"caption_retrieval", erep.caption_retrieval}}}};

  const auto& pc = cfg.at("caption_probe");
  const int per_class = pc.at("per_class").get<int>();
  const double min_acc = pc.at("min_accuracy").get<double>();
  run.note("caption probe: " + std::to_string(2 * per_class) + " samples");
  const auto probe = caption_probe({sched, net, cond, ae}, enc, per_class, pc.at("seed").get<std::uint64_t>());
  auto pj = probe.to_json();
  pj["passed"] = probe.accuracy >= min_acc;
  run.manifest.results["caption_probe"] = pj;
  auto result = run.finish();
  if (probe.accuracy < min_acc)
    throw codec::TrainingError("base model failed the caption probe: accuracy " + std::to_string(probe.accuracy) +
                               " < " + std::to_string(min_acc) + "; loss curve in " + (run.dir / "loss.csv").string());
  return result;
}

CommandResult cmd_learn(const json& cfg, std::ostream* log) {
  const auto pcfg = pnpt_config(cfg);
  const auto comps = components_dir(cfg);
  auto L = load_components(comps);
  const auto ref = load_reference(cfg.at("reference").get<std::string>());
  Run run("learn", out_dir(cfg, "learn"), cfg, log);
  record_inputs(run, L, comps, {});
  data::write_png(run.dir / "reference.png", ref);
  run.add("reference.png");
  pnpt::TrainOptions opts;
  opts.run_dir = run.dir;
  opts.preview_seed = pcfg.seed;
  opts.log_progress = log && cfg.at("log_progress").get<bool>();
  auto c = L.components();
  run.note("tuning " + pcfg.concept_name + " (" + pnpt::to_string(pcfg.ablation_mode) + ", gamma " +
           std::to_string(pcfg.gamma) + ") for " + std::to_string(pcfg.max_steps) + " steps");
  const auto r = pnpt::train(std::span<const data::Image>(&ref, 1), pcfg, c, opts);
  for (const auto& a : r.artifacts) run.add(a);
  const double init = pnpt::initial_loss(r.history), fin = pnpt::smoothed_final_loss(r.history);
  const double rec = pnpt::reconstruction_error(ref, pcfg, c, 32, pcfg.seed);
  run.manifest.seeds = {{"train", pcfg.seed}, {"preview", opts.preview_seed}};
  run.manifest.results = {{"initial_l_pnpt", init},
                          {"final_smoothed_l_pnpt", fin},
                          {"ratio", fin / init},
                          {"reconstruction_error", rec},
                          {"changed_values", r.changed_values},
                          {"tuned_parameters", (pcfg.k_pos + (pcfg.uses_negative() ? pcfg.k_neg : 0)) * L.cond->dim()},
                          {"train_seconds", r.seconds}};
  run.note("L_pnpt " + std::to_string(init) + " -> " + std::to_string(fin) + ", reconstruction error " +
           std::to_string(rec));
  return run.finish();
}

CommandResult cmd_generate(const json& cfg, std::ostream* log) {
  const auto spec = guidance_spec(cfg);
  const int n = cfg.at("n_samples").get<int>();
  if (n < 1) throw ConfigError("n_samples must be >= 1");
  const auto comps = components_dir(cfg);
  auto L = load_components(comps);
  const auto embs = load_embedding_inputs(cfg, L);
  for (const auto& e : embs) text::install_embeddings(e.art, *L.cond);
  require_pseudo_words(*L.cond, spec.positive_prompt);
  require_pseudo_words(*L.cond, spec.negative_prompt);
  Run run("generate", out_dir(cfg, "generate"), cfg, log);
  record_inputs(run, L, comps, embs);
  std::vector<std::string> warnings;
  const auto images = sample_set(spec, n, L, &warnings);
  const auto names = sample_files(run, images);
  run.manifest.seeds = {{"first", spec.seed}, {"count", n}};
  run.manifest.results = {{"samples", names}, {"warnings", warnings}};
  return run.finish();
}

CommandResult cmd_compose(const json& cfg, std::ostream* log) {
  auto spec = guidance_spec(cfg);
  const int n = cfg.at("n_samples").get<int>();
  const auto comps = components_dir(cfg);
  auto L = load_components(comps);
  auto embs = load_embedding_inputs(cfg, L);
  if (embs.size() < 2) throw ConfigError("compose: pass at least two --embeddings");
  const auto renames = cfg.at("concepts");
  if (!renames.empty() && renames.size() != embs.size())
    throw ConfigError("compose: concepts must list one name per embedding artifact");
  std::vector<std::string> names;
  for (std::size_t i = 0; i < embs.size(); ++i) {
    std::string name = embs[i].art.entries.empty() ? "" : embs[i].art.entries[0].name;
    if (!renames.empty()) name = renames[i].get<std::string>();
    if (name.empty()) throw DependencyError("compose: " + embs[i].path.string() + " holds no embeddings");
    if (std::find(names.begin(), names.end(), name) != names.end())
      throw ConfigError("compose: concept name '" + name + "' is used twice; rename with concepts");
    for (auto& e : embs[i].art.entries) e.name = name;
    text::install_embeddings(embs[i].art, *L.cond);
    names.push_back(name);
  }
  std::string pos = cfg.at("compose_template").get<std::string>();
  if (pos.empty())
    for (std::size_t i = 0; i < names.size(); ++i) pos += (i ? " and {" : "{") + names[i] + "}";
  const auto mode = cfg.at("compose_mode").get<std::string>();
  if (mode != "concatenate" && mode != "sum") throw ConfigError("compose_mode must be concatenate or sum");
  const auto prompts = L.cond->compose_prompts(names, pos, cfg.at("compose_negative_template").get<std::string>(),
                                               mode == "sum" ? text::CompositionMode::sum
                                                             : text::CompositionMode::concatenate);
  spec.positive_prompt = prompts.positive;
  spec.negative_prompt = prompts.negative;
  Run run("compose", out_dir(cfg, "compose"), cfg, log);
  record_inputs(run, L, comps, embs);
  std::vector<std::string> warnings;
  if (mode == "sum") warnings.push_back("sum composition is experimental");
  const auto files = sample_files(run, sample_set(spec, n, L, &warnings));
  run.manifest.seeds = {{"first", spec.seed}, {"count", n}};
  run.manifest.results = {{"positive_prompt", prompts.positive},
                          {"negative_prompt", prompts.negative},
                          {"samples", files},
                          {"warnings", warnings}};
  return run.finish();
}

CommandResult cmd_edit(const json& cfg, std::ostream* log) {
  const auto spec = guidance_spec(cfg);
  const double strength = cfg.at("strength").get<double>();
  if (!(strength > 0.0 && strength <= 1.0)) throw ConfigError("strength must be in (0, 1]");
  const auto mask_path = cfg.at("mask").get<std::string>();
  if (mask_path.empty()) throw ConfigError("edit: --mask is required");
  const auto image = load_reference(cfg.at("reference").get<std::string>());
  data::Mask mask;
  try {
    mask = data::read_mask_png(mask_path);
  } catch (const data::ImageIoError& e) {
    throw ConfigError(std::string("edit: ") + e.what());
  }
  const auto comps = components_dir(cfg);
  auto L = load_components(comps);
  const auto embs = load_embedding_inputs(cfg, L);
  for (const auto& e : embs) text::install_embeddings(e.art, *L.cond);
  require_pseudo_words(*L.cond, spec.positive_prompt);
  require_pseudo_words(*L.cond, spec.negative_prompt);
  Run run("edit", out_dir(cfg, "edit"), cfg, log);
  record_inputs(run, L, comps, embs);
  std::vector<std::string> warnings;
  const auto out = guidance::edit(image, mask, spec, strength, L.stack(), &warnings);
  data::write_png(run.dir / "edited.png", out);
  run.add("edited.png");
  run.manifest.seeds = {{"edit", spec.seed}};
  run.manifest.results = {{"warnings", warnings}};
  return run.finish();
}

std::vector<data::Image> read_image_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("evaluate: images directory " + dir.string() + " not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".png" && e.path().filename() != "reference.png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<data::Image> out;
  for (const auto& f : files) out.push_back(data::read_png(f));
  return out;
}

CommandResult cmd_evaluate(const json& cfg, std::ostream* log) {
  const auto dir = cfg.at("images").get<std::string>();
  if (dir.empty()) throw ConfigError("evaluate: set images to a directory of PNG samples");
  const auto images = read_image_dir(dir);
  const auto ref = load_reference(cfg.at("reference").get<std::string>());
  const auto comps = components_dir(cfg);
  auto L = load_components(comps);
  Run run("evaluate", out_dir(cfg, "evaluate"), cfg, log);
  record_inputs(run, L, comps, {});
  run.manifest.fingerprints["feature_encoder"] = L.enc->fingerprint();
  const auto report = evaluate_set(images, ref, eval_text(cfg), *L.enc);
  write_metrics(run, fs::path(dir).filename().string(), report);
  return run.finish();
}

CommandResult cmd_sweep_gamma(const json& cfg, std::ostream* log) {
  const auto comps = components_dir(cfg);
  {
    auto L = load_components(comps);  // fail fast before any member run
    (void)L;
  }
  const auto ref_spec = cfg.at("reference").get<std::string>();
  const auto ref = load_reference(ref_spec);
  const auto& sw = cfg.at("sweep");
  const int samples = sw.at("samples").get<int>();
  const int steps = sw.at("max_steps").get<int>();
  const std::string prompt = sw.at("prompt").get<std::string>();
  pnpt_config(cfg);
  Run run("sweep-gamma", out_dir(cfg, "sweep-gamma"), cfg, log);
  struct Setting {
    std::string label, slug;
    double gamma;
    bool rec;
  };
  const std::vector<Setting> settings{{sweep_settings()[0], "gamma3_no_rec", 3.0, false},
                                      {sweep_settings()[1], "gamma2", 2.0, true},
                                      {sweep_settings()[2], "gamma3", 3.0, true},
                                      {sweep_settings()[3], "gamma5", 5.0, true},
                                      {sweep_settings()[4], "gamma7", 7.0, true}};
  std::ostringstream csv;
  csv << table5_header() << "\n";
  json rows = json::array();
  for (const auto& s : settings) {
    auto member = cfg;
    member["gamma"] = s.gamma;
    member["rec_enabled"] = s.rec;
    if (steps > 0) member["max_steps"] = steps;
    member["out"] = (run.dir / s.slug / "learn").string();
    const auto learned = run_command("learn", member, log);
    member["out"] = (run.dir / s.slug / "samples").string();
    member["positive_prompt"] = prompt;
    member["negative_prompt"] = pnpt_config(member).negative_prompt();
    member["n_samples"] = samples;
    member["embeddings"] = json::array({(learned.out_dir / "embeddings.json").string()});
    const auto gen = run_command("generate", member, log);
    run.manifest.inputs.push_back(input_ref(learned.out_dir, learned.manifest));
    run.manifest.inputs.push_back(input_ref(gen.out_dir, gen.manifest));
    auto L = load_components(comps);
    const auto report = evaluate_set(read_image_dir(gen.out_dir), ref, prompt, *L.enc);
    csv << s.label << ',' << report.csv_values() << '\n';
    auto row = report.to_json();
    row["setting"] = s.label;
    row["final_reconstruction_error"] = learned.manifest.results.at("reconstruction_error");
    rows.push_back(row);
    run.note(s.label + ": " + report.csv_values());
  }
  util::write_text_atomic(run.dir / "table5.csv", csv.str());
  run.add("table5.csv");
  run.manifest.results = {{"rows", rows}};
  run.manifest.seeds = {{"train", cfg.at("seed")}, {"samples_first", cfg.at("seed")}};
  return run.finish();
}

CommandResult cmd_rectify_probe(const json& cfg, std::ostream* log) {
  const auto spec = guidance_spec(cfg);
  const auto learn_dir = fs::path(cfg.at("learn_run").get<std::string>());
  if (learn_dir.empty()) throw ConfigError("rectify-probe: set learn_run to a learn run directory");
  const auto lm = require_manifest(learn_dir, "learn", "rectify-probe");
  std::vector<fs::path> ckpts;
  for (const auto& a : lm.artifacts)
    if (a.path.rfind("embeddings/step_", 0) == 0) ckpts.push_back(learn_dir / a.path);
  std::sort(ckpts.begin(), ckpts.end());
  if (ckpts.size() < 2) throw DependencyError("rectify-probe: " + learn_dir.string() + " has fewer than two checkpoints");
  for (const auto& p : ckpts)
    if (!fs::exists(p)) throw DependencyError("rectify-probe: missing checkpoint " + p.string());
  const auto comps = components_dir(cfg);
  auto L = load_components(comps);
  const auto concept_name = lm.config.value("concept_name", std::string("S*"));
  const auto final_art = text::load_embeddings(learn_dir / "embeddings.json");
  std::vector<text::EmbeddingArtifact> negs;
  std::vector<std::string> labels;
  for (const auto& p : ckpts) {
    negs.push_back(text::load_embeddings(p));
    labels.push_back(p.stem().string());
  }
  const int n = cfg.at("probe_seeds").get<int>();
  if (n < 1) throw ConfigError("probe_seeds must be >= 1");
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < n; ++i) seeds.push_back(spec.seed + static_cast<std::uint64_t>(i));
  const auto ref = data::read_png(learn_dir / "reference.png");
  auto c = L.components();
  const auto probe = pnpt::rectification_probe(final_art, negs, labels, concept_name, seeds, spec, ref, c, *L.enc);
  Run run("rectify-probe", out_dir(cfg, "rectify-probe"), cfg, log);
  record_inputs(run, L, comps, {});
  run.manifest.inputs.push_back(input_ref(learn_dir, lm));
  data::write_png(run.dir / "grid.png", tile_grid(probe.grid));
  run.add("grid.png");
  std::ostringstream csv;
  csv << "checkpoint,seed,perceptual_distance\n" << std::setprecision(9);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t k = 0; k < seeds.size(); ++k) csv << labels[i] << ',' << seeds[k] << ',' << probe.distance[i][k] << '\n';
  util::write_text_atomic(run.dir / "probe.csv", csv.str());
  run.add("probe.csv");
  json means = json::object();
  for (std::size_t i = 0; i < labels.size(); ++i) means[labels[i]] = probe.mean_distance[i];
  run.manifest.seeds = {{"first", spec.seed}, {"count", n}};
  run.manifest.results = {{"mean_distance", means},
                          {"grid", {{"rows", labels.size()}, {"cols", seeds.size()}}},
                          {"init_minus_final", probe.mean_distance.front() - probe.mean_distance.back()}};
  return run.finish();
}

}  // namespace

Loaded load_components(const fs::path& comps) {
  Loaded L;
  L.ae_manifest = require_manifest(comps / "ae", "pretrain-ae", "this command");
  L.base_manifest = require_manifest(comps / "base", "pretrain-base", "this command");
  const auto& res = L.base_manifest.results;
  if (!res.contains("caption_probe") || !res.at("caption_probe").value("passed", false))
    throw DependencyError((comps / "base").string() + " holds a base model that did not pass its caption probe");
  const auto& fp = L.base_manifest.fingerprints;
  for (const char* f : {"autoencoder.ckpt"})
    if (!fs::exists(comps / "ae" / f)) throw DependencyError("missing " + (comps / "ae" / f).string());
  for (const char* f : {"denoiser.ckpt", "text_table.ckpt", "feature_encoder.ckpt"})
    if (!fs::exists(comps / "base" / f))
      throw DependencyError("missing " + (comps / "base" / f).string() + " (run pretrain-base)");
  L.ae = std::make_unique<codec::Autoencoder<float>>(codec::load_autoencoder(comps / "ae" / "autoencoder.ckpt"));
  expect_fingerprint("autoencoder", fp.at("autoencoder"), L.ae->fingerprint());
  json extra;
  L.net = std::make_unique<denoiser::Denoiser<float>>(denoiser::load_denoiser(comps / "base" / "denoiser.ckpt", &extra));
  expect_fingerprint("denoiser", fp.at("denoiser"), L.net->fingerprint());
  L.cond = std::make_unique<text::TextConditioner<float>>(text::load_conditioner(comps / "base" / "text_table.ckpt"));
  expect_fingerprint("text table", fp.at("text_table"), L.cond->table_fingerprint());
  L.enc = std::make_unique<metrics::FeatureEncoder>(metrics::load_feature_encoder(comps / "base" / "feature_encoder.ckpt"));
  expect_fingerprint("feature encoder", fp.at("feature_encoder"), L.enc->fingerprint());
  L.sched = schedule_from(extra.at("schedule"));
  L.net->set_trainable(false);
  L.ae->set_trainable(false);
  L.cond->table_params().set_trainable(false);
  return L;
}

data::Image load_reference(const std::string& spec) {
  if (spec.rfind("builtin:", 0) == 0) {
    const auto rest = spec.substr(8);
    const auto colon = rest.rfind(':');
    try {
      const auto kind = data::parse_reference_kind(rest.substr(0, colon));
      const std::uint64_t seed = colon == std::string::npos ? 1 : std::stoull(rest.substr(colon + 1));
      return data::make_reference(kind, seed);
    } catch (const std::exception& e) {
      throw ConfigError("reference '" + spec + "': " + e.what());
    }
  }
  if (spec.empty()) throw ConfigError("reference is required");
  try {
    return data::read_png(spec);
  } catch (const data::ImageIoError& e) {
    throw ConfigError(std::string("reference unreadable: ") + e.what());
  }
}

CommandResult run_command(const std::string& command, const json& cfg, std::ostream* log) {
  if (command == "pretrain-ae") return cmd_pretrain_ae(cfg, log);
  if (command == "pretrain-base") return cmd_pretrain_base(cfg, log);
  if (command == "learn") return cmd_learn(cfg, log);
  if (command == "generate") return cmd_generate(cfg, log);
  if (command == "compose") return cmd_compose(cfg, log);
  if (command == "edit") return cmd_edit(cfg, log);
  if (command == "evaluate") return cmd_evaluate(cfg, log);
  if (command == "sweep-gamma") return cmd_sweep_gamma(cfg, log);
  if (command == "rectify-probe") return cmd_rectify_probe(cfg, log);
  throw ConfigError("unknown command '" + command + "'");
}

int classify_exception(std::exception_ptr e, std::string* message) {
  auto set = [&](const std::string& kind, const std::exception& ex) {
    if (message) *message = kind + ": " + ex.what();
  };
  try {
    std::rethrow_exception(e);
  } catch (const DependencyError& ex) {
    set("dependency error", ex);
    return kDependencyError;
  } catch (const nn::CheckpointError& ex) {
    set("dependency error", ex);
    return kDependencyError;
  } catch (const text::ArtifactError& ex) {
    set("dependency error", ex);
    return kDependencyError;
  } catch (const diffusion::NumericError& ex) {
    set("numerical failure", ex);
    return kNumericalFailure;
  } catch (const codec::TrainingError& ex) {
    set("numerical failure", ex);
    return kNumericalFailure;
  } catch (const pnpt::FrozenDriftError& ex) {
    set("numerical failure", ex);
    return kNumericalFailure;
  } catch (const std::invalid_argument& ex) {
    set("config error", ex);
    return kConfigError;
  } catch (const std::exception& ex) {
    set("error", ex);
    return kFailure;
  } catch (...) {
    if (message) *message = "error: unknown exception";
    return kFailure;
  }
}

int run_guarded(const std::string& command, const std::optional<fs::path>& config_file, const json& flags,
                std::string* message, CommandResult* result, std::ostream* log) {
  try {
    const auto file_cfg = config_file ? load_config_file(*config_file) : json();
    const auto cfg = resolve_config(file_cfg, flags);
    auto r = run_command(command, cfg, log);
    if (result) *result = std::move(r);
    if (message) message->clear();
    return kOk;
  } catch (...) {
    return classify_exception(std::current_exception(), message);
  }
}

}  // namespace pnptlab::harness
