#include "harness/config.hpp"

#include "util/io.hpp"

namespace pnptlab::codec {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AutoencoderTrainConfig, steps, batch, lr, final_lr_fraction, seed,
                                                holdout_fraction, l1_threshold, min_images, log_every)
}
namespace pnptlab::denoiser {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BaseTrainConfig, steps, batch, lr, final_lr_fraction, warmup,
                                                cond_dropout, ema_decay, seed, val_images, val_every, log_every)
}
namespace pnptlab::metrics {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EncoderTrainConfig, steps, batch, lr, seed, holdout_fraction,
                                                log_every)
}

namespace pnptlab::harness {

using nlohmann::json;

json default_config() {
  const pnpt::PNPTConfig p;
  auto ae_train = json(codec::AutoencoderTrainConfig{});
  ae_train["steps"] = 2400;
  auto base_train = json(denoiser::BaseTrainConfig{});
  base_train["steps"] = 6000;
  auto j = p.to_json();
  j.erase("seed");
  const guidance::GuidanceSpec g;
  j.update(json{
      {"components", "pnpt_components"},
      {"out", ""},
      {"seed", 0},
      {"positive_prompt", "S*^p"},
      {"negative_prompt", "S*^n"},
      {"steps", g.steps},
      {"eta", g.eta},
      {"reference", "builtin:composite-novel-shape:1"},
      {"mask", ""},
      {"strength", 0.75},
      {"n_samples", 8},
      {"embeddings", json::array()},
      {"concepts", json::array()},
      {"compose_template", ""},
      {"compose_negative_template", ""},
      {"compose_mode", "concatenate"},
      {"images", ""},
      {"eval_text", ""},
      {"learn_run", ""},
      {"probe_seeds", 8},
      {"log_progress", true},
      {"sweep", {{"samples", 8}, {"prompt", "a green S*^p"}, {"max_steps", 0}}},
      {"ae_dataset", {{"size", 2000}, {"seed", 101}, {"clutter_fraction", 0.5}}},
      {"autoencoder", codec::AutoencoderConfig{}.to_json()},
      {"autoencoder_train", ae_train},
      {"schedule", {{"kind", "linear"}, {"T", 1000}, {"beta_min", 0.00085}, {"beta_max", 0.012}}},
      {"base_dataset", {{"size", 6000}, {"seed", 202}, {"clutter_fraction", 0.3}}},
      {"denoiser", denoiser::DenoiserConfig{}.to_json()},
      {"base_train", base_train},
      {"encoder_dataset", {{"size", 4000}, {"seed", 303}}},
      {"feature_encoder", metrics::FeatureEncoderConfig{}.to_json()},
      {"encoder_train", json(metrics::EncoderTrainConfig{})},
      {"caption_probe", {{"per_class", 100}, {"min_accuracy", 0.9}, {"seed", 404}}},
  });
  return j;
}

json overlay_config(const json& base, const json& over, const std::string& where) {
  if (!over.is_object()) throw ConfigError(where + ": expected a JSON object");
  json out = base;
  for (const auto& [k, v] : over.items()) {
    if (!base.contains(k)) throw ConfigError(where + ": unknown key '" + k + "'");
    const auto& b = base.at(k);
    if (b.is_object() && !b.empty()) {
      out[k] = overlay_config(b, v, where + "." + k);
    } else {
      if (!b.is_null() && b.type() != v.type() && !(b.is_number() && v.is_number()) && !b.empty())
        throw ConfigError(where + ": key '" + k + "' expects " + std::string(b.type_name()) + ", got " +
                          v.type_name());
      out[k] = v;
    }
  }
  return out;
}

json resolve_config(const json& file_cfg, const json& flag_cfg) {
  auto cfg = default_config();
  if (!file_cfg.is_null()) cfg = overlay_config(cfg, file_cfg, "config file");
  if (!flag_cfg.is_null()) cfg = overlay_config(cfg, flag_cfg, "flags");
  return cfg;
}

json load_config_file(const std::filesystem::path& path) {
  std::string text;
  try {
    text = util::read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config file: ") + e.what());
  }
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
}

namespace {

template <class F>
auto wrap(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

pnpt::PNPTConfig pnpt_config(const json& cfg) {
  return wrap("pnpt config", [&] {
    json sub = pnpt::PNPTConfig{}.to_json();
    for (auto& [k, v] : sub.items()) v = cfg.at(k);
    sub["seed"] = cfg.at("seed");
    auto p = pnpt::PNPTConfig::from_json(sub);
    p.validate();
    return p;
  });
}

guidance::GuidanceSpec guidance_spec(const json& cfg) {
  return wrap("guidance", [&] {
    guidance::GuidanceSpec g;
    g.positive_prompt = cfg.at("positive_prompt").get<std::string>();
    g.negative_prompt = cfg.at("negative_prompt").get<std::string>();
    g.gamma = cfg.at("gamma").get<double>();
    g.steps = cfg.at("steps").get<int>();
    g.eta = cfg.at("eta").get<double>();
    g.seed = cfg.at("seed").get<std::uint64_t>();
    g.validate();
    return g;
  });
}

diffusion::NoiseSchedule schedule_from(const json& s) {
  return wrap("schedule", [&] {
    return diffusion::build_schedule(diffusion::parse_schedule_kind(s.at("kind").get<std::string>()),
                                     s.at("T").get<int>(), s.at("beta_min").get<double>(),
                                     s.at("beta_max").get<double>());
  });
}

codec::AutoencoderConfig autoencoder_config(const json& cfg) {
  return wrap("autoencoder", [&] {
    auto c = codec::AutoencoderConfig::from_json(cfg.at("autoencoder"));
    c.validate();
    return c;
  });
}

codec::AutoencoderTrainConfig autoencoder_train_config(const json& cfg) {
  return wrap("autoencoder_train", [&] { return cfg.at("autoencoder_train").get<codec::AutoencoderTrainConfig>(); });
}

denoiser::DenoiserConfig denoiser_config(const json& cfg) {
  return wrap("denoiser", [&] { return denoiser::DenoiserConfig::from_json(cfg.at("denoiser")); });
}

denoiser::BaseTrainConfig base_train_config(const json& cfg) {
  return wrap("base_train", [&] { return cfg.at("base_train").get<denoiser::BaseTrainConfig>(); });
}

metrics::FeatureEncoderConfig encoder_config(const json& cfg) {
  return wrap("feature_encoder", [&] { return metrics::FeatureEncoderConfig::from_json(cfg.at("feature_encoder")); });
}

metrics::EncoderTrainConfig encoder_train_config(const json& cfg) {
  return wrap("encoder_train", [&] { return cfg.at("encoder_train").get<metrics::EncoderTrainConfig>(); });
}

}  // namespace pnptlab::harness
