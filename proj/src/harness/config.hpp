#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "codec/autoencoder.hpp"
#include "denoiser/unet.hpp"
#include "diffusion/diffusion.hpp"
#include "guidance/guidance.hpp"
#include "metrics/metrics.hpp"
#include "pnpt/trainer.hpp"

// Resolved run configuration: built-in defaults, overlaid by a JSON config
// file, overlaid by command-line flags. Keys mirror PNPTConfig and
// GuidanceSpec field names; `gamma` and `seed` are shared by both.
namespace pnptlab::harness {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json default_config();

// Recursive overlay. Keys absent from `base` are rejected; `where` names the
// source in the error.
nlohmann::json overlay_config(const nlohmann::json& base, const nlohmann::json& over, const std::string& where);
nlohmann::json resolve_config(const nlohmann::json& file_cfg, const nlohmann::json& flag_cfg);
nlohmann::json load_config_file(const std::filesystem::path& path);

pnpt::PNPTConfig pnpt_config(const nlohmann::json& cfg);
guidance::GuidanceSpec guidance_spec(const nlohmann::json& cfg);
diffusion::NoiseSchedule schedule_from(const nlohmann::json& s);
codec::AutoencoderConfig autoencoder_config(const nlohmann::json& cfg);
codec::AutoencoderTrainConfig autoencoder_train_config(const nlohmann::json& cfg);
denoiser::DenoiserConfig denoiser_config(const nlohmann::json& cfg);
denoiser::BaseTrainConfig base_train_config(const nlohmann::json& cfg);
metrics::FeatureEncoderConfig encoder_config(const nlohmann::json& cfg);
metrics::EncoderTrainConfig encoder_train_config(const nlohmann::json& cfg);

}  // namespace pnptlab::harness
