#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "harness/config.hpp"
#include "harness/manifest.hpp"

// The experiment commands. pretrain-ae and pretrain-base write into
// <components>/ae and <components>/base; every other command writes into
// its `out` directory (default runs/<command>).
namespace pnptlab::harness {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDependencyError = 3, kNumericalFailure = 4 };

const std::vector<std::string>& command_names();

// Frozen components loaded from a components directory.
struct Loaded {
  diffusion::NoiseSchedule sched;
  std::unique_ptr<codec::Autoencoder<float>> ae;
  std::unique_ptr<denoiser::Denoiser<float>> net;
  std::unique_ptr<text::TextConditioner<float>> cond;
  std::unique_ptr<metrics::FeatureEncoder> enc;
  RunManifest ae_manifest, base_manifest;
  pnpt::Components<float> components() { return {sched, *net, *cond, *ae}; }
  guidance::Stack stack() const { return {sched, *net, *cond, *ae}; }
};

// Throws DependencyError naming the missing artifact or mismatched fingerprint.
Loaded load_components(const std::filesystem::path& components);

// "builtin:<kind>:<seed>" or a PNG path.
data::Image load_reference(const std::string& spec);

struct CommandResult {
  std::filesystem::path out_dir;
  RunManifest manifest;
};

// Runs one command on a resolved config. Throws ConfigError, DependencyError,
// numeric errors or runtime errors.
CommandResult run_command(const std::string& command, const nlohmann::json& cfg, std::ostream* log = nullptr);

// Maps an in-flight exception to an exit code and message.
int classify_exception(std::exception_ptr e, std::string* message);

// Resolves (file, flags) and runs; never throws.
int run_guarded(const std::string& command, const std::optional<std::filesystem::path>& config_file,
                const nlohmann::json& flags, std::string* message, CommandResult* result = nullptr,
                std::ostream* log = nullptr);

// Table-5-shaped CSV: header `setting,<metric columns>`, one row per setting.
std::string table5_header();
inline const std::vector<std::string>& sweep_settings() {
  static const std::vector<std::string> s{"gamma=3 w/o L_rec", "gamma=2", "gamma=3", "gamma=5", "gamma=7"};
  return s;
}

}  // namespace pnptlab::harness
