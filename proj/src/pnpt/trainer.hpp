#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "codec/autoencoder.hpp"
#include "data/image.hpp"
#include "denoiser/unet.hpp"
#include "diffusion/diffusion.hpp"
#include "guidance/guidance.hpp"
#include "metrics/metrics.hpp"
#include "nn/optim.hpp"
#include "text/conditioner.hpp"

// One-shot tuning of a positive and a negative pseudo-word against a single
// reference image. Every other parameter stays frozen.
namespace pnptlab::pnpt {

enum class AblationMode { full, ti_like };
AblationMode parse_ablation(const std::string& s);
std::string to_string(AblationMode m);

// latent: fused prediction mapped to a clean-latent estimate and compared with
// E(x). epsilon: fused prediction compared with the drawn noise.
enum class LossTarget { latent, epsilon };
LossTarget parse_loss_target(const std::string& s);
std::string to_string(LossTarget t);

class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FrozenDriftError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PNPTConfig {
  double gamma = 3.0;
  double learning_rate = 0.0025;
  int max_steps = 4000;
  int k_pos = 3;
  int k_neg = 3;
  double lambda_rec = 1.0;
  bool rec_enabled = true;
  int rec_every = 1;
  int batch_size = 1;
  std::uint64_t seed = 0;
  AblationMode ablation_mode = AblationMode::full;
  LossTarget loss_target = LossTarget::latent;
  std::string concept_name = "S*";
  text::InitPolicy init;
  double flip_probability = 0.5;
  int checkpoint_every = 250;
  int preview_every = 1000;  // 0 disables previews

  void validate() const;
  // ti-like runs tune the positive word only, without fusion or L_rec.
  bool uses_negative() const { return ablation_mode == AblationMode::full; }
  bool rec_active(long step) const {
    return uses_negative() && rec_enabled && lambda_rec > 0.0 && step % rec_every == 0;
  }
  std::string positive_prompt() const { return concept_name + "^p"; }
  std::string negative_prompt() const { return uses_negative() ? concept_name + "^n" : ""; }
  nlohmann::json to_json() const;
  // Missing keys keep `base` values; unknown keys are rejected.
  static PNPTConfig from_json(const nlohmann::json& j, const PNPTConfig& base);
  static PNPTConfig from_json(const nlohmann::json& j);
};

template <class T>
struct Components {
  const diffusion::NoiseSchedule& sched;
  const denoiser::Denoiser<T>& net;
  text::TextConditioner<T>& cond;
  const codec::Autoencoder<T>& ae;
};

struct Fingerprints {
  std::string denoiser, autoencoder, table;
  bool operator==(const Fingerprints&) const = default;
  nlohmann::json to_json() const;
};

template <class T>
Fingerprints fingerprints(const Components<T>& c);

struct StepLog {
  long step = 0;
  int t = 0;
  double l_pnpt = 0.0;
  double l_rec = 0.0;  // diagnostic on steps where it is not optimized
  double total = 0.0;
  bool flipped = false;
};

template <class T>
struct LossTerms {
  nn::Var<T> total, l_pnpt, l_rec;  // l_rec is tape-free when not optimized
};

// Loss for fixed (t, eps). Pure in its inputs; the pseudo-words are read
// from the conditioner.
template <class T>
LossTerms<T> pnpt_loss(const nn::Var<T>& ref_latent, const nn::Var<T>& ref_image, int t, const nn::Var<T>& eps,
                       const PNPTConfig& cfg, const Components<T>& c, bool with_rec);

template <class T>
struct TrainState {
  long step = 0;
  std::mt19937_64 rng;
  text::PseudoWord<T>* positive = nullptr;
  text::PseudoWord<T>* negative = nullptr;  // null in ti-like mode
  std::vector<StepLog> history;
  Fingerprints frozen;
  std::unique_ptr<nn::Adam<T>> optimizer;
};

// Registers fresh pseudo-words (replacing same-named ones), captures the
// frozen fingerprints and builds the optimizer over the new vectors only.
template <class T>
TrainState<T> begin_training(const PNPTConfig& cfg, Components<T>& c);

// One optimization step: draw t and eps, fuse the two predictions, take the
// loss and update the pseudo-word vectors. Throws NumericError on a
// non-finite loss.
template <class T>
const StepLog& pnpt_step(const nn::Var<T>& ref_latent, const nn::Var<T>& ref_image, TrainState<T>& state,
                         const PNPTConfig& cfg, Components<T>& c);

template <class T>
void verify_frozen(const TrainState<T>& state, const Components<T>& c);

// Mean L_pnpt over the final 10% of steps and over steps 1..50.
double smoothed_final_loss(const std::vector<StepLog>& history);
double initial_loss(const std::vector<StepLog>& history, int steps = 50);

// Mean L1 between D(z0_hat) and the reference over fixed (t, eps) draws,
// under the run's own fusion rule.
double reconstruction_error(const data::Image& reference, const PNPTConfig& cfg, Components<float>& c, int draws = 32,
                            std::uint64_t seed = 0);

struct TrainOptions {
  std::filesystem::path run_dir;  // empty: nothing is written
  int preview_steps = 50;
  std::uint64_t preview_seed = 0;
  bool log_progress = false;
};

struct TrainResult {
  text::EmbeddingArtifact embeddings;
  std::vector<StepLog> history;
  Fingerprints fingerprints;
  std::vector<std::filesystem::path> checkpoints;  // includes step 0 and the final step
  std::vector<std::filesystem::path> artifacts;    // every file written, relative to run_dir
  double seconds = 0.0;
  long changed_values = 0;  // embedding scalars that differ from their initial values
};

void write_loss_csv(const std::vector<StepLog>& history, const std::filesystem::path& path);

// Exactly one reference is accepted.
TrainResult train(std::span<const data::Image> references, const PNPTConfig& cfg, Components<float>& c,
                  const TrainOptions& opts = {});

struct ProbeResult {
  std::vector<std::string> checkpoint_labels;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<data::Image>> grid;  // [checkpoint][seed]
  std::vector<std::vector<double>> distance;   // perceptual distance to the reference
  std::vector<double> mean_distance;           // per checkpoint
};

// Fixes the positive word from `positive` and sweeps the negative word over
// `negatives`, sampling every seed with identical noise.
ProbeResult rectification_probe(const text::EmbeddingArtifact& positive,
                                const std::vector<text::EmbeddingArtifact>& negatives,
                                const std::vector<std::string>& labels, const std::string& concept_name,
                                const std::vector<std::uint64_t>& seeds, const guidance::GuidanceSpec& spec,
                                const data::Image& reference, Components<float>& c,
                                const metrics::FeatureEncoder& enc);

}  // namespace pnptlab::pnpt
