#include <pnptlab/pnptlab.h>

#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

namespace {

struct Flags {
  std::string config;
  std::optional<long long> seed;
  std::optional<double> gamma;
  std::optional<int> steps;
  std::optional<std::string> out, reference, prompt, negative_prompt, mask, ablation, components, images, learn_run,
      eval_text;
  std::optional<double> strength;
  std::optional<int> n_samples;
  std::vector<std::string> embeddings, concepts;
  std::optional<std::string> concept_name;
  bool quiet = false;
};

void add_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON config file");
  sub->add_option("--seed", f.seed, "Run seed");
  sub->add_option("--gamma", f.gamma, "Fusion scale");
  sub->add_option("--steps", f.steps, "Training steps (learn, sweep, pretrain) or sampling steps");
  sub->add_option("--out", f.out, "Output directory (components root for pretrain commands)");
  sub->add_option("--reference", f.reference, "PNG path or builtin:<kind>:<seed>");
  sub->add_option("--prompt", f.prompt, "Positive prompt");
  sub->add_option("--negative-prompt", f.negative_prompt, "Negative prompt");
  sub->add_option("--mask", f.mask, "Edit mask PNG");
  sub->add_option("--strength", f.strength, "Edit strength in (0, 1]");
  sub->add_option("--ablation", f.ablation, "full or ti-like");
  sub->add_option("--components", f.components, "Pretrained components directory");
  sub->add_option("--embeddings", f.embeddings, "Embedding artifact(s)");
  sub->add_option("--concepts", f.concepts, "Concept names for compose, one per embedding artifact");
  sub->add_option("--concept-name", f.concept_name, "Pseudo-word name for learn");
  sub->add_option("--images", f.images, "Directory of PNGs to evaluate");
  sub->add_option("--n-samples", f.n_samples, "Number of samples");
  sub->add_option("--learn-run", f.learn_run, "Learn run directory for rectify-probe");
  sub->add_option("--eval-text", f.eval_text, "Text used for CAS");
  sub->add_flag("--quiet", f.quiet, "Suppress progress output");
}

nlohmann::json to_json(const std::string& cmd, const Flags& f) {
  nlohmann::json j = nlohmann::json::object();
  const bool pretrain = cmd == "pretrain-ae" || cmd == "pretrain-base";
  if (f.seed) j["seed"] = *f.seed;
  if (f.gamma) j["gamma"] = *f.gamma;
  if (f.steps) {
    if (cmd == "learn")
      j["max_steps"] = *f.steps;
    else if (cmd == "sweep-gamma")
      j["sweep"]["max_steps"] = *f.steps;
    else if (cmd == "pretrain-ae")
      j["autoencoder_train"]["steps"] = *f.steps;
    else if (cmd == "pretrain-base")
      j["base_train"]["steps"] = *f.steps;
    else
      j["steps"] = *f.steps;
  }
  if (f.out) j[pretrain ? "components" : "out"] = *f.out;
  if (f.reference) j["reference"] = *f.reference;
  if (f.prompt) j["positive_prompt"] = *f.prompt;
  if (f.negative_prompt) j["negative_prompt"] = *f.negative_prompt;
  if (f.mask) j["mask"] = *f.mask;
  if (f.strength) j["strength"] = *f.strength;
  if (f.ablation) j["ablation_mode"] = *f.ablation;
  if (f.components) j["components"] = *f.components;
  if (!f.embeddings.empty()) j["embeddings"] = f.embeddings;
  if (!f.concepts.empty()) j["concepts"] = f.concepts;
  if (f.concept_name) j["concept_name"] = *f.concept_name;
  if (f.images) j["images"] = *f.images;
  if (f.n_samples) j["n_samples"] = *f.n_samples;
  if (f.learn_run) j["learn_run"] = *f.learn_run;
  if (f.eval_text) j["eval_text"] = *f.eval_text;
  if (f.quiet) j["log_progress"] = false;
  return j;
}

const char* describe(const std::string& cmd) {
  static const std::map<std::string, const char*> d{
      {"pretrain-ae", "Train the image autoencoder"},
      {"pretrain-base", "Train the base denoiser, text table and feature encoder"},
      {"learn", "Learn positive and negative pseudo-words from one reference"},
      {"generate", "Sample images with learned pseudo-words"},
      {"compose", "Sample from a prompt combining several learned concepts"},
      {"edit", "Noise-and-denoise edit of an image, optionally masked"},
      {"evaluate", "Score a directory of images against the reference"},
      {"sweep-gamma", "Run the fusion-scale ablation and write table5.csv"},
      {"rectify-probe", "Compare init and trained negatives on a fixed seed grid"},
  };
  const auto it = d.find(cmd);
  return it == d.end() ? "" : it->second;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PNPT one-shot concept learning lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", pnpt_version());
  bool print_defaults = false;
  app.add_flag("--print-default-config", print_defaults, "Print the built-in defaults and exit");
  Flags flags;
  for (int i = 0; i < pnpt_command_count(); ++i) add_flags(app.add_subcommand(pnpt_command_name(i), describe(pnpt_command_name(i))), flags);
  app.require_subcommand(0, 1);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : PNPT_ERR_CONFIG;
  }
  if (print_defaults) {
    char* s = pnpt_default_config_json();
    std::cout << (s ? s : "") << "\n";
    pnpt_string_free(s);
    return 0;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return PNPT_ERR_CONFIG;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  const auto flag_json = to_json(cmd, flags).dump();

  pnpt_result* r = nullptr;
  const pnpt_status st =
      pnpt_run(cmd.c_str(), flags.config.empty() ? nullptr : flags.config.c_str(), flag_json.c_str(), !flags.quiet, &r);
  if (st == PNPT_OK)
    std::cout << pnpt_result_out_dir(r) << "\n";
  else
    std::cerr << "error: " << pnpt_result_message(r) << "\n";
  pnpt_result_free(r);
  return st;
}
