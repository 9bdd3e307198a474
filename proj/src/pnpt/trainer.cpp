#include "pnpt/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <sstream>

#include "util/io.hpp"

namespace pnptlab::pnpt {

using nn::Var;

AblationMode parse_ablation(const std::string& s) {
  if (s == "full") return AblationMode::full;
  if (s == "ti-like" || s == "ti_like") return AblationMode::ti_like;
  throw std::invalid_argument("unknown ablation mode '" + s + "' (expected full or ti-like)");
}

std::string to_string(AblationMode m) { return m == AblationMode::full ? "full" : "ti-like"; }

LossTarget parse_loss_target(const std::string& s) {
  if (s == "latent") return LossTarget::latent;
  if (s == "epsilon") return LossTarget::epsilon;
  throw std::invalid_argument("unknown loss target '" + s + "' (expected latent or epsilon)");
}

std::string to_string(LossTarget t) { return t == LossTarget::latent ? "latent" : "epsilon"; }

void PNPTConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("pnpt config: " + m); };
  if (!(gamma > 0.0) || !std::isfinite(gamma)) fail("gamma must be > 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be >= 0");
  if (max_steps < 1) fail("max_steps must be >= 1");
  if (k_pos < 1 || (uses_negative() && k_neg < 1)) fail("k_pos and k_neg must be >= 1");
  if (k_pos > text::kSeqLen || (uses_negative() && k_neg > text::kSeqLen)) fail("k exceeds the sequence length");
  if (lambda_rec < 0.0) fail("lambda_rec must be >= 0");
  if (rec_every < 1) fail("rec_every must be >= 1");
  if (batch_size != 1) fail("batch_size is fixed at 1");
  if (flip_probability < 0.0 || flip_probability > 1.0) fail("flip_probability must be in [0, 1]");
  if (checkpoint_every < 1) fail("checkpoint_every must be >= 1");
  if (preview_every < 0) fail("preview_every must be >= 0");
  if (concept_name.empty() || concept_name.find_first_of(" \t^") != std::string::npos)
    fail("concept_name must be a single token without '^'");
}

namespace {

std::string init_kind_str(text::InitKind k) {
  switch (k) {
    case text::InitKind::word_mean: return "word-mean";
    case text::InitKind::specific_word: return "word";
    case text::InitKind::gaussian: return "gaussian";
  }
  return "word-mean";
}

text::InitKind parse_init_kind(const std::string& s) {
  if (s == "word-mean") return text::InitKind::word_mean;
  if (s == "word") return text::InitKind::specific_word;
  if (s == "gaussian") return text::InitKind::gaussian;
  throw std::invalid_argument("unknown init kind '" + s + "'");
}

}  // namespace

nlohmann::json PNPTConfig::to_json() const {
  return {{"gamma", gamma},
          {"learning_rate", learning_rate},
          {"max_steps", max_steps},
          {"k_pos", k_pos},
          {"k_neg", k_neg},
          {"lambda_rec", lambda_rec},
          {"rec_enabled", rec_enabled},
          {"rec_every", rec_every},
          {"batch_size", batch_size},
          {"seed", seed},
          {"ablation_mode", to_string(ablation_mode)},
          {"loss_target", to_string(loss_target)},
          {"concept_name", concept_name},
          {"init", {{"kind", init_kind_str(init.kind)}, {"word", init.word}, {"sigma", init.sigma}}},
          {"flip_probability", flip_probability},
          {"checkpoint_every", checkpoint_every},
          {"preview_every", preview_every}};
}

PNPTConfig PNPTConfig::from_json(const nlohmann::json& j, const PNPTConfig& base) {
  if (!j.is_object()) throw std::invalid_argument("pnpt config: expected a JSON object");
  PNPTConfig c = base;
  const auto known = c.to_json();
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw std::invalid_argument("pnpt config: unknown key '" + k + "'");
  try {
    c.gamma = j.value("gamma", c.gamma);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.k_pos = j.value("k_pos", c.k_pos);
    c.k_neg = j.value("k_neg", c.k_neg);
    c.lambda_rec = j.value("lambda_rec", c.lambda_rec);
    c.rec_enabled = j.value("rec_enabled", c.rec_enabled);
    c.rec_every = j.value("rec_every", c.rec_every);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("ablation_mode")) c.ablation_mode = parse_ablation(j.at("ablation_mode").get<std::string>());
    if (j.contains("loss_target")) c.loss_target = parse_loss_target(j.at("loss_target").get<std::string>());
    c.concept_name = j.value("concept_name", c.concept_name);
    if (j.contains("init")) {
      const auto& i = j.at("init");
      if (i.contains("kind")) c.init.kind = parse_init_kind(i.at("kind").get<std::string>());
      c.init.word = i.value("word", c.init.word);
      c.init.sigma = i.value("sigma", c.init.sigma);
    }
    c.flip_probability = j.value("flip_probability", c.flip_probability);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.preview_every = j.value("preview_every", c.preview_every);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("pnpt config: ") + e.what());
  }
  return c;
}

PNPTConfig PNPTConfig::from_json(const nlohmann::json& j) { return from_json(j, PNPTConfig{}); }

nlohmann::json Fingerprints::to_json() const {
  return {{"denoiser", denoiser}, {"autoencoder", autoencoder}, {"text_table", table}};
}

template <class T>
Fingerprints fingerprints(const Components<T>& c) {
  return {c.net.fingerprint(), c.ae.fingerprint(), c.cond.table_fingerprint()};
}

namespace {

template <class T>
Var<T> prompt_embedding(const text::TextConditioner<T>& cond, const std::string& prompt, text::Polarity pol) {
  return cond.embed(cond.tokenize(prompt, pol));
}

template <class T>
void require_frozen(const nn::ParamSet<T>& ps, const char* what) {
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ps.vars()[i].requires_grad())
      throw PreconditionError(std::string("pnpt: ") + what + " parameter '" + ps.names()[i] + "' is not frozen");
}

template <class T>
Var<T> gaussian_like(const nn::Shape& shape, std::mt19937_64& rng) {
  return Var<T>::constant(shape, nn::normal_init<T>(nn::numel(shape), 1.0, rng));
}

}  // namespace

template <class T>
LossTerms<T> pnpt_loss(const Var<T>& ref_latent, const Var<T>& ref_image, int t, const Var<T>& eps,
                       const PNPTConfig& cfg, const Components<T>& c, bool with_rec) {
  const auto z_t = diffusion::q_sample(ref_latent, t, eps, c.sched);
  const auto eps_p = c.net.predict_eps(z_t, t, prompt_embedding(c.cond, cfg.positive_prompt(), text::Polarity::positive));
  Var<T> eps_hat = eps_p;
  if (cfg.uses_negative()) {
    const auto eps_n =
        c.net.predict_eps(z_t, t, prompt_embedding(c.cond, cfg.negative_prompt(), text::Polarity::negative));
    eps_hat = guidance::fuse(eps_p, eps_n, static_cast<T>(cfg.gamma));
  }
  const auto z0_hat = diffusion::eps_to_x0(z_t, t, eps_hat, c.sched);
  LossTerms<T> out;
  out.l_pnpt = cfg.loss_target == LossTarget::latent ? nn::mse_loss(z0_hat, ref_latent) : nn::mse_loss(eps_hat, eps);
  out.total = out.l_pnpt;
  if (with_rec) {
    out.l_rec = nn::l1_loss(c.ae.decode(z0_hat), ref_image);
    out.total = nn::add(out.l_pnpt, nn::scale(out.l_rec, static_cast<T>(cfg.lambda_rec)));
  } else {
    // Diagnostic only: decoded without a tape.
    out.l_rec = nn::l1_loss(c.ae.decode(z0_hat.detach()), ref_image);
  }
  return out;
}

template <class T>
TrainState<T> begin_training(const PNPTConfig& cfg, Components<T>& c) {
  cfg.validate();
  require_frozen(c.net.params(), "denoiser");
  require_frozen(c.ae.params(), "autoencoder");
  require_frozen(c.cond.table_params(), "text table");
  TrainState<T> s;
  s.rng.seed(data::mix_seed(cfg.seed, 0x9E57));
  std::mt19937_64 init_rng(data::mix_seed(cfg.seed, 0x1417));
  c.cond.remove_pseudo_word(cfg.concept_name, text::Polarity::positive);
  c.cond.remove_pseudo_word(cfg.concept_name, text::Polarity::negative);
  c.cond.register_pseudo_word(cfg.concept_name, text::Polarity::positive, cfg.k_pos, cfg.init, init_rng);
  s.positive = c.cond.find(cfg.concept_name, text::Polarity::positive);
  std::vector<Var<T>> tuned{s.positive->vectors};
  if (cfg.uses_negative()) {
    c.cond.register_pseudo_word(cfg.concept_name, text::Polarity::negative, cfg.k_neg, cfg.init, init_rng);
    s.negative = c.cond.find(cfg.concept_name, text::Polarity::negative);
    tuned.push_back(s.negative->vectors);
  }
  s.frozen = fingerprints<T>(c);
  nn::AdamConfig ac;
  ac.lr = cfg.learning_rate;
  s.optimizer = std::make_unique<nn::Adam<T>>(std::move(tuned), ac);
  return s;
}

template <class T>
const StepLog& pnpt_step(const Var<T>& ref_latent, const Var<T>& ref_image, TrainState<T>& state,
                         const PNPTConfig& cfg, Components<T>& c) {
  if (!state.optimizer) throw PreconditionError("pnpt_step: training was not started");
  const long step = state.step + 1;
  std::uniform_int_distribution<int> tdist(1, c.sched.T);
  const int t = tdist(state.rng);
  const auto eps = gaussian_like<T>(ref_latent.shape(), state.rng);
  const bool rec = cfg.rec_active(step);
  const auto terms = pnpt_loss(ref_latent, ref_image, t, eps, cfg, c, rec);
  StepLog log;
  log.step = step;
  log.t = t;
  log.l_pnpt = static_cast<double>(terms.l_pnpt.item());
  log.l_rec = static_cast<double>(terms.l_rec.item());
  log.total = static_cast<double>(terms.total.item());
  if (!std::isfinite(log.total) || !std::isfinite(log.l_rec)) {
    std::ostringstream os;
    os << "pnpt: non-finite loss at step " << step << " (t=" << t << ", alpha_bar=" << c.sched.alpha_bar(t)
       << ", L_pnpt=" << log.l_pnpt << ", L_rec=" << log.l_rec << ")";
    throw diffusion::NumericError(os.str());
  }
  nn::backward(terms.total);
  state.optimizer->step();
  state.positive->steps = step;
  if (state.negative) state.negative->steps = step;
  state.step = step;
  state.history.push_back(log);
  return state.history.back();
}

template <class T>
void verify_frozen(const TrainState<T>& state, const Components<T>& c) {
  const auto now = fingerprints<T>(c);
  auto check = [](const std::string& what, const std::string& a, const std::string& b) {
    if (a != b) throw FrozenDriftError("pnpt: " + what + " fingerprint changed from " + a + " to " + b);
  };
  check("denoiser", state.frozen.denoiser, now.denoiser);
  check("autoencoder", state.frozen.autoencoder, now.autoencoder);
  check("text table", state.frozen.table, now.table);
}

double smoothed_final_loss(const std::vector<StepLog>& history) {
  if (history.empty()) throw std::invalid_argument("smoothed_final_loss: empty history");
  const std::size_t n = std::max<std::size_t>(1, history.size() / 10);
  double s = 0;
  for (std::size_t i = history.size() - n; i < history.size(); ++i) s += history[i].l_pnpt;
  return s / n;
}

double initial_loss(const std::vector<StepLog>& history, int steps) {
  if (history.empty()) throw std::invalid_argument("initial_loss: empty history");
  const std::size_t n = std::min(history.size(), static_cast<std::size_t>(steps));
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += history[i].l_pnpt;
  return s / n;
}

double reconstruction_error(const data::Image& reference, const PNPTConfig& cfg, Components<float>& c, int draws,
                            std::uint64_t seed) {
  const auto x = data::to_tensor<float>(reference);
  const auto z0 = c.ae.encode(x);
  std::mt19937_64 rng(data::mix_seed(seed, 0x7EC));
  std::uniform_int_distribution<int> tdist(1, c.sched.T);
  double total = 0;
  for (int i = 0; i < draws; ++i) {
    const int t = tdist(rng);
    const auto eps = gaussian_like<float>(z0.shape(), rng);
    total += pnpt_loss(z0, x, t, eps, cfg, c, false).l_rec.item();
  }
  return total / draws;
}

void write_loss_csv(const std::vector<StepLog>& history, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "step,L_pnpt,L_rec,total\n" << std::setprecision(9);
  for (const auto& h : history) os << h.step << ',' << h.l_pnpt << ',' << h.l_rec << ',' << h.total << '\n';
  util::write_text_atomic(path, os.str());
}

namespace {

std::string step_name(long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06ld", step);
  return buf;
}

guidance::GuidanceSpec preview_spec(const PNPTConfig& cfg, const TrainOptions& opts) {
  guidance::GuidanceSpec g;
  g.positive_prompt = cfg.positive_prompt();
  g.negative_prompt = cfg.negative_prompt();
  g.gamma = cfg.uses_negative() ? cfg.gamma : 1.0;
  g.steps = opts.preview_steps;
  g.seed = opts.preview_seed;
  return g;
}

long count_changed(const text::EmbeddingArtifact& a, const text::EmbeddingArtifact& b) {
  long n = 0;
  for (const auto& ea : a.entries)
    for (const auto& eb : b.entries)
      if (ea.name == eb.name && ea.polarity == eb.polarity)
        for (std::size_t i = 0; i < ea.vectors.size() && i < eb.vectors.size(); ++i) n += ea.vectors[i] != eb.vectors[i];
  return n;
}

// Only the run's own words, so checkpoints never carry unrelated concepts.
text::EmbeddingArtifact run_snapshot(const text::TextConditioner<float>& cond, const PNPTConfig& cfg) {
  auto art = text::snapshot_embeddings(cond);
  std::erase_if(art.entries, [&](const auto& e) {
    return e.name != cfg.concept_name || (e.polarity == text::Polarity::negative && !cfg.uses_negative());
  });
  return art;
}

}  // namespace

TrainResult train(std::span<const data::Image> references, const PNPTConfig& cfg, Components<float>& c,
                  const TrainOptions& opts) {
  if (references.size() != 1)
    throw PreconditionError("pnpt: exactly one reference image is accepted, got " + std::to_string(references.size()));
  cfg.validate();
  const auto& ref = references[0];
  const int size = c.ae.config().image_size;
  if (ref.channels != 3 || ref.height != size || ref.width != size)
    throw PreconditionError("pnpt: reference must be 3x" + std::to_string(size) + "x" + std::to_string(size));

  const auto t0 = std::chrono::steady_clock::now();
  const Var<float> x[2] = {data::to_tensor<float>(ref), data::to_tensor<float>(data::flip_horizontal(ref))};
  const Var<float> z[2] = {c.ae.encode(x[0]).detach(), c.ae.encode(x[1]).detach()};

  auto state = begin_training<float>(cfg, c);
  TrainResult res;
  const bool write = !opts.run_dir.empty();
  const auto& dir = opts.run_dir;
  auto record = [&](const std::filesystem::path& rel) { res.artifacts.push_back(rel); };
  auto checkpoint = [&](long step) {
    const auto rel = std::filesystem::path("embeddings") / (step_name(step) + ".json");
    text::save_embeddings(run_snapshot(c.cond, cfg), dir / rel);
    res.checkpoints.push_back(dir / rel);
    record(rel);
  };
  auto preview = [&](long step) {
    const guidance::Stack s{c.sched, c.net, c.cond, c.ae};
    const auto rel = std::filesystem::path("previews") / (step_name(step) + ".png");
    std::filesystem::create_directories(dir / "previews");
    data::write_png(dir / rel, guidance::sample(preview_spec(cfg, opts), s));
    record(rel);
  };
  const auto initial = run_snapshot(c.cond, cfg);
  if (write) {
    std::filesystem::create_directories(dir);
    util::write_text_atomic(dir / "config.json", cfg.to_json().dump(2) + "\n");
    record("config.json");
    checkpoint(0);
  }

  std::bernoulli_distribution flip(cfg.flip_probability);
  for (long step = 1; step <= cfg.max_steps; ++step) {
    const int f = flip(state.rng) ? 1 : 0;
    pnpt_step<float>(z[f], x[f], state, cfg, c);
    state.history.back().flipped = f == 1;
    if (opts.log_progress && (step % 100 == 0 || step == cfg.max_steps)) {
      const auto& h = state.history;
      double lp = 0, lr = 0;
      const std::size_t n = std::min<std::size_t>(100, h.size());
      for (std::size_t i = h.size() - n; i < h.size(); ++i) {
        lp += h[i].l_pnpt;
        lr += h[i].l_rec;
      }
      std::fprintf(stderr, "[learn] step %ld  L_pnpt %.5f  L_rec %.5f\n", step, lp / n, lr / n);
    }
    if (write) {
      if (step % cfg.checkpoint_every == 0 || step == cfg.max_steps) {
        verify_frozen(state, c);
        checkpoint(step);
      }
      if (cfg.preview_every > 0 && (step % cfg.preview_every == 0 || step == cfg.max_steps)) preview(step);
    }
  }
  verify_frozen(state, c);

  res.embeddings = run_snapshot(c.cond, cfg);
  res.history = std::move(state.history);
  res.fingerprints = state.frozen;
  res.changed_values = count_changed(initial, res.embeddings);
  if (write) {
    text::save_embeddings(res.embeddings, dir / "embeddings.json");
    record("embeddings.json");
    write_loss_csv(res.history, dir / "loss.csv");
    record("loss.csv");
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

ProbeResult rectification_probe(const text::EmbeddingArtifact& positive,
                                const std::vector<text::EmbeddingArtifact>& negatives,
                                const std::vector<std::string>& labels, const std::string& concept_name,
                                const std::vector<std::uint64_t>& seeds, const guidance::GuidanceSpec& spec,
                                const data::Image& reference, Components<float>& c,
                                const metrics::FeatureEncoder& enc) {
  if (negatives.empty()) throw PreconditionError("rectification probe: no negative checkpoints");
  if (labels.size() != negatives.size()) throw PreconditionError("rectification probe: one label per checkpoint");
  if (seeds.empty()) throw PreconditionError("rectification probe: no seeds");
  auto pick = [&](const text::EmbeddingArtifact& art, text::Polarity pol, const std::string& what) {
    text::EmbeddingArtifact out;
    out.dim = art.dim;
    for (const auto& e : art.entries)
      if (e.name == concept_name && e.polarity == pol) out.entries.push_back(e);
    if (out.entries.empty())
      throw PreconditionError("rectification probe: " + what + " lacks " + concept_name +
                              (pol == text::Polarity::positive ? "^p" : "^n"));
    return out;
  };
  text::install_embeddings(pick(positive, text::Polarity::positive, "positive checkpoint"), c.cond);
  ProbeResult r;
  r.checkpoint_labels = labels;
  r.seeds = seeds;
  const guidance::Stack s{c.sched, c.net, c.cond, c.ae};
  for (std::size_t i = 0; i < negatives.size(); ++i) {
    text::install_embeddings(pick(negatives[i], text::Polarity::negative, "checkpoint " + labels[i]), c.cond);
    std::vector<data::Image> row;
    for (auto seed : seeds) {
      auto g = spec;
      g.positive_prompt = concept_name + "^p";
      g.negative_prompt = concept_name + "^n";
      g.seed = seed;
      row.push_back(guidance::sample(g, s));
    }
    auto d = metrics::perceptual_distances(row, reference, enc);
    double m = 0;
    for (double v : d) m += v;
    r.mean_distance.push_back(m / d.size());
    r.distance.push_back(std::move(d));
    r.grid.push_back(std::move(row));
  }
  return r;
}

template Fingerprints fingerprints<float>(const Components<float>&);
template Fingerprints fingerprints<double>(const Components<double>&);
template LossTerms<float> pnpt_loss<float>(const Var<float>&, const Var<float>&, int, const Var<float>&,
                                           const PNPTConfig&, const Components<float>&, bool);
template LossTerms<double> pnpt_loss<double>(const Var<double>&, const Var<double>&, int, const Var<double>&,
                                             const PNPTConfig&, const Components<double>&, bool);
template TrainState<float> begin_training<float>(const PNPTConfig&, Components<float>&);
template TrainState<double> begin_training<double>(const PNPTConfig&, Components<double>&);
template const StepLog& pnpt_step<float>(const Var<float>&, const Var<float>&, TrainState<float>&, const PNPTConfig&,
                                         Components<float>&);
template const StepLog& pnpt_step<double>(const Var<double>&, const Var<double>&, TrainState<double>&,
                                          const PNPTConfig&, Components<double>&);
template void verify_frozen<float>(const TrainState<float>&, const Components<float>&);
template void verify_frozen<double>(const TrainState<double>&, const Components<double>&);

}  // namespace pnptlab::pnpt
