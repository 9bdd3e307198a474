#include "metrics/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "nn/checkpoint.hpp"
#include "nn/optim.hpp"

namespace pnptlab::metrics {

using nn::Var;

nlohmann::json FeatureEncoderConfig::to_json() const {
  return {{"image_size", image_size}, {"widths", widths},       {"embed_dim", embed_dim},
          {"n_shapes", n_shapes},     {"n_colors", n_colors},   {"n_backgrounds", n_backgrounds},
          {"temperature", temperature}};
}

FeatureEncoderConfig FeatureEncoderConfig::from_json(const nlohmann::json& j) {
  FeatureEncoderConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.widths = j.value("widths", c.widths);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.n_shapes = j.value("n_shapes", c.n_shapes);
  c.n_colors = j.value("n_colors", c.n_colors);
  c.n_backgrounds = j.value("n_backgrounds", c.n_backgrounds);
  c.temperature = j.value("temperature", c.temperature);
  return c;
}

FeatureEncoder::FeatureEncoder(const FeatureEncoderConfig& cfg, text::Vocabulary vocab, std::uint64_t seed)
    : cfg_(cfg), vocab_(std::move(vocab)) {
  if (cfg_.widths.size() != 4) throw std::invalid_argument("feature encoder: expects four conv widths");
  std::mt19937_64 rng(seed);
  int in = 3;
  for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
    convs_.push_back(nn::make_conv(params_, "conv" + std::to_string(i), in, cfg_.widths[i], 3, i < 3 ? 2 : 1, rng));
    in = cfg_.widths[i];
  }
  const int E = cfg_.embed_dim;
  embed_ = nn::make_linear(params_, "embed", in, E, rng);
  shape_head_ = nn::make_linear(params_, "head.shape", in, cfg_.n_shapes, rng);
  color_head_ = nn::make_linear(params_, "head.color", in, cfg_.n_colors, rng);
  bg_head_ = nn::make_linear(params_, "head.background", in, cfg_.n_backgrounds, rng);
  words_ = params_.add("caption.words", {vocab_.size(), E},
                       nn::normal_init<float>(static_cast<std::size_t>(vocab_.size()) * E, 1.0, rng));
  params_.set_trainable(false);
}

Activations FeatureEncoder::forward(const Var<float>& x) const {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg_.image_size || x.dim(3) != cfg_.image_size)
    throw nn::ShapeError("feature encoder: unexpected input " + nn::shape_str(x.shape()));
  Activations a;
  Var<float> h = x;
  for (const auto& c : convs_) {
    h = nn::silu(c(h));
    a.layers.push_back(h);
  }
  a.pooled = nn::global_avg_pool(h);
  return a;
}

Activations FeatureEncoder::forward(const std::vector<data::Image>& images) const {
  return forward(data::to_tensor<float>(std::span<const data::Image>(images)));
}

Var<float> FeatureEncoder::image_embedding(const Activations& a) const { return nn::l2_normalize_rows(embed_(a.pooled)); }

Logits FeatureEncoder::classify(const Activations& a) const {
  return {shape_head_(a.pooled), color_head_(a.pooled), bg_head_(a.pooled)};
}

std::vector<int> FeatureEncoder::caption_words(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream in(text);
  std::string chunk;
  while (in >> chunk) {
    if (chunk.find('^') != std::string::npos || chunk.find('*') != std::string::npos) continue;
    std::string w;
    auto flush = [&] {
      if (w.empty()) return;
      const int id = vocab_.id(w);
      if (id != text::Vocabulary::kUnk && id != text::Vocabulary::kPad) ids.push_back(id);
      w.clear();
    };
    for (char c : chunk) {
      const auto uc = static_cast<unsigned char>(c);
      if (std::isalnum(uc)) {
        w.push_back(static_cast<char>(std::tolower(uc)));
      } else {
        flush();
      }
    }
    flush();
  }
  return ids;
}

Var<float> FeatureEncoder::caption_embedding(const std::vector<std::string>& texts) const {
  const int V = vocab_.size();
  std::vector<float> bag(texts.size() * static_cast<std::size_t>(V), 0.0f);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto ids = caption_words(texts[i]);
    if (ids.empty()) throw std::invalid_argument("caption embedding: no base-vocabulary word in '" + texts[i] + "'");
    for (int id : ids) bag[i * V + static_cast<std::size_t>(id)] += 1.0f / ids.size();
  }
  auto b = Var<float>::constant({static_cast<int>(texts.size()), V}, std::move(bag));
  return nn::l2_normalize_rows(nn::linear(b, words_, Var<float>()));
}

namespace {

std::vector<std::string> class_captions(const data::GrammarConfig& g) {
  std::vector<std::string> out;
  for (const auto& s : g.shapes)
    for (const auto& c : g.colors) out.push_back("a " + c + " " + s);
  return out;
}

int argmax_row(std::span<const float> v, int row, int K) {
  const auto* p = v.data() + static_cast<std::size_t>(row) * K;
  return static_cast<int>(std::max_element(p, p + K) - p);
}

}  // namespace

FeatureEncoder train_feature_encoder(const std::vector<data::CaptionedImage>& dataset, const text::Vocabulary& vocab,
                                     const FeatureEncoderConfig& cfg, const EncoderTrainConfig& tcfg,
                                     EncoderTrainReport* report) {
  if (dataset.size() < 20) throw std::invalid_argument("train_feature_encoder: dataset too small");
  EncoderTrainReport local;
  EncoderTrainReport& rep = report ? *report : local;
  rep = {};
  FeatureEncoder enc(cfg, vocab, tcfg.seed);
  const int n_hold = std::max(1, static_cast<int>(std::lround(dataset.size() * tcfg.holdout_fraction)));
  const int n_train = static_cast<int>(dataset.size()) - n_hold;

  enc.params().set_trainable(true);
  nn::AdamConfig ac;
  ac.lr = tcfg.lr;
  nn::Adam<float> opt(enc.params().vars(), ac);
  std::mt19937_64 rng(data::mix_seed(tcfg.seed, 0xFE));
  std::vector<int> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t B = static_cast<std::size_t>(std::min(tcfg.batch, n_train));
  const float inv_temp = static_cast<float>(1.0 / cfg.temperature);
  double acc = 0;
  int acc_n = 0;
  for (int step = 1; step <= tcfg.steps; ++step) {
    if (cursor + B > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const double p = static_cast<double>(step - 1) / std::max(1, tcfg.steps - 1);
    opt.set_lr(tcfg.lr * (0.05 + 0.95 * 0.5 * (1 + std::cos(M_PI * p))));
    std::vector<data::Image> imgs;
    std::vector<std::string> caps;
    std::vector<int> ys, yc, yb, diag;
    for (std::size_t i = 0; i < B; ++i) {
      const auto& it = dataset[static_cast<std::size_t>(order[cursor + i])];
      imgs.push_back(it.image);
      caps.push_back(it.caption);
      ys.push_back(it.spec.shape);
      yc.push_back(it.spec.color);
      yb.push_back(it.spec.background);
      diag.push_back(static_cast<int>(i));
    }
    cursor += B;
    const auto a = enc.forward(imgs);
    const auto lg = enc.classify(a);
    const auto ie = enc.image_embedding(a);
    const auto ce = enc.caption_embedding(caps);
    auto loss = nn::add(nn::add(nn::cross_entropy(lg.shape, std::span<const int>(ys)),
                                nn::cross_entropy(lg.color, std::span<const int>(yc))),
                        nn::cross_entropy(lg.background, std::span<const int>(yb)));
    auto sim_ic = nn::scale(nn::matmul_nt(ie, ce), inv_temp);
    auto sim_ci = nn::scale(nn::matmul_nt(ce, ie), inv_temp);
    loss = nn::add(loss, nn::scale(nn::add(nn::cross_entropy(sim_ic, std::span<const int>(diag)),
                                           nn::cross_entropy(sim_ci, std::span<const int>(diag))),
                                   0.5f));
    nn::backward(loss);
    opt.step();
    acc += loss.item();
    ++acc_n;
    if (step % tcfg.log_every == 0 || step == tcfg.steps) {
      rep.loss_curve.emplace_back(step, acc / acc_n);
      acc = 0;
      acc_n = 0;
    }
  }
  enc.params().set_trainable(false);

  const data::GrammarConfig g;
  const auto cls_emb = enc.caption_embedding(class_captions(g));
  const int K = static_cast<int>(g.shapes.size() * g.colors.size());
  int cs = 0, cc = 0, cb = 0, cr = 0;
  for (int b = n_train; b < static_cast<int>(dataset.size()); b += 64) {
    const int m = std::min(64, static_cast<int>(dataset.size()) - b);
    std::vector<data::Image> imgs;
    for (int i = 0; i < m; ++i) imgs.push_back(dataset[static_cast<std::size_t>(b + i)].image);
    const auto a = enc.forward(imgs);
    const auto lg = enc.classify(a);
    const auto sims = nn::matmul_nt(enc.image_embedding(a), cls_emb);
    for (int i = 0; i < m; ++i) {
      const auto& sp = dataset[static_cast<std::size_t>(b + i)].spec;
      cs += argmax_row(lg.shape.value(), i, cfg.n_shapes) == sp.shape;
      cc += argmax_row(lg.color.value(), i, cfg.n_colors) == sp.color;
      cb += argmax_row(lg.background.value(), i, cfg.n_backgrounds) == sp.background;
      cr += argmax_row(sims.value(), i, K) == sp.shape * static_cast<int>(g.colors.size()) + sp.color;
    }
  }
  rep.shape_accuracy = static_cast<double>(cs) / n_hold;
  rep.color_accuracy = static_cast<double>(cc) / n_hold;
  rep.background_accuracy = static_cast<double>(cb) / n_hold;
  rep.caption_retrieval = static_cast<double>(cr) / n_hold;
  return enc;
}

void save_feature_encoder(const FeatureEncoder& enc, const std::filesystem::path& path) {
  nlohmann::json meta{{"config", enc.config().to_json()},
                      {"words", enc.vocab().words()},
                      {"pseudo_capacity", enc.vocab().pseudo_capacity()}};
  nn::Checkpoint::from_params("feature-encoder", std::move(meta), enc.params()).save(path);
}

FeatureEncoder load_feature_encoder(const std::filesystem::path& path) {
  auto ck = nn::Checkpoint::load(path);
  if (ck.kind != "feature-encoder") throw nn::CheckpointError("expected a feature-encoder checkpoint, got '" + ck.kind + "'");
  auto words = ck.meta.at("words").get<std::vector<std::string>>();
  words.erase(std::remove_if(words.begin(), words.end(), [](const auto& w) { return w == "<pad>" || w == "<unk>"; }),
              words.end());
  FeatureEncoder enc(FeatureEncoderConfig::from_json(ck.meta.at("config")),
                     text::Vocabulary(std::move(words), ck.meta.value("pseudo_capacity", 256)), 0);
  ck.load_into(enc.params());
  return enc;
}

namespace {

// Per-location normalized channel vectors of sample n, [HW][C] order. The
// norm floor keeps near-silent locations from amplifying pixel noise.
std::vector<double> unit_channels(const Var<float>& act, int n) {
  const int C = act.dim(1), P = act.dim(2) * act.dim(3);
  const float* base = act.value().data() + static_cast<std::size_t>(n) * C * P;
  std::vector<double> out(static_cast<std::size_t>(C) * P);
  for (int p = 0; p < P; ++p) {
    double sq = 0;
    for (int c = 0; c < C; ++c) sq += static_cast<double>(base[c * P + p]) * base[c * P + p];
    const double inv = 1.0 / std::sqrt(sq + 1e-2 * C);
    for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(p) * C + c] = base[c * P + p] * inv;
  }
  return out;
}

double perceptual_from(const Activations& a, int ia, const Activations& b, int ib) {
  double total = 0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto ua = unit_channels(a.layers[l], ia), ub = unit_channels(b.layers[l], ib);
    double s = 0;
    for (std::size_t i = 0; i < ua.size(); ++i) s += (ua[i] - ub[i]) * (ua[i] - ub[i]);
    total += s / (a.layers[l].dim(2) * a.layers[l].dim(3));
  }
  return total / a.layers.size();
}

std::vector<double> gram(const Var<float>& act, int n) {
  const int C = act.dim(1), P = act.dim(2) * act.dim(3);
  const float* f = act.value().data() + static_cast<std::size_t>(n) * C * P;
  std::vector<double> g(static_cast<std::size_t>(C) * C);
  for (int i = 0; i < C; ++i)
    for (int j = i; j < C; ++j) {
      double s = 0;
      for (int p = 0; p < P; ++p) s += static_cast<double>(f[i * P + p]) * f[j * P + p];
      g[static_cast<std::size_t>(i) * C + j] = g[static_cast<std::size_t>(j) * C + i] = s / P;
    }
  return g;
}

double style_from(const Activations& a, int ia, const Activations& b, int ib) {
  double total = 0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto ga = gram(a.layers[l], ia), gb = gram(b.layers[l], ib);
    double s = 0;
    for (std::size_t i = 0; i < ga.size(); ++i) s += (ga[i] - gb[i]) * (ga[i] - gb[i]);
    const double C = a.layers[l].dim(1);
    total += s / (C * C);
  }
  return total;
}

void require_same_shape(const data::Image& a, const data::Image& b) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width)
    throw nn::ShapeError("metrics: image shapes differ");
}

template <class F>
std::vector<double> against_reference(const std::vector<data::Image>& images, const data::Image& reference,
                                      const FeatureEncoder& enc, F&& f) {
  for (const auto& im : images) require_same_shape(im, reference);
  const auto ref = enc.forward(std::vector<data::Image>{reference});
  std::vector<double> out;
  for (std::size_t b = 0; b < images.size(); b += 32) {
    const std::size_t m = std::min<std::size_t>(32, images.size() - b);
    const auto a = enc.forward(std::vector<data::Image>(images.begin() + static_cast<std::ptrdiff_t>(b),
                                                        images.begin() + static_cast<std::ptrdiff_t>(b + m)));
    for (std::size_t i = 0; i < m; ++i) out.push_back(f(a, static_cast<int>(i), ref, 0));
  }
  return out;
}

std::vector<std::vector<double>> embeddings(const std::vector<data::Image>& images, const FeatureEncoder& enc) {
  std::vector<std::vector<double>> rows;
  for (std::size_t b = 0; b < images.size(); b += 32) {
    const std::size_t m = std::min<std::size_t>(32, images.size() - b);
    const auto e = enc.image_embedding(enc.forward(std::vector<data::Image>(
        images.begin() + static_cast<std::ptrdiff_t>(b), images.begin() + static_cast<std::ptrdiff_t>(b + m))));
    const int E = e.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      rows.emplace_back(e.value().begin() + static_cast<std::ptrdiff_t>(i * E),
                        e.value().begin() + static_cast<std::ptrdiff_t>((i + 1) * E));
  }
  return rows;
}

}  // namespace

double perceptual_distance(const data::Image& a, const data::Image& b, const FeatureEncoder& enc) {
  require_same_shape(a, b);
  const auto fa = enc.forward(std::vector<data::Image>{a});
  const auto fb = enc.forward(std::vector<data::Image>{b});
  return perceptual_from(fa, 0, fb, 0);
}

std::vector<double> perceptual_distances(const std::vector<data::Image>& images, const data::Image& reference,
                                         const FeatureEncoder& enc) {
  return against_reference(images, reference, enc, perceptual_from);
}

double style_loss(const data::Image& a, const data::Image& b, const FeatureEncoder& enc) {
  require_same_shape(a, b);
  const auto fa = enc.forward(std::vector<data::Image>{a});
  const auto fb = enc.forward(std::vector<data::Image>{b});
  return style_from(fa, 0, fb, 0);
}

std::vector<double> style_losses(const std::vector<data::Image>& images, const data::Image& reference,
                                 const FeatureEncoder& enc) {
  return against_reference(images, reference, enc, style_from);
}

double cfv_embeddings(const std::vector<std::vector<double>>& rows) {
  if (rows.size() < 2) throw std::invalid_argument("cfv: need at least two embeddings");
  const std::size_t d = rows[0].size();
  double total = 0;
  // Shifted by the first row, so an all-identical set gives exactly 0.
  for (std::size_t j = 0; j < d; ++j) {
    const double shift = rows[0].at(j);
    double m = 0;
    for (const auto& r : rows) m += r.at(j) - shift;
    m /= rows.size();
    double v = 0;
    for (const auto& r : rows) v += (r[j] - shift - m) * (r[j] - shift - m);
    total += v / rows.size();
  }
  return total / d;
}

double cfv(const std::vector<data::Image>& images, const FeatureEncoder& enc) {
  if (images.size() < 2) throw std::invalid_argument("cfv: need at least two images");
  return cfv_embeddings(embeddings(images, enc));
}

double cas(const std::vector<data::Image>& images, const std::string& text, const FeatureEncoder& enc) {
  if (images.empty()) throw std::invalid_argument("cas: need at least one image");
  if (text.empty()) throw std::invalid_argument("cas: empty caption");
  const auto ce = enc.caption_embedding({text}).data();
  double total = 0;
  for (const auto& e : embeddings(images, enc)) {
    double dot = 0;
    for (std::size_t j = 0; j < e.size(); ++j) dot += e[j] * ce[j];
    total += dot;
  }
  return total / images.size();
}

double cds_standin(const std::vector<data::Image>& images, const FeatureEncoder& enc) {
  if (images.empty()) throw std::invalid_argument("cds_standin: need at least one image");
  double total = 0;
  for (std::size_t b = 0; b < images.size(); b += 32) {
    const std::size_t m = std::min<std::size_t>(32, images.size() - b);
    const auto a = enc.forward(std::vector<data::Image>(images.begin() + static_cast<std::ptrdiff_t>(b),
                                                        images.begin() + static_cast<std::ptrdiff_t>(b + m)));
    const auto& deep = a.layers.back();
    const auto& shallow = a.layers.front();
    const int Cd = deep.dim(1), Pd = deep.dim(2) * deep.dim(3);
    const std::size_t ns = shallow.size() / m;
    for (std::size_t i = 0; i < m; ++i) {
      double hp = 0;
      for (int c = 0; c < Cd; ++c) {
        const float* f = deep.value().data() + (i * Cd + c) * static_cast<std::size_t>(Pd);
        double mean = 0;
        for (int p = 0; p < Pd; ++p) mean += f[p];
        mean /= Pd;
        for (int p = 0; p < Pd; ++p) hp += (f[p] - mean) * (f[p] - mean);
      }
      double sh = 0;
      for (std::size_t k = 0; k < ns; ++k) {
        const double v = shallow.value()[i * ns + k];
        sh += v * v;
      }
      total += std::sqrt(hp / (static_cast<double>(Cd) * Pd)) / (std::sqrt(sh / ns) + 1e-8);
    }
  }
  return total / images.size();
}

std::vector<double> class_posteriors(const data::Image& image, const FeatureEncoder& enc) {
  const auto sims = nn::matmul_nt(enc.image_embedding(enc.forward(std::vector<data::Image>{image})),
                                  enc.caption_embedding(class_captions(data::GrammarConfig{})));
  std::vector<double> p(sims.value().begin(), sims.value().end());
  for (auto& v : p) v /= enc.config().temperature;
  const double m = *std::max_element(p.begin(), p.end());
  double z = 0;
  for (auto& v : p) z += (v = std::exp(v - m));
  for (auto& v : p) v /= z;
  return p;
}

nlohmann::json MetricsReport::to_json() const {
  return {{"lpips_analog", lpips_analog},
          {"style_loss", style_loss},
          {"cds_standin", cds_standin},
          {"cfv", cfv},
          {"cas", cas},
          {"n_images", n_images},
          {"provenance",
           {{"encoder", "toy feature encoder, not CLIP or published LPIPS"},
            {"cds_standin", "non-paper-faithful stand-in"}}}};
}

std::string MetricsReport::csv_header() { return "lpips_analog,style_loss,cds_standin,cfv,cas"; }

std::string MetricsReport::csv_values() const {
  std::ostringstream os;
  os << std::setprecision(9) << lpips_analog << ',' << style_loss << ',' << cds_standin << ',' << cfv << ',' << cas;
  return os.str();
}

MetricsReport evaluate(const std::vector<data::Image>& images, const data::Image& reference, const std::string& text,
                       const FeatureEncoder& enc) {
  MetricsReport r;
  r.n_images = static_cast<int>(images.size());
  const auto pd = perceptual_distances(images, reference, enc);
  const auto sl = style_losses(images, reference, enc);
  r.lpips_analog = std::accumulate(pd.begin(), pd.end(), 0.0) / pd.size();
  r.style_loss = std::accumulate(sl.begin(), sl.end(), 0.0) / sl.size();
  r.cfv = cfv(images, enc);
  r.cas = cas(images, text, enc);
  r.cds_standin = cds_standin(images, enc);
  return r;
}

}  // namespace pnptlab::metrics
