#include "denoiser/unet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "nn/checkpoint.hpp"
#include "nn/optim.hpp"

namespace pnptlab::denoiser {

using nn::Var;

void DenoiserConfig::validate() const {
  if (latent_channels < 1 || latent_size < 2 || latent_size % 2 != 0)
    throw std::invalid_argument("denoiser: latent size must be even and >= 2");
  if (c0 % groups != 0 || c1 % groups != 0) throw std::invalid_argument("denoiser: widths must be divisible by groups");
  if (text_dim < 1 || seq_len < 1 || attn_dim < 1 || temb_dim < 2 || temb_dim % 2 != 0)
    throw std::invalid_argument("denoiser: invalid attention / embedding sizes");
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"latent_channels", latent_channels}, {"latent_size", latent_size}, {"c0", c0},
          {"c1", c1},
          {"text_dim", text_dim},
          {"seq_len", seq_len},
          {"attn_dim", attn_dim},
          {"groups", groups},
          {"temb_dim", temb_dim}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.latent_size = j.value("latent_size", c.latent_size);
  c.c0 = j.value("c0", c.c0);
  c.c1 = j.value("c1", c.c1);
  c.text_dim = j.value("text_dim", c.text_dim);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.attn_dim = j.value("attn_dim", c.attn_dim);
  c.groups = j.value("groups", c.groups);
  c.temb_dim = j.value("temb_dim", c.temb_dim);
  c.validate();
  return c;
}

DenoiserConfig DenoiserConfig::tiny() {
  DenoiserConfig c;
  c.latent_channels = 2;
  c.latent_size = 8;
  c.c0 = 4;
  c.c1 = 8;
  c.text_dim = 32;
  c.attn_dim = 4;
  c.groups = 2;
  c.temb_dim = 8;
  return c;
}

template <class T>
Var<T> timestep_features(std::span<const int> ts, int dim) {
  const int half = dim / 2;
  std::vector<T> out(ts.size() * static_cast<std::size_t>(dim));
  for (std::size_t n = 0; n < ts.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double a = ts[n] * freq;
      out[n * dim + i] = static_cast<T>(std::sin(a));
      out[n * dim + half + i] = static_cast<T>(std::cos(a));
    }
  return Var<T>::constant({static_cast<int>(ts.size()), dim}, std::move(out));
}

template <class T>
typename Denoiser<T>::ResBlock Denoiser<T>::make_res(const std::string& name, int in, int out, std::mt19937_64& rng) {
  ResBlock b;
  b.n1 = nn::make_group_norm(params_, name + ".norm1", in, cfg_.groups);
  b.c1 = nn::make_conv(params_, name + ".conv1", in, out, 3, 1, rng);
  b.temb = nn::make_linear(params_, name + ".temb", 2 * cfg_.temb_dim, out, rng, 0.5);
  b.n2 = nn::make_group_norm(params_, name + ".norm2", out, cfg_.groups);
  b.c2 = nn::make_conv(params_, name + ".conv2", out, out, 3, 1, rng, 0.5);
  b.has_skip = in != out;
  if (b.has_skip) b.skip = nn::make_conv(params_, name + ".skip", in, out, 1, 1, rng);
  return b;
}

template <class T>
typename Denoiser<T>::AttnBlock Denoiser<T>::make_attn(const std::string& name, int channels, std::mt19937_64& rng) {
  AttnBlock a;
  const int dk = cfg_.attn_dim, d = cfg_.text_dim;
  a.norm = nn::make_group_norm(params_, name + ".norm", channels, cfg_.groups);
  a.wq = params_.add(name + ".wq", {channels, dk}, nn::normal_init<T>(static_cast<std::size_t>(channels) * dk, 1.0 / std::sqrt(channels), rng));
  a.wk = params_.add(name + ".wk", {d, dk}, nn::normal_init<T>(static_cast<std::size_t>(d) * dk, 1.0 / std::sqrt(d), rng));
  a.wv = params_.add(name + ".wv", {d, dk}, nn::normal_init<T>(static_cast<std::size_t>(d) * dk, 1.0 / std::sqrt(d), rng));
  a.wo = params_.add(name + ".wo", {dk, channels}, nn::normal_init<T>(static_cast<std::size_t>(dk) * channels, 0.5 / std::sqrt(dk), rng));
  return a;
}

template <class T>
Denoiser<T>::Denoiser(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  pos_ = params_.add("cond.pos", {cfg_.seq_len, cfg_.text_dim},
                     nn::normal_init<T>(static_cast<std::size_t>(cfg_.seq_len) * cfg_.text_dim, 0.1, rng));
  t1_ = nn::make_linear(params_, "temb.l1", cfg_.temb_dim, 2 * cfg_.temb_dim, rng);
  t2_ = nn::make_linear(params_, "temb.l2", 2 * cfg_.temb_dim, 2 * cfg_.temb_dim, rng);
  in_ = nn::make_conv(params_, "in", cfg_.latent_channels, cfg_.c0, 3, 1, rng);
  r0_ = make_res("down0.res", cfg_.c0, cfg_.c0, rng);
  a0_ = make_attn("down0.attn", cfg_.c0, rng);
  down_ = nn::make_conv(params_, "down", cfg_.c0, cfg_.c1, 3, 2, rng);
  r1_ = make_res("down1.res", cfg_.c1, cfg_.c1, rng);
  a1_ = make_attn("down1.attn", cfg_.c1, rng);
  rm_ = make_res("mid.res", cfg_.c1, cfg_.c1, rng);
  am_ = make_attn("mid.attn", cfg_.c1, rng);
  up_ = nn::make_conv(params_, "up", cfg_.c1, cfg_.c0, 3, 1, rng);
  ru_ = make_res("up0.res", 2 * cfg_.c0, cfg_.c0, rng);
  au_ = make_attn("up0.attn", cfg_.c0, rng);
  out_norm_ = nn::make_group_norm(params_, "out.norm", cfg_.c0, cfg_.groups);
  out_ = nn::make_conv(params_, "out", cfg_.c0, cfg_.latent_channels, 3, 1, rng, 0.3);
  set_trainable(false);
}

template <class T>
Var<T> Denoiser<T>::res(const ResBlock& b, const Var<T>& x, const Var<T>& temb) const {
  auto h = b.c1(nn::silu(b.n1(x)));
  h = nn::add_channel_bias(h, b.temb(temb));
  h = b.c2(nn::silu(b.n2(h)));
  return nn::add(b.has_skip ? b.skip(x) : x, h);
}

template <class T>
Var<T> Denoiser<T>::attn(const AttnBlock& b, const Var<T>& x, const Var<T>& ctx) const {
  return nn::add(x, nn::cross_attention(b.norm(x), ctx, b.wq, b.wk, b.wv, b.wo));
}

template <class T>
Var<T> Denoiser<T>::predict_eps(const Var<T>& z_t, std::span<const int> ts, const Var<T>& cond) const {
  const int N = z_t.rank() == 4 ? z_t.dim(0) : 0;
  if (z_t.rank() != 4 || z_t.dim(1) != cfg_.latent_channels || z_t.dim(2) != cfg_.latent_size ||
      z_t.dim(3) != cfg_.latent_size)
    throw nn::ShapeError("predict_eps: latent " + nn::shape_str(z_t.shape()) + " does not match configuration");
  if (static_cast<int>(ts.size()) != N) throw nn::ShapeError("predict_eps: need one timestep per sample");
  if (cond.rank() != 3 || cond.dim(0) != N || cond.dim(1) != cfg_.seq_len || cond.dim(2) != cfg_.text_dim)
    throw nn::ShapeError("predict_eps: conditioning " + nn::shape_str(cond.shape()) + " does not match configuration");
  const auto temb = nn::silu(t2_(nn::silu(t1_(timestep_features<T>(ts, cfg_.temb_dim)))));
  const auto ctx = nn::add_positional(cond, pos_);
  auto h = in_(z_t);
  auto skip = attn(a0_, res(r0_, h, temb), ctx);
  h = down_(skip);
  h = attn(a1_, res(r1_, h, temb), ctx);
  h = attn(am_, res(rm_, h, temb), ctx);
  h = up_(nn::upsample_nearest2x(h));
  h = attn(au_, res(ru_, nn::concat_channels(h, skip), temb), ctx);
  return out_(nn::silu(out_norm_(h)));
}

template <class T>
Var<T> Denoiser<T>::predict_eps(const Var<T>& z_t, int t, const Var<T>& cond) const {
  std::vector<int> ts(static_cast<std::size_t>(z_t.rank() == 4 ? z_t.dim(0) : 0), t);
  return predict_eps(z_t, ts, cond);
}

template class Denoiser<float>;
template class Denoiser<double>;
template Var<float> timestep_features<float>(std::span<const int>, int);
template Var<double> timestep_features<double>(std::span<const int>, int);

namespace {

Var<float> gather_samples(const Var<float>& all, const std::vector<int>& idx) {
  const std::size_t per = all.size() / static_cast<std::size_t>(all.dim(0));
  std::vector<float> out(idx.size() * per);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(all.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per, out.begin() + static_cast<std::ptrdiff_t>(i * per));
  nn::Shape s = all.shape();
  s[0] = static_cast<int>(idx.size());
  return Var<float>::constant(s, std::move(out));
}

Var<float> standard_normal(const nn::Shape& s, std::mt19937_64& rng) {
  return Var<float>::constant(s, nn::normal_init<float>(nn::numel(s), 1.0, rng));
}

}  // namespace

Var<float> encode_images(const codec::Autoencoder<float>& ae, const std::vector<data::Image>& images, int batch) {
  if (images.empty()) throw std::invalid_argument("encode_images: empty set");
  std::vector<float> out;
  for (std::size_t b = 0; b < images.size(); b += static_cast<std::size_t>(batch)) {
    const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(batch), images.size() - b);
    auto z = ae.encode(data::to_tensor<float>(std::span<const data::Image>(images.data() + b, m)));
    out.insert(out.end(), z.value().begin(), z.value().end());
  }
  auto ls = ae.latent_shape();
  return Var<float>::constant({static_cast<int>(images.size()), ls[0], ls[1], ls[2]}, std::move(out));
}

double validation_loss(const Denoiser<float>& net, const text::TextConditioner<float>& cond,
                       const diffusion::NoiseSchedule& sched, const Var<float>& latents,
                       const std::vector<std::string>& captions, std::uint64_t seed, double* eps_norm_ratio) {
  const int N = latents.dim(0);
  if (static_cast<int>(captions.size()) != N) throw std::invalid_argument("validation_loss: caption count mismatch");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tdist(1, sched.T);
  double total = 0, norm = 0;
  for (int b = 0; b < N; b += 32) {
    const int m = std::min(32, N - b);
    std::vector<int> idx(static_cast<std::size_t>(m)), ts(static_cast<std::size_t>(m));
    std::vector<text::TokenSequence> seqs;
    for (int i = 0; i < m; ++i) {
      idx[i] = b + i;
      ts[i] = tdist(rng);
      seqs.push_back(cond.tokenize(captions[static_cast<std::size_t>(b + i)]));
    }
    auto z0 = gather_samples(latents, idx);
    auto eps = standard_normal(z0.shape(), rng);
    auto eps_hat = net.predict_eps(diffusion::q_sample<float>(z0, std::span<const int>(ts), eps, sched), ts, cond.embed(seqs).detach());
    total += nn::mse_loss(eps_hat, eps).item() * m;
    double sq = 0;
    for (float v : eps_hat.value()) sq += static_cast<double>(v) * v;
    norm += sq / (eps_hat.size() / m);
  }
  if (eps_norm_ratio) *eps_norm_ratio = norm / N;
  return total / N;
}

Denoiser<float> train_base(const std::vector<data::CaptionedImage>& dataset, const diffusion::NoiseSchedule& sched,
                           const codec::Autoencoder<float>& ae, text::TextConditioner<float>& cond,
                           const DenoiserConfig& cfg, const BaseTrainConfig& tcfg, BaseTrainReport* report) {
  if (static_cast<int>(dataset.size()) <= tcfg.val_images)
    throw std::invalid_argument("train_base: dataset smaller than the validation split");
  if (cond.dim() != cfg.text_dim) throw std::invalid_argument("train_base: conditioner dim does not match denoiser");
  const auto ls = ae.latent_shape();
  if (ls[0] != cfg.latent_channels || ls[1] != cfg.latent_size)
    throw std::invalid_argument("train_base: codec latent shape does not match denoiser");
  BaseTrainReport local;
  BaseTrainReport& rep = report ? *report : local;
  rep = {};

  const int n_train = static_cast<int>(dataset.size()) - tcfg.val_images;
  std::vector<data::Image> images;
  std::vector<std::string> val_captions;
  std::vector<text::TokenSequence> seqs;
  for (int i = 0; i < static_cast<int>(dataset.size()); ++i) {
    images.push_back(dataset[static_cast<std::size_t>(i)].image);
    if (i < n_train) {
      seqs.push_back(cond.tokenize(dataset[static_cast<std::size_t>(i)].caption));
      if (seqs.back().unknown) throw std::invalid_argument("train_base: caption outside the base vocabulary: " + dataset[static_cast<std::size_t>(i)].caption);
    } else {
      val_captions.push_back(dataset[static_cast<std::size_t>(i)].caption);
    }
  }
  const auto all_latents = encode_images(ae, images);
  images.clear();
  std::vector<int> train_idx(static_cast<std::size_t>(n_train)), val_idx(static_cast<std::size_t>(tcfg.val_images));
  std::iota(train_idx.begin(), train_idx.end(), 0);
  std::iota(val_idx.begin(), val_idx.end(), n_train);
  const auto train_latents = gather_samples(all_latents, train_idx);
  const auto val_latents = gather_samples(all_latents, val_idx);
  const auto empty = cond.tokenize("");
  const std::uint64_t val_seed = data::mix_seed(tcfg.seed, 0x7A1);

  Denoiser<float> net(cfg, tcfg.seed);
  net.set_trainable(true);
  cond.table_params().set_trainable(true);
  std::vector<Var<float>> leaves = net.params().vars();
  leaves.push_back(cond.table());
  nn::AdamConfig ac;
  ac.lr = tcfg.lr;
  ac.grad_clip = 1.0;
  nn::Adam<float> opt(leaves, ac);
  std::vector<std::vector<float>> ema;
  if (tcfg.ema_decay > 0)
    for (const auto& l : leaves) ema.emplace_back(l.value().begin(), l.value().end());
  auto swap_ema = [&] {
    for (std::size_t i = 0; i < ema.size(); ++i) {
      auto v = leaves[i].mutable_value();
      std::swap_ranges(v.begin(), v.end(), ema[i].begin());
    }
  };
  auto validate = [&](int step) {
    swap_ema();
    const double v = validation_loss(net, cond, sched, val_latents, val_captions, val_seed, &rep.eps_norm_ratio);
    swap_ema();
    rep.val_curve.emplace_back(step, v);
  };

  std::mt19937_64 rng(data::mix_seed(tcfg.seed, 0xBA5E));
  std::uniform_int_distribution<int> tdist(1, sched.T);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<int> order = train_idx;
  std::size_t cursor = order.size();
  const std::size_t B = static_cast<std::size_t>(std::min(tcfg.batch, n_train));
  double acc = 0;
  int acc_n = 0;
  for (int step = 1; step <= tcfg.steps; ++step) {
    if (cursor + B > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    double lr = tcfg.lr;
    if (step <= tcfg.warmup) {
      lr *= static_cast<double>(step) / tcfg.warmup;
    } else {
      const double p = static_cast<double>(step - tcfg.warmup) / std::max(1, tcfg.steps - tcfg.warmup);
      lr *= tcfg.final_lr_fraction + (1 - tcfg.final_lr_fraction) * 0.5 * (1 + std::cos(M_PI * p));
    }
    opt.set_lr(lr);
    std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor), order.begin() + static_cast<std::ptrdiff_t>(cursor + B));
    cursor += B;
    std::vector<int> ts(B);
    std::vector<text::TokenSequence> batch_seqs;
    for (std::size_t i = 0; i < B; ++i) {
      ts[i] = tdist(rng);
      batch_seqs.push_back(u01(rng) < tcfg.cond_dropout ? empty : seqs[static_cast<std::size_t>(idx[i])]);
    }
    auto z0 = gather_samples(train_latents, idx);
    auto eps = standard_normal(z0.shape(), rng);
    auto eps_hat = net.predict_eps(diffusion::q_sample<float>(z0, std::span<const int>(ts), eps, sched), ts, cond.embed(batch_seqs));
    auto loss = nn::mse_loss(eps_hat, eps);
    if (!std::isfinite(loss.item())) throw TrainingError("train_base: non-finite loss at step " + std::to_string(step));
    nn::backward(loss);
    opt.step();
    if (!ema.empty()) {
      const float d = static_cast<float>(std::min(tcfg.ema_decay, (1.0 + step) / (10.0 + step)));
      for (std::size_t i = 0; i < ema.size(); ++i) {
        auto v = leaves[i].value();
        for (std::size_t j = 0; j < v.size(); ++j) ema[i][j] = d * ema[i][j] + (1 - d) * v[j];
      }
    }
    acc += loss.item();
    ++acc_n;
    if (step % tcfg.log_every == 0 || step == tcfg.steps) {
      rep.loss_curve.emplace_back(step, acc / acc_n);
      acc = 0;
      acc_n = 0;
    }
    if (step % tcfg.val_every == 0 && step != tcfg.steps) validate(step);
  }
  validate(tcfg.steps);
  if (!ema.empty()) swap_ema();
  net.set_trainable(false);
  cond.table_params().set_trainable(false);

  const double first = rep.val_curve.front().second, last = rep.val_curve.back().second;
  if (!std::isfinite(last) || (rep.val_curve.size() > 1 && last >= first)) {
    std::ostringstream os;
    os << "base pretraining did not converge; validation:";
    for (const auto& [s, v] : rep.val_curve) os << ' ' << s << ':' << v;
    os << "; train:";
    for (const auto& [s, v] : rep.loss_curve) os << ' ' << s << ':' << v;
    throw TrainingError(os.str());
  }
  return net;
}

void save_denoiser(const Denoiser<float>& net, const std::filesystem::path& path, const nlohmann::json& extra) {
  nn::Checkpoint::from_params("denoiser", {{"config", net.config().to_json()}, {"extra", extra}}, net.params()).save(path);
}

Denoiser<float> load_denoiser(const std::filesystem::path& path, nlohmann::json* extra) {
  auto ck = nn::Checkpoint::load(path);
  if (ck.kind != "denoiser") throw nn::CheckpointError("expected a denoiser checkpoint, got '" + ck.kind + "'");
  Denoiser<float> net(DenoiserConfig::from_json(ck.meta.at("config")), 0);
  ck.load_into(net.params());
  if (extra) *extra = ck.meta.value("extra", nlohmann::json::object());
  return net;
}

}  // namespace pnptlab::denoiser
