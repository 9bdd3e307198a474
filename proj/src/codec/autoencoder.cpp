#include "codec/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "data/toy_data.hpp"
#include "nn/checkpoint.hpp"
#include "nn/optim.hpp"

namespace pnptlab::codec {

using nn::Var;

void AutoencoderConfig::validate() const {
  if (levels < 1 || image_size % (1 << levels) != 0) throw std::invalid_argument("autoencoder: image size not divisible by 2^levels");
  if (!identity && static_cast<int>(widths.size()) != levels + 1)
    throw std::invalid_argument("autoencoder: widths must have levels + 1 entries");
  if (latent_channels < 1 || image_channels < 1) throw std::invalid_argument("autoencoder: channel counts must be >= 1");
}

nlohmann::json AutoencoderConfig::to_json() const {
  return {{"image_size", image_size}, {"image_channels", image_channels}, {"latent_channels", latent_channels},
          {"levels", levels},         {"widths", widths},                 {"identity", identity}};
}

AutoencoderConfig AutoencoderConfig::from_json(const nlohmann::json& j) {
  AutoencoderConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.image_channels = j.value("image_channels", c.image_channels);
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.levels = j.value("levels", c.levels);
  c.widths = j.value("widths", c.widths);
  c.identity = j.value("identity", c.identity);
  c.validate();
  return c;
}

AutoencoderConfig AutoencoderConfig::tiny() {
  AutoencoderConfig c;
  c.image_size = 16;
  c.latent_channels = 2;
  c.levels = 1;
  c.widths = {4, 6};
  return c;
}

template <class T>
Autoencoder<T>::Autoencoder(const AutoencoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  scale_ = params_.add("latent_scale", {1}, {T(1)});
  if (cfg_.identity) {
    set_trainable(false);
    return;
  }
  std::mt19937_64 rng(seed);
  const auto& w = cfg_.widths;
  const int L = cfg_.levels;
  enc_in_ = nn::make_conv(params_, "enc.in", cfg_.image_channels, w[0], 3, 1, rng);
  for (int l = 0; l < L; ++l) {
    enc_down_.push_back(nn::make_conv(params_, "enc.down" + std::to_string(l), w[l], w[l + 1], 3, 2, rng));
    enc_res_.push_back(nn::make_conv(params_, "enc.conv" + std::to_string(l), w[l + 1], w[l + 1], 3, 1, rng));
  }
  enc_out_ = nn::make_conv(params_, "enc.out", w[L], cfg_.latent_channels, 1, 1, rng, 0.5);
  dec_in_ = nn::make_conv(params_, "dec.in", cfg_.latent_channels, w[L], 3, 1, rng);
  dec_mid_ = nn::make_conv(params_, "dec.mid", w[L], w[L], 3, 1, rng);
  dec_up_.resize(L);
  dec_res_.resize(L);
  for (int l = L - 1; l >= 0; --l) {
    dec_up_[l] = nn::make_conv(params_, "dec.up" + std::to_string(l), w[l + 1], w[l], 3, 1, rng);
    dec_res_[l] = nn::make_conv(params_, "dec.conv" + std::to_string(l), w[l], w[l], 3, 1, rng);
  }
  dec_out_ = nn::make_conv(params_, "dec.out", w[0], cfg_.image_channels, 3, 1, rng, 0.5);
  set_trainable(false);
}

template <class T>
std::vector<Var<T>> Autoencoder<T>::weights() const {
  std::vector<Var<T>> out;
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_.names()[i] != "latent_scale") out.push_back(params_.vars()[i]);
  return out;
}

template <class T>
void Autoencoder<T>::set_trainable(bool on) {
  params_.set_trainable(false);
  if (on)
    for (auto w : weights()) w.set_requires_grad(true);
}

template <class T>
void Autoencoder<T>::check_image(const Var<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.image_channels || x.dim(2) != cfg_.image_size || x.dim(3) != cfg_.image_size)
    throw nn::ShapeError("encode: expected [N," + std::to_string(cfg_.image_channels) + "," +
                         std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "], got " +
                         nn::shape_str(x.shape()));
}

template <class T>
void Autoencoder<T>::check_latent(const Var<T>& z) const {
  const auto ls = latent_shape();
  if (z.rank() != 4 || z.dim(1) != ls[0] || z.dim(2) != ls[1] || z.dim(3) != ls[2])
    throw nn::ShapeError("decode: expected latent [N," + std::to_string(ls[0]) + "," + std::to_string(ls[1]) + "," +
                         std::to_string(ls[2]) + "], got " + nn::shape_str(z.shape()));
}

template <class T>
Var<T> Autoencoder<T>::encode(const Var<T>& x) const {
  check_image(x);
  if (cfg_.identity) return nn::space_to_depth(x, 1 << cfg_.levels);
  auto h = nn::silu(enc_in_(x));
  for (int l = 0; l < cfg_.levels; ++l) {
    h = nn::silu(enc_down_[l](h));
    h = nn::silu(enc_res_[l](h));
  }
  return nn::scale(enc_out_(h), latent_scale());
}

template <class T>
Var<T> Autoencoder<T>::decode(const Var<T>& z) const {
  check_latent(z);
  if (cfg_.identity) return nn::depth_to_space(z, 1 << cfg_.levels);
  auto h = nn::silu(dec_in_(nn::scale(z, T(1) / latent_scale())));
  h = nn::silu(dec_mid_(h));
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    h = nn::upsample_nearest2x(h);
    h = nn::silu(dec_up_[l](h));
    h = nn::silu(dec_res_[l](h));
  }
  return nn::tanh(dec_out_(h));
}

template class Autoencoder<float>;
template class Autoencoder<double>;

namespace {

Var<float> batch_tensor(const std::vector<data::Image>& images, const std::vector<int>& idx, std::size_t begin,
                        std::size_t count) {
  std::vector<data::Image> batch;
  batch.reserve(count);
  for (std::size_t i = begin; i < begin + count; ++i) batch.push_back(images[static_cast<std::size_t>(idx[i])]);
  return data::to_tensor<float>(std::span<const data::Image>(batch));
}

double raw_latent_std(const Autoencoder<float>& ae, const std::vector<data::Image>& images, const std::vector<int>& idx,
                      std::size_t n) {
  double s = 0, s2 = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < n; b += 32) {
    const std::size_t m = std::min<std::size_t>(32, n - b);
    auto z = ae.encode(batch_tensor(images, idx, b, m));
    for (float v : z.value()) {
      const double r = v / ae.latent_scale();
      s += r;
      s2 += r * r;
    }
    count += z.size();
  }
  const double mean = s / count;
  return std::sqrt(std::max(s2 / count - mean * mean, 1e-12));
}

}  // namespace

double reconstruction_l1(const Autoencoder<float>& ae, const std::vector<data::Image>& images, int batch) {
  if (images.empty()) throw std::invalid_argument("reconstruction_l1: empty image set");
  std::vector<int> idx(images.size());
  std::iota(idx.begin(), idx.end(), 0);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < images.size(); b += static_cast<std::size_t>(batch)) {
    const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(batch), images.size() - b);
    auto x = batch_tensor(images, idx, b, m);
    auto y = ae.decode(ae.encode(x));
    for (std::size_t i = 0; i < y.size(); ++i) total += std::abs(static_cast<double>(y.data()[i]) - x.data()[i]);
    count += y.size();
  }
  return total / count;
}

Autoencoder<float> train_autoencoder(const std::vector<data::Image>& images, const AutoencoderConfig& cfg,
                                     const AutoencoderTrainConfig& tcfg, AutoencoderTrainReport* report) {
  if (static_cast<int>(images.size()) < tcfg.min_images)
    throw std::invalid_argument("train_autoencoder: need at least " + std::to_string(tcfg.min_images) + " images, got " +
                                std::to_string(images.size()));
  AutoencoderTrainReport local;
  AutoencoderTrainReport& rep = report ? *report : local;
  rep = {};
  Autoencoder<float> ae(cfg, tcfg.seed);
  const int n_hold = std::max(1, static_cast<int>(std::lround(images.size() * tcfg.holdout_fraction)));
  const int n_train = static_cast<int>(images.size()) - n_hold;
  rep.train_images = n_train;
  rep.heldout_images = n_hold;
  std::vector<data::Image> heldout(images.end() - n_hold, images.end());

  std::mt19937_64 rng(data::mix_seed(tcfg.seed, 0xAE));
  std::vector<int> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);

  if (!cfg.identity) {
    ae.set_trainable(true);
    nn::AdamConfig ac;
    ac.lr = tcfg.lr;
    ac.grad_clip = 1.0;
    nn::Adam<float> opt(ae.weights(), ac);
    std::size_t cursor = order.size();
    double acc = 0;
    int acc_n = 0;
    const std::size_t B = static_cast<std::size_t>(std::min(tcfg.batch, n_train));
    for (int step = 1; step <= tcfg.steps; ++step) {
      if (cursor + B > order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const double progress = static_cast<double>(step - 1) / std::max(1, tcfg.steps - 1);
      const double floor = tcfg.final_lr_fraction;
      opt.set_lr(tcfg.lr * (floor + (1 - floor) * 0.5 * (1 + std::cos(M_PI * progress))));
      auto x = batch_tensor(images, order, cursor, B);
      cursor += B;
      auto loss = nn::l1_loss(ae.decode(ae.encode(x)), x);
      if (!std::isfinite(loss.item()))
        throw TrainingError("train_autoencoder: non-finite loss at step " + std::to_string(step));
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
    ae.set_trainable(false);
    std::vector<int> all(static_cast<std::size_t>(n_train));
    std::iota(all.begin(), all.end(), 0);
    rep.latent_std = raw_latent_std(ae, images, all, std::min<std::size_t>(512, all.size()));
    ae.set_latent_scale(static_cast<float>(1.0 / rep.latent_std));
  } else {
    rep.latent_std = 1.0;
  }
  rep.heldout_l1 = reconstruction_l1(ae, heldout);
  if (rep.heldout_l1 >= tcfg.l1_threshold) {
    std::ostringstream os;
    os << "autoencoder did not converge: held-out L1 " << rep.heldout_l1 << " >= " << tcfg.l1_threshold
       << "; loss curve:";
    for (const auto& [s, l] : rep.loss_curve) os << ' ' << s << ':' << l;
    throw TrainingError(os.str());
  }
  return ae;
}

void save_autoencoder(const Autoencoder<float>& ae, const std::filesystem::path& path) {
  nn::Checkpoint::from_params("autoencoder", {{"config", ae.config().to_json()}}, ae.params()).save(path);
}

Autoencoder<float> load_autoencoder(const std::filesystem::path& path) {
  auto ck = nn::Checkpoint::load(path);
  if (ck.kind != "autoencoder") throw nn::CheckpointError("expected an autoencoder checkpoint, got '" + ck.kind + "'");
  Autoencoder<float> ae(AutoencoderConfig::from_json(ck.meta.at("config")), 0);
  ck.load_into(ae.params());
  return ae;
}

}  // namespace pnptlab::codec
