#include "data/toy_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>

namespace pnptlab::data {

namespace {

using Rgb = std::array<float, 3>;

Rgb named_color(const std::string& name) {
  static const std::vector<std::pair<std::string, Rgb>> table{
      {"red", {0.90f, 0.10f, 0.10f}},    {"green", {0.10f, 0.75f, 0.20f}}, {"blue", {0.15f, 0.30f, 0.95f}},
      {"yellow", {0.95f, 0.90f, 0.10f}}, {"purple", {0.60f, 0.20f, 0.80f}}, {"orange", {1.00f, 0.55f, 0.05f}},
      {"black", {0.05f, 0.05f, 0.05f}},  {"white", {0.95f, 0.95f, 0.95f}}, {"gray", {0.50f, 0.50f, 0.50f}},
  };
  for (const auto& [n, c] : table)
    if (n == name) return c;
  throw std::invalid_argument("unknown color '" + name + "'");
}

const std::array<const char*, 3> kSizes{"", "small", "large"};
const std::array<const char*, 5> kPositions{"", "left", "right", "top", "bottom"};

bool inside(int shape, double dx, double dy, double r) {
  switch (shape) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1:
      return std::abs(dx) <= 0.82 * r && std::abs(dy) <= 0.82 * r;
    case 2: {
      // Upward equilateral triangle with circumradius r.
      const double h = 1.5 * r;
      const double top = -r, bottom = 0.5 * r;
      if (dy < top || dy > bottom) return false;
      const double frac = (dy - top) / h;
      return std::abs(dx) <= frac * r * std::sqrt(3.0) / 2.0 * 1.0;
    }
    default:
      return std::abs(dx) + std::abs(dy) <= r;
  }
}

void put(Image& img, int y, int x, const Rgb& rgb01, float coverage) {
  for (int c = 0; c < 3; ++c) {
    const float v = rgb01[c] * 2.0f - 1.0f;
    img.at(c, y, x) = img.at(c, y, x) * (1.0f - coverage) + v * coverage;
  }
}

// 4x4 supersampled coverage of an implicit shape.
template <class F>
void fill_shape(Image& img, F&& covered, const std::function<Rgb(double, double)>& color) {
  constexpr int ss = 4;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx)
          if (covered(x + (sx + 0.5) / ss, y + (sy + 0.5) / ss)) ++hits;
      if (hits) put(img, y, x, color(x + 0.5, y + 0.5), static_cast<float>(hits) / (ss * ss));
    }
}

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  t = std::clamp(t, 0.0, 1.0);
  return {static_cast<float>(a[0] + (b[0] - a[0]) * t), static_cast<float>(a[1] + (b[1] - a[1]) * t),
          static_cast<float>(a[2] + (b[2] - a[2]) * t)};
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::vector<std::string> grammar_words(const GrammarConfig& g) {
  std::set<std::string> words{"a", "on", "background", "at", "the"};
  for (const auto& s : g.shapes) words.insert(s);
  for (const auto& s : g.colors) words.insert(s);
  for (const auto& s : g.backgrounds) words.insert(s);
  if (g.size_modifiers) words.insert({"small", "large"});
  if (g.position_modifiers) words.insert({"left", "right", "top", "bottom"});
  return {words.begin(), words.end()};
}

std::string caption_for(const ItemSpec& s, const GrammarConfig& g) {
  std::string out = "a ";
  if (s.size) out += std::string(kSizes[s.size]) + " ";
  out += g.colors.at(s.color) + " " + g.shapes.at(s.shape);
  if (s.position) out += std::string(" at the ") + kPositions[s.position];
  out += " on a " + g.backgrounds.at(s.background) + " background";
  return out;
}

CaptionedImage render_item(const ItemSpec& spec, std::uint64_t seed, const GrammarConfig& g) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const int n = g.image_size;
  const double unit = n / 64.0;
  Image img = Image::filled(3, n, n);
  const Rgb bg = named_color(g.backgrounds.at(spec.background));
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) put(img, y, x, bg, 1.0f);

  double r = (spec.size == 1 ? 9.0 : spec.size == 2 ? 18.0 : 13.0) * unit;
  r += 1.0 * unit * u(rng);
  double cx = n / 2.0 + 2.0 * unit * u(rng), cy = n / 2.0 + 2.0 * unit * u(rng);
  const double shift = (spec.size == 2 ? 9.0 : 14.0) * unit;
  if (spec.position == 1) cx -= shift;
  if (spec.position == 2) cx += shift;
  if (spec.position == 3) cy -= shift;
  if (spec.position == 4) cy += shift;

  Rgb fg = named_color(g.colors.at(spec.color));
  for (auto& c : fg) c = std::clamp(c + static_cast<float>(0.04 * u(rng)), 0.0f, 1.0f);
  fill_shape(
      img, [&](double x, double y) { return inside(spec.shape, x - cx, y - cy, r); },
      [&](double, double) { return fg; });
  img.clamp();
  return {std::move(img), caption_for(spec, g), spec};
}

std::vector<CaptionedImage> generate_dataset(int n, std::uint64_t seed, const GrammarConfig& g) {
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  const int shapes = static_cast<int>(g.shapes.size()), colors = static_cast<int>(g.colors.size());
  const int cells = shapes * colors;
  std::vector<CaptionedImage> out;
  out.reserve(n);
  std::vector<int> order(cells);
  for (int i = 0; i < n; ++i) {
    const int block = i / cells;
    if (i % cells == 0) {
      for (int c = 0; c < cells; ++c) order[c] = c;
      std::mt19937_64 brng(mix_seed(seed, 0x5EED0000ull + block));
      std::shuffle(order.begin(), order.end(), brng);
    }
    const int cell = order[i % cells];
    std::mt19937_64 irng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    ItemSpec s;
    s.shape = cell / colors;
    s.color = cell % colors;
    s.background = static_cast<int>(irng() % g.backgrounds.size());
    s.size = g.size_modifiers ? static_cast<int>(irng() % 3) : 0;
    s.position = g.position_modifiers ? static_cast<int>(irng() % 5) : 0;
    if (s.size == 2 && s.position != 0 && irng() % 2) s.position = 0;
    out.push_back(render_item(s, irng(), g));
  }
  return out;
}

ReferenceKind parse_reference_kind(const std::string& s) {
  if (s == "composite-novel-shape") return ReferenceKind::composite_novel_shape;
  if (s == "novel-texture-style") return ReferenceKind::novel_texture_style;
  throw std::invalid_argument("unknown reference kind '" + s + "'");
}

std::string to_string(ReferenceKind k) {
  return k == ReferenceKind::composite_novel_shape ? "composite-novel-shape" : "novel-texture-style";
}

Image make_reference(ReferenceKind kind, std::uint64_t seed, int size) {
  std::mt19937_64 rng(mix_seed(seed, 0xCAFEull));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double unit = size / 64.0;
  Image img = Image::filled(3, size, size);
  static const std::vector<Rgb> palette{{0.10f, 0.65f, 0.65f}, {0.95f, 0.45f, 0.70f}, {0.55f, 0.85f, 0.30f},
                                        {0.25f, 0.20f, 0.55f}, {0.95f, 0.75f, 0.45f}, {0.35f, 0.55f, 0.95f},
                                        {0.80f, 0.30f, 0.25f}, {0.20f, 0.45f, 0.25f}};
  auto pick = [&] { return palette[rng() % palette.size()]; };

  if (kind == ReferenceKind::composite_novel_shape) {
    // Vertical gradient background, then a gradient star overlapped by a
    // gradient ring segment.
    const Rgb b0 = pick(), b1 = pick();
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) put(img, y, x, lerp(b0, b1, static_cast<double>(y) / (size - 1)), 1.0f);
    const int points = 5 + static_cast<int>(rng() % 3);
    const double rot = u(rng) * 2.0 * std::numbers::pi;
    const double cx = size * (0.42 + 0.16 * u(rng)), cy = size * (0.42 + 0.16 * u(rng));
    const double ro = 22.0 * unit, ri = 10.0 * unit;
    const Rgb s0 = pick(), s1 = pick();
    auto star = [&](double x, double y) {
      const double dx = x - cx, dy = y - cy;
      double a = std::atan2(dy, dx) - rot;
      const double seg = 2.0 * std::numbers::pi / points;
      a = std::fmod(std::fmod(a, seg) + seg, seg) / seg;  // position within one spike, [0,1)
      const double rr = ri + (ro - ri) * (1.0 - std::abs(2.0 * a - 1.0));
      return std::hypot(dx, dy) <= rr;
    };
    fill_shape(img, star, [&](double x, double) { return lerp(s0, s1, (x - cx + ro) / (2 * ro)); });
    const double rx = cx + (u(rng) - 0.5) * 20.0 * unit, ry = cy + (u(rng) - 0.5) * 20.0 * unit;
    const double r_out = 12.0 * unit, r_in = 7.0 * unit;
    const Rgb c0 = pick(), c1 = pick();
    fill_shape(
        img,
        [&](double x, double y) {
          const double d = std::hypot(x - rx, y - ry);
          return d <= r_out && d >= r_in && x > rx - r_out * 0.3;
        },
        [&](double, double y) { return lerp(c0, c1, (y - ry + r_out) / (2 * r_out)); });
  } else {
    // Diagonal stripes with speckle noise across the whole frame.
    const Rgb a = pick(), b = pick(), speck = pick();
    const double period = (5.0 + 4.0 * u(rng)) * unit;
    const double angle = (0.2 + 0.6 * u(rng)) * std::numbers::pi;
    const double ca = std::cos(angle), sa = std::sin(angle);
    std::bernoulli_distribution dot(0.06);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double p = std::fmod((x * ca + y * sa) / period + 100.0, 1.0);
        const double blend = 0.5 + 0.5 * std::sin(p * 2.0 * std::numbers::pi);
        put(img, y, x, lerp(a, b, blend), 1.0f);
        if (dot(rng)) put(img, y, x, speck, 0.8f);
      }
  }
  img.clamp();
  return img;
}

Image make_clutter(std::uint64_t seed, int size) {
  std::mt19937_64 rng(mix_seed(seed, 0xC1077E5ull));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double unit = size / 64.0;
  auto color = [&] { return Rgb{static_cast<float>(u(rng)), static_cast<float>(u(rng)), static_cast<float>(u(rng))}; };
  // Linear ramp between two colors along a random direction.
  auto ramp = [&](double cx, double cy, double half) {
    const Rgb a = color(), b = color();
    const double ang = u(rng) * 2.0 * std::numbers::pi, ca = std::cos(ang), sa = std::sin(ang);
    return [=](double x, double y) { return lerp(a, b, 0.5 + ((x - cx) * ca + (y - cy) * sa) / (2.0 * half)); };
  };
  Image img = Image::filled(3, size, size);
  const int bg_kind = static_cast<int>(rng() % 3);
  const Rgb b0 = color(), b1 = color();
  const double period = (4.0 + 12.0 * u(rng)) * unit, bang = u(rng) * std::numbers::pi;
  const auto bramp = ramp(size / 2.0, size / 2.0, size / 2.0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      Rgb c = b0;
      if (bg_kind == 1) c = bramp(x + 0.5, y + 0.5);
      if (bg_kind == 2) {
        const double p = (x * std::cos(bang) + y * std::sin(bang)) / period;
        c = lerp(b0, b1, 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * p));
      }
      put(img, y, x, c, 1.0f);
    }

  const int n_shapes = 1 + static_cast<int>(rng() % 3);
  for (int k = 0; k < n_shapes; ++k) {
    const double cx = size * (0.15 + 0.7 * u(rng)), cy = size * (0.15 + 0.7 * u(rng));
    const double r = (6.0 + 18.0 * u(rng)) * unit, rot = u(rng) * 2.0 * std::numbers::pi;
    const int kind = static_cast<int>(rng() % 5);
    const int spikes = 3 + static_cast<int>(rng() % 6);
    const double aspect = 0.4 + 0.6 * u(rng), inner = 0.3 + 0.5 * u(rng);
    std::vector<double> radii(static_cast<std::size_t>(spikes));
    for (auto& v : radii) v = r * (0.6 + 0.4 * u(rng));
    auto covered = [=](double x, double y) {
      const double dx0 = x - cx, dy0 = y - cy;
      const double dx = dx0 * std::cos(rot) + dy0 * std::sin(rot), dy = -dx0 * std::sin(rot) + dy0 * std::cos(rot);
      const double d = std::hypot(dx, dy);
      const double a = std::atan2(dy, dx) + std::numbers::pi;  // [0, 2pi]
      const double seg = 2.0 * std::numbers::pi / spikes;
      const double f = std::fmod(a, seg) / seg;
      switch (kind) {
        case 0:  // ellipse
          return (dx * dx) / (r * r) + (dy * dy) / (r * r * aspect * aspect) <= 1.0;
        case 1:  // rotated rectangle
          return std::abs(dx) <= r && std::abs(dy) <= r * aspect;
        case 2:  // star
          return d <= r * inner + r * (1.0 - inner) * (1.0 - std::abs(2.0 * f - 1.0));
        case 3:  // ring
          return d <= r && d >= r * inner;
        default: {  // irregular polygon from per-vertex radii
          const auto i = static_cast<std::size_t>(a / seg) % radii.size();
          const double r0 = radii[i], r1 = radii[(i + 1) % radii.size()];
          return d <= r0 + (r1 - r0) * f;
        }
      }
    };
    const Rgb flat = color();
    const bool graded = u(rng) < 0.5;
    const auto fill = ramp(cx, cy, r);
    fill_shape(img, covered, [&](double x, double y) { return graded ? fill(x, y) : flat; });
  }
  if (u(rng) < 0.3) {
    std::bernoulli_distribution dot(0.02 + 0.06 * u(rng));
    const Rgb speck = color();
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (dot(rng)) put(img, y, x, speck, 0.8f);
  }
  img.clamp();
  return img;
}

void write_dataset_cache(const std::vector<CaptionedImage>& items, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream csv(fs::path(dir) / "captions.csv");
  csv << "image_path,caption\n";
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string rel = "images/" + std::to_string(i) + ".png";
    write_png(fs::path(dir) / rel, items[i].image);
    csv << rel << ',' << items[i].caption << '\n';
  }
}

}  // namespace pnptlab::data
