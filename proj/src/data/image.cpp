#include "data/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace pnptlab::data {

void Image::clamp() {
  for (auto& v : pixels) v = std::clamp(v, -1.0f, 1.0f);
}

bool Mask::any() const {
  return std::any_of(bits.begin(), bits.end(), [](auto b) { return b != 0; });
}
bool Mask::all() const {
  return std::all_of(bits.begin(), bits.end(), [](auto b) { return b != 0; });
}

std::uint8_t to_byte(float v) {
  const double x = (std::clamp(static_cast<double>(v), -1.0, 1.0) + 1.0) * 127.5;
  return static_cast<std::uint8_t>(std::nearbyint(x));  // default rounding mode is half-to-even
}

float from_byte(std::uint8_t b) { return static_cast<float>(b / 127.5 - 1.0); }

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

void write_rows(const std::filesystem::path& path, int w, int h, int color_type,
                const std::vector<std::uint8_t>& rows, int bytes_per_px) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw ImageIoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("png write failed: " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, w, h, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(rows.data() + static_cast<std::size_t>(y) * w * bytes_per_px));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Returns interleaved 8-bit RGB.
std::vector<std::uint8_t> read_rgb(const std::filesystem::path& path, int& w, int& h) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw ImageIoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("png read failed: " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  const int ct = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (ct == PNG_COLOR_TYPE_GRAY || ct == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (ct & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y) png_read_row(png, rgb.data() + static_cast<std::size_t>(y) * w * 3, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return rgb;
}

std::vector<std::uint8_t> interleave(const Image& img) {
  if (img.channels != 3) throw ImageIoError("png output requires 3 channels");
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) rows[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = to_byte(img.at(c, y, x));
  return rows;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_rows(path, img.width, img.height, PNG_COLOR_TYPE_RGB, interleave(img), 3);
}

std::vector<std::uint8_t> encode_png(const Image& img) {
  auto rows = interleave(img);
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("png encode failed");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t n) {
        auto* v = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
        v->insert(v->end(), data, data + n);
      },
      nullptr);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) png_write_row(png, rows.data() + static_cast<std::size_t>(y) * img.width * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

Image read_png(const std::filesystem::path& path) {
  int w = 0, h = 0;
  auto rgb = read_rgb(path, w, h);
  Image img = Image::filled(3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = from_byte(rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c]);
  return img;
}

Mask read_mask_png(const std::filesystem::path& path) {
  int w = 0, h = 0;
  auto rgb = read_rgb(path, w, h);
  Mask m{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h)};
  for (std::size_t i = 0; i < m.bits.size(); ++i) {
    const int g = (rgb[3 * i] + rgb[3 * i + 1] + rgb[3 * i + 2]) / 3;
    m.bits[i] = g > 127 ? 1 : 0;
  }
  return m;
}

void write_mask_png(const std::filesystem::path& path, const Mask& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::vector<std::uint8_t> rows(m.bits.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = m.bits[i] ? 255 : 0;
  write_rows(path, m.width, m.height, PNG_COLOR_TYPE_GRAY, rows, 1);
}

template <class T>
nn::Var<T> to_tensor(std::span<const Image> images) {
  if (images.empty()) throw nn::ShapeError("to_tensor: no images");
  const auto& f = images.front();
  std::vector<T> data;
  data.reserve(images.size() * f.size());
  for (const auto& img : images) {
    if (img.channels != f.channels || img.height != f.height || img.width != f.width)
      throw nn::ShapeError("to_tensor: images differ in shape");
    data.insert(data.end(), img.pixels.begin(), img.pixels.end());
  }
  return nn::Var<T>::constant({static_cast<int>(images.size()), f.channels, f.height, f.width}, std::move(data));
}

template <class T>
Image from_tensor(const nn::Var<T>& t, int n) {
  if (t.rank() != 4) throw nn::ShapeError("from_tensor: expects NCHW");
  Image img = Image::filled(t.dim(1), t.dim(2), t.dim(3));
  const std::size_t per = img.size();
  for (std::size_t i = 0; i < per; ++i) img.pixels[i] = static_cast<float>(t.value()[n * per + i]);
  img.clamp();
  return img;
}

Image flip_horizontal(const Image& img) {
  Image out = img;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

template nn::Var<float> to_tensor<float>(std::span<const Image>);
template nn::Var<double> to_tensor<double>(std::span<const Image>);
template Image from_tensor<float>(const nn::Var<float>&, int);
template Image from_tensor<double>(const nn::Var<double>&, int);

}  // namespace pnptlab::data
