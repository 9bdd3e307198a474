#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "nn/tensor.hpp"

namespace pnptlab::data {

// Planar CHW image with values in [-1, 1].
struct Image {
  int channels = 3;
  int height = 64;
  int width = 64;
  std::vector<float> pixels;

  static Image filled(int c, int h, int w, float v = 0.0f) { return Image{c, h, w, std::vector<float>(static_cast<std::size_t>(c) * h * w, v)}; }

  float& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  std::size_t size() const { return pixels.size(); }
  void clamp();
  bool operator==(const Image&) const = default;
};

// Single-channel {0,1} mask.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;
  bool any() const;
  bool all() const;
};

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// [-1,1] -> [0,255] by v' = (v + 1) * 127.5, rounded half-to-even.
std::uint8_t to_byte(float v);
float from_byte(std::uint8_t b);

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);
// Nonzero (> 127 after grayscale) pixels are set.
Mask read_mask_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const Mask& m);
// Encodes to an in-memory PNG (used for content hashes).
std::vector<std::uint8_t> encode_png(const Image& img);

// Stacks images into an NCHW tensor.
template <class T>
nn::Var<T> to_tensor(std::span<const Image> images);
template <class T>
nn::Var<T> to_tensor(const Image& img) {
  return to_tensor<T>(std::span<const Image>(&img, 1));
}
// Sample n of an NCHW tensor, clamped to [-1, 1].
template <class T>
Image from_tensor(const nn::Var<T>& t, int n = 0);

// Mirror along the width axis.
Image flip_horizontal(const Image& img);

}  // namespace pnptlab::data
