#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "data/image.hpp"

namespace pnptlab::data {

struct GrammarConfig {
  std::vector<std::string> shapes{"circle", "square", "triangle", "diamond"};
  std::vector<std::string> colors{"red", "green", "blue", "yellow", "purple", "orange"};
  std::vector<std::string> backgrounds{"black", "white", "gray"};
  bool size_modifiers = true;
  bool position_modifiers = true;
  int image_size = 64;
};

// Every word the caption grammar can emit.
std::vector<std::string> grammar_words(const GrammarConfig& g = {});

struct ItemSpec {
  int shape = 0;
  int color = 0;
  int background = 0;
  int size = 0;      // 0 none, 1 small, 2 large
  int position = 0;  // 0 center, 1 left, 2 right, 3 top, 4 bottom
};

struct CaptionedImage {
  Image image;
  std::string caption;
  ItemSpec spec;
};

std::string caption_for(const ItemSpec& spec, const GrammarConfig& g = {});

// Pure function of (spec, seed): the seed only drives sub-pixel jitter.
CaptionedImage render_item(const ItemSpec& spec, std::uint64_t seed, const GrammarConfig& g = {});

// n images, class-balanced over shape x color: each consecutive block of
// shapes*colors items visits every cell once in a seeded order.
std::vector<CaptionedImage> generate_dataset(int n, std::uint64_t seed, const GrammarConfig& g = {});

enum class ReferenceKind { composite_novel_shape, novel_texture_style };
ReferenceKind parse_reference_kind(const std::string& s);
std::string to_string(ReferenceKind k);

// Images deliberately outside the caption grammar.
Image make_reference(ReferenceKind kind, std::uint64_t seed, int size = 64);

// Random out-of-grammar scene: flat, ramp or striped background, one to three
// ellipses, rectangles, stars, rings or irregular polygons with flat or ramp
// fills, optional speckle. Shares no generator with make_reference.
Image make_clutter(std::uint64_t seed, int size = 64);

// Saves dataset PNGs plus captions.csv (image_path, caption).
void write_dataset_cache(const std::vector<CaptionedImage>& items, const std::string& dir);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace pnptlab::data
