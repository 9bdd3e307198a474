#include "harness/probes.hpp"

#include <algorithm>
#include <stdexcept>

namespace pnptlab::harness {

namespace {

struct Caption {
  const char* text;
  const char* shape;
  const char* color;
};

constexpr Caption kCaptions[2] = {{"a red circle", "circle", "red"}, {"a blue square", "square", "blue"}};

int index_of(const std::vector<std::string>& names, const std::string& n) {
  const auto it = std::find(names.begin(), names.end(), n);
  if (it == names.end()) throw std::invalid_argument("caption probe: '" + n + "' is not a grammar word");
  return static_cast<int>(it - names.begin());
}

}  // namespace

nlohmann::json CaptionProbe::to_json() const {
  return {{"per_class", per_class}, {"accuracy", accuracy}, {"cas_margin", cas_margin}};
}

CaptionProbe caption_probe(const guidance::Stack& s, const metrics::FeatureEncoder& enc, int per_class,
                           std::uint64_t seed, double gamma, int steps) {
  if (per_class < 1) throw std::invalid_argument("caption probe needs at least one sample per class");
  const data::GrammarConfig g;
  int shape_idx[2], color_idx[2];
  for (int c = 0; c < 2; ++c) {
    shape_idx[c] = index_of(g.shapes, kCaptions[c].shape);
    color_idx[c] = index_of(g.colors, kCaptions[c].color);
  }
  CaptionProbe out;
  out.per_class = per_class;
  int correct = 0;
  for (int c = 0; c < 2; ++c) {
    auto& dst = c == 0 ? out.first : out.second;
    for (int i = 0; i < per_class; ++i) {
      guidance::GuidanceSpec spec;
      spec.positive_prompt = kCaptions[c].text;
      spec.negative_prompt = "";
      spec.gamma = gamma;
      spec.steps = steps;
      spec.seed = seed + static_cast<std::uint64_t>(c * per_class + i);
      dst.push_back(guidance::sample(spec, s));
    }
    const auto logits = enc.classify(enc.forward(dst));
    const auto sh = logits.shape.value(), co = logits.color.value();
    const int ns = logits.shape.shape()[1], nc = logits.color.shape()[1];
    for (int i = 0; i < per_class; ++i) {
      double score[2];
      for (int k = 0; k < 2; ++k)
        score[k] = sh[static_cast<std::size_t>(i * ns + shape_idx[k])] + co[static_cast<std::size_t>(i * nc + color_idx[k])];
      if ((score[0] > score[1]) == (c == 0)) ++correct;
    }
  }
  out.accuracy = static_cast<double>(correct) / (2.0 * per_class);
  out.cas_margin = metrics::cas(out.first, kCaptions[0].text, enc) - metrics::cas(out.first, kCaptions[1].text, enc);
  return out;
}

}  // namespace pnptlab::harness
