#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "guidance/guidance.hpp"
#include "metrics/metrics.hpp"

// Sanity probes on a pretrained stack.
namespace pnptlab::harness {

struct CaptionProbe {
  int per_class = 0;
  double accuracy = 0;    // classifier-head decision between the two captions
  double cas_margin = 0;  // CAS(first class samples, first caption) - CAS(same samples, second caption)
  std::vector<data::Image> first, second;

  nlohmann::json to_json() const;  // numbers only
};

// Samples `per_class` images each for "a red circle" and "a blue square"
// (negative prompt empty, classifier-free scale `gamma`, seeds seed + i) and
// classifies every sample as whichever caption the heads score higher.
CaptionProbe caption_probe(const guidance::Stack& s, const metrics::FeatureEncoder& enc, int per_class,
                           std::uint64_t seed, double gamma = 3.0, int steps = 50);

}  // namespace pnptlab::harness
