#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "nn/params.hpp"

namespace pnptlab::nn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Versioned binary container: magic, version, kind tag, JSON metadata,
// float32 tensors, the parameter fingerprint, and a trailing CRC32.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  nlohmann::json meta;
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<float>> tensors;
  std::string fingerprint;

  template <class T>
  static Checkpoint from_params(std::string kind, nlohmann::json meta, const ParamSet<T>& params) {
    Checkpoint c;
    c.kind = std::move(kind);
    c.meta = std::move(meta);
    for (std::size_t i = 0; i < params.size(); ++i) {
      c.names.push_back(params.names()[i]);
      c.shapes.push_back(params.vars()[i].shape());
      auto v = params.vars()[i].value();
      c.tensors.emplace_back(v.begin(), v.end());
    }
    c.fingerprint = params.fingerprint();
    return c;
  }

  // Loads tensors into an already-constructed ParamSet with the same layout
  // and verifies the recorded fingerprint.
  template <class T>
  void load_into(ParamSet<T>& params) const {
    if (params.size() != tensors.size())
      throw CheckpointError("checkpoint '" + kind + "': tensor count " + std::to_string(tensors.size()) +
                            " does not match model (" + std::to_string(params.size()) + ")");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (params.names()[i] != names[i] || params.vars()[i].shape() != shapes[i])
        throw CheckpointError("checkpoint '" + kind + "': layout mismatch at " + names[i]);
      auto dst = params.vars()[i].mutable_value();
      std::copy(tensors[i].begin(), tensors[i].end(), dst.begin());
    }
    if (std::is_same_v<T, float> && params.fingerprint() != fingerprint)
      throw CheckpointError("checkpoint '" + kind + "': fingerprint mismatch after load");
  }

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace pnptlab::nn
