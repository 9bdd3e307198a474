#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

// Run manifests: every artifact a command writes is listed, with its content
// hash, in exactly one manifest.json.
namespace pnptlab::harness {

struct ArtifactRecord {
  std::string path;  // relative to the manifest's directory
  std::string sha256;
};

struct RunManifest {
  static constexpr int kFormatVersion = 1;
  std::string run_id;  // hash of command and resolved config
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json fingerprints = nlohmann::json::object();
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json inputs = nlohmann::json::array();  // manifests this run depends on
  nlohmann::json results = nlohmann::json::object();
  std::vector<ArtifactRecord> artifacts;
  std::string started, finished;  // ISO-8601 UTC
  double wall_clock_seconds = 0.0;
  std::string output_hash;  // over the sorted (path, sha256) list; timestamps excluded

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  static RunManifest load(const std::filesystem::path& path);
};

std::string iso_now();
std::string run_id_for(const std::string& command, const nlohmann::json& config);
std::string file_sha256(const std::filesystem::path& path);

// Hashes the listed files (relative to dir), fills output_hash and writes
// dir/manifest.json atomically.
void write_manifest(RunManifest m, const std::filesystem::path& dir, const std::vector<std::filesystem::path>& artifacts);

struct OrphanReport {
  std::vector<std::filesystem::path> orphans;     // on disk, in no manifest
  std::vector<std::filesystem::path> duplicates;  // claimed by more than one manifest
  std::vector<std::filesystem::path> missing;     // claimed but absent
  bool clean() const { return orphans.empty() && duplicates.empty() && missing.empty(); }
};

OrphanReport find_orphans(const std::filesystem::path& root);

}  // namespace pnptlab::harness
