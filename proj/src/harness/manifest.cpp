#include "harness/manifest.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <map>

#include "util/hash.hpp"
#include "util/io.hpp"

namespace pnptlab::harness {

namespace fs = std::filesystem;

nlohmann::json RunManifest::to_json() const {
  nlohmann::json arts = nlohmann::json::array();
  for (const auto& a : artifacts) arts.push_back({{"path", a.path}, {"sha256", a.sha256}});
  return {{"format_version", kFormatVersion},
          {"run_id", run_id},
          {"command", command},
          {"config", config},
          {"fingerprints", fingerprints},
          {"seeds", seeds},
          {"inputs", inputs},
          {"results", results},
          {"artifacts", arts},
          {"started", started},
          {"finished", finished},
          {"wall_clock_seconds", wall_clock_seconds},
          {"output_hash", output_hash}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  if (j.value("format_version", 0) != kFormatVersion)
    throw std::runtime_error("unsupported manifest version " + std::to_string(j.value("format_version", 0)));
  RunManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.command = j.at("command").get<std::string>();
  m.config = j.value("config", nlohmann::json::object());
  m.fingerprints = j.value("fingerprints", nlohmann::json::object());
  m.seeds = j.value("seeds", nlohmann::json::object());
  m.inputs = j.value("inputs", nlohmann::json::array());
  m.results = j.value("results", nlohmann::json::object());
  for (const auto& a : j.at("artifacts")) m.artifacts.push_back({a.at("path"), a.at("sha256")});
  m.started = j.value("started", "");
  m.finished = j.value("finished", "");
  m.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
  m.output_hash = j.value("output_hash", "");
  return m;
}

RunManifest RunManifest::load(const fs::path& path) {
  try {
    return from_json(nlohmann::json::parse(util::read_text(path)));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed manifest " + path.string() + ": " + e.what());
  }
}

std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string run_id_for(const std::string& command, const nlohmann::json& config) {
  const auto text = command + "\n" + config.dump();
  return util::sha256_hex({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}).substr(0, 16);
}

std::string file_sha256(const fs::path& path) {
  const auto text = util::read_text(path);
  return util::sha256_hex({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

void write_manifest(RunManifest m, const fs::path& dir, const std::vector<fs::path>& artifacts) {
  m.artifacts.clear();
  for (const auto& rel : artifacts) m.artifacts.push_back({rel.generic_string(), file_sha256(dir / rel)});
  std::sort(m.artifacts.begin(), m.artifacts.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  std::string joined;
  for (const auto& a : m.artifacts) joined += a.path + " " + a.sha256 + "\n";
  m.output_hash = util::sha256_hex({reinterpret_cast<const std::uint8_t*>(joined.data()), joined.size()});
  util::write_text_atomic(dir / "manifest.json", m.to_json().dump(2) + "\n");
}

OrphanReport find_orphans(const fs::path& root) {
  OrphanReport r;
  std::map<fs::path, int> claimed;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto p = fs::weakly_canonical(e.path());
    if (e.path().filename() == "manifest.json") {
      const auto m = RunManifest::load(e.path());
      for (const auto& a : m.artifacts) ++claimed[fs::weakly_canonical(e.path().parent_path() / a.path)];
    } else {
      files.push_back(p);
    }
  }
  for (const auto& f : files)
    if (!claimed.count(f)) r.orphans.push_back(f);
  for (const auto& [p, n] : claimed) {
    if (n > 1) r.duplicates.push_back(p);
    if (!fs::exists(p)) r.missing.push_back(p);
  }
  std::sort(r.orphans.begin(), r.orphans.end());
  return r;
}

}  // namespace pnptlab::harness
