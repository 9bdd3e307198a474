#include "nn/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "util/hash.hpp"

namespace pnptlab::nn {

namespace {

constexpr char kMagic[8] = {'P', 'N', 'P', 'T', 'L', 'A', 'B', '\0'};

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<std::uint8_t> buf;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b, std::size_t end) : buf(b), end_(end) {}
  void raw(void* p, std::size_t n) {
    if (pos + n > end_) throw CheckpointError("checkpoint truncated");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::string str() {
    const auto n = u32();
    if (pos + n > end_) throw CheckpointError("checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
  std::size_t end_;
};

}  // namespace

void Checkpoint::save(const std::filesystem::path& path) const {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kVersion);
  w.str(kind);
  w.str(meta.dump());
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    w.str(names[i]);
    w.u32(static_cast<std::uint32_t>(shapes[i].size()));
    for (int d : shapes[i]) w.u32(static_cast<std::uint32_t>(d));
    w.raw(tensors[i].data(), tensors[i].size() * sizeof(float));
  }
  w.str(fingerprint);
  const std::uint32_t crc = util::crc32(w.buf);
  w.u32(crc);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof kMagic + 8) throw CheckpointError("checkpoint truncated: " + path.string());
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 4, 4);
  if (util::crc32(std::span(buf.data(), buf.size() - 4)) != stored)
    throw CheckpointError("checkpoint checksum mismatch: " + path.string());

  Reader r(buf, buf.size() - 4);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint: " + path.string());
  if (const auto v = r.u32(); v != kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(v));
  Checkpoint c;
  c.kind = r.str();
  c.meta = nlohmann::json::parse(r.str());
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    c.names.push_back(r.str());
    const auto rank = r.u32();
    Shape s(rank);
    for (auto& d : s) d = static_cast<int>(r.u32());
    std::vector<float> t(numel(s));
    r.raw(t.data(), t.size() * sizeof(float));
    c.shapes.push_back(std::move(s));
    c.tensors.push_back(std::move(t));
  }
  c.fingerprint = r.str();
  return c;
}

}  // namespace pnptlab::nn
