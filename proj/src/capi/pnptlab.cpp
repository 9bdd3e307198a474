#include "pnptlab/pnptlab.h"

#include <cstring>
#include <iostream>
#include <string>

#include "harness/commands.hpp"

struct pnpt_result {
  pnpt_status status = PNPT_OK;
  std::string message, manifest, out_dir;
};

struct pnpt_embeddings {
  pnptlab::text::EmbeddingArtifact art;
};

namespace {

char* dup_string(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* pnpt_version(void) { return "0.1.0"; }

int pnpt_command_count(void) { return static_cast<int>(pnptlab::harness::command_names().size()); }

const char* pnpt_command_name(int index) {
  const auto& names = pnptlab::harness::command_names();
  if (index < 0 || index >= static_cast<int>(names.size())) return nullptr;
  return names[static_cast<std::size_t>(index)].c_str();
}

char* pnpt_default_config_json(void) {
  try {
    return dup_string(pnptlab::harness::default_config().dump(2));
  } catch (...) {
    return nullptr;
  }
}

void pnpt_string_free(char* s) { std::free(s); }

pnpt_status pnpt_run(const char* command, const char* config_path, const char* flags_json, int verbose,
                     pnpt_result** out) {
  if (!out) return PNPT_ERR_INVALID_ARGUMENT;
  auto* r = new (std::nothrow) pnpt_result;
  *out = r;
  if (!r) return PNPT_ERR_FAILURE;
  if (!command) {
    r->status = PNPT_ERR_INVALID_ARGUMENT;
    r->message = "command is NULL";
    return r->status;
  }
  nlohmann::json flags;
  if (flags_json && *flags_json) {
    try {
      flags = nlohmann::json::parse(flags_json);
    } catch (const nlohmann::json::exception& e) {
      r->status = PNPT_ERR_CONFIG;
      r->message = std::string("config error: flags: ") + e.what();
      return r->status;
    }
  }
  std::optional<std::filesystem::path> file;
  if (config_path && *config_path) file = config_path;
  pnptlab::harness::CommandResult res;
  const int code = pnptlab::harness::run_guarded(command, file, flags, &r->message, &res, verbose ? &std::cerr : nullptr);
  r->status = static_cast<pnpt_status>(code);
  if (code == 0) {
    r->manifest = res.manifest.to_json().dump(2);
    r->out_dir = res.out_dir.string();
  }
  return r->status;
}

pnpt_status pnpt_result_status(const pnpt_result* r) { return r ? r->status : PNPT_ERR_INVALID_ARGUMENT; }
const char* pnpt_result_message(const pnpt_result* r) { return r ? r->message.c_str() : ""; }
const char* pnpt_result_manifest(const pnpt_result* r) { return r ? r->manifest.c_str() : ""; }
const char* pnpt_result_out_dir(const pnpt_result* r) { return r ? r->out_dir.c_str() : ""; }
void pnpt_result_free(pnpt_result* r) { delete r; }

pnpt_status pnpt_fuse(const float* z_p, const float* z_n, size_t n, float gamma, float* out) {
  if ((!z_p || !z_n || !out) && n > 0) return PNPT_ERR_INVALID_ARGUMENT;
  using V = pnptlab::nn::Var<float>;
  const auto a = V::constant({static_cast<int>(n)}, std::vector<float>(z_p, z_p + n));
  const auto b = V::constant({static_cast<int>(n)}, std::vector<float>(z_n, z_n + n));
  const auto f = pnptlab::guidance::fuse(a, b, gamma);
  std::memcpy(out, f.value().data(), n * sizeof(float));
  return PNPT_OK;
}

pnpt_status pnpt_embeddings_load(const char* path, pnpt_embeddings** out, char* err, size_t err_cap) {
  if (!path || !out) return PNPT_ERR_INVALID_ARGUMENT;
  *out = nullptr;
  try {
    auto* e = new pnpt_embeddings;
    e->art = pnptlab::text::load_embeddings(path);
    *out = e;
    return PNPT_OK;
  } catch (const std::exception& ex) {
    if (err && err_cap) {
      std::strncpy(err, ex.what(), err_cap - 1);
      err[err_cap - 1] = '\0';
    }
    return PNPT_ERR_DEPENDENCY;
  }
}

pnpt_status pnpt_embeddings_save(const pnpt_embeddings* e, const char* path) {
  if (!e || !path) return PNPT_ERR_INVALID_ARGUMENT;
  try {
    pnptlab::text::save_embeddings(e->art, path);
    return PNPT_OK;
  } catch (...) {
    return PNPT_ERR_FAILURE;
  }
}

int pnpt_embeddings_dim(const pnpt_embeddings* e) { return e ? e->art.dim : 0; }
int pnpt_embeddings_count(const pnpt_embeddings* e) { return e ? static_cast<int>(e->art.entries.size()) : 0; }

const char* pnpt_embeddings_name(const pnpt_embeddings* e, int index, char* polarity, int* k) {
  if (!e || index < 0 || index >= static_cast<int>(e->art.entries.size())) return nullptr;
  const auto& en = e->art.entries[static_cast<std::size_t>(index)];
  if (polarity) *polarity = en.polarity == pnptlab::text::Polarity::positive ? 'p' : 'n';
  if (k) *k = en.k;
  return en.name.c_str();
}

const float* pnpt_embeddings_vectors(const pnpt_embeddings* e, int index) {
  if (!e || index < 0 || index >= static_cast<int>(e->art.entries.size())) return nullptr;
  return e->art.entries[static_cast<std::size_t>(index)].vectors.data();
}

void pnpt_embeddings_free(pnpt_embeddings* e) { delete e; }

}  // extern "C"
