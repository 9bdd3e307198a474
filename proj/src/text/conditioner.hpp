#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <list>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "nn/ops.hpp"
#include "nn/params.hpp"

// Frozen lookup-table text encoder plus the registry of learnable pseudo-words.
namespace pnptlab::text {

inline constexpr int kSeqLen = 16;

enum class Polarity { positive, negative };
std::string to_string(Polarity p);
Polarity parse_polarity(const std::string& s);

class TextError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kPseudoBase = 1 << 20;

  explicit Vocabulary(std::vector<std::string> words, int pseudo_capacity = 256);
  // Grammar words of the toy dataset plus a few prompt words.
  static Vocabulary toy_default();

  int id(const std::string& word) const;  // kUnk when absent
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }
  int pseudo_capacity() const { return pseudo_capacity_; }
  bool is_pseudo(int id) const { return id >= kPseudoBase; }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;  // index == id; 0 and 1 are PAD/UNK
  std::unordered_map<std::string, int> index_;
  int pseudo_capacity_;
};

struct TokenSequence {
  std::array<int, kSeqLen> ids{};
  int length = 0;  // tokens before padding
  bool truncated = false;
  int unknown = 0;
};

enum class InitKind { word_mean, specific_word, gaussian };

struct InitPolicy {
  InitKind kind = InitKind::word_mean;
  std::string word;     // specific_word
  double sigma = 0.01;  // gaussian
};

template <class T>
struct PseudoWord {
  std::string name;
  Polarity polarity = Polarity::positive;
  int k = 0;
  int first_id = 0;
  long steps = 0;
  nn::Var<T> vectors;  // [k, d], requires grad

  std::string surface() const { return name + (polarity == Polarity::positive ? "^p" : "^n"); }
};

struct PromptPair {
  std::string positive;
  std::string negative;
};

enum class CompositionMode { concatenate, sum };

template <class T>
class TextConditioner {
 public:
  TextConditioner(Vocabulary vocab, int dim, std::uint64_t seed);

  const Vocabulary& vocab() const { return vocab_; }
  int dim() const { return dim_; }

  // Base table [V, d]; trainable only during base pretraining.
  nn::ParamSet<T>& table_params() { return table_params_; }
  const nn::ParamSet<T>& table_params() const { return table_params_; }
  const nn::Var<T>& table() const { return table_; }
  std::string table_fingerprint() const { return table_params_.fingerprint(); }

  const PseudoWord<T>& register_pseudo_word(const std::string& name, Polarity polarity, int k,
                                            const InitPolicy& init, std::mt19937_64& rng);
  bool remove_pseudo_word(const std::string& name, Polarity polarity);
  const PseudoWord<T>* find(const std::string& name, Polarity polarity) const;
  PseudoWord<T>* find(const std::string& name, Polarity polarity);
  const std::list<PseudoWord<T>>& pseudo_words() const { return pseudo_; }
  std::list<PseudoWord<T>>& pseudo_words() { return pseudo_; }

  // Lowercased whitespace/punctuation split. A whitespace-delimited chunk that
  // names a pseudo-word ("S*", "S*^p", "S*^n") expands to its k reserved ids;
  // a bare name resolves to the entry of `context` polarity.
  TokenSequence tokenize(const std::string& text, Polarity context = Polarity::positive) const;

  // [N, kSeqLen, d]. Base rows are copies of table rows; pseudo rows come from
  // the registry's current vectors and carry gradient.
  nn::Var<T> embed(const std::vector<TokenSequence>& batch) const;
  nn::Var<T> embed(const TokenSequence& seq) const { return embed(std::vector<TokenSequence>{seq}); }

  // Prompt pair for several learned concepts. In positive_template, "{name}"
  // is replaced by that concept's positive surface form. In negative_template,
  // "{name}" gives the negative surface form and "{neg}" expands to all of
  // them; an empty negative template means "{neg}". The sum mode is
  // experimental: it registers "<a>+<b>..." entries holding elementwise sums.
  PromptPair compose_prompts(const std::vector<std::string>& concepts, const std::string& positive_template,
                             const std::string& negative_template,
                             CompositionMode mode = CompositionMode::concatenate);

 private:
  std::optional<std::pair<const PseudoWord<T>*, Polarity>> resolve_pseudo(const std::string& chunk,
                                                                          Polarity context) const;
  Vocabulary vocab_;
  int dim_;
  nn::ParamSet<T> table_params_;
  nn::Var<T> table_;
  std::list<PseudoWord<T>> pseudo_;
  int next_pseudo_id_ = Vocabulary::kPseudoBase;
};

// Embedding artifact (JSON): base64 little-endian float32 payload per entry
// and a CRC32 over the concatenated decoded payloads.
struct EmbeddingEntry {
  std::string name;
  Polarity polarity = Polarity::positive;
  int k = 0;
  long steps = 0;
  std::vector<float> vectors;  // k*d row-major
};

struct EmbeddingArtifact {
  static constexpr int kFormatVersion = 1;
  int dim = 0;
  std::vector<EmbeddingEntry> entries;
};

class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
EmbeddingArtifact snapshot_embeddings(const TextConditioner<T>& cond);
void save_embeddings(const EmbeddingArtifact& art, const std::filesystem::path& path);
EmbeddingArtifact load_embeddings(const std::filesystem::path& path);
// Registers (or overwrites) every entry; throws ArtifactError on dimension mismatch.
template <class T>
void install_embeddings(const EmbeddingArtifact& art, TextConditioner<T>& cond);

void save_conditioner(const TextConditioner<float>& cond, const std::filesystem::path& path);
TextConditioner<float> load_conditioner(const std::filesystem::path& path);

}  // namespace pnptlab::text
