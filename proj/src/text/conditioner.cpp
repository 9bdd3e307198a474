#include "text/conditioner.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "data/toy_data.hpp"
#include "nn/checkpoint.hpp"
#include "util/hash.hpp"

namespace pnptlab::text {

std::string to_string(Polarity p) { return p == Polarity::positive ? "positive" : "negative"; }

Polarity parse_polarity(const std::string& s) {
  if (s == "positive") return Polarity::positive;
  if (s == "negative") return Polarity::negative;
  throw TextError("unknown polarity '" + s + "'");
}

Vocabulary::Vocabulary(std::vector<std::string> words, int pseudo_capacity) : pseudo_capacity_(pseudo_capacity) {
  words_ = {"<pad>", "<unk>"};
  for (auto& w : words)
    if (!index_.count(w) && w != "<pad>" && w != "<unk>") {
      index_[w] = static_cast<int>(words_.size());
      words_.push_back(std::move(w));
    }
  index_["<pad>"] = kPad;
  index_["<unk>"] = kUnk;
}

Vocabulary Vocabulary::toy_default() {
  auto words = data::grammar_words();
  for (const char* w : {"photo", "picture", "image", "of", "and", "in", "with", "style", "an", "is"}) words.push_back(w);
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return Vocabulary(std::move(words));
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw TextError("no base word with id " + std::to_string(id));
  return words_[static_cast<std::size_t>(id)];
}

template <class T>
TextConditioner<T>::TextConditioner(Vocabulary vocab, int dim, std::uint64_t seed)
    : vocab_(std::move(vocab)), dim_(dim) {
  if (dim < 1) throw TextError("embedding dim must be >= 1");
  std::mt19937_64 rng(seed);
  table_ = table_params_.add("table", {vocab_.size(), dim}, nn::normal_init<T>(vocab_.size() * static_cast<std::size_t>(dim), 1.0, rng));
  table_params_.set_trainable(false);
}

template <class T>
const PseudoWord<T>& TextConditioner<T>::register_pseudo_word(const std::string& name, Polarity polarity, int k,
                                                              const InitPolicy& init, std::mt19937_64& rng) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
    throw TextError("pseudo-word name must be a single non-empty chunk");
  if (find(name, polarity)) throw TextError("pseudo-word '" + name + "' (" + to_string(polarity) + ") already registered");
  if (k < 1) throw TextError("pseudo-word k must be >= 1");
  const int used = next_pseudo_id_ - Vocabulary::kPseudoBase;
  if (used + k > vocab_.pseudo_capacity())
    throw TextError("pseudo-word '" + name + "': k=" + std::to_string(k) + " exceeds reserved capacity (" +
                    std::to_string(vocab_.pseudo_capacity() - used) + " ids left)");
  std::vector<T> v(static_cast<std::size_t>(k) * dim_);
  const auto& tab = table_.data();
  switch (init.kind) {
    case InitKind::word_mean: {
      std::vector<double> m(dim_, 0.0);
      for (int r = 0; r < vocab_.size(); ++r)
        for (int d = 0; d < dim_; ++d) m[d] += tab[static_cast<std::size_t>(r) * dim_ + d];
      for (int i = 0; i < k; ++i)
        for (int d = 0; d < dim_; ++d) v[static_cast<std::size_t>(i) * dim_ + d] = static_cast<T>(m[d] / vocab_.size());
      break;
    }
    case InitKind::specific_word: {
      const int id = vocab_.id(init.word);
      if (id == Vocabulary::kUnk && init.word != "<unk>") throw TextError("init word '" + init.word + "' not in vocabulary");
      for (int i = 0; i < k; ++i)
        std::copy_n(tab.begin() + static_cast<std::ptrdiff_t>(id) * dim_, dim_, v.begin() + static_cast<std::ptrdiff_t>(i) * dim_);
      break;
    }
    case InitKind::gaussian:
      v = nn::normal_init<T>(v.size(), init.sigma, rng);
      break;
  }
  PseudoWord<T> pw;
  pw.name = name;
  pw.polarity = polarity;
  pw.k = k;
  pw.first_id = next_pseudo_id_;
  pw.vectors = nn::Var<T>::parameter({k, dim_}, std::move(v));
  next_pseudo_id_ += k;
  pseudo_.push_back(std::move(pw));
  return pseudo_.back();
}

template <class T>
bool TextConditioner<T>::remove_pseudo_word(const std::string& name, Polarity polarity) {
  auto it = std::find_if(pseudo_.begin(), pseudo_.end(),
                         [&](const auto& p) { return p.name == name && p.polarity == polarity; });
  if (it == pseudo_.end()) return false;
  pseudo_.erase(it);  // ids are not recycled
  return true;
}

template <class T>
const PseudoWord<T>* TextConditioner<T>::find(const std::string& name, Polarity polarity) const {
  for (const auto& p : pseudo_)
    if (p.name == name && p.polarity == polarity) return &p;
  return nullptr;
}

template <class T>
PseudoWord<T>* TextConditioner<T>::find(const std::string& name, Polarity polarity) {
  for (auto& p : pseudo_)
    if (p.name == name && p.polarity == polarity) return &p;
  return nullptr;
}

template <class T>
std::optional<std::pair<const PseudoWord<T>*, Polarity>> TextConditioner<T>::resolve_pseudo(const std::string& chunk,
                                                                                         Polarity context) const {
  std::string name = chunk;
  Polarity pol = context;
  if (chunk.size() > 2 && chunk[chunk.size() - 2] == '^') {
    const char tag = chunk.back();
    if (tag == 'p' || tag == 'n') {
      name = chunk.substr(0, chunk.size() - 2);
      pol = tag == 'p' ? Polarity::positive : Polarity::negative;
    }
  }
  if (const auto* pw = find(name, pol)) return std::make_pair(pw, pol);
  return std::nullopt;
}

template <class T>
TokenSequence TextConditioner<T>::tokenize(const std::string& text, Polarity context) const {
  TokenSequence seq;
  std::vector<int> ids;
  auto push_word = [&](std::string w) {
    if (w.empty()) return;
    const int id = vocab_.id(w);
    if (id == Vocabulary::kUnk) ++seq.unknown;
    ids.push_back(id);
  };
  std::istringstream in(text);
  std::string chunk;
  while (in >> chunk) {
    std::string core = chunk;
    // Trailing sentence punctuation does not belong to a pseudo-word name.
    while (core.size() > 1 && (core.back() == ',' || core.back() == '.' || core.back() == ';' || core.back() == '!'))
      core.pop_back();
    if (auto hit = resolve_pseudo(core, context)) {
      for (int i = 0; i < hit->first->k; ++i) ids.push_back(hit->first->first_id + i);
      continue;
    }
    std::string word;
    for (char c : chunk) {
      const auto uc = static_cast<unsigned char>(c);
      if (std::isalnum(uc)) {
        word.push_back(static_cast<char>(std::tolower(uc)));
      } else {
        push_word(std::move(word));
        word.clear();
      }
    }
    push_word(std::move(word));
  }
  seq.truncated = ids.size() > static_cast<std::size_t>(kSeqLen);
  seq.length = static_cast<int>(std::min<std::size_t>(ids.size(), kSeqLen));
  seq.ids.fill(Vocabulary::kPad);
  std::copy_n(ids.begin(), seq.length, seq.ids.begin());
  return seq;
}

template <class T>
nn::Var<T> TextConditioner<T>::embed(const std::vector<TokenSequence>& batch) const {
  std::vector<nn::Var<T>> sources{table_};
  std::vector<std::pair<int, int>> index;
  index.reserve(batch.size() * kSeqLen);
  std::map<const PseudoWord<T>*, int> source_of;
  for (const auto& seq : batch)
    for (int id : seq.ids) {
      if (!vocab_.is_pseudo(id)) {
        if (id < 0 || id >= vocab_.size()) throw TextError("unresolvable token id " + std::to_string(id));
        index.emplace_back(0, id);
        continue;
      }
      const PseudoWord<T>* owner = nullptr;
      for (const auto& p : pseudo_)
        if (id >= p.first_id && id < p.first_id + p.k) owner = &p;
      if (!owner) throw TextError("unresolvable pseudo-word id " + std::to_string(id));
      auto [it, inserted] = source_of.emplace(owner, static_cast<int>(sources.size()));
      if (inserted) sources.push_back(owner->vectors);
      index.emplace_back(it->second, id - owner->first_id);
    }
  auto rows = nn::gather_rows(sources, index);
  return nn::reshape(rows, {static_cast<int>(batch.size()), kSeqLen, dim_});
}

namespace {
void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) s.replace(pos, from.size(), to);
}
}  // namespace

template <class T>
PromptPair TextConditioner<T>::compose_prompts(const std::vector<std::string>& concepts,
                                               const std::string& positive_template,
                                               const std::string& negative_template, CompositionMode mode) {
  if (concepts.empty()) throw TextError("compose_prompts: no concepts");
  for (const auto& c : concepts) {
    if (!find(c, Polarity::positive)) throw TextError("concept '" + c + "' has no positive pseudo-word");
    if (!find(c, Polarity::negative)) throw TextError("concept '" + c + "' has no negative pseudo-word");
  }
  std::vector<std::string> names = concepts;
  if (mode == CompositionMode::sum && concepts.size() > 1) {
    std::string joined;
    for (const auto& c : concepts) joined += (joined.empty() ? "" : "+") + c;
    for (Polarity pol : {Polarity::positive, Polarity::negative}) {
      const auto* first = find(concepts[0], pol);
      std::vector<T> acc(first->vectors.data());
      for (std::size_t i = 1; i < concepts.size(); ++i) {
        const auto* pw = find(concepts[i], pol);
        if (pw->k != first->k) throw TextError("sum composition requires equal k across concepts");
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += pw->vectors.value()[j];
      }
      if (auto* existing = find(joined, pol)) {
        std::copy(acc.begin(), acc.end(), existing->vectors.mutable_value().begin());
      } else {
        std::mt19937_64 unused(0);
        auto& pw = const_cast<PseudoWord<T>&>(register_pseudo_word(joined, pol, first->k, {}, unused));
        std::copy(acc.begin(), acc.end(), pw.vectors.mutable_value().begin());
      }
    }
    names = {joined};
  }
  std::string pos = positive_template;
  std::string neg = negative_template.empty() ? "{neg}" : negative_template;
  std::string all_neg;
  for (const auto& n : names) all_neg += (all_neg.empty() ? "" : " ") + find(n, Polarity::negative)->surface();
  if (mode == CompositionMode::sum && concepts.size() > 1) {
    // The first placeholder carries the summed entry; the rest are dropped.
    bool first = true;
    for (const auto& c : concepts) {
      const std::string ph = "{" + c + "}";
      replace_all(pos, ph, first ? find(names[0], Polarity::positive)->surface() : "");
      replace_all(neg, ph, first ? find(names[0], Polarity::negative)->surface() : "");
      first = false;
    }
  } else {
    for (const auto& c : concepts) {
      replace_all(pos, "{" + c + "}", find(c, Polarity::positive)->surface());
      replace_all(neg, "{" + c + "}", find(c, Polarity::negative)->surface());
    }
  }
  replace_all(neg, "{neg}", all_neg);
  return {pos, neg};
}

template <class T>
EmbeddingArtifact snapshot_embeddings(const TextConditioner<T>& cond) {
  EmbeddingArtifact art;
  art.dim = cond.dim();
  for (const auto& p : cond.pseudo_words()) {
    EmbeddingEntry e{p.name, p.polarity, p.k, p.steps, {}};
    e.vectors.assign(p.vectors.value().begin(), p.vectors.value().end());
    art.entries.push_back(std::move(e));
  }
  return art;
}

namespace {
static_assert(std::endian::native == std::endian::little, "embedding artifact assumes a little-endian host");

std::vector<std::uint8_t> float_bytes(const std::vector<float>& v) {
  std::vector<std::uint8_t> b(v.size() * sizeof(float));
  std::memcpy(b.data(), v.data(), b.size());
  return b;
}
}  // namespace

void save_embeddings(const EmbeddingArtifact& art, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format_version"] = EmbeddingArtifact::kFormatVersion;
  j["dim"] = art.dim;
  j["entries"] = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& e : art.entries) {
    if (e.vectors.size() != static_cast<std::size_t>(e.k) * art.dim) throw ArtifactError("entry '" + e.name + "' size mismatch");
    auto bytes = float_bytes(e.vectors);
    payload.insert(payload.end(), bytes.begin(), bytes.end());
    j["entries"].push_back({{"name", e.name},
                            {"polarity", to_string(e.polarity)},
                            {"k", e.k},
                            {"steps", e.steps},
                            {"vectors", util::base64_encode(bytes)}});
  }
  j["checksum"] = util::crc32(payload);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw ArtifactError("cannot write " + tmp);
    out << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

EmbeddingArtifact load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot read embedding artifact " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("corrupt embedding artifact: ") + e.what());
  }
  try {
    const int version = j.at("format_version").get<int>();
    if (version != EmbeddingArtifact::kFormatVersion)
      throw ArtifactError("embedding artifact version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(EmbeddingArtifact::kFormatVersion) + ")");
    EmbeddingArtifact art;
    art.dim = j.at("dim").get<int>();
    std::vector<std::uint8_t> payload;
    for (const auto& je : j.at("entries")) {
      EmbeddingEntry e;
      e.name = je.at("name").get<std::string>();
      e.polarity = parse_polarity(je.at("polarity").get<std::string>());
      e.k = je.at("k").get<int>();
      e.steps = je.value("steps", 0L);
      std::vector<std::uint8_t> bytes;
      try {
        bytes = util::base64_decode(je.at("vectors").get<std::string>());
      } catch (const std::invalid_argument& ex) {
        throw ArtifactError(std::string("corrupt payload: ") + ex.what());
      }
      if (bytes.size() != static_cast<std::size_t>(e.k) * art.dim * sizeof(float))
        throw ArtifactError("corrupt payload: entry '" + e.name + "' has wrong byte count");
      e.vectors.resize(bytes.size() / sizeof(float));
      std::memcpy(e.vectors.data(), bytes.data(), bytes.size());
      payload.insert(payload.end(), bytes.begin(), bytes.end());
      art.entries.push_back(std::move(e));
    }
    if (j.at("checksum").get<std::uint32_t>() != util::crc32(payload))
      throw ArtifactError("corrupt payload: checksum mismatch");
    return art;
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("malformed embedding artifact: ") + e.what());
  } catch (const TextError& e) {
    throw ArtifactError(std::string("malformed embedding artifact: ") + e.what());
  }
}

template <class T>
void install_embeddings(const EmbeddingArtifact& art, TextConditioner<T>& cond) {
  if (art.dim != cond.dim())
    throw ArtifactError("embedding dimension mismatch: artifact d=" + std::to_string(art.dim) + ", session d=" +
                        std::to_string(cond.dim()));
  for (const auto& e : art.entries) {
    auto* pw = cond.find(e.name, e.polarity);
    if (pw && pw->k != e.k) {
      cond.remove_pseudo_word(e.name, e.polarity);
      pw = nullptr;
    }
    if (!pw) {
      std::mt19937_64 unused(0);
      cond.register_pseudo_word(e.name, e.polarity, e.k, {}, unused);
      pw = cond.find(e.name, e.polarity);
    }
    auto dst = pw->vectors.mutable_value();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.vectors[i]);
    pw->steps = e.steps;
  }
}

void save_conditioner(const TextConditioner<float>& cond, const std::filesystem::path& path) {
  nlohmann::json meta{{"dim", cond.dim()}, {"words", cond.vocab().words()}, {"pseudo_capacity", cond.vocab().pseudo_capacity()}};
  nn::Checkpoint::from_params("text-table", std::move(meta), cond.table_params()).save(path);
}

TextConditioner<float> load_conditioner(const std::filesystem::path& path) {
  auto ck = nn::Checkpoint::load(path);
  if (ck.kind != "text-table") throw nn::CheckpointError("expected a text-table checkpoint, got '" + ck.kind + "'");
  auto words = ck.meta.at("words").get<std::vector<std::string>>();
  // Drop the reserved entries; the constructor re-adds them.
  words.erase(std::remove_if(words.begin(), words.end(), [](const auto& w) { return w == "<pad>" || w == "<unk>"; }),
              words.end());
  TextConditioner<float> cond(Vocabulary(std::move(words), ck.meta.value("pseudo_capacity", 256)),
                              ck.meta.at("dim").get<int>(), 0);
  ck.load_into(cond.table_params());
  return cond;
}

template class TextConditioner<float>;
template class TextConditioner<double>;
template EmbeddingArtifact snapshot_embeddings<float>(const TextConditioner<float>&);
template EmbeddingArtifact snapshot_embeddings<double>(const TextConditioner<double>&);
template void install_embeddings<float>(const EmbeddingArtifact&, TextConditioner<float>&);
template void install_embeddings<double>(const EmbeddingArtifact&, TextConditioner<double>&);

}  // namespace pnptlab::text
