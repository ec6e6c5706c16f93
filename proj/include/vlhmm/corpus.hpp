#pragma once

// Text ingestion, vocabulary construction, integer encoding, and contiguous
// stream batching for truncated-segment training.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace vlhmm {

inline constexpr const char* kUnkToken = "<unk>";
inline constexpr const char* kEosToken = "<eos>";

struct Vocab {
  std::vector<std::string> tokens;                    // id -> token
  std::unordered_map<std::string, std::int32_t> index;  // token -> id
  std::int32_t unk_id = -1;
  std::int32_t eos_id = -1;

  std::int32_t size() const { return static_cast<std::int32_t>(tokens.size()); }

  // OOV maps to unk.
  std::int32_t lookup(const std::string& tok) const {
    auto it = index.find(tok);
    return it == index.end() ? unk_id : it->second;
  }
};

struct EncodedCorpus {
  std::vector<std::int32_t> ids;
  std::vector<std::int64_t> counts;  // per-id frequency within `ids`
};

// B parallel contiguous streams cut into length-L segments. Segment s of
// stream i covers ids[stream_offset(i) + s*L, ... + L). Tail tokens beyond
// num_segments*L per stream are dropped (training plan).
struct BatchPlan {
  std::int64_t batch_size = 0;
  std::int64_t segment_len = 0;
  std::int64_t stream_len = 0;
  std::int64_t num_segments = 0;

  std::int64_t stream_offset(std::int64_t stream) const { return stream * stream_len; }
  std::int64_t segment_offset(std::int64_t stream, std::int64_t segment) const {
    return stream_offset(stream) + segment * segment_len;
  }
  bool continues_previous(std::int64_t segment) const { return segment > 0; }
};

// One token sequence per input line, eos appended; blank lines yield a bare eos.
inline std::vector<std::vector<std::string>> tokenize_lines(std::istream& in, bool lowercase) {
  std::vector<std::vector<std::string>> lines;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> toks;
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      if (lowercase)
        for (char& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      toks.push_back(std::move(tok));
    }
    toks.push_back(kEosToken);
    lines.push_back(std::move(toks));
  }
  return lines;
}

inline std::vector<std::vector<std::string>> load_corpus(const std::string& path, bool lowercase) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_corpus: cannot open " + path);
  auto lines = tokenize_lines(in, lowercase);
  if (lines.empty()) throw std::runtime_error("load_corpus: empty corpus: " + path);
  return lines;
}

// Vocabulary from the training split only. Types with frequency < min_count
// are excluded (they encode as unk); ordering is by descending frequency,
// ties broken lexicographically, so ids are stable across runs.
inline Vocab build_vocab(const std::vector<std::vector<std::string>>& train_lines,
                         std::int64_t min_count = 1) {
  std::unordered_map<std::string, std::int64_t> freq;
  for (const auto& line : train_lines)
    for (const auto& tok : line) ++freq[tok];

  std::vector<std::pair<std::string, std::int64_t>> kept;
  kept.reserve(freq.size());
  for (auto& [tok, c] : freq) {
    if (c >= min_count || tok == kUnkToken || tok == kEosToken) kept.emplace_back(tok, c);
  }
  if (!freq.count(kUnkToken)) kept.emplace_back(kUnkToken, 0);
  if (!freq.count(kEosToken)) kept.emplace_back(kEosToken, 0);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  v.tokens.reserve(kept.size());
  for (auto& [tok, c] : kept) {
    v.index.emplace(tok, static_cast<std::int32_t>(v.tokens.size()));
    v.tokens.push_back(tok);
  }
  v.unk_id = v.index.at(kUnkToken);
  v.eos_id = v.index.at(kEosToken);
  return v;
}

inline EncodedCorpus encode(const std::vector<std::vector<std::string>>& lines, const Vocab& vocab) {
  EncodedCorpus e;
  e.counts.assign(vocab.size(), 0);
  for (const auto& line : lines) {
    for (const auto& tok : line) {
      const std::int32_t id = vocab.lookup(tok);
      e.ids.push_back(id);
      ++e.counts[id];
    }
  }
  return e;
}

inline std::vector<std::string> decode(const std::vector<std::int32_t>& ids, const Vocab& vocab) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (std::int32_t id : ids) out.push_back(vocab.tokens.at(id));
  return out;
}

inline BatchPlan make_batches(std::int64_t token_count, std::int64_t batch_size,
                              std::int64_t segment_len) {
  if (batch_size < 1 || segment_len < 1) throw std::invalid_argument("make_batches: B and L must be >= 1");
  if (token_count < batch_size * segment_len)
    throw std::runtime_error("make_batches: corpus shorter than one B x L grid");
  BatchPlan p;
  p.batch_size = batch_size;
  p.segment_len = segment_len;
  p.stream_len = token_count / batch_size;
  p.num_segments = p.stream_len / segment_len;
  return p;
}

inline BatchPlan make_batches(const EncodedCorpus& corpus, std::int64_t batch_size,
                              std::int64_t segment_len) {
  return make_batches(static_cast<std::int64_t>(corpus.ids.size()), batch_size, segment_len);
}

inline void save_vocab(const Vocab& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_vocab: cannot open " + path);
  for (const auto& tok : vocab.tokens) out << tok << '\n';
}

inline Vocab load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_vocab: cannot open " + path);
  Vocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    v.index.emplace(line, static_cast<std::int32_t>(v.tokens.size()));
    v.tokens.push_back(line);
  }
  auto unk = v.index.find(kUnkToken);
  auto eos = v.index.find(kEosToken);
  if (unk == v.index.end() || eos == v.index.end())
    throw std::runtime_error("load_vocab: file is missing " + std::string(kUnkToken) + " or " +
                             std::string(kEosToken));
  v.unk_id = unk->second;
  v.eos_id = eos->second;
  return v;
}

}  // namespace vlhmm
