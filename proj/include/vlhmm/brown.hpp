#pragma once

// Emission-block construction: agglomerative Brown clustering over token
// bigram statistics, plus the uniform random-support ablation generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "vlhmm/corpus.hpp"
#include "vlhmm/rng.hpp"

namespace vlhmm {

struct BigramCounts {
  std::vector<std::int64_t> unigram;                      // per word id
  std::unordered_map<std::uint64_t, std::int64_t> bigram;  // (prev << 32) | next
  std::int64_t total = 0;                                 // token count

  static std::uint64_t key(std::int32_t prev, std::int32_t next) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(prev)) << 32) |
           static_cast<std::uint32_t>(next);
  }
  std::int64_t pair_count(std::int32_t prev, std::int32_t next) const {
    auto it = bigram.find(key(prev, next));
    return it == bigram.end() ? 0 : it->second;
  }
  std::int64_t total_pairs() const { return total > 0 ? total - 1 : 0; }
};

// Blocks partition the vocabulary; block m owns states [m*k, (m+1)*k) once
// bound to a model with k = |Z| / M states per block.
struct BlockPartition {
  std::int32_t num_blocks = 0;
  std::vector<std::int32_t> word_to_block;
  std::vector<std::vector<std::int32_t>> block_vocabs;
  std::vector<std::int32_t> word_pos_in_block;  // column index of the word inside its block

  std::int32_t vocab_size() const { return static_cast<std::int32_t>(word_to_block.size()); }

  void rebuild_block_vocabs() {
    block_vocabs.assign(num_blocks, {});
    for (std::size_t w = 0; w < word_to_block.size(); ++w)
      block_vocabs[word_to_block[w]].push_back(static_cast<std::int32_t>(w));
    word_pos_in_block.assign(word_to_block.size(), -1);
    for (std::int32_t m = 0; m < num_blocks; ++m)
      for (std::size_t c = 0; c < block_vocabs[m].size(); ++c)
        word_pos_in_block[block_vocabs[m][c]] = static_cast<std::int32_t>(c);
  }

  void validate() const {
    if (num_blocks < 1) throw std::runtime_error("BlockPartition: no blocks");
    std::vector<char> seen(word_to_block.size(), 0);
    for (std::int32_t m = 0; m < num_blocks; ++m) {
      if (block_vocabs[m].empty()) throw std::runtime_error("BlockPartition: empty block");
      for (std::int32_t w : block_vocabs[m]) {
        if (w < 0 || w >= vocab_size() || seen[w] || word_to_block[w] != m)
          throw std::runtime_error("BlockPartition: not a partition");
        seen[w] = 1;
      }
    }
    for (char s : seen)
      if (!s) throw std::runtime_error("BlockPartition: uncovered word");
  }
};

struct EmissionSupport {
  std::vector<std::vector<std::int32_t>> word_to_states;  // global state ids, ascending
};

inline EmissionSupport support_from_partition(const BlockPartition& partition, std::int32_t n_states) {
  if (partition.num_blocks == 0 || n_states % partition.num_blocks != 0)
    throw std::invalid_argument("support_from_partition: |Z| must be divisible by M");
  const std::int32_t k = n_states / partition.num_blocks;
  EmissionSupport s;
  s.word_to_states.resize(partition.word_to_block.size());
  for (std::size_t w = 0; w < partition.word_to_block.size(); ++w) {
    const std::int32_t base = partition.word_to_block[w] * k;
    auto& states = s.word_to_states[w];
    states.resize(k);
    std::iota(states.begin(), states.end(), base);
  }
  return s;
}

// Independent uniform n-subsets of states per word (no partition structure).
inline EmissionSupport build_uniform_support(std::int32_t n_states, std::int32_t vocab_size,
                                             std::int32_t n, std::uint64_t seed) {
  if (n < 1 || n > n_states) throw std::invalid_argument("build_uniform_support: n out of range");
  SeedStreams streams(seed);
  EmissionSupport s;
  s.word_to_states.resize(vocab_size);
  std::vector<std::int32_t> pool(n_states);
  for (std::int32_t w = 0; w < vocab_size; ++w) {
    auto eng = streams.engine("uniform-support", static_cast<std::uint64_t>(w));
    std::iota(pool.begin(), pool.end(), 0);
    // partial Fisher-Yates: first n entries form the subset
    for (std::int32_t i = 0; i < n; ++i) {
      const std::int32_t j = i + static_cast<std::int32_t>(eng() % static_cast<std::uint64_t>(n_states - i));
      std::swap(pool[i], pool[j]);
    }
    auto& states = s.word_to_states[w];
    states.assign(pool.begin(), pool.begin() + n);
    std::sort(states.begin(), states.end());
  }
  return s;
}

inline BigramCounts collect_bigrams(const EncodedCorpus& corpus) {
  BigramCounts c;
  std::int32_t vocab = 0;
  for (std::int32_t id : corpus.ids) vocab = std::max(vocab, id + 1);
  vocab = std::max(vocab, static_cast<std::int32_t>(corpus.counts.size()));
  c.unigram.assign(vocab, 0);
  c.total = static_cast<std::int64_t>(corpus.ids.size());
  for (std::size_t t = 0; t < corpus.ids.size(); ++t) {
    ++c.unigram[corpus.ids[t]];
    if (t + 1 < corpus.ids.size()) ++c.bigram[BigramCounts::key(corpus.ids[t], corpus.ids[t + 1])];
  }
  return c;
}

namespace detail {

// One AMI term p * log(p / (pl * pr)); zero joint count contributes zero.
inline double ami_term(std::int64_t cell, std::int64_t row_sum, std::int64_t col_sum,
                       std::int64_t total) {
  if (cell == 0) return 0.0;
  const double p = static_cast<double>(cell) / static_cast<double>(total);
  const double pl = static_cast<double>(row_sum) / static_cast<double>(total);
  const double pr = static_cast<double>(col_sum) / static_cast<double>(total);
  return p * std::log(p / (pl * pr));
}

}  // namespace detail

// AMI of the cluster bigram distribution induced by `assignment` (word id ->
// cluster label; labels need not be dense). Marginals are taken from the
// bigram table itself, so the value is invariant under relabeling.
inline double average_mutual_information(const std::vector<std::int32_t>& assignment,
                                         const BigramCounts& counts) {
  std::unordered_map<std::int32_t, std::int32_t> label_to_slot;
  auto slot_of = [&](std::int32_t label) {
    auto it = label_to_slot.find(label);
    if (it == label_to_slot.end())
      it = label_to_slot.emplace(label, static_cast<std::int32_t>(label_to_slot.size())).first;
    return it->second;
  };
  for (std::size_t w = 0; w < counts.unigram.size(); ++w) {
    if (counts.unigram[w] == 0) continue;
    if (w >= assignment.size() || assignment[w] < 0)
      throw std::invalid_argument("average_mutual_information: unassigned counted word");
    slot_of(assignment[w]);
  }
  const std::int32_t c = static_cast<std::int32_t>(label_to_slot.size());
  if (c == 0) return 0.0;
  std::vector<std::int64_t> cell(static_cast<std::size_t>(c) * c, 0);
  std::vector<std::int64_t> row(c, 0), col(c, 0);
  std::int64_t total = 0;
  for (const auto& [key, n] : counts.bigram) {
    const std::int32_t prev = static_cast<std::int32_t>(key >> 32);
    const std::int32_t next = static_cast<std::int32_t>(key & 0xffffffffu);
    const std::int32_t i = slot_of(assignment[prev]);
    const std::int32_t j = slot_of(assignment[next]);
    cell[static_cast<std::size_t>(i) * c + j] += n;
    row[i] += n;
    col[j] += n;
    total += n;
  }
  if (total == 0) return 0.0;
  double ami = 0.0;
  for (std::int32_t i = 0; i < c; ++i)
    for (std::int32_t j = 0; j < c; ++j)
      ami += detail::ami_term(cell[static_cast<std::size_t>(i) * c + j], row[i], col[j], total);
  return ami;
}

namespace detail {

// Working state for the greedy agglomeration. Slots stay sorted by cluster id
// (new clusters always get the largest id so far; merges keep the smaller id),
// so enumerating slot pairs i<j enumerates id pairs lexicographically.
struct ClusterSet {
  std::vector<std::int32_t> ids;                 // per slot
  std::vector<std::vector<std::int32_t>> words;  // per slot
  std::vector<std::int64_t> cell;                // C x C bigram counts
  std::vector<std::int64_t> row, col;
  std::int64_t total = 0;

  std::int32_t size() const { return static_cast<std::int32_t>(ids.size()); }
  std::int64_t& at(std::int32_t i, std::int32_t j) { return cell[static_cast<std::size_t>(i) * size() + j]; }
  std::int64_t get(std::int32_t i, std::int32_t j) const {
    return cell[static_cast<std::size_t>(i) * size() + j];
  }

  double ami() const {
    double v = 0.0;
    if (total == 0) return v;
    for (std::int32_t i = 0; i < size(); ++i)
      for (std::int32_t j = 0; j < size(); ++j) v += ami_term(get(i, j), row[i], col[j], total);
    return v;
  }

  // Change in AMI if slots a and b were merged. Only terms whose row or
  // column marginal touches a or b change, so this is O(C).
  double merge_delta(std::int32_t a, std::int32_t b) const {
    if (total == 0) return 0.0;
    const std::int32_t c = size();
    double before = 0.0, after = 0.0;
    for (std::int32_t j = 0; j < c; ++j) {
      before += ami_term(get(a, j), row[a], col[j], total);
      before += ami_term(get(b, j), row[b], col[j], total);
    }
    for (std::int32_t i = 0; i < c; ++i) {
      if (i == a || i == b) continue;
      before += ami_term(get(i, a), row[i], col[a], total);
      before += ami_term(get(i, b), row[i], col[b], total);
    }
    const std::int64_t nrow = row[a] + row[b];
    const std::int64_t ncol = col[a] + col[b];
    for (std::int32_t j = 0; j < c; ++j) {
      if (j == a || j == b) continue;
      after += ami_term(get(a, j) + get(b, j), nrow, col[j], total);
    }
    for (std::int32_t i = 0; i < c; ++i) {
      if (i == a || i == b) continue;
      after += ami_term(get(i, a) + get(i, b), row[i], ncol, total);
    }
    after += ami_term(get(a, a) + get(a, b) + get(b, a) + get(b, b), nrow, ncol, total);
    return after - before;
  }

  // Fold slot b into slot a (a < b) and drop slot b.
  void merge(std::int32_t a, std::int32_t b) {
    const std::int32_t c = size();
    std::vector<std::int64_t> next(static_cast<std::size_t>(c - 1) * (c - 1), 0);
    auto remap = [&](std::int32_t s) { return s == b ? a : (s > b ? s - 1 : s); };
    for (std::int32_t i = 0; i < c; ++i)
      for (std::int32_t j = 0; j < c; ++j)
        next[static_cast<std::size_t>(remap(i)) * (c - 1) + remap(j)] += get(i, j);
    cell = std::move(next);
    row[a] += row[b];
    col[a] += col[b];
    row.erase(row.begin() + b);
    col.erase(col.begin() + b);
    auto& wa = words[a];
    wa.insert(wa.end(), words[b].begin(), words[b].end());
    std::sort(wa.begin(), wa.end());
    words.erase(words.begin() + b);
    ids.erase(ids.begin() + b);
  }

  // Best merge under least-AMI-loss, ties to the smallest (id, id) pair.
  std::pair<std::int32_t, std::int32_t> best_pair() const {
    std::int32_t ba = -1, bb = -1;
    double best = -std::numeric_limits<double>::infinity();
    for (std::int32_t a = 0; a < size(); ++a) {
      for (std::int32_t b = a + 1; b < size(); ++b) {
        const double d = merge_delta(a, b);
        if (d > best) {
          best = d;
          ba = a;
          bb = b;
        }
      }
    }
    return {ba, bb};
  }
};

}  // namespace detail

// Windowed greedy agglomeration. Initializes the window with the most
// frequent types as singletons, inserts remaining types one at a time merging
// the least-AMI-loss pair after each insertion, then merges down to M blocks.
// window >= #types makes every step the exact greedy choice.
inline BlockPartition brown_cluster(const BigramCounts& counts, std::int32_t m,
                                    std::int32_t window) {
  const std::int32_t vocab = static_cast<std::int32_t>(counts.unigram.size());
  if (m < 1 || m > vocab) throw std::invalid_argument("brown_cluster: M out of range");
  if (window < m) throw std::invalid_argument("brown_cluster: window must be >= M");

  std::vector<std::int32_t> order(vocab);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
    if (counts.unigram[a] != counts.unigram[b]) return counts.unigram[a] > counts.unigram[b];
    return a < b;
  });

  // adjacency lists so each insertion touches only its own bigram edges
  std::vector<std::vector<std::pair<std::int32_t, std::int64_t>>> out_edges(vocab), in_edges(vocab);
  for (const auto& [key, n] : counts.bigram) {
    const std::int32_t prev = static_cast<std::int32_t>(key >> 32);
    const std::int32_t next = static_cast<std::int32_t>(key & 0xffffffffu);
    out_edges[prev].emplace_back(next, n);
    in_edges[next].emplace_back(prev, n);
  }

  const std::int32_t w = std::min(window, vocab);
  detail::ClusterSet cs;
  std::vector<std::int32_t> word_slot(vocab, -1);

  auto add_singleton = [&](std::int32_t word) {
    const std::int32_t c = cs.size();
    std::vector<std::int64_t> next(static_cast<std::size_t>(c + 1) * (c + 1), 0);
    for (std::int32_t i = 0; i < c; ++i)
      for (std::int32_t j = 0; j < c; ++j)
        next[static_cast<std::size_t>(i) * (c + 1) + j] = cs.cell[static_cast<std::size_t>(i) * c + j];
    cs.cell = std::move(next);
    cs.ids.push_back(c == 0 ? 0 : cs.ids.back() + 1);
    cs.words.push_back({word});
    cs.row.push_back(0);
    cs.col.push_back(0);
    word_slot[word] = c;
    for (const auto& [nxt, n] : out_edges[word]) {
      if (word_slot[nxt] < 0) continue;
      cs.at(c, word_slot[nxt]) += n;
      cs.row[c] += n;
      cs.col[word_slot[nxt]] += n;
      cs.total += n;
    }
    for (const auto& [prev, n] : in_edges[word]) {
      if (word_slot[prev] < 0 || prev == word) continue;  // self edge already added above
      cs.at(word_slot[prev], c) += n;
      cs.row[word_slot[prev]] += n;
      cs.col[c] += n;
      cs.total += n;
    }
  };

  auto do_merge = [&](std::int32_t a, std::int32_t b) {
    cs.merge(a, b);
    for (std::int32_t s = 0; s < cs.size(); ++s)
      for (std::int32_t word : cs.words[s]) word_slot[word] = s;
  };

  for (std::int32_t r = 0; r < vocab; ++r) {
    add_singleton(order[r]);
    if (cs.size() > w) {
      auto [a, b] = cs.best_pair();
      do_merge(a, b);
    }
  }
  while (cs.size() > m) {
    auto [a, b] = cs.best_pair();
    do_merge(a, b);
  }

  BlockPartition p;
  p.num_blocks = m;
  p.word_to_block.assign(vocab, -1);
  for (std::int32_t s = 0; s < cs.size(); ++s)
    for (std::int32_t word : cs.words[s]) p.word_to_block[word] = s;
  p.rebuild_block_vocabs();
  p.validate();
  return p;
}

// Clusters file: "word<TAB>block_id", one line per vocab word, id order.
inline void save_clusters(const BlockPartition& partition, const Vocab& vocab,
                          const std::string& path) {
  if (partition.vocab_size() != vocab.size())
    throw std::invalid_argument("save_clusters: partition/vocab size mismatch");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_clusters: cannot open " + path);
  for (std::int32_t w = 0; w < vocab.size(); ++w)
    out << vocab.tokens[w] << '\t' << partition.word_to_block[w] << '\n';
}

inline BlockPartition load_clusters(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_clusters: cannot open " + path);
  BlockPartition p;
  p.word_to_block.assign(vocab.size(), -1);
  std::string line;
  std::int32_t max_block = -1;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("load_clusters: malformed line " + std::to_string(lineno));
    const std::string word = line.substr(0, tab);
    std::int32_t block;
    try {
      block = std::stoi(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw std::runtime_error("load_clusters: malformed block id at line " + std::to_string(lineno));
    }
    auto it = vocab.index.find(word);
    if (it == vocab.index.end())
      throw std::runtime_error("load_clusters: unknown word '" + word + "'");
    if (p.word_to_block[it->second] != -1)
      throw std::runtime_error("load_clusters: duplicate word '" + word + "'");
    if (block < 0) throw std::runtime_error("load_clusters: negative block id");
    p.word_to_block[it->second] = block;
    max_block = std::max(max_block, block);
  }
  for (std::int32_t w = 0; w < vocab.size(); ++w)
    if (p.word_to_block[w] == -1)
      throw std::runtime_error("load_clusters: missing word '" + vocab.tokens[w] + "'");
  p.num_blocks = max_block + 1;
  p.rebuild_block_vocabs();
  p.validate();
  return p;
}

}  // namespace vlhmm
