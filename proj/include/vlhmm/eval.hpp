#pragma once

// Perplexity evaluation and baselines. Evaluation mirrors the training
// stream layout: a split becomes B near-equal streams, each walked in
// L-token chunks with the filtering distribution carried across chunk
// boundaries and reset after eos, so every token position contributes
// exactly one log-probability and the result does not depend on L.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "vlhmm/hmm.hpp"

namespace vlhmm {

struct EvalReport {
  double ppl = 0;
  std::int64_t token_count = 0;
  double logprob_total = 0;
  double ms_per_batch = 0;  // mean wall time per L-chunk forward pass
};

template <typename Real>
EvalReport stream_perplexity(const DistParams<Real>& dist, std::span<const std::int32_t> ids,
                             std::int32_t batch_size, std::int32_t segment_len,
                             std::int32_t eos_id) {
  if (ids.empty()) throw std::invalid_argument("stream_perplexity: empty split");
  if (batch_size < 1 || segment_len < 1)
    throw std::invalid_argument("stream_perplexity: bad batch geometry");
  const std::int64_t n = static_cast<std::int64_t>(ids.size());
  const std::int64_t b = std::min<std::int64_t>(batch_size, n);
  const std::int64_t base = n / b, rem = n % b;

  EvalReport report;
  ForwardOptions opts;
  opts.eos_reset_id = eos_id;
  std::int64_t chunks = 0;
  const auto t0 = std::chrono::steady_clock::now();
  std::int64_t offset = 0;
  for (std::int64_t s = 0; s < b; ++s) {
    const std::int64_t len = base + (s < rem ? 1 : 0);
    CarryState<Real> carry;
    for (std::int64_t pos = 0; pos < len; pos += segment_len) {
      const std::int64_t take = std::min<std::int64_t>(segment_len, len - pos);
      auto res = forward_serial(dist, ids.subspan(offset + pos, take), nullptr,
                                carry.empty() ? nullptr : &carry, opts);
      if (res.logprob == neg_inf<Real>)
        throw std::runtime_error("stream_perplexity: zero-probability segment");
      report.logprob_total += static_cast<double>(res.logprob);
      carry = std::move(res.carry);
      ++chunks;
    }
    offset += len;
  }
  const auto t1 = std::chrono::steady_clock::now();
  report.token_count = n;
  report.ppl = std::exp(-report.logprob_total / static_cast<double>(n));
  report.ms_per_batch =
      std::chrono::duration<double, std::milli>(t1 - t0).count() / static_cast<double>(chunks);
  return report;
}

// ---------------------------------------------------------------------------
// add-k n-gram baseline

// Add-k smoothed unigram (order 1) or bigram (order 2) perplexity; counts
// come from the training split. The first evaluated position has no bigram
// context and backs off to the unigram estimate.
inline double ngram_baseline(std::span<const std::int32_t> train_ids,
                             std::span<const std::int32_t> eval_ids, int order, double add_k,
                             std::int64_t vocab_size) {
  if (order != 1 && order != 2) throw std::invalid_argument("ngram_baseline: order must be 1 or 2");
  if (train_ids.empty() || eval_ids.empty())
    throw std::invalid_argument("ngram_baseline: empty split");
  std::vector<std::int64_t> unigram(vocab_size, 0);
  for (std::int32_t w : train_ids) unigram[w] += 1;
  const auto n_train = static_cast<std::int64_t>(train_ids.size());
  const double v = static_cast<double>(vocab_size);

  auto unigram_logp = [&](std::int32_t w) {
    return std::log((static_cast<double>(unigram[w]) + add_k) /
                    (static_cast<double>(n_train) + add_k * v));
  };

  double total = 0;
  if (order == 1) {
    for (std::int32_t w : eval_ids) total += unigram_logp(w);
  } else {
    std::unordered_map<std::uint64_t, std::int64_t> bigram;
    std::vector<std::int64_t> context(vocab_size, 0);  // occurrences that have a successor
    for (std::size_t i = 0; i + 1 < train_ids.size(); ++i) {
      const std::uint64_t key =
          (static_cast<std::uint64_t>(train_ids[i]) << 32) | static_cast<std::uint32_t>(train_ids[i + 1]);
      bigram[key] += 1;
      context[train_ids[i]] += 1;
    }
    for (std::size_t i = 0; i < eval_ids.size(); ++i) {
      if (i == 0) {
        total += unigram_logp(eval_ids[0]);
        continue;
      }
      const std::int32_t prev = eval_ids[i - 1];
      const std::uint64_t key =
          (static_cast<std::uint64_t>(prev) << 32) | static_cast<std::uint32_t>(eval_ids[i]);
      auto it = bigram.find(key);
      const double num = (it == bigram.end() ? 0.0 : static_cast<double>(it->second)) + add_k;
      total += std::log(num / (static_cast<double>(context[prev]) + add_k * v));
    }
  }
  return std::exp(-total / static_cast<double>(eval_ids.size()));
}

}  // namespace vlhmm
