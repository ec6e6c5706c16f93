#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <random>

#include "vlhmm/eval.hpp"

using namespace vlhmm;
using Catch::Matchers::WithinAbs;

namespace {

template <typename Real>
DistParams<Real> model_from_probs(const std::vector<std::vector<double>>& emit_by_state,
                                  const std::vector<std::vector<double>>& trans,
                                  const std::vector<double>& start) {
  const auto n = trans.size();
  const auto vocab = emit_by_state[0].size();
  DistParams<Real> d;
  d.n_global = static_cast<std::int32_t>(n);
  d.state_ids.resize(n);
  std::iota(d.state_ids.begin(), d.state_ids.end(), 0);
  d.log_trans = Tensor<Real>({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      d.log_trans.at(i, j) = trans[i][j] > 0 ? static_cast<Real>(std::log(trans[i][j])) : neg_inf<Real>;
  d.log_start = Tensor<Real>({n});
  for (std::size_t i = 0; i < n; ++i)
    d.log_start[i] = start[i] > 0 ? static_cast<Real>(std::log(start[i])) : neg_inf<Real>;
  d.word_states.resize(vocab);
  d.word_logp.resize(vocab);
  for (std::size_t w = 0; w < vocab; ++w)
    for (std::size_t z = 0; z < n; ++z)
      if (emit_by_state[z][w] > 0) {
        d.word_states[w].push_back(static_cast<std::int32_t>(z));
        d.word_logp[w].push_back(static_cast<Real>(std::log(emit_by_state[z][w])));
      }
  d.finalize();
  return d;
}

std::vector<double> random_simplex(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.2, 1.0);
  std::vector<double> v(n);
  double total = 0;
  for (double& x : v) {
    x = u(rng);
    total += x;
  }
  for (double& x : v) x /= total;
  return v;
}

// Positive everywhere, with each state emitting only its block's words.
DistParams<double> random_blocked(std::int32_t n_states, std::int32_t n_blocks,
                                  std::int32_t words_per_block, std::mt19937_64& rng) {
  const std::int32_t k = n_states / n_blocks;
  const std::int32_t vocab = n_blocks * words_per_block;
  std::vector<std::vector<double>> emit(n_states, std::vector<double>(vocab, 0.0));
  for (std::int32_t z = 0; z < n_states; ++z) {
    auto probs = random_simplex(words_per_block, rng);
    const std::int32_t base = (z / k) * words_per_block;
    for (std::int32_t c = 0; c < words_per_block; ++c) emit[z][base + c] = probs[c];
  }
  std::vector<std::vector<double>> trans(n_states);
  for (auto& row : trans) row = random_simplex(n_states, rng);
  return model_from_probs<double>(emit, trans, random_simplex(n_states, rng));
}

std::vector<std::int32_t> random_tokens(std::int32_t vocab, std::size_t len, std::mt19937_64& rng) {
  std::vector<std::int32_t> x(len);
  for (auto& t : x) t = static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(vocab));
  return x;
}

// Uniform over everything: 4 states in 2 blocks, 3 words per block.
DistParams<double> uniform_blocked() {
  std::vector<std::vector<double>> emit(4, std::vector<double>(6, 0.0));
  for (int z = 0; z < 4; ++z)
    for (int c = 0; c < 3; ++c) emit[z][(z / 2) * 3 + c] = 1.0 / 3.0;
  std::vector<std::vector<double>> trans(4, std::vector<double>(4, 0.25));
  return model_from_probs<double>(emit, trans, {0.25, 0.25, 0.25, 0.25});
}

}  // namespace

TEST_CASE("a fully uniform blocked model predicts every word equally") {
  DistParams<double> d = uniform_blocked();
  std::mt19937_64 rng(1);
  auto ids = random_tokens(6, 60, rng);
  EvalReport rep = stream_perplexity(d, ids, 2, 5, /*eos_id=*/2);
  REQUIRE_THAT(rep.ppl, WithinAbs(6.0, 1e-9));
  REQUIRE(rep.token_count == 60);
  REQUIRE_THAT(rep.ppl, WithinAbs(std::exp(-rep.logprob_total / 60.0), 1e-12));
  REQUIRE(rep.ms_per_batch >= 0);
}

TEST_CASE("a single end-of-stream token costs its start-mixture probability") {
  DistParams<double> d = model_from_probs<double>({{0.9, 0.1}, {0.25, 0.75}},
                                                  {{0.7, 0.3}, {0.2, 0.8}}, {0.6, 0.4});
  std::vector<std::int32_t> ids{0};
  EvalReport rep = stream_perplexity(d, ids, 1, 1, /*eos_id=*/0);
  const double p_eos = 0.6 * 0.9 + 0.4 * 0.25;
  REQUIRE_THAT(rep.ppl, WithinAbs(1.0 / p_eos, 1e-12));
}

TEST_CASE("perplexity does not depend on the segment length") {
  std::mt19937_64 rng(2);
  DistParams<double> d = random_blocked(6, 2, 4, rng);
  auto ids = random_tokens(8, 600, rng);
  const double full = stream_perplexity(d, ids, 1, 600, 0).ppl;
  for (std::int32_t L : {8, 17, 99, 600}) {
    REQUIRE_THAT(stream_perplexity(d, ids, 1, L, 0).ppl, WithinAbs(full, 1e-9));
  }
  const double b3 = stream_perplexity(d, ids, 3, 600, 0).ppl;
  for (std::int32_t L : {8, 17}) {
    REQUIRE_THAT(stream_perplexity(d, ids, 3, L, 0).ppl, WithinAbs(b3, 1e-9));
  }
}

TEST_CASE("perplexity is nearly invariant to the stream count") {
  std::mt19937_64 rng(3);
  DistParams<double> d = random_blocked(6, 2, 4, rng);
  auto ids = random_tokens(8, 10000, rng);
  const double one = stream_perplexity(d, ids, 1, 8, 0).ppl;
  const double four = stream_perplexity(d, ids, 4, 8, 0).ppl;
  REQUIRE(std::abs(one - four) / one < 0.005);
}

TEST_CASE("evaluation rejects empty and impossible input") {
  DistParams<double> d = model_from_probs<double>({{1.0, 0.0}, {1.0, 0.0}},
                                                  {{0.5, 0.5}, {0.5, 0.5}}, {0.5, 0.5});
  std::vector<std::int32_t> empty;
  REQUIRE_THROWS(stream_perplexity(d, empty, 1, 4, -1));
  std::vector<std::int32_t> impossible{0, 1, 0};  // word 1 has no emitting state
  REQUIRE_THROWS_WITH(stream_perplexity(d, impossible, 1, 4, -1),
                      Catch::Matchers::ContainsSubstring("zero-probability"));
  REQUIRE_THROWS(stream_perplexity(d, impossible, 0, 4, -1));
}

TEST_CASE("the unigram baseline hits the vocabulary size on a uniform corpus") {
  std::vector<std::int32_t> cycle(4000);
  for (std::size_t i = 0; i < cycle.size(); ++i) cycle[i] = static_cast<std::int32_t>(i % 8);
  REQUIRE_THAT(ngram_baseline(cycle, cycle, 1, 0.5, 8), WithinAbs(8.0, 1e-9));
}

TEST_CASE("bigram structure lowers the baseline perplexity") {
  // A strongly patterned chain: mostly repeat the previous word, rarely move on.
  std::mt19937_64 rng(4);
  std::vector<std::int32_t> ids(2500);
  std::int32_t cur = 0;
  for (auto& t : ids) {
    if (rng() % 8 == 0) cur = static_cast<std::int32_t>((cur + 1) % 4);
    t = cur;
  }
  std::vector<std::int32_t> train(ids.begin(), ids.begin() + 2000);
  std::vector<std::int32_t> eval(ids.begin() + 2000, ids.end());
  const double uni = ngram_baseline(train, eval, 1, 0.5, 4);
  const double bi = ngram_baseline(train, eval, 2, 0.5, 4);
  REQUIRE(bi < uni);
}

TEST_CASE("an enormous add-k washes out to the uniform distribution") {
  std::mt19937_64 rng(5);
  auto ids = random_tokens(8, 3000, rng);
  REQUIRE_THAT(ngram_baseline(ids, ids, 1, 1e12, 8), WithinAbs(8.0, 8.0 * 1e-3));
}

TEST_CASE("the baseline rejects bad orders and empty splits") {
  std::vector<std::int32_t> ids{0, 1, 2};
  std::vector<std::int32_t> empty;
  REQUIRE_THROWS(ngram_baseline(ids, ids, 3, 0.5, 4));
  REQUIRE_THROWS(ngram_baseline(empty, ids, 1, 0.5, 4));
  REQUIRE_THROWS(ngram_baseline(ids, empty, 1, 0.5, 4));
}

TEST_CASE("a model evaluated on its own sample matches the sampled entropy rate") {
  std::mt19937_64 rng(6);
  DistParams<double> d = random_blocked(6, 2, 2, rng);
  SeedStreams streams(17);
  auto eng_a = streams.engine("sampling", 0);
  auto eng_b = streams.engine("sampling", 1);
  const std::size_t T = 50000;
  auto a = sample_sequence(d, T, eng_a, /*eos_reset_id=*/0);
  auto b = sample_sequence(d, T, eng_b, /*eos_reset_id=*/0);

  const double entropy_rate_ppl = stream_perplexity(d, a.tokens, 1, 64, 0).ppl;
  const double ppl = stream_perplexity(d, b.tokens, 1, 64, 0).ppl;
  REQUIRE(std::abs(ppl - entropy_rate_ppl) / entropy_rate_ppl < 0.02);
}
