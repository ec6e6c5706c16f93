#pragma once

// Wall-clock benchmarks over synthetic corpora: train-step cost under
// dropout, eval-batch cost (table computation plus one batch of forward
// passes), and the raw per-token forward cost that exposes the quadratic
// dependence on the per-word state budget k. All gates built on these are
// ratios between measurements from the same machine.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "vlhmm/brown.hpp"
#include "vlhmm/eval.hpp"
#include "vlhmm/rng.hpp"
#include "vlhmm/trainer.hpp"

namespace vlhmm {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Balanced contiguous word-to-block assignment, for synthetic setups that
// need a partition without running the clusterer.
inline BlockPartition contiguous_partition(std::int32_t vocab, std::int32_t n_blocks) {
  BlockPartition part;
  part.num_blocks = n_blocks;
  part.word_to_block.resize(vocab);
  for (std::int32_t w = 0; w < vocab; ++w)
    part.word_to_block[w] = static_cast<std::int32_t>(static_cast<std::int64_t>(w) * n_blocks / vocab);
  part.rebuild_block_vocabs();
  part.validate();
  return part;
}

inline std::vector<std::int32_t> synthetic_tokens(std::int32_t vocab, std::int64_t count,
                                                  std::uint64_t seed) {
  auto eng = SeedStreams(seed).engine("bench-tokens");
  std::vector<std::int32_t> out(count);
  for (auto& t : out)
    t = static_cast<std::int32_t>(uniform01(eng) * vocab) % vocab;
  return out;
}

struct BenchCase {
  std::int64_t n_states = 256;
  std::int32_t n_blocks = 16;
  double lambda = 0.0;
  Variant variant = Variant::Scalar;
  std::int64_t hidden = 64;
  std::int32_t batch_size = 16;
  std::int32_t segment_len = 32;
  std::int32_t words_per_block = 4;
  std::int32_t reps = 5;
  std::uint64_t seed = 1;
};

struct BenchMeasurement {
  BenchCase spec;
  double train_step_ms = 0;       // median over reps
  double eval_batch_ms = 0;       // table computation + one B x L batch of forwards
  double forward_us_per_token = 0;  // forward pass only, cached tables
};

inline BenchMeasurement run_bench_case(const BenchCase& bc) {
  const std::int32_t vocab = bc.n_blocks * bc.words_per_block;
  BlockPartition part = contiguous_partition(vocab, bc.n_blocks);

  TrainConfig tc;
  tc.n_states = bc.n_states;
  tc.n_blocks = bc.n_blocks;
  tc.hidden = bc.hidden;
  tc.dropout = bc.lambda;
  tc.batch_size = bc.batch_size;
  tc.segment_len = bc.segment_len;
  tc.epochs = 1;
  tc.seed = bc.seed;
  tc.variant = bc.variant;

  // enough segments that no validation check lands inside the timed steps
  const std::int64_t per_batch = static_cast<std::int64_t>(bc.batch_size) * bc.segment_len;
  const std::int64_t segments = 4 * (bc.reps + 2);
  std::vector<std::int32_t> stream = synthetic_tokens(vocab, per_batch * segments, bc.seed);
  std::vector<std::int32_t> valid(stream.begin(), stream.begin() + per_batch);

  BenchMeasurement m;
  m.spec = bc;
  Trainer<float> trainer(tc, stream, valid, vocab, /*eos_id=*/0, &part);
  {
    std::vector<double> times;
    for (std::int32_t r = 0; r < bc.reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      trainer.step();
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    m.train_step_ms = median(times);
  }

  const SupportSpec sup = trainer.support();
  ForwardOptions opts;
  opts.eos_reset_id = 0;
  {
    std::vector<double> times;
    for (std::int32_t r = 0; r < bc.reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      DistParams<float> dist = trainer.model().compute(sup);
      for (std::int32_t row = 0; row < bc.batch_size; ++row) {
        std::span<const std::int32_t> x{stream.data() + static_cast<std::size_t>(row) * bc.segment_len,
                                        static_cast<std::size_t>(bc.segment_len)};
        forward_serial(dist, x, nullptr, nullptr, opts);
      }
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    m.eval_batch_ms = median(times);
  }
  {
    DistParams<float> dist = trainer.model().compute(sup);
    const std::int64_t tokens_per_rep = std::min<std::int64_t>(
        static_cast<std::int64_t>(stream.size()), 24 * per_batch);
    std::vector<double> times;
    for (std::int32_t r = 0; r < bc.reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      CarryState<float> carry;
      for (std::int64_t pos = 0; pos < tokens_per_rep; pos += bc.segment_len) {
        const std::int64_t take =
            std::min<std::int64_t>(bc.segment_len, tokens_per_rep - pos);
        auto res = forward_serial(dist, std::span<const std::int32_t>{stream.data() + pos,
                                                                      static_cast<std::size_t>(take)},
                                  nullptr, carry.empty() ? nullptr : &carry, opts);
        carry = std::move(res.carry);
      }
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count() /
                      static_cast<double>(tokens_per_rep));
    }
    m.forward_us_per_token = median(times);
  }
  return m;
}

inline std::string bench_csv(std::span<const BenchMeasurement> rows) {
  std::ostringstream out;
  out << "states,blocks,k,lambda,variant,hidden,batch,segment,train_step_ms,eval_batch_ms,"
         "forward_us_per_token\n";
  for (const auto& m : rows) {
    const auto& s = m.spec;
    out << s.n_states << ',' << s.n_blocks << ',' << s.n_states / s.n_blocks << ',' << s.lambda
        << ',' << variant_name(s.variant) << ',' << s.hidden << ',' << s.batch_size << ','
        << s.segment_len << ',' << m.train_step_ms << ',' << m.eval_batch_ms << ','
        << m.forward_us_per_token << '\n';
  }
  return out.str();
}

}  // namespace vlhmm
