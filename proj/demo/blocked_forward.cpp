// Hand-specified blocked model driven through the restricted forward pass:
// per-token surprisal from the step normalizers, and segment chaining through
// the carried filtering distribution.

#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "vlhmm/vlhmm.hpp"

int main() {
  using namespace vlhmm;

  // Two blocks of two states. Block 0 (states 0,1) owns {storm, rain, <eos>},
  // block 1 (states 2,3) owns {calm, sun}.
  const std::vector<std::string> words{"storm", "rain", "calm", "sun", "<eos>"};
  DistParams<double> d;
  d.n_global = 4;
  d.state_ids = {0, 1, 2, 3};
  d.log_trans = Tensor<double>({4, 4});
  const double trans[4][4] = {{0.6, 0.25, 0.1, 0.05},
                              {0.3, 0.5, 0.1, 0.1},
                              {0.05, 0.1, 0.55, 0.3},
                              {0.1, 0.05, 0.25, 0.6}};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) d.log_trans.at(i, j) = std::log(trans[i][j]);
  d.log_start = Tensor<double>({4});
  for (int i = 0; i < 4; ++i) d.log_start[i] = std::log(0.25);
  d.word_states = {{0, 1}, {0, 1}, {2, 3}, {2, 3}, {0, 1}};
  d.word_logp = {{std::log(0.6), std::log(0.2)},
                 {std::log(0.3), std::log(0.5)},
                 {std::log(0.7), std::log(0.2)},
                 {std::log(0.3), std::log(0.8)},
                 {std::log(0.1), std::log(0.3)}};
  d.finalize();

  const std::vector<std::int32_t> x{0, 1, 1, 4, 2, 3, 3, 2};
  ForwardOptions opts;
  opts.eos_reset_id = 4;
  opts.record_lattice = true;
  ForwardResult<double> full = forward_serial(d, std::span<const std::int32_t>(x), nullptr,
                                              nullptr, opts);

  std::printf("token      support  surprisal (nats)\n");
  for (std::size_t t = 0; t < x.size(); ++t)
    std::printf("%-10s %7zu  %.4f\n", words[x[t]].c_str(), d.word_states[x[t]].size(),
                -full.lattice.log_norms[t]);
  std::printf("log p(x) = %.6f\n", full.logprob);

  // The same sequence scored in two segments, chained through the carry.
  std::span<const std::int32_t> head(x.data(), 5), tail(x.data() + 5, 3);
  ForwardResult<double> a = forward_serial(d, head, nullptr, nullptr, opts);
  ForwardResult<double> b = forward_serial(d, tail, nullptr, &a.carry, opts);
  std::printf("split 5+3: %.6f + %.6f = %.6f\n", a.logprob, b.logprob, a.logprob + b.logprob);
  return 0;
}
