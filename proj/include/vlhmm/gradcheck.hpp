#pragma once

// Finite-difference verification of both gradient layers: end-to-end
// d(log-likelihood)/d(parameters) against central differences through the
// whole table-computation pipeline, and forward-backward expected counts
// against finite differences of log p taken directly on the log tables.
// Everything runs in 64-bit on deliberately tiny configurations.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vlhmm/brown.hpp"
#include "vlhmm/hmm.hpp"
#include "vlhmm/params.hpp"
#include "vlhmm/rng.hpp"
#include "vlhmm/tensor.hpp"

namespace vlhmm {

inline double relative_gap(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Max relative gap between the analytic parameter gradient and central
// finite differences of the summed sequence log-likelihood.
template <typename Theta>
double end_to_end_gradcheck(Theta& theta, const SupportSpec& support, const DropoutMask* mask,
                            const std::vector<std::vector<std::int32_t>>& rows,
                            double fd_eps = 1e-5) {
  auto loss = [&]() {
    DistParams<double> dist = compute_dist_params(theta, support, mask);
    double total = 0;
    for (const auto& x : rows) total += forward_serial(dist, x).logprob;
    return total;
  };
  ParamsCache<double> cache;
  DistParams<double> dist = compute_dist_params(theta, support, mask, &cache);
  Posteriors<double> post;
  post.init_shapes(dist);
  for (const auto& x : rows) forward_backward(dist, x, post);
  Gradients<double> analytic;
  backward_dist_params(theta, support, dist, cache, post, analytic);

  Gradients<double> fd = finite_diff_grad(theta.param_refs(), loss, fd_eps);
  double worst = 0;
  for (auto& [name, tensor] : theta.param_refs()) {
    const Tensor<double>* a = analytic.find(name);
    const Tensor<double>* b = fd.find(name);
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      const double av = a != nullptr ? (*a)[i] : 0.0;
      const double bv = b != nullptr ? (*b)[i] : 0.0;
      worst = std::max(worst, relative_gap(av, bv));
    }
  }
  return worst;
}

// Max relative gap between forward-backward expected counts and central
// finite differences of log p with respect to individual log-table entries.
// Perturbing one entry without renormalizing is exactly the derivative the
// counts represent.
inline double fb_count_check(const DistParams<double>& dist,
                             const std::vector<std::vector<std::int32_t>>& rows,
                             double fd_eps = 1e-5) {
  Posteriors<double> post;
  post.init_shapes(dist);
  for (const auto& x : rows) forward_backward(dist, x, post);

  DistParams<double> d = dist;
  auto loglik = [&]() {
    d.finalize();
    double total = 0;
    for (const auto& x : rows) total += forward_serial(d, x).logprob;
    return total;
  };
  auto central = [&](double& entry) {
    const double saved = entry;
    entry = saved + fd_eps;
    const double hi = loglik();
    entry = saved - fd_eps;
    const double lo = loglik();
    entry = saved;
    d.finalize();
    return (hi - lo) / (2 * fd_eps);
  };

  double worst = 0;
  const std::size_t n = static_cast<std::size_t>(d.n_states());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      worst = std::max(worst, relative_gap(central(d.log_trans.at(i, j)),
                                           post.transition_expect.at(i, j)));
  for (std::size_t i = 0; i < n; ++i)
    worst = std::max(worst, relative_gap(central(d.log_start[i]), post.start_expect[i]));
  for (std::size_t w = 0; w < d.word_logp.size(); ++w)
    for (std::size_t s = 0; s < d.word_logp[w].size(); ++s)
      worst = std::max(worst, relative_gap(central(d.word_logp[w][s]),
                                           post.emission_expect[w][s]));
  return worst;
}

struct GradCheckPath {
  std::string name;
  double max_rel_err = 0;
};

struct GradCheckReport {
  std::vector<GradCheckPath> paths;
  double max_rel_err = 0;
};

// The standard battery: every parameterization, with and without a dropout
// mask, over both support kinds, plus the count-level checks.
inline GradCheckReport run_gradient_checks(std::int64_t n_states = 4, std::int32_t n_blocks = 2,
                                           std::int32_t vocab = 6, std::int64_t hidden = 8,
                                           std::int32_t seq_len = 3, std::uint64_t seed = 7) {
  SeedStreams streams(seed);
  BlockPartition part;
  part.num_blocks = n_blocks;
  part.word_to_block.resize(vocab);
  for (std::int32_t w = 0; w < vocab; ++w)
    part.word_to_block[w] = static_cast<std::int32_t>(static_cast<std::int64_t>(w) * n_blocks / vocab);
  part.rebuild_block_vocabs();
  part.validate();
  SupportSpec psup{&part, nullptr};

  std::vector<std::vector<std::int32_t>> rows(2, std::vector<std::int32_t>(seq_len));
  {
    auto eng = streams.engine("gradcheck-tokens");
    for (auto& row : rows)
      for (auto& t : row) t = static_cast<std::int32_t>(uniform01(eng) * vocab) % vocab;
  }

  // uniform support where every state admits at least one word, and a mask
  // that leaves every used word with at least one active state
  const std::int32_t per_word =
      std::max<std::int32_t>(2, static_cast<std::int32_t>(n_states / n_blocks));
  EmissionSupport usup;
  for (std::uint64_t attempt = 0;; ++attempt) {
    usup = build_uniform_support(static_cast<std::int32_t>(n_states), vocab, per_word,
                                 streams.stream("gradcheck-uniform") + attempt);
    std::vector<bool> admitted(n_states, false);
    for (const auto& states : usup.word_to_states)
      for (auto s : states) admitted[s] = true;
    if (std::all_of(admitted.begin(), admitted.end(), [](bool b) { return b; })) break;
    if (attempt > 200) throw std::runtime_error("run_gradient_checks: no usable uniform support");
  }
  auto usable_mask = [&](const SupportSpec& sup) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      auto eng = streams.engine("gradcheck-mask", attempt);
      DropoutMask mask = sample_dropout_mask(n_states, n_blocks, 0.5, eng);
      bool ok = true;
      for (const auto& row : rows)
        for (auto w : row) {
          bool any = false;
          if (sup.partition != nullptr) {
            const std::int64_t k = n_states / n_blocks;
            const std::int64_t base = static_cast<std::int64_t>(sup.partition->word_to_block[w]) * k;
            for (std::int64_t s = base; s < base + k; ++s) any = any || mask.active[s] != 0;
          } else {
            for (auto s : sup.uniform->word_to_states[w]) any = any || mask.active[s] != 0;
          }
          ok = ok && any;
        }
      if (ok) return mask;
      if (attempt > 200) throw std::runtime_error("run_gradient_checks: no usable mask");
    }
  };
  const DropoutMask pmask = usable_mask(psup);
  SupportSpec usupspec{nullptr, &usup};
  const DropoutMask umask = usable_mask(usupspec);

  ModelConfig cfg;
  cfg.n_states = n_states;
  cfg.n_blocks = n_blocks;
  cfg.vocab = vocab;
  cfg.hidden = hidden;

  GradCheckReport report;
  auto record = [&](std::string name, double err) {
    report.paths.push_back({std::move(name), err});
    report.max_rel_err = std::max(report.max_rel_err, err);
  };

  cfg.variant = Variant::Neural;
  auto np = init_neural_params<double>(cfg, streams.stream("gradcheck-neural"));
  record("neural", end_to_end_gradcheck(np, psup, nullptr, rows));
  record("neural+mask", end_to_end_gradcheck(np, psup, &pmask, rows));
  record("uniform", end_to_end_gradcheck(np, usupspec, nullptr, rows));
  record("uniform+mask", end_to_end_gradcheck(np, usupspec, &umask, rows));

  cfg.variant = Variant::Factored;
  auto fp = init_neural_params<double>(cfg, streams.stream("gradcheck-factored"));
  record("factored", end_to_end_gradcheck(fp, psup, nullptr, rows));
  record("factored+mask", end_to_end_gradcheck(fp, psup, &pmask, rows));

  cfg.variant = Variant::Scalar;
  auto sp = init_scalar_params<double>(cfg, part, streams.stream("gradcheck-scalar"));
  record("scalar", end_to_end_gradcheck(sp, psup, nullptr, rows));
  record("scalar+mask", end_to_end_gradcheck(sp, psup, &pmask, rows));

  cfg.variant = Variant::Neural;
  record("fb-counts", fb_count_check(compute_dist_params(np, psup), rows));
  record("fb-counts+mask", fb_count_check(compute_dist_params(np, psup, &pmask), rows));
  record("fb-counts-uniform", fb_count_check(compute_dist_params(np, usupspec), rows));
  return report;
}

}  // namespace vlhmm
