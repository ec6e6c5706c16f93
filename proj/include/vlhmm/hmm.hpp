#pragma once

// Blocked-emission HMM distributional parameters and exact inference.
//
// A DistParams holds log-space tables over the *materialized* states of the
// model: all of Z for an unmasked model, or only the states kept by a dropout
// mask. Emissions are stored word-major (per word, the states that can emit
// it and their log-probabilities), which is the access pattern of the
// restricted-trellis forward pass: at each timestep only the support of the
// current token carries mass, so one step costs |support|^2 transitions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "vlhmm/brown.hpp"
#include "vlhmm/rng.hpp"
#include "vlhmm/tensor.hpp"

namespace vlhmm {

struct DropoutMask {
  std::vector<std::uint8_t> active;  // indexed by global state id
  double rate = 0.0;
  std::int32_t active_per_block = 0;  // for block-balanced masks

  std::int64_t num_active() const {
    std::int64_t n = 0;
    for (auto a : active) n += a;
    return n;
  }
};

template <typename Real>
struct DistParams {
  std::int32_t n_global = 0;                // size of the underlying state space
  std::vector<std::int32_t> state_ids;      // materialized -> global, ascending

  Tensor<Real> log_trans;  // n x n, row = source state
  Tensor<Real> log_start;  // n

  std::vector<std::vector<std::int32_t>> word_states;  // per word: materialized idx, ascending
  std::vector<std::vector<Real>> word_logp;            // log p(word | state), aligned

  // caches built by finalize()
  Tensor<Real> trans_prob;                 // exp(log_trans)
  std::vector<Real> start_prob;            // exp(log_start)
  std::vector<std::vector<Real>> word_prob;
  std::vector<std::int32_t> word_run;      // start of contiguous support run, or -1
  std::vector<std::int32_t> global_to_mat; // inverse of state_ids, -1 where absent

  std::int32_t n_states() const { return static_cast<std::int32_t>(state_ids.size()); }
  std::int32_t vocab_size() const { return static_cast<std::int32_t>(word_states.size()); }

  Real log_emission(std::int32_t mat_state, std::int32_t word) const {
    const auto& states = word_states[word];
    auto it = std::lower_bound(states.begin(), states.end(), mat_state);
    if (it == states.end() || *it != mat_state) return neg_inf<Real>;
    return word_logp[word][static_cast<std::size_t>(it - states.begin())];
  }

  void finalize() {
    const std::int32_t n = n_states();
    trans_prob = Tensor<Real>({static_cast<std::size_t>(n), static_cast<std::size_t>(n)});
    for (std::size_t i = 0; i < log_trans.size(); ++i) trans_prob[i] = std::exp(log_trans[i]);
    start_prob.resize(n);
    for (std::int32_t i = 0; i < n; ++i) start_prob[i] = std::exp(log_start[i]);
    word_prob.resize(word_logp.size());
    word_run.assign(word_states.size(), -1);
    for (std::size_t w = 0; w < word_states.size(); ++w) {
      const auto& s = word_states[w];
      auto& p = word_prob[w];
      p.resize(s.size());
      for (std::size_t j = 0; j < s.size(); ++j) p[j] = std::exp(word_logp[w][j]);
      bool run = !s.empty();
      for (std::size_t j = 1; j < s.size() && run; ++j) run = s[j] == s[0] + static_cast<std::int32_t>(j);
      if (run && !s.empty()) word_run[w] = s[0];
    }
    global_to_mat.assign(n_global, -1);
    for (std::int32_t i = 0; i < n; ++i) global_to_mat[state_ids[i]] = i;
  }
};

// Keep the ceil((1-lambda)*k) top Gumbel draws in every block: a uniform
// without-replacement choice of survivors, one draw per state.
inline DropoutMask sample_dropout_mask(std::int64_t n_states, std::int32_t n_blocks, double lambda,
                                       std::mt19937_64& eng) {
  if (lambda < 0.0 || lambda >= 1.0)
    throw std::invalid_argument("sample_dropout_mask: lambda must be in [0, 1)");
  if (n_blocks < 1 || n_states % n_blocks != 0)
    throw std::invalid_argument("sample_dropout_mask: |Z| must divide into M blocks");
  const std::int64_t k = n_states / n_blocks;
  const auto keep = static_cast<std::int64_t>(std::ceil((1.0 - lambda) * static_cast<double>(k)));
  DropoutMask mask;
  mask.active.assign(n_states, 0);
  mask.rate = lambda;
  mask.active_per_block = static_cast<std::int32_t>(keep);
  std::vector<std::pair<double, std::int64_t>> scored(k);
  for (std::int32_t b = 0; b < n_blocks; ++b) {
    const std::int64_t base = static_cast<std::int64_t>(b) * k;
    for (std::int64_t i = 0; i < k; ++i) scored[i] = {sample_gumbel(eng), base + i};
    std::partial_sort(scored.begin(), scored.begin() + keep, scored.end(),
                      [](const auto& a, const auto& b2) {
                        return a.first > b2.first || (a.first == b2.first && a.second < b2.second);
                      });
    for (std::int64_t i = 0; i < keep; ++i) mask.active[scored[i].second] = 1;
  }
  return mask;
}

// Normalization sanity for a finalized model: every transition row, every
// state's emission row, and the start vector must each sum to one.
template <typename Real>
double max_normalization_error(const DistParams<Real>& d) {
  double worst = 0.0;
  const std::int32_t n = d.n_states();
  for (std::int32_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int32_t j = 0; j < n; ++j) s += static_cast<double>(d.trans_prob.at(i, j));
    worst = std::max(worst, std::abs(s - 1.0));
  }
  double s0 = 0.0;
  for (Real p : d.start_prob) s0 += static_cast<double>(p);
  worst = std::max(worst, std::abs(s0 - 1.0));
  std::vector<double> emit_sum(n, 0.0);
  for (std::size_t w = 0; w < d.word_states.size(); ++w)
    for (std::size_t j = 0; j < d.word_states[w].size(); ++j)
      emit_sum[d.word_states[w][j]] += static_cast<double>(d.word_prob[w][j]);
  for (std::int32_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(emit_sum[i] - 1.0));
  return worst;
}

// ---------------------------------------------------------------------------
// dropout masking of a finalized model

// Restrict a model to the states kept by `mask` (global indexing) and
// renormalize transitions and the start distribution over the survivors.
// Emission rows of surviving states are unchanged: their support never
// depends on the mask. The masked model is itself a valid HMM.
template <typename Real>
DistParams<Real> apply_mask(const DistParams<Real>& d, const DropoutMask& mask) {
  if (static_cast<std::int32_t>(mask.active.size()) != d.n_global)
    throw std::invalid_argument("apply_mask: mask size mismatch");
  std::vector<std::int32_t> keep;  // old materialized idx
  for (std::int32_t i = 0; i < d.n_states(); ++i)
    if (mask.active[d.state_ids[i]]) keep.push_back(i);
  if (keep.empty()) throw std::runtime_error("apply_mask: no active states");
  const std::int32_t n = static_cast<std::int32_t>(keep.size());
  std::vector<std::int32_t> old_to_new(d.n_states(), -1);
  for (std::int32_t i = 0; i < n; ++i) old_to_new[keep[i]] = i;

  DistParams<Real> out;
  out.n_global = d.n_global;
  out.state_ids.resize(n);
  for (std::int32_t i = 0; i < n; ++i) out.state_ids[i] = d.state_ids[keep[i]];

  out.log_trans = Tensor<Real>({static_cast<std::size_t>(n), static_cast<std::size_t>(n)});
  std::vector<Real> buf(n);
  for (std::int32_t i = 0; i < n; ++i) {
    for (std::int32_t j = 0; j < n; ++j) buf[j] = d.log_trans.at(keep[i], keep[j]);
    const Real lse = logsumexp<Real>(buf);
    if (lse == neg_inf<Real>)
      throw std::runtime_error("apply_mask: transition row has no mass on active states");
    for (std::int32_t j = 0; j < n; ++j) out.log_trans.at(i, j) = buf[j] - lse;
  }
  out.log_start = Tensor<Real>({static_cast<std::size_t>(n)});
  for (std::int32_t i = 0; i < n; ++i) buf[i] = d.log_start[keep[i]];
  {
    const Real lse = logsumexp<Real>({buf.data(), static_cast<std::size_t>(n)});
    if (lse == neg_inf<Real>) throw std::runtime_error("apply_mask: start has no mass on active states");
    for (std::int32_t i = 0; i < n; ++i) out.log_start[i] = buf[i] - lse;
  }

  out.word_states.resize(d.word_states.size());
  out.word_logp.resize(d.word_states.size());
  for (std::size_t w = 0; w < d.word_states.size(); ++w) {
    for (std::size_t j = 0; j < d.word_states[w].size(); ++j) {
      const std::int32_t ni = old_to_new[d.word_states[w][j]];
      if (ni < 0) continue;
      out.word_states[w].push_back(ni);
      out.word_logp[w].push_back(d.word_logp[w][j]);
    }
    if (out.word_states[w].empty())
      throw std::runtime_error("apply_mask: word " + std::to_string(w) + " left with empty support");
  }
  out.finalize();
  return out;
}

// ---------------------------------------------------------------------------
// forward

// Filtering distribution carried between segments, dense over global state
// ids so it survives a mask change; empty means "start fresh".
template <typename Real>
using CarryState = std::vector<Real>;

struct ForwardOptions {
  std::int32_t eos_reset_id = -1;  // after emitting this token the state distribution resets
  bool record_lattice = false;
};

template <typename Real>
struct Lattice {
  std::vector<std::vector<Real>> alpha;     // per t, over support of x_t, sums to 1
  std::vector<Real> log_norms;              // per t; their sum is log p(x)
  std::vector<std::uint8_t> chain_start;    // position scored from the start distribution
};

template <typename Real>
struct ForwardResult {
  Real logprob = 0;
  CarryState<Real> carry;  // empty if the segment ended at a reset token (or died)
  Lattice<Real> lattice;
};

namespace detail {

// pred[j] = sum_i alpha_prev[i] * A[prev[i], cur[j]]; contiguous fast path
// when the current support is a run.
template <typename Real>
inline void propagate(const Tensor<Real>& trans_prob, std::span<const std::int32_t> prev,
                      std::span<const Real> alpha_prev, std::span<const std::int32_t> cur,
                      std::int32_t cur_run, std::vector<Real>& pred) {
  const std::size_t n = trans_prob.cols();
  const std::size_t kc = cur.size();
  pred.assign(kc, Real(0));
  for (std::size_t i = 0; i < prev.size(); ++i) {
    const Real a = alpha_prev[i];
    if (a == Real(0)) continue;
    const Real* row = trans_prob.data() + static_cast<std::size_t>(prev[i]) * n;
    if (cur_run >= 0) {
      const Real* p = row + cur_run;
      for (std::size_t j = 0; j < kc; ++j) pred[j] += a * p[j];
    } else {
      for (std::size_t j = 0; j < kc; ++j) pred[j] += a * row[cur[j]];
    }
  }
}

}  // namespace detail

// Scaled forward pass over one token segment. Implements the restricted
// marginalization: at step t only the states supporting x_t are considered.
// `init` (probabilities over materialized states) overrides the model start
// distribution for position 0; `carry` instead continues from a previous
// segment's filtering distribution. A token equal to eos_reset_id resets the
// following position to the start distribution.
template <typename Real>
ForwardResult<Real> forward_serial(const DistParams<Real>& d, std::span<const std::int32_t> x,
                                   const std::vector<std::type_identity_t<Real>>* init = nullptr,
                                   const CarryState<std::type_identity_t<Real>>* carry = nullptr,
                                   ForwardOptions opts = {}) {
  const std::size_t T = x.size();
  ForwardResult<Real> res;
  if (T == 0) return res;

  // project an incoming carry onto the materialized states
  std::vector<Real> carry_mat;
  bool have_carry = false;
  if (carry != nullptr && !carry->empty()) {
    if (static_cast<std::int32_t>(carry->size()) != d.n_global)
      throw std::invalid_argument("forward_serial: carry has wrong length");
    carry_mat.assign(d.n_states(), Real(0));
    Real total = 0;
    for (std::int32_t i = 0; i < d.n_states(); ++i) {
      carry_mat[i] = (*carry)[d.state_ids[i]];
      total += carry_mat[i];
    }
    if (total > Real(0)) {
      for (Real& v : carry_mat) v /= total;
      have_carry = true;
    }
  }

  Lattice<Real>& lat = res.lattice;
  if (opts.record_lattice) {
    lat.alpha.resize(T);
    lat.log_norms.resize(T);
    lat.chain_start.assign(T, 0);
  }

  std::vector<Real> alpha, pred;
  std::vector<std::int32_t> all_idx;  // identity support, for propagating a carry
  std::span<const std::int32_t> prev_support;
  bool prev_was_reset = false;
  Real logprob = 0;

  for (std::size_t t = 0; t < T; ++t) {
    const std::int32_t tok = x[t];
    if (tok < 0 || tok >= d.vocab_size()) throw std::out_of_range("forward_serial: token out of range");
    const auto& cur = d.word_states[tok];
    const auto& emit = d.word_prob[tok];
    const std::int32_t run = d.word_run[tok];
    const std::size_t kc = cur.size();

    bool start_mode = false;
    if (t == 0) {
      if (have_carry) {
        all_idx.resize(d.n_states());
        for (std::int32_t i = 0; i < d.n_states(); ++i) all_idx[i] = i;
        detail::propagate<Real>(d.trans_prob, all_idx, carry_mat, cur, run, pred);
      } else {
        start_mode = true;
      }
    } else if (prev_was_reset) {
      start_mode = true;
    } else {
      detail::propagate<Real>(d.trans_prob, prev_support, alpha, cur, run, pred);
    }

    if (start_mode) {
      pred.resize(kc);
      if (t == 0 && init != nullptr) {
        for (std::size_t j = 0; j < kc; ++j) pred[j] = (*init)[cur[j]];
      } else {
        for (std::size_t j = 0; j < kc; ++j) pred[j] = d.start_prob[cur[j]];
      }
    }

    Real norm = 0;
    alpha.resize(kc);
    for (std::size_t j = 0; j < kc; ++j) {
      alpha[j] = pred[j] * emit[j];
      norm += alpha[j];
    }
    if (!(norm > Real(0))) {
      res.logprob = neg_inf<Real>;
      res.carry.clear();
      return res;
    }
    for (std::size_t j = 0; j < kc; ++j) alpha[j] /= norm;
    logprob += std::log(norm);

    if (opts.record_lattice) {
      lat.alpha[t] = alpha;
      lat.log_norms[t] = std::log(norm);
      lat.chain_start[t] = start_mode ? 1 : 0;
    }

    prev_support = {cur.data(), cur.size()};
    prev_was_reset = (tok == opts.eos_reset_id);
  }

  res.logprob = logprob;
  if (x[T - 1] == opts.eos_reset_id) {
    res.carry.clear();
  } else {
    res.carry.assign(d.n_global, Real(0));
    const auto& last = d.word_states[x[T - 1]];
    for (std::size_t j = 0; j < last.size(); ++j) res.carry[d.state_ids[last[j]]] = alpha[j];
  }
  return res;
}

// ---------------------------------------------------------------------------
// forward-backward

// Expected sufficient statistics of one or more segments, accumulated in
// place. Indexing is materialized throughout; emission expectations are
// word-major, aligned with DistParams::word_states.
template <typename Real>
struct Posteriors {
  Tensor<Real> transition_expect;                 // n x n
  std::vector<Real> start_expect;                 // n
  std::vector<std::vector<Real>> emission_expect; // per word, aligned with support

  void init_shapes(const DistParams<Real>& d) {
    const auto n = static_cast<std::size_t>(d.n_states());
    transition_expect = Tensor<Real>({n, n});
    start_expect.assign(n, Real(0));
    emission_expect.resize(d.word_states.size());
    for (std::size_t w = 0; w < d.word_states.size(); ++w)
      emission_expect[w].assign(d.word_states[w].size(), Real(0));
  }
};

// Forward-backward over one segment. Adds this segment's expected counts
// into `accum` (which must match `d` in shape) and returns the forward
// result. An incoming carry is treated as a constant: its transition into
// position 0 contributes transition counts, none of which flow back into the
// previous segment. If `marginals` is given it receives the per-position
// posterior over the support of each token.
template <typename Real>
ForwardResult<Real> forward_backward(const DistParams<Real>& d, std::span<const std::int32_t> x,
                                     Posteriors<Real>& accum,
                                     const std::vector<std::type_identity_t<Real>>* init = nullptr,
                                     const CarryState<std::type_identity_t<Real>>* carry = nullptr,
                                     ForwardOptions opts = {},
                                     std::vector<std::vector<Real>>* marginals = nullptr) {
  opts.record_lattice = true;
  ForwardResult<Real> fwd = forward_serial(d, x, init, carry, opts);
  const std::size_t T = x.size();
  if (T == 0) return fwd;
  if (fwd.logprob == neg_inf<Real>)
    throw std::runtime_error("forward_backward: sequence has zero probability");
  const Lattice<Real>& lat = fwd.lattice;

  // carry projection, rebuilt exactly as the forward pass saw it
  std::vector<Real> carry_mat;
  if (lat.chain_start[0] == 0) {
    carry_mat.assign(d.n_states(), Real(0));
    Real total = 0;
    for (std::int32_t i = 0; i < d.n_states(); ++i) {
      carry_mat[i] = (*carry)[d.state_ids[i]];
      total += carry_mat[i];
    }
    for (Real& v : carry_mat) v /= total;
  }

  if (marginals != nullptr) marginals->assign(T, {});

  // beta sweeps run within chains; a chain ends where the next position was
  // scored from the start distribution (or at the end of the segment)
  std::vector<std::vector<Real>> beta(T);
  for (std::size_t ti = T; ti-- > 0;) {
    const auto& cur = d.word_states[x[ti]];
    const std::size_t kc = cur.size();
    auto& b = beta[ti];
    if (ti + 1 == T || lat.chain_start[ti + 1]) {
      b.assign(kc, Real(1));
    } else {
      const auto& nxt = d.word_states[x[ti + 1]];
      const auto& nxt_emit = d.word_prob[x[ti + 1]];
      const std::size_t kn = nxt.size();
      const Real inv_c = std::exp(-lat.log_norms[ti + 1]);
      std::vector<Real> w(kn);
      for (std::size_t j = 0; j < kn; ++j) w[j] = nxt_emit[j] * beta[ti + 1][j] * inv_c;
      b.assign(kc, Real(0));
      const std::size_t n = d.trans_prob.cols();
      const std::int32_t run = d.word_run[x[ti + 1]];
      for (std::size_t i = 0; i < kc; ++i) {
        const Real* row = d.trans_prob.data() + static_cast<std::size_t>(cur[i]) * n;
        Real s = 0;
        if (run >= 0) {
          const Real* p = row + run;
          for (std::size_t j = 0; j < kn; ++j) s += p[j] * w[j];
        } else {
          for (std::size_t j = 0; j < kn; ++j) s += row[nxt[j]] * w[j];
        }
        b[i] = s;
      }
    }
  }

  for (std::size_t t = 0; t < T; ++t) {
    const auto& cur = d.word_states[x[t]];
    const std::size_t kc = cur.size();
    std::vector<Real> gamma(kc);
    for (std::size_t j = 0; j < kc; ++j) gamma[j] = lat.alpha[t][j] * beta[t][j];
    auto& emit_acc = accum.emission_expect[x[t]];
    for (std::size_t j = 0; j < kc; ++j) emit_acc[j] += gamma[j];
    if (lat.chain_start[t]) {
      for (std::size_t j = 0; j < kc; ++j) accum.start_expect[cur[j]] += gamma[j];
    }
    if (marginals != nullptr) (*marginals)[t] = std::move(gamma);

    // transition counts into position t+1 (or into 0 from the carry)
    if (t == 0 && lat.chain_start[0] == 0) {
      const Real inv_c = std::exp(-lat.log_norms[0]);
      const auto& emit = d.word_prob[x[0]];
      const std::size_t n = d.trans_prob.cols();
      for (std::size_t i = 0; i < carry_mat.size(); ++i) {
        const Real a = carry_mat[i];
        if (a == Real(0)) continue;
        const Real* row = d.trans_prob.data() + i * n;
        Real* acc_row = accum.transition_expect.data() + i * n;
        for (std::size_t j = 0; j < kc; ++j)
          acc_row[cur[j]] += a * row[cur[j]] * emit[j] * beta[0][j] * inv_c;
      }
    }
    if (t + 1 < T && lat.chain_start[t + 1] == 0) {
      const auto& nxt = d.word_states[x[t + 1]];
      const auto& nxt_emit = d.word_prob[x[t + 1]];
      const std::size_t kn = nxt.size();
      const Real inv_c = std::exp(-lat.log_norms[t + 1]);
      std::vector<Real> w(kn);
      for (std::size_t j = 0; j < kn; ++j) w[j] = nxt_emit[j] * beta[t + 1][j] * inv_c;
      const std::size_t n = d.trans_prob.cols();
      for (std::size_t i = 0; i < kc; ++i) {
        const Real a = lat.alpha[t][i];
        if (a == Real(0)) continue;
        const std::size_t src = static_cast<std::size_t>(cur[i]);
        const Real* row = d.trans_prob.data() + src * n;
        Real* acc_row = accum.transition_expect.data() + src * n;
        for (std::size_t j = 0; j < kn; ++j) acc_row[nxt[j]] += a * row[nxt[j]] * w[j];
      }
    }
  }
  return fwd;
}

// ---------------------------------------------------------------------------
// associative-scan forward

enum class ScanTree { Balanced, LeftFold };

namespace detail {

// log-space matrix product: C[i][j] = logsumexp_m(L[i][m] + R[m][j])
template <typename Real>
Tensor<Real> log_matmul(const Tensor<Real>& l, const Tensor<Real>& r) {
  const std::size_t a = l.rows(), b = l.cols(), c = r.cols();
  Tensor<Real> out({a, c});
  std::vector<Real> buf(b);
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      for (std::size_t m = 0; m < b; ++m) buf[m] = l.at(i, m) + r.at(m, j);
      out.at(i, j) = logsumexp<Real>(buf);
    }
  return out;
}

template <typename Real>
Tensor<Real> scan_reduce(const std::vector<Tensor<Real>>& ops, std::size_t lo, std::size_t hi) {
  if (hi - lo == 1) return ops[lo];
  const std::size_t mid = lo + (hi - lo) / 2;
  return log_matmul(scan_reduce(ops, lo, mid), scan_reduce(ops, mid, hi));
}

}  // namespace detail

// Forward marginalization as a reduction of per-step log-space operators:
// step 0 is a row vector over the support of x_0, step t is the transition
// sub-block into the support of x_t with the emission folded in. Both tree
// shapes compute the same product; the balanced shape is what a parallel
// scan would evaluate.
template <typename Real>
Real forward_scan(const DistParams<Real>& d, std::span<const std::int32_t> x,
                  ScanTree tree = ScanTree::Balanced,
                  const std::vector<std::type_identity_t<Real>>* init = nullptr) {
  const std::size_t T = x.size();
  if (T == 0) return Real(0);
  std::vector<Tensor<Real>> ops;
  ops.reserve(T);
  {
    const auto& cur = d.word_states[x[0]];
    Tensor<Real> op({1, cur.size()});
    for (std::size_t j = 0; j < cur.size(); ++j) {
      const Real base = init != nullptr ? (((*init)[cur[j]] > Real(0)) ? std::log((*init)[cur[j]]) : neg_inf<Real>)
                                        : d.log_start[cur[j]];
      op.at(0, j) = base + d.word_logp[x[0]][j];
    }
    ops.push_back(std::move(op));
  }
  for (std::size_t t = 1; t < T; ++t) {
    const auto& prev = d.word_states[x[t - 1]];
    const auto& cur = d.word_states[x[t]];
    Tensor<Real> op({prev.size(), cur.size()});
    for (std::size_t i = 0; i < prev.size(); ++i)
      for (std::size_t j = 0; j < cur.size(); ++j)
        op.at(i, j) = d.log_trans.at(prev[i], cur[j]) + d.word_logp[x[t]][j];
    ops.push_back(std::move(op));
  }

  Tensor<Real> total;
  if (tree == ScanTree::Balanced) {
    total = detail::scan_reduce(ops, 0, ops.size());
  } else {
    total = ops[0];
    for (std::size_t t = 1; t < ops.size(); ++t) total = detail::log_matmul(total, ops[t]);
  }
  return logsumexp<Real>({total.data(), total.size()});
}

// ---------------------------------------------------------------------------
// brute force

// Exhaustive sum over every state path, with no use of emission supports
// beyond their zero probabilities. Guarded because the path count explodes.
template <typename Real>
Real brute_force_loglik(const DistParams<Real>& d, std::span<const std::int32_t> x,
                        const std::vector<std::type_identity_t<Real>>* init = nullptr,
                        std::int32_t eos_reset_id = -1) {
  const std::size_t T = x.size();
  if (T == 0) return Real(0);
  const std::int32_t n = d.n_states();
  if (std::pow(static_cast<double>(n), static_cast<double>(T)) > 1e7)
    throw std::invalid_argument("brute_force_loglik: state space too large to enumerate");

  // streaming logsumexp over path scores
  Real run_max = neg_inf<Real>;
  Real run_sum = 0;
  auto add_path = [&](Real lp) {
    if (lp == neg_inf<Real>) return;
    if (lp <= run_max) {
      run_sum += std::exp(lp - run_max);
    } else {
      run_sum = run_sum * std::exp(run_max - lp) + Real(1);
      run_max = lp;
    }
  };

  auto start_lp = [&](std::int32_t z) {
    if (init != nullptr) return (*init)[z] > Real(0) ? std::log((*init)[z]) : neg_inf<Real>;
    return d.log_start[z];
  };

  std::vector<std::int32_t> path(T);
  auto recurse = [&](auto&& self, std::size_t t, std::int32_t z_prev, Real acc) -> void {
    if (t == T) {
      add_path(acc);
      return;
    }
    const bool fresh = t == 0 || x[t - 1] == eos_reset_id;
    for (std::int32_t z = 0; z < n; ++z) {
      const Real step = (fresh ? start_lp(z) : d.log_trans.at(z_prev, z)) + d.log_emission(z, x[t]);
      if (step == neg_inf<Real>) continue;
      self(self, t + 1, z, acc + step);
    }
  };
  recurse(recurse, 0, -1, Real(0));
  if (run_max == neg_inf<Real>) return neg_inf<Real>;
  return run_max + std::log(run_sum);
}

// ---------------------------------------------------------------------------
// sampling

struct SampledSequence {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> states;  // global state ids
};

// Draw T tokens from the joint. With eos_reset_id >= 0 the chain restarts
// from the start distribution after emitting that token, which is how
// training streams are laid out.
template <typename Real>
SampledSequence sample_sequence(const DistParams<Real>& d, std::size_t T, std::mt19937_64& eng,
                                std::int32_t eos_reset_id = -1) {
  const std::int32_t n = d.n_states();
  // state-major emission lists, inverted from the word-major storage
  std::vector<std::vector<std::pair<std::int32_t, Real>>> by_state(n);
  for (std::int32_t w = 0; w < d.vocab_size(); ++w)
    for (std::size_t j = 0; j < d.word_states[w].size(); ++j)
      by_state[d.word_states[w][j]].emplace_back(w, d.word_prob[w][j]);

  auto pick_word = [&](std::int32_t z) {
    const auto& lst = by_state[z];
    Real total = 0;
    for (const auto& [w, p] : lst) total += p;
    if (!(total > Real(0))) throw std::runtime_error("sample_sequence: state emits nothing");
    const Real u = static_cast<Real>(uniform01(eng)) * total;
    Real c = 0;
    std::int32_t last = -1;
    for (const auto& [w, p] : lst) {
      if (p <= Real(0)) continue;
      c += p;
      last = w;
      if (u < c) return w;
    }
    return last;
  };

  SampledSequence out;
  out.tokens.reserve(T);
  out.states.reserve(T);
  std::int32_t z = sample_categorical<Real>({d.start_prob.data(), d.start_prob.size()}, eng);
  for (std::size_t t = 0; t < T; ++t) {
    const std::int32_t w = pick_word(z);
    out.tokens.push_back(w);
    out.states.push_back(d.state_ids[z]);
    if (t + 1 == T) break;
    if (w == eos_reset_id) {
      z = sample_categorical<Real>({d.start_prob.data(), d.start_prob.size()}, eng);
    } else {
      const Real* row = d.trans_prob.data() + static_cast<std::size_t>(z) * d.trans_prob.cols();
      z = sample_categorical<Real>({row, static_cast<std::size_t>(n)}, eng);
    }
  }
  return out;
}

}  // namespace vlhmm
