#pragma once

// Model parameterizations. A parameter set (neural, factored-neural, or
// scalar) is turned into DistParams tables once per batch; the backward pass
// carries expected-count table gradients back to the parameters through the
// softmax, matmul, residual-MLP, and embedding-gather steps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "vlhmm/brown.hpp"
#include "vlhmm/hmm.hpp"
#include "vlhmm/rng.hpp"
#include "vlhmm/tensor.hpp"

namespace vlhmm {

enum class Variant { Neural, Factored, Scalar };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Neural: return "neural";
    case Variant::Factored: return "factored";
    case Variant::Scalar: return "scalar";
  }
  return "?";
}

inline Variant variant_from_name(std::string_view s) {
  if (s == "neural") return Variant::Neural;
  if (s == "factored") return Variant::Factored;
  if (s == "scalar") return Variant::Scalar;
  throw std::invalid_argument("unknown variant: " + std::string(s));
}

struct ModelConfig {
  std::int64_t n_states = 0;   // |Z|
  std::int32_t n_blocks = 1;   // M
  std::int64_t vocab = 0;      // |X|
  std::int64_t hidden = 0;     // h, unused by the scalar variant
  Variant variant = Variant::Neural;

  std::int64_t states_per_block() const {
    if (n_blocks < 1 || n_states % n_blocks != 0)
      throw std::invalid_argument("ModelConfig: |Z| must divide into M equal blocks");
    return n_states / n_blocks;
  }
};

inline std::int64_t residual_block_param_count(std::int64_t h) { return 2 * h * h + 2 * h; }

// The scalar count follows the dense |Z|^2 + |Z||X| + |Z| convention even
// though the stored emission tables only cover each block's own vocabulary.
inline std::int64_t param_count(const ModelConfig& c) {
  const std::int64_t z = c.n_states, x = c.vocab, h = c.hidden, m = c.n_blocks;
  switch (c.variant) {
    case Variant::Neural:
      return z * h + x * h + h + 3 * residual_block_param_count(h);
    case Variant::Factored:
      return z * (h / 2) + m * (h / 2) + x * h + h + 6 * residual_block_param_count(h);
    case Variant::Scalar:
      return z * z + z * x + z;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// residual MLP block: f(X) = LayerNorm(ReLU(ReLU(X W1) W2) + ReLU(X W1))

template <typename Real>
struct ResidualBlock {
  Tensor<Real> w1, w2;      // h x h
  Tensor<Real> gain, bias;  // h

  static ResidualBlock zeros(std::size_t h) {
    ResidualBlock b;
    b.w1 = Tensor<Real>({h, h});
    b.w2 = Tensor<Real>({h, h});
    b.gain = Tensor<Real>({h}, Real(1));
    b.bias = Tensor<Real>({h});
    return b;
  }
};

template <typename Real>
struct ResidualCache {
  Tensor<Real> in;   // block input
  Tensor<Real> a1;   // in * W1
  Tensor<Real> a2;   // ReLU(a1) * W2
  Tensor<Real> pre;  // ReLU(a2) + ReLU(a1), the layer-norm input
};

template <typename Real>
Tensor<Real> residual_forward(const ResidualBlock<Real>& b, const Tensor<Real>& x,
                              ResidualCache<std::type_identity_t<Real>>* cache = nullptr) {
  Tensor<Real> a1 = matmul(x, b.w1);
  Tensor<Real> r1 = relu(a1);
  Tensor<Real> a2 = matmul(r1, b.w2);
  Tensor<Real> pre = relu(a2);
  add_inplace(pre, r1);
  Tensor<Real> y = layer_norm(pre, b.gain, b.bias);
  if (cache != nullptr) {
    cache->in = x;
    cache->a1 = std::move(a1);
    cache->a2 = std::move(a2);
    cache->pre = std::move(pre);
  }
  return y;
}

// Returns d(loss)/d(block input); parameter gradients are accumulated into
// `g` under "<prefix>.w1" etc.
template <typename Real>
Tensor<Real> residual_backward(const ResidualBlock<Real>& b, const ResidualCache<Real>& cache,
                               const Tensor<Real>& dy, Gradients<Real>& g,
                               const std::string& prefix) {
  LayerNormGrads<Real> ln = layer_norm_vjp(cache.pre, b.gain, dy);
  g.add(prefix + ".gain", ln.dgain);
  g.add(prefix + ".bias", ln.dbias);

  Tensor<Real> r1 = relu(cache.a1);
  Tensor<Real> da2 = relu_vjp(cache.a2, ln.dx);
  g.add(prefix + ".w2", matmul_tn(r1, da2));
  Tensor<Real> dr1 = matmul_nt(da2, b.w2);
  add_inplace(dr1, ln.dx);  // residual connection
  Tensor<Real> da1 = relu_vjp(cache.a1, dr1);
  g.add(prefix + ".w1", matmul_tn(cache.in, da1));
  return matmul_nt(da1, b.w1);
}

// ---------------------------------------------------------------------------
// parameter sets

template <typename Real>
using ParamRefs = std::vector<std::pair<std::string, Tensor<Real>*>>;

namespace detail {

template <typename Real>
void append_block_refs(ParamRefs<Real>& refs, const std::string& prefix, ResidualBlock<Real>& b) {
  refs.emplace_back(prefix + ".w1", &b.w1);
  refs.emplace_back(prefix + ".w2", &b.w2);
  refs.emplace_back(prefix + ".gain", &b.gain);
  refs.emplace_back(prefix + ".bias", &b.bias);
}

}  // namespace detail

template <typename Real>
struct NeuralParams {
  ModelConfig config;
  Tensor<Real> e_z;           // |Z| x h          (plain variant)
  Tensor<Real> e_zp;          // |Z| x h/2        (factored variant)
  Tensor<Real> e_m;           // M x h/2          (factored variant)
  Tensor<Real> e_x;           // |X| x h
  Tensor<Real> start_emb;     // 1 x h
  ResidualBlock<Real> head_out, head_in, head_emit;
  ResidualBlock<Real> comp_out, comp_in, comp_emit;  // factored composers

  bool factored() const { return config.variant == Variant::Factored; }

  ParamRefs<Real> param_refs() {
    ParamRefs<Real> refs;
    if (factored()) {
      refs.emplace_back("e_zp", &e_zp);
      refs.emplace_back("e_m", &e_m);
    } else {
      refs.emplace_back("e_z", &e_z);
    }
    refs.emplace_back("e_x", &e_x);
    refs.emplace_back("start_emb", &start_emb);
    if (factored()) {
      detail::append_block_refs(refs, "comp_out", comp_out);
      detail::append_block_refs(refs, "comp_in", comp_in);
      detail::append_block_refs(refs, "comp_emit", comp_emit);
    }
    detail::append_block_refs(refs, "head_out", head_out);
    detail::append_block_refs(refs, "head_in", head_in);
    detail::append_block_refs(refs, "head_emit", head_emit);
    return refs;
  }
};

template <typename Real>
struct ScalarParams {
  ModelConfig config;
  Tensor<Real> trans_logits;                  // |Z| x |Z|
  std::vector<Tensor<Real>> emission_logits;  // per block: k x |X_m|
  Tensor<Real> start_logits;                  // |Z|

  ParamRefs<Real> param_refs() {
    ParamRefs<Real> refs;
    refs.emplace_back("trans_logits", &trans_logits);
    for (std::size_t m = 0; m < emission_logits.size(); ++m)
      refs.emplace_back("emission_logits." + std::to_string(m), &emission_logits[m]);
    refs.emplace_back("start_logits", &start_logits);
    return refs;
  }
};

// ---------------------------------------------------------------------------
// initialization

namespace detail {

// Kaiming-uniform over (-b, b) with b = sqrt(6 / fan_in); fan_in is the
// tensor's last dimension.
template <typename Real>
void kaiming_fill(Tensor<Real>& t, std::mt19937_64& eng) {
  if (t.size() == 0) return;
  const std::size_t fan_in = t.shape().back();
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<Real>((2.0 * uniform01(eng) - 1.0) * bound);
}

}  // namespace detail

template <typename Real>
NeuralParams<Real> init_neural_params(const ModelConfig& config, std::uint64_t seed) {
  if (config.variant == Variant::Scalar)
    throw std::invalid_argument("init_neural_params: config asks for the scalar variant");
  const auto z = static_cast<std::size_t>(config.n_states);
  const auto x = static_cast<std::size_t>(config.vocab);
  const auto h = static_cast<std::size_t>(config.hidden);
  const auto m = static_cast<std::size_t>(config.n_blocks);
  if (h == 0) throw std::invalid_argument("init_neural_params: hidden size must be positive");
  NeuralParams<Real> np;
  np.config = config;
  if (config.variant == Variant::Factored) {
    if (h % 2 != 0) throw std::invalid_argument("init_neural_params: factored variant needs even h");
    np.e_zp = Tensor<Real>({z, h / 2});
    np.e_m = Tensor<Real>({m, h / 2});
    np.comp_out = ResidualBlock<Real>::zeros(h);
    np.comp_in = ResidualBlock<Real>::zeros(h);
    np.comp_emit = ResidualBlock<Real>::zeros(h);
  } else {
    np.e_z = Tensor<Real>({z, h});
  }
  np.e_x = Tensor<Real>({x, h});
  np.start_emb = Tensor<Real>({1, h});
  np.head_out = ResidualBlock<Real>::zeros(h);
  np.head_in = ResidualBlock<Real>::zeros(h);
  np.head_emit = ResidualBlock<Real>::zeros(h);

  std::mt19937_64 eng = SeedStreams(seed).engine("init");
  for (auto& [name, tensor] : np.param_refs()) {
    if (name.ends_with(".gain") || name.ends_with(".bias")) continue;
    detail::kaiming_fill(*tensor, eng);
  }
  return np;
}

template <typename Real>
ScalarParams<Real> init_scalar_params(const ModelConfig& config, const BlockPartition& partition,
                                      std::uint64_t seed) {
  if (config.variant != Variant::Scalar)
    throw std::invalid_argument("init_scalar_params: config is not the scalar variant");
  if (partition.num_blocks != config.n_blocks)
    throw std::invalid_argument("init_scalar_params: partition block count mismatch");
  const auto z = static_cast<std::size_t>(config.n_states);
  const auto k = static_cast<std::size_t>(config.states_per_block());
  ScalarParams<Real> sp;
  sp.config = config;
  sp.trans_logits = Tensor<Real>({z, z});
  sp.emission_logits.reserve(partition.block_vocabs.size());
  for (const auto& vocab_m : partition.block_vocabs) {
    if (vocab_m.empty()) throw std::invalid_argument("init_scalar_params: empty block vocabulary");
    sp.emission_logits.emplace_back(
        std::vector<std::size_t>{k, vocab_m.size()});
  }
  sp.start_logits = Tensor<Real>({z});

  std::mt19937_64 eng = SeedStreams(seed).engine("init");
  for (auto& [name, tensor] : sp.param_refs()) detail::kaiming_fill(*tensor, eng);
  return sp;
}

// ---------------------------------------------------------------------------
// support description and the table cache

// Exactly one of the two pointers must be set: a block partition (each word
// emitted by its block's states) or an explicit per-word state support.
struct SupportSpec {
  const BlockPartition* partition = nullptr;
  const EmissionSupport* uniform = nullptr;

  void validate(const ModelConfig& config) const {
    if ((partition != nullptr) == (uniform != nullptr))
      throw std::invalid_argument("SupportSpec: exactly one support source required");
    if (partition != nullptr) {
      if (partition->num_blocks != config.n_blocks)
        throw std::invalid_argument("SupportSpec: partition block count mismatch");
      if (partition->vocab_size() != config.vocab)
        throw std::invalid_argument("SupportSpec: partition vocabulary mismatch");
      config.states_per_block();
    } else {
      if (static_cast<std::int64_t>(uniform->word_to_states.size()) != config.vocab)
        throw std::invalid_argument("SupportSpec: support vocabulary mismatch");
    }
  }
};

template <typename Real>
struct HeadsCache {
  Tensor<Real> base;  // head (or composer) input rows
  ResidualCache<Real> cc_out, cc_in, cc_emit;  // composers (factored)
  ResidualCache<Real> rc_out, rc_in, rc_emit;
  Tensor<Real> h_out, h_in, h_emit;  // n_mat x h
};

// Everything the backward pass needs beyond the DistParams themselves.
template <typename Real>
struct ParamsCache {
  std::vector<std::int32_t> mat_ids;     // materialized -> global state id
  std::vector<std::int32_t> mat_blocks;  // block per materialized state (partition path)
  std::vector<std::int32_t> block_start; // per block: offset into materialized indexing
  std::vector<std::int32_t> block_count;
  HeadsCache<Real> heads;                // neural variants only
  bool uniform = false;
};

namespace detail {

template <typename Real>
Tensor<Real> slice_rows(const Tensor<Real>& t, std::size_t offset, std::size_t count) {
  Tensor<Real> out({count, t.cols()});
  std::copy(t.data() + offset * t.cols(), t.data() + (offset + count) * t.cols(), out.data());
  return out;
}

template <typename Real>
void add_rows_at(Tensor<Real>& dst, std::size_t offset, const Tensor<Real>& src) {
  Real* d = dst.data() + offset * dst.cols();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += src[i];
}

// Materialized state bookkeeping for a partition, honoring a dropout mask.
template <typename Real>
void materialize_partition_states(const ModelConfig& config, const DropoutMask* mask,
                                  ParamsCache<Real>& cache) {
  const std::int64_t z = config.n_states;
  const std::int64_t k = config.states_per_block();
  if (mask != nullptr && static_cast<std::int64_t>(mask->active.size()) != z)
    throw std::invalid_argument("compute_dist_params: mask length mismatch");
  cache.mat_ids.clear();
  cache.mat_blocks.clear();
  cache.block_start.assign(config.n_blocks, 0);
  cache.block_count.assign(config.n_blocks, 0);
  for (std::int32_t m = 0; m < config.n_blocks; ++m) {
    cache.block_start[m] = static_cast<std::int32_t>(cache.mat_ids.size());
    for (std::int64_t s = m * k; s < (m + 1) * k; ++s) {
      if (mask != nullptr && !mask->active[s]) continue;
      cache.mat_ids.push_back(static_cast<std::int32_t>(s));
      cache.mat_blocks.push_back(m);
    }
    cache.block_count[m] =
        static_cast<std::int32_t>(cache.mat_ids.size()) - cache.block_start[m];
    if (cache.block_count[m] == 0)
      throw std::runtime_error("compute_dist_params: block " + std::to_string(m) +
                               " has no active states");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// neural head computation

template <typename Real>
void compute_heads(const NeuralParams<Real>& np, std::span<const std::int32_t> mat_ids,
                   std::span<const std::int32_t> mat_blocks, HeadsCache<Real>& hc) {
  if (np.factored()) {
    const std::size_t h = static_cast<std::size_t>(np.config.hidden);
    const std::size_t half = h / 2;
    hc.base = Tensor<Real>({mat_ids.size(), h});
    for (std::size_t i = 0; i < mat_ids.size(); ++i) {
      const Real* bm = np.e_m.data() + static_cast<std::size_t>(mat_blocks[i]) * half;
      const Real* bz = np.e_zp.data() + static_cast<std::size_t>(mat_ids[i]) * half;
      Real* dst = hc.base.data() + i * h;
      std::copy(bm, bm + half, dst);
      std::copy(bz, bz + half, dst + half);
    }
    hc.h_out = residual_forward(np.head_out, residual_forward(np.comp_out, hc.base, &hc.cc_out), &hc.rc_out);
    hc.h_in = residual_forward(np.head_in, residual_forward(np.comp_in, hc.base, &hc.cc_in), &hc.rc_in);
    hc.h_emit = residual_forward(np.head_emit, residual_forward(np.comp_emit, hc.base, &hc.cc_emit), &hc.rc_emit);
  } else {
    hc.base = embedding_gather(np.e_z, mat_ids);
    hc.h_out = residual_forward(np.head_out, hc.base, &hc.rc_out);
    hc.h_in = residual_forward(np.head_in, hc.base, &hc.rc_in);
    hc.h_emit = residual_forward(np.head_emit, hc.base, &hc.rc_emit);
  }
}

template <typename Real>
void backward_heads(const NeuralParams<Real>& np, const ParamsCache<Real>& cache,
                    const Tensor<Real>& dh_out, const Tensor<Real>& dh_in,
                    const Tensor<Real>& dh_emit, Gradients<Real>& g) {
  const HeadsCache<Real>& hc = cache.heads;
  Tensor<Real> d_out = residual_backward(np.head_out, hc.rc_out, dh_out, g, "head_out");
  Tensor<Real> d_in = residual_backward(np.head_in, hc.rc_in, dh_in, g, "head_in");
  Tensor<Real> d_emit = residual_backward(np.head_emit, hc.rc_emit, dh_emit, g, "head_emit");
  if (np.factored()) {
    Tensor<Real> dbase = residual_backward(np.comp_out, hc.cc_out, d_out, g, "comp_out");
    add_inplace(dbase, residual_backward(np.comp_in, hc.cc_in, d_in, g, "comp_in"));
    add_inplace(dbase, residual_backward(np.comp_emit, hc.cc_emit, d_emit, g, "comp_emit"));
    const std::size_t h = static_cast<std::size_t>(np.config.hidden);
    const std::size_t half = h / 2;
    const std::size_t n = dbase.rows();
    Tensor<Real> dm({n, half}), dzp({n, half});
    for (std::size_t i = 0; i < n; ++i) {
      const Real* src = dbase.data() + i * h;
      std::copy(src, src + half, dm.data() + i * half);
      std::copy(src + half, src + h, dzp.data() + i * half);
    }
    embedding_scatter_add(g.ensure("e_m", np.e_m.shape()), cache.mat_blocks, dm);
    embedding_scatter_add(g.ensure("e_zp", np.e_zp.shape()), cache.mat_ids, dzp);
  } else {
    add_inplace(d_out, d_in);
    add_inplace(d_out, d_emit);
    embedding_scatter_add(g.ensure("e_z", np.e_z.shape()), cache.mat_ids, d_out);
  }
}

// ---------------------------------------------------------------------------
// distributional tables from parameters

// Neural variants. With a partition, only active states are materialized;
// with an explicit support every state stays materialized and a mask instead
// removes transition columns and start entries (the states become
// unreachable rather than absent).
template <typename Real>
DistParams<Real> compute_dist_params(const NeuralParams<Real>& np, const SupportSpec& support,
                                     const DropoutMask* mask = nullptr,
                                     ParamsCache<Real>* cache_out = nullptr) {
  support.validate(np.config);
  const ModelConfig& config = np.config;
  ParamsCache<Real> local;
  ParamsCache<Real>& cache = cache_out != nullptr ? *cache_out : local;
  cache = ParamsCache<Real>{};

  DistParams<Real> dist;
  dist.n_global = static_cast<std::int32_t>(config.n_states);

  if (support.partition != nullptr) {
    const BlockPartition& part = *support.partition;
    detail::materialize_partition_states(config, mask, cache);
    const std::size_t n = cache.mat_ids.size();
    compute_heads(np, cache.mat_ids, cache.mat_blocks, cache.heads);

    dist.state_ids = cache.mat_ids;
    dist.log_trans = matmul_nt(cache.heads.h_out, cache.heads.h_in);
    log_softmax_rows_inplace(dist.log_trans);
    {
      Tensor<Real> pi = matmul_nt(np.start_emb, cache.heads.h_in);  // 1 x n
      const Real lse = logsumexp<Real>({pi.data(), n});
      dist.log_start = Tensor<Real>({n});
      for (std::size_t i = 0; i < n; ++i) dist.log_start[i] = pi[i] - lse;
    }
    dist.word_states.resize(config.vocab);
    dist.word_logp.resize(config.vocab);
    for (std::int32_t m = 0; m < config.n_blocks; ++m) {
      const auto off = static_cast<std::size_t>(cache.block_start[m]);
      const auto cnt = static_cast<std::size_t>(cache.block_count[m]);
      const auto& vocab_m = part.block_vocabs[m];
      Tensor<Real> rows = detail::slice_rows(cache.heads.h_emit, off, cnt);
      Tensor<Real> logits = matmul_nt(rows, embedding_gather(np.e_x, vocab_m));
      log_softmax_rows_inplace(logits);
      for (std::size_t c = 0; c < vocab_m.size(); ++c) {
        const std::int32_t w = vocab_m[c];
        auto& states = dist.word_states[w];
        auto& logp = dist.word_logp[w];
        states.resize(cnt);
        logp.resize(cnt);
        for (std::size_t j = 0; j < cnt; ++j) {
          states[j] = static_cast<std::int32_t>(off + j);
          logp[j] = logits.at(j, c);
        }
      }
    }
  } else {
    if (np.factored())
      throw std::invalid_argument("compute_dist_params: factored variant needs a partition");
    cache.uniform = true;
    const std::size_t n = static_cast<std::size_t>(config.n_states);
    cache.mat_ids.resize(n);
    for (std::size_t i = 0; i < n; ++i) cache.mat_ids[i] = static_cast<std::int32_t>(i);
    cache.mat_blocks.assign(n, 0);
    compute_heads(np, cache.mat_ids, cache.mat_blocks, cache.heads);

    dist.state_ids = cache.mat_ids;
    dist.log_trans = matmul_nt(cache.heads.h_out, cache.heads.h_in);
    Tensor<Real> pi = matmul_nt(np.start_emb, cache.heads.h_in);  // 1 x n
    if (mask != nullptr) {
      if (mask->active.size() != n)
        throw std::invalid_argument("compute_dist_params: mask length mismatch");
      for (std::size_t i = 0; i < n; ++i)
        masked_log_softmax_inplace<Real>(dist.log_trans.row(i), mask->active);
      masked_log_softmax_inplace<Real>({pi.data(), n}, mask->active);
    } else {
      log_softmax_rows_inplace(dist.log_trans);
      const Real lse = logsumexp<Real>({pi.data(), n});
      for (std::size_t i = 0; i < n; ++i) pi[i] -= lse;
    }
    dist.log_start = Tensor<Real>({n});
    for (std::size_t i = 0; i < n; ++i) dist.log_start[i] = pi[i];

    // per-state emission over the words that admit the state
    const EmissionSupport& sup = *support.uniform;
    Tensor<Real> logits = matmul_nt(cache.heads.h_emit, np.e_x);  // n x |X|
    std::vector<std::uint8_t> row_mask(config.vocab);
    std::vector<std::vector<std::int32_t>> state_words(n);
    for (std::size_t w = 0; w < sup.word_to_states.size(); ++w)
      for (std::int32_t z : sup.word_to_states[w])
        state_words[z].push_back(static_cast<std::int32_t>(w));
    for (std::size_t z = 0; z < n; ++z) {
      std::fill(row_mask.begin(), row_mask.end(), 0);
      for (std::int32_t w : state_words[z]) row_mask[w] = 1;
      masked_log_softmax_inplace<Real>(logits.row(z), row_mask);
    }
    dist.word_states.resize(config.vocab);
    dist.word_logp.resize(config.vocab);
    for (std::size_t w = 0; w < sup.word_to_states.size(); ++w) {
      auto states = sup.word_to_states[w];
      std::sort(states.begin(), states.end());
      dist.word_states[w] = states;
      auto& logp = dist.word_logp[w];
      logp.resize(states.size());
      for (std::size_t j = 0; j < states.size(); ++j) logp[j] = logits.at(states[j], w);
    }
  }
  dist.finalize();
  return dist;
}

// Scalar variant: the stored logit tables are the model. Storage is blocked,
// so a partition support is required.
template <typename Real>
DistParams<Real> compute_dist_params(const ScalarParams<Real>& sp, const SupportSpec& support,
                                     const DropoutMask* mask = nullptr,
                                     ParamsCache<Real>* cache_out = nullptr) {
  support.validate(sp.config);
  if (support.partition == nullptr)
    throw std::invalid_argument("compute_dist_params: scalar variant needs a partition");
  const ModelConfig& config = sp.config;
  const BlockPartition& part = *support.partition;
  const std::int64_t k = config.states_per_block();
  ParamsCache<Real> local;
  ParamsCache<Real>& cache = cache_out != nullptr ? *cache_out : local;
  cache = ParamsCache<Real>{};
  detail::materialize_partition_states(config, mask, cache);
  const std::size_t n = cache.mat_ids.size();

  DistParams<Real> dist;
  dist.n_global = static_cast<std::int32_t>(config.n_states);
  dist.state_ids = cache.mat_ids;
  dist.log_trans = Tensor<Real>({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    const Real* src = sp.trans_logits.data() +
                      static_cast<std::size_t>(cache.mat_ids[i]) * config.n_states;
    Real* dst = dist.log_trans.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) dst[j] = src[cache.mat_ids[j]];
  }
  log_softmax_rows_inplace(dist.log_trans);
  dist.log_start = Tensor<Real>({n});
  for (std::size_t i = 0; i < n; ++i) dist.log_start[i] = sp.start_logits[cache.mat_ids[i]];
  {
    const Real lse = logsumexp<Real>({dist.log_start.data(), n});
    for (std::size_t i = 0; i < n; ++i) dist.log_start[i] -= lse;
  }
  dist.word_states.resize(config.vocab);
  dist.word_logp.resize(config.vocab);
  for (std::int32_t m = 0; m < config.n_blocks; ++m) {
    const auto off = static_cast<std::size_t>(cache.block_start[m]);
    const auto cnt = static_cast<std::size_t>(cache.block_count[m]);
    const auto& vocab_m = part.block_vocabs[m];
    Tensor<Real> logits({cnt, vocab_m.size()});
    for (std::size_t j = 0; j < cnt; ++j) {
      const std::size_t local_row = static_cast<std::size_t>(cache.mat_ids[off + j] - m * k);
      std::copy(sp.emission_logits[m].data() + local_row * vocab_m.size(),
                sp.emission_logits[m].data() + (local_row + 1) * vocab_m.size(),
                logits.data() + j * vocab_m.size());
    }
    log_softmax_rows_inplace(logits);
    for (std::size_t c = 0; c < vocab_m.size(); ++c) {
      const std::int32_t w = vocab_m[c];
      auto& states = dist.word_states[w];
      auto& logp = dist.word_logp[w];
      states.resize(cnt);
      logp.resize(cnt);
      for (std::size_t j = 0; j < cnt; ++j) {
        states[j] = static_cast<std::int32_t>(off + j);
        logp[j] = logits.at(j, c);
      }
    }
  }
  dist.finalize();
  return dist;
}

// ---------------------------------------------------------------------------
// backward: expected counts -> parameter gradients

namespace detail {

// Reassemble one block's emission tables from the word-major storage:
// y = log-probabilities, c = expected counts, both cnt x |X_m|.
template <typename Real>
void gather_block_emissions(const DistParams<Real>& dist, const Posteriors<Real>& counts,
                            std::span<const std::int32_t> vocab_m, std::size_t cnt,
                            Tensor<Real>& y, Tensor<Real>& c) {
  y = Tensor<Real>({cnt, vocab_m.size()});
  c = Tensor<Real>({cnt, vocab_m.size()});
  for (std::size_t col = 0; col < vocab_m.size(); ++col) {
    const std::int32_t w = vocab_m[col];
    for (std::size_t j = 0; j < cnt; ++j) {
      y.at(j, col) = dist.word_logp[w][j];
      c.at(j, col) = counts.emission_expect[w][j];
    }
  }
}

// d(log pi) contribution shared by the table paths: returns the logit-space
// gradient row (1 x n) from the start expectations.
template <typename Real>
Tensor<Real> start_logit_grad(const DistParams<Real>& dist, const Posteriors<Real>& counts) {
  const std::size_t n = dist.log_start.size();
  Tensor<Real> y({std::size_t(1), n}), dy({std::size_t(1), n});
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = dist.log_start[i];
    dy[i] = counts.start_expect[i];
  }
  // exp(-inf) kills masked entries, whose expectations are exactly zero
  return log_softmax_rows_vjp(y, dy);
}

}  // namespace detail

template <typename Real>
void backward_dist_params(const NeuralParams<Real>& np, const SupportSpec& support,
                          const DistParams<Real>& dist, const ParamsCache<Real>& cache,
                          const Posteriors<Real>& counts, Gradients<Real>& g) {
  support.validate(np.config);
  const std::size_t n = cache.mat_ids.size();
  if (counts.transition_expect.rows() != n || counts.start_expect.size() != n)
    throw std::invalid_argument("backward_dist_params: count shapes do not match the cache");
  const HeadsCache<Real>& hc = cache.heads;

  Tensor<Real> d_log_a = log_softmax_rows_vjp(dist.log_trans, counts.transition_expect);
  Tensor<Real> dh_out = matmul(d_log_a, hc.h_in);
  Tensor<Real> dh_in = matmul_tn(d_log_a, hc.h_out);

  Tensor<Real> d_pi = detail::start_logit_grad(dist, counts);
  g.add("start_emb", matmul(d_pi, hc.h_in));
  add_inplace(dh_in, matmul_tn(d_pi, np.start_emb));

  Tensor<Real> dh_emit({n, static_cast<std::size_t>(np.config.hidden)});
  if (!cache.uniform) {
    const BlockPartition& part = *support.partition;
    Tensor<Real>& de_x = g.ensure("e_x", np.e_x.shape());
    for (std::int32_t m = 0; m < np.config.n_blocks; ++m) {
      const auto off = static_cast<std::size_t>(cache.block_start[m]);
      const auto cnt = static_cast<std::size_t>(cache.block_count[m]);
      const auto& vocab_m = part.block_vocabs[m];
      Tensor<Real> y, c;
      detail::gather_block_emissions(dist, counts, vocab_m, cnt, y, c);
      Tensor<Real> d_logits = log_softmax_rows_vjp(y, c);
      Tensor<Real> rows = detail::slice_rows(hc.h_emit, off, cnt);
      detail::add_rows_at(dh_emit, off, matmul(d_logits, embedding_gather(np.e_x, vocab_m)));
      embedding_scatter_add(de_x, vocab_m, matmul_tn(d_logits, rows));
    }
  } else {
    // full-width tables; off-support entries carry -inf log-probs and zero
    // counts, so the plain row VJP leaves them with zero gradient
    const std::size_t v = static_cast<std::size_t>(np.config.vocab);
    Tensor<Real> y({n, v}, neg_inf<Real>), c({n, v});
    for (std::size_t w = 0; w < dist.word_states.size(); ++w)
      for (std::size_t j = 0; j < dist.word_states[w].size(); ++j) {
        const auto z = static_cast<std::size_t>(dist.word_states[w][j]);
        y.at(z, w) = dist.word_logp[w][j];
        c.at(z, w) = counts.emission_expect[w][j];
      }
    Tensor<Real> d_logits = log_softmax_rows_vjp(y, c);
    dh_emit = matmul(d_logits, np.e_x);
    g.add("e_x", matmul_tn(d_logits, hc.h_emit));
  }

  backward_heads(np, cache, dh_out, dh_in, dh_emit, g);
}

template <typename Real>
void backward_dist_params(const ScalarParams<Real>& sp, const SupportSpec& support,
                          const DistParams<Real>& dist, const ParamsCache<Real>& cache,
                          const Posteriors<Real>& counts, Gradients<Real>& g) {
  support.validate(sp.config);
  const BlockPartition& part = *support.partition;
  const std::size_t n = cache.mat_ids.size();
  if (counts.transition_expect.rows() != n || counts.start_expect.size() != n)
    throw std::invalid_argument("backward_dist_params: count shapes do not match the cache");
  const std::int64_t k = sp.config.states_per_block();

  Tensor<Real> d_log_a = log_softmax_rows_vjp(dist.log_trans, counts.transition_expect);
  Tensor<Real>& dt = g.ensure("trans_logits", sp.trans_logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    Real* dst = dt.data() + static_cast<std::size_t>(cache.mat_ids[i]) * sp.config.n_states;
    const Real* src = d_log_a.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) dst[cache.mat_ids[j]] += src[j];
  }

  Tensor<Real> d_pi = detail::start_logit_grad(dist, counts);
  Tensor<Real>& ds = g.ensure("start_logits", sp.start_logits.shape());
  for (std::size_t i = 0; i < n; ++i) ds[cache.mat_ids[i]] += d_pi[i];

  for (std::int32_t m = 0; m < sp.config.n_blocks; ++m) {
    const auto off = static_cast<std::size_t>(cache.block_start[m]);
    const auto cnt = static_cast<std::size_t>(cache.block_count[m]);
    const auto& vocab_m = part.block_vocabs[m];
    Tensor<Real> y, c;
    detail::gather_block_emissions(dist, counts, vocab_m, cnt, y, c);
    Tensor<Real> d_logits = log_softmax_rows_vjp(y, c);
    Tensor<Real>& de = g.ensure("emission_logits." + std::to_string(m), sp.emission_logits[m].shape());
    for (std::size_t j = 0; j < cnt; ++j) {
      const std::size_t local_row = static_cast<std::size_t>(cache.mat_ids[off + j] - m * k);
      Real* dst = de.data() + local_row * vocab_m.size();
      const Real* src = d_logits.data() + j * vocab_m.size();
      for (std::size_t col = 0; col < vocab_m.size(); ++col) dst[col] += src[col];
    }
  }
}

}  // namespace vlhmm
