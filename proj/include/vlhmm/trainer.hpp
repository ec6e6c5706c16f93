#pragma once

// Training loop: per-batch dropout-mask sampling, one table computation per
// batch, forward-backward over every batch row with carried filtering
// distributions, table-gradient backprop into the parameters, and AdamW
// updates with validation-driven learning-rate decay.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vlhmm/brown.hpp"
#include "vlhmm/corpus.hpp"
#include "vlhmm/eval.hpp"
#include "vlhmm/hmm.hpp"
#include "vlhmm/params.hpp"
#include "vlhmm/rng.hpp"
#include "vlhmm/tensor.hpp"

namespace vlhmm {

enum class SupportSource { Brown, Uniform };

inline const char* support_source_name(SupportSource s) {
  return s == SupportSource::Brown ? "brown" : "uniform";
}

inline SupportSource support_source_from_name(std::string_view s) {
  if (s == "brown") return SupportSource::Brown;
  if (s == "uniform") return SupportSource::Uniform;
  throw std::invalid_argument("unknown support source: " + std::string(s));
}

// True when every word keeps at least one active supporting state.
inline bool covers_support(const DropoutMask& mask, const EmissionSupport& support) {
  for (const auto& states : support.word_to_states) {
    bool any = false;
    for (std::int32_t s : states)
      if (mask.active[s]) {
        any = true;
        break;
      }
    if (!any) return false;
  }
  return true;
}

struct TrainConfig {
  std::int64_t n_states = 256;
  std::int32_t n_blocks = 16;
  std::int64_t hidden = 64;
  double dropout = 0.5;  // lambda
  std::int32_t batch_size = 16;
  std::int32_t segment_len = 32;
  double lr = 0.01;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables gradient clipping
  std::int32_t epochs = 1;
  std::int32_t eval_checks_per_epoch = 4;
  std::int32_t decay_patience = 8;
  double decay_factor = 4.0;
  std::uint64_t seed = 0;
  Variant variant = Variant::Neural;
  SupportSource support_source = SupportSource::Brown;
  std::int32_t uniform_support_n = 0;      // states per word; 0 means |Z|/M
  std::uint64_t uniform_support_seed = 0;  // 0 derives from `seed`

  ModelConfig model_config(std::int64_t vocab) const {
    ModelConfig mc;
    mc.n_states = n_states;
    mc.n_blocks = n_blocks;
    mc.vocab = vocab;
    mc.hidden = hidden;
    mc.variant = variant;
    return mc;
  }
};

// ---------------------------------------------------------------------------
// variant-erased parameter holder

template <typename Real>
struct AnyParams {
  Variant variant = Variant::Neural;
  NeuralParams<Real> neural;
  ScalarParams<Real> scalar;

  const ModelConfig& config() const {
    return variant == Variant::Scalar ? scalar.config : neural.config;
  }
  ParamRefs<Real> param_refs() {
    return variant == Variant::Scalar ? scalar.param_refs() : neural.param_refs();
  }
  DistParams<Real> compute(const SupportSpec& support, const DropoutMask* mask = nullptr,
                           ParamsCache<Real>* cache = nullptr) const {
    return variant == Variant::Scalar ? compute_dist_params(scalar, support, mask, cache)
                                      : compute_dist_params(neural, support, mask, cache);
  }
  void backward(const SupportSpec& support, const DistParams<Real>& dist,
                const ParamsCache<Real>& cache, const Posteriors<Real>& counts,
                Gradients<Real>& g) const {
    if (variant == Variant::Scalar) {
      backward_dist_params(scalar, support, dist, cache, counts, g);
    } else {
      backward_dist_params(neural, support, dist, cache, counts, g);
    }
  }
};

template <typename Real>
AnyParams<Real> init_any_params(const ModelConfig& config, const BlockPartition* partition,
                                std::uint64_t seed) {
  AnyParams<Real> p;
  p.variant = config.variant;
  if (config.variant == Variant::Scalar) {
    if (partition == nullptr)
      throw std::invalid_argument("init_any_params: scalar variant needs a partition");
    p.scalar = init_scalar_params<Real>(config, *partition, seed);
  } else {
    p.neural = init_neural_params<Real>(config, seed);
  }
  return p;
}

// ---------------------------------------------------------------------------
// AdamW

template <typename Real>
struct OptimizerState {
  std::int64_t step = 0;
  std::map<std::string, Tensor<Real>> m, v;
};

// Decoupled weight decay: theta -= lr * (mhat / (sqrt(vhat) + eps) + wd * theta).
template <typename Real>
void adamw_update(ParamRefs<Real> refs, const Gradients<Real>& grads, OptimizerState<Real>& opt,
                  double lr, double weight_decay, double beta1, double beta2, double eps) {
  opt.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(opt.step));
  for (auto& [name, theta] : refs) {
    auto mit = opt.m.find(name);
    if (mit == opt.m.end()) mit = opt.m.emplace(name, Tensor<Real>(theta->shape())).first;
    auto vit = opt.v.find(name);
    if (vit == opt.v.end()) vit = opt.v.emplace(name, Tensor<Real>(theta->shape())).first;
    Tensor<Real>& m = mit->second;
    Tensor<Real>& v = vit->second;
    if (!m.same_shape(*theta) || !v.same_shape(*theta))
      throw std::invalid_argument("adamw_update: moment shape mismatch for " + name);
    const Tensor<Real>* g = grads.find(name);
    for (std::size_t i = 0; i < theta->size(); ++i) {
      const double gi = g != nullptr ? static_cast<double>((*g)[i]) : 0.0;
      const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * gi;
      const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * gi * gi;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
      (*theta)[i] = static_cast<Real>(static_cast<double>((*theta)[i]) -
                                      lr * (update + weight_decay * static_cast<double>((*theta)[i])));
    }
  }
}

// ---------------------------------------------------------------------------
// trainer

struct MetricsRecord {
  std::int32_t check = 0;
  double epoch_fraction = 0;
  double lr = 0;
  double train_ppl = 0;
  double valid_ppl = 0;
  double ms_per_batch = 0;
};

struct TrainProgress {
  std::int64_t global_step = 0;
  std::int32_t epoch = 0;
  std::int64_t segment = 0;        // next segment within the epoch
  std::int32_t checks_in_epoch = 0;
  std::int32_t checks_done = 0;
  double lr = 0;
  double best_valid = std::numeric_limits<double>::infinity();
  std::int32_t bad_checks = 0;
  double window_nll = 0;
  std::int64_t window_tokens = 0;
  double last_train_ppl = std::numeric_limits<double>::quiet_NaN();
};

template <typename Real = float>
class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<std::int32_t> train_ids,
          std::vector<std::int32_t> valid_ids, std::int32_t vocab_size, std::int32_t eos_id,
          const BlockPartition* partition)
      : config_(std::move(config)),
        train_ids_(std::move(train_ids)),
        valid_ids_(std::move(valid_ids)),
        vocab_size_(vocab_size),
        eos_id_(eos_id),
        streams_(config_.seed) {
    if (config_.support_source == SupportSource::Brown || config_.variant == Variant::Scalar) {
      if (partition == nullptr)
        throw std::invalid_argument("Trainer: this configuration needs a block partition");
      partition_ = *partition;
      have_partition_ = true;
    }
    if (config_.support_source == SupportSource::Uniform) {
      uniform_n_ = config_.uniform_support_n > 0
                       ? config_.uniform_support_n
                       : static_cast<std::int32_t>(config_.n_states / config_.n_blocks);
      uniform_seed_ = config_.uniform_support_seed != 0 ? config_.uniform_support_seed
                                                        : streams_.stream("uniform-support");
      uniform_support_ = build_uniform_support(static_cast<std::int32_t>(config_.n_states),
                                               vocab_size_, uniform_n_, uniform_seed_);
    }
    plan_ = make_batches(static_cast<std::int64_t>(train_ids_.size()), config_.batch_size,
                         config_.segment_len);
    model_ = init_any_params<Real>(config_.model_config(vocab_size_),
                                   have_partition_ ? &partition_ : nullptr, config_.seed);
    progress_.lr = config_.lr;
    carries_.assign(plan_.batch_size, {});
  }

  SupportSpec support() const {
    SupportSpec s;
    if (config_.support_source == SupportSource::Brown) {
      s.partition = &partition_;
    } else {
      s.uniform = &uniform_support_;
    }
    return s;
  }

  bool done() const { return progress_.epoch >= config_.epochs; }

  // One batch: sample the mask, compute tables once, run forward-backward
  // over every row, update parameters, advance carries. Runs any validation
  // checks scheduled at this segment.
  void step() {
    if (done()) throw std::logic_error("Trainer::step: training already finished");
    if (progress_.segment == 0) {
      for (auto& c : carries_) c.clear();
    }
    const auto t0 = std::chrono::steady_clock::now();

    const SupportSpec sup = support();
    DropoutMask mask;
    const bool use_mask = config_.dropout > 0.0;
    if (use_mask) {
      auto eng = streams_.engine("dropout", static_cast<std::uint64_t>(progress_.global_step));
      mask = sample_dropout_mask(config_.n_states, config_.n_blocks, config_.dropout, eng);
      // A block partition always leaves every word at least one active state,
      // but an explicit support can lose all of a word's states to the mask.
      // Redraw until the mask covers the vocabulary; at realistic state counts
      // the first draw essentially always does.
      for (std::int32_t tries = 0; sup.uniform != nullptr && !covers_support(mask, *sup.uniform);
           ++tries) {
        if (tries >= 200)
          throw std::runtime_error("Trainer::step: no dropout mask covers the word supports");
        mask = sample_dropout_mask(config_.n_states, config_.n_blocks, config_.dropout, eng);
      }
    }

    ParamsCache<Real> cache;
    DistParams<Real> dist = model_.compute(sup, use_mask ? &mask : nullptr, &cache);
    Posteriors<Real> counts;
    counts.init_shapes(dist);

    ForwardOptions opts;
    opts.eos_reset_id = eos_id_;
    double logprob = 0;
    std::int64_t tokens = 0;
    for (std::int64_t row = 0; row < plan_.batch_size; ++row) {
      const std::int64_t off = plan_.segment_offset(row, progress_.segment);
      std::span<const std::int32_t> x{train_ids_.data() + off,
                                      static_cast<std::size_t>(plan_.segment_len)};
      auto res = forward_backward(dist, x, counts, nullptr,
                                  carries_[row].empty() ? nullptr : &carries_[row], opts);
      logprob += static_cast<double>(res.logprob);
      tokens += plan_.segment_len;
      carries_[row] = std::move(res.carry);
    }
    const double loss = -logprob / static_cast<double>(tokens);
    if (!std::isfinite(loss))
      throw std::runtime_error("train_step diverged: loss " + std::to_string(loss) + " at step " +
                               std::to_string(progress_.global_step));

    Gradients<Real> grads;
    model_.backward(sup, dist, cache, counts, grads);
    // counts hold d(sum log p)/d(tables); the objective is the mean negative
    // log-likelihood per token
    const Real scale = static_cast<Real>(-1.0 / static_cast<double>(tokens));
    for (auto& [name, g] : grads.by_name) scale_inplace(g, scale);
    if (config_.clip_norm > 0.0) clip_gradients(grads, config_.clip_norm);
    adamw_update(model_.param_refs(), grads, opt_, progress_.lr, config_.weight_decay,
                 config_.beta1, config_.beta2, config_.adam_eps);

    const auto t1 = std::chrono::steady_clock::now();
    window_ms_ += std::chrono::duration<double, std::milli>(t1 - t0).count();
    window_batches_ += 1;
    progress_.window_nll += -logprob;
    progress_.window_tokens += tokens;
    progress_.global_step += 1;
    progress_.segment += 1;
    last_loss_ = loss;

    while (progress_.checks_in_epoch < config_.eval_checks_per_epoch &&
           check_trigger_segment(progress_.checks_in_epoch + 1) == progress_.segment - 1) {
      run_check();
    }
    if (progress_.segment >= plan_.num_segments) {
      progress_.segment = 0;
      progress_.epoch += 1;
      progress_.checks_in_epoch = 0;
    }
  }

  void run(const std::function<void(const MetricsRecord&)>& on_check = {}) {
    on_check_extra_ = on_check;
    while (!done()) step();
    on_check_extra_ = {};
  }

  // Validation perplexity of the current parameters, dropout off.
  double validate() const {
    DistParams<Real> dist = model_.compute(support());
    return stream_perplexity(dist, valid_ids_, config_.batch_size, config_.segment_len, eos_id_)
        .ppl;
  }

  const TrainConfig& config() const { return config_; }
  const BatchPlan& plan() const { return plan_; }
  AnyParams<Real>& model() { return model_; }
  const AnyParams<Real>& model() const { return model_; }
  OptimizerState<Real>& optimizer() { return opt_; }
  TrainProgress& progress() { return progress_; }
  const TrainProgress& progress() const { return progress_; }
  std::vector<CarryState<Real>>& carries() { return carries_; }
  const std::vector<MetricsRecord>& metrics() const { return metrics_; }
  const BlockPartition* partition() const { return have_partition_ ? &partition_ : nullptr; }
  const EmissionSupport* uniform_support() const {
    return config_.support_source == SupportSource::Uniform ? &uniform_support_ : nullptr;
  }
  std::int32_t uniform_support_n() const { return uniform_n_; }
  std::uint64_t uniform_support_seed() const { return uniform_seed_; }
  double last_loss() const { return last_loss_; }
  double best_valid() const { return progress_.best_valid; }

  std::function<void(const MetricsRecord&)> on_check;  // every check
  std::function<void()> on_improved;                   // new best validation ppl

 private:
  std::int64_t check_trigger_segment(std::int32_t check_index) const {
    // segment after which check #check_index (1-based within the epoch) runs
    const std::int64_t num = plan_.num_segments;
    const std::int64_t cpe = config_.eval_checks_per_epoch;
    return (static_cast<std::int64_t>(check_index) * num + cpe - 1) / cpe - 1;
  }

  void run_check() {
    const double valid_ppl = validate();
    MetricsRecord rec;
    rec.check = ++progress_.checks_done;
    progress_.checks_in_epoch += 1;
    rec.epoch_fraction = static_cast<double>(progress_.epoch) +
                         static_cast<double>(progress_.checks_in_epoch) /
                             static_cast<double>(config_.eval_checks_per_epoch);
    rec.lr = progress_.lr;
    if (progress_.window_tokens > 0) {
      progress_.last_train_ppl =
          std::exp(progress_.window_nll / static_cast<double>(progress_.window_tokens));
    }
    rec.train_ppl = progress_.last_train_ppl;
    rec.valid_ppl = valid_ppl;
    rec.ms_per_batch = window_batches_ > 0 ? window_ms_ / static_cast<double>(window_batches_) : 0;
    progress_.window_nll = 0;
    progress_.window_tokens = 0;
    window_ms_ = 0;
    window_batches_ = 0;
    metrics_.push_back(rec);

    if (valid_ppl < progress_.best_valid) {
      progress_.best_valid = valid_ppl;
      progress_.bad_checks = 0;
      if (on_improved) on_improved();
    } else {
      progress_.bad_checks += 1;
      if (progress_.bad_checks >= config_.decay_patience) {
        progress_.lr /= config_.decay_factor;
        progress_.bad_checks = 0;
      }
    }
    if (on_check) on_check(rec);
    if (on_check_extra_) on_check_extra_(rec);
  }

  static void clip_gradients(Gradients<Real>& grads, double max_norm) {
    double sq = 0;
    for (const auto& [name, g] : grads.by_name)
      for (std::size_t i = 0; i < g.size(); ++i) sq += static_cast<double>(g[i]) * g[i];
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const Real s = static_cast<Real>(max_norm / norm);
    for (auto& [name, g] : grads.by_name) scale_inplace(g, s);
  }

  TrainConfig config_;
  std::vector<std::int32_t> train_ids_, valid_ids_;
  std::int32_t vocab_size_ = 0;
  std::int32_t eos_id_ = -1;
  SeedStreams streams_;
  BlockPartition partition_;
  bool have_partition_ = false;
  EmissionSupport uniform_support_;
  std::int32_t uniform_n_ = 0;
  std::uint64_t uniform_seed_ = 0;
  BatchPlan plan_;
  AnyParams<Real> model_;
  OptimizerState<Real> opt_;
  TrainProgress progress_;
  std::vector<CarryState<Real>> carries_;
  std::vector<MetricsRecord> metrics_;
  double window_ms_ = 0;
  std::int64_t window_batches_ = 0;
  double last_loss_ = std::numeric_limits<double>::quiet_NaN();
  std::function<void(const MetricsRecord&)> on_check_extra_;
};

}  // namespace vlhmm
