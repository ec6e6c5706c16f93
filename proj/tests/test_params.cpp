#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "vlhmm/gradcheck.hpp"
#include "vlhmm/params.hpp"

using namespace vlhmm;
using Catch::Matchers::WithinAbs;

namespace {

BlockPartition contiguous(std::int32_t vocab, std::int32_t blocks) {
  BlockPartition p;
  p.num_blocks = blocks;
  p.word_to_block.resize(vocab);
  for (std::int32_t w = 0; w < vocab; ++w)
    p.word_to_block[w] = static_cast<std::int32_t>(static_cast<std::int64_t>(w) * blocks / vocab);
  p.rebuild_block_vocabs();
  p.validate();
  return p;
}

ModelConfig make_config(std::int64_t z, std::int32_t m, std::int64_t x, std::int64_t h, Variant v) {
  ModelConfig c;
  c.n_states = z;
  c.n_blocks = m;
  c.vocab = x;
  c.hidden = h;
  c.variant = v;
  return c;
}

Tensor<double> random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double max_rel_gap(const Tensor<double>& a, const Tensor<double>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

void zero_block(ResidualBlock<double>& b) {
  b.w1.fill(0);
  b.w2.fill(0);
  b.gain.fill(0);
}

}  // namespace

TEST_CASE("residual block output has the input shape") {
  std::mt19937_64 rng(1);
  auto cfg = make_config(4, 2, 6, 8, Variant::Neural);
  auto np = init_neural_params<double>(cfg, 1);
  auto x = random_tensor({5, 8}, rng);
  REQUIRE(residual_forward(np.head_out, x, nullptr).shape() == x.shape());
}

TEST_CASE("residual block gradients match finite differences") {
  std::mt19937_64 rng(2);
  ResidualBlock<double> b;
  b.w1 = random_tensor({6, 6}, rng);
  b.w2 = random_tensor({6, 6}, rng);
  b.gain = random_tensor({6}, rng);
  b.bias = random_tensor({6}, rng);
  auto x = random_tensor({3, 6}, rng);
  auto dy = random_tensor({3, 6}, rng);

  ResidualCache<double> cache;
  residual_forward(b, x, &cache);
  Gradients<double> g;
  Tensor<double> dx = residual_backward(b, cache, dy, g, "blk");

  NamedParams params{{"x", &x}, {"blk.w1", &b.w1}, {"blk.w2", &b.w2},
                     {"blk.gain", &b.gain}, {"blk.bias", &b.bias}};
  auto fd = finite_diff_grad(params, [&] { return dot(residual_forward(b, x, nullptr), dy); }, 1e-5);
  REQUIRE(max_rel_gap(dx, *fd.find("x")) < 1e-4);
  for (const char* name : {"blk.w1", "blk.w2", "blk.gain", "blk.bias"})
    REQUIRE(max_rel_gap(*g.find(name), *fd.find(name)) < 1e-4);
}

TEST_CASE("zeroed heads collapse to the layer-norm bias rows") {
  for (Variant v : {Variant::Neural, Variant::Factored}) {
    auto cfg = make_config(4, 2, 6, 8, v);
    auto np = init_neural_params<double>(cfg, 3);
    zero_block(np.head_out);
    zero_block(np.head_in);
    zero_block(np.head_emit);
    if (np.factored()) {
      zero_block(np.comp_out);
      zero_block(np.comp_in);
      zero_block(np.comp_emit);
    }
    std::mt19937_64 rng(4);
    np.head_out.bias = random_tensor({8}, rng);

    ParamsCache<double> cache;
    cache.mat_ids = {0, 1, 2, 3};
    cache.mat_blocks = {0, 0, 1, 1};
    compute_heads(np, cache.mat_ids, cache.mat_blocks, cache.heads);
    REQUIRE(cache.heads.h_out.shape() == std::vector<std::size_t>{4, 8});
    REQUIRE(cache.heads.h_in.shape() == std::vector<std::size_t>{4, 8});
    REQUIRE(cache.heads.h_emit.shape() == std::vector<std::size_t>{4, 8});
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        REQUIRE(cache.heads.h_out.at(i, j) == np.head_out.bias[j]);
        REQUIRE(cache.heads.h_in.at(i, j) == np.head_in.bias[j]);
      }
  }
}

TEST_CASE("head gradients match finite differences for both embeddings") {
  for (Variant v : {Variant::Neural, Variant::Factored}) {
    auto cfg = make_config(4, 2, 6, 8, v);
    auto np = init_neural_params<double>(cfg, 5);
    ParamsCache<double> cache;
    cache.mat_ids = {0, 1, 2, 3};
    cache.mat_blocks = {0, 0, 1, 1};
    compute_heads(np, cache.mat_ids, cache.mat_blocks, cache.heads);

    std::mt19937_64 rng(6);
    auto dh_out = random_tensor({4, 8}, rng);
    auto dh_in = random_tensor({4, 8}, rng);
    auto dh_emit = random_tensor({4, 8}, rng);
    Gradients<double> g;
    backward_heads(np, cache, dh_out, dh_in, dh_emit, g);

    NamedParams params;
    for (auto& [name, tensor] : np.param_refs()) params.emplace_back(name, tensor);
    auto fd = finite_diff_grad(
        params,
        [&] {
          HeadsCache<double> hc;
          compute_heads(np, cache.mat_ids, cache.mat_blocks, hc);
          return dot(hc.h_out, dh_out) + dot(hc.h_in, dh_in) + dot(hc.h_emit, dh_emit);
        },
        1e-5);
    for (auto& [name, tensor] : np.param_refs()) {
      const Tensor<double>* analytic = g.find(name);
      const Tensor<double>* numeric = fd.find(name);
      if (analytic == nullptr) {
        // heads never touch e_x or start_emb
        for (std::size_t i = 0; i < numeric->size(); ++i)
          REQUIRE_THAT((*numeric)[i], WithinAbs(0.0, 1e-7));
      } else {
        REQUIRE(max_rel_gap(*analytic, *numeric) < 1e-4);
      }
    }
  }
}

TEST_CASE("zero scalar logits give uniform tables") {
  auto cfg = make_config(4, 2, 6, 0, Variant::Scalar);
  BlockPartition part = contiguous(6, 2);
  auto sp = init_scalar_params<double>(cfg, part, 1);
  sp.trans_logits.fill(0);
  sp.start_logits.fill(0);
  for (auto& t : sp.emission_logits) t.fill(0);
  SupportSpec support{&part, nullptr};

  DistParams<double> d = compute_dist_params(sp, support);
  for (std::size_t i = 0; i < d.log_trans.size(); ++i)
    REQUIRE_THAT(d.log_trans[i], WithinAbs(std::log(0.25), 1e-12));
  for (std::size_t i = 0; i < d.log_start.size(); ++i)
    REQUIRE_THAT(d.log_start[i], WithinAbs(std::log(0.25), 1e-12));
  for (std::int32_t w = 0; w < 6; ++w)
    for (double lp : d.word_logp[w])
      REQUIRE_THAT(lp, WithinAbs(std::log(1.0 / 3.0), 1e-12));  // 3 words per block

  auto eng = SeedStreams(2).engine("test-mask");
  DropoutMask mask = sample_dropout_mask(4, 2, 0.5, eng);  // 1 active per block
  DistParams<double> dm = compute_dist_params(sp, support, &mask);
  REQUIRE(dm.n_states() == 2);
  for (std::size_t i = 0; i < dm.log_trans.size(); ++i)
    REQUIRE_THAT(dm.log_trans[i], WithinAbs(std::log(0.5), 1e-12));
}

TEST_CASE("neural tables satisfy the normalization invariants") {
  for (Variant v : {Variant::Neural, Variant::Factored}) {
    auto cfg = make_config(6, 2, 8, 8, v);
    auto np = init_neural_params<double>(cfg, 7);
    BlockPartition part = contiguous(8, 2);
    SupportSpec support{&part, nullptr};
    DistParams<double> d = compute_dist_params(np, support);
    REQUIRE(max_normalization_error(d) < 1e-12);
    // off-block words are not in the support at all
    for (std::int32_t w = 0; w < 8; ++w)
      for (std::int32_t s : d.word_states[w])
        REQUIRE(part.word_to_block[w] == s / 3);
  }
}

TEST_CASE("masked materialization equals masking the full tables afterwards") {
  auto cfg = make_config(8, 2, 6, 8, Variant::Neural);
  auto np = init_neural_params<double>(cfg, 9);
  BlockPartition part = contiguous(6, 2);
  SupportSpec support{&part, nullptr};
  auto eng = SeedStreams(4).engine("test-mask");
  DropoutMask mask = sample_dropout_mask(8, 2, 0.5, eng);

  DistParams<double> direct = compute_dist_params(np, support, &mask);
  DistParams<double> after = apply_mask(compute_dist_params(np, support), mask);
  REQUIRE(direct.state_ids == after.state_ids);
  for (std::size_t i = 0; i < direct.log_trans.size(); ++i)
    REQUIRE_THAT(direct.log_trans[i], WithinAbs(after.log_trans[i], 1e-10));
  for (std::size_t i = 0; i < direct.log_start.size(); ++i)
    REQUIRE_THAT(direct.log_start[i], WithinAbs(after.log_start[i], 1e-10));
  REQUIRE(direct.word_states == after.word_states);
  for (std::size_t w = 0; w < direct.word_logp.size(); ++w)
    for (std::size_t j = 0; j < direct.word_logp[w].size(); ++j)
      REQUIRE_THAT(direct.word_logp[w][j], WithinAbs(after.word_logp[w][j], 1e-10));
}

TEST_CASE("with an explicit support a mask leaves states in place but unreachable") {
  auto cfg = make_config(4, 1, 5, 8, Variant::Neural);
  auto np = init_neural_params<double>(cfg, 11);
  EmissionSupport full = build_uniform_support(4, 5, 4, 1);
  SupportSpec support{nullptr, &full};
  auto eng = SeedStreams(6).engine("test-mask");
  DropoutMask mask = sample_dropout_mask(4, 1, 0.5, eng);

  DistParams<double> d = compute_dist_params(np, support, &mask);
  REQUIRE(d.n_states() == 4);  // every state still materialized
  for (std::int32_t i = 0; i < 4; ++i) {
    for (std::int32_t j = 0; j < 4; ++j) {
      if (!mask.active[j]) REQUIRE(d.log_trans.at(i, j) == neg_inf<double>);
    }
    if (!mask.active[i]) REQUIRE(d.log_start[i] == neg_inf<double>);
  }

  // unreachable states change nothing: same likelihood as cutting them out
  DistParams<double> cut = apply_mask(compute_dist_params(np, support), mask);
  std::mt19937_64 rng(12);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<std::int32_t> x(6);
    for (auto& t : x) t = static_cast<std::int32_t>(rng() % 5);
    REQUIRE_THAT(forward_serial(d, x).logprob,
                 WithinAbs(forward_serial(cut, x).logprob, 1e-10));
  }
}

TEST_CASE("the factored variant requires a partition support") {
  auto cfg = make_config(4, 2, 5, 8, Variant::Factored);
  auto np = init_neural_params<double>(cfg, 13);
  EmissionSupport usup = build_uniform_support(4, 5, 2, 1);
  SupportSpec support{nullptr, &usup};
  REQUIRE_THROWS(compute_dist_params(np, support));
}

TEST_CASE("support descriptions must name exactly one source") {
  auto cfg = make_config(4, 2, 6, 8, Variant::Neural);
  BlockPartition part = contiguous(6, 2);
  EmissionSupport usup = build_uniform_support(4, 6, 2, 1);
  SupportSpec none{nullptr, nullptr};
  SupportSpec both{&part, &usup};
  REQUIRE_THROWS(none.validate(cfg));
  REQUIRE_THROWS(both.validate(cfg));
  BlockPartition wrong = contiguous(6, 3);
  SupportSpec mismatched{&wrong, nullptr};
  REQUIRE_THROWS(mismatched.validate(cfg));
}

TEST_CASE("zero expected counts produce zero parameter gradients") {
  auto cfg = make_config(4, 2, 6, 8, Variant::Neural);
  auto np = init_neural_params<double>(cfg, 15);
  BlockPartition part = contiguous(6, 2);
  SupportSpec support{&part, nullptr};
  ParamsCache<double> cache;
  DistParams<double> d = compute_dist_params(np, support, nullptr, &cache);
  Posteriors<double> counts;
  counts.init_shapes(d);
  Gradients<double> g;
  backward_dist_params(np, support, d, cache, counts, g);
  for (const auto& [name, tensor] : g.by_name)
    for (std::size_t i = 0; i < tensor.size(); ++i) REQUIRE(tensor[i] == 0.0);
}

TEST_CASE("duplicating a batch row doubles every parameter gradient") {
  auto cfg = make_config(4, 2, 6, 8, Variant::Neural);
  auto np = init_neural_params<double>(cfg, 17);
  BlockPartition part = contiguous(6, 2);
  SupportSpec support{&part, nullptr};
  ParamsCache<double> cache;
  DistParams<double> d = compute_dist_params(np, support, nullptr, &cache);
  const std::vector<std::int32_t> x{1, 4, 0, 3};

  auto grads_for = [&](int repeats) {
    Posteriors<double> counts;
    counts.init_shapes(d);
    for (int r = 0; r < repeats; ++r) forward_backward(d, x, counts);
    Gradients<double> g;
    backward_dist_params(np, support, d, cache, counts, g);
    return g;
  };
  Gradients<double> once = grads_for(1);
  Gradients<double> twice = grads_for(2);
  for (const auto& [name, tensor] : once.by_name) {
    const Tensor<double>* doubled = twice.find(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) REQUIRE((*doubled)[i] == 2.0 * tensor[i]);
  }
}

TEST_CASE("end-to-end gradients match finite differences on every path") {
  GradCheckReport report = run_gradient_checks();
  REQUIRE(report.paths.size() == 11);
  for (const auto& path : report.paths) {
    INFO(path.name);
    REQUIRE(path.max_rel_err < 1e-4);
  }
}

TEST_CASE("parameter counts follow the closed forms") {
  REQUIRE(residual_block_param_count(256) == 2 * 256 * 256 + 2 * 256);

  auto neural15 = make_config(1 << 15, 128, 10004, 256, Variant::Neural);
  const std::int64_t expect15 = (1ll << 15) * 256 + 10004 * 256 + 256 + 3 * (2 * 256 * 256 + 2 * 256);
  REQUIRE(param_count(neural15) == expect15);
  REQUIRE_THAT(static_cast<double>(expect15) / 1e6, WithinAbs(11.4, 0.1));

  auto neural14 = make_config(1 << 14, 128, 10004, 256, Variant::Neural);
  REQUIRE_THAT(static_cast<double>(param_count(neural14)) / 1e6, WithinAbs(7.2, 0.1));

  auto scalar14 = make_config(1 << 14, 128, 10004, 0, Variant::Scalar);
  const double scalar_count = static_cast<double>(param_count(scalar14));
  REQUIRE(param_count(scalar14) ==
          (1ll << 14) * (1ll << 14) + (1ll << 14) * 10004 + (1ll << 14));
  REQUIRE(std::abs(scalar_count - 423e6) / 423e6 < 0.03);

  auto factored14 = make_config(1 << 14, 128, 10004, 256, Variant::Factored);
  REQUIRE(param_count(factored14) < param_count(neural14));
  REQUIRE(param_count(factored14) ==
          (1ll << 14) * 128 + 128 * 128 + 10004 * 256 + 256 + 6 * (2 * 256 * 256 + 2 * 256));
}

TEST_CASE("initialization is seeded, bounded, and leaves layer norm neutral") {
  auto cfg = make_config(6, 2, 10, 8, Variant::Neural);
  auto a = init_neural_params<double>(cfg, 42);
  auto b = init_neural_params<double>(cfg, 42);
  auto c = init_neural_params<double>(cfg, 43);

  bool differs = false;
  for (std::size_t i = 0; i < a.e_z.size(); ++i) {
    REQUIRE(a.e_z[i] == b.e_z[i]);
    differs = differs || a.e_z[i] != c.e_z[i];
  }
  REQUIRE(differs);

  for (auto& [name, tensor] : a.param_refs()) {
    if (name.ends_with(".gain")) {
      for (std::size_t i = 0; i < tensor->size(); ++i) REQUIRE((*tensor)[i] == 1.0);
    } else if (name.ends_with(".bias")) {
      for (std::size_t i = 0; i < tensor->size(); ++i) REQUIRE((*tensor)[i] == 0.0);
    } else {
      const double fan_bound = std::sqrt(6.0 / static_cast<double>(tensor->shape().back()));
      for (std::size_t i = 0; i < tensor->size(); ++i)
        REQUIRE(std::abs((*tensor)[i]) < fan_bound + 1e-12);
    }
  }
}

TEST_CASE("initialization rejects inconsistent variant requests") {
  auto scalar_cfg = make_config(4, 2, 6, 8, Variant::Scalar);
  REQUIRE_THROWS(init_neural_params<double>(scalar_cfg, 1));

  auto odd_h = make_config(4, 2, 6, 7, Variant::Factored);
  REQUIRE_THROWS(init_neural_params<double>(odd_h, 1));

  auto neural_cfg = make_config(4, 2, 6, 8, Variant::Neural);
  BlockPartition part = contiguous(6, 2);
  REQUIRE_THROWS(init_scalar_params<double>(neural_cfg, part, 1));

  auto bad_blocks = make_config(4, 3, 6, 8, Variant::Neural);
  REQUIRE_THROWS(bad_blocks.states_per_block());
}

TEST_CASE("variant names round-trip") {
  for (Variant v : {Variant::Neural, Variant::Factored, Variant::Scalar})
    REQUIRE(variant_from_name(variant_name(v)) == v);
  REQUIRE_THROWS(variant_from_name("mlp"));
}
