// Command-line surface for the blocked-emission HMM language model.
//
// Commands: cluster, train, eval, bench, gradcheck, sample. Logs go to
// stderr; machine-readable output (JSON reports, CSV tables, generated text)
// goes to stdout or to files, never interleaved with log text.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vlhmm/vlhmm.hpp"

namespace {

using nlohmann::json;
using namespace vlhmm;

std::ostream& log() { return std::cerr; }

struct CorpusFlags {
  bool lowercase = false;
  std::int64_t min_count = 1;
};

void add_corpus_flags(CLI::App* cmd, CorpusFlags& cf) {
  cmd->add_flag("--lowercase", cf.lowercase, "lowercase all tokens");
  cmd->add_option("--min-count", cf.min_count, "vocabulary frequency cutoff")
      ->check(CLI::PositiveNumber);
}

// ---------------------------------------------------------------------------
// cluster

int cmd_cluster(const std::string& train_path, std::int32_t m, std::int32_t window,
                const std::string& out_path, const std::string& vocab_out, const CorpusFlags& cf) {
  auto lines = load_corpus(train_path, cf.lowercase);
  Vocab vocab = build_vocab(lines, cf.min_count);
  EncodedCorpus corpus = encode(lines, vocab);
  log() << "corpus: " << corpus.ids.size() << " tokens, " << vocab.size() << " types\n";

  if (window <= 0) window = std::min<std::int32_t>(vocab.size(), std::max<std::int32_t>(m, 1000));
  BigramCounts counts = collect_bigrams(corpus);
  BlockPartition part = brown_cluster(counts, m, window);
  const double ami = average_mutual_information(part.word_to_block, counts);
  log() << "clustered into " << m << " blocks (window " << window << "), AMI " << ami << "\n";

  save_clusters(part, vocab, out_path);
  log() << "wrote " << out_path << "\n";
  if (!vocab_out.empty()) {
    save_vocab(vocab, vocab_out);
    log() << "wrote " << vocab_out << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainCli {
  std::string train_path, valid_path, clusters_path, config_path;
  std::string checkpoint_path, metrics_path, resume_path;
  CorpusFlags cf;
  // raw overrides; only keys the user actually passed are applied
  std::vector<std::pair<std::string, std::string>> overrides;
};

void add_override_option(CLI::App* cmd, TrainCli& tc, const std::string& flag,
                         const std::string& key, const std::string& help) {
  cmd->add_option_function<std::string>(
         flag, [&tc, key](const std::string& v) { tc.overrides.emplace_back(key, v); }, help)
      ->type_name("TEXT");
}

json metrics_json(const MetricsRecord& m) {
  return json{{"check", m.check},          {"epoch_fraction", m.epoch_fraction},
              {"lr", m.lr},                {"train_ppl", m.train_ppl},
              {"valid_ppl", m.valid_ppl},  {"ms_per_batch", m.ms_per_batch}};
}

int cmd_train(TrainCli& tc) {
  ConfigMap map = tc.config_path.empty() ? ConfigMap{} : load_config_file(tc.config_path);
  for (const auto& [k, v] : tc.overrides) map[k] = v;
  TrainConfig config = train_config_from_map(map);
  // full resolved provenance record: every TrainConfig key plus the inputs
  ConfigMap resolved = train_config_to_map(config);
  resolved["train"] = tc.train_path;
  resolved["valid"] = tc.valid_path;
  if (!tc.clusters_path.empty()) resolved["clusters"] = tc.clusters_path;
  resolved["lowercase"] = tc.cf.lowercase ? "1" : "0";
  resolved["min_count"] = std::to_string(tc.cf.min_count);
  const std::string config_text = config_echo(resolved);
  log() << "resolved config:\n" << config_text;

  auto train_lines = load_corpus(tc.train_path, tc.cf.lowercase);
  auto valid_lines = load_corpus(tc.valid_path, tc.cf.lowercase);
  Vocab vocab = build_vocab(train_lines, tc.cf.min_count);
  EncodedCorpus train_corpus = encode(train_lines, vocab);
  EncodedCorpus valid_corpus = encode(valid_lines, vocab);
  log() << "train: " << train_corpus.ids.size() << " tokens, valid: " << valid_corpus.ids.size()
        << " tokens, vocab " << vocab.size() << "\n";

  std::optional<BlockPartition> part;
  const bool needs_partition =
      config.support_source == SupportSource::Brown || config.variant == Variant::Scalar;
  if (needs_partition) {
    if (tc.clusters_path.empty())
      throw std::runtime_error("this configuration needs --clusters (brown support or scalar variant)");
    part = load_clusters(tc.clusters_path, vocab);
    if (part->num_blocks != config.n_blocks)
      throw std::runtime_error("clusters file has " + std::to_string(part->num_blocks) +
                               " blocks but config says " + std::to_string(config.n_blocks));
  }

  Trainer<float> trainer(config, train_corpus.ids, valid_corpus.ids, vocab.size(), vocab.eos_id,
                         part ? &*part : nullptr);
  log() << "parameters: " << param_count(config.model_config(vocab.size())) << " ("
        << variant_name(config.variant) << ")\n";
  log() << "plan: " << trainer.plan().num_segments << " segments/epoch x " << config.epochs
        << " epochs, batch " << config.batch_size << " x " << config.segment_len << "\n";

  bool resumed = false;
  if (!tc.resume_path.empty()) {
    Checkpoint ck = load_checkpoint(tc.resume_path);
    if (vocab_from_checkpoint(ck).tokens != vocab.tokens)
      throw std::runtime_error("resume: vocabulary does not match the checkpoint");
    restore_trainer(trainer, ck);
    resumed = true;
    log() << "resumed from " << tc.resume_path << " at step " << trainer.progress().global_step
          << "\n";
  }

  if (tc.metrics_path.empty()) tc.metrics_path = tc.checkpoint_path + ".metrics.jsonl";
  std::ofstream metrics(tc.metrics_path, resumed ? std::ios::app : std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot open metrics file " + tc.metrics_path);

  const std::string latest_path = tc.checkpoint_path + ".latest";
  trainer.on_check = [&](const MetricsRecord& m) {
    metrics << metrics_json(m).dump() << '\n';
    metrics.flush();
    log() << "check " << m.check << ": epoch " << m.epoch_fraction << ", lr " << m.lr
          << ", train ppl " << m.train_ppl << ", valid ppl " << m.valid_ppl << " ("
          << m.ms_per_batch << " ms/batch)\n";
    save_checkpoint(latest_path, snapshot_trainer(trainer, config_text, vocab.tokens));
  };
  trainer.on_improved = [&]() {
    save_checkpoint(tc.checkpoint_path,
                    snapshot_trainer(trainer, config_text, vocab.tokens, /*include_training=*/false));
  };

  trainer.run();
  save_checkpoint(latest_path, snapshot_trainer(trainer, config_text, vocab.tokens));
  log() << "done: best valid ppl " << trainer.best_valid() << "\n";
  log() << "best checkpoint: " << tc.checkpoint_path << "\n";
  log() << "latest state: " << latest_path << "\n";
  log() << "metrics: " << tc.metrics_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, std::int32_t batch_size,
             std::int32_t segment_len, std::optional<bool> lowercase) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  ConfigMap stored = parse_config_text(ck.config_text);
  if (batch_size <= 0) batch_size = static_cast<std::int32_t>(config_i64(stored, "batch_size", 16));
  if (segment_len <= 0) segment_len = static_cast<std::int32_t>(config_i64(stored, "segment_len", 32));
  const bool lc = lowercase.value_or(config_i64(stored, "lowercase", 0) != 0);

  Vocab vocab = vocab_from_checkpoint(ck);
  LoadedModel lm = model_from_checkpoint(ck);
  EncodedCorpus data = encode(load_corpus(data_path, lc), vocab);
  log() << "eval: " << data.ids.size() << " tokens, B=" << batch_size << ", L=" << segment_len
        << "\n";

  DistParams<float> dist = lm.model.compute(lm.support());
  EvalReport rep = stream_perplexity(dist, data.ids, batch_size, segment_len, vocab.eos_id);

  json out{{"ppl", rep.ppl},
           {"token_count", rep.token_count},
           {"logprob_total", rep.logprob_total},
           {"ms_per_batch", rep.ms_per_batch},
           {"config", json(stored)}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// bench

int cmd_bench(const std::vector<std::int64_t>& states, const std::vector<std::int32_t>& blocks,
              const std::vector<double>& lambdas, const std::string& variant, std::int64_t hidden,
              std::int32_t batch_size, std::int32_t segment_len, std::int32_t reps,
              std::uint64_t seed, const std::string& plot_prefix) {
  std::vector<BenchMeasurement> rows;
  for (auto z : states)
    for (auto m : blocks)
      for (auto lam : lambdas) {
        BenchCase bc;
        bc.n_states = z;
        bc.n_blocks = m;
        bc.lambda = lam;
        bc.variant = variant_from_name(variant);
        bc.hidden = hidden;
        bc.batch_size = batch_size;
        bc.segment_len = segment_len;
        bc.reps = reps;
        bc.seed = seed;
        log() << "bench: |Z|=" << z << " M=" << m << " k=" << z / m << " lambda=" << lam << "\n";
        rows.push_back(run_bench_case(bc));
      }
  std::cout << bench_csv(rows);

  if (!plot_prefix.empty()) {
    if (blocks.size() > 1) {
      std::ofstream out(plot_prefix + ".k_time.dat");
      for (const auto& r : rows)
        if (r.spec.n_states == states.front() && r.spec.lambda == lambdas.front())
          out << r.spec.n_states / r.spec.n_blocks << ' ' << r.forward_us_per_token << '\n';
      log() << "wrote " << plot_prefix << ".k_time.dat\n";
    }
    if (lambdas.size() > 1) {
      std::ofstream out(plot_prefix + ".dropout_time.dat");
      for (const auto& r : rows)
        if (r.spec.n_states == states.front() && r.spec.n_blocks == blocks.front())
          out << r.spec.lambda << ' ' << r.train_step_ms << '\n';
      log() << "wrote " << plot_prefix << ".dropout_time.dat\n";
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(std::int64_t states, std::int32_t blocks, std::int32_t vocab, std::int64_t hidden,
                  std::int32_t len, std::uint64_t seed, double tolerance) {
  GradCheckReport rep = run_gradient_checks(states, blocks, vocab, hidden, len, seed);
  json paths = json::array();
  for (const auto& p : rep.paths) {
    log() << p.name << ": " << p.max_rel_err << "\n";
    paths.push_back({{"name", p.name}, {"max_rel_err", p.max_rel_err}});
  }
  const bool pass = rep.max_rel_err <= tolerance;
  json out{{"paths", paths},
           {"max_rel_err", rep.max_rel_err},
           {"tolerance", tolerance},
           {"pass", pass}};
  std::cout << out.dump(2) << "\n";
  return pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// sample

int cmd_sample(const std::string& ckpt_path, std::int64_t length, std::uint64_t seed) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Vocab vocab = vocab_from_checkpoint(ck);
  LoadedModel lm = model_from_checkpoint(ck);
  DistParams<float> dist = lm.model.compute(lm.support());

  auto eng = SeedStreams(seed).engine("sampling");
  SampledSequence seq = sample_sequence(dist, length, eng, vocab.eos_id);
  log() << "sampled " << seq.tokens.size() << " tokens\n";
  bool line_open = false;
  for (auto id : seq.tokens) {
    if (id == vocab.eos_id) {
      std::cout << '\n';
      line_open = false;
    } else {
      if (line_open) std::cout << ' ';
      std::cout << vocab.tokens.at(id);
      line_open = true;
    }
  }
  if (line_open) std::cout << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"blocked-emission HMM language model"};
  app.require_subcommand(1);
  std::int32_t threads = 1;
  app.add_option("--threads", threads, "worker threads (this build runs single-threaded)");

  // cluster
  auto* cluster = app.add_subcommand("cluster", "cluster a corpus into emission blocks");
  std::string cl_train, cl_out, cl_vocab_out;
  std::int32_t cl_m = 16, cl_window = 0;
  CorpusFlags cl_cf;
  cluster->add_option("--train", cl_train, "training corpus")->required();
  cluster->add_option("--M", cl_m, "number of blocks")->required()->check(CLI::PositiveNumber);
  cluster->add_option("--window", cl_window, "merge window (0 = auto)");
  cluster->add_option("--out", cl_out, "output clusters file")->required();
  cluster->add_option("--vocab-out", cl_vocab_out, "also write the vocabulary list");
  add_corpus_flags(cluster, cl_cf);

  // train
  auto* train = app.add_subcommand("train", "train a model");
  TrainCli traincli;
  train->add_option("--train", traincli.train_path, "training corpus")->required();
  train->add_option("--valid", traincli.valid_path, "validation corpus")->required();
  train->add_option("--clusters", traincli.clusters_path, "clusters file from `cluster`");
  train->add_option("--config", traincli.config_path, "key=value config file");
  train->add_option("--checkpoint", traincli.checkpoint_path, "best-model checkpoint path")
      ->required();
  train->add_option("--metrics", traincli.metrics_path,
                    "metrics JSONL path (default: <checkpoint>.metrics.jsonl)");
  train->add_option("--resume", traincli.resume_path, "resume from a .latest checkpoint");
  add_corpus_flags(train, traincli.cf);
  add_override_option(train, traincli, "--states", "states", "|Z|, total states");
  add_override_option(train, traincli, "--blocks", "blocks", "M, number of blocks");
  add_override_option(train, traincli, "--hidden", "hidden", "h, embedding width");
  add_override_option(train, traincli, "--dropout", "dropout", "state-dropout rate lambda");
  add_override_option(train, traincli, "--batch-size", "batch_size", "B, parallel streams");
  add_override_option(train, traincli, "--segment-len", "segment_len", "L, tokens per segment");
  add_override_option(train, traincli, "--lr", "lr", "learning rate");
  add_override_option(train, traincli, "--weight-decay", "weight_decay", "AdamW weight decay");
  add_override_option(train, traincli, "--clip-norm", "clip_norm", "gradient clip (0 = off)");
  add_override_option(train, traincli, "--epochs", "epochs", "training epochs");
  add_override_option(train, traincli, "--checks-per-epoch", "eval_checks_per_epoch",
                      "validation checks per epoch");
  add_override_option(train, traincli, "--decay-patience", "decay_patience",
                      "flat checks before lr decay");
  add_override_option(train, traincli, "--decay-factor", "decay_factor", "lr divisor on decay");
  add_override_option(train, traincli, "--seed", "seed", "root seed");
  add_override_option(train, traincli, "--variant", "variant", "neural | factored | scalar");
  add_override_option(train, traincli, "--support", "support", "brown | uniform");
  add_override_option(train, traincli, "--uniform-n", "uniform_support_n",
                      "states per word for uniform support (0 = |Z|/M)");
  add_override_option(train, traincli, "--uniform-seed", "uniform_support_seed",
                      "uniform-support seed (0 = derive from root seed)");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate perplexity from a checkpoint");
  std::string ev_ckpt, ev_data;
  std::int32_t ev_b = 0, ev_l = 0;
  bool ev_lower = false;
  eval->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  eval->add_option("--data", ev_data, "evaluation corpus")->required();
  eval->add_option("--batch-size", ev_b, "streams (default: from checkpoint)");
  eval->add_option("--segment-len", ev_l, "chunk length (default: from checkpoint)");
  auto* ev_lower_flag = eval->add_flag("--lowercase", ev_lower, "lowercase the corpus");

  // bench
  auto* bench = app.add_subcommand("bench", "timing grid over model geometries");
  std::vector<std::int64_t> bn_states{2048};
  std::vector<std::int32_t> bn_blocks{64};
  std::vector<double> bn_lambda{0.0};
  std::string bn_variant = "scalar", bn_plot;
  std::int64_t bn_hidden = 64;
  std::int32_t bn_b = 16, bn_l = 32, bn_reps = 5;
  std::uint64_t bn_seed = 1;
  bench->add_option("--states", bn_states, "|Z| values")->delimiter(',');
  bench->add_option("--blocks", bn_blocks, "M values")->delimiter(',');
  bench->add_option("--lambda", bn_lambda, "dropout rates")->delimiter(',');
  bench->add_option("--variant", bn_variant, "neural | factored | scalar");
  bench->add_option("--hidden", bn_hidden, "h for neural variants");
  bench->add_option("--batch-size", bn_b, "B");
  bench->add_option("--segment-len", bn_l, "L");
  bench->add_option("--reps", bn_reps, "timed repetitions per cell");
  bench->add_option("--seed", bn_seed, "root seed");
  bench->add_option("--plot", bn_plot, "write plot-data files with this prefix");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::int64_t gc_states = 4, gc_hidden = 8;
  std::int32_t gc_blocks = 2, gc_vocab = 6, gc_len = 3;
  std::uint64_t gc_seed = 7;
  double gc_tol = 1e-4;
  gradcheck->add_option("--states", gc_states, "|Z|");
  gradcheck->add_option("--blocks", gc_blocks, "M");
  gradcheck->add_option("--vocab", gc_vocab, "|X|");
  gradcheck->add_option("--hidden", gc_hidden, "h");
  gradcheck->add_option("--len", gc_len, "sequence length");
  gradcheck->add_option("--seed", gc_seed, "root seed");
  gradcheck->add_option("--tolerance", gc_tol, "max relative error allowed");

  // sample
  auto* sample = app.add_subcommand("sample", "generate text from a checkpoint");
  std::string sm_ckpt;
  std::int64_t sm_len = 100;
  std::uint64_t sm_seed = 0;
  sample->add_option("--checkpoint", sm_ckpt, "model checkpoint")->required();
  sample->add_option("--length", sm_len, "tokens to generate")->check(CLI::PositiveNumber);
  sample->add_option("--seed", sm_seed, "sampling seed");

  CLI11_PARSE(app, argc, argv);

  if (threads > 1) log() << "note: single-threaded build, --threads ignored\n";
  try {
    if (*cluster) return cmd_cluster(cl_train, cl_m, cl_window, cl_out, cl_vocab_out, cl_cf);
    if (*train) return cmd_train(traincli);
    if (*eval)
      return cmd_eval(ev_ckpt, ev_data, ev_b, ev_l,
                      ev_lower_flag->count() > 0 ? std::optional<bool>(ev_lower) : std::nullopt);
    if (*bench)
      return cmd_bench(bn_states, bn_blocks, bn_lambda, bn_variant, bn_hidden, bn_b, bn_l, bn_reps,
                       bn_seed, bn_plot);
    if (*gradcheck)
      return cmd_gradcheck(gc_states, gc_blocks, gc_vocab, gc_hidden, gc_len, gc_seed, gc_tol);
    if (*sample) return cmd_sample(sm_ckpt, sm_len, sm_seed);
  } catch (const std::exception& e) {
    log() << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
