// Smallest end-to-end run of the library: synthesize a two-topic corpus,
// cluster it, train a blocked neural model with state dropout, then sample
// from the fit. Finishes in a few seconds on one core.

#include <cstdio>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vlhmm/vlhmm.hpp"

namespace {

std::string make_corpus(int lines, std::uint64_t seed) {
  static const std::vector<std::string> topic_a{"red", "green", "blue", "cyan"};
  static const std::vector<std::string> topic_b{"one", "two", "three", "four"};
  std::mt19937_64 rng(seed);
  std::ostringstream out;
  for (int i = 0; i < lines; ++i) {
    const auto& topic = i % 2 == 0 ? topic_a : topic_b;
    for (int w = 0; w < 8; ++w) out << topic[rng() % topic.size()] << (w + 1 < 8 ? " " : "\n");
  }
  return out.str();
}

}  // namespace

int main() {
  using namespace vlhmm;

  std::istringstream train_text(make_corpus(120, 1));
  std::istringstream valid_text(make_corpus(30, 2));
  auto train_lines = tokenize_lines(train_text, false);
  auto valid_lines = tokenize_lines(valid_text, false);
  Vocab vocab = build_vocab(train_lines, 1);
  EncodedCorpus train = encode(train_lines, vocab);
  EncodedCorpus valid = encode(valid_lines, vocab);
  std::printf("corpus: %zu train tokens, vocab %d\n", train.ids.size(), vocab.size());

  BigramCounts bigrams = collect_bigrams(train);
  BlockPartition partition = brown_cluster(bigrams, 2, vocab.size());
  std::printf("clusters: AMI %.4f\n",
              average_mutual_information(partition.word_to_block, bigrams));

  TrainConfig tc;
  tc.n_states = 4;
  tc.n_blocks = 2;
  tc.hidden = 8;
  tc.dropout = 0.5;
  tc.batch_size = 2;
  tc.segment_len = 8;
  tc.lr = 0.05;
  tc.epochs = 2;
  tc.eval_checks_per_epoch = 2;
  tc.seed = 1;

  Trainer<float> trainer(tc, train.ids, valid.ids, vocab.size(), vocab.eos_id, &partition);
  trainer.on_check = [](const MetricsRecord& rec) {
    std::printf("check %d  epoch %.2f  train ppl %.3f  valid ppl %.3f\n", rec.check,
                rec.epoch_fraction, rec.train_ppl, rec.valid_ppl);
  };
  trainer.run();

  DistParams<float> dist = trainer.model().compute(trainer.support());
  std::mt19937_64 eng(7);
  SampledSequence seq = sample_sequence(dist, 32, eng, vocab.eos_id);
  std::string text;
  for (const std::string& tok : decode(seq.tokens, vocab)) text += tok + " ";
  std::printf("sample: %s\n", text.c_str());
  return 0;
}
