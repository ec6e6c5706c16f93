#pragma once

// Single-file binary checkpoints. Everything a resumed run needs is stored:
// the resolved configuration text, vocabulary, emission-support definition,
// model tensors, optimizer moments, and training progress including filtering
// carries. Tensors are float32 little-endian, so save/load round-trips are
// bit-exact for the float-parameterized trainer.
//
// Layout (all integers little-endian):
//   magic "VLHMM1", u32 version
//   u64 config_len, config bytes            resolved key=value echo
//   u8 variant, i64 n_states, i32 n_blocks, i64 hidden, i64 vocab
//   u64 vocab_count, then per token u32 len + bytes
//   u8 support_kind (0 partition, 1 uniform)
//     partition: i32 num_blocks, i32 word_to_block[vocab]
//     uniform:   i32 states_per_word, u64 seed
//   tensor table (u64 count, then name/rank/dims/f32 payload)
//   u8 has_optimizer { i64 step, tensor table m, tensor table v }
//   u8 has_progress  { i64 global_step, i64 epoch, i64 segment,
//                      i64 checks_in_epoch, i64 checks_done, f64 lr,
//                      f64 best_valid, i64 bad_checks, f64 window_nll,
//                      f64 window_tokens, f64 last_train_ppl,
//                      u64 carry_count, per carry u8 present + f32[n] }

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vlhmm/brown.hpp"
#include "vlhmm/corpus.hpp"
#include "vlhmm/tensor.hpp"
#include "vlhmm/trainer.hpp"

namespace vlhmm {

inline constexpr char kCheckpointMagic[6] = {'V', 'L', 'H', 'M', 'M', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(sizeof(float) == 4 && sizeof(double) == 8);

template <class T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  const auto len = read_pod<std::uint32_t>(in);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw std::runtime_error("checkpoint: truncated string");
  return s;
}

inline void write_tensor_table(std::ostream& out,
                               const std::vector<std::pair<std::string, Tensor<float>>>& table) {
  write_pod<std::uint64_t>(out, table.size());
  for (const auto& [name, t] : table) {
    write_string(out, name);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
}

inline std::vector<std::pair<std::string, Tensor<float>>> read_tensor_table(std::istream& in) {
  const auto count = read_pod<std::uint64_t>(in);
  std::vector<std::pair<std::string, Tensor<float>>> table;
  table.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = read_string(in);
    const auto rank = read_pod<std::uint32_t>(in);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
    Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor " + name);
    table.emplace_back(std::move(name), std::move(t));
  }
  return table;
}

}  // namespace detail

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  ModelConfig model;
  std::vector<std::string> vocab_tokens;

  bool has_partition = false;
  BlockPartition partition;
  bool has_uniform = false;
  std::int32_t uniform_states_per_word = 0;
  std::uint64_t uniform_seed = 0;

  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  bool has_optimizer = false;
  std::int64_t optimizer_step = 0;
  std::vector<std::pair<std::string, Tensor<float>>> optimizer_m;
  std::vector<std::pair<std::string, Tensor<float>>> optimizer_v;

  bool has_progress = false;
  TrainProgress progress;
  std::vector<std::vector<float>> carries;       // empty vector = cleared carry
  std::vector<std::uint8_t> carry_present;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<std::uint32_t>(out, ck.version);

  detail::write_pod<std::uint64_t>(out, ck.config_text.size());
  out.write(ck.config_text.data(), static_cast<std::streamsize>(ck.config_text.size()));

  detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(ck.model.variant));
  detail::write_pod<std::int64_t>(out, ck.model.n_states);
  detail::write_pod<std::int32_t>(out, ck.model.n_blocks);
  detail::write_pod<std::int64_t>(out, ck.model.hidden);
  detail::write_pod<std::int64_t>(out, ck.model.vocab);

  detail::write_pod<std::uint64_t>(out, ck.vocab_tokens.size());
  for (const auto& tok : ck.vocab_tokens) detail::write_string(out, tok);

  if (ck.has_partition == ck.has_uniform)
    throw std::runtime_error("checkpoint: exactly one support kind must be set");
  if (ck.has_partition) {
    detail::write_pod<std::uint8_t>(out, 0);
    detail::write_pod<std::int32_t>(out, ck.partition.num_blocks);
    for (auto b : ck.partition.word_to_block) detail::write_pod<std::int32_t>(out, b);
  } else {
    detail::write_pod<std::uint8_t>(out, 1);
    detail::write_pod<std::int32_t>(out, ck.uniform_states_per_word);
    detail::write_pod<std::uint64_t>(out, ck.uniform_seed);
  }

  detail::write_tensor_table(out, ck.tensors);

  detail::write_pod<std::uint8_t>(out, ck.has_optimizer ? 1 : 0);
  if (ck.has_optimizer) {
    detail::write_pod<std::int64_t>(out, ck.optimizer_step);
    detail::write_tensor_table(out, ck.optimizer_m);
    detail::write_tensor_table(out, ck.optimizer_v);
  }

  detail::write_pod<std::uint8_t>(out, ck.has_progress ? 1 : 0);
  if (ck.has_progress) {
    const TrainProgress& p = ck.progress;
    detail::write_pod<std::int64_t>(out, p.global_step);
    detail::write_pod<std::int64_t>(out, p.epoch);
    detail::write_pod<std::int64_t>(out, p.segment);
    detail::write_pod<std::int64_t>(out, p.checks_in_epoch);
    detail::write_pod<std::int64_t>(out, p.checks_done);
    detail::write_pod<double>(out, p.lr);
    detail::write_pod<double>(out, p.best_valid);
    detail::write_pod<std::int64_t>(out, p.bad_checks);
    detail::write_pod<double>(out, p.window_nll);
    detail::write_pod<double>(out, p.window_tokens);
    detail::write_pod<double>(out, p.last_train_ppl);
    detail::write_pod<std::uint64_t>(out, ck.carries.size());
    for (std::size_t i = 0; i < ck.carries.size(); ++i) {
      const std::uint8_t present = i < ck.carry_present.size() ? ck.carry_present[i] : 0;
      detail::write_pod<std::uint8_t>(out, present);
      if (present) {
        detail::write_pod<std::uint64_t>(out, ck.carries[i].size());
        out.write(reinterpret_cast<const char*>(ck.carries[i].data()),
                  static_cast<std::streamsize>(ck.carries[i].size() * sizeof(float)));
      }
    }
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);

  Checkpoint ck;
  ck.version = detail::read_pod<std::uint32_t>(in);
  if (ck.version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(ck.version));

  const auto cfg_len = detail::read_pod<std::uint64_t>(in);
  ck.config_text.resize(cfg_len);
  in.read(ck.config_text.data(), static_cast<std::streamsize>(cfg_len));
  if (!in) throw std::runtime_error("checkpoint: truncated config");

  ck.model.variant = static_cast<Variant>(detail::read_pod<std::uint8_t>(in));
  ck.model.n_states = detail::read_pod<std::int64_t>(in);
  ck.model.n_blocks = detail::read_pod<std::int32_t>(in);
  ck.model.hidden = detail::read_pod<std::int64_t>(in);
  ck.model.vocab = detail::read_pod<std::int64_t>(in);

  const auto vocab_count = detail::read_pod<std::uint64_t>(in);
  ck.vocab_tokens.resize(vocab_count);
  for (auto& tok : ck.vocab_tokens) tok = detail::read_string(in);

  const auto support_kind = detail::read_pod<std::uint8_t>(in);
  if (support_kind == 0) {
    ck.has_partition = true;
    ck.partition.num_blocks = detail::read_pod<std::int32_t>(in);
    ck.partition.word_to_block.resize(ck.model.vocab);
    for (auto& b : ck.partition.word_to_block) b = detail::read_pod<std::int32_t>(in);
    ck.partition.rebuild_block_vocabs();
    ck.partition.validate();
  } else if (support_kind == 1) {
    ck.has_uniform = true;
    ck.uniform_states_per_word = detail::read_pod<std::int32_t>(in);
    ck.uniform_seed = detail::read_pod<std::uint64_t>(in);
  } else {
    throw std::runtime_error("checkpoint: unknown support kind");
  }

  ck.tensors = detail::read_tensor_table(in);

  if (detail::read_pod<std::uint8_t>(in)) {
    ck.has_optimizer = true;
    ck.optimizer_step = detail::read_pod<std::int64_t>(in);
    ck.optimizer_m = detail::read_tensor_table(in);
    ck.optimizer_v = detail::read_tensor_table(in);
  }

  if (detail::read_pod<std::uint8_t>(in)) {
    ck.has_progress = true;
    TrainProgress& p = ck.progress;
    p.global_step = detail::read_pod<std::int64_t>(in);
    p.epoch = detail::read_pod<std::int64_t>(in);
    p.segment = detail::read_pod<std::int64_t>(in);
    p.checks_in_epoch = detail::read_pod<std::int64_t>(in);
    p.checks_done = detail::read_pod<std::int64_t>(in);
    p.lr = detail::read_pod<double>(in);
    p.best_valid = detail::read_pod<double>(in);
    p.bad_checks = detail::read_pod<std::int64_t>(in);
    p.window_nll = detail::read_pod<double>(in);
    p.window_tokens = detail::read_pod<double>(in);
    p.last_train_ppl = detail::read_pod<double>(in);
    const auto carry_count = detail::read_pod<std::uint64_t>(in);
    ck.carries.resize(carry_count);
    ck.carry_present.resize(carry_count, 0);
    for (std::uint64_t i = 0; i < carry_count; ++i) {
      ck.carry_present[i] = detail::read_pod<std::uint8_t>(in);
      if (ck.carry_present[i]) {
        const auto n = detail::read_pod<std::uint64_t>(in);
        ck.carries[i].resize(n);
        in.read(reinterpret_cast<char*>(ck.carries[i].data()),
                static_cast<std::streamsize>(n * sizeof(float)));
        if (!in) throw std::runtime_error("checkpoint: truncated carry");
      }
    }
  }
  return ck;
}

// Snapshots the full trainer state. Pass include_training=false for a
// weights-only export (no optimizer moments or progress).
inline Checkpoint snapshot_trainer(Trainer<float>& tr, const std::string& config_text,
                                   const std::vector<std::string>& vocab_tokens,
                                   bool include_training = true) {
  Checkpoint ck;
  ck.config_text = config_text;
  ck.model = tr.model().config();
  ck.vocab_tokens = vocab_tokens;
  if (tr.partition() != nullptr) {
    ck.has_partition = true;
    ck.partition = *tr.partition();
  } else {
    ck.has_uniform = true;
    ck.uniform_states_per_word = tr.uniform_support_n();
    ck.uniform_seed = tr.uniform_support_seed();
  }
  for (const auto& [name, t] : tr.model().param_refs())
    ck.tensors.emplace_back(name, *t);
  if (include_training) {
    ck.has_optimizer = true;
    ck.optimizer_step = tr.optimizer().step;
    for (const auto& [name, t] : tr.model().param_refs()) {
      ck.optimizer_m.emplace_back(name, tr.optimizer().m.at(name));
      ck.optimizer_v.emplace_back(name, tr.optimizer().v.at(name));
    }
    ck.has_progress = true;
    ck.progress = tr.progress();
    ck.carries.resize(tr.carries().size());
    ck.carry_present.assign(tr.carries().size(), 0);
    for (std::size_t i = 0; i < tr.carries().size(); ++i) {
      if (!tr.carries()[i].empty()) {
        ck.carry_present[i] = 1;
        ck.carries[i] = tr.carries()[i];
      }
    }
  }
  return ck;
}

namespace detail {

inline void assign_named_tensors(ParamRefs<float> refs,
                                 const std::vector<std::pair<std::string, Tensor<float>>>& table) {
  if (refs.size() != table.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].first != table[i].first)
      throw std::runtime_error("checkpoint: tensor name mismatch: " + refs[i].first + " vs " +
                               table[i].first);
    if (refs[i].second->shape() != table[i].second.shape())
      throw std::runtime_error("checkpoint: tensor shape mismatch for " + refs[i].first);
    *refs[i].second = table[i].second;
  }
}

}  // namespace detail

// A checkpoint rehydrated for inference: parameters plus an owned copy of
// whichever emission-support definition the model was trained with.
struct LoadedModel {
  ModelConfig config;
  AnyParams<float> model;
  bool has_partition = false;
  BlockPartition partition;
  EmissionSupport uniform;

  SupportSpec support() const {
    SupportSpec s;
    if (has_partition)
      s.partition = &partition;
    else
      s.uniform = &uniform;
    return s;
  }
};

inline LoadedModel model_from_checkpoint(const Checkpoint& ck) {
  LoadedModel lm;
  lm.config = ck.model;
  if (ck.has_partition) {
    lm.has_partition = true;
    lm.partition = ck.partition;
  } else {
    lm.uniform = build_uniform_support(static_cast<std::int32_t>(ck.model.n_states),
                                       static_cast<std::int32_t>(ck.model.vocab),
                                       ck.uniform_states_per_word, ck.uniform_seed);
  }
  lm.model = init_any_params<float>(ck.model, lm.has_partition ? &lm.partition : nullptr, 0);
  detail::assign_named_tensors(lm.model.param_refs(), ck.tensors);
  return lm;
}

inline Vocab vocab_from_checkpoint(const Checkpoint& ck) {
  Vocab v;
  v.tokens = ck.vocab_tokens;
  for (std::size_t i = 0; i < v.tokens.size(); ++i)
    v.index.emplace(v.tokens[i], static_cast<std::int32_t>(i));
  auto unk = v.index.find(kUnkToken);
  auto eos = v.index.find(kEosToken);
  if (unk == v.index.end() || eos == v.index.end())
    throw std::runtime_error("checkpoint: vocab is missing " + std::string(kUnkToken) + " or " +
                             std::string(kEosToken));
  v.unk_id = unk->second;
  v.eos_id = eos->second;
  return v;
}

// Installs checkpoint state into a freshly constructed trainer. The trainer
// must have been built with the same configuration and corpus.
inline void restore_trainer(Trainer<float>& tr, const Checkpoint& ck) {
  detail::assign_named_tensors(tr.model().param_refs(), ck.tensors);
  if (ck.has_optimizer) {
    tr.optimizer().step = ck.optimizer_step;
    tr.optimizer().m.clear();
    tr.optimizer().v.clear();
    for (const auto& [name, t] : ck.optimizer_m) tr.optimizer().m[name] = t;
    for (const auto& [name, t] : ck.optimizer_v) tr.optimizer().v[name] = t;
  }
  if (ck.has_progress) {
    tr.progress() = ck.progress;
    auto& carries = tr.carries();
    if (carries.size() != ck.carries.size())
      throw std::runtime_error("checkpoint: carry count mismatch");
    for (std::size_t i = 0; i < carries.size(); ++i) {
      if (i < ck.carry_present.size() && ck.carry_present[i])
        carries[i] = ck.carries[i];
      else
        carries[i].clear();
    }
  }
}

}  // namespace vlhmm
