#pragma once

// Flat key=value run configuration. Files hold one pair per line; '#' starts
// a comment; later assignments win, so command-line overrides are applied by
// re-setting keys. Every run echoes its fully resolved configuration so the
// stored artifact, not the invocation, is the record of what ran.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vlhmm/trainer.hpp"

namespace vlhmm {

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace detail

inline ConfigMap parse_config_text(const std::string& text) {
  ConfigMap map;
  std::istringstream in(text);
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
    map[key] = value;
  }
  return map;
}

inline ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

inline std::string config_echo(const ConfigMap& map) {
  std::ostringstream out;
  for (const auto& [k, v] : map) out << k << '=' << v << '\n';
  return out.str();
}

inline std::int64_t config_i64(const ConfigMap& map, const std::string& key, std::int64_t fallback) {
  auto it = map.find(key);
  if (it == map.end()) return fallback;
  std::size_t pos = 0;
  const std::int64_t v = std::stoll(it->second, &pos);
  if (pos != it->second.size())
    throw std::runtime_error("config: bad integer for " + key + ": " + it->second);
  return v;
}

inline std::uint64_t config_u64(const ConfigMap& map, const std::string& key,
                                std::uint64_t fallback) {
  auto it = map.find(key);
  if (it == map.end()) return fallback;
  std::size_t pos = 0;
  const std::uint64_t v = std::stoull(it->second, &pos);
  if (pos != it->second.size())
    throw std::runtime_error("config: bad integer for " + key + ": " + it->second);
  return v;
}

inline double config_f64(const ConfigMap& map, const std::string& key, double fallback) {
  auto it = map.find(key);
  if (it == map.end()) return fallback;
  std::size_t pos = 0;
  const double v = std::stod(it->second, &pos);
  if (pos != it->second.size())
    throw std::runtime_error("config: bad number for " + key + ": " + it->second);
  return v;
}

inline std::string config_str(const ConfigMap& map, const std::string& key,
                              const std::string& fallback) {
  auto it = map.find(key);
  return it == map.end() ? fallback : it->second;
}

inline ConfigMap train_config_to_map(const TrainConfig& c) {
  ConfigMap m;
  auto num = [](auto v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  m["states"] = num(c.n_states);
  m["blocks"] = num(c.n_blocks);
  m["hidden"] = num(c.hidden);
  m["dropout"] = num(c.dropout);
  m["batch_size"] = num(c.batch_size);
  m["segment_len"] = num(c.segment_len);
  m["lr"] = num(c.lr);
  m["weight_decay"] = num(c.weight_decay);
  m["beta1"] = num(c.beta1);
  m["beta2"] = num(c.beta2);
  m["adam_eps"] = num(c.adam_eps);
  m["clip_norm"] = num(c.clip_norm);
  m["epochs"] = num(c.epochs);
  m["eval_checks_per_epoch"] = num(c.eval_checks_per_epoch);
  m["decay_patience"] = num(c.decay_patience);
  m["decay_factor"] = num(c.decay_factor);
  m["seed"] = num(c.seed);
  m["variant"] = variant_name(c.variant);
  m["support"] = support_source_name(c.support_source);
  m["uniform_support_n"] = num(c.uniform_support_n);
  m["uniform_support_seed"] = num(c.uniform_support_seed);
  return m;
}

inline TrainConfig train_config_from_map(const ConfigMap& m) {
  const TrainConfig d;
  TrainConfig c;
  c.n_states = config_i64(m, "states", d.n_states);
  c.n_blocks = static_cast<std::int32_t>(config_i64(m, "blocks", d.n_blocks));
  c.hidden = config_i64(m, "hidden", d.hidden);
  c.dropout = config_f64(m, "dropout", d.dropout);
  c.batch_size = static_cast<std::int32_t>(config_i64(m, "batch_size", d.batch_size));
  c.segment_len = static_cast<std::int32_t>(config_i64(m, "segment_len", d.segment_len));
  c.lr = config_f64(m, "lr", d.lr);
  c.weight_decay = config_f64(m, "weight_decay", d.weight_decay);
  c.beta1 = config_f64(m, "beta1", d.beta1);
  c.beta2 = config_f64(m, "beta2", d.beta2);
  c.adam_eps = config_f64(m, "adam_eps", d.adam_eps);
  c.clip_norm = config_f64(m, "clip_norm", d.clip_norm);
  c.epochs = static_cast<std::int32_t>(config_i64(m, "epochs", d.epochs));
  c.eval_checks_per_epoch =
      static_cast<std::int32_t>(config_i64(m, "eval_checks_per_epoch", d.eval_checks_per_epoch));
  c.decay_patience = static_cast<std::int32_t>(config_i64(m, "decay_patience", d.decay_patience));
  c.decay_factor = config_f64(m, "decay_factor", d.decay_factor);
  c.seed = config_u64(m, "seed", d.seed);
  c.variant = variant_from_name(config_str(m, "variant", variant_name(d.variant)));
  c.support_source =
      support_source_from_name(config_str(m, "support", support_source_name(d.support_source)));
  c.uniform_support_n =
      static_cast<std::int32_t>(config_i64(m, "uniform_support_n", d.uniform_support_n));
  c.uniform_support_seed = config_u64(m, "uniform_support_seed", d.uniform_support_seed);
  return c;
}

}  // namespace vlhmm
