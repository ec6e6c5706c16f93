// End-to-end subprocess tests of the command-line tool. Every case talks to
// the real binary (path injected as VLHMM_CLI_PATH) through a scratch
// directory under the system temp dir.

#include <catch2/catch_amalgamated.hpp>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vlhmm/params.hpp"

using nlohmann::json;
using Catch::Matchers::ContainsSubstring;

namespace {

std::string work_path(const std::string& name) {
  static const std::filesystem::path dir = [] {
    auto d = std::filesystem::temp_directory_path() / "vlhmm_cli_work";
    std::filesystem::create_directories(d);
    return d;
  }();
  return (dir / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct CliResult {
  int code = -1;
  std::string out, err;
};

CliResult run_cli(const std::string& args, const std::string& tag) {
  const std::string out_path = work_path(tag + ".out");
  const std::string err_path = work_path(tag + ".err");
  const std::string cmd =
      std::string(VLHMM_CLI_PATH) + " " + args + " >" + out_path + " 2>" + err_path;
  const int rc = std::system(cmd.c_str());
  CliResult r;
  r.code = rc == -1 ? -1 : WEXITSTATUS(rc);
  r.out = slurp(out_path);
  r.err = slurp(err_path);
  return r;
}

// Two disjoint four-word topics on alternating lines: enough structure for
// the clusterer to find and for a tiny model to learn.
void write_topic_corpus(const std::string& path, int lines, std::uint64_t seed) {
  static const std::vector<std::string> topic_a{"red", "green", "blue", "cyan"};
  static const std::vector<std::string> topic_b{"one", "two", "three", "four"};
  std::mt19937_64 rng(seed);
  std::ofstream out(path);
  for (int i = 0; i < lines; ++i) {
    const auto& topic = i % 2 == 0 ? topic_a : topic_b;
    for (int w = 0; w < 8; ++w) {
      if (w > 0) out << ' ';
      out << topic[rng() % topic.size()];
    }
    out << '\n';
  }
}

struct Pipeline {
  std::string train_txt, valid_txt, clusters, ckpt, metrics;
  CliResult cluster_res, train_res;
};

const Pipeline& shared_pipeline() {
  static const Pipeline p = [] {
    Pipeline pl;
    pl.train_txt = work_path("train.txt");
    pl.valid_txt = work_path("valid.txt");
    pl.clusters = work_path("clusters.tsv");
    pl.ckpt = work_path("model.ck");
    pl.metrics = pl.ckpt + ".metrics.jsonl";
    write_topic_corpus(pl.train_txt, 60, 1);
    write_topic_corpus(pl.valid_txt, 20, 2);
    pl.cluster_res = run_cli("cluster --train " + pl.train_txt + " --M 2 --out " + pl.clusters,
                             "shared_cluster");
    pl.train_res = run_cli("train --train " + pl.train_txt + " --valid " + pl.valid_txt +
                               " --clusters " + pl.clusters + " --checkpoint " + pl.ckpt +
                               " --states 4 --blocks 2 --hidden 8 --epochs 1 --batch-size 2"
                               " --segment-len 8 --lr 0.05 --dropout 0.5 --seed 3",
                           "shared_train");
    return pl;
  }();
  return p;
}

std::vector<json> parse_jsonl(const std::string& path) {
  std::ifstream in(path);
  std::vector<json> rows;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(json::parse(line));
  return rows;
}

}  // namespace

TEST_CASE("cluster writes a deterministic two-block partition") {
  const Pipeline& p = shared_pipeline();
  REQUIRE(p.cluster_res.code == 0);
  const std::string again = work_path("clusters_again.tsv");
  CliResult r = run_cli("cluster --train " + p.train_txt + " --M 2 --out " + again +
                            " --vocab-out " + work_path("vocab.txt"),
                        "cluster_again");
  REQUIRE(r.code == 0);
  REQUIRE(slurp(p.clusters) == slurp(again));
  REQUIRE_FALSE(slurp(work_path("vocab.txt")).empty());

  std::istringstream lines(slurp(p.clusters));
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    REQUIRE(line.find('\t') != std::string::npos);
    ++count;
  }
  REQUIRE(count == 10);  // 8 words + <unk> + <eos>
}

TEST_CASE("cluster rejects more blocks than word types") {
  const Pipeline& p = shared_pipeline();
  CliResult r = run_cli("cluster --train " + p.train_txt + " --M 50 --out " +
                            work_path("clusters_bad.tsv"),
                        "cluster_bad");
  REQUIRE(r.code != 0);
  REQUIRE_THAT(r.err, ContainsSubstring("error"));
}

TEST_CASE("train writes both checkpoints and a parseable metrics log") {
  const Pipeline& p = shared_pipeline();
  INFO(p.train_res.err);
  REQUIRE(p.train_res.code == 0);
  REQUIRE(std::filesystem::exists(p.ckpt));
  REQUIRE(std::filesystem::exists(p.ckpt + ".latest"));
  REQUIRE(std::filesystem::exists(p.metrics));

  auto rows = parse_jsonl(p.metrics);
  REQUIRE(rows.size() == 4);  // one epoch, four checks
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (const char* key :
         {"check", "epoch_fraction", "lr", "train_ppl", "valid_ppl", "ms_per_batch"})
      REQUIRE(rows[i].contains(key));
    REQUIRE(rows[i]["check"].get<int>() == static_cast<int>(i) + 1);
    REQUIRE(rows[i]["valid_ppl"].get<double>() > 0);
  }
}

TEST_CASE("eval reports a json perplexity and respects explicit geometry") {
  const Pipeline& p = shared_pipeline();
  CliResult r = run_cli("eval --checkpoint " + p.ckpt + " --data " + p.valid_txt, "eval_default");
  INFO(r.err);
  REQUIRE(r.code == 0);
  json rep = json::parse(r.out);
  REQUIRE(rep["ppl"].get<double>() > 0);
  REQUIRE(rep["token_count"].get<std::int64_t>() == 20 * 9);  // 8 words + eos per line
  REQUIRE(rep["config"].contains("states"));

  CliResult r2 = run_cli("eval --checkpoint " + p.ckpt + " --data " + p.valid_txt, "eval_repeat");
  REQUIRE(json::parse(r2.out)["ppl"].get<double>() == rep["ppl"].get<double>());

  CliResult r3 = run_cli("eval --checkpoint " + p.ckpt + " --data " + p.valid_txt +
                             " --batch-size 1 --segment-len 4",
                         "eval_geometry");
  REQUIRE(r3.code == 0);
  REQUIRE(json::parse(r3.out)["ppl"].get<double>() > 0);
}

TEST_CASE("sample generates deterministic text for a fixed seed") {
  const Pipeline& p = shared_pipeline();
  CliResult a = run_cli("sample --checkpoint " + p.ckpt + " --length 64 --seed 9", "sample_a");
  CliResult b = run_cli("sample --checkpoint " + p.ckpt + " --length 64 --seed 9", "sample_b");
  CliResult c = run_cli("sample --checkpoint " + p.ckpt + " --length 64 --seed 10", "sample_c");
  REQUIRE(a.code == 0);
  REQUIRE_FALSE(a.out.empty());
  REQUIRE(a.out == b.out);
  REQUIRE(a.out != c.out);
  // sampled words must come from the corpus vocabulary
  std::istringstream words(a.out);
  std::string w;
  while (words >> w) {
    static const std::vector<std::string> known{"red",  "green", "blue",  "cyan", "one",
                                                "two",  "three", "four",  "<unk>"};
    REQUIRE(std::find(known.begin(), known.end(), w) != known.end());
  }
}

TEST_CASE("the scalar variant reports its dense parameter count") {
  const Pipeline& p = shared_pipeline();
  CliResult r = run_cli("train --train " + p.train_txt + " --valid " + p.valid_txt +
                            " --clusters " + p.clusters + " --checkpoint " +
                            work_path("scalar.ck") +
                            " --variant scalar --states 4 --blocks 2 --epochs 1 --batch-size 2"
                            " --segment-len 8 --lr 0.05 --dropout 0 --seed 4",
                        "scalar_train");
  INFO(r.err);
  REQUIRE(r.code == 0);

  vlhmm::ModelConfig mc;
  mc.n_states = 4;
  mc.n_blocks = 2;
  mc.vocab = 10;
  mc.variant = vlhmm::Variant::Scalar;
  const std::string expected = "parameters: " + std::to_string(vlhmm::param_count(mc)) + " (scalar)";
  REQUIRE_THAT(r.err, ContainsSubstring(expected));
}

TEST_CASE("gradcheck gates on its tolerance") {
  CliResult pass = run_cli("gradcheck", "gradcheck_pass");
  INFO(pass.err);
  REQUIRE(pass.code == 0);
  json rep = json::parse(pass.out);
  REQUIRE(rep["pass"].get<bool>());
  REQUIRE(rep["paths"].size() == 11);
  REQUIRE(rep["max_rel_err"].get<double>() < 1e-4);

  CliResult fail = run_cli("gradcheck --tolerance 1e-12", "gradcheck_fail");
  REQUIRE(fail.code == 1);
  REQUIRE_FALSE(json::parse(fail.out)["pass"].get<bool>());
}

TEST_CASE("bench emits one csv row per grid cell plus plot data") {
  CliResult r = run_cli(
      "bench --states 64 --blocks 8,4 --lambda 0 --variant scalar --batch-size 2"
      " --segment-len 8 --reps 1 --plot " +
          work_path("plots"),
      "bench");
  INFO(r.err);
  REQUIRE(r.code == 0);
  std::istringstream lines(r.out);
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(lines, line)) rows.push_back(line);
  REQUIRE(rows.size() == 3);
  REQUIRE_THAT(rows[0], ContainsSubstring("forward_us_per_token"));
  REQUIRE_THAT(rows[1], ContainsSubstring("64,8,8,"));
  REQUIRE_THAT(rows[2], ContainsSubstring("64,4,16,"));
  REQUIRE(std::filesystem::exists(work_path("plots.k_time.dat")));
}

TEST_CASE("resuming reproduces the uninterrupted metrics") {
  const Pipeline& p = shared_pipeline();
  const std::string common = "train --train " + p.train_txt + " --valid " + p.valid_txt +
                             " --clusters " + p.clusters +
                             " --states 4 --blocks 2 --hidden 8 --batch-size 2 --segment-len 8"
                             " --lr 0.05 --dropout 0.5 --seed 6";

  CliResult full = run_cli(common + " --epochs 2 --checkpoint " + work_path("full.ck") +
                               " --metrics " + work_path("full.jsonl"),
                           "resume_full");
  INFO(full.err);
  REQUIRE(full.code == 0);

  CliResult half = run_cli(common + " --epochs 1 --checkpoint " + work_path("half.ck") +
                               " --metrics " + work_path("half.jsonl"),
                           "resume_half");
  REQUIRE(half.code == 0);

  CliResult rest = run_cli(common + " --epochs 2 --checkpoint " + work_path("rest.ck") +
                               " --metrics " + work_path("rest.jsonl") + " --resume " +
                               work_path("half.ck.latest"),
                           "resume_rest");
  INFO(rest.err);
  REQUIRE(rest.code == 0);

  auto full_rows = parse_jsonl(work_path("full.jsonl"));
  auto rest_rows = parse_jsonl(work_path("rest.jsonl"));
  REQUIRE(full_rows.size() == 8);
  REQUIRE(rest_rows.size() == 4);
  for (std::size_t i = 0; i < rest_rows.size(); ++i) {
    const json& a = rest_rows[i];
    const json& b = full_rows[full_rows.size() - rest_rows.size() + i];
    REQUIRE(a["check"] == b["check"]);
    REQUIRE(a["epoch_fraction"] == b["epoch_fraction"]);
    REQUIRE(a["lr"] == b["lr"]);
    REQUIRE(a["train_ppl"] == b["train_ppl"]);
    REQUIRE(a["valid_ppl"] == b["valid_ppl"]);
  }
}

TEST_CASE("misconfigured invocations exit with errors") {
  const Pipeline& p = shared_pipeline();
  CliResult no_clusters = run_cli("train --train " + p.train_txt + " --valid " + p.valid_txt +
                                      " --checkpoint " + work_path("t.ck"),
                                  "err_no_clusters");
  REQUIRE(no_clusters.code != 0);
  REQUIRE_THAT(no_clusters.err, ContainsSubstring("clusters"));

  CliResult mismatch = run_cli("train --train " + p.train_txt + " --valid " + p.valid_txt +
                                   " --clusters " + p.clusters + " --checkpoint " +
                                   work_path("t.ck") + " --states 8 --blocks 4",
                               "err_blocks");
  REQUIRE(mismatch.code != 0);
  REQUIRE_THAT(mismatch.err, ContainsSubstring("blocks"));

  CliResult missing = run_cli("eval --checkpoint " + work_path("nonexistent.ck") + " --data " +
                                  p.valid_txt,
                              "err_missing_ckpt");
  REQUIRE(missing.code != 0);

  CliResult unknown = run_cli("frobnicate", "err_unknown");
  REQUIRE(unknown.code != 0);
}
