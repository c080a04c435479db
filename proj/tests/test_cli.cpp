#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "cli.hpp"

#include "archdsl/compiler.hpp"
#include "archdsl/orchestrator.hpp"

using namespace archdsl;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("archdsl_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

RunConfig tiny_run() {
  RunConfig c;
  c.task.kind = TaskKind::copy_memory;
  c.task.vocab_size = 4;
  c.task.seq_len = 10;
  c.task.delay = 2;
  c.task.train_sequences = 64;
  c.task.valid_sequences = 16;
  c.task.test_sequences = 16;
  c.train.hidden = 8;
  c.train.layers = 1;
  c.train.epochs = 2;
  c.train.optimizer = OptimizerConfig{};
  c.train.optimizer.kind = OptimizerConfig::Kind::adam;
  c.train.optimizer.learning_rate = 0.02;
  c.train.optimizer.clip_norm = 5.0;
  c.search.candidates_per_step = 30;
  c.search.k_top = 2;
  c.search.k_sampled = 1;
  c.search.steps = 2;
  c.search.ct_enable_after = 1000;
  c.ranker.hidden = 8;
  c.ranker.epochs = 2;
  c.policy.hidden = 8;
  c.search.pretrain_episodes = 0;
  c.search.max_evaluations = 6;
  return c;
}

std::string write_config(const TempDir& dir, const RunConfig& c, const std::string& name = "run.json") {
  const std::string path = dir.file(name);
  std::ofstream(path) << run_config_to_json(c).dump(2);
  return path;
}

}  // namespace

TEST_CASE("parse --json reports the analysis") {
  const auto r = cli({"parse", "Tanh(Add(MM(x_t),MM(h_tm1)))", "--json"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["node_count"] == 4);
  CHECK(j["height"] == 2);
  CHECK(j["canonical"] == render(canonicalize(parse("Tanh(Add(MM(x_t),MM(h_tm1)))"))));
  CHECK(j["id"] == arch_id(parse("Tanh(Add(MM(x_t),MM(h_tm1)))")));

  const auto c = cli({"parse", "Add(h_tm1,x_t)", "--canonical"});
  CHECK(c.out == render(canonicalize(parse("Add(h_tm1,x_t)"))) + "\n");
}

TEST_CASE("cells show matches the builtin in canonical form") {
  for (const auto& name : builtin_names()) {
    const auto r = cli({"cells", "show", name});
    REQUIRE(r.code == 0);
    CHECK(r.out == render(canonicalize(builtin(name))) + "\n");
    CHECK(parse(r.out.substr(0, r.out.size() - 1)) == canonicalize(builtin(name)));
  }
  const auto list = cli({"cells", "list"});
  CHECK(list.out.find("gru\n") != std::string::npos);
  CHECK(cli({"cells", "show", "nope"}).code == 1);
}

TEST_CASE("domain errors exit 1 with a stable prefix, usage errors exit 2") {
  const auto bad = cli({"parse", "Tanh("});
  CHECK(bad.code == 1);
  CHECK(bad.err.rfind("error E_DSL: ", 0) == 0);
  CHECK(bad.err.find("5") != std::string::npos);

  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"parse", "x_t", "--frob"}).code == 2);
  CHECK(cli({"compile", "Tanh(MM(x_t))", "--hidden", "4"}).code == 2);
  CHECK(cli({"search", "sideways", "--config", "a", "--out", "b"}).code == 2);
  CHECK(cli({"cells", "show"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("compile --check-grad on the GRU") {
  const std::string gru = render(builtin("gru"));
  const auto r = cli({"compile", gru, "--hidden", "4", "--input", "3", "--check-grad", "--json"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["max_rel_error"].get<double>() < 1e-4);
  CHECK(j["grad_ok"] == true);

  const auto direct = compile(builtin("gru"), 3, 4);
  CHECK(j["fused_linear"] == direct.count(InstrKind::fused_linear));
  const auto unfused = json::parse(cli({"compile", gru, "--hidden", "4", "--input", "3", "--no-fuse", "--json"}).out);
  CHECK(unfused["fused_linear"] == 0);
  CHECK(unfused["linear"] == compile(builtin("gru"), 3, 4, {.fuse = false}).count(InstrKind::linear));
}

TEST_CASE("eval with no time budget records a timeout") {
  TempDir dir;
  RunConfig c = tiny_run();
  c.train.wall_clock_budget = 0.0;
  const auto cfg = write_config(dir, c);
  const auto r = cli({"eval", render(builtin("tanh_rnn")), "--task", "copy_memory", "--config", cfg, "--out",
                      dir.file("rec.jsonl"), "--json"});
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["status"] == "timeout");
  RecordStore store = RecordStore::load(dir.file("rec.jsonl"));
  REQUIRE(store.size() == 1);
  CHECK(to_string(store.records()[0].status) == "timeout");

  CHECK(cli({"eval", "x_t", "--task", "copy_memory", "--config", dir.file("missing.json"), "--out", dir.file("r2")})
            .code == 1);
}

TEST_CASE("search random is byte-replayable and matches the direct call") {
  TempDir dir;
  const auto cfg = write_config(dir, tiny_run());
  REQUIRE(cli({"search", "random", "--config", cfg, "--out", dir.file("a.jsonl"), "--seed", "7"}).code == 0);
  REQUIRE(cli({"search", "random", "--config", cfg, "--out", dir.file("b.jsonl"), "--seed", "7"}).code == 0);
  CHECK(slurp(dir.file("a.jsonl")) == slurp(dir.file("b.jsonl")));

  RunConfig c = tiny_run();
  c.search.seed = 7;
  RankerConfig rc = c.ranker;
  rc.seed = 7;
  Ranker ranker(rc);
  RecordStore store(dir.file("direct.jsonl"));
  run_random_search(c, make_task(c.task), store, ranker);
  CHECK(slurp(dir.file("a.jsonl")) == slurp(dir.file("direct.jsonl")));

  // ARCHDSL_SEED stands in for --seed.
  ::setenv("ARCHDSL_SEED", "7", 1);
  REQUIRE(cli({"search", "random", "--config", cfg, "--out", dir.file("env.jsonl")}).code == 0);
  ::unsetenv("ARCHDSL_SEED");
  CHECK(slurp(dir.file("a.jsonl")) == slurp(dir.file("env.jsonl")));
}

TEST_CASE("search rl writes records and a summary") {
  TempDir dir;
  const auto cfg = write_config(dir, tiny_run());
  const auto r = cli({"search", "rl", "--config", cfg, "--out", dir.file("rl.jsonl"), "--json"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["evaluations"].get<long>() >= 6);
  CHECK(j["episode_rewards"].size() >= 1);
  CHECK(RecordStore::load(dir.file("rl.jsonl")).size() == j["records"].get<std::size_t>());
}

TEST_CASE("rank fit and score, reports") {
  TempDir dir;
  const auto cfg = write_config(dir, tiny_run());
  const std::string recs = dir.file("r.jsonl");
  REQUIRE(cli({"search", "random", "--config", cfg, "--out", recs}).code == 0);

  const auto fit = cli({"rank", "fit", "--records", recs, "--config", cfg, "--json"});
  REQUIRE(fit.code == 0);
  const std::string model = json::parse(fit.out)["model"];
  CHECK(fs::exists(model));

  const std::string dsl = "Tanh(Add(MM(x_t),MM(h_tm1)))";
  const auto sc = cli({"rank", "score", "--records", recs, "--dsl", dsl, "--json"});
  REQUIRE(sc.code == 0);
  const auto rows = json::parse(sc.out);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0]["score"].get<double>() == doctest::Approx(Ranker::load(model).score(parse(dsl))).epsilon(1e-12));

  const auto all = json::parse(cli({"rank", "score", "--records", recs, "--json"}).out);
  CHECK(all.size() == RecordStore::load(recs).size());

  CHECK(cli({"report", "ops-over-time", "--records", recs, "--out", dir.file("ops.csv")}).code == 0);
  CHECK(cli({"report", "search-curve", "--records", recs, "--out", dir.file("curve.csv")}).code == 0);
  CHECK(cli({"report", "hidden-dump", "--records", recs, "--out", dir.file("h.csv"), "--seq-len", "12"}).code == 0);
  std::ostringstream direct;
  report_search_curve(RecordStore::load(recs).records(), direct);
  CHECK(slurp(dir.file("curve.csv")) == direct.str());
  std::istringstream h(slurp(dir.file("h.csv")));
  std::string line;
  int rows_h = -1;
  while (std::getline(h, line)) ++rows_h;
  CHECK(rows_h == 12);

  CHECK(cli({"report", "search-curve", "--records", dir.file("none.jsonl"), "--out", dir.file("x.csv")}).code == 1);
}
