#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "archdsl/orchestrator.hpp"

using namespace archdsl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("archdsl_orch_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

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
  c.search.candidates_per_step = 40;
  c.search.k_top = 3;
  c.search.k_sampled = 1;
  c.search.steps = 2;
  c.search.ct_enable_after = 1000;
  c.ranker.hidden = 8;
  c.ranker.epochs = 2;
  c.policy.hidden = 8;
  c.search.pretrain_episodes = 0;
  c.search.max_evaluations = 10;
  return c;
}

ArchPerfRecord fake_record(const std::string& dsl, int batch, std::optional<double> metric,
                           RecordStatus status = RecordStatus::ok) {
  const Architecture a = canonicalize(parse(dsl));
  ArchPerfRecord r;
  r.id = arch_id(a);
  r.dsl = render(a.root);
  r.ct_node = a.ct_node;
  r.task = "test";
  r.status = status;
  r.valid_metric = metric;
  r.batch_index = batch;
  r.timestamp = "1970-01-01T00:00:00Z";
  return r;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::stringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("store append, reload and duplicate rejection") {
  TempDir dir;
  const auto path = dir.file("store.jsonl");
  const auto rec = fake_record("Tanh(Add(MM(x_t),MM(h_tm1)))", 0, 1.25);
  {
    RecordStore store(path);
    CHECK(store.size() == 0);
    CHECK(store.append(rec));
    CHECK_FALSE(store.append(rec));
    CHECK(store.rejected() == 1);
  }
  const RecordStore back = RecordStore::load(path);
  REQUIRE(back.size() == 1);
  nlohmann::json a = rec, b = back.records()[0];
  CHECK(a == b);
  CHECK(back.contains(rec.id));

  std::ofstream(dir.file("empty.jsonl")).close();
  CHECK(RecordStore::load(dir.file("empty.jsonl")).size() == 0);

  {
    std::ofstream bad(dir.file("bad.jsonl"));
    bad << nlohmann::json(rec).dump() << "\n{not json\n";
  }
  try {
    RecordStore::load(dir.file("bad.jsonl"));
    FAIL("malformed store loaded");
  } catch (const StoreError& e) {
    CHECK(std::string(e.what()).find("bad.jsonl:2") != std::string::npos);
  }
  CHECK_THROWS_AS(RecordStore::load(dir.file("missing.jsonl")), StoreError);
}

TEST_CASE("concurrent appenders produce whole lines") {
  TempDir dir;
  const auto path = dir.file("store.jsonl");
  RecordStore store(path);
  auto writer = [&](int offset) {
    for (int i = 0; i < 1000; ++i) {
      ArchPerfRecord r = fake_record("Tanh(MM(x_t))", i, 1.0);
      r.id = "id" + std::to_string(offset + i);
      store.append(r);
    }
  };
  std::thread t1(writer, 0), t2(writer, 1000);
  t1.join();
  t2.join();
  std::ifstream in(path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    CHECK_NOTHROW(nlohmann::json::parse(line).get<ArchPerfRecord>());
    ++n;
  }
  CHECK(n == 2000);
  CHECK(RecordStore::load(path).size() == 2000);
}

TEST_CASE("config round trip and rejection") {
  RunConfig c = tiny_run();
  c.gen.weights[OpKind::Gate3] = 0.5;
  c.train.optimizer.clip_value = 0.1;
  const auto j = run_config_to_json(c);
  const RunConfig back = run_config_from_json(j);
  CHECK(run_config_to_json(back) == j);
  CHECK(back.gen.weights.at(OpKind::Gate3) == 0.5);
  CHECK(back.task.kind == TaskKind::copy_memory);

  CHECK(run_config_from_json(nlohmann::json::object()).search.k_top == 8);
  CHECK_THROWS(run_config_from_json(nlohmann::json{{"search", {{"k_topp", 3}}}}));
  CHECK_THROWS(run_config_from_json(nlohmann::json{{"serch", nlohmann::json::object()}}));
  CHECK_THROWS(run_config_from_json(nlohmann::json{{"search", {{"k_top", 3000}, {"candidates_per_step", 10}}}}));
  CHECK_THROWS(run_config_from_json(nlohmann::json{{"search", {{"mode", "annealing"}}}}));
}

TEST_CASE("batch assembly follows the composition rule") {
  BatchAssembler b(3, 1, 4, 16);
  const std::vector<bool> results{true, false, false, true, true};
  std::optional<std::vector<int>> batch;
  for (int i = 0; i < 5; ++i) {
    b.add(i, results[static_cast<std::size_t>(i)]);
    const auto got = b.take();
    if (i < 4) {
      CHECK_FALSE(got.has_value());
    } else {
      batch = got;
    }
  }
  REQUIRE(batch.has_value());
  CHECK(*batch == std::vector<int>{0, 1, 3, 4});
  CHECK(b.pending() == 1);

  BatchAssembler starving(3, 1, 4, 5);
  for (int i = 0; i < 4; ++i) {
    starving.add(i, false);
    CHECK_FALSE(starving.take().has_value());
  }
  starving.add(4, false);
  bool relaxed = false;
  const auto forced = starving.take(&relaxed);
  REQUIRE(forced.has_value());
  CHECK(relaxed);
  CHECK(forced->size() == 5);
}

TEST_CASE("reward uses the best c_t placement") {
  const Architecture a = parse("Mult(Sigmoid(MM(x_t)),Tanh(Add(MM(h_tm1),Mult(MM(c_tm1),MM(x_t)))))");
  const auto taps = enumerate_ct_taps(a);
  REQUIRE(taps.size() == 3);
  RecordStore store;
  const std::vector<double> losses{1.4, 0.9, 1.1};
  for (std::size_t i = 0; i < 3; ++i) {
    const Architecture canon = canonicalize(taps[i]);
    ArchPerfRecord r = fake_record(render(canon), 0, losses[i]);
    store.append(r);
  }
  const auto best = best_variant_loss({taps[0], taps[1], taps[2]}, store);
  REQUIRE(best.has_value());
  CHECK(*best == 0.9);
  CHECK_FALSE(best_variant_loss({parse("Tanh(MM(x_t))")}, store).has_value());
}

TEST_CASE("evaluate_all appends in input order and conserves evaluations") {
  const RunConfig c = tiny_run();
  const Task task = make_task(c.task);
  RecordStore store;
  const std::vector<Architecture> archs{builtin("tanh_rnn"), builtin("gru"), parse("Tanh(Div(h_tm1,Sub(h_tm1,h_tm1)))")};
  const auto recs = evaluate_all(archs, task, c.train, EvalOptions{RecordSource::random, 3, true, 0}, 2, store);
  REQUIRE(store.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(store.records()[i].id == recs[i].id);
  CHECK(store.records()[0].id == arch_id(canonicalize(builtin("tanh_rnn"))));
}

TEST_CASE("random search: monotone best, gating, replay and resume") {
  TempDir dir;
  RunConfig c = tiny_run();
  const Task task = make_task(c.task);
  auto run = [&](const std::string& path) {
    RecordStore store(path);
    Ranker ranker(c.ranker);
    return run_random_search(c, task, store, ranker);
  };
  const auto r1 = run(dir.file("a.jsonl"));
  const auto r2 = run(dir.file("b.jsonl"));
  CHECK(slurp(dir.file("a.jsonl")) == slurp(dir.file("b.jsonl")));
  REQUIRE(r1.baseline.has_value());
  CHECK(r1.evaluations == 1 + 2 * 4);
  const RecordStore stored = RecordStore::load(dir.file("a.jsonl"));
  CHECK(static_cast<long>(stored.size()) == r1.evaluations);
  for (const auto& r : stored.records()) CHECK_FALSE(r.ct_node.has_value());

  std::optional<double> prev;
  for (const auto& s : r1.steps) {
    if (prev && s.best_so_far) CHECK(*s.best_so_far <= *prev);
    if (s.best_so_far) prev = s.best_so_far;
  }

  // Resuming on the same store never re-evaluates a stored id.
  RecordStore again(dir.file("a.jsonl"));
  Ranker ranker(c.ranker);
  const auto r3 = run_random_search(c, task, again, ranker);
  CHECK(again.rejected() == 0);
  CHECK(static_cast<long>(again.size()) == r1.evaluations + r3.evaluations);
  CHECK(r3.evaluations == 2 * 4);
}

TEST_CASE("random search with c_t enabled and an empty step") {
  RunConfig c = tiny_run();
  c.search.ct_enable_after = 0;
  c.search.steps = 1;
  c.search.candidates_per_step = 60;
  c.search.k_top = 10;
  c.search.k_sampled = 0;
  c.gen.weights[OpKind::Cm1] = 3.0;
  const Task task = make_task(c.task);
  RecordStore store;
  Ranker ranker(c.ranker);
  run_random_search(c, task, store, ranker);
  int with_ct = 0;
  for (const auto& r : store.records()) with_ct += r.ct_node ? 1 : 0;
  CHECK(with_ct > 0);

  RunConfig empty = tiny_run();
  empty.gen.max_height = 0;
  empty.search.steps = 2;
  RecordStore s2;
  Ranker r2(empty.ranker);
  const auto res = run_random_search(empty, task, s2, r2);
  CHECK(res.steps.size() == 2);
  CHECK(res.steps[0].candidates == 0);
  CHECK(s2.size() == 1);
}

TEST_CASE("rl search dispatches, rewards and replays") {
  TempDir dir;
  RunConfig c = tiny_run();
  c.search.episode_log = dir.file("episodes.jsonl");
  const Task task = make_task(c.task);
  auto run = [&](const std::string& path) {
    RecordStore store(path);
    Policy policy(c.policy);
    auto res = run_rl_search(c, task, store, policy);
    CHECK(static_cast<long>(store.size()) == res.evaluations);
    return res;
  };
  const auto r1 = run(dir.file("a.jsonl"));
  const auto r2 = run(dir.file("b.jsonl"));
  CHECK(slurp(dir.file("a.jsonl")) == slurp(dir.file("b.jsonl")));
  CHECK(r1.episode_rewards == r2.episode_rewards);
  CHECK_FALSE(r1.episode_rewards.empty());
  const RecordStore stored = RecordStore::load(dir.file("a.jsonl"));
  int rl = 0;
  for (const auto& r : stored.records()) rl += r.source == RecordSource::rl ? 1 : 0;
  CHECK(rl >= c.search.max_evaluations);
  for (double v : r1.episode_rewards) CHECK(std::isfinite(v));
  std::ifstream log(c.search.episode_log);
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("actions"));
    ++lines;
  }
  CHECK(lines == static_cast<int>(r1.episode_rewards.size()));
}

TEST_CASE("rl search stops when no new architecture appears") {
  RunConfig c = tiny_run();
  c.policy.operators = {OpKind::Tanh};
  c.policy.sources = {OpKind::X, OpKind::Hm1};
  c.policy.max_height = 1;
  c.search.max_evaluations = 50;
  c.search.max_stalled_episodes = 30;
  c.search.reward_pilot = false;
  c.search.evaluate_baseline = false;
  const Task task = make_task(c.task);
  RecordStore store;
  Policy policy(c.policy);
  const auto res = run_rl_search(c, task, store, policy);
  CHECK(res.evaluations <= 2);
  REQUIRE_FALSE(res.notes.empty());
  CHECK(res.notes.back().find("without a new architecture") != std::string::npos);
}

TEST_CASE("ops-over-time rows") {
  std::vector<ArchPerfRecord> recs{fake_record("Tanh(MM(x_t))", 1, 1.0), fake_record("MM(Tanh(h_tm1))", 1, 1.2),
                                   fake_record("Tanh(Add(MM(x_t),MM(h_tm1)))", 2, 0.8)};
  std::stringstream out;
  report_ops_over_time(recs, out);
  const auto rows = csv_rows(out.str());
  REQUIRE(rows.size() == 3);
  const auto& header = rows[0];
  for (std::size_t r = 1; r < rows.size(); ++r) {
    double total = 0.0;
    for (std::size_t k = 1; k < rows[r].size(); ++k) {
      const double v = std::stod(rows[r][k]);
      total += v;
      if (rows[r][0] == "1") {
        const bool expected = header[k] == "MM" || header[k] == "Tanh";
        CHECK(v == (expected ? 0.5 : 0.0));
      }
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("search curve is monotone and hidden dump has one row per step") {
  std::vector<ArchPerfRecord> recs{fake_record("Tanh(MM(x_t))", 0, 1.0),
                                   fake_record("Tanh(MM(h_tm1))", 0, std::nullopt, RecordStatus::diverged),
                                   fake_record("Sigmoid(MM(x_t))", 1, 1.3), fake_record("ReLU(MM(x_t))", 1, 0.7)};
  std::stringstream out;
  report_search_curve(recs, out);
  const auto rows = csv_rows(out.str());
  REQUIRE(rows.size() == 5);
  CHECK(rows[0][5] == "best_so_far");
  double prev = INFINITY;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const double v = std::stod(rows[r][5]);
    CHECK(v <= prev);
    prev = v;
  }
  CHECK(std::stod(rows[4][5]) == 0.7);
  CHECK(std::stod(rows[3][6]) == doctest::Approx(1.0));

  std::stringstream dump;
  report_hidden_dump(builtin("gru"), 6, 3, 17, 4, dump);
  const auto d = csv_rows(dump.str());
  CHECK(d.size() == 18);
  CHECK(d[0].size() == 7);
}
