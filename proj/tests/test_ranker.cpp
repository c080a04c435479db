#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "archdsl/candidate_random.hpp"
#include "archdsl/optim.hpp"
#include "archdsl/ranker.hpp"

using namespace archdsl;

namespace {

RankerConfig small_config(std::uint64_t seed = 1) {
  RankerConfig c;
  c.hidden = 16;
  c.seed = seed;
  c.learning_rate = 5e-3;
  return c;
}

std::vector<Architecture> sample_cells(int n, std::uint64_t seed) {
  GenConfig g;
  g.seed = seed;
  return generate_batch(g, n).candidates;
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (static_cast<double>(i) + static_cast<double>(j)) / 2.0;
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / static_cast<double>(ra.size());
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / static_cast<double>(rb.size());
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

}  // namespace

TEST_CASE("unrolling the tanh-RNN") {
  const ArchNode u = unroll_once(builtin("tanh_rnn"));
  CHECK(render(u) == "Tanh(Add(MM(x_t),MM(Tanh(Add(MM(x_t),MM(h_tm2))))))");
  CHECK(operator_count(u) == 8);
  const auto plain = parse("Tanh(Add(MM(x_t),MM(x_tm1)))");
  CHECK(unroll_once(plain) == plain.root);
  CHECK_THROWS(unroll_once(parse("Tanh(Add(MM(x_t),c_tm1))")));
}

TEST_CASE("unroll counting law and leaf relabelling") {
  const auto cells = sample_cells(300, 3);
  for (const auto& a : cells) {
    const ArchNode u = unroll_once(a);
    std::function<int(const ArchNode&, OpKind)> count = [&](const ArchNode& n, OpKind k) {
      int c = n.op == k ? 1 : 0;
      for (const auto& ch : n.children) c += count(ch, k);
      return c;
    };
    const int n = operator_count(a.root);
    const int ct_size = a.ct_node ? operator_count(*node_at(a.root, *a.ct_node)) : 0;
    CHECK(operator_count(u) == n + count(a.root, OpKind::Hm1) * n + count(a.root, OpKind::Cm1) * ct_size);
    CHECK_FALSE(contains(u, OpKind::Hm1));
    CHECK_FALSE(contains(u, OpKind::Cm1));
    CHECK(contains(u, OpKind::Hm2) == contains(a.root, OpKind::Hm1));
  }
}

TEST_CASE("scores: finite, canonical-invariant, order-sensitive for Sub") {
  const Ranker r(small_config());
  CHECK(std::isfinite(r.score(builtin("gru"))));
  CHECK(r.score(parse("Tanh(Add(MM(x_t),MM(h_tm1)))")) == r.score(parse("Tanh(Add(MM(h_tm1),MM(x_t)))")));
  CHECK(r.score(parse("Tanh(Sub(MM(x_t),MM(h_tm1)))")) != r.score(parse("Tanh(Sub(MM(h_tm1),MM(x_t)))")));
  const auto cells = sample_cells(64, 4);
  CHECK(r.score_all(cells, true) == r.score_all(cells, false));
}

TEST_CASE("ranker loss gradients match finite differences") {
  auto cfg = small_config(2);
  cfg.hidden = 4;
  Ranker r(cfg);
  // Ten operators: Gate3, Tanh, Add, 2 MM, Sigmoid, Add, 2 MM, plus the Sub.
  RankerExample ex{parse("Gate3(Tanh(Add(MM(x_t),MM(h_tm1))),Sub(x_t,h_tm1),Sigmoid(Add(MM(h_tm1),MM(x_t))))"),
                   1.3, "g"};
  CHECK(operator_count(ex.arch.root) == 10);
  ParamStore store = r.params();
  const auto res = gradient_check(store, [&](ParamStore& s) { return r.batch_loss(s, {&ex}, nullptr); });
  CHECK(res.finite);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("a single record is memorized") {
  std::vector<RankerExample> one{{builtin("gru"), 2.5, "gru"}};
  auto cfg = small_config(3);
  cfg.epochs = 3000;  // one draw per epoch with a single record
  Ranker fitted(cfg);
  fitted.fit(one);
  CHECK(fitted.mse(one) < 1e-4);
}

TEST_CASE("node count is learnable") {
  auto cells = sample_cells(50, 5);
  std::vector<RankerExample> data;
  for (const auto& a : cells) data.push_back({a, static_cast<double>(operator_count(a.root)), arch_id(a)});
  auto cfg = small_config(4);
  cfg.epochs = 500;
  Ranker r(cfg);
  const auto fit = r.fit(data);
  CHECK_FALSE(fit.aborted);
  CHECK(fit.epoch_loss.size() == 500);
  MESSAGE("training MSE " << r.mse(data));
  CHECK(r.mse(data) < 0.05);
}

TEST_CASE("a duplicated record set equals the single set trained twice as long") {
  auto cells = sample_cells(12, 6);
  std::vector<RankerExample> data;
  for (const auto& a : cells) data.push_back({a, static_cast<double>(operator_height(a.root)), arch_id(a)});
  std::vector<RankerExample> doubled = data;
  doubled.insert(doubled.end(), data.begin(), data.end());
  auto cfg = small_config(7);
  cfg.epochs = 3;
  Ranker a(cfg);
  a.fit(doubled);
  cfg.epochs = 6;
  Ranker b(cfg);
  b.fit(data);
  for (std::size_t i = 0; i < a.params().size(); ++i) CHECK(a.params()[static_cast<int>(i)].value == b.params()[static_cast<int>(i)].value);
}

TEST_CASE("records become clipped regression targets") {
  std::vector<ArchPerfRecord> recs(3);
  for (auto& r : recs) {
    r.dsl = render(builtin("gru").root);
    r.id = arch_id(builtin("gru"));
  }
  recs[0].valid_metric = 1.0;
  recs[1].valid_metric = 50.0;
  recs[2].status = RecordStatus::diverged;
  const auto ex = examples_from_records(recs, 500.0);
  REQUIRE(ex.size() == 3);
  CHECK(ex[0].target == 1.0);
  CHECK(ex[1].target == doctest::Approx(std::log(500.0)));
  CHECK(ex[2].target == doctest::Approx(std::log(500.0)));
  ArchPerfRecord bad;
  bad.dsl = "Tanh(Add(MM(x_t),c_tm1))";
  CHECK(examples_from_records({bad}, 500.0).empty());
}

TEST_CASE("selection: top-k, low-temperature limit, pure top-k") {
  std::mt19937_64 rng(8);
  std::vector<double> scores(200);
  std::uniform_real_distribution<double> d(0.0, 10.0);
  for (auto& s : scores) s = d(rng);
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] < scores[b]; });

  const auto sel = select_from_scores(scores, 28, 4, 1.0, rng);
  CHECK(sel.top == std::vector<int>(order.begin(), order.begin() + 28));
  REQUIRE(sel.sampled.size() == 4);
  std::set<int> all(sel.top.begin(), sel.top.end());
  for (int i : sel.sampled) CHECK(all.insert(i).second);

  const auto cold = select_from_scores(scores, 28, 4, 1e-6, rng);
  CHECK(cold.sampled == std::vector<int>(order.begin() + 28, order.begin() + 32));
  CHECK(select_from_scores(scores, 5, 0, 1.0, rng).all() == std::vector<int>(order.begin(), order.begin() + 5));
  CHECK(select_from_scores({3.0, 1.0, 2.0}, 2, 2, 1.0, rng).all() == std::vector<int>{1, 2, 0});
}

TEST_CASE("checkpoint round trip and c_t bootstrap") {
  auto cells = sample_cells(10, 9);
  std::vector<RankerExample> data;
  for (const auto& a : cells) data.push_back({a, static_cast<double>(operator_count(a.root)), arch_id(a)});
  auto cfg = small_config(10);
  cfg.epochs = 5;
  Ranker r(cfg);
  r.fit(data);
  const auto path = (std::filesystem::temp_directory_path() / "archdsl_ranker.ckpt").string();
  r.save(path);
  const Ranker back = Ranker::load(path);
  std::filesystem::remove(path);
  CHECK(back.score_all(cells) == r.score_all(cells));

  r.bootstrap_ct_embeddings();
  const Tensor& e = r.params().at("leaf.embedding").value;
  // Rows: x_t, x_tm1, h_tm1, c_tm1, posenc, h_tm2, c_tm2.
  for (int c = 0; c < cfg.hidden; ++c) {
    CHECK(e(3, c) == e(2, c));
    CHECK(e(6, c) == e(5, c));
  }
}
