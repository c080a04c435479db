#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "archdsl/candidate_random.hpp"

using namespace archdsl;

TEST_CASE("restriction checker examples") {
  GenConfig cfg;
  auto has = [&](const char* text, Violation v) {
    const auto r = check_restrictions(parse(text), cfg);
    return std::find(r.violations.begin(), r.violations.end(), v) != r.violations.end();
  };
  CHECK(has("Tanh(Add(MM(MM(x_t)),MM(h_tm1)))", Violation::stacked_identical));
  CHECK(has("Gate3(x_t,h_tm1,Tanh(MM(x_t)))", Violation::gate_not_sigmoid));
  CHECK(has("Tanh(MM(h_tm1))", Violation::missing_x));
  CHECK(has("Tanh(MM(x_t))", Violation::missing_h));
  CHECK(check_restrictions(builtin("gru"), cfg).ok());
  cfg.require_sources = {OpKind::X};
  CHECK(check_restrictions(parse("Tanh(MM(x_t))"), cfg).ok());
  cfg.require_sources = {OpKind::Cm1};
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("c_t variant expansion") {
  const auto example = parse("Mult(Sigmoid(MM(x_t)),Tanh(Add(MM(h_tm1),Mult(MM(c_tm1),MM(x_t)))))");
  const auto variants = expand_ct_variants(example);
  REQUIRE(variants.size() == 3);
  std::set<std::string> tapped;
  for (const auto& v : variants) tapped.insert(std::string(token(node_at(v.root, *v.ct_node)->op)));
  CHECK(tapped == std::set<std::string>{"Mult", "Add", "Tanh"});
  const auto rnn = expand_ct_variants(builtin("tanh_rnn"));
  REQUIRE(rnn.size() == 1);
  CHECK(rnn[0] == builtin("tanh_rnn"));
  CHECK(expand_ct_variants(parse("Tanh(MM(c_tm1))")).empty());
}

TEST_CASE("forced leaves and determinism") {
  GenConfig cfg;
  cfg.max_height = 0;
  for (int s = 0; s < 20; ++s) {
    cfg.seed = static_cast<std::uint64_t>(s);
    CHECK(is_source(grow_random(cfg).root.op));
  }
  cfg = GenConfig{};
  cfg.seed = 42;
  RandomGenerator a(cfg);
  RandomGenerator b(cfg);
  for (int i = 0; i < 200; ++i) CHECK(a.grow() == b.grow());
}

TEST_CASE("height bound holds when ternary operators dominate") {
  GenConfig cfg;
  cfg.seed = 5;
  cfg.weights[OpKind::Gate3] = 1000.0;
  RandomGenerator g(cfg);
  for (int i = 0; i < 300; ++i) CHECK(operator_height(g.grow().root) < cfg.max_height);
}

TEST_CASE("batches are admissible, distinct, and avoid seen ids") {
  GenConfig cfg;
  cfg.seed = 7;
  const auto first = generate_batch(cfg, 100);
  REQUIRE(first.candidates.size() == 100);
  CHECK_FALSE(first.short_batch);
  std::set<std::string> renders;
  for (const auto& c : first.candidates) {
    CHECK(check_restrictions(c, cfg).ok());
    CHECK(c == canonicalize(c));
    renders.insert(render(c));
  }
  CHECK(renders.size() == 100);
  const std::set<std::string> seen(first.ids.begin(), first.ids.end());
  CHECK(seen.size() == 100);
  const auto second = generate_batch(cfg, 100, seen);
  for (const auto& id : second.ids) CHECK_FALSE(seen.contains(id));
}

TEST_CASE("core DSL batches use no extended operators") {
  GenConfig cfg;
  cfg.seed = 9;
  const auto batch = generate_batch(cfg, 300);
  for (const auto& c : batch.candidates) {
    for (OpKind op : {OpKind::Sub, OpKind::Div, OpKind::Sin, OpKind::Cos, OpKind::PosEnc, OpKind::LayerNorm,
                      OpKind::SeLU}) {
      CHECK_FALSE(contains(c.root, op));
    }
  }
  cfg.extended_dsl = true;
  const auto ext = generate_batch(cfg, 300);
  bool any_extended = false;
  for (const auto& c : ext.candidates) any_extended = any_extended || contains(c.root, OpKind::Sin) ||
                                                     contains(c.root, OpKind::LayerNorm);
  CHECK(any_extended);
}

TEST_CASE("an impossible request returns a short batch") {
  GenConfig cfg;
  cfg.seed = 1;
  cfg.max_height = 0;  // single leaves never hold both x_t and h_tm1
  const auto r = generate_batch(cfg, 5);
  CHECK(r.short_batch);
  CHECK(r.draws == 500);
}
