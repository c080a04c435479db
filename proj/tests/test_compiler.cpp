#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>

#include "archdsl/compiler.hpp"
#include "archdsl/optim.hpp"
#include "test_support.hpp"

using namespace archdsl;

namespace {

using Vec = std::vector<double>;

// Weights of the MM found by following child indices from the root. Looked up by node
// identity, so the oracle does not depend on how the compiler orders instructions.
struct Affine {
  const Tensor* w;
  const Tensor* b;
  Vec operator()(const Vec& v) const {
    const int out = w->rows();
    const int in = w->cols();
    Vec y(static_cast<std::size_t>(out));
    for (int o = 0; o < out; ++o) {
      double s = b->data[static_cast<std::size_t>(o)];
      for (int i = 0; i < in; ++i) s += (*w)(o, i) * v[static_cast<std::size_t>(i)];
      y[static_cast<std::size_t>(o)] = s;
    }
    return y;
  }
};

Affine mm_at(const CellProgram& prog, std::initializer_list<int> path) {
  const ArchNode* n = &prog.arch.root;
  for (int i : path) n = &n->children[static_cast<std::size_t>(i)];
  REQUIRE(n->op == OpKind::MM);
  const auto order = node_numbering(prog.arch.root);
  const int k = static_cast<int>(std::find(order.begin(), order.end(), n) - order.begin()) + 1;
  const std::string prefix = "n" + std::to_string(k) + ".";
  return {&prog.params.at(prefix + "W").value, &prog.params.at(prefix + "b").value};
}

Vec sig(Vec v) {
  for (auto& x : v) x = 1.0 / (1.0 + std::exp(-x));
  return v;
}
Vec tnh(Vec v) {
  for (auto& x : v) x = std::tanh(x);
  return v;
}
Vec operator+(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}
Vec operator*(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= b[i];
  return a;
}
Vec one_minus(Vec a) {
  for (auto& x : a) x = 1.0 - x;
  return a;
}

Vec row_of(const Tensor& t, int r) {
  auto s = t.row(r);
  return {s.begin(), s.end()};
}

Tensor random_tensor(int rows, int cols, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t = Tensor::matrix(rows, cols);
  std::uniform_real_distribution<double> d(-scale, scale);
  for (auto& v : t.data) v = d(rng);
  return t;
}

void randomize_params(ParamStore& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-0.8, 0.8);
  for (auto& p : s.all()) {
    for (auto& v : p.value.data) v = d(rng);
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

std::vector<Tensor> random_sequence(int len, int batch, int input, std::mt19937_64& rng) {
  std::vector<Tensor> xs;
  for (int t = 0; t < len; ++t) xs.push_back(random_tensor(batch, input, rng));
  return xs;
}

// Runs both programs; true when both diverged at the same step or both finished.
bool same_outcome(const CellProgram& a, const CellProgram& b, const std::vector<Tensor>& xs, double* diff) {
  std::optional<SequenceResult> ra;
  std::optional<SequenceResult> rb;
  int ta = -1;
  int tb = -1;
  try { ra = run_sequence(a, xs, initial_state(a, xs[0].rows())); } catch (const Divergence& e) { ta = e.timestep(); }
  try { rb = run_sequence(b, xs, initial_state(b, xs[0].rows())); } catch (const Divergence& e) { tb = e.timestep(); }
  *diff = 0.0;
  if (ra.has_value() != rb.has_value()) return false;
  if (!ra) return ta == tb;
  for (std::size_t t = 0; t < xs.size(); ++t) *diff = std::max(*diff, max_abs_diff(ra->hs[t], rb->hs[t]));
  return true;
}

}  // namespace

TEST_CASE("LSTM fuses its eight source MMs into two") {
  const auto prog = compile(builtin("lstm"), 5, 6);
  CHECK(prog.count(InstrKind::fused_linear) == 2);
  CHECK(prog.count(InstrKind::linear) == 0);
  CHECK(prog.fused_groups.at(OpKind::X).size() == 4);
  CHECK(prog.fused_groups.at(OpKind::Hm1).size() == 4);
  const auto unfused = compile(builtin("lstm"), 5, 6, {.fuse = false});
  CHECK(unfused.count(InstrKind::fused_linear) == 0);
  CHECK(unfused.count(InstrKind::linear) == 8);
}

TEST_CASE("compile refusals") {
  CHECK_THROWS_AS(compile(parse("x_t"), 4, 4), CompileError);
  CHECK_THROWS_AS(compile(parse("Tanh(Add(MM(x_t),c_tm1))"), 4, 4), CompileError);
  CHECK_THROWS_AS(compile(parse("Add(x_t,h_tm1)"), 3, 4), CompileError);
  Architecture root_tap = parse("Tanh(Add(Add(MM(x_t),MM(h_tm1)),c_tm1))");
  root_tap.ct_node = operator_count(root_tap.root);
  CHECK_THROWS_AS(compile(root_tap, 4, 4), CompileError);
  CHECK_THROWS_AS(compile(builtin("gru"), 0, 4), CompileError);
}

TEST_CASE("program invariants: slots written before read, ct slot distinct from root") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const auto arch = testsupport::random_compilable(rng, 5, true);
    for (bool fuse : {true, false}) {
      const auto prog = compile(arch, 4, 4, {.fuse = fuse});
      std::vector<bool> written(prog.slot_width.size(), false);
      for (const auto& ins : prog.instructions) {
        for (int s : ins.inputs) CHECK(written[static_cast<std::size_t>(s)]);
        written[static_cast<std::size_t>(ins.output)] = true;
      }
      CHECK(prog.ct_slot.has_value() == arch.ct_node.has_value());
      if (prog.ct_slot) CHECK(*prog.ct_slot != prog.root_slot);
      CHECK(prog.uses_cm1 == contains(arch.root, OpKind::Cm1));
    }
  }
}

TEST_CASE("GRU matches a hand-written GRU step") {
  std::mt19937_64 rng(21);
  const int in = 5, hid = 7, batch = 3;
  auto prog = compile(builtin("gru"), in, hid, {.init_seed = 3});
  // Listing shape: Gate3(Tanh(Add(MM(x), Mult(MM(h), Sigmoid(Add(MM(h), MM(x)))))), h, Sigmoid(Add(MM(h), MM(x))))
  const auto Wh = mm_at(prog, {0, 0, 0});
  const auto Uh = mm_at(prog, {0, 0, 1, 0});
  const auto Ur = mm_at(prog, {0, 0, 1, 1, 0, 0});
  const auto Wr = mm_at(prog, {0, 0, 1, 1, 0, 1});
  const auto Uz = mm_at(prog, {2, 0, 0});
  const auto Wz = mm_at(prog, {2, 0, 1});
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    randomize_params(prog.params, rng);
    CellState s = initial_state(prog, batch);
    s.h = random_tensor(batch, hid, rng, 2.0);
    const Tensor x = random_tensor(batch, in, rng, 2.0);
    const auto [h, next] = step(prog, x, s);
    for (int r = 0; r < batch; ++r) {
      const Vec xv = row_of(x, r), hv = row_of(s.h, r);
      const Vec reset = sig(Ur(hv) + Wr(xv));
      const Vec z = sig(Uz(hv) + Wz(xv));
      const Vec cand = tnh(Wh(xv) + Uh(hv) * reset);
      const Vec expect = z * cand + one_minus(z) * hv;
      for (int j = 0; j < hid; ++j) worst = std::max(worst, std::abs(expect[static_cast<std::size_t>(j)] - h(r, j)));
    }
    CHECK_FALSE(next.c.has_value());
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("LSTM matches a hand-written LSTM step") {
  std::mt19937_64 rng(22);
  const int in = 4, hid = 6, batch = 2;
  auto prog = compile(builtin("lstm"), in, hid);
  const auto Wo = mm_at(prog, {0, 0, 0}), Uo = mm_at(prog, {0, 0, 1});
  const auto Wf = mm_at(prog, {1, 0, 0, 0, 0, 0}), Uf = mm_at(prog, {1, 0, 0, 0, 0, 1});
  const auto Wi = mm_at(prog, {1, 0, 1, 0, 0, 0}), Ui = mm_at(prog, {1, 0, 1, 0, 0, 1});
  const auto Wg = mm_at(prog, {1, 0, 1, 1, 0, 0}), Ug = mm_at(prog, {1, 0, 1, 1, 0, 1});
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    randomize_params(prog.params, rng);
    CellState s = initial_state(prog, batch);
    s.h = random_tensor(batch, hid, rng, 2.0);
    s.c = random_tensor(batch, hid, rng, 2.0);
    const Tensor x = random_tensor(batch, in, rng, 2.0);
    const auto [h, next] = step(prog, x, s);
    REQUIRE(next.c.has_value());
    for (int r = 0; r < batch; ++r) {
      const Vec xv = row_of(x, r), hv = row_of(s.h, r), cv = row_of(*s.c, r);
      const Vec c = sig(Wf(xv) + Uf(hv)) * cv + sig(Wi(xv) + Ui(hv)) * tnh(Wg(xv) + Ug(hv));
      const Vec expect = sig(Wo(xv) + Uo(hv)) * tnh(c);
      for (int j = 0; j < hid; ++j) {
        worst = std::max(worst, std::abs(expect[static_cast<std::size_t>(j)] - h(r, j)));
        worst = std::max(worst, std::abs(c[static_cast<std::size_t>(j)] - (*next.c)(r, j)));
      }
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("BC3 matches its published update equations") {
  // f = s(W^f x + U^f h)
  // z = V^z (X^y c o U^z x) o W^z x
  // c_t = tanh(f o W^g x + (1 - f) o z)
  // o = s(W^o x + U^o h)
  // h_t = o o c_t + (1 - o) o h
  std::mt19937_64 rng(23);
  const int hid = 5, batch = 3;
  auto prog = compile(builtin("bc3"), hid, hid);
  const auto Wg = mm_at(prog, {0, 0, 0});
  const auto Vz = mm_at(prog, {0, 0, 1, 0});
  const auto Xy = mm_at(prog, {0, 0, 1, 0, 0, 0});
  const auto Uz = mm_at(prog, {0, 0, 1, 0, 0, 1});
  const auto Wz = mm_at(prog, {0, 0, 1, 1});
  const auto Wf = mm_at(prog, {0, 0, 2, 0, 0}), Uf = mm_at(prog, {0, 0, 2, 0, 1});
  const auto Wo = mm_at(prog, {2, 0, 0}), Uo = mm_at(prog, {2, 0, 1});
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    randomize_params(prog.params, rng);
    CellState s = initial_state(prog, batch);
    s.h = random_tensor(batch, hid, rng, 2.0);
    s.c = random_tensor(batch, hid, rng, 2.0);
    const Tensor x = random_tensor(batch, hid, rng, 2.0);
    const auto [h, next] = step(prog, x, s);
    REQUIRE(next.c.has_value());
    for (int r = 0; r < batch; ++r) {
      const Vec xv = row_of(x, r), hv = row_of(s.h, r), cv = row_of(*s.c, r);
      const Vec f = sig(Wf(xv) + Uf(hv));
      const Vec z = Vz(Xy(cv) * Uz(xv)) * Wz(xv);
      const Vec c = tnh(f * Wg(xv) + one_minus(f) * z);
      const Vec o = sig(Wo(xv) + Uo(hv));
      const Vec expect = o * c + one_minus(o) * hv;
      for (int j = 0; j < hid; ++j) {
        worst = std::max(worst, std::abs(expect[static_cast<std::size_t>(j)] - h(r, j)));
        worst = std::max(worst, std::abs(c[static_cast<std::size_t>(j)] - (*next.c)(r, j)));
      }
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("zero weights give a zero tanh-RNN output") {
  auto prog = compile(builtin("tanh_rnn"), 3, 4);
  for (auto& p : prog.params.all()) std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
  std::mt19937_64 rng(1);
  auto [h, next] = step(prog, random_tensor(2, 3, rng), initial_state(prog, 2));
  for (double v : h.data) CHECK(v == 0.0);
  CHECK(next.t == 1);
}

TEST_CASE("saturated Gate3 passes its first argument through exactly") {
  auto prog = compile(parse("Gate3(MM(x_t),h_tm1,Sigmoid(MM(h_tm1)))"), 4, 4, {.fuse = false});
  const Instruction* gate_mm = nullptr;
  for (const auto& ins : prog.instructions) {
    // The MM whose output feeds the Sigmoid.
    if (ins.kind == InstrKind::unary) {
      for (const auto& j : prog.instructions) {
        if (j.output == ins.inputs[0]) gate_mm = &j;
      }
    }
  }
  REQUIRE(gate_mm != nullptr);
  std::fill(prog.params[gate_mm->params[0]].value.data.begin(), prog.params[gate_mm->params[0]].value.data.end(), 0.0);
  std::fill(prog.params[gate_mm->params[1]].value.data.begin(), prog.params[gate_mm->params[1]].value.data.end(), 1000.0);
  std::mt19937_64 rng(2);
  CellState s = initial_state(prog, 3);
  s.h = random_tensor(3, 4, rng);
  const Tensor x = random_tensor(3, 4, rng);
  const auto [h, next] = step(prog, x, s);
  const Instruction* value_mm = nullptr;
  for (const auto& ins : prog.instructions) {
    if (ins.kind == InstrKind::linear && &ins != gate_mm) value_mm = &ins;
  }
  REQUIRE(value_mm != nullptr);
  const Affine a{&prog.params[value_mm->params[0]].value, &prog.params[value_mm->params[1]].value};
  for (int r = 0; r < 3; ++r) {
    const Vec expect = a(row_of(x, r));
    for (int j = 0; j < 4; ++j) CHECK(h(r, j) == expect[static_cast<std::size_t>(j)]);
  }
}

TEST_CASE("fused and unfused execution agree") {
  std::mt19937_64 rng(31);
  for (const char* name : {"gru", "lstm", "bc3", "mgu", "tanh_rnn"}) {
    INFO(name);
    const auto a = compile(builtin(name), 4, 4, {.fuse = true, .init_seed = 7});
    const auto b = compile(builtin(name), 4, 4, {.fuse = false, .init_seed = 7});
    double diff = 0.0;
    CHECK(same_outcome(a, b, random_sequence(50, 3, 4, rng), &diff));
    CHECK(diff < 1e-10);
  }
  for (int i = 0; i < 100; ++i) {
    const auto arch = testsupport::random_compilable(rng, 5, true);
    INFO(render(arch));
    const auto a = compile(arch, 4, 4, {.fuse = true, .init_seed = 9});
    const auto b = compile(arch, 4, 4, {.fuse = false, .init_seed = 9});
    CHECK(a.params.num_values() == b.params.num_values());
    double diff = 0.0;
    CHECK(same_outcome(a, b, random_sequence(20, 2, 4, rng), &diff));
    CHECK(diff < 1e-10);
  }
}

TEST_CASE("length-one sequence equals a single step; reruns are bit-identical") {
  std::mt19937_64 rng(41);
  const auto prog = compile(builtin("bc3"), 4, 4, {.init_seed = 5});
  const auto xs = random_sequence(1, 2, 4, rng);
  const auto seq = run_sequence(prog, xs, initial_state(prog, 2));
  const auto [h, next] = step(prog, xs[0], initial_state(prog, 2));
  CHECK(seq.hs[0] == h);
  const auto long_xs = random_sequence(30, 2, 4, rng);
  const auto r1 = run_sequence(prog, long_xs, initial_state(prog, 2));
  const auto r2 = run_sequence(compile(builtin("bc3"), 4, 4, {.init_seed = 5}), long_xs, initial_state(prog, 2));
  CHECK(r1.hs == r2.hs);
  CHECK_THROWS(run_sequence(prog, {}, initial_state(prog, 2)));
}

// Sorting Gate3's two value inputs changes f*a + (1-f)*b into f*b + (1-f)*a, so exact
// transparency is only expected for trees without Gate3.
TEST_CASE("canonicalization is transparent once parameters follow their nodes") {
  std::mt19937_64 rng(51);
  for (int i = 0; i < 200;) {
    const auto arch = testsupport::random_compilable(rng, 5, true);
    if (contains(arch.root, OpKind::Gate3)) continue;
    ++i;
    std::vector<int> map;
    const auto canon = canonicalize(arch, &map);
    const auto a = compile(arch, 4, 4, {.init_seed = static_cast<std::uint64_t>(i)});
    auto b = compile(canon, 4, 4);
    for (const auto& p : a.params.all()) {
      const auto dot = p.name.find('.');
      const int old_index = std::stoi(p.name.substr(1, dot - 1));
      b.params.at("n" + std::to_string(map[static_cast<std::size_t>(old_index)]) + p.name.substr(dot)).value = p.value;
    }
    INFO(render(arch));
    double diff = 0.0;
    CHECK(same_outcome(a, b, random_sequence(10, 2, 4, rng), &diff));
    CHECK(diff < 1e-10);
  }
}

TEST_CASE("divergence carries the instruction and timestep") {
  auto prog = compile(parse("Div(MM(x_t),Sub(h_tm1,h_tm1))"), 2, 2);
  for (auto& p : prog.params.all()) std::fill(p.value.data.begin(), p.value.data.end(), 1e300);
  try {
    step(prog, Tensor({1, 2}, {1e10, 1e10}), initial_state(prog, 1));
    FAIL("expected divergence");
  } catch (const Divergence& e) {
    CHECK(e.timestep() == 0);
    CHECK(e.instruction() >= 0);
  }
}

TEST_CASE("positional encoding source and trace export") {
  const auto pe = positional_encoding(0, 4);
  CHECK(pe == std::vector<double>{0.0, 1.0, 0.0, 1.0});
  const auto prog = compile(parse("Tanh(Add(MM(x_t),posenc))"), 3, 4);
  std::mt19937_64 rng(61);
  const auto r = run_sequence(prog, random_sequence(12, 1, 3, rng), initial_state(prog, 1));
  std::ostringstream csv;
  write_trace_csv(csv, r.hs);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "t,h0,h1,h2,h3");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 12);
}

TEST_CASE("end-to-end cell gradients match finite differences") {
  std::mt19937_64 rng(71);
  std::vector<Architecture> cells{builtin("tanh_rnn"), builtin("gru"), builtin("bc3"), builtin("lstm")};
  while (cells.size() < 24) cells.push_back(testsupport::random_compilable(rng, 4, true));
  for (const auto& arch : cells) {
    INFO(render(arch));
    auto prog = compile(arch, 3, 3, {.init_seed = 13});
    const auto xs = random_sequence(3, 2, 3, rng);
    // A random starting state keeps ReLU, Div and LayerNorm away from their kinks at zero.
    const Tensor h0 = random_tensor(2, 3, rng), c0 = random_tensor(2, 3, rng), x0 = random_tensor(2, 3, rng);
    auto loss = [&](ParamStore& store) {
      Var h = constant(h0);
      Var c = prog.uses_cm1 ? constant(c0) : nullptr;
      Var xp = constant(x0);
      std::vector<Var> hs;
      for (int t = 0; t < 3; ++t) {
        Var x = constant(xs[static_cast<std::size_t>(t)]);
        auto out = forward_step(prog, store, 0, x, h, c, xp, t);
        h = out.h;
        c = out.c;
        xp = x;
        hs.push_back(h);
      }
      return sum(add_n(hs));
    };
    ParamStore store = prog.params;
    try {
      const auto r = gradient_check(store, loss);
      CHECK(r.finite);
      CHECK(r.max_rel_error < 1e-4);
    } catch (const Divergence&) {
      // A random cell may overflow; the divergence path has its own test.
    }
  }
}
