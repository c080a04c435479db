#include "archdsl/compiler.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace archdsl {

int CellProgram::count(InstrKind kind) const {
  return static_cast<int>(std::count_if(instructions.begin(), instructions.end(),
                                        [kind](const Instruction& i) { return i.kind == kind; }));
}

namespace {

class Compiler {
 public:
  Compiler(const Architecture& arch, int input_size, int hidden_size, const CompileOptions& options)
      : arch_(arch), options_(options) {
    prog_.arch = arch;
    prog_.input_size = input_size;
    prog_.hidden_size = hidden_size;
    prog_.gate3_inner_sigmoid = options.gate3_inner_sigmoid;
    prog_.uses_cm1 = contains(arch.root, OpKind::Cm1);
  }

  CellProgram run() {
    validate();
    order_ = node_numbering(arch_.root);
    for (std::size_t i = 0; i < order_.size(); ++i) index_[order_[i]] = static_cast<int>(i) + 1;
    width_of(arch_.root);
    allocate_params();
    emit_sources();
    emit_fused();
    prog_.root_slot = emit(arch_.root);
    if (width_[&arch_.root] != prog_.hidden_size) {
      throw CompileError("cell output width " + std::to_string(width_[&arch_.root]) +
                         " differs from hidden size " + std::to_string(prog_.hidden_size));
    }
    if (arch_.ct_node) {
      const ArchNode* tap = order_[static_cast<std::size_t>(*arch_.ct_node - 1)];
      if (width_[tap] != prog_.hidden_size) throw CompileError("c_t tap width differs from hidden size");
      prog_.ct_slot = node_slot_.at(tap);
    }
    return std::move(prog_);
  }

 private:
  void validate() {
    if (prog_.input_size <= 0 || prog_.hidden_size <= 0) throw CompileError("sizes must be positive");
    if (is_source(arch_.root.op)) throw CompileError("a bare source leaf defines no recurrent cell");
    if (contains(arch_.root, OpKind::Hm2) || contains(arch_.root, OpKind::Cm2)) {
      throw CompileError("h_tm2/c_tm2 leaves are not executable");
    }
    if (arch_.ct_node) {
      const ArchNode* tap = node_at(arch_.root, *arch_.ct_node);
      if (tap == nullptr) throw CompileError("c_t node index out of range");
      if (tap == &arch_.root) throw CompileError("c_t tap must differ from the h_t root");
      if (!contains(*tap, OpKind::Cm1)) throw CompileError("c_t tap does not depend on c_tm1");
    } else if (prog_.uses_cm1) {
      throw CompileError("c_tm1 is used but no c_t tap is given");
    }
  }

  int source_width(OpKind op) const {
    return (op == OpKind::X || op == OpKind::Xm1) ? prog_.input_size : prog_.hidden_size;
  }

  int width_of(const ArchNode& n) {
    int w = 0;
    if (is_source(n.op)) {
      w = source_width(n.op);
    } else if (n.op == OpKind::MM) {
      width_of(n.children[0]);
      w = prog_.hidden_size;
    } else {
      w = width_of(n.children[0]);
      for (std::size_t i = 1; i < n.children.size(); ++i) {
        const int wi = width_of(n.children[i]);
        if (wi != w) {
          throw CompileError(std::string(token(n.op)) + " (node " + std::to_string(index_.at(&n)) +
                             ") mixes widths " + std::to_string(w) + " and " + std::to_string(wi));
        }
      }
    }
    width_[&n] = w;
    return w;
  }

  void allocate_params() {
    std::mt19937_64 rng(options_.init_seed);
    for (std::size_t i = 0; i < order_.size(); ++i) {
      const ArchNode* n = order_[i];
      const std::string prefix = "n" + std::to_string(i + 1) + ".";
      if (n->op == OpKind::MM) {
        const int in = width_.at(&n->children[0]);
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Tensor w = Tensor::matrix(prog_.hidden_size, in);
        for (auto& v : w.data) v = dist(rng);
        prog_.params.add(prefix + "W", std::move(w));
        prog_.params.add(prefix + "b", Tensor::zeros({prog_.hidden_size}));
      } else if (n->op == OpKind::LayerNorm) {
        const int width = width_.at(n);
        prog_.params.add(prefix + "gain", Tensor::filled({width}, 1.0));
        prog_.params.add(prefix + "bias", Tensor::zeros({width}));
      }
    }
  }

  int new_slot(int width) {
    prog_.slot_width.push_back(width);
    return static_cast<int>(prog_.slot_width.size()) - 1;
  }

  void emit_sources() {
    std::vector<bool> used(kNumOpKinds, false);
    for (OpKind op : {OpKind::X, OpKind::Xm1, OpKind::Hm1, OpKind::Cm1, OpKind::PosEnc}) {
      if (!contains(arch_.root, op)) continue;
      Instruction ins;
      ins.kind = InstrKind::source;
      ins.op = op;
      ins.output = new_slot(source_width(op));
      source_slot_[op] = ins.output;
      prog_.instructions.push_back(ins);
    }
  }

  std::vector<int> mm_params(int node) const {
    const std::string prefix = "n" + std::to_string(node) + ".";
    return {prog_.params.index_of(prefix + "W"), prog_.params.index_of(prefix + "b")};
  }

  void emit_fused() {
    if (!options_.fuse) return;
    for (const auto& [src, slot] : source_slot_) {
      std::vector<const ArchNode*> group;
      for (const ArchNode* n : order_) {
        if (n->op == OpKind::MM && n->children[0].op == src) group.push_back(n);
      }
      if (group.size() < 2) continue;
      Instruction wide;
      wide.kind = InstrKind::fused_linear;
      wide.op = OpKind::MM;
      wide.inputs = {slot};
      std::vector<int>& members = prog_.fused_groups[src];
      for (const ArchNode* n : group) {
        const auto p = mm_params(index_.at(n));
        wide.params.insert(wide.params.end(), p.begin(), p.end());
        members.push_back(index_.at(n));
      }
      wide.output = new_slot(prog_.hidden_size * static_cast<int>(group.size()));
      prog_.instructions.push_back(wide);
      for (std::size_t k = 0; k < group.size(); ++k) {
        Instruction sl;
        sl.kind = InstrKind::slice;
        sl.op = OpKind::MM;
        sl.inputs = {wide.output};
        sl.node = index_.at(group[k]);
        sl.slice_start = static_cast<int>(k) * prog_.hidden_size;
        sl.slice_count = prog_.hidden_size;
        sl.output = new_slot(prog_.hidden_size);
        node_slot_[group[k]] = sl.output;
        prog_.instructions.push_back(sl);
      }
    }
  }

  int emit(const ArchNode& n) {
    if (is_source(n.op)) return source_slot_.at(n.op);
    if (auto it = node_slot_.find(&n); it != node_slot_.end()) return it->second;
    Instruction ins;
    ins.op = n.op;
    ins.node = index_.at(&n);
    for (const auto& c : n.children) ins.inputs.push_back(emit(c));
    switch (n.op) {
      case OpKind::MM:
        ins.kind = InstrKind::linear;
        ins.params = mm_params(ins.node);
        break;
      case OpKind::LayerNorm: {
        ins.kind = InstrKind::layer_norm;
        const std::string prefix = "n" + std::to_string(ins.node) + ".";
        ins.params = {prog_.params.index_of(prefix + "gain"), prog_.params.index_of(prefix + "bias")};
        break;
      }
      case OpKind::Sigmoid:
      case OpKind::Tanh:
      case OpKind::ReLU:
      case OpKind::Sin:
      case OpKind::Cos:
      case OpKind::SeLU:
        ins.kind = InstrKind::unary;
        break;
      case OpKind::Add:
      case OpKind::Mult:
      case OpKind::Sub:
      case OpKind::Div:
        ins.kind = InstrKind::binary;
        break;
      case OpKind::Gate3:
        ins.kind = InstrKind::gate3;
        break;
      default:
        throw CompileError("unknown operator '" + std::string(token(n.op)) + "'");
    }
    ins.output = new_slot(width_.at(&n));
    node_slot_[&n] = ins.output;
    prog_.instructions.push_back(ins);
    return ins.output;
  }

  const Architecture& arch_;
  CompileOptions options_;
  CellProgram prog_;
  std::vector<const ArchNode*> order_;
  std::unordered_map<const ArchNode*, int> index_;
  std::unordered_map<const ArchNode*, int> width_;
  std::unordered_map<const ArchNode*, int> node_slot_;
  std::map<OpKind, int> source_slot_;
};

Var apply_unary(OpKind op, const Var& a) {
  switch (op) {
    case OpKind::Sigmoid: return sigmoid(a);
    case OpKind::Tanh: return tanh(a);
    case OpKind::ReLU: return relu(a);
    case OpKind::Sin: return sin(a);
    case OpKind::Cos: return cos(a);
    case OpKind::SeLU: return selu(a);
    default: throw CompileError("not a unary activation");
  }
}

Var apply_binary(OpKind op, const Var& a, const Var& b) {
  switch (op) {
    case OpKind::Add: return add(a, b);
    case OpKind::Mult: return mult(a, b);
    case OpKind::Sub: return sub(a, b);
    case OpKind::Div: return div_safe(a, b);
    default: throw CompileError("not a binary operator");
  }
}

}  // namespace

CellProgram compile(const Architecture& arch, int input_size, int hidden_size, const CompileOptions& options) {
  return Compiler(arch, input_size, hidden_size, options).run();
}

CellState initial_state(const CellProgram& prog, int batch) {
  CellState s;
  s.h = Tensor::matrix(batch, prog.hidden_size);
  if (prog.uses_cm1) s.c = Tensor::matrix(batch, prog.hidden_size);
  s.x_prev = Tensor::matrix(batch, prog.input_size);
  s.t = 0;
  return s;
}

std::vector<double> positional_encoding(int t, int dim) {
  std::vector<double> pe(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim; ++i) {
    const int pair = i / 2;
    const double angle = t / std::pow(10000.0, 2.0 * pair / dim);
    pe[static_cast<std::size_t>(i)] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return pe;
}

StepVars forward_step(const CellProgram& prog, ParamStore& store, int param_base, const Var& x,
                      const Var& h_prev, const Var& c_prev, const Var& x_prev, int t) {
  const int batch = x->val().rows();
  std::vector<Var> slots(prog.slot_width.size());
  auto p = [&](int id) { return param(store[param_base + id]); };
  for (std::size_t k = 0; k < prog.instructions.size(); ++k) {
    const Instruction& ins = prog.instructions[k];
    Var out;
    switch (ins.kind) {
      case InstrKind::source:
        switch (ins.op) {
          case OpKind::X: out = x; break;
          case OpKind::Xm1: out = x_prev; break;
          case OpKind::Hm1: out = h_prev; break;
          case OpKind::Cm1:
            if (!c_prev) throw CompileError("cell reads c_tm1 but no state was provided");
            out = c_prev;
            break;
          case OpKind::PosEnc: {
            const auto row = positional_encoding(t, prog.hidden_size);
            Tensor pe = Tensor::matrix(batch, prog.hidden_size);
            for (int r = 0; r < batch; ++r) std::copy(row.begin(), row.end(), pe.row(r).begin());
            out = constant(std::move(pe));
            break;
          }
          default: throw CompileError("unsupported source");
        }
        break;
      case InstrKind::linear:
        out = linear(slots[static_cast<std::size_t>(ins.inputs[0])], p(ins.params[0]), p(ins.params[1]));
        break;
      case InstrKind::fused_linear: {
        std::vector<Var> ws;
        std::vector<Var> bs;
        for (std::size_t i = 0; i < ins.params.size(); i += 2) {
          ws.push_back(p(ins.params[i]));
          bs.push_back(p(ins.params[i + 1]));
        }
        out = fused_linear(slots[static_cast<std::size_t>(ins.inputs[0])], ws, bs);
        break;
      }
      case InstrKind::slice:
        out = slice_cols(slots[static_cast<std::size_t>(ins.inputs[0])], ins.slice_start, ins.slice_count);
        break;
      case InstrKind::unary:
        out = apply_unary(ins.op, slots[static_cast<std::size_t>(ins.inputs[0])]);
        break;
      case InstrKind::binary:
        out = apply_binary(ins.op, slots[static_cast<std::size_t>(ins.inputs[0])],
                           slots[static_cast<std::size_t>(ins.inputs[1])]);
        break;
      case InstrKind::gate3:
        out = gate3(slots[static_cast<std::size_t>(ins.inputs[0])], slots[static_cast<std::size_t>(ins.inputs[1])],
                    slots[static_cast<std::size_t>(ins.inputs[2])], prog.gate3_inner_sigmoid);
        break;
      case InstrKind::layer_norm:
        out = layer_norm(slots[static_cast<std::size_t>(ins.inputs[0])], p(ins.params[0]), p(ins.params[1]));
        break;
    }
    if (ins.kind != InstrKind::source && !out->val().all_finite()) {
      throw Divergence("non-finite value at instruction " + std::to_string(k) + " (" +
                           std::string(token(ins.op)) + ", node " + std::to_string(ins.node) + ")",
                       static_cast<int>(k), t);
    }
    slots[static_cast<std::size_t>(ins.output)] = std::move(out);
  }
  StepVars result;
  result.h = slots[static_cast<std::size_t>(prog.root_slot)];
  if (prog.ct_slot) result.c = slots[static_cast<std::size_t>(*prog.ct_slot)];
  return result;
}

std::pair<Tensor, CellState> step(const CellProgram& prog, const Tensor& x, const CellState& state) {
  if (x.cols() != prog.input_size || state.h.cols() != prog.hidden_size || x.rows() != state.h.rows()) {
    throw ShapeError("step: input " + shape_string(x.shape) + " / state " + shape_string(state.h.shape) +
                     " do not match the program sizes");
  }
  auto& store = const_cast<ParamStore&>(prog.params);  // read-only: no backward pass runs here
  Var c_prev = state.c ? constant(*state.c) : nullptr;
  StepVars out = forward_step(prog, store, 0, constant(x), constant(state.h), c_prev, constant(state.x_prev), state.t);
  CellState next;
  next.h = out.h->val();
  if (out.c) next.c = out.c->val();
  next.x_prev = x;
  next.t = state.t + 1;
  return {next.h, std::move(next)};
}

SequenceResult run_sequence(const CellProgram& prog, const std::vector<Tensor>& xs, const CellState& init) {
  if (xs.empty()) throw std::invalid_argument("run_sequence: empty sequence");
  SequenceResult r;
  r.final_state = init;
  for (const auto& x : xs) {
    auto [h, next] = step(prog, x, r.final_state);
    r.hs.push_back(std::move(h));
    r.final_state = std::move(next);
  }
  return r;
}

void write_trace_csv(std::ostream& out, const std::vector<Tensor>& hs, int batch_row) {
  if (hs.empty()) return;
  out << "t";
  for (int i = 0; i < hs[0].cols(); ++i) out << ",h" << i;
  out << "\n";
  out.precision(17);
  for (std::size_t t = 0; t < hs.size(); ++t) {
    out << t;
    for (double v : hs[t].row(batch_row)) out << "," << v;
    out << "\n";
  }
}

GradCheckResult check_cell_gradients(const CellProgram& prog, int steps, int batch, std::uint64_t seed) {
  if (steps < 1 || batch < 1) throw std::invalid_argument("gradient check needs steps >= 1 and batch >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto rand = [&](int cols) {
    Tensor t = Tensor::matrix(batch, cols);
    for (auto& v : t.data) v = u(rng);
    return t;
  };
  std::vector<Tensor> xs;
  for (int t = 0; t < steps; ++t) xs.push_back(rand(prog.input_size));
  const Tensor h0 = rand(prog.hidden_size), c0 = rand(prog.hidden_size), x0 = rand(prog.input_size);
  auto loss = [&](ParamStore& store) {
    Var h = constant(h0);
    Var c = prog.uses_cm1 ? constant(c0) : nullptr;
    Var xp = constant(x0);
    std::vector<Var> hs;
    for (int t = 0; t < steps; ++t) {
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
  return gradient_check(store, loss);
}

}  // namespace archdsl
