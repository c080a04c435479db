#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "archdsl/autograd.hpp"
#include "archdsl/dsl.hpp"
#include "archdsl/optim.hpp"
#include "archdsl/tensor.hpp"

namespace archdsl {

class CompileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a cell produces a non-finite value.
class Divergence : public std::runtime_error {
 public:
  Divergence(const std::string& msg, int instruction, int timestep)
      : std::runtime_error(msg), instruction_(instruction), timestep_(timestep) {}
  int instruction() const { return instruction_; }
  int timestep() const { return timestep_; }

 private:
  int instruction_;
  int timestep_;
};

enum class InstrKind { source, linear, fused_linear, slice, unary, binary, gate3, layer_norm };

struct Instruction {
  InstrKind kind = InstrKind::source;
  OpKind op = OpKind::X;        // operator or source kind
  std::vector<int> inputs;      // slot indices
  std::vector<int> params;      // parameter indices (relative to the program's base)
  int output = -1;              // slot index
  int node = 0;                 // operator node number in the architecture (0 for sources)
  int slice_start = 0;          // for InstrKind::slice
  int slice_count = 0;
};

struct CompileOptions {
  bool fuse = true;
  bool gate3_inner_sigmoid = false;
  std::uint64_t init_seed = 0;
};

struct CellProgram {
  Architecture arch;
  std::vector<Instruction> instructions;
  ParamStore params;
  std::vector<int> slot_width;
  int root_slot = -1;
  std::optional<int> ct_slot;
  int hidden_size = 0;
  int input_size = 0;
  bool uses_cm1 = false;
  bool gate3_inner_sigmoid = false;
  // source kind -> operator numbers of the MM nodes folded into one wide MM
  std::map<OpKind, std::vector<int>> fused_groups;

  int count(InstrKind kind) const;
};

// Parameter names: "n<k>.W", "n<k>.b" for the MM numbered k, "n<k>.gain"/"n<k>.bias" for
// LayerNorm. Weights are uniform in +-1/sqrt(fan_in), biases zero, gains one.
CellProgram compile(const Architecture& arch, int input_size, int hidden_size,
                    const CompileOptions& options = {});

struct CellState {
  Tensor h;
  std::optional<Tensor> c;
  Tensor x_prev;
  int t = 0;
};

CellState initial_state(const CellProgram& prog, int batch);

// Row t of the sinusoidal positional-encoding table, width `dim`.
std::vector<double> positional_encoding(int t, int dim);

struct StepVars {
  Var h;
  Var c;  // null when the cell has no c_t tap
};

// Builds the graph for one step. Parameters are read from `store` starting at `param_base`.
StepVars forward_step(const CellProgram& prog, ParamStore& store, int param_base, const Var& x,
                      const Var& h_prev, const Var& c_prev, const Var& x_prev, int t);

std::pair<Tensor, CellState> step(const CellProgram& prog, const Tensor& x, const CellState& state);

struct SequenceResult {
  std::vector<Tensor> hs;
  CellState final_state;
};

SequenceResult run_sequence(const CellProgram& prog, const std::vector<Tensor>& xs, const CellState& init);

// One row per timestep: t, then the hidden units of batch row `batch_row`.
void write_trace_csv(std::ostream& out, const std::vector<Tensor>& hs, int batch_row = 0);

// Finite-difference check of the summed hidden states over `steps` steps from a random
// starting state (uniform in [-1, 1]) and random inputs. Throws Divergence on overflow.
GradCheckResult check_cell_gradients(const CellProgram& prog, int steps = 3, int batch = 2, std::uint64_t seed = 0);

}  // namespace archdsl
