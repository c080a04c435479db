#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace archdsl {

// Operators and source leaves of the cell DSL.
enum class OpKind {
  // unary
  MM,
  Sigmoid,
  Tanh,
  ReLU,
  Sin,
  Cos,
  LayerNorm,
  SeLU,
  // binary
  Add,
  Mult,
  Sub,
  Div,
  // ternary
  Gate3,
  // sources
  X,
  Xm1,
  Hm1,
  Cm1,
  PosEnc,
  // only produced by ranker unrolling; never parsed
  Hm2,
  Cm2,
};

inline constexpr int kNumOpKinds = static_cast<int>(OpKind::Cm2) + 1;

int arity(OpKind op);
bool is_source(OpKind op);
bool is_commutative(OpKind op);
bool is_order_sensitive(OpKind op);
bool is_extended(OpKind op);
bool is_activation(OpKind op);
// Canonical token ("MM", "x_t", ...).
std::string_view token(OpKind op);
std::optional<OpKind> op_from_token(std::string_view tok);

// Operators of the core DSL (MM, Sigmoid, Tanh, ReLU, Add, Mult, Gate3).
std::vector<OpKind> core_operators();
// Core plus Sub, Div, Sin, Cos, LayerNorm, SeLU.
std::vector<OpKind> all_operators();

struct ArchNode {
  OpKind op = OpKind::X;
  std::vector<ArchNode> children;

  ArchNode() = default;
  explicit ArchNode(OpKind o, std::vector<ArchNode> ch = {})
      : op(o), children(std::move(ch)) {}

  bool operator==(const ArchNode&) const = default;
};

// Convenience builders used by builtins and tests.
namespace build {
inline ArchNode leaf(OpKind op) { return ArchNode(op); }
inline ArchNode un(OpKind op, ArchNode a) { return ArchNode(op, {std::move(a)}); }
inline ArchNode bin(OpKind op, ArchNode a, ArchNode b) {
  return ArchNode(op, {std::move(a), std::move(b)});
}
inline ArchNode gate3(ArchNode a, ArchNode b, ArchNode f) {
  return ArchNode(OpKind::Gate3, {std::move(a), std::move(b), std::move(f)});
}
}  // namespace build

struct Architecture {
  ArchNode root;
  // 1-based operator-node index under node_numbering(); the tapped value becomes c_t.
  std::optional<int> ct_node;

  bool operator==(const Architecture&) const = default;
};

enum class Violation {
  gate_not_sigmoid,
  missing_x,
  missing_h,
  stacked_identical,
  too_tall,
  too_big,
  trivial_ct,
  ct_without_cm1,
};

std::string_view violation_name(Violation v);

struct ArchAnalysis {
  int node_count = 0;
  int height = 0;
  std::set<OpKind> sources_used;
  bool uses_ct = false;
  std::vector<Violation> validity_flags;
};

class DslError : public std::runtime_error {
 public:
  enum class Kind { syntax, arity, unknown_token, ct_range, ct_no_cm1, unknown_builtin };

  DslError(Kind kind, std::size_t position, const std::string& msg);

  Kind kind() const { return kind_; }
  std::size_t position() const { return position_; }

 private:
  Kind kind_;
  std::size_t position_;
};

// Operator nodes in numbering order: deepest level first, left to right within a
// level, root last. Entry i holds the node numbered i + 1.
std::vector<const ArchNode*> node_numbering(const ArchNode& root);

// Pointer to the node numbered `index` (1-based), or nullptr.
const ArchNode* node_at(const ArchNode& root, int index);
int operator_count(const ArchNode& node);
int operator_height(const ArchNode& node);
bool contains(const ArchNode& node, OpKind op);

Architecture parse(std::string_view text);
std::string render(const ArchNode& node);
std::string render(const Architecture& arch);

// Sorted commutative children (and the two value inputs of Gate3). `index_map`, when
// given, receives old operator index -> new operator index (both 1-based; slot 0 unused).
Architecture canonicalize(const Architecture& arch, std::vector<int>* index_map = nullptr);

// Size/height limits used for the validity flags.
struct RestrictionLimits {
  int max_nodes = 21;
  int max_height = 8;
};

std::vector<Violation> restriction_violations(const Architecture& arch,
                                              const RestrictionLimits& limits = {});
ArchAnalysis analyze(const Architecture& arch, const RestrictionLimits& limits = {});

// Every non-root operator node whose subtree holds c_{t-1} and has >= 3 operators.
std::vector<Architecture> enumerate_ct_taps(const Architecture& arch);

std::vector<std::string> builtin_names();
Architecture builtin(std::string_view name);

// Identifier of an architecture: hex prefix of SHA-256 over the canonical render.
std::string arch_id(const Architecture& arch);

}  // namespace archdsl
