#include "archdsl/dsl.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <utility>

namespace archdsl {

namespace {

struct OpInfo {
  OpKind op;
  std::string_view token;
  int arity;
};

constexpr std::array<OpInfo, kNumOpKinds> kOps{{
    {OpKind::MM, "MM", 1},
    {OpKind::Sigmoid, "Sigmoid", 1},
    {OpKind::Tanh, "Tanh", 1},
    {OpKind::ReLU, "ReLU", 1},
    {OpKind::Sin, "Sin", 1},
    {OpKind::Cos, "Cos", 1},
    {OpKind::LayerNorm, "LayerNorm", 1},
    {OpKind::SeLU, "SeLU", 1},
    {OpKind::Add, "Add", 2},
    {OpKind::Mult, "Mult", 2},
    {OpKind::Sub, "Sub", 2},
    {OpKind::Div, "Div", 2},
    {OpKind::Gate3, "Gate3", 3},
    {OpKind::X, "x_t", 0},
    {OpKind::Xm1, "x_tm1", 0},
    {OpKind::Hm1, "h_tm1", 0},
    {OpKind::Cm1, "c_tm1", 0},
    {OpKind::PosEnc, "posenc", 0},
    {OpKind::Hm2, "h_tm2", 0},
    {OpKind::Cm2, "c_tm2", 0},
}};

const OpInfo& info(OpKind op) { return kOps[static_cast<std::size_t>(op)]; }

}  // namespace

int arity(OpKind op) { return info(op).arity; }
bool is_source(OpKind op) { return info(op).arity == 0; }
bool is_commutative(OpKind op) { return op == OpKind::Add || op == OpKind::Mult; }
bool is_order_sensitive(OpKind op) {
  return op == OpKind::Gate3 || op == OpKind::Sub || op == OpKind::Div;
}
bool is_extended(OpKind op) {
  switch (op) {
    case OpKind::Sub:
    case OpKind::Div:
    case OpKind::Sin:
    case OpKind::Cos:
    case OpKind::PosEnc:
    case OpKind::LayerNorm:
    case OpKind::SeLU:
      return true;
    default:
      return false;
  }
}
bool is_activation(OpKind op) {
  switch (op) {
    case OpKind::Sigmoid:
    case OpKind::Tanh:
    case OpKind::ReLU:
    case OpKind::Sin:
    case OpKind::Cos:
    case OpKind::SeLU:
      return true;
    default:
      return false;
  }
}

std::string_view token(OpKind op) { return info(op).token; }

std::optional<OpKind> op_from_token(std::string_view tok) {
  for (const auto& i : kOps) {
    if (i.token == tok) return i.op;
  }
  return std::nullopt;
}

std::vector<OpKind> core_operators() {
  return {OpKind::MM, OpKind::Sigmoid, OpKind::Tanh, OpKind::ReLU,
          OpKind::Add, OpKind::Mult, OpKind::Gate3};
}

std::vector<OpKind> all_operators() {
  std::vector<OpKind> ops;
  for (const auto& i : kOps) {
    if (i.arity > 0) ops.push_back(i.op);
  }
  return ops;
}

std::string_view violation_name(Violation v) {
  switch (v) {
    case Violation::gate_not_sigmoid: return "gate_not_sigmoid";
    case Violation::missing_x: return "missing_x";
    case Violation::missing_h: return "missing_h";
    case Violation::stacked_identical: return "stacked_identical";
    case Violation::too_tall: return "too_tall";
    case Violation::too_big: return "too_big";
    case Violation::trivial_ct: return "trivial_ct";
    case Violation::ct_without_cm1: return "ct_without_cm1";
  }
  return "unknown";
}

DslError::DslError(Kind kind, std::size_t position, const std::string& msg)
    : std::runtime_error(msg + " (at " + std::to_string(position) + ")"),
      kind_(kind),
      position_(position) {}

// ---------------------------------------------------------------------------
// Structure

namespace {

template <typename Node>
std::vector<const Node*> number_nodes(const Node& root) {
  std::vector<std::vector<const Node*>> levels;
  std::vector<const Node*> current{&root};
  while (!current.empty()) {
    std::vector<const Node*> next;
    std::vector<const Node*> ops;
    for (const Node* n : current) {
      if (!is_source(n->op)) ops.push_back(n);
      for (const auto& c : n->children) next.push_back(&c);
    }
    levels.push_back(std::move(ops));
    current = std::move(next);
  }
  std::vector<const Node*> order;
  for (auto it = levels.rbegin(); it != levels.rend(); ++it) {
    order.insert(order.end(), it->begin(), it->end());
  }
  return order;
}

}  // namespace

std::vector<const ArchNode*> node_numbering(const ArchNode& root) {
  return number_nodes(root);
}

const ArchNode* node_at(const ArchNode& root, int index) {
  auto order = node_numbering(root);
  if (index < 1 || index > static_cast<int>(order.size())) return nullptr;
  return order[static_cast<std::size_t>(index - 1)];
}

int operator_count(const ArchNode& node) {
  if (is_source(node.op)) return 0;
  int n = 1;
  for (const auto& c : node.children) n += operator_count(c);
  return n;
}

int operator_height(const ArchNode& node) {
  int h = 0;
  for (const auto& c : node.children) {
    if (!is_source(c.op)) h = std::max(h, 1 + operator_height(c));
  }
  return h;
}

bool contains(const ArchNode& node, OpKind op) {
  if (node.op == op) return true;
  return std::any_of(node.children.begin(), node.children.end(),
                     [op](const ArchNode& c) { return contains(c, op); });
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  Architecture parse_arch() {
    ArchNode root = parse_node({});
    skip_ws();
    std::optional<int> ct;
    if (peek() == '|') {
      if (marker_path_) {
        throw DslError(DslError::Kind::syntax, pos_, "both '|n' and '@ct(...)' given");
      }
      ++pos_;
      skip_ws();
      const std::size_t start = pos_;
      marker_pos_ = start;
      while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
      if (start == pos_) throw DslError(DslError::Kind::syntax, pos_, "expected node index after '|'");
      ct = std::stoi(std::string(text_.substr(start, pos_ - start)));
      const int count = operator_count(root);
      if (*ct < 1 || *ct > count) {
        throw DslError(DslError::Kind::ct_range, start,
                       "c_t index " + std::to_string(*ct) + " outside 1.." + std::to_string(count));
      }
    }
    skip_ws();
    if (pos_ != text_.size()) {
      throw DslError(DslError::Kind::syntax, pos_, "unexpected trailing input");
    }
    if (marker_path_) {
      const ArchNode* target = &root;
      for (std::size_t i : *marker_path_) target = &target->children[i];
      auto order = node_numbering(root);
      auto it = std::find(order.begin(), order.end(), target);
      ct = static_cast<int>(it - order.begin()) + 1;
    }
    if (ct) {
      const ArchNode* tapped = node_at(root, *ct);
      if (!contains(*tapped, OpKind::Cm1)) {
        throw DslError(DslError::Kind::ct_no_cm1, marker_pos_,
                       "c_t node " + std::to_string(*ct) + " does not depend on c_tm1");
      }
    }
    return Architecture{std::move(root), ct};
  }

 private:
  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  void expect(char c) {
    skip_ws();
    if (peek() != c) {
      throw DslError(DslError::Kind::syntax, pos_,
                     std::string("expected '") + c + "'" +
                         (pos_ < text_.size() ? std::string(" but found '") + peek() + "'"
                                              : std::string(" but reached end of input")));
    }
    ++pos_;
  }

  std::string read_ident() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() &&
           (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_')) {
      ++pos_;
    }
    return std::string(text_.substr(start, pos_ - start));
  }

  static std::optional<OpKind> typeset_source(std::string s) {
    s.erase(std::remove_if(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); }),
            s.end());
    if (s == "x_t") return OpKind::X;
    if (s == "x_{t-1}") return OpKind::Xm1;
    if (s == "h_{t-1}") return OpKind::Hm1;
    if (s == "c_{t-1}") return OpKind::Cm1;
    return std::nullopt;
  }

  static std::optional<OpKind> var_alias(const std::string& s) {
    if (s == "x") return OpKind::X;
    if (s == "xm1") return OpKind::Xm1;
    if (s == "hm1") return OpKind::Hm1;
    if (s == "cm1") return OpKind::Cm1;
    if (s == "fixed_posenc" || s == "posenc") return OpKind::PosEnc;
    return std::nullopt;
  }

  ArchNode parse_node(std::vector<std::size_t> path) {
    skip_ws();
    const std::size_t start = pos_;
    if (peek() == '\0') throw DslError(DslError::Kind::syntax, pos_, "unexpected end of input");
    if (peek() == '$') {
      const auto close = text_.find('$', pos_ + 1);
      if (close == std::string_view::npos) {
        throw DslError(DslError::Kind::syntax, pos_, "unterminated '$' source");
      }
      auto op = typeset_source(std::string(text_.substr(pos_ + 1, close - pos_ - 1)));
      if (!op) throw DslError(DslError::Kind::unknown_token, pos_, "unknown typeset source");
      pos_ = close + 1;
      return ArchNode(*op);
    }
    if (peek() == '@') {
      ++pos_;
      const std::string name = read_ident();
      if (name != "ct") throw DslError(DslError::Kind::unknown_token, start, "unknown marker '@" + name + "'");
      if (marker_path_) throw DslError(DslError::Kind::syntax, start, "more than one @ct marker");
      expect('(');
      marker_path_ = path;
      marker_pos_ = start;
      ArchNode inner = parse_node(path);
      expect(')');
      if (is_source(inner.op)) {
        throw DslError(DslError::Kind::ct_range, start, "@ct must wrap an operator node");
      }
      return inner;
    }
    const std::string name = read_ident();
    if (name.empty()) {
      throw DslError(DslError::Kind::syntax, pos_, std::string("unexpected character '") + peek() + "'");
    }
    if (name == "Var") {
      expect('(');
      skip_ws();
      const char quote = peek();
      if (quote != '\'' && quote != '"') throw DslError(DslError::Kind::syntax, pos_, "expected quoted name");
      const auto close = text_.find(quote, pos_ + 1);
      if (close == std::string_view::npos) throw DslError(DslError::Kind::syntax, pos_, "unterminated string");
      auto op = var_alias(std::string(text_.substr(pos_ + 1, close - pos_ - 1)));
      if (!op) throw DslError(DslError::Kind::unknown_token, pos_, "unknown Var alias");
      pos_ = close + 1;
      expect(')');
      return ArchNode(*op);
    }
    auto op = op_from_token(name);
    if (!op || *op == OpKind::Hm2 || *op == OpKind::Cm2) {
      throw DslError(DslError::Kind::unknown_token, start, "unknown token '" + name + "'");
    }
    if (is_source(*op)) return ArchNode(*op);

    expect('(');
    std::vector<ArchNode> children;
    while (true) {
      auto child_path = path;
      child_path.push_back(children.size());
      children.push_back(parse_node(std::move(child_path)));
      skip_ws();
      if (peek() == ',') {
        ++pos_;
        skip_ws();
        if (peek() == ')') break;  // tolerated trailing comma
        continue;
      }
      break;
    }
    expect(')');
    if (static_cast<int>(children.size()) != arity(*op)) {
      throw DslError(DslError::Kind::arity, start,
                     std::string(token(*op)) + " takes " + std::to_string(arity(*op)) +
                         " argument(s), got " + std::to_string(children.size()));
    }
    return ArchNode(*op, std::move(children));
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  std::optional<std::vector<std::size_t>> marker_path_;
  std::size_t marker_pos_ = 0;
};

void render_into(const ArchNode& node, std::string& out) {
  out += token(node.op);
  if (node.children.empty()) return;
  out += '(';
  for (std::size_t i = 0; i < node.children.size(); ++i) {
    if (i) out += ',';
    render_into(node.children[i], out);
  }
  out += ')';
}

}  // namespace

Architecture parse(std::string_view text) { return Parser(text).parse_arch(); }

std::string render(const ArchNode& node) {
  std::string out;
  render_into(node, out);
  return out;
}

std::string render(const Architecture& arch) {
  std::string out = render(arch.root);
  if (arch.ct_node) out += "|" + std::to_string(*arch.ct_node);
  return out;
}

// ---------------------------------------------------------------------------
// Canonical ordering

namespace {

struct Tagged {
  OpKind op;
  int old_index = 0;
  bool has_ct = false;
  std::string key;
  std::vector<Tagged> children;
};

Tagged tag(const ArchNode& node, const std::vector<const ArchNode*>& order, int ct) {
  Tagged t;
  t.op = node.op;
  if (!is_source(node.op)) {
    auto it = std::find(order.begin(), order.end(), &node);
    t.old_index = static_cast<int>(it - order.begin()) + 1;
  }
  for (const auto& c : node.children) t.children.push_back(tag(c, order, ct));
  t.has_ct = (t.old_index != 0 && t.old_index == ct) ||
             std::any_of(t.children.begin(), t.children.end(), [](const Tagged& c) { return c.has_ct; });
  return t;
}

void sort_tagged(Tagged& t) {
  for (auto& c : t.children) sort_tagged(c);
  auto less = [](const Tagged& a, const Tagged& b) {
    if (a.key != b.key) return a.key < b.key;
    return a.has_ct && !b.has_ct;
  };
  if (is_commutative(t.op)) {
    std::sort(t.children.begin(), t.children.end(), less);
  } else if (t.op == OpKind::Gate3) {
    if (less(t.children[1], t.children[0])) std::swap(t.children[0], t.children[1]);
  }
  t.key = std::string(token(t.op));
  if (!t.children.empty()) {
    t.key += '(';
    for (std::size_t i = 0; i < t.children.size(); ++i) {
      if (i) t.key += ',';
      t.key += t.children[i].key;
    }
    t.key += ')';
  }
}

ArchNode untag(const Tagged& t) {
  ArchNode n(t.op);
  for (const auto& c : t.children) n.children.push_back(untag(c));
  return n;
}

}  // namespace

Architecture canonicalize(const Architecture& arch, std::vector<int>* index_map) {
  const auto old_order = node_numbering(arch.root);
  Tagged t = tag(arch.root, old_order, arch.ct_node.value_or(0));
  sort_tagged(t);
  const auto new_order = number_nodes(t);
  std::vector<int> map(old_order.size() + 1, 0);
  for (std::size_t i = 0; i < new_order.size(); ++i) {
    map[static_cast<std::size_t>(new_order[i]->old_index)] = static_cast<int>(i) + 1;
  }
  Architecture out{untag(t), std::nullopt};
  if (arch.ct_node) out.ct_node = map[static_cast<std::size_t>(*arch.ct_node)];
  if (index_map) *index_map = std::move(map);
  return out;
}

// ---------------------------------------------------------------------------
// Analysis

namespace {

void collect_violations(const ArchNode& node, bool& gate_bad, bool& stacked) {
  if (node.op == OpKind::Gate3 && node.children[2].op != OpKind::Sigmoid) gate_bad = true;
  for (const auto& c : node.children) {
    if (!is_source(c.op) && c.op == node.op) stacked = true;
    collect_violations(c, gate_bad, stacked);
  }
}

void collect_sources(const ArchNode& node, std::set<OpKind>& out) {
  if (is_source(node.op)) out.insert(node.op);
  for (const auto& c : node.children) collect_sources(c, out);
}

}  // namespace

std::vector<Violation> restriction_violations(const Architecture& arch,
                                              const RestrictionLimits& limits) {
  std::vector<Violation> v;
  bool gate_bad = false;
  bool stacked = false;
  collect_violations(arch.root, gate_bad, stacked);
  if (gate_bad) v.push_back(Violation::gate_not_sigmoid);
  if (!contains(arch.root, OpKind::X)) v.push_back(Violation::missing_x);
  if (!contains(arch.root, OpKind::Hm1)) v.push_back(Violation::missing_h);
  if (stacked) v.push_back(Violation::stacked_identical);
  if (operator_height(arch.root) > limits.max_height) v.push_back(Violation::too_tall);
  if (operator_count(arch.root) > limits.max_nodes) v.push_back(Violation::too_big);
  if (arch.ct_node) {
    const ArchNode* tapped = node_at(arch.root, *arch.ct_node);
    if (tapped == nullptr || tapped == &arch.root || operator_count(*tapped) < 3) {
      v.push_back(Violation::trivial_ct);
    }
    if (tapped == nullptr || !contains(*tapped, OpKind::Cm1)) v.push_back(Violation::ct_without_cm1);
  } else if (contains(arch.root, OpKind::Cm1)) {
    v.push_back(Violation::ct_without_cm1);
  }
  return v;
}

ArchAnalysis analyze(const Architecture& arch, const RestrictionLimits& limits) {
  ArchAnalysis a;
  a.node_count = operator_count(arch.root);
  a.height = operator_height(arch.root);
  collect_sources(arch.root, a.sources_used);
  a.uses_ct = arch.ct_node.has_value();
  a.validity_flags = restriction_violations(arch, limits);
  return a;
}

std::vector<Architecture> enumerate_ct_taps(const Architecture& arch) {
  std::vector<Architecture> taps;
  if (!contains(arch.root, OpKind::Cm1)) return taps;
  const auto order = node_numbering(arch.root);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const ArchNode* n = order[i];
    if (n == &arch.root) continue;
    if (contains(*n, OpKind::Cm1) && operator_count(*n) >= 3) {
      taps.push_back(Architecture{arch.root, static_cast<int>(i) + 1});
    }
  }
  return taps;
}

// ---------------------------------------------------------------------------
// Built-in cells

namespace {

constexpr std::string_view kGruListing = R"(
Gate3(
    Tanh(
        Add(
            MM($x_t$),
            Mult(
                MM($h_{t-1}$),
                Sigmoid(
                    Add( MM($h_{t-1}$), MM($x_t$) )
                )
            )
        )
    ),
    $h_{t-1}$,
    Sigmoid(
        Add( MM($h_{t-1}$), MM($x_t$) ),
    )
)
)";

// c_t is tapped at the Tanh wrapping the inner Gate3.
constexpr std::string_view kBc3Listing = R"(
Gate3(
    @ct(Tanh(
        Gate3(
            MM($x_t$),
            Mult(
                MM(
                    Mult(MM($c_{t-1}$),MM($x_t$))
                ),
                MM($x_t$)
            ),
            Sigmoid(
                Add( MM($x_t$), MM($h_{t-1}$) )
            )
        )
    )),
    $h_{t-1}$,
    Sigmoid(
        Add( MM($x_t$), MM($h_{t-1}$) )
    )
)
)";

// c_t = f*c_{t-1} + i*g; h_t = o*tanh(c_t).
constexpr std::string_view kLstm =
    "Mult(Sigmoid(Add(MM(x_t),MM(h_tm1))),"
    "Tanh(@ct(Add(Mult(Sigmoid(Add(MM(x_t),MM(h_tm1))),c_tm1),"
    "Mult(Sigmoid(Add(MM(x_t),MM(h_tm1))),Tanh(Add(MM(x_t),MM(h_tm1))))))))";

// f = sigmoid(Wx + Uh); h~ = tanh(Wx + U(f*h)); h_t = f*h~ + (1-f)*h.
constexpr std::string_view kMgu =
    "Gate3(Tanh(Add(MM(x_t),MM(Mult(Sigmoid(Add(MM(x_t),MM(h_tm1))),h_tm1)))),"
    "h_tm1,Sigmoid(Add(MM(x_t),MM(h_tm1))))";

constexpr std::string_view kTanhRnn = "Tanh(Add(MM(x_t),MM(h_tm1)))";

}  // namespace

std::vector<std::string> builtin_names() { return {"tanh_rnn", "gru", "lstm", "mgu", "bc3"}; }

Architecture builtin(std::string_view name) {
  if (name == "tanh_rnn") return parse(kTanhRnn);
  if (name == "gru") return parse(kGruListing);
  if (name == "lstm") return parse(kLstm);
  if (name == "mgu") return parse(kMgu);
  if (name == "bc3") return parse(kBc3Listing);
  throw DslError(DslError::Kind::unknown_builtin, 0, "unknown built-in cell '" + std::string(name) + "'");
}

std::string arch_id(const Architecture& arch) {
  const std::string text = render(canonicalize(arch));
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_Digest(text.data(), text.size(), digest.data(), &len, EVP_sha256(), nullptr);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < 8 && i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

}  // namespace archdsl
