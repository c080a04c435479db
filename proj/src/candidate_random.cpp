#include "archdsl/candidate_random.hpp"

#include <algorithm>
#include <stdexcept>

namespace archdsl {

void GenConfig::validate() const {
  if (max_nodes < 1) throw std::invalid_argument("max_nodes must be >= 1");
  if (max_height < 0) throw std::invalid_argument("max_height must be >= 0");
  for (const auto& [op, w] : weights) {
    if (w < 0.0) throw std::invalid_argument("operator weights must be nonnegative");
  }
  for (OpKind s : require_sources) {
    if (s != OpKind::X && s != OpKind::Hm1) {
      throw std::invalid_argument("only x_t and h_tm1 can be required sources");
    }
  }
  auto positive = [&](const std::vector<OpKind>& kinds) {
    return std::any_of(kinds.begin(), kinds.end(), [&](OpKind k) {
      auto it = weights.find(k);
      return it == weights.end() || it->second > 0.0;
    });
  };
  if (!positive(allowed_sources())) throw std::invalid_argument("every source has weight zero");
  const auto ops = allowed_operators();
  for (int arity_class : {1, 2, 3}) {
    std::vector<OpKind> same;
    for (OpKind op : ops) {
      if (arity(op) == arity_class) same.push_back(op);
    }
    if (!same.empty() && !positive(same)) {
      throw std::invalid_argument("every operator of arity " + std::to_string(arity_class) + " has weight zero");
    }
  }
}

std::vector<OpKind> GenConfig::allowed_operators() const {
  return extended_dsl ? all_operators() : core_operators();
}

std::vector<OpKind> GenConfig::allowed_sources() const {
  std::vector<OpKind> s{OpKind::X, OpKind::Xm1, OpKind::Hm1, OpKind::Cm1};
  if (extended_dsl) s.push_back(OpKind::PosEnc);
  return s;
}

RestrictionReport check_restrictions(const Architecture& arch, const GenConfig& cfg) {
  RestrictionReport r;
  for (Violation v : restriction_violations(arch, {cfg.max_nodes, cfg.max_height})) {
    if (v == Violation::missing_x && !cfg.require_sources.contains(OpKind::X)) continue;
    if (v == Violation::missing_h && !cfg.require_sources.contains(OpKind::Hm1)) continue;
    r.violations.push_back(v);
  }
  return r;
}

std::vector<Architecture> expand_ct_variants(const Architecture& arch, const GenConfig& cfg) {
  if (!contains(arch.root, OpKind::Cm1)) return {arch};
  std::vector<Architecture> out;
  for (const auto& variant : enumerate_ct_taps(Architecture{arch.root, std::nullopt})) {
    Architecture canon = canonicalize(variant);
    if (check_restrictions(canon, cfg).ok()) out.push_back(std::move(canon));
  }
  return out;
}

RandomGenerator::RandomGenerator(GenConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
  cfg_.validate();
  ops_ = cfg_.allowed_operators();
  sources_ = cfg_.allowed_sources();
  auto weight = [&](OpKind k) {
    auto it = cfg_.weights.find(k);
    return it == cfg_.weights.end() ? 1.0 : it->second;
  };
  for (OpKind op : ops_) op_weights_.push_back(weight(op));
  for (OpKind s : sources_) source_weights_.push_back(weight(s));
}

ArchNode RandomGenerator::grow_node(int depth) {
  const bool operator_allowed = depth < cfg_.max_height;
  std::vector<double> w = source_weights_;
  if (operator_allowed) w.insert(w.end(), op_weights_.begin(), op_weights_.end());
  const auto pick = std::discrete_distribution<std::size_t>(w.begin(), w.end())(rng_);
  if (pick < sources_.size()) return ArchNode(sources_[pick]);
  ArchNode n(ops_[pick - sources_.size()]);
  for (int i = 0; i < arity(n.op); ++i) n.children.push_back(grow_node(depth + 1));
  return n;
}

Architecture RandomGenerator::grow() {
  return canonicalize(Architecture{grow_node(0), std::nullopt});
}

BatchResult RandomGenerator::generate_batch(int n, const std::set<std::string>& seen) {
  if (n < 1) throw std::invalid_argument("generate_batch needs n >= 1");
  BatchResult out;
  std::set<std::string> taken;
  const long budget = 100L * n;
  while (static_cast<int>(out.candidates.size()) < n && out.draws < budget) {
    ++out.draws;
    ArchNode raw = grow_node(0);
    // Cheap size rejection before the canonical form is built.
    if (operator_count(raw) > cfg_.max_nodes) continue;
    const Architecture tree = canonicalize(Architecture{std::move(raw), std::nullopt});
    // Tap-related flags are settled by the expansion below.
    const auto report = check_restrictions(tree, cfg_);
    const bool admissible = std::all_of(report.violations.begin(), report.violations.end(), [](Violation v) {
      return v == Violation::ct_without_cm1;
    });
    if (!admissible) continue;
    for (auto& cand : expand_ct_variants(tree, cfg_)) {
      if (static_cast<int>(out.candidates.size()) >= n) break;
      std::string id = arch_id(cand);
      if (seen.contains(id) || !taken.insert(id).second) continue;
      out.ids.push_back(std::move(id));
      out.candidates.push_back(std::move(cand));
    }
  }
  out.short_batch = static_cast<int>(out.candidates.size()) < n;
  return out;
}

Architecture grow_random(const GenConfig& cfg) { return RandomGenerator(cfg).grow(); }

BatchResult generate_batch(const GenConfig& cfg, int n, const std::set<std::string>& seen) {
  return RandomGenerator(cfg).generate_batch(n, seen);
}

}  // namespace archdsl
