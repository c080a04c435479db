#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "archdsl/dsl.hpp"

namespace archdsl {

struct GenConfig {
  int max_nodes = 21;
  int max_height = 8;
  bool extended_dsl = false;
  // Sampling weight per operator or source kind; kinds missing from the map weigh 1.
  std::map<OpKind, double> weights;
  std::uint64_t seed = 0;
  std::set<OpKind> require_sources{OpKind::X, OpKind::Hm1};

  void validate() const;
  std::vector<OpKind> allowed_operators() const;
  std::vector<OpKind> allowed_sources() const;
};

struct RestrictionReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

RestrictionReport check_restrictions(const Architecture& arch, const GenConfig& cfg);

// One admissible candidate per valid c_t tap when the tree reads c_tm1, the tree itself
// otherwise. An empty result means the candidate is discarded.
std::vector<Architecture> expand_ct_variants(const Architecture& arch, const GenConfig& cfg = {});

struct BatchResult {
  std::vector<Architecture> candidates;
  std::vector<std::string> ids;
  long draws = 0;
  bool short_batch = false;
};

// Grows trees from the output node down. Children are filled left to right; a slot at
// depth d may hold an operator only while d < max_height, so the height bound always
// terminates growth.
class RandomGenerator {
 public:
  explicit RandomGenerator(GenConfig cfg);

  // Raw grown tree, canonicalized, before any restriction filtering.
  Architecture grow();
  // Draws until n admissible, c_t-expanded candidates with ids outside `seen` (and
  // distinct from each other) are found, or 100*n draws were spent.
  BatchResult generate_batch(int n, const std::set<std::string>& seen = {});

  const GenConfig& config() const { return cfg_; }

 private:
  ArchNode grow_node(int depth);

  GenConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<OpKind> ops_;
  std::vector<OpKind> sources_;
  std::vector<double> op_weights_;
  std::vector<double> source_weights_;
};

Architecture grow_random(const GenConfig& cfg);
BatchResult generate_batch(const GenConfig& cfg, int n, const std::set<std::string>& seen = {});

}  // namespace archdsl
