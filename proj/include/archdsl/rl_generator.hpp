#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "archdsl/autograd.hpp"
#include "archdsl/dsl.hpp"
#include "archdsl/evaluator.hpp"
#include "archdsl/optim.hpp"
#include "archdsl/tensor.hpp"

namespace archdsl {

// ---------------------------------------------------------------------------
// Reward

struct RewardConfig {
  double a = 0.2;
  double base_offset = 140.0;
  double exp_base = 4.0;
  double exp_scale = 0.3815;
  double exp_shift = 50.0;
  // Task loss is mapped to gain * loss + bias and clamped to [0, base_offset].
  double gain = 1.0;
  double bias = 0.0;
  double failure_reward = 0.0;
};

double reward(const RewardConfig& cfg, double loss, RecordStatus status = RecordStatus::ok);
// Affine rescale sending `weak_loss` to 120 and `strong_loss` to 20.
void fit_reward_rescale(RewardConfig& cfg, double weak_loss, double strong_loss);

// ---------------------------------------------------------------------------
// Priors used for pre-training

struct PriorReport {
  bool depth_ok = false;          // longest root-to-leaf path, counting nodes, in [3, 11]
  bool uses_required = false;     // x_t, h_tm1, at least one MM and one activation
  bool no_identical_stack = false;
  bool no_activation_chain = false;
  bool gate_inputs_distinct = false;
  bool mm_on_sources_only = false;
  // Share of the four ingredients of `uses_required` that are present.
  double uses_fraction = 0.0;

  int satisfied() const;
  // Pre-training reward: satisfied priors over six, with partial credit for uses_required.
  double score() const;
  bool all() const { return satisfied() == 6; }
};

int node_depth(const ArchNode& n);
PriorReport check_priors(const ArchNode& root);

// ---------------------------------------------------------------------------
// Partial trees

struct PartialNode {
  std::optional<OpKind> op;  // empty slot when unset
  std::vector<PartialNode> children;
};

struct PartialArch {
  PartialNode root;
  // Path (child indices) of the slot marked as the target; the leftmost empty slot in
  // pre-order unless overridden.
  std::optional<std::vector<int>> target;

  static PartialArch empty();
  std::optional<std::vector<int>> first_empty() const;
  bool complete() const { return !first_empty().has_value(); }
  int operator_count() const;
  // Fills the current target and moves the target to the next empty slot.
  void fill(OpKind op);
  ArchNode to_tree() const;
};

// ---------------------------------------------------------------------------
// Policy

struct PolicyConfig {
  int hidden = 64;
  bool extended_dsl = false;
  std::vector<OpKind> operators;  // empty: the DSL's operator set
  std::vector<OpKind> sources;    // empty: x_t, x_tm1, h_tm1, c_tm1 (+ posenc when extended)
  int max_height = 10;            // operators only at depth < max_height
  int max_nodes = 21;
  bool allow_leaf_root = false;
  double epsilon = 0.05;
  OptimizerConfig::Kind optimizer = OptimizerConfig::Kind::adam;
  double learning_rate = 1e-2;
  double baseline_decay = 0.9;
  bool use_baseline = true;
  // Added to the pre-training reward when every prior holds.
  double prior_all_bonus = 1.0;
  // Weight of the summed per-step policy entropy subtracted from the loss.
  double entropy_weight = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Episode {
  std::vector<int> actions;
  std::vector<double> log_probs;  // under the policy at generation time, excluding epsilon
  ArchNode tree;
  double reward = 0.0;

  double total_log_prob() const;
};

struct UpdateResult {
  bool applied = false;
  double baseline_used = 0.0;
  double mean_reward = 0.0;
  std::string skipped_reason;
};

struct PretrainResult {
  double baseline_rate = 0.0;     // all-priors rate of the policy before pre-training
  double final_rate = 0.0;        // all-priors rate after pre-training
  double moving_rate = 0.0;       // last 500-episode rate during pre-training
  long episodes = 0;
};

class Policy {
 public:
  explicit Policy(PolicyConfig cfg = {});

  const std::vector<OpKind>& action_space() const { return actions_; }
  std::vector<bool> legal_actions(const PartialArch& p) const;

  Var encode(ParamStore& store, const PartialArch& p) const;

  struct HeadState {
    Var h;
    Var c;
  };
  HeadState initial_head() const;
  // Logits [1 x A] for the target slot of `p`; advances `head`.
  Var action_logits(ParamStore& store, const PartialArch& p, HeadState& head) const;
  std::vector<double> action_probabilities(const PartialArch& p, HeadState& head) const;

  int sample_action(const std::vector<double>& probs, const std::vector<bool>& legal, double epsilon,
                    std::mt19937_64& rng) const;

  Episode generate(std::mt19937_64& rng, std::optional<double> epsilon = std::nullopt) const;
  // Sum of per-step log-probabilities of replaying `ep`'s actions.
  Var episode_log_prob(ParamStore& store, const Episode& ep) const;
  // Sum of per-step entropies of the masked action distribution along `ep`.
  Var episode_entropy(ParamStore& store, const Episode& ep) const;
  double log_prob(const Episode& ep) const;

  // Loss whose gradient is the REINFORCE estimate for the batch with a fixed baseline,
  // minus entropy_weight times the mean episode entropy.
  Var policy_loss(ParamStore& store, const std::vector<Episode>& batch, double baseline) const;
  UpdateResult reinforce_update(const std::vector<Episode>& batch);

  // Trains on the fraction of satisfied priors until `budget` episodes or a 500-episode
  // moving all-priors rate of 0.95. Resets the baseline and optimizer state afterwards.
  PretrainResult pretrain_priors(long budget, std::mt19937_64& rng, int batch_size = 16, int measure_samples = 1000);
  // Fraction of `n` samples drawn without exploration (epsilon 0) satisfying all priors.
  double prior_rate(int n, std::mt19937_64& rng) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const PolicyConfig& config() const { return cfg_; }
  std::optional<double> baseline() const { return baseline_; }

  void reset_training_state();
  void save(const std::string& path) const;
  static Policy load(const std::string& path);

 private:
  // Encodings of completed subtrees, valid for one partial tree as it is filled in place.
  using EncodeCache = std::unordered_map<const PartialNode*, Var>;

  int token_of(const PartialNode& n, bool is_target) const;
  // Returns the node state; `complete` reports whether the subtree has no empty slot.
  Var encode_node(ParamStore& store, const PartialNode& n, std::vector<int>& path, const std::vector<int>& target,
                  EncodeCache* cache, bool& complete) const;
  Var encode_with(ParamStore& store, const PartialArch& p, EncodeCache* cache) const;
  Var logits_with(ParamStore& store, const PartialArch& p, HeadState& head, EncodeCache* cache) const;
  Var replay(ParamStore& store, const Episode& ep, std::vector<Var>* entropies) const;
  static HeadState lstm(ParamStore& store, const std::string& prefix, const Var& x, const HeadState& s);

  PolicyConfig cfg_;
  std::vector<OpKind> actions_;
  ParamStore params_;
  std::optional<double> baseline_;
  Optimizer optimizer_;
};

}  // namespace archdsl
