#include "archdsl/rl_generator.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <set>
#include <stdexcept>

#include "archdsl/checkpoint.hpp"

namespace archdsl {

double reward(const RewardConfig& cfg, double loss, RecordStatus status) {
  if (status != RecordStatus::ok || !std::isfinite(loss)) return cfg.failure_reward;
  const double l = std::clamp(cfg.gain * loss + cfg.bias, 0.0, cfg.base_offset);
  const double margin = cfg.base_offset - l;
  return cfg.a * margin + std::pow(cfg.exp_base, cfg.exp_scale * margin - cfg.exp_shift);
}

void fit_reward_rescale(RewardConfig& cfg, double weak_loss, double strong_loss) {
  if (!std::isfinite(weak_loss) || !std::isfinite(strong_loss) || weak_loss <= strong_loss) {
    throw std::invalid_argument("reward rescale needs a weak loss strictly above the strong loss");
  }
  cfg.gain = 100.0 / (weak_loss - strong_loss);
  cfg.bias = 120.0 - cfg.gain * weak_loss;
}

// ---------------------------------------------------------------------------

int PriorReport::satisfied() const {
  return int(depth_ok) + int(uses_required) + int(no_identical_stack) + int(no_activation_chain) +
         int(gate_inputs_distinct) + int(mm_on_sources_only);
}

double PriorReport::score() const {
  const int others = satisfied() - int(uses_required);
  return (others + (uses_required ? 1.0 : uses_fraction)) / 6.0;
}

int node_depth(const ArchNode& n) {
  int d = 0;
  for (const auto& c : n.children) d = std::max(d, node_depth(c));
  return d + 1;
}

namespace {

void walk_priors(const ArchNode& n, PriorReport& r) {
  for (const auto& c : n.children) {
    if (!is_source(n.op) && c.op == n.op) r.no_identical_stack = false;
    if (is_activation(n.op) && is_activation(c.op)) r.no_activation_chain = false;
    if (n.op == OpKind::MM && !is_source(c.op)) r.mm_on_sources_only = false;
    walk_priors(c, r);
  }
  if (n.op == OpKind::Gate3) {
    const std::set<std::string> distinct{render(n.children[0]), render(n.children[1]), render(n.children[2])};
    if (distinct.size() != 3) r.gate_inputs_distinct = false;
  }
}

bool has_activation(const ArchNode& n) {
  if (is_activation(n.op)) return true;
  return std::any_of(n.children.begin(), n.children.end(), [](const ArchNode& c) { return has_activation(c); });
}

}  // namespace

PriorReport check_priors(const ArchNode& root) {
  PriorReport r;
  const int d = node_depth(root);
  r.depth_ok = d >= 3 && d <= 11;
  const int parts = int(contains(root, OpKind::X)) + int(contains(root, OpKind::Hm1)) +
                    int(contains(root, OpKind::MM)) + int(has_activation(root));
  r.uses_required = parts == 4;
  r.uses_fraction = parts / 4.0;
  r.no_identical_stack = true;
  r.no_activation_chain = true;
  r.gate_inputs_distinct = true;
  r.mm_on_sources_only = true;
  walk_priors(root, r);
  return r;
}

// ---------------------------------------------------------------------------

PartialArch PartialArch::empty() {
  PartialArch p;
  p.target = std::vector<int>{};
  return p;
}

namespace {

bool find_empty(const PartialNode& n, std::vector<int>& path) {
  if (!n.op) return true;
  for (std::size_t i = 0; i < n.children.size(); ++i) {
    path.push_back(static_cast<int>(i));
    if (find_empty(n.children[i], path)) return true;
    path.pop_back();
  }
  return false;
}

int count_ops(const PartialNode& n) {
  int k = n.op && !is_source(*n.op) ? 1 : 0;
  for (const auto& c : n.children) k += count_ops(c);
  return k;
}

ArchNode to_arch_node(const PartialNode& n) {
  if (!n.op) throw std::logic_error("partial tree still has empty slots");
  ArchNode out(*n.op);
  for (const auto& c : n.children) out.children.push_back(to_arch_node(c));
  return out;
}

}  // namespace

std::optional<std::vector<int>> PartialArch::first_empty() const {
  std::vector<int> path;
  if (find_empty(root, path)) return path;
  return std::nullopt;
}

int PartialArch::operator_count() const { return count_ops(root); }

void PartialArch::fill(OpKind op) {
  const auto path = target ? target : first_empty();
  if (!path) throw std::logic_error("fill on a complete partial tree");
  PartialNode* n = &root;
  for (int i : *path) n = &n->children.at(static_cast<std::size_t>(i));
  if (n->op) throw std::logic_error("fill target is not an empty slot");
  n->op = op;
  n->children.assign(static_cast<std::size_t>(arity(op)), PartialNode{});
  target = first_empty();
}

ArchNode PartialArch::to_tree() const { return to_arch_node(root); }

// ---------------------------------------------------------------------------

void PolicyConfig::validate() const {
  if (hidden < 1) throw std::invalid_argument("policy hidden size must be >= 1");
  if (max_height < 0) throw std::invalid_argument("policy max_height must be >= 0");
  if (max_nodes < 1) throw std::invalid_argument("policy max_nodes must be >= 1");
  if (epsilon < 0.0 || epsilon > 1.0) throw std::invalid_argument("policy epsilon must be in [0, 1]");
  if (learning_rate <= 0.0) throw std::invalid_argument("policy learning rate must be positive");
  if (entropy_weight < 0.0) throw std::invalid_argument("policy entropy weight must be >= 0");
  if (baseline_decay < 0.0 || baseline_decay >= 1.0) throw std::invalid_argument("baseline decay must be in [0, 1)");
  for (OpKind op : operators) {
    if (is_source(op)) throw std::invalid_argument("policy operator list contains a source");
  }
  for (OpKind op : sources) {
    if (!is_source(op) || op == OpKind::Hm2 || op == OpKind::Cm2) {
      throw std::invalid_argument("policy source list contains a non-source");
    }
  }
  if (!allow_leaf_root && max_height == 0) throw std::invalid_argument("root must be an operator but max_height is 0");
}

double Episode::total_log_prob() const { return std::accumulate(log_probs.begin(), log_probs.end(), 0.0); }

namespace {

constexpr int kEmptyToken = kNumOpKinds;
constexpr int kTargetToken = kNumOpKinds + 1;

OptimizerConfig policy_optimizer(OptimizerConfig::Kind kind, double lr) {
  OptimizerConfig oc;
  oc.kind = kind;
  oc.learning_rate = lr;
  oc.clip_value.reset();
  return oc;
}

std::vector<double> masked_softmax(const Tensor& logits, const std::vector<bool>& legal) {
  double mx = -INFINITY;
  for (std::size_t i = 0; i < legal.size(); ++i) {
    if (legal[i]) mx = std::max(mx, logits.data[i]);
  }
  std::vector<double> probs(legal.size(), 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < legal.size(); ++i) {
    if (legal[i]) z += probs[i] = std::exp(logits.data[i] - mx);
  }
  for (auto& v : probs) v /= z;
  return probs;
}

}  // namespace

Policy::Policy(PolicyConfig cfg) : cfg_(std::move(cfg)), optimizer_(policy_optimizer(cfg_.optimizer, cfg_.learning_rate)) {
  cfg_.validate();
  std::vector<OpKind> ops = cfg_.operators;
  if (ops.empty() && cfg_.sources.empty()) ops = cfg_.extended_dsl ? all_operators() : core_operators();
  std::vector<OpKind> srcs = cfg_.sources;
  if (srcs.empty()) {
    srcs = {OpKind::X, OpKind::Xm1, OpKind::Hm1, OpKind::Cm1};
    if (cfg_.extended_dsl) srcs.push_back(OpKind::PosEnc);
  }
  if (!cfg_.allow_leaf_root && ops.empty()) throw std::invalid_argument("root must be an operator but none are allowed");
  actions_ = ops;
  actions_.insert(actions_.end(), srcs.begin(), srcs.end());

  const int H = cfg_.hidden;
  const int A = static_cast<int>(actions_.size());
  std::mt19937_64 init(cfg_.seed ^ 0x51ed2701c3a4f9e5ULL);
  auto uniform = [&](std::vector<int> shape, double bound) {
    Tensor t = Tensor::zeros(std::move(shape));
    std::uniform_real_distribution<double> d(-bound, bound);
    for (auto& v : t.data) v = d(init);
    return t;
  };
  const double k = 1.0 / std::sqrt(static_cast<double>(H));
  auto lstm_params = [&](const std::string& prefix) {
    params_.add(prefix + "Wx", uniform({4 * H, H}, k));
    params_.add(prefix + "Wh", uniform({4 * H, H}, k));
    Tensor b = Tensor::zeros({4 * H});
    for (int i = H; i < 2 * H; ++i) b.data[static_cast<std::size_t>(i)] = 1.0;
    params_.add(prefix + "b", std::move(b));
  };
  params_.add("token.embedding", uniform({kNumOpKinds + 2, H}, 0.5));
  lstm_params("enc.");
  params_.add("head.in.W", uniform({H, H}, k));
  params_.add("head.in.b", Tensor::zeros({H}));
  lstm_params("head.lstm.");
  params_.add("head.out.W", uniform({A, H}, k));
  params_.add("head.out.b", Tensor::zeros({A}));
}

void Policy::reset_training_state() {
  baseline_.reset();
  optimizer_ = Optimizer(policy_optimizer(cfg_.optimizer, cfg_.learning_rate));
}

std::vector<bool> Policy::legal_actions(const PartialArch& p) const {
  const auto path = p.target ? p.target : p.first_empty();
  if (!path) throw std::logic_error("no target slot in a complete partial tree");
  const int depth = static_cast<int>(path->size());
  const bool op_ok = depth < cfg_.max_height && p.operator_count() < cfg_.max_nodes;
  const bool leaf_ok = depth > 0 || cfg_.allow_leaf_root;
  std::vector<bool> legal(actions_.size());
  for (std::size_t i = 0; i < actions_.size(); ++i) legal[i] = is_source(actions_[i]) ? leaf_ok : op_ok;
  // A slot must always be fillable; fall back to leaves when no operator may be placed.
  if (std::none_of(legal.begin(), legal.end(), [](bool b) { return b; })) {
    for (std::size_t i = 0; i < actions_.size(); ++i) legal[i] = is_source(actions_[i]);
  }
  return legal;
}

int Policy::token_of(const PartialNode& n, bool is_target) const {
  if (n.op) return static_cast<int>(*n.op);
  return is_target ? kTargetToken : kEmptyToken;
}

Policy::HeadState Policy::lstm(ParamStore& store, const std::string& prefix, const Var& x, const HeadState& s) {
  const int H = s.h->val().cols();
  Var gates = add(linear(x, param(store.at(prefix + "Wx")), param(store.at(prefix + "b"))),
                  linear(s.h, param(store.at(prefix + "Wh")), nullptr));
  Var i = sigmoid(slice_cols(gates, 0, H));
  Var f = sigmoid(slice_cols(gates, H, H));
  Var g = tanh(slice_cols(gates, 2 * H, H));
  Var o = sigmoid(slice_cols(gates, 3 * H, H));
  Var c = add(mult(f, s.c), mult(i, g));
  return {mult(o, tanh(c)), c};
}

Policy::HeadState Policy::initial_head() const {
  return {constant(Tensor::zeros({1, cfg_.hidden})), constant(Tensor::zeros({1, cfg_.hidden}))};
}

Var Policy::encode_node(ParamStore& store, const PartialNode& n, std::vector<int>& path,
                        const std::vector<int>& target, EncodeCache* cache, bool& complete) const {
  if (cache) {
    const auto it = cache->find(&n);
    if (it != cache->end()) {
      complete = true;
      return it->second;
    }
  }
  complete = n.op.has_value();
  HeadState s = initial_head();
  Var emb = embedding(param(store.at("token.embedding")), {token_of(n, path == target)});
  s = lstm(store, "enc.", emb, s);
  for (std::size_t i = 0; i < n.children.size(); ++i) {
    path.push_back(static_cast<int>(i));
    bool child_complete = false;
    Var child = encode_node(store, n.children[i], path, target, cache, child_complete);
    path.pop_back();
    complete = complete && child_complete;
    s = lstm(store, "enc.", child, s);
  }
  if (cache && complete) cache->emplace(&n, s.h);
  return s.h;
}

Var Policy::encode_with(ParamStore& store, const PartialArch& p, EncodeCache* cache) const {
  const auto target = p.target ? p.target : p.first_empty();
  std::vector<int> path;
  // A complete tree has no target; the sentinel path never matches.
  const std::vector<int> t = target ? *target : std::vector<int>{-1};
  bool complete = false;
  return encode_node(store, p.root, path, t, cache, complete);
}

Var Policy::encode(ParamStore& store, const PartialArch& p) const { return encode_with(store, p, nullptr); }

Var Policy::logits_with(ParamStore& store, const PartialArch& p, HeadState& head, EncodeCache* cache) const {
  Var enc = encode_with(store, p, cache);
  Var z = relu(linear(enc, param(store.at("head.in.W")), param(store.at("head.in.b"))));
  head = lstm(store, "head.lstm.", z, head);
  return linear(head.h, param(store.at("head.out.W")), param(store.at("head.out.b")));
}

Var Policy::action_logits(ParamStore& store, const PartialArch& p, HeadState& head) const {
  return logits_with(store, p, head, nullptr);
}

std::vector<double> Policy::action_probabilities(const PartialArch& p, HeadState& head) const {
  auto& store = const_cast<ParamStore&>(params_);
  Var logits = action_logits(store, p, head);
  return masked_softmax(logits->val(), legal_actions(p));
}

int Policy::sample_action(const std::vector<double>& probs, const std::vector<bool>& legal, double epsilon,
                          std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (epsilon > 0.0 && u(rng) < epsilon) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < legal.size(); ++i) {
      if (legal[i]) idx.push_back(static_cast<int>(i));
    }
    std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
    return idx[pick(rng)];
  }
  std::discrete_distribution<int> d(probs.begin(), probs.end());
  return d(rng);
}

Episode Policy::generate(std::mt19937_64& rng, std::optional<double> epsilon) const {
  const double eps = epsilon.value_or(cfg_.epsilon);
  auto& store = const_cast<ParamStore&>(params_);
  Episode ep;
  PartialArch p = PartialArch::empty();
  HeadState head = initial_head();
  EncodeCache cache;
  while (!p.complete()) {
    Var logits = logits_with(store, p, head, &cache);
    const auto legal = legal_actions(p);
    const auto probs = masked_softmax(logits->val(), legal);
    const int a = sample_action(probs, legal, eps, rng);
    ep.actions.push_back(a);
    ep.log_probs.push_back(masked_log_prob(logits, legal, a)->val().data[0]);
    p.fill(actions_[static_cast<std::size_t>(a)]);
  }
  ep.tree = p.to_tree();
  return ep;
}

Var Policy::episode_log_prob(ParamStore& store, const Episode& ep) const { return replay(store, ep, nullptr); }

Var Policy::episode_entropy(ParamStore& store, const Episode& ep) const {
  std::vector<Var> h;
  replay(store, ep, &h);
  return add_n(h);
}

Var Policy::replay(ParamStore& store, const Episode& ep, std::vector<Var>* entropies) const {
  PartialArch p = PartialArch::empty();
  HeadState head = initial_head();
  EncodeCache cache;
  std::vector<Var> terms;
  for (int a : ep.actions) {
    if (p.complete()) throw std::invalid_argument("episode has more actions than slots");
    Var logits = logits_with(store, p, head, &cache);
    const auto legal = legal_actions(p);
    if (a < 0 || a >= static_cast<int>(legal.size()) || !legal[static_cast<std::size_t>(a)]) {
      throw std::invalid_argument("episode replays an illegal action");
    }
    terms.push_back(masked_log_prob(logits, legal, a));
    if (entropies) entropies->push_back(masked_entropy(logits, legal));
    p.fill(actions_[static_cast<std::size_t>(a)]);
  }
  if (!p.complete()) throw std::invalid_argument("episode leaves empty slots");
  return add_n(terms);
}

double Policy::log_prob(const Episode& ep) const {
  return episode_log_prob(const_cast<ParamStore&>(params_), ep)->val().data[0];
}

Var Policy::policy_loss(ParamStore& store, const std::vector<Episode>& batch, double baseline) const {
  std::vector<Var> terms;
  const double n = static_cast<double>(batch.size());
  for (const auto& ep : batch) {
    if (cfg_.entropy_weight == 0.0) {
      terms.push_back(scale(episode_log_prob(store, ep), -(ep.reward - baseline) / n));
      continue;
    }
    std::vector<Var> h;
    terms.push_back(scale(replay(store, ep, &h), -(ep.reward - baseline) / n));
    terms.push_back(scale(add_n(h), -cfg_.entropy_weight / n));
  }
  return add_n(terms);
}

UpdateResult Policy::reinforce_update(const std::vector<Episode>& batch) {
  UpdateResult r;
  if (batch.empty()) {
    r.skipped_reason = "empty batch";
    return r;
  }
  double mean = 0.0;
  for (const auto& ep : batch) mean += ep.reward;
  mean /= static_cast<double>(batch.size());
  r.mean_reward = mean;
  r.baseline_used = cfg_.use_baseline ? baseline_.value_or(mean) : 0.0;

  params_.zero_grad();
  Var loss = policy_loss(params_, batch, r.baseline_used);
  backward(loss);
  if (!std::isfinite(loss->val().data[0]) || !std::isfinite(global_grad_norm(params_))) {
    params_.zero_grad();
    r.skipped_reason = "non-finite gradient";
  } else {
    optimizer_.step(params_);
    r.applied = true;
  }
  baseline_ = baseline_ ? cfg_.baseline_decay * *baseline_ + (1.0 - cfg_.baseline_decay) * mean : mean;
  return r;
}

double Policy::prior_rate(int n, std::mt19937_64& rng) const {
  if (n <= 0) return 0.0;
  int ok = 0;
  for (int i = 0; i < n; ++i) ok += check_priors(generate(rng, 0.0).tree).all() ? 1 : 0;
  return static_cast<double>(ok) / n;
}

PretrainResult Policy::pretrain_priors(long budget, std::mt19937_64& rng, int batch_size, int measure_samples) {
  if (batch_size < 1) throw std::invalid_argument("pre-training batch size must be >= 1");
  PretrainResult res;
  res.baseline_rate = prior_rate(measure_samples, rng);
  reset_training_state();
  constexpr std::size_t kWindow = 500;
  std::deque<int> window;
  int window_ok = 0;
  while (res.episodes < budget) {
    std::vector<Episode> batch;
    for (int i = 0; i < batch_size && res.episodes < budget; ++i, ++res.episodes) {
      Episode ep = generate(rng);
      const PriorReport pr = check_priors(ep.tree);
      ep.reward = pr.score() + (pr.all() ? cfg_.prior_all_bonus : 0.0);
      const int ok = pr.all() ? 1 : 0;
      window.push_back(ok);
      window_ok += ok;
      if (window.size() > kWindow) {
        window_ok -= window.front();
        window.pop_front();
      }
      batch.push_back(std::move(ep));
    }
    reinforce_update(batch);
    res.moving_rate = static_cast<double>(window_ok) / static_cast<double>(window.size());
    if (window.size() == kWindow && res.moving_rate >= 0.95) break;
  }
  reset_training_state();
  res.final_rate = prior_rate(measure_samples, rng);
  return res;
}

void Policy::save(const std::string& path) const {
  nlohmann::json ops = nlohmann::json::array();
  for (OpKind op : actions_) ops.push_back(std::string(token(op)));
  nlohmann::json meta{{"kind", "policy"},
                      {"hidden", cfg_.hidden},
                      {"actions", ops},
                      {"max_height", cfg_.max_height},
                      {"max_nodes", cfg_.max_nodes},
                      {"allow_leaf_root", cfg_.allow_leaf_root},
                      {"epsilon", cfg_.epsilon},
                      {"learning_rate", cfg_.learning_rate},
                      {"extended_dsl", cfg_.extended_dsl}};
  save_checkpoint(path, params_, meta);
}

Policy Policy::load(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "policy") throw std::runtime_error(path + " is not a policy checkpoint");
  PolicyConfig cfg;
  cfg.hidden = ck.meta.at("hidden").get<int>();
  cfg.max_height = ck.meta.at("max_height").get<int>();
  cfg.max_nodes = ck.meta.at("max_nodes").get<int>();
  cfg.allow_leaf_root = ck.meta.at("allow_leaf_root").get<bool>();
  cfg.epsilon = ck.meta.at("epsilon").get<double>();
  cfg.learning_rate = ck.meta.at("learning_rate").get<double>();
  cfg.extended_dsl = ck.meta.at("extended_dsl").get<bool>();
  for (const auto& t : ck.meta.at("actions")) {
    const auto op = op_from_token(t.get<std::string>());
    if (!op) throw std::runtime_error("unknown action token in policy checkpoint");
    (is_source(*op) ? cfg.sources : cfg.operators).push_back(*op);
  }
  Policy p(cfg);
  for (auto& prm : p.params_.all()) prm.value = ck.params.at(prm.name).value;
  return p;
}

}  // namespace archdsl
