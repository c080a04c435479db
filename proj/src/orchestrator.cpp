#include "archdsl/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "archdsl/compiler.hpp"

namespace archdsl {

// ---------------------------------------------------------------------------
// RecordStore

RecordStore::RecordStore(std::string path) : path_(std::move(path)) {
  std::ifstream in(path_);
  if (!in) return;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ArchPerfRecord rec;
    try {
      rec = nlohmann::json::parse(line).get<ArchPerfRecord>();
    } catch (const std::exception& e) {
      throw StoreError(path_ + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
    if (rec.id.empty()) throw StoreError(path_ + ":" + std::to_string(lineno) + ": record without id");
    if (index_.count(rec.id)) throw StoreError(path_ + ":" + std::to_string(lineno) + ": duplicate id " + rec.id);
    index_.emplace(rec.id, records_.size());
    records_.push_back(std::move(rec));
  }
}

RecordStore::RecordStore(RecordStore&& other) noexcept
    : path_(std::move(other.path_)),
      records_(std::move(other.records_)),
      index_(std::move(other.index_)),
      rejected_(other.rejected_) {}

RecordStore RecordStore::load(const std::string& path) {
  if (!std::ifstream(path)) throw StoreError("cannot open record store " + path);
  return RecordStore(path);
}

bool RecordStore::append(const ArchPerfRecord& rec) {
  std::lock_guard<std::mutex> lock(mu_);
  if (rec.id.empty() || index_.count(rec.id)) {
    ++rejected_;
    return false;
  }
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app);
    nlohmann::json j = rec;
    out << j.dump() << '\n';
    out.flush();
    if (!out) throw StoreError("cannot append to record store " + path_);
  }
  index_.emplace(rec.id, records_.size());
  records_.push_back(rec);
  return true;
}

bool RecordStore::contains(const std::string& id) const {
  std::lock_guard<std::mutex> lock(mu_);
  return index_.count(id) > 0;
}

const ArchPerfRecord* RecordStore::find(const std::string& id) const {
  std::lock_guard<std::mutex> lock(mu_);
  const auto it = index_.find(id);
  return it == index_.end() ? nullptr : &records_[it->second];
}

std::set<std::string> RecordStore::ids() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::set<std::string> out;
  for (const auto& [id, _] : index_) out.insert(id);
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

void SearchConfig::validate() const {
  if (candidates_per_step < 1) throw std::invalid_argument("candidates_per_step must be >= 1");
  if (k_top < 0 || k_sampled < 0) throw std::invalid_argument("k_top and k_sampled must be >= 0");
  if (k_top + k_sampled > candidates_per_step) {
    throw std::invalid_argument("k_top + k_sampled must not exceed candidates_per_step");
  }
  if (selection_temperature <= 0.0) throw std::invalid_argument("selection_temperature must be positive");
  if (parallel_workers < 1) throw std::invalid_argument("parallel_workers must be >= 1");
  if (steps < 0 || max_evaluations < 0) throw std::invalid_argument("steps and max_evaluations must be >= 0");
  if (min_good < 0 || max_failing < 0 || min_batch < 1) throw std::invalid_argument("invalid batch rule");
  if (min_good + max_failing < min_batch) {
    throw std::invalid_argument("min_good + max_failing must be at least min_batch");
  }
  if (starvation_limit < min_batch) throw std::invalid_argument("starvation_limit must be >= min_batch");
  if (max_stalled_episodes < 1) throw std::invalid_argument("max_stalled_episodes must be >= 1");
  if (pretrain_episodes < 0 || pretrain_batch < 1) throw std::invalid_argument("invalid pre-training budget");
}

namespace {

using nlohmann::json;

std::string op_name(OpKind op) { return std::string(token(op)); }

OpKind op_parse(const json& j) {
  const auto op = op_from_token(j.get<std::string>());
  if (!op) throw std::invalid_argument("unknown operator token '" + j.get<std::string>() + "'");
  return *op;
}

// Converters between config fields and JSON values.
template <class T>
json to_j(const T& v) {
  return v;
}
template <class T>
void from_j(const json& j, T& v) {
  v = j.get<T>();
}

template <class T>
json to_j(const std::optional<T>& v) {
  return v ? to_j(*v) : json(nullptr);
}
template <class T>
void from_j(const json& j, std::optional<T>& v) {
  if (j.is_null()) {
    v.reset();
  } else {
    T t{};
    from_j(j, t);
    v = t;
  }
}

json to_j(const std::vector<OpKind>& v) {
  json a = json::array();
  for (OpKind op : v) a.push_back(op_name(op));
  return a;
}
void from_j(const json& j, std::vector<OpKind>& v) {
  v.clear();
  for (const auto& e : j) v.push_back(op_parse(e));
}
json to_j(const std::set<OpKind>& v) {
  json a = json::array();
  for (OpKind op : v) a.push_back(op_name(op));
  return a;
}
void from_j(const json& j, std::set<OpKind>& v) {
  v.clear();
  for (const auto& e : j) v.insert(op_parse(e));
}
json to_j(const std::map<OpKind, double>& v) {
  json o = json::object();
  for (const auto& [op, w] : v) o[op_name(op)] = w;
  return o;
}
void from_j(const json& j, std::map<OpKind, double>& v) {
  v.clear();
  for (const auto& [k, w] : j.items()) v[op_parse(json(k))] = w.get<double>();
}

template <class E>
struct EnumNames {
  std::vector<std::pair<E, std::string>> names;
  json to(E e) const {
    for (const auto& [v, n] : names) {
      if (v == e) return n;
    }
    throw std::logic_error("unnamed enum value");
  }
  E from(const json& j) const {
    const std::string s = j.get<std::string>();
    for (const auto& [v, n] : names) {
      if (n == s) return v;
    }
    throw std::invalid_argument("unknown value '" + s + "'");
  }
};

const EnumNames<TaskKind> kTaskKinds{{{TaskKind::char_lm, "char_lm"}, {TaskKind::copy_memory, "copy_memory"}}};
const EnumNames<SearchMode> kModes{{{SearchMode::random_rank, "random_rank"}, {SearchMode::rl, "rl"}}};
const EnumNames<OptimizerConfig::Kind> kOptimizers{
    {{OptimizerConfig::Kind::sgd, "sgd"}, {OptimizerConfig::Kind::adam, "adam"}}};

json to_j(const TaskKind& v) { return kTaskKinds.to(v); }
void from_j(const json& j, TaskKind& v) { v = kTaskKinds.from(j); }
json to_j(const SearchMode& v) { return kModes.to(v); }
void from_j(const json& j, SearchMode& v) { v = kModes.from(j); }
json to_j(const OptimizerConfig::Kind& v) { return kOptimizers.to(v); }
void from_j(const json& j, OptimizerConfig::Kind& v) { v = kOptimizers.from(j); }

json to_j(const OptimizerConfig& c);
void from_j(const json& j, OptimizerConfig& c);

// Reads the fields a visitor names and rejects keys it does not.
struct Reader {
  const json& j;
  std::string section;
  std::set<std::string> seen;

  template <class T>
  void operator()(const char* key, T& field) {
    seen.insert(key);
    if (!j.contains(key)) return;
    try {
      from_j(j.at(key), field);
    } catch (const std::exception& e) {
      throw std::invalid_argument("config " + section + "." + key + ": " + e.what());
    }
  }
  void finish() const {
    for (const auto& [k, _] : j.items()) {
      if (!seen.count(k)) throw std::invalid_argument("config " + section + ": unknown key '" + k + "'");
    }
  }
};

struct Writer {
  json j = json::object();
  template <class T>
  void operator()(const char* key, const T& field) {
    j[key] = to_j(field);
  }
};

template <class V>
void visit(V& v, OptimizerConfig& c) {
  v("kind", c.kind);
  v("learning_rate", c.learning_rate);
  v("beta1", c.beta1);
  v("beta2", c.beta2);
  v("epsilon", c.epsilon);
  v("l2", c.l2);
  v("clip_norm", c.clip_norm);
  v("clip_value", c.clip_value);
}

json to_j(const OptimizerConfig& c) {
  Writer w;
  visit(w, const_cast<OptimizerConfig&>(c));
  return w.j;
}
void from_j(const json& j, OptimizerConfig& c) {
  Reader r{j, "optimizer", {}};
  visit(r, c);
  r.finish();
}

template <class V>
void visit(V& v, SearchConfig& c) {
  v("mode", c.mode);
  v("candidates_per_step", c.candidates_per_step);
  v("k_top", c.k_top);
  v("k_sampled", c.k_sampled);
  v("selection_temperature", c.selection_temperature);
  v("ct_enable_after", c.ct_enable_after);
  v("parallel_workers", c.parallel_workers);
  v("steps", c.steps);
  v("wall_clock_limit", c.wall_clock_limit);
  v("warm_start_ranker", c.warm_start_ranker);
  v("evaluate_baseline", c.evaluate_baseline);
  v("human_seeds", c.human_seeds);
  v("max_evaluations", c.max_evaluations);
  v("min_good", c.min_good);
  v("max_failing", c.max_failing);
  v("min_batch", c.min_batch);
  v("starvation_limit", c.starvation_limit);
  v("max_stalled_episodes", c.max_stalled_episodes);
  v("pretrain_episodes", c.pretrain_episodes);
  v("pretrain_batch", c.pretrain_batch);
  v("reward_pilot", c.reward_pilot);
  v("episode_log", c.episode_log);
  v("seed", c.seed);
  v("deterministic_timing", c.deterministic_timing);
}

template <class V>
void visit(V& v, TaskSpec& c) {
  v("kind", c.kind);
  v("corpus_path", c.corpus_path);
  v("corpus_text", c.corpus_text);
  v("seed", c.seed);
  v("vocab_size", c.vocab_size);
  v("seq_len", c.seq_len);
  v("batch_size", c.batch_size);
  v("valid_fraction", c.valid_fraction);
  v("test_fraction", c.test_fraction);
  v("train_sequences", c.train_sequences);
  v("valid_sequences", c.valid_sequences);
  v("test_sequences", c.test_sequences);
  v("delay", c.delay);
}

template <class V>
void visit(V& v, GenConfig& c) {
  v("max_nodes", c.max_nodes);
  v("max_height", c.max_height);
  v("extended_dsl", c.extended_dsl);
  v("weights", c.weights);
  v("seed", c.seed);
  v("require_sources", c.require_sources);
}

template <class V>
void visit(V& v, TrainConfig& c) {
  v("epochs", c.epochs);
  v("hidden", c.hidden);
  v("layers", c.layers);
  v("optimizer", c.optimizer);
  v("lr_decay_factor", c.lr_decay_factor);
  v("decay_on_no_improve", c.decay_on_no_improve);
  v("dropout", c.dropout);
  v("tie_embeddings", c.tie_embeddings);
  v("failure_ppl_threshold", c.failure_ppl_threshold);
  v("failure_check_epoch", c.failure_check_epoch);
  v("wall_clock_budget", c.wall_clock_budget);
  v("explode_guard", c.explode_guard);
  v("max_train_windows", c.max_train_windows);
  v("gate3_inner_sigmoid", c.gate3_inner_sigmoid);
}

template <class V>
void visit(V& v, RankerConfig& c) {
  v("hidden", c.hidden);
  v("batch_size", c.batch_size);
  v("epochs", c.epochs);
  v("learning_rate", c.learning_rate);
  v("l2", c.l2);
  v("head_dropout", c.head_dropout);
  v("unroll", c.unroll);
  v("failure_ppl_threshold", c.failure_ppl_threshold);
  v("seed", c.seed);
}

template <class V>
void visit(V& v, PolicyConfig& c) {
  v("hidden", c.hidden);
  v("extended_dsl", c.extended_dsl);
  v("operators", c.operators);
  v("sources", c.sources);
  v("max_height", c.max_height);
  v("max_nodes", c.max_nodes);
  v("allow_leaf_root", c.allow_leaf_root);
  v("epsilon", c.epsilon);
  v("optimizer", c.optimizer);
  v("learning_rate", c.learning_rate);
  v("baseline_decay", c.baseline_decay);
  v("use_baseline", c.use_baseline);
  v("prior_all_bonus", c.prior_all_bonus);
  v("entropy_weight", c.entropy_weight);
  v("seed", c.seed);
}

template <class V>
void visit(V& v, RewardConfig& c) {
  v("a", c.a);
  v("base_offset", c.base_offset);
  v("exp_base", c.exp_base);
  v("exp_scale", c.exp_scale);
  v("exp_shift", c.exp_shift);
  v("gain", c.gain);
  v("bias", c.bias);
  v("failure_reward", c.failure_reward);
}

template <class T>
void read_section(const json& root, const char* key, T& out) {
  if (!root.contains(key)) return;
  const json& j = root.at(key);
  if (!j.is_object()) throw std::invalid_argument(std::string("config section '") + key + "' must be an object");
  Reader r{j, key, {}};
  visit(r, out);
  r.finish();
}

template <class T>
json write_section(const T& c) {
  Writer w;
  visit(w, const_cast<T&>(c));
  return w.j;
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  static const std::set<std::string> sections{"search", "task", "gen", "train", "ranker", "policy", "reward"};
  for (const auto& [k, _] : j.items()) {
    if (!sections.count(k)) throw std::invalid_argument("config: unknown section '" + k + "'");
  }
  RunConfig c;
  read_section(j, "search", c.search);
  read_section(j, "task", c.task);
  read_section(j, "gen", c.gen);
  read_section(j, "train", c.train);
  read_section(j, "ranker", c.ranker);
  read_section(j, "policy", c.policy);
  read_section(j, "reward", c.reward);
  c.search.validate();
  c.gen.validate();
  c.train.validate();
  c.ranker.validate();
  c.policy.validate();
  return c;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  return json{{"search", write_section(c.search)}, {"task", write_section(c.task)},
              {"gen", write_section(c.gen)},       {"train", write_section(c.train)},
              {"ranker", write_section(c.ranker)}, {"policy", write_section(c.policy)},
              {"reward", write_section(c.reward)}};
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<ArchPerfRecord> evaluate_all(const std::vector<Architecture>& archs, const Task& task,
                                         const TrainConfig& train, const EvalOptions& options, int workers,
                                         RecordStore& store) {
  std::vector<ArchPerfRecord> out(archs.size());
  const int n = static_cast<int>(archs.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, workers)) if (workers > 1)
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = train_and_score(archs[static_cast<std::size_t>(i)], task, train, options);
  // Appending in input order keeps the store independent of completion order.
  for (const auto& r : out) store.append(r);
  return out;
}

namespace {

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool better(const ArchPerfRecord& r, const std::optional<ArchPerfRecord>& best) {
  if (r.status != RecordStatus::ok || !r.valid_metric) return false;
  return !best || *r.valid_metric < *best->valid_metric;
}

std::optional<ArchPerfRecord> best_of(const std::vector<ArchPerfRecord>& records) {
  std::optional<ArchPerfRecord> best;
  for (const auto& r : records) {
    if (better(r, best)) best = r;
  }
  return best;
}

int valid_ht_records(const RecordStore& store) {
  int n = 0;
  for (const auto& r : store.records()) n += r.status == RecordStatus::ok && !r.ct_node ? 1 : 0;
  return n;
}

std::uint64_t mix(std::uint64_t base, std::uint64_t salt) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Evaluates a builtin unless its id is already stored; returns the stored or new record.
ArchPerfRecord seed_record(const std::string& name, RecordSource source, const RunConfig& cfg, const Task& task,
                           RecordStore& store, long& evaluations) {
  const Architecture a = builtin(name);
  const std::string id = arch_id(canonicalize(a));
  if (const auto* r = store.find(id)) return *r;
  EvalOptions opt{source, cfg.search.seed, cfg.search.deterministic_timing, -1};
  ++evaluations;
  return evaluate_all({a}, task, cfg.train, opt, 1, store).front();
}

}  // namespace

SearchResult run_random_search(const RunConfig& cfg, const Task& task, RecordStore& store, Ranker& ranker) {
  cfg.search.validate();
  const auto t0 = std::chrono::steady_clock::now();
  SearchResult res;
  if (cfg.search.evaluate_baseline) {
    res.baseline = seed_record("tanh_rnn", RecordSource::seed, cfg, task, store, res.evaluations);
  }
  for (const auto& name : cfg.search.human_seeds) seed_record(name, RecordSource::human, cfg, task, store, res.evaluations);

  std::mt19937_64 select_rng(mix(cfg.search.seed, 0x5e1ec7));
  bool bootstrapped = false;
  std::optional<ArchPerfRecord> best = best_of(store.records());
  for (int step = 0; step < cfg.search.steps; ++step) {
    if (cfg.search.wall_clock_limit > 0.0 && elapsed_since(t0) > cfg.search.wall_clock_limit) {
      res.notes.push_back("wall-clock limit reached before step " + std::to_string(step));
      break;
    }
    StepLog log;
    log.step = step;
    log.ct_enabled = valid_ht_records(store) >= cfg.search.ct_enable_after;

    GenConfig g = cfg.gen;
    g.seed = mix(cfg.gen.seed ^ cfg.search.seed, static_cast<std::uint64_t>(step));
    if (!log.ct_enabled) g.weights[OpKind::Cm1] = 0.0;
    const BatchResult batch = generate_batch(g, cfg.search.candidates_per_step, store.ids());
    log.candidates = static_cast<int>(batch.candidates.size());
    if (batch.candidates.empty()) {
      log.best_so_far = best ? best->valid_metric : std::nullopt;
      res.steps.push_back(log);
      res.notes.push_back("step " + std::to_string(step) + ": no admissible candidates");
      continue;
    }

    if (!cfg.search.warm_start_ranker) ranker = Ranker(cfg.ranker);
    if (store.size() > 0) ranker.fit(store.records());
    if (log.ct_enabled && !bootstrapped) {
      ranker.bootstrap_ct_embeddings();
      bootstrapped = true;
    }
    const Selection sel =
        select(ranker, batch.candidates, cfg.search.k_top, cfg.search.k_sampled, cfg.search.selection_temperature,
               select_rng);
    std::vector<Architecture> chosen;
    for (int i : sel.all()) chosen.push_back(batch.candidates[static_cast<std::size_t>(i)]);
    EvalOptions opt{RecordSource::random, cfg.search.seed, cfg.search.deterministic_timing, step};
    const auto recs = evaluate_all(chosen, task, cfg.train, opt, cfg.search.parallel_workers, store);
    res.evaluations += static_cast<long>(recs.size());
    for (const auto& r : recs) {
      if (better(r, best)) best = r;
    }
    log.evaluated = static_cast<int>(recs.size());
    log.best_so_far = best ? best->valid_metric : std::nullopt;
    res.steps.push_back(log);
  }
  res.best = best;
  return res;
}

// ---------------------------------------------------------------------------
// RL

BatchAssembler::BatchAssembler(int min_good, int max_failing, int min_batch, int starvation_limit)
    : min_good_(min_good), max_failing_(max_failing), min_batch_(min_batch), starvation_limit_(starvation_limit) {}

void BatchAssembler::add(int item, bool good) { pending_.emplace_back(item, good); }

std::optional<std::vector<int>> BatchAssembler::take(bool* relaxed) {
  if (relaxed) *relaxed = false;
  int goods = 0;
  int fails = 0;
  for (const auto& [_, g] : pending_) (g ? goods : fails)++;
  const int usable_fails = std::min(fails, max_failing_);
  if (goods >= min_good_ && goods + usable_fails >= min_batch_) {
    std::vector<int> batch;
    std::vector<std::pair<int, bool>> rest;
    int taken_fails = 0;
    for (const auto& p : pending_) {
      if (p.second) {
        batch.push_back(p.first);
      } else if (taken_fails < max_failing_) {
        batch.push_back(p.first);
        ++taken_fails;
      } else {
        rest.push_back(p);
      }
    }
    pending_ = std::move(rest);
    return batch;
  }
  if (static_cast<int>(pending_.size()) >= starvation_limit_) {
    std::vector<int> batch;
    for (const auto& p : pending_) batch.push_back(p.first);
    pending_.clear();
    if (relaxed) *relaxed = true;
    return batch;
  }
  return std::nullopt;
}

std::optional<double> best_variant_loss(const std::vector<Architecture>& variants, const RecordStore& store) {
  std::optional<double> loss;
  for (const auto& v : variants) {
    const auto* r = store.find(arch_id(canonicalize(v)));
    if (r && r->status == RecordStatus::ok && r->valid_metric && (!loss || *r->valid_metric < *loss)) {
      loss = r->valid_metric;
    }
  }
  return loss;
}

SearchResult run_rl_search(const RunConfig& cfg, const Task& task, RecordStore& store, Policy& policy) {
  cfg.search.validate();
  const auto t0 = std::chrono::steady_clock::now();
  SearchResult res;
  std::mt19937_64 rng(mix(cfg.search.seed, 0x71));
  if (cfg.search.pretrain_episodes > 0) {
    res.pretrain = policy.pretrain_priors(cfg.search.pretrain_episodes, rng, cfg.search.pretrain_batch, 200);
  }

  RewardConfig rcfg = cfg.reward;
  if (cfg.search.evaluate_baseline || cfg.search.reward_pilot) {
    res.baseline = seed_record("tanh_rnn", RecordSource::seed, cfg, task, store, res.evaluations);
  }
  if (cfg.search.reward_pilot) {
    const auto strong = seed_record("gru", RecordSource::seed, cfg, task, store, res.evaluations);
    const auto& weak = *res.baseline;
    if (weak.status == RecordStatus::ok && strong.status == RecordStatus::ok && weak.valid_metric &&
        strong.valid_metric && *weak.valid_metric > *strong.valid_metric) {
      fit_reward_rescale(rcfg, *weak.valid_metric, *strong.valid_metric);
    } else {
      res.notes.push_back("reward pilot inconclusive (gru not better than tanh_rnn); loss rescale left unchanged");
    }
  }

  std::ofstream episode_log;
  if (!cfg.search.episode_log.empty()) {
    episode_log.open(cfg.search.episode_log, std::ios::trunc);
    if (!episode_log) throw StoreError("cannot open episode log " + cfg.search.episode_log);
  }

  BatchAssembler assembler(cfg.search.min_good, cfg.search.max_failing, cfg.search.min_batch,
                           cfg.search.starvation_limit);
  std::vector<Episode> episodes;
  std::optional<ArchPerfRecord> best = best_of(store.records());
  long rl_evaluations = 0;
  long stalled = 0;
  const int wave = cfg.search.parallel_workers;
  while (rl_evaluations < cfg.search.max_evaluations) {
    if (cfg.search.wall_clock_limit > 0.0 && elapsed_since(t0) > cfg.search.wall_clock_limit) {
      res.notes.push_back("wall-clock limit reached");
      break;
    }
    // Generate a wave of episodes, then evaluate every c_t placement of every new tree.
    std::vector<Episode> fresh;
    std::vector<std::vector<Architecture>> variants;
    std::vector<Architecture> to_eval;
    std::set<std::string> queued;
    for (int w = 0; w < wave; ++w) {
      Episode ep = policy.generate(rng);
      Architecture a{ep.tree, std::nullopt};
      std::vector<Architecture> vs = contains(a.root, OpKind::Cm1) ? enumerate_ct_taps(a) : std::vector<Architecture>{};
      if (vs.empty()) vs.push_back(a);
      for (const auto& v : vs) {
        const std::string id = arch_id(canonicalize(v));
        if (!store.contains(id) && queued.insert(id).second) to_eval.push_back(v);
      }
      fresh.push_back(std::move(ep));
      variants.push_back(std::move(vs));
    }
    EvalOptions opt{RecordSource::rl, cfg.search.seed, cfg.search.deterministic_timing, res.batches};
    const auto recs = evaluate_all(to_eval, task, cfg.train, opt, cfg.search.parallel_workers, store);
    rl_evaluations += static_cast<long>(recs.size());
    res.evaluations += static_cast<long>(recs.size());
    stalled = recs.empty() ? stalled + wave : 0;

    for (std::size_t e = 0; e < fresh.size(); ++e) {
      // The best placement supplies the reward.
      const std::optional<double> loss = best_variant_loss(variants[e], store);
      for (const auto& v : variants[e]) {
        const auto* r = store.find(arch_id(canonicalize(v)));
        if (r && better(*r, best)) best = *r;
      }
      Episode& ep = fresh[e];
      ep.reward = loss ? reward(rcfg, *loss) : reward(rcfg, 0.0, RecordStatus::invalid);
      res.episode_rewards.push_back(ep.reward);
      const int handle = static_cast<int>(episodes.size());
      episodes.push_back(ep);
      assembler.add(handle, loss.has_value());
      if (episode_log.is_open()) {
        json line{{"episode", handle},
                  {"tree", render(ep.tree)},
                  {"actions", ep.actions},
                  {"reward", ep.reward},
                  {"good", loss.has_value()},
                  {"batch_index", res.batches}};
        episode_log << line.dump() << '\n';
      }
    }

    bool relaxed = false;
    while (auto batch = assembler.take(&relaxed)) {
      std::vector<Episode> items;
      for (int h : *batch) items.push_back(episodes[static_cast<std::size_t>(h)]);
      const UpdateResult u = policy.reinforce_update(items);
      if (!u.applied) res.notes.push_back("batch " + std::to_string(res.batches) + " skipped: " + u.skipped_reason);
      if (relaxed) {
        ++res.relaxed_batches;
        res.notes.push_back("batch " + std::to_string(res.batches) + " accepted without meeting the composition rule");
      }
      ++res.batches;
    }
    if (stalled >= cfg.search.max_stalled_episodes) {
      res.notes.push_back("stopped after " + std::to_string(stalled) + " episodes without a new architecture");
      break;
    }
  }
  res.best = best;
  return res;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

void count_ops(const ArchNode& n, std::map<OpKind, long>& counts) {
  if (!is_source(n.op)) ++counts[n.op];
  for (const auto& c : n.children) count_ops(c, counts);
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace

void report_ops_over_time(const std::vector<ArchPerfRecord>& records, std::ostream& out) {
  const auto ops = all_operators();
  std::map<int, std::map<OpKind, long>> per_batch;
  for (const auto& r : records) {
    Architecture a;
    try {
      a = r.architecture();
    } catch (const std::exception&) {
      continue;
    }
    count_ops(a.root, per_batch[r.batch_index]);
  }
  out << "batch";
  for (OpKind op : ops) out << ',' << token(op);
  out << '\n';
  for (const auto& [batch, counts] : per_batch) {
    long total = 0;
    for (const auto& [_, c] : counts) total += c;
    if (total == 0) continue;
    out << batch;
    for (OpKind op : ops) {
      const auto it = counts.find(op);
      out << ',' << fmt(it == counts.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(total));
    }
    out << '\n';
  }
}

void report_search_curve(const std::vector<ArchPerfRecord>& records, std::ostream& out) {
  std::map<int, std::pair<double, int>> batch_sum;
  for (const auto& r : records) {
    if (r.status == RecordStatus::ok && r.valid_metric) {
      auto& s = batch_sum[r.batch_index];
      s.first += *r.valid_metric;
      ++s.second;
    }
  }
  out << "index,batch,id,status,valid_metric,best_so_far,batch_mean_metric\n";
  std::optional<double> best;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.status == RecordStatus::ok && r.valid_metric && (!best || *r.valid_metric < *best)) best = r.valid_metric;
    out << i << ',' << r.batch_index << ',' << r.id << ',' << to_string(r.status) << ','
        << (r.valid_metric ? fmt(*r.valid_metric) : "") << ',' << (best ? fmt(*best) : "") << ',';
    const auto it = batch_sum.find(r.batch_index);
    if (it != batch_sum.end()) out << fmt(it->second.first / it->second.second);
    out << '\n';
  }
}

void report_hidden_dump(const Architecture& arch, int hidden, int input, int seq_len, std::uint64_t seed,
                        std::ostream& out) {
  if (seq_len < 1) throw std::invalid_argument("hidden dump needs a positive sequence length");
  CompileOptions opts;
  opts.init_seed = seed;
  const CellProgram prog = compile(arch, input, hidden, opts);
  std::mt19937_64 rng(seed ^ 0xd1b54a32d192ed03ULL);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<Tensor> xs;
  for (int t = 0; t < seq_len; ++t) {
    Tensor x = Tensor::zeros({1, input});
    for (auto& v : x.data) v = d(rng);
    xs.push_back(std::move(x));
  }
  const SequenceResult r = run_sequence(prog, xs, initial_state(prog, 1));
  write_trace_csv(out, r.hs);
}

}  // namespace archdsl
