#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "archdsl/candidate_random.hpp"
#include "archdsl/evaluator.hpp"
#include "archdsl/ranker.hpp"
#include "archdsl/rl_generator.hpp"

namespace archdsl {

// ---------------------------------------------------------------------------
// Record store

class StoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Append-only JSONL file of evaluation records with an in-memory index by id. An empty
// path keeps the store in memory only.
class RecordStore {
 public:
  RecordStore() = default;
  // Opens `path`, replaying any existing lines; the file is created on first append.
  explicit RecordStore(std::string path);
  RecordStore(const RecordStore&) = delete;
  RecordStore& operator=(const RecordStore&) = delete;
  RecordStore(RecordStore&& other) noexcept;

  static RecordStore load(const std::string& path);

  // Returns false, leaving the store unchanged, when the id is already present.
  bool append(const ArchPerfRecord& rec);
  bool contains(const std::string& id) const;
  const ArchPerfRecord* find(const std::string& id) const;

  const std::vector<ArchPerfRecord>& records() const { return records_; }
  std::set<std::string> ids() const;
  std::size_t size() const { return records_.size(); }
  const std::string& path() const { return path_; }
  long rejected() const { return rejected_; }

 private:
  std::string path_;
  std::vector<ArchPerfRecord> records_;
  std::map<std::string, std::size_t> index_;
  long rejected_ = 0;
  mutable std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Configuration

enum class SearchMode { random_rank, rl };

struct SearchConfig {
  SearchMode mode = SearchMode::random_rank;
  int candidates_per_step = 2000;
  int k_top = 8;
  int k_sampled = 2;
  double selection_temperature = 1.0;
  int ct_enable_after = 750;
  int parallel_workers = 1;
  int steps = 5;
  double wall_clock_limit = 0.0;  // seconds; 0 disables
  bool warm_start_ranker = true;
  bool evaluate_baseline = true;
  std::vector<std::string> human_seeds;  // builtin names evaluated with source human

  // RL
  int max_evaluations = 200;
  int min_good = 3;
  int max_failing = 1;
  int min_batch = 4;
  int starvation_limit = 16;  // pending results before a batch is accepted regardless
  // Consecutive episodes without a new evaluation before the RL search stops.
  int max_stalled_episodes = 2000;
  long pretrain_episodes = 20000;
  int pretrain_batch = 16;
  bool reward_pilot = true;
  std::string episode_log;  // JSONL path; empty disables

  std::uint64_t seed = 1;
  bool deterministic_timing = true;

  void validate() const;
};

struct RunConfig {
  SearchConfig search;
  TaskSpec task;
  GenConfig gen;
  TrainConfig train;
  RankerConfig ranker;
  PolicyConfig policy;
  RewardConfig reward;
};

// Every field optional; unknown keys are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::string& path);

// ---------------------------------------------------------------------------
// Searches

struct StepLog {
  int step = 0;
  int candidates = 0;
  int evaluated = 0;
  bool ct_enabled = false;
  std::optional<double> best_so_far;
};

struct SearchResult {
  std::optional<ArchPerfRecord> best;
  std::optional<ArchPerfRecord> baseline;
  std::vector<StepLog> steps;
  long evaluations = 0;
  // RL only
  std::vector<double> episode_rewards;
  int batches = 0;
  int relaxed_batches = 0;
  std::optional<PretrainResult> pretrain;
  std::vector<std::string> notes;
};

// Evaluates `archs` with up to `workers` threads and appends the records in input order.
std::vector<ArchPerfRecord> evaluate_all(const std::vector<Architecture>& archs, const Task& task,
                                         const TrainConfig& train, const EvalOptions& options, int workers,
                                         RecordStore& store);

// Lowest validation loss among the stored ok records of `variants` (the c_t placements of
// one generated tree).
std::optional<double> best_variant_loss(const std::vector<Architecture>& variants, const RecordStore& store);

SearchResult run_random_search(const RunConfig& cfg, const Task& task, RecordStore& store, Ranker& ranker);
SearchResult run_rl_search(const RunConfig& cfg, const Task& task, RecordStore& store, Policy& policy);

// Groups finished episodes into update batches: at least min_good good results, at most
// max_failing failing ones, and at least min_batch in total. Failures beyond the cap wait
// for a later batch.
class BatchAssembler {
 public:
  BatchAssembler(int min_good, int max_failing, int min_batch, int starvation_limit);

  void add(int item, bool good);
  // Next ready batch (item handles in arrival order); `relaxed` reports a starvation batch.
  std::optional<std::vector<int>> take(bool* relaxed = nullptr);
  std::size_t pending() const { return pending_.size(); }

 private:
  int min_good_;
  int max_failing_;
  int min_batch_;
  int starvation_limit_;
  std::vector<std::pair<int, bool>> pending_;
};

// ---------------------------------------------------------------------------
// Reports (CSV with a header row)

// batch,<operator tokens...>: per batch index, operator occurrences over the total.
void report_ops_over_time(const std::vector<ArchPerfRecord>& records, std::ostream& out);
// index,batch,id,status,valid_metric,best_so_far,batch_mean_metric
void report_search_curve(const std::vector<ArchPerfRecord>& records, std::ostream& out);
// t,h0..h{H-1}: hidden state of a freshly initialized cell driven by random inputs.
void report_hidden_dump(const Architecture& arch, int hidden, int input, int seq_len, std::uint64_t seed,
                        std::ostream& out);

}  // namespace archdsl
