#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "archdsl/dsl.hpp"
#include "archdsl/optim.hpp"

namespace archdsl {

class TaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskKind { char_lm, copy_memory };

struct TaskSpec {
  TaskKind kind = TaskKind::copy_memory;
  std::string corpus_path;  // char_lm: file to read unless corpus_text is set
  std::string corpus_text;
  std::uint64_t seed = 1;
  int vocab_size = 8;       // char_lm: upper bound on distinct symbols; copy_memory: data symbols
  int seq_len = 20;         // BPTT window / copy sequence length
  int batch_size = 16;
  // char_lm: fractions of the corpus; the rest is test. copy_memory: sequence counts per split.
  double valid_fraction = 0.1;
  double test_fraction = 0.1;
  int train_sequences = 256;
  int valid_sequences = 64;
  int test_sequences = 64;
  int delay = 3;            // copy_memory: target at t is the input at t - delay

  std::string name() const;
};

// One BPTT window: ids[t][b].
struct Window {
  std::vector<std::vector<int>> inputs;
  std::vector<std::vector<int>> targets;
};

struct Split {
  std::vector<Window> windows;
  std::size_t tokens = 0;  // symbols assigned to this split before batching
};

struct Task {
  TaskSpec spec;
  int vocab = 0;
  std::vector<std::string> symbols;
  Split train;
  Split valid;
  Split test;
  // Hidden state flows across windows (language modelling) or restarts per window.
  bool carry_state = false;
  // Loss of the best constant predictor on the validation targets.
  double baseline_loss = 0.0;
};

Task make_task(const TaskSpec& spec);

struct TrainConfig {
  int epochs = 5;
  int hidden = 64;
  int layers = 2;
  OptimizerConfig optimizer{OptimizerConfig::Kind::sgd, 1.0, 0.9, 0.999, 1e-8, 0.0, std::nullopt, 0.075};
  double lr_decay_factor = 4.0;
  bool decay_on_no_improve = true;
  double dropout = 0.0;
  bool tie_embeddings = true;
  double failure_ppl_threshold = 500.0;
  int failure_check_epoch = 2;
  double wall_clock_budget = 600.0;  // seconds; <= 0 means no time at all
  // Largest tolerated |dL/dh| at the start of a window before the run counts as exploding.
  double explode_guard = 1e6;
  int max_train_windows = 0;  // 0: use all
  bool gate3_inner_sigmoid = false;

  void validate() const;
};

enum class RecordSource { random, rl, seed, human };
enum class RecordStatus { ok, diverged, failed_threshold, invalid, timeout };

std::string to_string(RecordSource s);
std::string to_string(RecordStatus s);
RecordSource record_source_from(const std::string& s);
RecordStatus record_status_from(const std::string& s);

struct ArchPerfRecord {
  std::string id;
  std::string dsl;
  std::optional<int> ct_node;
  RecordSource source = RecordSource::random;
  std::string task;
  RecordStatus status = RecordStatus::ok;
  std::optional<double> valid_metric;  // natural-log loss; null when nothing was measured
  std::optional<double> test_metric;
  int epochs_run = 0;
  double wall_seconds = 0.0;
  int batch_index = -1;
  std::string timestamp;
  std::string detail;  // short human-readable reason for non-ok statuses

  Architecture architecture() const;
};

void to_json(nlohmann::json& j, const ArchPerfRecord& r);
void from_json(const nlohmann::json& j, ArchPerfRecord& r);

struct EvalOptions {
  RecordSource source = RecordSource::random;
  std::uint64_t seed = 0;
  // Zero the wall-clock fields so identical runs produce identical bytes.
  bool deterministic_timing = false;
  int batch_index = -1;
};

// Per-evaluation seed derived from the base seed and the architecture id.
std::uint64_t evaluation_seed(std::uint64_t base, const std::string& arch_id);

ArchPerfRecord train_and_score(const Architecture& arch, const Task& task, const TrainConfig& cfg,
                               const EvalOptions& options = {});

}  // namespace archdsl
