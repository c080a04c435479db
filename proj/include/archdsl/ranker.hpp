#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "archdsl/autograd.hpp"
#include "archdsl/dsl.hpp"
#include "archdsl/evaluator.hpp"
#include "archdsl/tensor.hpp"

namespace archdsl {

// Replaces every h_tm1 leaf by a copy of the whole cell and every c_tm1 leaf by a copy of
// the c_t subtree; inside the copies h_tm1/c_tm1 become h_tm2/c_tm2. One level only.
ArchNode unroll_once(const Architecture& arch);

struct RankerConfig {
  int hidden = 128;
  int batch_size = 16;
  int epochs = 30;
  double learning_rate = 2e-3;
  double l2 = 1e-4;
  double head_dropout = 0.2;
  bool unroll = true;
  double failure_ppl_threshold = 500.0;  // targets are clipped at log(threshold)
  std::uint64_t seed = 0;

  void validate() const;
};

// One training example: a tree and its regression target.
struct RankerExample {
  Architecture arch;
  double target = 0.0;
  std::string id;
};

// Regression targets from evaluation records: log-loss clipped at log(threshold), failures
// at the clipped maximum. Records whose tree cannot be encoded are dropped.
std::vector<RankerExample> examples_from_records(const std::vector<ArchPerfRecord>& records,
                                                 double failure_ppl_threshold);

struct FitResult {
  std::vector<double> epoch_loss;  // mean training loss per epoch (standardized units)
  bool aborted = false;            // a non-finite step restored the last finite parameters
  long draws = 0;
};

class Ranker {
 public:
  explicit Ranker(RankerConfig cfg = {});

  double score(const Architecture& arch) const;
  std::vector<double> score_all(const std::vector<Architecture>& archs, bool parallel = true) const;

  // Trains on examples grouped by id (targets averaged). Sampling picks examples with
  // probability proportional to 1/rank of their target; one epoch is `examples.size()`
  // draws from a single stream, chunked into batches.
  FitResult fit(const std::vector<RankerExample>& examples);
  FitResult fit(const std::vector<ArchPerfRecord>& records);

  // Mean squared error in target units, evaluation mode.
  double mse(const std::vector<RankerExample>& examples) const;

  // Loss graph over a batch in standardized units; `rng` enables head dropout.
  Var batch_loss(ParamStore& store, const std::vector<const RankerExample*>& batch, std::mt19937_64* rng) const;

  // Seeds the c_tm1/c_tm2 leaf vectors from the trained h_tm1/h_tm2 vectors.
  void bootstrap_ct_embeddings();

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const RankerConfig& config() const { return cfg_; }

  void save(const std::string& path) const;
  static Ranker load(const std::string& path);

 private:
  struct Encoded {
    Var h;
    Var c;
  };
  Encoded encode(ParamStore& store, const ArchNode& n, const Var& zero) const;
  Var predict(ParamStore& store, const Architecture& arch, std::mt19937_64* rng) const;
  ArchNode prepare(const Architecture& arch) const;

  RankerConfig cfg_;
  ParamStore params_;
  double target_mean_ = 0.0;
  double target_scale_ = 1.0;
  std::mt19937_64 rng_;
};

struct Selection {
  std::vector<int> top;      // indices of the k_top best predictions, best first
  std::vector<int> sampled;  // indices drawn from the remainder
  std::vector<double> scores;
  std::vector<int> all() const;
};

// k_top lowest predictions plus k_sampled drawn without replacement from the rest with
// probability proportional to softmax(-score / temperature). When there are no more than
// k_top + k_sampled candidates, all are returned in score order.
Selection select(const Ranker& ranker, const std::vector<Architecture>& candidates, int k_top, int k_sampled,
                 double temperature, std::mt19937_64& rng);
Selection select_from_scores(const std::vector<double>& scores, int k_top, int k_sampled, double temperature,
                             std::mt19937_64& rng);

}  // namespace archdsl
