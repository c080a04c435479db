#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "archdsl/autograd.hpp"
#include "archdsl/tensor.hpp"

namespace archdsl {

struct OptimizerConfig {
  enum class Kind { sgd, adam };
  Kind kind = Kind::sgd;
  double learning_rate = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double l2 = 0.0;
  std::optional<double> clip_norm;
  std::optional<double> clip_value;

  void validate() const;
};

struct StepResult {
  bool finite = true;
  std::string offending;  // first non-finite parameter, if any
};

// SGD / Adam over a ParamStore. Clipping is applied before the L2 term and update;
// gradients are zeroed afterwards.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg);

  StepResult step(ParamStore& params);
  double learning_rate() const { return cfg_.learning_rate; }
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  long step_count_ = 0;
};

double global_grad_norm(const ParamStore& params);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  bool finite = true;
  std::string failure;  // set when a gradient is non-finite
};

// Compares reverse-mode gradients of `loss` against central differences with step h;
// error per entry is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
GradCheckResult gradient_check(ParamStore& params, const std::function<Var(ParamStore&)>& loss,
                               double h = 1e-5);

}  // namespace archdsl
