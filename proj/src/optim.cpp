#include "archdsl/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace archdsl {

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (clip_norm && !(*clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
  if (clip_value && !(*clip_value > 0.0)) throw std::invalid_argument("clip_value must be positive");
  if (kind == Kind::adam && (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || epsilon <= 0)) {
    throw std::invalid_argument("invalid Adam betas/epsilon");
  }
}

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

double global_grad_norm(const ParamStore& params) {
  double s = 0.0;
  for (const auto& p : params.all()) {
    for (double g : p.grad.data) s += g * g;
  }
  return std::sqrt(s);
}

StepResult Optimizer::step(ParamStore& params) {
  auto& ps = params.all();
  if (cfg_.clip_norm) {
    const double norm = global_grad_norm(params);
    if (std::isfinite(norm) && norm > *cfg_.clip_norm) {
      const double f = *cfg_.clip_norm / norm;
      for (auto& p : ps) {
        for (auto& g : p.grad.data) g *= f;
      }
    }
  }
  if (cfg_.clip_value) {
    const double c = *cfg_.clip_value;
    for (auto& p : ps) {
      for (auto& g : p.grad.data) g = std::clamp(g, -c, c);
    }
  }
  if (cfg_.kind == OptimizerConfig::Kind::adam && m_.size() != ps.size()) {
    m_.clear();
    v_.clear();
    for (const auto& p : ps) {
      m_.push_back(Tensor::zeros(p.value.shape));
      v_.push_back(Tensor::zeros(p.value.shape));
    }
  }
  ++step_count_;
  StepResult result;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad.data[j] + cfg_.l2 * p.value.data[j];
      if (cfg_.kind == OptimizerConfig::Kind::sgd) {
        p.value.data[j] -= cfg_.learning_rate * g;
      } else {
        double& m = m_[i].data[j];
        double& v = v_[i].data[j];
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m / (1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_)));
        const double vhat = v / (1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_)));
        p.value.data[j] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    }
    if (result.finite && !p.value.all_finite()) {
      result.finite = false;
      result.offending = p.name;
    }
    p.zero_grad();
  }
  return result;
}

GradCheckResult gradient_check(ParamStore& params, const std::function<Var(ParamStore&)>& loss, double h) {
  GradCheckResult result;
  params.zero_grad();
  backward(loss(params));
  std::vector<Tensor> analytic;
  for (const auto& p : params.all()) {
    if (!p.grad.all_finite()) {
      result.finite = false;
      result.failure = "non-finite gradient in '" + p.name + "'";
      result.worst_param = p.name;
      params.zero_grad();
      return result;
    }
    analytic.push_back(p.grad);
  }
  params.zero_grad();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[static_cast<int>(i)];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double orig = p.value.data[j];
      p.value.data[j] = orig + h;
      const double up = loss(params)->val().data[0];
      p.value.data[j] = orig - h;
      const double down = loss(params)->val().data[0];
      p.value.data[j] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double ad = analytic[i].data[j];
      const double err = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
      if (!std::isfinite(fd)) {
        result.finite = false;
        result.failure = "non-finite finite difference in '" + p.name + "'";
        result.worst_param = p.name;
        return result;
      }
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = p.name;
      }
    }
  }
  return result;
}

}  // namespace archdsl
