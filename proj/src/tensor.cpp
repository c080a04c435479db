#include "archdsl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace archdsl {

std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_size(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_string(shape));
  }
}

Tensor Tensor::zeros(std::vector<int> s) { return filled(std::move(s), 0.0); }

Tensor Tensor::filled(std::vector<int> s, double v) {
  Tensor t;
  t.data.assign(shape_size(s), v);
  t.shape = std::move(s);
  return t;
}

int Tensor::cols() const {
  if (shape.size() <= 1) return shape.empty() ? 0 : 1;
  int c = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
  return c;
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data) m = std::max(m, std::abs(v));
  return m;
}

void Parameter::zero_grad() {
  if (grad.shape != value.shape) grad = Tensor::zeros(value.shape);
  std::fill(grad.data.begin(), grad.data.end(), 0.0);
}

int ParamStore::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  Parameter p{std::move(name), std::move(value), {}};
  p.grad = Tensor::zeros(p.value.shape);
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

int ParamStore::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

Parameter& ParamStore::at(const std::string& name) {
  const int i = index_of(name);
  if (i < 0) throw std::out_of_range("no parameter '" + name + "'");
  return params_[static_cast<std::size_t>(i)];
}

const Parameter& ParamStore::at(const std::string& name) const {
  const int i = index_of(name);
  if (i < 0) throw std::out_of_range("no parameter '" + name + "'");
  return params_[static_cast<std::size_t>(i)];
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::size_t ParamStore::num_values() const {
  return std::accumulate(params_.begin(), params_.end(), std::size_t{0},
                         [](std::size_t n, const Parameter& p) { return n + p.value.size(); });
}

bool ParamStore::all_finite() const {
  return std::all_of(params_.begin(), params_.end(),
                     [](const Parameter& p) { return p.value.all_finite(); });
}

}  // namespace archdsl
