#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace archdsl {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major array of doubles. Most engine values are 2-D [rows x cols];
// scalars are shape {1}.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d);

  static Tensor zeros(std::vector<int> s);
  static Tensor filled(std::vector<int> s, double v);
  static Tensor matrix(int rows, int cols) { return zeros({rows, cols}); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  int rows() const { return shape.empty() ? 0 : shape.front(); }
  int cols() const;

  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

  std::span<double> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())}; }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())};
  }

  bool all_finite() const;
  double max_abs() const;
  bool operator==(const Tensor&) const = default;
};

std::size_t shape_size(const std::vector<int>& shape);
std::string shape_string(const std::vector<int>& shape);

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad();
};

// Owns a model's parameters. Programs refer to parameters by index, so a store can be
// copied freely (snapshots, per-worker replicas).
class ParamStore {
 public:
  int add(std::string name, Tensor value);
  int index_of(const std::string& name) const;  // -1 when absent
  bool contains(const std::string& name) const { return index_of(name) >= 0; }

  Parameter& operator[](int i) { return params_[static_cast<std::size_t>(i)]; }
  const Parameter& operator[](int i) const { return params_[static_cast<std::size_t>(i)]; }
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  void zero_grad();
  std::size_t num_values() const;
  bool all_finite() const;

 private:
  std::vector<Parameter> params_;
};

}  // namespace archdsl
