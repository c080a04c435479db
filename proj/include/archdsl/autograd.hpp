#pragma once

#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "archdsl/tensor.hpp"

namespace archdsl {

// Reverse-mode differentiation over a dynamically built graph. A graph is built by
// calling the op functions below and differentiated with backward().
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  // Parameter leaves read their value from, and accumulate into, the parameter.
  Parameter* param = nullptr;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  const Tensor& val() const { return param ? param->value : value; }
  // Gradient buffer, allocated on first use.
  Tensor& grad_buffer();
};

Var constant(Tensor t);
Var leaf(Tensor t, bool requires_grad = true);
Var param(Parameter& p);

// Differentiates a scalar (seeded with 1) or an arbitrary tensor seeded with `seed`.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;
inline constexpr double kDivGuard = 1e-7;
inline constexpr double kLayerNormEps = 1e-5;

// x: [B x in], w: [out x in], b: [out] or null -> [B x out]
Var linear(const Var& x, const Var& w, const Var& b);
// One wide matrix multiplication over the row-concatenation of `ws` (and `bs`).
Var fused_linear(const Var& x, const std::vector<Var>& ws, const std::vector<Var>& bs);
Var slice_cols(const Var& x, int start, int count);
Var concat_cols(const std::vector<Var>& xs);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mult(const Var& a, const Var& b);
Var div_safe(const Var& a, const Var& b);
Var add_n(const std::vector<Var>& xs);
Var scale(const Var& a, double c);

Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var selu(const Var& a);
// Per-row normalization over the feature axis with learned gain/bias of length cols.
Var layer_norm(const Var& x, const Var& gain, const Var& bias);
// Gate3(a, b, f) = s*a + (1-s)*b with s = f, or s = sigmoid(f) when inner_sigmoid.
Var gate3(const Var& a, const Var& b, const Var& f, bool inner_sigmoid = false);

Var sum(const Var& a);   // -> scalar
Var mean(const Var& a);  // -> scalar
Var softmax_rows(const Var& logits);
// Mean over rows of -log softmax(logits)[row, target[row]].
Var cross_entropy(const Var& logits, const std::vector<int>& targets);
// log p(action) under softmax restricted to entries where legal[i] is true. logits: [1 x A]
Var masked_log_prob(const Var& logits, const std::vector<bool>& legal, int action);
// Entropy of the softmax restricted to legal entries.
Var masked_entropy(const Var& logits, const std::vector<bool>& legal);
// Rows of `table` ([V x H]) selected by ids -> [ids.size() x H]
Var embedding(const Var& table, const std::vector<int>& ids);
// Inverted dropout; identity when !train or p == 0.
Var dropout(const Var& x, double p, bool train, std::mt19937_64& rng);

}  // namespace archdsl
