#include "archdsl/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "archdsl/kernels.hpp"

namespace archdsl {

Tensor& Node::grad_buffer() {
  if (param) return param->grad;
  if (grad.shape != value.shape) grad = Tensor::zeros(value.shape);
  return grad;
}

namespace {

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = std::any_of(parents.begin(), parents.end(),
                                 [](const Var& p) { return p->requires_grad; });
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->val().shape != b->val().shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a->val().shape) + " vs " +
                     shape_string(b->val().shape));
  }
}

// Elementwise unary op; `dydx(x, y)` gives the local derivative.
template <typename F, typename D>
Var unary(const Var& a, F f, D dydx) {
  const Tensor& x = a->val();
  Tensor y = Tensor::zeros(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = f(x.data[i]);
  return make(std::move(y), {a}, [dydx](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    const Tensor& x = p.val();
    Tensor& g = p.grad_buffer();
    for (std::size_t i = 0; i < x.size(); ++i) {
      g.data[i] += self.grad.data[i] * dydx(x.data[i], self.value.data[i]);
    }
  });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double safe_denominator(double b) {
  const double sign = b < 0 ? -1.0 : 1.0;
  return sign * std::max(std::abs(b), kDivGuard);
}

}  // namespace

Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return n;
}

Var leaf(Tensor t, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = requires_grad;
  return n;
}

Var param(Parameter& p) {
  auto n = std::make_shared<Node>();
  n->param = &p;
  n->requires_grad = true;
  return n;
}

void backward(const Var& root) {
  if (root->val().size() != 1) {
    throw ShapeError("backward() without a seed needs a scalar root, got " + shape_string(root->val().shape));
  }
  backward(root, Tensor::filled(root->val().shape, 1.0));
}

void backward(const Var& root, const Tensor& seed) {
  if (!root->requires_grad) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Tensor& g = root->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += seed.data[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size() && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x->val();
  const Tensor& wv = w->val();
  if (xv.shape.size() != 2 || wv.shape.size() != 2 || xv.cols() != wv.cols()) {
    throw ShapeError("linear: cannot multiply " + shape_string(xv.shape) + " by weight " +
                     shape_string(wv.shape));
  }
  const kernels::LinearDims d{xv.rows(), xv.cols(), wv.rows()};
  if (b && b->val().size() != static_cast<std::size_t>(d.out)) {
    throw ShapeError("linear: bias length does not match weight rows");
  }
  Tensor y = Tensor::matrix(d.batch, d.out);
  kernels::linear_forward(xv.data.data(), wv.data.data(), b ? b->val().data.data() : nullptr,
                          y.data.data(), d);
  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make(std::move(y), std::move(parents), [d](Node& self) {
    Node& x = *self.parents[0];
    Node& w = *self.parents[1];
    if (x.requires_grad) {
      kernels::linear_backward_input(self.grad.data.data(), w.val().data.data(),
                                     x.grad_buffer().data.data(), d);
    }
    double* db = nullptr;
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      db = self.parents[2]->grad_buffer().data.data();
    }
    if (w.requires_grad) {
      kernels::linear_backward_weight(self.grad.data.data(), x.val().data.data(),
                                      w.grad_buffer().data.data(), db, d);
    } else if (db) {
      for (int r = 0; r < d.batch; ++r) {
        for (int o = 0; o < d.out; ++o) db[o] += self.grad.data[static_cast<std::size_t>(r) * d.out + o];
      }
    }
  });
}

Var fused_linear(const Var& x, const std::vector<Var>& ws, const std::vector<Var>& bs) {
  if (ws.empty() || ws.size() != bs.size()) throw ShapeError("fused_linear: need matching weights/biases");
  const int in = x->val().cols();
  int out = 0;
  for (const auto& w : ws) {
    if (w->val().cols() != in) throw ShapeError("fused_linear: weight width mismatch");
    out += w->val().rows();
  }
  std::vector<double> wdata;
  wdata.reserve(static_cast<std::size_t>(out) * in);
  std::vector<double> bdata;
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const auto& wv = ws[i]->val().data;
    wdata.insert(wdata.end(), wv.begin(), wv.end());
    const auto& bv = bs[i]->val().data;
    bdata.insert(bdata.end(), bv.begin(), bv.end());
  }
  Tensor wide({out, in}, std::move(wdata));
  Tensor wide_b({out}, std::move(bdata));
  // The concatenated weight is a graph node whose gradient scatters back per block.
  std::vector<Var> wparents(ws);
  wparents.insert(wparents.end(), bs.begin(), bs.end());
  const std::size_t k = ws.size();
  auto scatter = [k](Node& self) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < k; ++i) {
      Node& w = *self.parents[i];
      const std::size_t n = w.val().size();
      if (w.requires_grad) {
        Tensor& g = w.grad_buffer();
        for (std::size_t j = 0; j < n; ++j) g.data[j] += self.grad.data[offset + j];
      }
      offset += n;
    }
  };
  auto scatter_b = [k](Node& self) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < k; ++i) {
      Node& b = *self.parents[k + i];
      const std::size_t n = b.val().size();
      if (b.requires_grad) {
        Tensor& g = b.grad_buffer();
        for (std::size_t j = 0; j < n; ++j) g.data[j] += self.grad.data[offset + j];
      }
      offset += n;
    }
  };
  // Both wide nodes keep all 2k parents so the scatter offsets line up.
  Var w_node = make(std::move(wide), wparents, scatter);
  Var b_node = make(std::move(wide_b), wparents, scatter_b);
  return linear(x, w_node, b_node);
}

Var slice_cols(const Var& x, int start, int count) {
  const Tensor& xv = x->val();
  if (start < 0 || count <= 0 || start + count > xv.cols()) throw ShapeError("slice_cols: out of range");
  const int rows = xv.rows();
  Tensor y = Tensor::matrix(rows, count);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < count; ++c) y(r, c) = xv(r, start + c);
  }
  return make(std::move(y), {x}, [start, count](Node& self) {
    Node& p = *self.parents[0];
    Tensor& g = p.grad_buffer();
    for (int r = 0; r < self.value.rows(); ++r) {
      for (int c = 0; c < count; ++c) g(r, start + c) += self.grad(r, c);
    }
  });
}

Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_cols: no inputs");
  const int rows = xs[0]->val().rows();
  int cols = 0;
  for (const auto& x : xs) {
    if (x->val().rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += x->val().cols();
  }
  Tensor y = Tensor::matrix(rows, cols);
  int offset = 0;
  for (const auto& x : xs) {
    const Tensor& xv = x->val();
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < xv.cols(); ++c) y(r, offset + c) = xv(r, c);
    }
    offset += xv.cols();
  }
  return make(std::move(y), xs, [](Node& self) {
    int offset = 0;
    for (auto& p : self.parents) {
      const int w = p->val().cols();
      if (p->requires_grad) {
        Tensor& g = p->grad_buffer();
        for (int r = 0; r < self.value.rows(); ++r) {
          for (int c = 0; c < w; ++c) g(r, c) += self.grad(r, offset + c);
        }
      }
      offset += w;
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "Add");
  Tensor y = a->val();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += b->val().data[i];
  return make(std::move(y), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "Sub");
  Tensor y = a->val();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] -= b->val().data[i];
  return make(std::move(y), {a, b}, [](Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (int k = 0; k < 2; ++k) {
      auto& p = self.parents[static_cast<std::size_t>(k)];
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += sign[k] * self.grad.data[i];
    }
  });
}

Var mult(const Var& a, const Var& b) {
  require_same_shape(a, b, "Mult");
  Tensor y = a->val();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= b->val().data[i];
  return make(std::move(y), {a, b}, [](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    if (a.requires_grad) {
      Tensor& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i] * b.val().data[i];
    }
    if (b.requires_grad) {
      Tensor& g = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i] * a.val().data[i];
    }
  });
}

Var div_safe(const Var& a, const Var& b) {
  require_same_shape(a, b, "Div");
  Tensor y = a->val();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] /= safe_denominator(b->val().data[i]);
  return make(std::move(y), {a, b}, [](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    const auto& av = a.val().data;
    const auto& bv = b.val().data;
    if (a.requires_grad) {
      Tensor& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i] / safe_denominator(bv[i]);
    }
    if (b.requires_grad) {
      Tensor& g = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (std::abs(bv[i]) < kDivGuard) continue;  // clamped: locally constant
        g.data[i] -= self.grad.data[i] * av[i] / (bv[i] * bv[i]);
      }
    }
  });
}

Var add_n(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("add_n: no inputs");
  Tensor y = xs[0]->val();
  for (std::size_t k = 1; k < xs.size(); ++k) {
    require_same_shape(xs[0], xs[k], "add_n");
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += xs[k]->val().data[i];
  }
  return make(std::move(y), xs, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
    }
  });
}

Var scale(const Var& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var sigmoid(const Var& a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sin(const Var& a) {
  return unary(a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Var cos(const Var& a) {
  return unary(a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Var selu(const Var& a) {
  return unary(
      a,
      [](double x) { return x > 0 ? kSeluLambda * x : kSeluLambda * kSeluAlpha * (std::exp(x) - 1.0); },
      [](double x, double) { return x > 0 ? kSeluLambda : kSeluLambda * kSeluAlpha * std::exp(x); });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias) {
  const Tensor& xv = x->val();
  const int rows = xv.rows();
  const int n = xv.cols();
  if (gain->val().size() != static_cast<std::size_t>(n) || bias->val().size() != static_cast<std::size_t>(n)) {
    throw ShapeError("LayerNorm: gain/bias length must equal feature width");
  }
  Tensor xhat = Tensor::zeros(xv.shape);
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  Tensor y = Tensor::zeros(xv.shape);
  for (int r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (int c = 0; c < n; ++c) mu += xv(r, c);
    mu /= n;
    double var = 0.0;
    for (int c = 0; c < n; ++c) var += (xv(r, c) - mu) * (xv(r, c) - mu);
    var /= n;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (int c = 0; c < n; ++c) {
      xhat(r, c) = (xv(r, c) - mu) * is;
      y(r, c) = gain->val().data[static_cast<std::size_t>(c)] * xhat(r, c) + bias->val().data[static_cast<std::size_t>(c)];
    }
  }
  return make(std::move(y), {x, gain, bias}, [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    Node& x = *self.parents[0];
    Node& gain = *self.parents[1];
    Node& bias = *self.parents[2];
    const int rows = self.value.rows();
    const int n = self.value.cols();
    if (gain.requires_grad || bias.requires_grad) {
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < n; ++c) {
          if (gain.requires_grad) gain.grad_buffer().data[static_cast<std::size_t>(c)] += self.grad(r, c) * xhat(r, c);
          if (bias.requires_grad) bias.grad_buffer().data[static_cast<std::size_t>(c)] += self.grad(r, c);
        }
      }
    }
    if (!x.requires_grad) return;
    Tensor& gx = x.grad_buffer();
    for (int r = 0; r < rows; ++r) {
      double sum_d = 0.0;
      double sum_dx = 0.0;
      std::vector<double> dxhat(static_cast<std::size_t>(n));
      for (int c = 0; c < n; ++c) {
        dxhat[static_cast<std::size_t>(c)] = self.grad(r, c) * gain.val().data[static_cast<std::size_t>(c)];
        sum_d += dxhat[static_cast<std::size_t>(c)];
        sum_dx += dxhat[static_cast<std::size_t>(c)] * xhat(r, c);
      }
      const double is = inv_std[static_cast<std::size_t>(r)];
      for (int c = 0; c < n; ++c) {
        gx(r, c) += is / n * (n * dxhat[static_cast<std::size_t>(c)] - sum_d - xhat(r, c) * sum_dx);
      }
    }
  });
}

Var gate3(const Var& a, const Var& b, const Var& f, bool inner_sigmoid) {
  require_same_shape(a, b, "Gate3");
  require_same_shape(a, f, "Gate3");
  const std::size_t n = a->val().size();
  Tensor s = f->val();
  if (inner_sigmoid) {
    for (auto& v : s.data) v = sigmoid_scalar(v);
  }
  Tensor y = Tensor::zeros(a->val().shape);
  for (std::size_t i = 0; i < n; ++i) {
    y.data[i] = s.data[i] * a->val().data[i] + (1.0 - s.data[i]) * b->val().data[i];
  }
  return make(std::move(y), {a, b, f}, [s = std::move(s), inner_sigmoid](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    Node& f = *self.parents[2];
    const std::size_t n = self.value.size();
    if (a.requires_grad) {
      Tensor& g = a.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g.data[i] += self.grad.data[i] * s.data[i];
    }
    if (b.requires_grad) {
      Tensor& g = b.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g.data[i] += self.grad.data[i] * (1.0 - s.data[i]);
    }
    if (f.requires_grad) {
      Tensor& g = f.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        double ds = self.grad.data[i] * (a.val().data[i] - b.val().data[i]);
        if (inner_sigmoid) ds *= s.data[i] * (1.0 - s.data[i]);
        g.data[i] += ds;
      }
    }
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a->val().data) total += v;
  return make(Tensor::scalar(total), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    Tensor& g = p.grad_buffer();
    for (auto& v : g.data) v += self.grad.data[0];
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a->val().size())); }

Var softmax_rows(const Var& logits) {
  const Tensor& z = logits->val();
  Tensor y = Tensor::zeros(z.shape);
  for (int r = 0; r < z.rows(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < z.cols(); ++c) m = std::max(m, z(r, c));
    double s = 0.0;
    for (int c = 0; c < z.cols(); ++c) s += (y(r, c) = std::exp(z(r, c) - m));
    for (int c = 0; c < z.cols(); ++c) y(r, c) /= s;
  }
  return make(std::move(y), {logits}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int r = 0; r < self.value.rows(); ++r) {
      double dot = 0.0;
      for (int c = 0; c < self.value.cols(); ++c) dot += self.grad(r, c) * self.value(r, c);
      for (int c = 0; c < self.value.cols(); ++c) g(r, c) += self.value(r, c) * (self.grad(r, c) - dot);
    }
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& targets) {
  const Tensor& z = logits->val();
  const int rows = z.rows();
  const int cols = z.cols();
  if (static_cast<int>(targets.size()) != rows) throw ShapeError("cross_entropy: target count mismatch");
  Tensor probs = Tensor::zeros(z.shape);
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= cols) throw ShapeError("cross_entropy: target out of range");
    double m = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c) m = std::max(m, z(r, c));
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += (probs(r, c) = std::exp(z(r, c) - m));
    for (int c = 0; c < cols; ++c) probs(r, c) /= s;
    loss += -(z(r, t) - m - std::log(s));
  }
  loss /= rows;
  return make(Tensor::scalar(loss), {logits}, [probs = std::move(probs), targets](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const int rows = probs.rows();
    const double scale = self.grad.data[0] / rows;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < probs.cols(); ++c) {
        const double onehot = c == targets[static_cast<std::size_t>(r)] ? 1.0 : 0.0;
        g(r, c) += scale * (probs(r, c) - onehot);
      }
    }
  });
}

Var masked_log_prob(const Var& logits, const std::vector<bool>& legal, int action) {
  const Tensor& z = logits->val();
  const int a = z.cols();
  if (static_cast<int>(legal.size()) != a || action < 0 || action >= a || !legal[static_cast<std::size_t>(action)]) {
    throw ShapeError("masked_log_prob: illegal action or mask size");
  }
  double m = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < a; ++c) {
    if (legal[static_cast<std::size_t>(c)]) m = std::max(m, z(0, c));
  }
  std::vector<double> p(static_cast<std::size_t>(a), 0.0);
  double s = 0.0;
  for (int c = 0; c < a; ++c) {
    if (legal[static_cast<std::size_t>(c)]) s += (p[static_cast<std::size_t>(c)] = std::exp(z(0, c) - m));
  }
  for (auto& v : p) v /= s;
  const double logp = z(0, action) - m - std::log(s);
  return make(Tensor::scalar(logp), {logits}, [p = std::move(p), action](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t c = 0; c < p.size(); ++c) {
      const double onehot = static_cast<int>(c) == action ? 1.0 : 0.0;
      g.data[c] += self.grad.data[0] * (onehot - p[c]);
    }
  });
}

Var masked_entropy(const Var& logits, const std::vector<bool>& legal) {
  const Tensor& z = logits->val();
  const int a = z.cols();
  if (static_cast<int>(legal.size()) != a) throw ShapeError("masked_entropy: mask size");
  double m = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < a; ++c) {
    if (legal[static_cast<std::size_t>(c)]) m = std::max(m, z(0, c));
  }
  std::vector<double> p(static_cast<std::size_t>(a), 0.0);
  double s = 0.0;
  for (int c = 0; c < a; ++c) {
    if (legal[static_cast<std::size_t>(c)]) s += (p[static_cast<std::size_t>(c)] = std::exp(z(0, c) - m));
  }
  double h = 0.0;
  for (auto& v : p) {
    v /= s;
    if (v > 0.0) h -= v * std::log(v);
  }
  return make(Tensor::scalar(h), {logits}, [p = std::move(p), h](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t c = 0; c < p.size(); ++c) {
      if (p[c] > 0.0) g.data[c] -= self.grad.data[0] * p[c] * (std::log(p[c]) + h);
    }
  });
}

Var embedding(const Var& table, const std::vector<int>& ids) {
  const Tensor& t = table->val();
  const int h = t.cols();
  Tensor y = Tensor::matrix(static_cast<int>(ids.size()), h);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= t.rows()) throw ShapeError("embedding: id out of range");
    for (int c = 0; c < h; ++c) y(static_cast<int>(r), c) = t(ids[r], c);
  }
  return make(std::move(y), {table}, [ids](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const int h = self.value.cols();
    for (std::size_t r = 0; r < ids.size(); ++r) {
      for (int c = 0; c < h; ++c) g(ids[r], c) += self.grad(static_cast<int>(r), c);
    }
  });
}

Var dropout(const Var& x, double p, bool train, std::mt19937_64& rng) {
  if (!train || p <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  std::vector<double> mask(x->val().size());
  for (auto& m : mask) m = keep(rng) ? inv : 0.0;
  Tensor y = x->val();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= mask[i];
  return make(std::move(y), {x}, [mask = std::move(mask)](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < mask.size(); ++i) g.data[i] += self.grad.data[i] * mask[i];
  });
}

}  // namespace archdsl
