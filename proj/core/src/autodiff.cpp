#include "ratekd/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "ratekd/kernels.hpp"

RATEKD_BEGIN_NAMESPACE

namespace {

std::uint64_t next_order() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  const Real* p = a.data();
  Real* q = out.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) q[i] = f(p[i]);
  return out;
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f, const char* what) {
  expect_same_shape(a, b, what);
  Tensor out(a.shape());
  const Real* p = a.data();
  const Real* r = b.data();
  Real* q = out.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) q[i] = f(p[i], r[i]);
  return out;
}

Node& in(Node& self, std::size_t i) { return *self.inputs[i]; }

void require_rank(const Var& x, std::size_t rank, const char* what) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                     x.shape().to_string());
  }
}

// Per-channel sums for x[N,C,...] -> [C].
Tensor channel_sum(const Tensor& x) {
  const auto n = x.dim(0), c = x.dim(1), inner = x.shape().numel_from(2);
  Tensor s(Shape{c});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const Real* p = x.data() + (i * c + ch) * inner;
      Real acc = 0;
      for (std::int64_t j = 0; j < inner; ++j) acc += p[j];
      s[ch] += acc;
    }
  }
  return s;
}

}  // namespace

void Node::accumulate(const Tensor& g) {
  if (!requires_grad) return;
  if (grad.empty()) {
    expect_same_shape(value, g, "gradient accumulation");
    grad = g;
  } else {
    grad += g;
  }
}

void Node::accumulate(Tensor&& g) {
  if (!requires_grad) return;
  if (grad.empty()) {
    expect_same_shape(value, g, "gradient accumulation");
    grad = std::move(g);
  } else {
    grad += g;
  }
}

Var Var::leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->order = next_order();
  return Var(std::move(node));
}

Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->order = next_order();
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Var& v) { return v.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& v : inputs) node->inputs.push_back(v.node());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

Var GradGraph::param(const Parameter& p) {
  if (auto it = leaves_.find(&p); it != leaves_.end()) return it->second;
  Var leaf = Var::leaf(p.value, recording_ && !p.frozen);
  leaf.node()->param = &p;
  leaves_.emplace(&p, leaf);
  return leaf;
}

GradMap GradGraph::backward(const Var& loss) {
  if (!loss.defined() || loss.value().numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  GradMap grads;
  if (loss.requires_grad()) {
    // Owning handles: clearing a node's inputs below must not free nodes
    // that are still queued.
    std::vector<NodePtr> nodes;
    std::vector<NodePtr> stack{loss.node()};
    std::unordered_map<Node*, bool> seen;
    seen[loss.node().get()] = true;
    while (!stack.empty()) {
      NodePtr n = std::move(stack.back());
      stack.pop_back();
      for (auto& child : n->inputs) {
        if (child->requires_grad && !seen[child.get()]) {
          seen[child.get()] = true;
          stack.push_back(child);
        }
      }
      nodes.push_back(std::move(n));
    }
    std::sort(nodes.begin(), nodes.end(), [](const NodePtr& a, const NodePtr& b) { return a->order > b->order; });
    loss.node()->grad = Tensor(loss.shape(), Real(1));
    for (auto& n : nodes) {
      if (!n->backward) continue;
      if (!n->grad.empty()) n->backward(*n);
      n->grad = Tensor{};
      n->backward = nullptr;
      n->inputs.clear();
    }
  }
  for (auto& [param, leaf] : leaves_) {
    if (!leaf.requires_grad()) continue;
    grads[param->name] = leaf.grad().empty() ? Tensor::zeros_like(leaf.value()) : leaf.grad();
  }
  return grads;
}

namespace ad {

Var add(const Var& a, const Var& b) {
  auto v = map_binary(a.value(), b.value(), [](Real x, Real y) { return x + y; }, "add");
  return make_op(std::move(v), {a, b}, [](Node& self) {
    in(self, 0).accumulate(self.grad);
    in(self, 1).accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  auto v = map_binary(a.value(), b.value(), [](Real x, Real y) { return x - y; }, "sub");
  return make_op(std::move(v), {a, b}, [](Node& self) {
    in(self, 0).accumulate(self.grad);
    if (in(self, 1).requires_grad) in(self, 1).accumulate(map_unary(self.grad, [](Real g) { return -g; }));
  });
}

Var mul(const Var& a, const Var& b) {
  auto v = map_binary(a.value(), b.value(), [](Real x, Real y) { return x * y; }, "mul");
  return make_op(std::move(v), {a, b}, [](Node& self) {
    auto& x = in(self, 0);
    auto& y = in(self, 1);
    if (x.requires_grad) x.accumulate(map_binary(self.grad, y.value, [](Real g, Real b) { return g * b; }, "mul"));
    if (y.requires_grad) y.accumulate(map_binary(self.grad, x.value, [](Real g, Real a) { return g * a; }, "mul"));
  });
}

Var scale(const Var& a, Real s) {
  auto v = map_unary(a.value(), [s](Real x) { return x * s; });
  return make_op(std::move(v), {a}, [s](Node& self) {
    in(self, 0).accumulate(map_unary(self.grad, [s](Real g) { return g * s; }));
  });
}

Var relu(const Var& a) {
  auto v = map_unary(a.value(), [](Real x) { return x > 0 ? x : Real(0); });
  return make_op(std::move(v), {a}, [](Node& self) {
    in(self, 0).accumulate(
        map_binary(self.grad, in(self, 0).value, [](Real g, Real x) { return x > 0 ? g : Real(0); }, "relu"));
  });
}

Var log(const Var& a) {
  auto v = map_unary(a.value(), [](Real x) { return std::log(x); });
  return make_op(std::move(v), {a}, [](Node& self) {
    in(self, 0).accumulate(
        map_binary(self.grad, in(self, 0).value, [](Real g, Real x) { return g / x; }, "log"));
  });
}

Var square(const Var& a) {
  auto v = map_unary(a.value(), [](Real x) { return x * x; });
  return make_op(std::move(v), {a}, [](Node& self) {
    in(self, 0).accumulate(
        map_binary(self.grad, in(self, 0).value, [](Real g, Real x) { return 2 * x * g; }, "square"));
  });
}

Var matmul(const Var& a, const Var& b) {
  auto v = kernels::matmul(a.value(), b.value());
  return make_op(std::move(v), {a, b}, [](Node& self) {
    auto& x = in(self, 0);
    auto& y = in(self, 1);
    if (x.requires_grad) x.accumulate(kernels::matmul(self.grad, y.value, false, true));
    if (y.requires_grad) y.accumulate(kernels::matmul(x.value, self.grad, true, false));
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank(x, 2, "linear input");
  require_rank(w, 2, "linear weight");
  if (b.value().rank() != 1 || b.value().dim(0) != w.value().dim(0)) {
    throw ShapeError("linear bias shape " + b.shape().to_string() + " for weight " +
                     w.shape().to_string());
  }
  auto v = kernels::matmul(x.value(), w.value(), false, true);
  const auto rows = v.dim(0), cols = v.dim(1);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) v[i * cols + j] += b.value()[j];
  return make_op(std::move(v), {x, w, b}, [](Node& self) {
    auto& xi = in(self, 0);
    auto& wi = in(self, 1);
    auto& bi = in(self, 2);
    if (xi.requires_grad) xi.accumulate(kernels::matmul(self.grad, wi.value));
    if (wi.requires_grad) wi.accumulate(kernels::matmul(self.grad, xi.value, true, false));
    if (bi.requires_grad) {
      const auto r = self.grad.dim(0), c = self.grad.dim(1);
      Tensor gb(Shape{c});
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) gb[j] += self.grad[i * c + j];
      bi.accumulate(std::move(gb));
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var* bias, int stride, int pad) {
  auto v = kernels::conv2d_forward(x.value(), w.value(), bias ? &bias->value() : nullptr, stride, pad);
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return make_op(std::move(v), std::move(inputs), [stride, pad](Node& self) {
    auto& xi = in(self, 0);
    auto& wi = in(self, 1);
    if (xi.requires_grad)
      xi.accumulate(kernels::conv2d_backward_input(self.grad, wi.value, xi.value.shape(), stride, pad));
    if (wi.requires_grad)
      wi.accumulate(kernels::conv2d_backward_weight(self.grad, xi.value, wi.value.shape(), stride, pad));
    if (self.inputs.size() > 2 && in(self, 2).requires_grad) in(self, 2).accumulate(channel_sum(self.grad));
  });
}

Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, Real eps, Tensor* mean_out,
                     Tensor* var_out) {
  auto stats = kernels::channel_stats(x.value());
  auto y = kernels::normalize_affine(x.value(), stats.mean, stats.var, gamma.value(), beta.value(), eps);
  const auto c = x.value().dim(1);
  Tensor inv_std(Shape{c});
  for (std::int64_t ch = 0; ch < c; ++ch) inv_std[ch] = Real(1) / std::sqrt(stats.var[ch] + eps);
  if (mean_out) *mean_out = stats.mean;
  if (var_out) *var_out = stats.var;
  return make_op(std::move(y), {x, gamma, beta}, [mean = std::move(stats.mean), inv_std](Node& self) {
    auto& xi = in(self, 0);
    auto& gi = in(self, 1);
    auto& bi = in(self, 2);
    const auto& xv = xi.value;
    const auto n = xv.dim(0), c = xv.dim(1), inner = xv.shape().numel_from(2);
    const Real m = static_cast<Real>(n * inner);
    Tensor sum_g(Shape{c}), sum_gx(Shape{c});
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const Real* g = self.grad.data() + (i * c + ch) * inner;
        const Real* p = xv.data() + (i * c + ch) * inner;
        Real sg = 0, sgx = 0;
        for (std::int64_t j = 0; j < inner; ++j) {
          sg += g[j];
          sgx += g[j] * (p[j] - mean[ch]) * inv_std[ch];
        }
        sum_g[ch] += sg;
        sum_gx[ch] += sgx;
      }
    }
    if (xi.requires_grad) {
      Tensor gx(xv.shape());
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const Real k = gi.value[ch] * inv_std[ch] / m;
          const Real* g = self.grad.data() + (i * c + ch) * inner;
          const Real* p = xv.data() + (i * c + ch) * inner;
          Real* q = gx.data() + (i * c + ch) * inner;
          for (std::int64_t j = 0; j < inner; ++j) {
            const Real xhat = (p[j] - mean[ch]) * inv_std[ch];
            q[j] = k * (m * g[j] - sum_g[ch] - xhat * sum_gx[ch]);
          }
        }
      }
      xi.accumulate(std::move(gx));
    }
    gi.accumulate(std::move(sum_gx));
    bi.accumulate(std::move(sum_g));
  });
}

Var batch_norm_fixed(const Var& x, const Tensor& mean, const Tensor& var, const Var& gamma,
                     const Var& beta, Real eps) {
  auto y = kernels::normalize_affine(x.value(), mean, var, gamma.value(), beta.value(), eps);
  const auto c = x.value().dim(1);
  Tensor inv_std(Shape{c});
  for (std::int64_t ch = 0; ch < c; ++ch) inv_std[ch] = Real(1) / std::sqrt(var[ch] + eps);
  return make_op(std::move(y), {x, gamma, beta}, [mean, inv_std](Node& self) {
    auto& xi = in(self, 0);
    auto& gi = in(self, 1);
    auto& bi = in(self, 2);
    const auto& xv = xi.value;
    const auto n = xv.dim(0), c = xv.dim(1), inner = xv.shape().numel_from(2);
    Tensor gx = xi.requires_grad ? Tensor(xv.shape()) : Tensor{};
    Tensor sum_g(Shape{c}), sum_gx(Shape{c});
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const Real k = gi.value[ch] * inv_std[ch];
        const Real* g = self.grad.data() + (i * c + ch) * inner;
        const Real* p = xv.data() + (i * c + ch) * inner;
        Real sg = 0, sgx = 0;
        for (std::int64_t j = 0; j < inner; ++j) {
          sg += g[j];
          sgx += g[j] * (p[j] - mean[ch]) * inv_std[ch];
        }
        if (!gx.empty()) {
          Real* q = gx.data() + (i * c + ch) * inner;
          for (std::int64_t j = 0; j < inner; ++j) q[j] = g[j] * k;
        }
        sum_g[ch] += sg;
        sum_gx[ch] += sgx;
      }
    }
    if (!gx.empty()) xi.accumulate(std::move(gx));
    gi.accumulate(std::move(sum_gx));
    bi.accumulate(std::move(sum_g));
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  auto v = kernels::global_avg_pool(x.value());
  return make_op(std::move(v), {x}, [](Node& self) {
    const auto& shape = in(self, 0).value.shape();
    const auto hw = shape[2] * shape[3];
    Tensor gx(shape);
    const Real inv = Real(1) / static_cast<Real>(hw);
    for (std::int64_t i = 0; i < shape[0] * shape[1]; ++i) {
      const Real g = self.grad[i] * inv;
      std::fill(gx.data() + i * hw, gx.data() + (i + 1) * hw, g);
    }
    in(self, 0).accumulate(std::move(gx));
  });
}

Var avg_pool2d(const Var& x, int k) {
  require_rank(x, 4, "avg_pool2d");
  const auto& s = x.shape();
  if (k < 1 || s[2] % k != 0 || s[3] % k != 0) {
    throw ShapeError("avg_pool2d: kernel " + std::to_string(k) + " does not tile " + s.to_string());
  }
  const auto oh = s[2] / k, ow = s[3] / k;
  Tensor v(Shape{s[0], s[1], oh, ow});
  const Real inv = Real(1) / static_cast<Real>(k * k);
  for (std::int64_t p = 0; p < s[0] * s[1]; ++p) {
    const Real* src = x.value().data() + p * s[2] * s[3];
    Real* dst = v.data() + p * oh * ow;
    for (std::int64_t i = 0; i < s[2]; ++i)
      for (std::int64_t j = 0; j < s[3]; ++j) dst[(i / k) * ow + j / k] += src[i * s[3] + j] * inv;
  }
  return make_op(std::move(v), {x}, [k, inv](Node& self) {
    const auto& s = in(self, 0).value.shape();
    const auto oh = s[2] / k, ow = s[3] / k;
    Tensor gx(s);
    for (std::int64_t p = 0; p < s[0] * s[1]; ++p) {
      const Real* g = self.grad.data() + p * oh * ow;
      Real* dst = gx.data() + p * s[2] * s[3];
      for (std::int64_t i = 0; i < s[2]; ++i)
        for (std::int64_t j = 0; j < s[3]; ++j) dst[i * s[3] + j] = g[(i / k) * ow + j / k] * inv;
    }
    in(self, 0).accumulate(std::move(gx));
  });
}

Var reshape(const Var& x, Shape s) {
  auto v = x.value().reshaped(std::move(s));
  return make_op(std::move(v), {x}, [](Node& self) {
    in(self, 0).accumulate(self.grad.reshaped(in(self, 0).value.shape()));
  });
}

Var flatten(const Var& x) {
  const auto& s = x.shape();
  return reshape(x, Shape{s[0], s.numel_from(1)});
}

Var softmax(const Var& logits) {
  require_rank(logits, 2, "softmax");
  const auto rows = logits.value().dim(0), cols = logits.value().dim(1);
  Tensor y(logits.shape());
  for (std::int64_t i = 0; i < rows; ++i) {
    const Real* p = logits.value().data() + i * cols;
    Real* q = y.data() + i * cols;
    const Real mx = *std::max_element(p, p + cols);
    Real z = 0;
    for (std::int64_t j = 0; j < cols; ++j) z += (q[j] = std::exp(p[j] - mx));
    for (std::int64_t j = 0; j < cols; ++j) q[j] /= z;
  }
  return make_op(std::move(y), {logits}, [](Node& self) {
    const auto rows = self.value.dim(0), cols = self.value.dim(1);
    Tensor gx(self.value.shape());
    for (std::int64_t i = 0; i < rows; ++i) {
      const Real* yv = self.value.data() + i * cols;
      const Real* g = self.grad.data() + i * cols;
      Real dot = 0;
      for (std::int64_t j = 0; j < cols; ++j) dot += g[j] * yv[j];
      for (std::int64_t j = 0; j < cols; ++j) gx[i * cols + j] = yv[j] * (g[j] - dot);
    }
    in(self, 0).accumulate(std::move(gx));
  });
}

Var log_softmax(const Var& logits) {
  require_rank(logits, 2, "log_softmax");
  const auto rows = logits.value().dim(0), cols = logits.value().dim(1);
  Tensor y(logits.shape());
  for (std::int64_t i = 0; i < rows; ++i) {
    const Real* p = logits.value().data() + i * cols;
    Real* q = y.data() + i * cols;
    const Real mx = *std::max_element(p, p + cols);
    Real z = 0;
    for (std::int64_t j = 0; j < cols; ++j) z += std::exp(p[j] - mx);
    const Real lse = mx + std::log(z);
    for (std::int64_t j = 0; j < cols; ++j) q[j] = p[j] - lse;
  }
  return make_op(std::move(y), {logits}, [](Node& self) {
    const auto rows = self.value.dim(0), cols = self.value.dim(1);
    Tensor gx(self.value.shape());
    for (std::int64_t i = 0; i < rows; ++i) {
      const Real* yv = self.value.data() + i * cols;
      const Real* g = self.grad.data() + i * cols;
      Real total = 0;
      for (std::int64_t j = 0; j < cols; ++j) total += g[j];
      for (std::int64_t j = 0; j < cols; ++j) gx[i * cols + j] = g[j] - std::exp(yv[j]) * total;
    }
    in(self, 0).accumulate(std::move(gx));
  });
}

Var sum(const Var& x) {
  Real s = 0;
  for (auto v : x.value().values()) s += v;
  return make_op(Tensor::scalar(s), {x}, [](Node& self) {
    in(self, 0).accumulate(Tensor(in(self, 0).value.shape(), self.grad[0]));
  });
}

Var mean(const Var& x) {
  const auto n = static_cast<Real>(x.value().numel());
  Real s = 0;
  for (auto v : x.value().values()) s += v;
  return make_op(Tensor::scalar(s / n), {x}, [n](Node& self) {
    in(self, 0).accumulate(Tensor(in(self, 0).value.shape(), self.grad[0] / n));
  });
}

Var mean_axis(const Var& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.rank()) throw ShapeError("mean_axis: axis out of range for " + s.to_string());
  std::int64_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  const auto extent = s[axis];
  const auto inner = s.numel_from(axis + 1);
  std::vector<std::int64_t> dims;
  for (std::size_t i = 0; i < s.rank(); ++i)
    if (i != axis) dims.push_back(s[i]);
  if (dims.empty()) dims.push_back(1);
  Tensor y{Shape(dims)};
  const Real inv = Real(1) / static_cast<Real>(extent);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t a = 0; a < extent; ++a)
      for (std::int64_t i = 0; i < inner; ++i) y[o * inner + i] += x.value()[(o * extent + a) * inner + i];
  y *= inv;
  return make_op(std::move(y), {x}, [outer, extent, inner, inv](Node& self) {
    Tensor gx(in(self, 0).value.shape());
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t a = 0; a < extent; ++a)
        for (std::int64_t i = 0; i < inner; ++i)
          gx[(o * extent + a) * inner + i] = self.grad[o * inner + i] * inv;
    in(self, 0).accumulate(std::move(gx));
  });
}

Var custom_node(const Var& input, Tensor value, Tensor multiplier) {
  expect_same_shape(input.value(), value, "custom_node value");
  expect_same_shape(value, multiplier, "custom_node multiplier");
  return make_op(std::move(value), {input}, [m = std::move(multiplier)](Node& self) {
    in(self, 0).accumulate(map_binary(self.grad, m, [](Real g, Real k) { return g * k; }, "custom_node"));
  });
}

Var custom_node(const Var& input, Tensor multiplier) {
  return custom_node(input, input.value(), std::move(multiplier));
}

}  // namespace ad
RATEKD_END_NAMESPACE
