#pragma once

// Tape-based reverse-mode differentiation over Tensor values. Nodes are
// appended in evaluation order, so the node vector is already a topological
// order and backward is a single reverse sweep.

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pcsnet/kernels.hpp"
#include "pcsnet/rng.hpp"
#include "pcsnet/tensor.hpp"

namespace pcsnet {

/// A trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(std::move(shape)) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    grad.fill(T{0});
  }
};

/// Fan-in scaled uniform init, bound = sqrt(1 / fan_in).
template <typename T>
void init_uniform(Parameter<T>& p, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (auto& v : p.value.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
  p.zero_grad();
}

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

class BackwardError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // NaN/Inf check after every op. On by default in debug builds.
#ifdef NDEBUG
  bool check_numerics = false;
#else
  bool check_numerics = true;
#endif

  // ---- leaves -------------------------------------------------------------

  Var constant(Tensor<T> v) { return leaf("constant", std::move(v), false); }
  Var input(Tensor<T> v, bool requires_grad = true) { return leaf("input", std::move(v), requires_grad); }

  /// Binds a parameter. Repeated binds of the same parameter share one node.
  Var param(Parameter<T>& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var{it->second};
    Var v = leaf("param", p.value, true);
    nodes_[v.id].param = &p;
    bound_.emplace(&p, v.id);
    return v;
  }

  /// Registers an op computed outside the graph. Without a backward function
  /// a gradient request through it raises BackwardError.
  Var custom(std::string op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn = {}) {
    return push(std::move(op), std::move(value), std::move(inputs), std::move(fn));
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const Node& node(Var v) const { return nodes_.at(v.id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of the last backward target w.r.t. v (zeros if unreached).
  Tensor<T> grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  // ---- ops ----------------------------------------------------------------

  Var conv2d(Var x, Var w, Var b, std::size_t stride) {
    auto y = kernels::conv2d_forward(value(x), value(w), value(b), stride);
    return push("conv2d", std::move(y), {x.id, w.id, b.id}, [stride](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      const auto xi = n.inputs[0], wi = n.inputs[1], bi = n.inputs[2];
      Tensor<T>* dx = g.wants(xi) ? &g.grad_ref(xi) : nullptr;
      Tensor<T>* dw = g.wants(wi) ? &g.grad_ref(wi) : nullptr;
      Tensor<T>* db = g.wants(bi) ? &g.grad_ref(bi) : nullptr;
      kernels::conv2d_backward(g.nodes_[xi].value, g.nodes_[wi].value, stride, n.grad, dx, dw, db);
    });
  }

  /// Appends normalized x- and y-coordinate channels. No gradient flows into them.
  Var coordconv(Var x) {
    auto y = kernels::coordconv_forward(value(x));
    return push("coordconv", std::move(y), {x.id}, [](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      const auto xi = n.inputs[0];
      if (!g.wants(xi)) return;
      auto& dx = g.grad_ref(xi);
      const std::size_t c = dx.c(), hw = dx.h() * dx.w();
      for (std::size_t b = 0; b < dx.n(); ++b) {
        const T* src = n.grad.data() + b * (c + 2) * hw;
        T* dst = dx.data() + b * c * hw;
        for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
      }
    });
  }

  Var upsample(Var x, std::size_t factor) {
    auto y = kernels::upsample_bilinear_forward(value(x), factor);
    return push("upsample", std::move(y), {x.id}, [factor](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      if (g.wants(n.inputs[0])) kernels::upsample_bilinear_backward(n.grad, factor, g.grad_ref(n.inputs[0]));
    });
  }

  Var relu(Var x) {
    Tensor<T> y = value(x);
    for (auto& v : y.vec()) v = v > T{0} ? v : T{0};
    return push("relu", std::move(y), {x.id}, [](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      if (!g.wants(n.inputs[0])) return;
      auto& dx = g.grad_ref(n.inputs[0]);
      const auto& xv = g.nodes_[n.inputs[0]].value;
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (xv[i] > T{0}) dx[i] += n.grad[i];
    });
  }

  Var sigmoid(Var x) {
    Tensor<T> y = value(x);
    for (auto& v : y.vec()) v = sigmoid_scalar(v);
    return push("sigmoid", std::move(y), {x.id}, [](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      if (!g.wants(n.inputs[0])) return;
      auto& dx = g.grad_ref(n.inputs[0]);
      for (std::size_t i = 0; i < dx.size(); ++i) {
        const T s = n.value[i];
        dx[i] += n.grad[i] * s * (T{1} - s);
      }
    });
  }

  /// log(1 + x), defined for x > -1.
  Var log1p(Var x) {
    Tensor<T> y = value(x);
    for (auto& v : y.vec()) {
      if (!(v > T{-1})) throw std::domain_error("log1p: input must exceed -1");
      v = std::log1p(v);
    }
    return push("log1p", std::move(y), {x.id}, [](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      if (!g.wants(n.inputs[0])) return;
      auto& dx = g.grad_ref(n.inputs[0]);
      const auto& xv = g.nodes_[n.inputs[0]].value;
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += n.grad[i] / (T{1} + xv[i]);
    });
  }

  /// Channel concatenation of two 4-D tensors with matching batch and spatial size.
  Var concat_channels(Var a, Var b) {
    const auto &av = value(a), &bv = value(b);
    if (av.rank() != 4 || bv.rank() != 4 || av.n() != bv.n() || av.h() != bv.h() || av.w() != bv.w())
      throw ShapeError("concat_channels: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    const std::size_t ca = av.c(), cb = bv.c(), hw = av.h() * av.w();
    Tensor<T> y(Shape{av.n(), ca + cb, av.h(), av.w()});
    for (std::size_t n = 0; n < av.n(); ++n) {
      std::copy_n(av.data() + n * ca * hw, ca * hw, y.data() + n * (ca + cb) * hw);
      std::copy_n(bv.data() + n * cb * hw, cb * hw, y.data() + (n * (ca + cb) + ca) * hw);
    }
    return push("concat", std::move(y), {a.id, b.id}, [ca, cb, hw](Graph& g, std::size_t self) {
      auto& node = g.nodes_[self];
      const std::size_t batch = node.value.n();
      for (int side = 0; side < 2; ++side) {
        const auto in = node.inputs[side];
        if (!g.wants(in)) continue;
        auto& d = g.grad_ref(in);
        const std::size_t cs = side == 0 ? ca : cb, off = side == 0 ? 0 : ca;
        for (std::size_t n = 0; n < batch; ++n) {
          const T* src = node.grad.data() + (n * (ca + cb) + off) * hw;
          T* dst = d.data() + n * cs * hw;
          for (std::size_t i = 0; i < cs * hw; ++i) dst[i] += src[i];
        }
      }
    });
  }

  Var add(Var a, Var b) {
    Tensor<T> y = value(a);
    y.require_same_shape(value(b), "add");
    y += value(b);
    return push("add", std::move(y), {a.id, b.id}, [](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      for (auto in : n.inputs)
        if (g.wants(in)) g.grad_ref(in) += n.grad;
    });
  }

  Var scale(Var a, T s) {
    Tensor<T> y = value(a);
    for (auto& v : y.vec()) v *= s;
    return push("scale", std::move(y), {a.id}, [s](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      if (!g.wants(n.inputs[0])) return;
      auto& d = g.grad_ref(n.inputs[0]);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * n.grad[i];
    });
  }

  Var add_scalar(Var a, T s) {
    Tensor<T> y = value(a);
    for (auto& v : y.vec()) v += s;
    return push("add_scalar", std::move(y), {a.id}, [](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      if (g.wants(n.inputs[0])) g.grad_ref(n.inputs[0]) += n.grad;
    });
  }

  Var sum(Var a) {
    const T s = value(a).sum();
    return push("sum", Tensor<T>::scalar(s), {a.id}, [](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      if (!g.wants(n.inputs[0])) return;
      auto& d = g.grad_ref(n.inputs[0]);
      for (auto& v : d.vec()) v += n.grad[0];
    });
  }

  Var mean(Var a) {
    const auto& av = value(a);
    const T m = av.sum() / static_cast<T>(av.size());
    return push("mean", Tensor<T>::scalar(m), {a.id}, [](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      if (!g.wants(n.inputs[0])) return;
      auto& d = g.grad_ref(n.inputs[0]);
      const T gv = n.grad[0] / static_cast<T>(d.size());
      for (auto& v : d.vec()) v += gv;
    });
  }

  /// Mean of squared differences.
  Var mse_mean(Var a, Var b) {
    const auto &av = value(a), &bv = value(b);
    av.require_same_shape(bv, "mse_mean");
    T acc{0};
    for (std::size_t i = 0; i < av.size(); ++i) {
      const T d = av[i] - bv[i];
      acc += d * d;
    }
    return push("mse_mean", Tensor<T>::scalar(acc / static_cast<T>(av.size())), {a.id, b.id},
                [](Graph& g, std::size_t self) {
                  auto& n = g.nodes_[self];
                  const auto &av = g.nodes_[n.inputs[0]].value, &bv = g.nodes_[n.inputs[1]].value;
                  const T k = T{2} * n.grad[0] / static_cast<T>(av.size());
                  if (g.wants(n.inputs[0])) {
                    auto& d = g.grad_ref(n.inputs[0]);
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += k * (av[i] - bv[i]);
                  }
                  if (g.wants(n.inputs[1])) {
                    auto& d = g.grad_ref(n.inputs[1]);
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= k * (av[i] - bv[i]);
                  }
                });
  }

  /// Mean binary cross-entropy between probabilities p and fixed targets t.
  /// p is clamped to [eps, 1 - eps].
  Var bce_mean(Var p, const Tensor<T>& target) {
    const auto& pv = value(p);
    pv.require_same_shape(target, "bce_mean");
    constexpr T eps = std::is_same_v<T, float> ? T(1e-6) : T(1e-12);
    T acc{0};
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const T q = std::clamp(pv[i], eps, T{1} - eps);
      acc -= target[i] * std::log(q) + (T{1} - target[i]) * std::log(T{1} - q);
    }
    return push("bce_mean", Tensor<T>::scalar(acc / static_cast<T>(pv.size())), {p.id},
                [target](Graph& g, std::size_t self) {
                  auto& n = g.nodes_[self];
                  if (!g.wants(n.inputs[0])) return;
                  const auto& pv = g.nodes_[n.inputs[0]].value;
                  auto& d = g.grad_ref(n.inputs[0]);
                  const T k = n.grad[0] / static_cast<T>(pv.size());
                  for (std::size_t i = 0; i < d.size(); ++i) {
                    if (pv[i] <= eps || pv[i] >= T{1} - eps) continue;
                    d[i] += k * ((pv[i] - target[i]) / (pv[i] * (T{1} - pv[i])));
                  }
                });
  }

  /// Binary cross-entropy with logits for a scalar logit z and label y:
  /// softplus(z) - y*z, evaluated stably.
  Var bce_with_logits(Var z, T label) {
    const T zv = value(z).item();
    const T loss = std::max(zv, T{0}) - label * zv + std::log1p(std::exp(-std::abs(zv)));
    return push("bce_with_logits", Tensor<T>::scalar(loss), {z.id}, [label](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      if (!g.wants(n.inputs[0])) return;
      const T zv = g.nodes_[n.inputs[0]].value[0];
      g.grad_ref(n.inputs[0])[0] += n.grad[0] * (sigmoid_scalar(zv) - label);
    });
  }

  /// Mean over the channel axis of a 4-D tensor: [N,C,H,W] -> [N,1,H,W].
  Var mean_channels(Var x) {
    const auto& xv = value(x);
    const std::size_t c = xv.c(), hw = xv.h() * xv.w();
    Tensor<T> y(Shape{xv.n(), 1, xv.h(), xv.w()});
    for (std::size_t b = 0; b < xv.n(); ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* src = xv.data() + (b * c + ch) * hw;
        T* dst = y.data() + b * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
      }
    for (auto& v : y.vec()) v /= static_cast<T>(c);
    return push("mean_channels", std::move(y), {x.id}, [c, hw](Graph& g, std::size_t self) {
      auto& n = g.nodes_[self];
      if (!g.wants(n.inputs[0])) return;
      auto& d = g.grad_ref(n.inputs[0]);
      for (std::size_t b = 0; b < d.n(); ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < hw; ++i) d[(b * c + ch) * hw + i] += n.grad[b * hw + i] / static_cast<T>(c);
    });
  }

  /// Mean of the flat entries at `indices`. The indices are constants of the
  /// forward pass.
  Var gather_mean(Var x, std::vector<std::size_t> indices) {
    if (indices.empty()) throw std::invalid_argument("gather_mean: empty index set");
    const auto& xv = value(x);
    T acc{0};
    for (auto i : indices) acc += xv.vec().at(i);
    const T m = acc / static_cast<T>(indices.size());
    return push("gather_mean", Tensor<T>::scalar(m), {x.id},
                [idx = std::move(indices)](Graph& g, std::size_t self) {
                  auto& n = g.nodes_[self];
                  if (!g.wants(n.inputs[0])) return;
                  auto& d = g.grad_ref(n.inputs[0]);
                  const T gv = n.grad[0] / static_cast<T>(idx.size());
                  for (auto i : idx) d[i] += gv;
                });
  }

  /// Squared Euclidean distances between each spatial feature vector of f
  /// ([1,C,H,W]) and fixed reference vectors. `refs` is [1,C,Hr,Wr] (one
  /// vector per flat location); `index[k*J + j]` names the reference for
  /// output channel k at location j. Output is [1,K,H,W]. References and
  /// indices are constants.
  Var sq_dist_to_refs(Var f, const Tensor<T>& refs, std::vector<std::size_t> index, std::size_t k) {
    const auto& fv = value(f);
    if (fv.rank() != 4 || fv.n() != 1 || refs.rank() != 4 || refs.c() != fv.c())
      throw ShapeError("sq_dist_to_refs: " + shape_str(fv.shape()) + " vs refs " + shape_str(refs.shape()));
    const std::size_t c = fv.c(), j = fv.h() * fv.w(), jr = refs.h() * refs.w();
    if (index.size() != k * j) throw ShapeError("sq_dist_to_refs: index length mismatch");
    Tensor<T> y(Shape{1, k, fv.h(), fv.w()});
    for (std::size_t kk = 0; kk < k; ++kk)
      for (std::size_t p = 0; p < j; ++p) {
        const std::size_t r = index[kk * j + p];
        if (r >= jr) throw std::out_of_range("sq_dist_to_refs: reference index");
        T acc{0};
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T d = fv[ch * j + p] - refs[ch * jr + r];
          acc += d * d;
        }
        y[kk * j + p] = acc;
      }
    return push("sq_dist_to_refs", std::move(y), {f.id},
                [refs, idx = std::move(index), k, c, j, jr](Graph& g, std::size_t self) {
                  auto& n = g.nodes_[self];
                  if (!g.wants(n.inputs[0])) return;
                  const auto& fv = g.nodes_[n.inputs[0]].value;
                  auto& d = g.grad_ref(n.inputs[0]);
                  for (std::size_t kk = 0; kk < k; ++kk)
                    for (std::size_t p = 0; p < j; ++p) {
                      const std::size_t r = idx[kk * j + p];
                      const T gv = T{2} * n.grad[kk * j + p];
                      for (std::size_t ch = 0; ch < c; ++ch) d[ch * j + p] += gv * (fv[ch * j + p] - refs[ch * jr + r]);
                    }
                });
  }

  // ---- backward -------------------------------------------------------------

  /// Reverse sweep from a scalar node. Parameter gradients are added to
  /// Parameter::grad.
  void backward(Var loss) {
    auto& root = nodes_.at(loss.id);
    if (root.value.size() != 1) throw BackwardError("backward target must be a scalar, got " + shape_str(root.value.shape()));
    for (auto& n : nodes_) n.grad = Tensor<T>();
    root.grad = Tensor<T>(root.value.shape(), T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.inputs.empty()) continue;
      if (!n.backward) throw BackwardError("no backward registered for op '" + n.op + "'");
      n.backward(*this, i);
    }
    for (auto& n : nodes_)
      if (n.param && !n.grad.empty()) {
        n.param->grad.require_same_shape(n.grad, "parameter gradient");
        n.param->grad += n.grad;
      }
  }

 private:
  static T sigmoid_scalar(T v) {
    if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
    const T e = std::exp(v);
    return e / (T{1} + e);
  }

  Var leaf(const char* op, Tensor<T> v, bool requires_grad) {
    Node n;
    n.op = op;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var push(std::string op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
    if (check_numerics) check_finite(value, op.c_str());
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    for (auto in : inputs) {
      if (in >= nodes_.size()) throw std::out_of_range("graph input id out of range");
      n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    }
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  bool wants(std::size_t id) const { return nodes_[id].requires_grad; }

  Tensor<T>& grad_ref(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> bound_;
};

}  // namespace pcsnet
