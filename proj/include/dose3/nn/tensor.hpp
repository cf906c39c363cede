#pragma once

// Minimal dense tensor and a reverse-mode tape. Nodes are appended in
// evaluation order, so a reverse sweep over the node list is a valid
// topological order for backpropagation.

#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dose3/error.hpp"

namespace dose3::nn {

/// Float storage aligned to Eigen's packet size. Eigen's vectorized reductions
/// peel according to the buffer address, so a fixed alignment is what makes
/// repeated runs bitwise identical.
using Buffer = std::vector<float, Eigen::aligned_allocator<float>>;

struct Tensor {
  std::vector<int> shape;
  Buffer data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)), data(count(shape), fill) {}
  Tensor(std::vector<int> s, std::span<const float> d) : shape(std::move(s)), data(d.begin(), d.end()) {
    if (data.size() != count(shape)) throw Error(ErrorKind::ShapeError, "data length does not match shape");
  }

  static std::size_t count(const std::vector<int>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

  std::size_t numel() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
};

inline std::string shape_string(const std::vector<int>& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

struct Parameter {
  std::string name;
  Tensor value;
  Buffer grad;
};

struct Var {
  int id = -1;
};

class Tape;
using BackwardFn = std::function<void(Tape&, Var self)>;

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor t) {
    Node n;
    n.value = std::move(t);
    return append(std::move(n));
  }

  /// Non-owning constant; `t` must outlive the tape.
  Var constant_ref(const Tensor& t) {
    Node n;
    n.ref = &t;
    return append(std::move(n));
  }

  /// References the parameter in place; gradients accumulate into p.grad.
  Var parameter(Parameter& p) {
    Node n;
    n.ref = &p.value;
    if (grad_enabled_) {
      n.param = &p;
      n.needs_grad = true;
      if (p.grad.size() != p.value.numel()) p.grad.assign(p.value.numel(), 0.0f);
    }
    return append(std::move(n));
  }

  /// Records an op result. `fn` runs during backward when this node received
  /// a gradient; it is dropped if no input needs one.
  Var record(Tensor value, bool needs_grad, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = grad_enabled_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(fn);
    return append(std::move(n));
  }

  const Tensor& value(Var v) const {
    const Node& n = node(v);
    return n.ref ? *n.ref : n.value;
  }
  const std::vector<int>& shape(Var v) const { return value(v).shape; }
  bool needs_grad(Var v) const { return node(v).needs_grad; }

  /// Gradient buffer of `v`, zero-allocated on first access.
  Buffer& grad(Var v) {
    Node& n = node(v);
    if (n.param) return n.param->grad;
    if (n.grad.empty()) n.grad.assign(value(v).numel(), 0.0f);
    return n.grad;
  }

  /// Per-node scratch kept for the backward pass (im2col buffers, softmax rows).
  Buffer& aux(Var v) { return node(v).aux; }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var out, std::span<const float> upstream) {
    if (!grad_enabled_ || out.id < 0 || out.id >= static_cast<int>(nodes_.size()) || !nodes_[out.id].needs_grad) {
      throw Error(ErrorKind::NoGraph, "no recorded computation leads to this output");
    }
    auto& g = grad(out);
    if (upstream.size() != g.size()) throw Error(ErrorKind::ShapeError, "upstream gradient has the wrong size");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += upstream[i];
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, Var{i});
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* ref = nullptr;
    Parameter* param = nullptr;
    bool needs_grad = false;
    Buffer grad;
    Buffer aux;
    BackwardFn backward;
  };

  Node& node(Var v) {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw Error(ErrorKind::NoGraph, "unknown variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw Error(ErrorKind::NoGraph, "unknown variable");
    return nodes_[v.id];
  }

  Var append(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

}  // namespace dose3::nn
