#pragma once

// Reverse-mode differentiation over a closed operator set. A Tape records
// operations in execution order; `differentiate` walks it backwards once.
// Nodes are immutable after they are recorded.

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hsvlm/error.hpp"
#include "hsvlm/kernels.hpp"
#include "hsvlm/tensor.hpp"

namespace hsvlm {

enum class OpKind {
  Leaf,
  MatMul,
  AddBias,
  Add,
  LayerNorm,
  Gelu,
  Softmax,
  Attention,
  Reshape,
  ConcatRows,
  GatherRows,
  L2NormalizeRows,
  HalfSquaredNorm,
  // Recorded value with no registered derivative. Differentiating through
  // one raises UnsupportedOperator.
  External,
};

struct Var {
  std::size_t id = 0;
};

template <class T>
class Tape {
 public:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    BasicTensor<T> value;
    bool requires_grad = false;
    std::string name;
    kernels::LayerNormSaved<T> layernorm;
    std::vector<T> probs;
    std::vector<accum_t<T>> norms;
    std::vector<std::size_t> indices;
    kernels::AttentionShape attention{};
  };

  Var constant(BasicTensor<T> value) { return push(OpKind::Leaf, {}, std::move(value), false); }

  Var parameter(BasicTensor<T> value, std::string name = {}) {
    Var v = push(OpKind::Leaf, {}, std::move(value), true);
    nodes_.back().name = std::move(name);
    return v;
  }

  Var matmul(Var a, Var b) { return push(OpKind::MatMul, {a.id, b.id}, kernels::matmul(val(a), val(b))); }

  Var add_bias(Var x, Var bias) {
    const auto& xv = val(x);
    const auto& bv = val(bias);
    if (bv.size() != xv.cols()) fail(ErrorCode::ShapeMismatch, "bias width " + std::to_string(bv.size()));
    BasicTensor<T> y = xv;
    const std::size_t n = xv.cols();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(y[i] + bv[i % n]);
    return push(OpKind::AddBias, {x.id, bias.id}, std::move(y));
  }

  Var add(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (av.shape() != bv.shape()) {
      fail(ErrorCode::ShapeMismatch, "add " + shape_string(av.shape()) + " + " + shape_string(bv.shape()));
    }
    BasicTensor<T> y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(y[i] + bv[i]);
    return push(OpKind::Add, {a.id, b.id}, std::move(y));
  }

  Var layernorm(Var x, Var gamma, Var beta) {
    kernels::LayerNormSaved<T> saved;
    auto y = kernels::layernorm(val(x), val(gamma), val(beta), &saved);
    Var v = push(OpKind::LayerNorm, {x.id, gamma.id, beta.id}, std::move(y));
    nodes_.back().layernorm = std::move(saved);
    return v;
  }

  Var gelu(Var x) { return push(OpKind::Gelu, {x.id}, kernels::gelu(val(x))); }

  Var softmax(Var x) { return push(OpKind::Softmax, {x.id}, kernels::softmax_rows(val(x))); }

  Var attention(Var qkv, kernels::AttentionShape shape) {
    std::vector<T> probs;
    auto y = kernels::attention(val(qkv), shape, &probs);
    Var v = push(OpKind::Attention, {qkv.id}, std::move(y));
    nodes_.back().probs = std::move(probs);
    nodes_.back().attention = shape;
    return v;
  }

  Var reshape(Var x, Shape shape) { return push(OpKind::Reshape, {x.id}, val(x).reshaped(std::move(shape))); }

  /// Stacks rows of `a` above rows of `b`; widths must agree.
  Var concat_rows(Var a, Var b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    if (av.cols() != bv.cols()) fail(ErrorCode::ShapeMismatch, "concat_rows width mismatch");
    std::vector<T> values(av.values().begin(), av.values().end());
    values.insert(values.end(), bv.values().begin(), bv.values().end());
    return push(OpKind::ConcatRows, {a.id, b.id}, BasicTensor<T>({av.rows() + bv.rows(), av.cols()}, std::move(values)));
  }

  /// out[i] = x[indices[i]] row-wise; repeated indices are allowed.
  Var gather_rows(Var x, std::vector<std::size_t> indices) {
    const auto& xv = val(x);
    const std::size_t n = xv.cols();
    if (indices.empty()) fail(ErrorCode::ShapeMismatch, "gather_rows with no indices");
    BasicTensor<T> y({indices.size(), n});
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= xv.rows()) fail(ErrorCode::IndexOutOfRange, "gather_rows index " + std::to_string(indices[i]));
      std::copy_n(xv.data() + indices[i] * n, n, y.data() + i * n);
    }
    Var v = push(OpKind::GatherRows, {x.id}, std::move(y));
    nodes_.back().indices = std::move(indices);
    return v;
  }

  Var l2_normalize_rows(Var x) {
    std::vector<accum_t<T>> norms;
    auto y = kernels::l2_normalize_rows(val(x), &norms);
    Var v = push(OpKind::L2NormalizeRows, {x.id}, std::move(y));
    nodes_.back().norms = std::move(norms);
    return v;
  }

  /// ½‖x‖² as a one-element tensor.
  Var half_squared_norm(Var x) {
    accum_t<T> s = 0;
    for (const T& v : val(x).values()) s += static_cast<accum_t<T>>(v) * static_cast<accum_t<T>>(v);
    return push(OpKind::HalfSquaredNorm, {x.id}, BasicTensor<T>({1}, std::vector<T>{static_cast<T>(s / 2)}));
  }

  Var external(std::string name, BasicTensor<T> value, const std::vector<Var>& inputs) {
    std::vector<std::size_t> ids;
    for (Var v : inputs) ids.push_back(v.id);
    Var v = push(OpKind::External, std::move(ids), std::move(value));
    nodes_.back().name = std::move(name);
    return v;
  }

  [[nodiscard]] const BasicTensor<T>& value(Var v) const { return val(v); }
  [[nodiscard]] const Node& node(Var v) const { return nodes_.at(v.id); }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
  [[nodiscard]] const std::vector<Node>& nodes() const noexcept { return nodes_; }

 private:
  const BasicTensor<T>& val(Var v) const {
    if (v.id >= nodes_.size()) fail(ErrorCode::IndexOutOfRange, "variable not on this tape");
    return nodes_[v.id].value;
  }

  Var push(OpKind kind, std::vector<std::size_t> inputs, BasicTensor<T> value, std::optional<bool> forced = {}) {
    value.check_finite("tape operation");
    Node n;
    n.kind = kind;
    bool req = forced.value_or(false);
    if (!forced) {
      for (std::size_t id : inputs) req = req || nodes_[id].requires_grad;
    }
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.requires_grad = req;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

template <class T>
class Gradients {
 public:
  explicit Gradients(std::vector<std::optional<BasicTensor<T>>> grads, const Tape<T>& tape)
      : grads_(std::move(grads)), tape_(&tape) {}

  /// Gradient for a variable; zeros when the output does not depend on it.
  [[nodiscard]] BasicTensor<T> of(Var v) const {
    if (v.id < grads_.size() && grads_[v.id]) return *grads_[v.id];
    return BasicTensor<T>(tape_->value(v).shape());
  }

 private:
  std::vector<std::optional<BasicTensor<T>>> grads_;
  const Tape<T>* tape_;
};

namespace detail {
template <class T>
void accumulate(std::optional<BasicTensor<T>>& slot, BasicTensor<T> g) {
  if (!slot) {
    slot = std::move(g);
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] = static_cast<T>((*slot)[i] + g[i]);
}
}  // namespace detail

/// Vector-Jacobian product: gradients of Σ ⟨seed_k, output_k⟩ with respect
/// to every node of the tape.
template <class T>
Gradients<T> differentiate(const Tape<T>& tape, const std::vector<std::pair<Var, BasicTensor<T>>>& seeds) {
  const auto& nodes = tape.nodes();
  std::size_t last = 0;
  for (const auto& [output, seed] : seeds) {
    if (output.id >= nodes.size()) fail(ErrorCode::IndexOutOfRange, "output not on this tape");
    if (seed.shape() != nodes[output.id].value.shape()) {
      fail(ErrorCode::ShapeMismatch, "seed " + shape_string(seed.shape()) + " vs output " +
                                         shape_string(nodes[output.id].value.shape()));
    }
    last = std::max(last, output.id);
  }
  std::vector<std::optional<BasicTensor<T>>> g(seeds.empty() ? 0 : last + 1);
  for (const auto& [output, seed] : seeds) detail::accumulate(g[output.id], seed);
  auto need = [&](std::size_t id) { return nodes[id].requires_grad; };

  for (std::size_t id = g.size(); id-- > 0;) {
    const auto& n = nodes[id];
    if (!g[id] || !n.requires_grad || n.kind == OpKind::Leaf) continue;
    const BasicTensor<T>& dy = *g[id];
    const auto& in = n.inputs;
    auto input = [&](std::size_t k) -> const BasicTensor<T>& { return nodes[in[k]].value; };
    switch (n.kind) {
      case OpKind::MatMul:
        if (need(in[0])) detail::accumulate(g[in[0]], kernels::matmul_grad_lhs(dy, input(1)));
        if (need(in[1])) detail::accumulate(g[in[1]], kernels::matmul_grad_rhs(input(0), dy));
        break;
      case OpKind::AddBias:
        if (need(in[0])) detail::accumulate(g[in[0]], dy);
        if (need(in[1])) detail::accumulate(g[in[1]], kernels::column_sums(dy).reshaped(input(1).shape()));
        break;
      case OpKind::Add:
        if (need(in[0])) detail::accumulate(g[in[0]], dy);
        if (need(in[1])) detail::accumulate(g[in[1]], dy);
        break;
      case OpKind::LayerNorm: {
        auto lg = kernels::layernorm_backward(dy, input(1), n.layernorm);
        if (need(in[0])) detail::accumulate(g[in[0]], std::move(lg.dx));
        if (need(in[1])) detail::accumulate(g[in[1]], lg.dgamma.reshaped(input(1).shape()));
        if (need(in[2])) detail::accumulate(g[in[2]], lg.dbeta.reshaped(input(2).shape()));
        break;
      }
      case OpKind::Gelu:
        detail::accumulate(g[in[0]], kernels::gelu_backward(dy, input(0)));
        break;
      case OpKind::Softmax:
        detail::accumulate(g[in[0]], kernels::softmax_rows_backward(dy, n.value));
        break;
      case OpKind::Attention:
        detail::accumulate(g[in[0]], kernels::attention_backward(dy, input(0), n.attention, n.probs));
        break;
      case OpKind::Reshape:
        detail::accumulate(g[in[0]], dy.reshaped(input(0).shape()));
        break;
      case OpKind::ConcatRows: {
        const auto& a = input(0);
        const auto& b = input(1);
        if (need(in[0])) {
          detail::accumulate(g[in[0]], BasicTensor<T>(a.shape(), std::vector<T>(dy.data(), dy.data() + a.size())));
        }
        if (need(in[1])) {
          detail::accumulate(g[in[1]], BasicTensor<T>(b.shape(), std::vector<T>(dy.data() + a.size(), dy.data() + dy.size())));
        }
        break;
      }
      case OpKind::GatherRows: {
        const auto& x = input(0);
        const std::size_t w = x.cols();
        BasicTensor<T> dx(x.shape());
        for (std::size_t i = 0; i < n.indices.size(); ++i) {
          T* dst = dx.data() + n.indices[i] * w;
          const T* src = dy.data() + i * w;
          for (std::size_t j = 0; j < w; ++j) dst[j] = static_cast<T>(dst[j] + src[j]);
        }
        detail::accumulate(g[in[0]], std::move(dx));
        break;
      }
      case OpKind::L2NormalizeRows:
        detail::accumulate(g[in[0]], kernels::l2_normalize_rows_backward(dy, input(0), n.norms));
        break;
      case OpKind::HalfSquaredNorm: {
        BasicTensor<T> dx = input(0);
        for (auto& v : dx.values()) v = static_cast<T>(v * dy[0]);
        detail::accumulate(g[in[0]], std::move(dx));
        break;
      }
      case OpKind::External:
        fail(ErrorCode::UnsupportedOperator, "no derivative registered for operator '" + n.name + "'");
      case OpKind::Leaf:
        break;
    }
  }
  return Gradients<T>(std::move(g), tape);
}

template <class T>
Gradients<T> differentiate(const Tape<T>& tape, Var output, const BasicTensor<T>& seed) {
  return differentiate(tape, std::vector<std::pair<Var, BasicTensor<T>>>{{output, seed}});
}

/// Gradient of a one-element output.
template <class T>
Gradients<T> differentiate(const Tape<T>& tape, Var scalar_output) {
  const auto& v = tape.value(scalar_output);
  if (v.size() != 1) fail(ErrorCode::ShapeMismatch, "scalar differentiate needs a one-element output");
  return differentiate(tape, scalar_output, BasicTensor<T>(v.shape(), T{1}));
}

}  // namespace hsvlm
