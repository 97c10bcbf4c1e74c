#pragma once

// Central-difference verification of the reverse pass, intended to run at
// long double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hsvlm/autodiff.hpp"
#include "hsvlm/contrast.hpp"
#include "hsvlm/encoder.hpp"
#include "hsvlm/rng.hpp"

namespace hsvlm {

/// |a−b| / max(1e-8, |a|+|b|)
inline double relative_error(long double a, long double b) {
  return static_cast<double>(std::fabs(a - b) / std::max<long double>(1e-8L, std::fabs(a) + std::fabs(b)));
}

struct GradcheckResult {
  std::string name;
  double max_relative_error = 0;
  std::size_t checked = 0;
};

template <class T>
using GraphBuilder = std::function<Var(Tape<T>&, const std::vector<Var>&)>;

template <class T>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal() * scale);
  return t;
}

/// Compares ∂⟨R, f(inputs)⟩/∂inputs from the tape against central
/// differences for every element of every input.
template <class T>
GradcheckResult check_graph(const std::string& name, const GraphBuilder<T>& build, std::vector<BasicTensor<T>> inputs,
                            Rng& rng, T step) {
  auto evaluate = [&](const std::vector<BasicTensor<T>>& xs, Tape<T>& tape,
                      std::vector<Var>& vars) {
    vars.clear();
    for (const auto& x : xs) vars.push_back(tape.parameter(x));
    return build(tape, vars);
  };
  Tape<T> tape;
  std::vector<Var> vars;
  Var out = evaluate(inputs, tape, vars);
  const BasicTensor<T> weights = random_tensor<T>(tape.value(out).shape(), rng);
  const auto grads = differentiate(tape, out, weights);

  auto objective = [&](const std::vector<BasicTensor<T>>& xs) {
    Tape<T> t;
    std::vector<Var> v;
    Var o = evaluate(xs, t, v);
    long double s = 0;
    const auto& val = t.value(o);
    for (std::size_t i = 0; i < val.size(); ++i) s += static_cast<long double>(val[i]) * weights[i];
    return s;
  };

  GradcheckResult result{name, 0.0, 0};
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = grads.of(vars[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const T saved = inputs[k][i];
      inputs[k][i] = saved + step;
      const long double up = objective(inputs);
      inputs[k][i] = saved - step;
      const long double down = objective(inputs);
      inputs[k][i] = saved;
      const long double numeric = (up - down) / (2.0L * static_cast<long double>(step));
      result.max_relative_error = std::max(result.max_relative_error, relative_error(analytic[i], numeric));
      ++result.checked;
    }
  }
  return result;
}

/// One check per operator of the closed set on random inputs (dims ≤ 16).
template <class T = long double>
std::vector<GradcheckResult> check_kernels(std::uint64_t seed, T step = static_cast<T>(1e-6)) {
  Rng rng(seed, 0);
  std::vector<GradcheckResult> out;
  auto run = [&](const std::string& name, const GraphBuilder<T>& build, std::vector<BasicTensor<T>> xs) {
    out.push_back(check_graph<T>(name, build, std::move(xs), rng, step));
  };
  run("matmul", [](Tape<T>& t, const std::vector<Var>& v) { return t.matmul(v[0], v[1]); },
      {random_tensor<T>({5, 7}, rng), random_tensor<T>({7, 4}, rng)});
  run("add_bias", [](Tape<T>& t, const std::vector<Var>& v) { return t.add_bias(v[0], v[1]); },
      {random_tensor<T>({6, 5}, rng), random_tensor<T>({5}, rng)});
  run("add", [](Tape<T>& t, const std::vector<Var>& v) { return t.add(v[0], v[1]); },
      {random_tensor<T>({4, 3}, rng), random_tensor<T>({4, 3}, rng)});
  run("layernorm", [](Tape<T>& t, const std::vector<Var>& v) { return t.layernorm(v[0], v[1], v[2]); },
      {random_tensor<T>({6, 8}, rng), random_tensor<T>({8}, rng), random_tensor<T>({8}, rng)});
  run("gelu", [](Tape<T>& t, const std::vector<Var>& v) { return t.gelu(v[0]); }, {random_tensor<T>({5, 6}, rng, 2.0)});
  run("softmax", [](Tape<T>& t, const std::vector<Var>& v) { return t.softmax(v[0]); }, {random_tensor<T>({4, 9}, rng)});
  run("attention",
      [](Tape<T>& t, const std::vector<Var>& v) { return t.attention(v[0], kernels::AttentionShape{2, 5, 2}); },
      {random_tensor<T>({10, 24}, rng)});
  run("reshape", [](Tape<T>& t, const std::vector<Var>& v) { return t.reshape(v[0], {3, 8}); },
      {random_tensor<T>({6, 4}, rng)});
  run("concat_rows", [](Tape<T>& t, const std::vector<Var>& v) { return t.concat_rows(v[0], v[1]); },
      {random_tensor<T>({3, 5}, rng), random_tensor<T>({2, 5}, rng)});
  run("gather_rows", [](Tape<T>& t, const std::vector<Var>& v) { return t.gather_rows(v[0], {2, 0, 2, 3, 1, 2}); },
      {random_tensor<T>({4, 6}, rng)});
  run("l2_normalize_rows", [](Tape<T>& t, const std::vector<Var>& v) { return t.l2_normalize_rows(v[0]); },
      {random_tensor<T>({5, 16}, rng)});
  run("half_squared_norm", [](Tape<T>& t, const std::vector<Var>& v) { return t.half_squared_norm(v[0]); },
      {random_tensor<T>({4, 4}, rng)});
  return out;
}

/// Contrastive loss against central differences in Z, P and the logit scale,
/// with both hard and semi-hard negatives. Each evaluation replays the same
/// sampler stream.
template <class T = long double>
GradcheckResult check_contrastive(std::uint64_t seed, T step = static_cast<T>(1e-5)) {
  Rng rng(seed, 13);
  const std::size_t N = 6, C = 9, d = 12;
  auto z = kernels::l2_normalize_rows(random_tensor<T>({N, d}, rng), nullptr);
  auto protos = kernels::l2_normalize_rows(random_tensor<T>({C, d}, rng), nullptr);
  std::vector<std::size_t> labels(N);
  for (auto& l : labels) l = rng.below(C);
  const NegativeSpec spec{3, 2};
  double scale = 1.3;

  auto loss_of = [&]() {
    Rng r(seed, 14);
    return batch_contrastive_loss(z, protos, labels, spec, scale, r);
  };
  const auto base = loss_of();
  GradcheckResult result{"contrastive", 0.0, 0};
  auto sweep = [&](BasicTensor<T>& x, const BasicTensor<T>& analytic) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T saved = x[i];
      x[i] = saved + step;
      const long double up = loss_of().loss;
      x[i] = saved - step;
      const long double down = loss_of().loss;
      x[i] = saved;
      const long double numeric = (up - down) / (2.0L * static_cast<long double>(step));
      result.max_relative_error = std::max(result.max_relative_error, relative_error(analytic[i], numeric));
      ++result.checked;
    }
  };
  sweep(z, base.grad_embeddings);
  sweep(protos, base.grad_prototypes);
  const double h = 1e-6;
  scale += h;
  const double up = loss_of().loss;
  scale -= 2 * h;
  const double down = loss_of().loss;
  scale += h;
  result.max_relative_error =
      std::max(result.max_relative_error, relative_error(base.grad_logit_scale, (up - down) / (2 * h)));
  ++result.checked;
  return result;
}

/// The tiny encoder used for end-to-end checks: S=3, 2 layers, width 8.
inline VisionConfig tiny_vision_config() {
  VisionConfig c;
  c.window = 3;
  c.input_depth = 3;
  c.embed_dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.mlp_dim = 8;
  c.projection_dim = 16;
  c.init_std = 0.5;
  return c;
}

/// Contrastive loss of the tiny encoder on a synthetic batch versus central
/// differences over every parameter (logit scale included). All wrong classes
/// are hard negatives so the logit rows are the same set at every perturbation.
template <class T = long double>
GradcheckResult check_tiny_encoder(std::uint64_t seed, T step = static_cast<T>(1e-3)) {
  const VisionConfig c = tiny_vision_config();
  auto model = init_model<T>(c, seed);
  Rng rng(seed, 11);
  const std::size_t N = 4, C = 5;
  const auto patches = random_tensor<T>({N, c.window, c.window, c.input_depth}, rng);
  BasicTensor<T> protos = random_tensor<T>({C, c.projection_dim}, rng);
  protos = kernels::l2_normalize_rows(protos, nullptr);
  const std::vector<std::size_t> labels{0, 3, 1, 4};
  const NegativeSpec spec{C - 1, 0};

  auto loss_of = [&](const VisionModel<T>& m) {
    Rng r(seed, 12);
    const auto z = encode_batch(m, patches, false);
    return batch_contrastive_loss(z, protos, labels, spec, static_cast<double>(m.logit_scale[0]), r).loss;
  };

  Tape<T> tape;
  auto vars = bind_parameters(tape, model);
  Var z = encode(tape, vars, c, patches, false, nullptr);
  Rng r(seed, 12);
  const auto loss = batch_contrastive_loss(tape.value(z), protos, labels, spec, static_cast<double>(model.logit_scale[0]), r);
  const auto grads = differentiate(tape, z, loss.grad_embeddings);

  GradcheckResult result{"tiny_encoder", 0.0, 0};
  auto named = model.named_parameters();
  for (std::size_t k = 0; k < named.size(); ++k) {
    auto& param = *named[k].second;
    const BasicTensor<T> analytic = k + 1 == named.size()
                                        ? BasicTensor<T>({1}, std::vector<T>{static_cast<T>(loss.grad_logit_scale)})
                                        : grads.of(vars.ordered[k]);
    for (std::size_t i = 0; i < param.size(); ++i) {
      const T saved = param[i];
      param[i] = saved + step;
      const long double up = loss_of(model);
      param[i] = saved - step;
      const long double down = loss_of(model);
      param[i] = saved;
      const long double numeric = (up - down) / (2.0L * static_cast<long double>(step));
      result.max_relative_error = std::max(result.max_relative_error, relative_error(analytic[i], numeric));
      ++result.checked;
    }
  }
  return result;
}

}  // namespace hsvlm
