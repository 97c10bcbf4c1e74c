#pragma once

// Patch encoder: non-overlapping 3×3 spatial tokens → linear embedding →
// learned positions + class token → pre-norm transformer blocks → final
// LayerNorm on the class token → bias-free projection → unit sphere.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hsvlm/autodiff.hpp"
#include "hsvlm/binary_io.hpp"
#include "hsvlm/error.hpp"
#include "hsvlm/rng.hpp"
#include "hsvlm/tensor.hpp"

namespace hsvlm {

struct VisionConfig {
  std::size_t window = 15;
  std::size_t token_edge = 3;
  std::size_t input_depth = 25;
  std::size_t embed_dim = 64;
  std::size_t layers = 6;
  std::size_t heads = 16;
  std::size_t mlp_dim = 64;
  std::size_t projection_dim = 1024;
  double mask_ratio = 0.0;
  double init_std = 0.02;

  [[nodiscard]] std::size_t tokens_per_side() const { return window / token_edge; }
  [[nodiscard]] std::size_t tokens() const { return tokens_per_side() * tokens_per_side(); }
  [[nodiscard]] std::size_t token_width() const { return token_edge * token_edge * input_depth; }

  void validate() const {
    auto bad = [](const std::string& m) { fail(ErrorCode::InvalidConfig, m); };
    if (token_edge != 3) bad("token edge must be 3");
    if (window == 0 || window % 2 == 0 || window % token_edge != 0) bad("window must be odd and divisible by 3");
    if (input_depth == 0 || embed_dim == 0 || layers == 0 || heads == 0 || mlp_dim == 0 || projection_dim == 0) {
      bad("all model dimensions must be >= 1");
    }
    if (embed_dim % heads != 0) bad("embed dim must be divisible by the head count");
    if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) bad("mask ratio must lie in [0, 1)");
    if (!(init_std > 0.0)) bad("init std must be positive");
  }

  /// Architecture fields only; training-time knobs (mask ratio, init std)
  /// do not change parameter layout.
  [[nodiscard]] std::string canonical() const {
    std::ostringstream os;
    os << "window=" << window << ";edge=" << token_edge << ";depth=" << input_depth << ";embed=" << embed_dim
       << ";layers=" << layers << ";heads=" << heads << ";mlp=" << mlp_dim << ";proj=" << projection_dim;
    return os.str();
  }

  [[nodiscard]] std::uint32_t hash() const {
    const std::uint64_t h = io::fnv1a64(canonical());
    return static_cast<std::uint32_t>(h ^ (h >> 32u));
  }

  friend bool operator==(const VisionConfig&, const VisionConfig&) = default;
};

/// ln(1/0.07)
inline constexpr double kInitialLogitScale = 2.6592600369327779;
/// τ ≤ 100
inline const double kMaxLogitScale = std::log(100.0);

template <class T>
struct BlockParams {
  BasicTensor<T> ln1_gamma, ln1_beta;
  BasicTensor<T> qkv_weight, qkv_bias;
  BasicTensor<T> out_weight, out_bias;
  BasicTensor<T> ln2_gamma, ln2_beta;
  BasicTensor<T> mlp_in_weight, mlp_in_bias;
  BasicTensor<T> mlp_out_weight, mlp_out_bias;
};

template <class T>
struct VisionModel;

/// Zero weights, unit LayerNorm gains, logit scale ln(1/0.07).
template <class U>
VisionModel<U> allocate_model(const VisionConfig& c);

template <class T>
struct VisionModel {
  VisionConfig config;
  BasicTensor<T> patch_weight, patch_bias;
  BasicTensor<T> class_token;
  BasicTensor<T> positional;
  std::vector<BlockParams<T>> blocks;
  BasicTensor<T> final_gamma, final_beta;
  BasicTensor<T> projection;
  BasicTensor<T> logit_scale;  // one element; τ = exp(logit_scale)

  /// Fixed parameter order used by the optimizer and checkpoints.
  [[nodiscard]] std::vector<std::pair<std::string, BasicTensor<T>*>> named_parameters() {
    std::vector<std::pair<std::string, BasicTensor<T>*>> out;
    out.emplace_back("patch_embed.weight", &patch_weight);
    out.emplace_back("patch_embed.bias", &patch_bias);
    out.emplace_back("class_token", &class_token);
    out.emplace_back("positional", &positional);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      auto& b = blocks[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      out.emplace_back(p + "ln1.gamma", &b.ln1_gamma);
      out.emplace_back(p + "ln1.beta", &b.ln1_beta);
      out.emplace_back(p + "qkv.weight", &b.qkv_weight);
      out.emplace_back(p + "qkv.bias", &b.qkv_bias);
      out.emplace_back(p + "attn_out.weight", &b.out_weight);
      out.emplace_back(p + "attn_out.bias", &b.out_bias);
      out.emplace_back(p + "ln2.gamma", &b.ln2_gamma);
      out.emplace_back(p + "ln2.beta", &b.ln2_beta);
      out.emplace_back(p + "mlp_in.weight", &b.mlp_in_weight);
      out.emplace_back(p + "mlp_in.bias", &b.mlp_in_bias);
      out.emplace_back(p + "mlp_out.weight", &b.mlp_out_weight);
      out.emplace_back(p + "mlp_out.bias", &b.mlp_out_bias);
    }
    out.emplace_back("final_norm.gamma", &final_gamma);
    out.emplace_back("final_norm.beta", &final_beta);
    out.emplace_back("projection", &projection);
    out.emplace_back("logit_scale", &logit_scale);
    return out;
  }

  [[nodiscard]] std::vector<std::pair<std::string, const BasicTensor<T>*>> named_parameters() const {
    auto mut = const_cast<VisionModel*>(this)->named_parameters();
    std::vector<std::pair<std::string, const BasicTensor<T>*>> out;
    for (auto& [n, p] : mut) out.emplace_back(n, p);
    return out;
  }

  [[nodiscard]] double tau() const { return std::exp(static_cast<double>(logit_scale[0])); }

  template <class U>
  [[nodiscard]] VisionModel<U> cast() const {
    VisionModel<U> out = hsvlm::allocate_model<U>(config);
    auto dst = out.named_parameters();
    auto src = named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
    return out;
  }
};

template <class U>
VisionModel<U> allocate_model(const VisionConfig& c) {
  c.validate();
  const std::size_t E = c.embed_dim, M = c.mlp_dim;
  VisionModel<U> m;
  m.config = c;
  m.patch_weight = BasicTensor<U>({c.token_width(), E});
  m.patch_bias = BasicTensor<U>({E});
  m.class_token = BasicTensor<U>({1, E});
  m.positional = BasicTensor<U>({1 + c.tokens(), E});
  for (std::size_t l = 0; l < c.layers; ++l) {
    BlockParams<U> b;
    b.ln1_gamma = BasicTensor<U>({E}, U{1});
    b.ln1_beta = BasicTensor<U>({E});
    b.qkv_weight = BasicTensor<U>({E, 3 * E});
    b.qkv_bias = BasicTensor<U>({3 * E});
    b.out_weight = BasicTensor<U>({E, E});
    b.out_bias = BasicTensor<U>({E});
    b.ln2_gamma = BasicTensor<U>({E}, U{1});
    b.ln2_beta = BasicTensor<U>({E});
    b.mlp_in_weight = BasicTensor<U>({E, M});
    b.mlp_in_bias = BasicTensor<U>({M});
    b.mlp_out_weight = BasicTensor<U>({M, E});
    b.mlp_out_bias = BasicTensor<U>({E});
    m.blocks.push_back(std::move(b));
  }
  m.final_gamma = BasicTensor<U>({E}, U{1});
  m.final_beta = BasicTensor<U>({E});
  m.projection = BasicTensor<U>({E, c.projection_dim});
  m.logit_scale = BasicTensor<U>({1}, static_cast<U>(kInitialLogitScale));
  return m;
}

/// Truncated-normal weights (±2σ), zero biases, unit LayerNorm gains,
/// logit scale ln(1/0.07). Deterministic per (config, seed).
template <class T = float>
VisionModel<T> init_model(const VisionConfig& config, std::uint64_t seed) {
  auto model = allocate_model<T>(config);
  Rng rng(seed, streams::kInit);
  auto fill = [&](BasicTensor<T>& t) {
    for (auto& v : t.values()) v = static_cast<T>(rng.truncated_normal(config.init_std));
  };
  fill(model.patch_weight);
  fill(model.class_token);
  fill(model.positional);
  for (auto& b : model.blocks) {
    fill(b.qkv_weight);
    fill(b.out_weight);
    fill(b.mlp_in_weight);
    fill(b.mlp_out_weight);
  }
  fill(model.projection);
  return model;
}

struct ParamCounts {
  std::map<std::string, std::size_t> sections;
  std::size_t total = 0;
};

/// Exact per-section trainable parameter counts.
inline ParamCounts count_params(const VisionConfig& c) {
  c.validate();
  const std::size_t E = c.embed_dim, M = c.mlp_dim;
  const std::size_t per_block = 2 * E + (E * 3 * E + 3 * E) + (E * E + E) + 2 * E + (E * M + M) + (M * E + E);
  ParamCounts pc;
  pc.sections["patch_embed"] = c.token_width() * E + E;
  pc.sections["class_token"] = E;
  pc.sections["positional"] = (1 + c.tokens()) * E;
  pc.sections["blocks"] = c.layers * per_block;
  pc.sections["final_norm"] = 2 * E;
  pc.sections["projection"] = E * c.projection_dim;
  pc.sections["logit_scale"] = 1;
  for (const auto& [_, n] : pc.sections) pc.total += n;
  return pc;
}

template <class T>
ParamCounts count_params(const VisionModel<T>& model) {
  return count_params(model.config);
}

/// Rearranges N×S×S×D patches into (N·T)×(9·D) token rows. Token (a, b)
/// lands at index a·(S/3)+b; within a token the layout is (dh, dw, d).
template <class T>
BasicTensor<T> tokenize(const BasicTensor<T>& patches, const VisionConfig& c) {
  if (patches.rank() != 4 || patches.dim(1) != c.window || patches.dim(2) != c.window ||
      patches.dim(3) != c.input_depth) {
    fail(ErrorCode::ShapeMismatch, "patches " + shape_string(patches.shape()) + " do not match window " +
                                       std::to_string(c.window) + " and depth " + std::to_string(c.input_depth));
  }
  const std::size_t N = patches.dim(0), S = c.window, D = c.input_depth, e = c.token_edge;
  const std::size_t side = c.tokens_per_side(), T_ = c.tokens(), width = c.token_width();
  BasicTensor<T> out({N * T_, width});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t a = 0; a < side; ++a) {
      for (std::size_t b = 0; b < side; ++b) {
        T* dst = out.data() + (n * T_ + a * side + b) * width;
        for (std::size_t dh = 0; dh < e; ++dh) {
          for (std::size_t dw = 0; dw < e; ++dw) {
            const T* src = patches.data() + ((n * S + a * e + dh) * S + b * e + dw) * D;
            std::copy(src, src + D, dst + (dh * e + dw) * D);
          }
        }
      }
    }
  }
  return out;
}

template <class T>
struct ModelVars {
  Var patch_weight, patch_bias, class_token, positional;
  struct Block {
    Var ln1_gamma, ln1_beta, qkv_weight, qkv_bias, out_weight, out_bias;
    Var ln2_gamma, ln2_beta, mlp_in_weight, mlp_in_bias, mlp_out_weight, mlp_out_bias;
  };
  std::vector<Block> blocks;
  Var final_gamma, final_beta, projection;
  std::vector<Var> ordered;  // same order as VisionModel::named_parameters
};

/// Records every parameter on the tape as a differentiable leaf.
template <class T>
ModelVars<T> bind_parameters(Tape<T>& tape, const VisionModel<T>& model) {
  ModelVars<T> v;
  auto p = [&](const BasicTensor<T>& t) {
    Var x = tape.parameter(t);
    v.ordered.push_back(x);
    return x;
  };
  v.patch_weight = p(model.patch_weight);
  v.patch_bias = p(model.patch_bias);
  v.class_token = p(model.class_token);
  v.positional = p(model.positional);
  for (const auto& b : model.blocks) {
    typename ModelVars<T>::Block bv;
    bv.ln1_gamma = p(b.ln1_gamma);
    bv.ln1_beta = p(b.ln1_beta);
    bv.qkv_weight = p(b.qkv_weight);
    bv.qkv_bias = p(b.qkv_bias);
    bv.out_weight = p(b.out_weight);
    bv.out_bias = p(b.out_bias);
    bv.ln2_gamma = p(b.ln2_gamma);
    bv.ln2_beta = p(b.ln2_beta);
    bv.mlp_in_weight = p(b.mlp_in_weight);
    bv.mlp_in_bias = p(b.mlp_in_bias);
    bv.mlp_out_weight = p(b.mlp_out_weight);
    bv.mlp_out_bias = p(b.mlp_out_bias);
    v.blocks.push_back(bv);
  }
  v.final_gamma = p(model.final_gamma);
  v.final_beta = p(model.final_beta);
  v.projection = p(model.projection);
  // logit_scale is consumed by the contrastive loss, not the forward graph.
  v.ordered.push_back(tape.parameter(model.logit_scale));
  return v;
}

/// Token indices kept for each sample. Without masking every token is kept;
/// in training mode with ratio m, ⌊m·T⌋ tokens per sample are dropped
/// uniformly at random and the survivors keep their original order.
inline std::vector<std::vector<std::size_t>> select_tokens(std::size_t batch, const VisionConfig& c, bool training,
                                                           Rng* rng) {
  const std::size_t T_ = c.tokens();
  const auto drop = training ? static_cast<std::size_t>(std::floor(c.mask_ratio * static_cast<double>(T_))) : 0;
  if (drop > 0 && rng == nullptr) fail(ErrorCode::InvalidConfig, "token masking needs an rng");
  std::vector<std::vector<std::size_t>> kept(batch);
  for (auto& k : kept) {
    std::vector<std::size_t> idx(T_);
    std::iota(idx.begin(), idx.end(), 0);
    if (drop > 0) {
      for (std::size_t i = 0; i < drop; ++i) {
        const std::size_t j = i + rng->below(static_cast<std::uint32_t>(T_ - i));
        std::swap(idx[i], idx[j]);
      }
      idx.erase(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(drop));
      std::sort(idx.begin(), idx.end());
    }
    k = std::move(idx);
  }
  return kept;
}

/// Records the forward pass and returns the N×d unit-norm embedding node.
template <class T>
Var encode(Tape<T>& tape, const ModelVars<T>& v, const VisionConfig& c, const BasicTensor<T>& patches, bool training,
           Rng* rng) {
  const std::size_t N = patches.dim(0);
  const std::size_t T_ = c.tokens();
  Var tokens = tape.constant(tokenize(patches, c));
  Var x = tape.add_bias(tape.matmul(tokens, v.patch_weight), v.patch_bias);

  std::vector<std::size_t> pos_index(N * T_);
  for (std::size_t i = 0; i < pos_index.size(); ++i) pos_index[i] = 1 + i % T_;
  x = tape.add(x, tape.gather_rows(v.positional, pos_index));
  Var cls = tape.add(v.class_token, tape.gather_rows(v.positional, {0}));
  Var stacked = tape.concat_rows(x, cls);  // class token is row N·T

  const auto kept = select_tokens(N, c, training, rng);
  const std::size_t L = 1 + kept.front().size();
  std::vector<std::size_t> order;
  order.reserve(N * L);
  for (std::size_t n = 0; n < N; ++n) {
    order.push_back(N * T_);
    for (std::size_t t : kept[n]) order.push_back(n * T_ + t);
  }
  Var seq = tape.gather_rows(stacked, std::move(order));

  const kernels::AttentionShape shape{N, L, c.heads};
  for (const auto& b : v.blocks) {
    Var h = tape.layernorm(seq, b.ln1_gamma, b.ln1_beta);
    Var qkv = tape.add_bias(tape.matmul(h, b.qkv_weight), b.qkv_bias);
    Var att = tape.attention(qkv, shape);
    seq = tape.add(seq, tape.add_bias(tape.matmul(att, b.out_weight), b.out_bias));
    h = tape.layernorm(seq, b.ln2_gamma, b.ln2_beta);
    Var mlp = tape.gelu(tape.add_bias(tape.matmul(h, b.mlp_in_weight), b.mlp_in_bias));
    seq = tape.add(seq, tape.add_bias(tape.matmul(mlp, b.mlp_out_weight), b.mlp_out_bias));
  }

  std::vector<std::size_t> cls_rows(N);
  for (std::size_t n = 0; n < N; ++n) cls_rows[n] = n * L;
  Var pooled = tape.layernorm(tape.gather_rows(seq, std::move(cls_rows)), v.final_gamma, v.final_beta);
  return tape.l2_normalize_rows(tape.matmul(pooled, v.projection));
}

/// N×S×S×D patches → N×d embeddings on the unit sphere.
template <class T>
BasicTensor<T> encode_batch(const VisionModel<T>& model, const BasicTensor<T>& patches, bool training = false,
                            Rng* rng = nullptr) {
  Tape<T> tape;
  auto vars = bind_parameters(tape, model);
  return tape.value(encode(tape, vars, model.config, patches, training, rng));
}

}  // namespace hsvlm
