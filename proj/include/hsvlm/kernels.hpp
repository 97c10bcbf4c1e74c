#pragma once

// Forward and backward kernels for the closed operator set used by the
// vision encoder. Storage is T; every reduction accumulates in accum_t<T>
// with a fixed loop order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hsvlm/error.hpp"
#include "hsvlm/parallel.hpp"
#include "hsvlm/tensor.hpp"

namespace hsvlm {

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kLayerNormEpsilon = 1e-5;

template <class T>
std::vector<T> l2_normalize(std::span<const T> v) {
  using A = accum_t<T>;
  if (v.empty()) fail(ErrorCode::ShapeMismatch, "l2_normalize of an empty vector");
  A sq = 0;
  for (const T& x : v) sq += static_cast<A>(x) * static_cast<A>(x);
  const A norm = std::sqrt(sq);
  if (!(norm > static_cast<A>(kNormEpsilon))) {
    fail(ErrorCode::NearZeroNorm, "vector norm " + std::to_string(static_cast<double>(norm)) + " <= 1e-12");
  }
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(static_cast<A>(v[i]) / norm);
  return out;
}

template <class T>
struct SoftmaxCrossEntropy {
  accum_t<T> loss{};
  std::vector<accum_t<T>> grad;
};

/// loss = logsumexp(logits) - logits[target], max-shifted;
/// grad = softmax(logits) - onehot(target).
template <class T>
SoftmaxCrossEntropy<T> stable_softmax_cross_entropy(std::span<const T> logits, std::size_t target) {
  using A = accum_t<T>;
  if (logits.empty()) fail(ErrorCode::ShapeMismatch, "softmax cross-entropy over zero logits");
  if (target >= logits.size()) {
    fail(ErrorCode::IndexOutOfRange,
         "target " + std::to_string(target) + " outside [0, " + std::to_string(logits.size()) + ")");
  }
  A max_logit = static_cast<A>(logits[0]);
  for (const T& l : logits) max_logit = std::max(max_logit, static_cast<A>(l));
  SoftmaxCrossEntropy<T> out;
  out.grad.resize(logits.size());
  A sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.grad[i] = std::exp(static_cast<A>(logits[i]) - max_logit);
    sum += out.grad[i];
  }
  for (auto& g : out.grad) g /= sum;
  out.grad[target] -= 1;
  // -(l_t - max) + log(sum); the first term is exactly 0 when the target is the max.
  out.loss = std::log(sum) - (static_cast<A>(logits[target]) - max_logit);
  return out;
}

namespace kernels {

template <class T>
void require_matrix(const BasicTensor<T>& t, const char* what) {
  if (t.rank() != 2) fail(ErrorCode::ShapeMismatch, std::string(what) + " must be rank 2, got " + shape_string(t.shape()));
}

/// C[m,n] = A[m,k] · B[k,n]
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  using A = accum_t<T>;
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    fail(ErrorCode::ShapeMismatch, "matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  BasicTensor<T> c({m, n});
  parallel_for(m, k * n, [&](std::size_t i) {
    std::vector<A> acc(n, A{0});
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const A av = arow[p];
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<A>(brow[j]);
    }
    T* crow = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<T>(acc[j]);
  });
  return c;
}

/// dA = dC · Bᵀ
template <class T>
BasicTensor<T> matmul_grad_lhs(const BasicTensor<T>& dc, const BasicTensor<T>& b) {
  using A = accum_t<T>;
  const std::size_t m = dc.dim(0), n = dc.dim(1), k = b.dim(0);
  BasicTensor<T> da({m, k});
  parallel_for(m, k * n, [&](std::size_t i) {
    const T* drow = dc.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b.data() + p * n;
      A s = 0;
      for (std::size_t j = 0; j < n; ++j) s += static_cast<A>(drow[j]) * static_cast<A>(brow[j]);
      da.data()[i * k + p] = static_cast<T>(s);
    }
  });
  return da;
}

/// dB = Aᵀ · dC
template <class T>
BasicTensor<T> matmul_grad_rhs(const BasicTensor<T>& a, const BasicTensor<T>& dc) {
  using A = accum_t<T>;
  const std::size_t m = a.dim(0), k = a.dim(1), n = dc.dim(1);
  BasicTensor<T> db({k, n});
  parallel_for(k, m * n, [&](std::size_t p) {
    std::vector<A> acc(n, A{0});
    for (std::size_t i = 0; i < m; ++i) {
      const A av = a.data()[i * k + p];
      const T* drow = dc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<A>(drow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) db.data()[p * n + j] = static_cast<T>(acc[j]);
  });
  return db;
}

/// Column sums of a matrix (bias gradients).
template <class T>
BasicTensor<T> column_sums(const BasicTensor<T>& x) {
  using A = accum_t<T>;
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<A> acc(n, A{0});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) acc[j] += static_cast<A>(x.data()[i * n + j]);
  BasicTensor<T> out({n});
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<T>(acc[j]);
  return out;
}

template <class T>
struct LayerNormSaved {
  BasicTensor<T> normalized;     // x̂ per row
  std::vector<accum_t<T>> inv_std;
};

template <class T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                         LayerNormSaved<T>* saved) {
  using A = accum_t<T>;
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.size() != n || beta.size() != n) {
    fail(ErrorCode::ShapeMismatch, "layernorm affine size mismatch for width " + std::to_string(n));
  }
  BasicTensor<T> y(x.shape());
  BasicTensor<T> xhat(x.shape());
  std::vector<A> inv_std(m);
  parallel_for(m, n, [&](std::size_t i) {
    const T* row = x.data() + i * n;
    A mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<A>(n);
    A var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const A d = static_cast<A>(row[j]) - mean;
      var += d * d;
    }
    var /= static_cast<A>(n);
    const A is = A{1} / std::sqrt(var + static_cast<A>(kLayerNormEpsilon));
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const A h = (static_cast<A>(row[j]) - mean) * is;
      xhat.data()[i * n + j] = static_cast<T>(h);
      y.data()[i * n + j] = static_cast<T>(h * static_cast<A>(gamma[j]) + static_cast<A>(beta[j]));
    }
  });
  if (saved) {
    saved->normalized = std::move(xhat);
    saved->inv_std = std::move(inv_std);
  }
  return y;
}

template <class T>
struct LayerNormGrads {
  BasicTensor<T> dx, dgamma, dbeta;
};

template <class T>
LayerNormGrads<T> layernorm_backward(const BasicTensor<T>& dy, const BasicTensor<T>& gamma,
                                     const LayerNormSaved<T>& saved) {
  using A = accum_t<T>;
  const std::size_t m = dy.rows(), n = dy.cols();
  LayerNormGrads<T> g{BasicTensor<T>(dy.shape()), BasicTensor<T>({n}), BasicTensor<T>({n})};
  std::vector<A> dgamma(n, A{0}), dbeta(n, A{0});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const A d = dy.data()[i * n + j];
      dgamma[j] += d * static_cast<A>(saved.normalized.data()[i * n + j]);
      dbeta[j] += d;
    }
  }
  parallel_for(m, n, [&](std::size_t i) {
    A mean_dh = 0, mean_dh_h = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const A dh = static_cast<A>(dy.data()[i * n + j]) * static_cast<A>(gamma[j]);
      mean_dh += dh;
      mean_dh_h += dh * static_cast<A>(saved.normalized.data()[i * n + j]);
    }
    mean_dh /= static_cast<A>(n);
    mean_dh_h /= static_cast<A>(n);
    for (std::size_t j = 0; j < n; ++j) {
      const A dh = static_cast<A>(dy.data()[i * n + j]) * static_cast<A>(gamma[j]);
      const A h = saved.normalized.data()[i * n + j];
      g.dx.data()[i * n + j] = static_cast<T>(saved.inv_std[i] * (dh - mean_dh - h * mean_dh_h));
    }
  });
  for (std::size_t j = 0; j < n; ++j) {
    g.dgamma[j] = static_cast<T>(dgamma[j]);
    g.dbeta[j] = static_cast<T>(dbeta[j]);
  }
  return g;
}

namespace detail {
template <class A>
constexpr A gelu_c() {
  return static_cast<A>(0.79788456080286535587989211986876373695L);  // sqrt(2/pi)
}
}  // namespace detail

/// GELU, tanh approximation.
template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  using A = accum_t<T>;
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const A v = x[i];
    const A t = std::tanh(detail::gelu_c<A>() * (v + A{0.044715} * v * v * v));
    y[i] = static_cast<T>(A{0.5} * v * (A{1} + t));
  }
  return y;
}

template <class T>
BasicTensor<T> gelu_backward(const BasicTensor<T>& dy, const BasicTensor<T>& x) {
  using A = accum_t<T>;
  BasicTensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const A v = x[i];
    const A t = std::tanh(detail::gelu_c<A>() * (v + A{0.044715} * v * v * v));
    const A dinner = detail::gelu_c<A>() * (A{1} + A{3} * A{0.044715} * v * v);
    const A d = A{0.5} * (A{1} + t) + A{0.5} * v * (A{1} - t * t) * dinner;
    dx[i] = static_cast<T>(static_cast<A>(dy[i]) * d);
  }
  return dx;
}

/// Row-wise max-shifted softmax.
template <class T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  using A = accum_t<T>;
  const std::size_t m = x.rows(), n = x.cols();
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data() + i * n;
    A mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<A>(row[j]));
    A sum = 0;
    std::vector<A> e(n);
    for (std::size_t j = 0; j < n; ++j) {
      e[j] = std::exp(static_cast<A>(row[j]) - mx);
      sum += e[j];
    }
    for (std::size_t j = 0; j < n; ++j) y.data()[i * n + j] = static_cast<T>(e[j] / sum);
  }
  return y;
}

template <class T>
BasicTensor<T> softmax_rows_backward(const BasicTensor<T>& dy, const BasicTensor<T>& y) {
  using A = accum_t<T>;
  const std::size_t m = y.rows(), n = y.cols();
  BasicTensor<T> dx(y.shape());
  for (std::size_t i = 0; i < m; ++i) {
    A dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += static_cast<A>(y.data()[i * n + j]) * static_cast<A>(dy.data()[i * n + j]);
    for (std::size_t j = 0; j < n; ++j) {
      dx.data()[i * n + j] =
          static_cast<T>(static_cast<A>(y.data()[i * n + j]) * (static_cast<A>(dy.data()[i * n + j]) - dot));
    }
  }
  return dx;
}

/// Geometry of a packed multi-head attention input: rows = batch·seq,
/// columns = [Q | K | V], each of width heads·head_dim.
struct AttentionShape {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t heads = 0;
};

/// Scaled dot-product attention over packed QKV. `probs` receives the
/// attention weights laid out [batch, heads, seq, seq].
template <class T>
BasicTensor<T> attention(const BasicTensor<T>& qkv, AttentionShape s, std::vector<T>* probs) {
  using A = accum_t<T>;
  if (qkv.rank() != 2 || qkv.dim(0) != s.batch * s.seq || qkv.dim(1) % (3 * s.heads) != 0) {
    fail(ErrorCode::ShapeMismatch, "attention input " + shape_string(qkv.shape()));
  }
  const std::size_t width = qkv.dim(1) / 3;
  const std::size_t hd = width / s.heads;
  const A scale = A{1} / std::sqrt(static_cast<A>(hd));
  const std::size_t L = s.seq;
  BasicTensor<T> out({s.batch * L, width});
  std::vector<T> local(s.batch * s.heads * L * L);
  parallel_for(s.batch, s.heads * L * L * hd, [&](std::size_t b) {
    std::vector<A> scores(L);
    for (std::size_t h = 0; h < s.heads; ++h) {
      for (std::size_t i = 0; i < L; ++i) {
        const T* q = qkv.data() + (b * L + i) * 3 * width + h * hd;
        A mx = -std::numeric_limits<A>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          const T* k = qkv.data() + (b * L + j) * 3 * width + width + h * hd;
          A dot = 0;
          for (std::size_t c = 0; c < hd; ++c) dot += static_cast<A>(q[c]) * static_cast<A>(k[c]);
          scores[j] = dot * scale;
          mx = std::max(mx, scores[j]);
        }
        A sum = 0;
        for (std::size_t j = 0; j < L; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          sum += scores[j];
        }
        T* prow = local.data() + ((b * s.heads + h) * L + i) * L;
        for (std::size_t j = 0; j < L; ++j) prow[j] = static_cast<T>(scores[j] / sum);
        T* o = out.data() + (b * L + i) * width + h * hd;
        for (std::size_t c = 0; c < hd; ++c) {
          A acc = 0;
          for (std::size_t j = 0; j < L; ++j) {
            const T* v = qkv.data() + (b * L + j) * 3 * width + 2 * width + h * hd;
            acc += static_cast<A>(prow[j]) * static_cast<A>(v[c]);
          }
          o[c] = static_cast<T>(acc);
        }
      }
    }
  });
  if (probs) *probs = std::move(local);
  return out;
}

template <class T>
BasicTensor<T> attention_backward(const BasicTensor<T>& dout, const BasicTensor<T>& qkv, AttentionShape s,
                                  const std::vector<T>& probs) {
  using A = accum_t<T>;
  const std::size_t width = qkv.dim(1) / 3;
  const std::size_t hd = width / s.heads;
  const A scale = A{1} / std::sqrt(static_cast<A>(hd));
  const std::size_t L = s.seq;
  BasicTensor<T> dqkv(qkv.shape());
  parallel_for(s.batch, s.heads * L * L * hd, [&](std::size_t b) {
    std::vector<A> dprob(L), dscore(L);
    std::vector<A> dk(L * hd), dv(L * hd);
    auto row_ptr = [&](std::size_t i) { return qkv.data() + (b * L + i) * 3 * width; };
    for (std::size_t h = 0; h < s.heads; ++h) {
      std::fill(dk.begin(), dk.end(), A{0});
      std::fill(dv.begin(), dv.end(), A{0});
      for (std::size_t i = 0; i < L; ++i) {
        const T* prow = probs.data() + ((b * s.heads + h) * L + i) * L;
        const T* dO = dout.data() + (b * L + i) * width + h * hd;
        A weighted = 0;
        for (std::size_t j = 0; j < L; ++j) {
          const T* v = row_ptr(j) + 2 * width + h * hd;
          A d = 0;
          for (std::size_t c = 0; c < hd; ++c) {
            d += static_cast<A>(dO[c]) * static_cast<A>(v[c]);
            dv[j * hd + c] += static_cast<A>(prow[j]) * static_cast<A>(dO[c]);
          }
          dprob[j] = d;
          weighted += static_cast<A>(prow[j]) * d;
        }
        for (std::size_t j = 0; j < L; ++j) dscore[j] = static_cast<A>(prow[j]) * (dprob[j] - weighted) * scale;
        const T* q = row_ptr(i) + h * hd;
        T* dq = dqkv.data() + (b * L + i) * 3 * width + h * hd;
        for (std::size_t c = 0; c < hd; ++c) {
          A acc = 0;
          for (std::size_t j = 0; j < L; ++j) acc += dscore[j] * static_cast<A>(row_ptr(j)[width + h * hd + c]);
          dq[c] = static_cast<T>(acc);
        }
        for (std::size_t j = 0; j < L; ++j)
          for (std::size_t c = 0; c < hd; ++c) dk[j * hd + c] += dscore[j] * static_cast<A>(q[c]);
      }
      for (std::size_t j = 0; j < L; ++j) {
        T* base = dqkv.data() + (b * L + j) * 3 * width;
        for (std::size_t c = 0; c < hd; ++c) {
          base[width + h * hd + c] = static_cast<T>(dk[j * hd + c]);
          base[2 * width + h * hd + c] = static_cast<T>(dv[j * hd + c]);
        }
      }
    }
  });
  return dqkv;
}

/// Row-wise ℓ2 normalization; `norms` receives each row's norm.
template <class T>
BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& x, std::vector<accum_t<T>>* norms) {
  using A = accum_t<T>;
  const std::size_t m = x.rows(), n = x.cols();
  BasicTensor<T> y(x.shape());
  std::vector<A> local(m);
  for (std::size_t i = 0; i < m; ++i) {
    A sq = 0;
    for (std::size_t j = 0; j < n; ++j) sq += static_cast<A>(x.data()[i * n + j]) * static_cast<A>(x.data()[i * n + j]);
    const A norm = std::sqrt(sq);
    if (!(norm > static_cast<A>(kNormEpsilon))) {
      fail(ErrorCode::NearZeroNorm, "row " + std::to_string(i) + " has norm <= 1e-12");
    }
    local[i] = norm;
    for (std::size_t j = 0; j < n; ++j) y.data()[i * n + j] = static_cast<T>(static_cast<A>(x.data()[i * n + j]) / norm);
  }
  if (norms) *norms = std::move(local);
  return y;
}

template <class T>
BasicTensor<T> l2_normalize_rows_backward(const BasicTensor<T>& dy, const BasicTensor<T>& x,
                                          const std::vector<accum_t<T>>& norms) {
  using A = accum_t<T>;
  const std::size_t m = x.rows(), n = x.cols();
  BasicTensor<T> dx(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const A norm = norms[i];
    A dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += static_cast<A>(x.data()[i * n + j]) * static_cast<A>(dy.data()[i * n + j]);
    dot /= norm;  // ⟨ŷ, dy⟩
    for (std::size_t j = 0; j < n; ++j) {
      const A yhat = static_cast<A>(x.data()[i * n + j]) / norm;
      dx.data()[i * n + j] = static_cast<T>((static_cast<A>(dy.data()[i * n + j]) - yhat * dot) / norm);
    }
  }
  return dx;
}

}  // namespace kernels
}  // namespace hsvlm
