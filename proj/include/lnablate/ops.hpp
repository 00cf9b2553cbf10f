#pragma once

// Differentiable tensor ops used by the model: matmul/linear kernels riding
// on Eigen maps, tanh-GELU, fused causal multi-head attention, embedding
// lookup, and the stabilized softmax cross-entropy loss.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lnablate/tensor.hpp"

namespace lnablate {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

namespace detail {

inline std::string shape_str(const std::vector<int64_t>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Rows when a tensor [..., inner] is viewed as a matrix over its last dim.
inline int64_t lead_rows(const std::vector<int64_t>& shape, int64_t inner, const char* op) {
  if (shape.empty() || shape.back() != inner) {
    throw ShapeError(std::string(op) + ": last dimension mismatch, got " + shape_str(shape));
  }
  int64_t rows = 1;
  for (size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
  return rows;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2) {
    throw ShapeError("matmul: operands must be 2-d");
  }
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  if (b.shape[0] != k) {
    throw ShapeError("matmul: inner dimensions disagree: " + detail::shape_str(a.shape) +
                     " x " + detail::shape_str(b.shape));
  }
  Tensor<T> out = detail::op_output<T>({m, n}, {a, b});
  CMatMap<T> A(a.ptr(), m, k);
  CMatMap<T> B(b.ptr(), k, n);
  MatMap<T> C(out.ptr(), m, n);
  C.noalias() = A * B;
  if (out.node) {
    auto ad = a.data, bd = b.data, og = out.grad;
    auto ag = a.grad, bg = b.grad;
    const bool aw = a.requires_grad, bw = b.requires_grad;
    out.node->backward = [=]() {
      CMatMap<T> G(og->data(), m, n);
      if (aw) {
        MatMap<T> dA(ag->data(), m, k);
        CMatMap<T> Bm(bd->data(), k, n);
        dA.noalias() += G * Bm.transpose();
      }
      if (bw) {
        MatMap<T> dB(bg->data(), k, n);
        CMatMap<T> Am(ad->data(), m, k);
        dB.noalias() += Am.transpose() * G;
      }
    };
  }
  return out;
}

// y = x @ W + b over the last dimension of x. W is [in, out_dim], b optional.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b = nullptr) {
  if (w.shape.size() != 2) throw ShapeError("linear: weight must be 2-d");
  const int64_t in = w.shape[0], out_dim = w.shape[1];
  const int64_t rows = detail::lead_rows(x.shape, in, "linear");
  if (b != nullptr && (b->shape.size() != 1 || b->shape[0] != out_dim)) {
    throw ShapeError("linear: bias shape mismatch");
  }
  std::vector<int64_t> out_shape = x.shape;
  out_shape.back() = out_dim;
  Tensor<T> out = b ? detail::op_output<T>(std::move(out_shape), {x, w, *b})
                    : detail::op_output<T>(std::move(out_shape), {x, w});
  CMatMap<T> X(x.ptr(), rows, in);
  CMatMap<T> W(w.ptr(), in, out_dim);
  MatMap<T> Y(out.ptr(), rows, out_dim);
  Y.noalias() = X * W;
  if (b) {
    Eigen::Map<const Eigen::RowVector<T, Eigen::Dynamic>> bv(b->ptr(), out_dim);
    Y.rowwise() += bv;
  }
  if (out.node) {
    auto xd = x.data, wd = w.data, og = out.grad;
    auto xg = x.grad, wg = w.grad;
    auto bg = b ? b->grad : nullptr;
    const bool xw = x.requires_grad, ww = w.requires_grad;
    const bool bw = b && b->requires_grad;
    out.node->backward = [=]() {
      CMatMap<T> G(og->data(), rows, out_dim);
      if (xw) {
        MatMap<T> dX(xg->data(), rows, in);
        CMatMap<T> Wm(wd->data(), in, out_dim);
        dX.noalias() += G * Wm.transpose();
      }
      if (ww) {
        MatMap<T> dW(wg->data(), in, out_dim);
        CMatMap<T> Xm(xd->data(), rows, in);
        dW.noalias() += Xm.transpose() * G;
      }
      if (bw) {
        Eigen::Map<Eigen::RowVector<T, Eigen::Dynamic>> db(bg->data(), out_dim);
        db += G.colwise().sum();
      }
    };
  }
  return out;
}

// y = x @ W^T, used for the tied unembedding (W is the [V, H] token table).
template <typename T>
Tensor<T> linear_wt(const Tensor<T>& x, const Tensor<T>& w) {
  if (w.shape.size() != 2) throw ShapeError("linear_wt: weight must be 2-d");
  const int64_t v = w.shape[0], in = w.shape[1];
  const int64_t rows = detail::lead_rows(x.shape, in, "linear_wt");
  std::vector<int64_t> out_shape = x.shape;
  out_shape.back() = v;
  Tensor<T> out = detail::op_output<T>(std::move(out_shape), {x, w});
  CMatMap<T> X(x.ptr(), rows, in);
  CMatMap<T> W(w.ptr(), v, in);
  MatMap<T> Y(out.ptr(), rows, v);
  Y.noalias() = X * W.transpose();
  if (out.node) {
    auto xd = x.data, wd = w.data, og = out.grad;
    auto xg = x.grad, wg = w.grad;
    const bool xw = x.requires_grad, ww = w.requires_grad;
    out.node->backward = [=]() {
      CMatMap<T> G(og->data(), rows, v);
      if (xw) {
        MatMap<T> dX(xg->data(), rows, in);
        CMatMap<T> Wm(wd->data(), v, in);
        dX.noalias() += G * Wm;
      }
      if (ww) {
        MatMap<T> dW(wg->data(), v, in);
        CMatMap<T> Xm(xd->data(), rows, in);
        dW.noalias() += G.transpose() * Xm;
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) throw ShapeError("add: shape mismatch");
  Tensor<T> out = detail::op_output<T>(a.shape, {a, b});
  const int64_t n = out.numel();
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (out.node) {
    auto og = out.grad;
    auto ag = a.grad, bg = b.grad;
    const bool aw = a.requires_grad, bw = b.requires_grad;
    out.node->backward = [=]() {
      const T* g = og->data();
      if (aw) {
        T* da = ag->data();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (bw) {
        T* db = bg->data();
        for (int64_t i = 0; i < n; ++i) db[i] += g[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) throw ShapeError("mul: shape mismatch");
  Tensor<T> out = detail::op_output<T>(a.shape, {a, b});
  const int64_t n = out.numel();
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (out.node) {
    auto ad = a.data, bd = b.data, og = out.grad;
    auto ag = a.grad, bg = b.grad;
    const bool aw = a.requires_grad, bw = b.requires_grad;
    out.node->backward = [=]() {
      const T* g = og->data();
      if (aw) {
        T* da = ag->data();
        const T* pb2 = bd->data();
        for (int64_t i = 0; i < n; ++i) da[i] += g[i] * pb2[i];
      }
      if (bw) {
        T* db = bg->data();
        const T* pa2 = ad->data();
        for (int64_t i = 0; i < n; ++i) db[i] += g[i] * pa2[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> out = detail::op_output<T>({1}, {x});
  double acc = 0.0;
  const T* px = x.ptr();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(px[i]);
  (*out.data)[0] = static_cast<T>(acc);
  if (out.node) {
    auto og = out.grad;
    auto xg = x.grad;
    const bool xw = x.requires_grad;
    out.node->backward = [=]() {
      if (!xw) return;
      const T g = (*og)[0];
      T* dx = xg->data();
      for (int64_t i = 0; i < n; ++i) dx[i] += g;
    };
  }
  return out;
}

// Tanh-approximation GELU (GPT-2 convention).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor<T> out = detail::op_output<T>(x.shape, {x});
  const int64_t n = x.numel();
  const T* px = x.ptr();
  T* po = out.ptr();
  for (int64_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(px[i]);
    const double u = kC * (v + kA * v * v * v);
    po[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(u)));
  }
  if (out.node) {
    auto xd = x.data, og = out.grad;
    auto xg = x.grad;
    const bool xw = x.requires_grad;
    out.node->backward = [=]() {
      if (!xw) return;
      const T* g = og->data();
      const T* pv = xd->data();
      T* dx = xg->data();
      for (int64_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(pv[i]);
        const double u = kC * (v + kA * v * v * v);
        const double th = std::tanh(u);
        const double sech2 = 1.0 - th * th;
        const double d = 0.5 * (1.0 + th) + 0.5 * v * sech2 * kC * (1.0 + 3.0 * kA * v * v);
        dx[i] += g[i] * static_cast<T>(d);
      }
    };
  }
  return out;
}

// Token + learned positional embedding: out[b,t,:] = wte[tok[b,t]] + wpe[t].
template <typename T>
Tensor<T> embedding(const Tensor<T>& wte, const Tensor<T>& wpe, const std::vector<int32_t>& tokens,
                    int64_t batch, int64_t seq_len) {
  if (wte.shape.size() != 2 || wpe.shape.size() != 2 || wte.shape[1] != wpe.shape[1]) {
    throw ShapeError("embedding: wte/wpe shape mismatch");
  }
  const int64_t vocab = wte.shape[0];
  const int64_t hidden = wte.shape[1];
  if (seq_len > wpe.shape[0]) {
    throw ShapeError("embedding: sequence length " + std::to_string(seq_len) +
                     " exceeds context length " + std::to_string(wpe.shape[0]));
  }
  if (static_cast<int64_t>(tokens.size()) != batch * seq_len) {
    throw ShapeError("embedding: token count does not match batch*seq_len");
  }
  for (int32_t t : tokens) {
    if (t < 0 || t >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(t) + " out of range [0," +
                       std::to_string(vocab) + ")");
    }
  }
  Tensor<T> out = detail::op_output<T>({batch, seq_len, hidden}, {wte, wpe});
  const T* pe = wte.ptr();
  const T* pp = wpe.ptr();
  T* po = out.ptr();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < seq_len; ++t) {
      const int64_t row = b * seq_len + t;
      const T* e = pe + static_cast<int64_t>(tokens[row]) * hidden;
      const T* p = pp + t * hidden;
      T* o = po + row * hidden;
      for (int64_t h = 0; h < hidden; ++h) o[h] = e[h] + p[h];
    }
  }
  if (out.node) {
    auto og = out.grad;
    auto eg = wte.grad, pg = wpe.grad;
    const bool ew = wte.requires_grad, pw = wpe.requires_grad;
    auto toks = std::make_shared<std::vector<int32_t>>(tokens);
    out.node->backward = [=]() {
      const T* g = og->data();
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t t = 0; t < seq_len; ++t) {
          const int64_t row = b * seq_len + t;
          const T* gr = g + row * hidden;
          if (ew) {
            T* de = eg->data() + static_cast<int64_t>((*toks)[row]) * hidden;
            for (int64_t h = 0; h < hidden; ++h) de[h] += gr[h];
          }
          if (pw) {
            T* dp = pg->data() + t * hidden;
            for (int64_t h = 0; h < hidden; ++h) dp[h] += gr[h];
          }
        }
      }
    };
  }
  return out;
}

// Fused causal multi-head self-attention over [B, T, H] projections.
// Masking is strictly lower-triangular plus the diagonal.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           int64_t n_heads) {
  if (q.shape.size() != 3 || q.shape != k.shape || q.shape != v.shape) {
    throw ShapeError("causal_attention: q/k/v must share a [B,T,H] shape");
  }
  const int64_t batch = q.shape[0], seq = q.shape[1], hidden = q.shape[2];
  if (n_heads <= 0 || hidden % n_heads != 0) {
    throw ShapeError("causal_attention: hidden size not divisible by head count");
  }
  const int64_t hd = hidden / n_heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  Tensor<T> out = detail::op_output<T>(q.shape, {q, k, v});
  auto probs = std::make_shared<Buffer<T>>(static_cast<size_t>(batch * n_heads * seq * seq));

  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < n_heads; ++h) {
      const int64_t off = b * seq * hidden + h * hd;
      CStridedMap<T> Q(q.ptr() + off, seq, hd, Eigen::OuterStride<>(hidden));
      CStridedMap<T> K(k.ptr() + off, seq, hd, Eigen::OuterStride<>(hidden));
      CStridedMap<T> V(v.ptr() + off, seq, hd, Eigen::OuterStride<>(hidden));
      RowMat<T> S = Q * K.transpose() * scale;
      T* P = probs->data() + (b * n_heads + h) * seq * seq;
      for (int64_t i = 0; i < seq; ++i) {
        T* prow = P + i * seq;
        T mx = S(i, 0);
        for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, S(i, j));
        double denom = 0.0;
        for (int64_t j = 0; j <= i; ++j) {
          const double e = std::exp(static_cast<double>(S(i, j) - mx));
          prow[j] = static_cast<T>(e);
          denom += e;
        }
        const T inv = static_cast<T>(1.0 / denom);
        for (int64_t j = 0; j <= i; ++j) prow[j] *= inv;
        for (int64_t j = i + 1; j < seq; ++j) prow[j] = T(0);
      }
      CMatMap<T> Pm(P, seq, seq);
      StridedMap<T> O(out.ptr() + off, seq, hd, Eigen::OuterStride<>(hidden));
      O.noalias() = Pm * V;
    }
  }

  if (out.node) {
    auto qd = q.data, kd = k.data, vd = v.data, og = out.grad;
    auto qg = q.grad, kg = k.grad, vg = v.grad;
    const bool qw = q.requires_grad, kw = k.requires_grad, vw = v.requires_grad;
    out.node->backward = [=]() {
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t h = 0; h < n_heads; ++h) {
          const int64_t off = b * seq * hidden + h * hd;
          const T* P = probs->data() + (b * n_heads + h) * seq * seq;
          CMatMap<T> Pm(P, seq, seq);
          CStridedMap<T> G(og->data() + off, seq, hd, Eigen::OuterStride<>(hidden));
          CStridedMap<T> V2(vd->data() + off, seq, hd, Eigen::OuterStride<>(hidden));
          if (vw) {
            StridedMap<T> dV(vg->data() + off, seq, hd, Eigen::OuterStride<>(hidden));
            dV.noalias() += Pm.transpose() * G;
          }
          if (!qw && !kw) continue;
          RowMat<T> dP = G * V2.transpose();
          RowMat<T> dS(seq, seq);
          for (int64_t i = 0; i < seq; ++i) {
            double rowdot = 0.0;
            for (int64_t j = 0; j <= i; ++j) {
              rowdot += static_cast<double>(dP(i, j)) * static_cast<double>(P[i * seq + j]);
            }
            for (int64_t j = 0; j <= i; ++j) {
              dS(i, j) = static_cast<T>(P[i * seq + j] *
                                        (dP(i, j) - static_cast<T>(rowdot))) * scale;
            }
            for (int64_t j = i + 1; j < seq; ++j) dS(i, j) = T(0);
          }
          CStridedMap<T> Q2(qd->data() + off, seq, hd, Eigen::OuterStride<>(hidden));
          CStridedMap<T> K2(kd->data() + off, seq, hd, Eigen::OuterStride<>(hidden));
          if (qw) {
            StridedMap<T> dQ(qg->data() + off, seq, hd, Eigen::OuterStride<>(hidden));
            dQ.noalias() += dS * K2;
          }
          if (kw) {
            StridedMap<T> dK(kg->data() + off, seq, hd, Eigen::OuterStride<>(hidden));
            dK.noalias() += dS.transpose() * Q2;
          }
        }
      }
    };
  }
  return out;
}

// Mean next-token cross-entropy in nats over all rows of [*, V] logits.
// Row reductions run in double with max-subtraction.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int32_t>& targets) {
  if (logits.shape.size() < 2) throw ShapeError("softmax_cross_entropy: logits must be at least 2-d");
  const int64_t vocab = logits.shape.back();
  const int64_t rows = detail::lead_rows(logits.shape, vocab, "softmax_cross_entropy");
  if (static_cast<int64_t>(targets.size()) != rows) {
    throw ShapeError("softmax_cross_entropy: target count does not match logit rows");
  }
  for (int32_t t : targets) {
    if (t < 0 || t >= vocab) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " out of range [0," +
                       std::to_string(vocab) + ")");
    }
  }
  Tensor<T> out = detail::op_output<T>({1}, {logits});
  const T* pl = logits.ptr();
  double acc = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = pl + r * vocab;
    double mx = static_cast<double>(row[0]);
    for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int64_t j = 0; j < vocab; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    acc += mx + std::log(denom) - static_cast<double>(row[targets[static_cast<size_t>(r)]]);
  }
  (*out.data)[0] = static_cast<T>(acc / static_cast<double>(rows));
  if (out.node) {
    auto ld = logits.data, og = out.grad;
    auto lg = logits.grad;
    const bool lw = logits.requires_grad;
    auto tgt = std::make_shared<std::vector<int32_t>>(targets);
    out.node->backward = [=]() {
      if (!lw) return;
      const double g = static_cast<double>((*og)[0]) / static_cast<double>(rows);
      const T* pl2 = ld->data();
      T* dl = lg->data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* row = pl2 + r * vocab;
        T* drow = dl + r * vocab;
        double mx = static_cast<double>(row[0]);
        for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int64_t j = 0; j < vocab; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        const double inv = 1.0 / denom;
        const int32_t t = (*tgt)[static_cast<size_t>(r)];
        for (int64_t j = 0; j < vocab; ++j) {
          const double p = std::exp(static_cast<double>(row[j]) - mx) * inv;
          drow[j] += static_cast<T>(g * (p - (j == t ? 1.0 : 0.0)));
        }
      }
    };
  }
  return out;
}

}  // namespace lnablate
