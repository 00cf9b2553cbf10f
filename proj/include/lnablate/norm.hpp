#pragma once

// Every normalization behavior of the model lives here: standard per-token
// LN, frozen constant-scale LN with BOS/EOT special cases, the gradual
// sigma interpolation between the two, and the folded no-op terminal state.

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "lnablate/ops.hpp"
#include "lnablate/sites.hpp"
#include "lnablate/tensor.hpp"

namespace lnablate {

enum class NormMode { Standard, Interpolating, Frozen, Folded };

inline std::string to_string(NormMode m) {
  switch (m) {
    case NormMode::Standard: return "standard";
    case NormMode::Interpolating: return "interpolating";
    case NormMode::Frozen: return "frozen";
    case NormMode::Folded: return "folded";
  }
  return "?";
}

// Per-token sigma divisors below this are clamped to it.
inline constexpr double kSigmaEps = 1e-5;

template <typename T>
struct NormState {
  NormMode mode = NormMode::Standard;
  Tensor<T> gamma;  // [H]
  Tensor<T> beta;   // [H]
  double sigma_bar = 0.0;   // frozen divisor for ordinary tokens
  double sigma0_bar = 0.0;  // frozen divisor for position-0 / EOT tokens
  double interp_w = 0.0;    // Interpolating weight on the frozen divisor
  bool special_bos_active = false;
  bool special_eot_active = false;
  bool center_mean = true;  // false gives the RMSNorm-style variant
};

// Per-position BOS/EOT markers for a flattened [rows] view of [B, T].
struct TokenFlags {
  std::vector<uint8_t> is_bos;
  std::vector<uint8_t> is_eot;

  int64_t rows() const { return static_cast<int64_t>(is_bos.size()); }

  static TokenFlags none(int64_t rows) {
    TokenFlags f;
    f.is_bos.assign(static_cast<size_t>(rows), 0);
    f.is_eot.assign(static_cast<size_t>(rows), 0);
    return f;
  }
};

// Instrumentation: counts norm-site evaluations and per-token sigma
// computations in a forward trace. A folded export must drive both to zero.
struct NormTrace {
  uint64_t norm_site_evals = 0;
  uint64_t sigma_token_evals = 0;

  void reset() { *this = NormTrace{}; }
};

namespace detail {

template <typename T>
void validate_norm_state(const NormState<T>& st) {
  if (st.mode == NormMode::Frozen || st.mode == NormMode::Interpolating) {
    if (!(st.sigma_bar > 0.0)) throw StateError("norm state: sigma_bar must be positive when frozen");
    if ((st.special_bos_active || st.special_eot_active) && !(st.sigma0_bar > 0.0)) {
      throw StateError("norm state: sigma0_bar must be positive while a special case is active");
    }
    if (st.mode == NormMode::Interpolating && (st.interp_w < 0.0 || st.interp_w > 1.0)) {
      throw StateError("norm state: interpolation weight outside [0,1]");
    }
  }
}

}  // namespace detail

// Applies one norm site to x viewed as [rows, H]. Differentiable w.r.t.
// x, gamma and beta in every mode; affine in x once frozen. Position-0
// tokens outrank EOT tokens when both flags are set.
template <typename T>
Tensor<T> norm_forward(const Tensor<T>& x, const NormState<T>& st, const TokenFlags& flags,
                       NormTrace* trace = nullptr) {
  if (st.mode == NormMode::Folded) {
    throw StateError("norm_forward: site is folded away");
  }
  detail::validate_norm_state(st);
  const int64_t hidden = x.shape.back();
  const int64_t rows = detail::lead_rows(x.shape, hidden, "norm_forward");
  if (st.gamma.numel() != hidden || st.beta.numel() != hidden) {
    throw ShapeError("norm_forward: gamma/beta length does not match embedding dim");
  }
  if (flags.rows() != rows) throw ShapeError("norm_forward: token flags do not match rows");

  const bool needs_sigma = st.mode == NormMode::Standard || st.mode == NormMode::Interpolating;
  const bool center = st.center_mean;
  const double w = st.mode == NormMode::Standard ? 0.0
                   : st.mode == NormMode::Frozen ? 1.0
                                                 : st.interp_w;
  if (trace) {
    trace->norm_site_evals += 1;
    if (needs_sigma) trace->sigma_token_evals += static_cast<uint64_t>(rows);
  }

  Tensor<T> out = detail::op_output<T>(x.shape, {x, st.gamma, st.beta});
  auto mu_row = std::make_shared<std::vector<double>>(static_cast<size_t>(rows), 0.0);
  auto d_row = std::make_shared<std::vector<double>>(static_cast<size_t>(rows), 0.0);
  auto sig_row = std::make_shared<std::vector<double>>();      // clamped sigma, per row
  auto sig_live = std::make_shared<std::vector<uint8_t>>();    // sigma gradient path active
  if (needs_sigma) {
    sig_row->assign(static_cast<size_t>(rows), 0.0);
    sig_live->assign(static_cast<size_t>(rows), 0);
  }

  const T* px = x.ptr();
  const T* pg = st.gamma.ptr();
  const T* pb = st.beta.ptr();
  T* po = out.ptr();
  const double inv_h = 1.0 / static_cast<double>(hidden);

  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * hidden;
    T* yr = po + r * hidden;

    double mu = 0.0;
    if (center || needs_sigma) {
      for (int64_t j = 0; j < hidden; ++j) mu += static_cast<double>(xr[j]);
      mu *= inv_h;
    }
    (*mu_row)[static_cast<size_t>(r)] = mu;

    double sigma_used = 0.0;
    if (needs_sigma) {
      double var = 0.0;
      for (int64_t j = 0; j < hidden; ++j) {
        const double c = static_cast<double>(xr[j]) - mu;
        var += c * c;
      }
      const double sigma = std::sqrt(var * inv_h);
      const bool clamped = sigma < kSigmaEps;
      sigma_used = clamped ? kSigmaEps : sigma;
      (*sig_row)[static_cast<size_t>(r)] = sigma_used;
      (*sig_live)[static_cast<size_t>(r)] = clamped ? 0 : 1;
    }

    double frozen_d = 0.0;
    if (w > 0.0) {
      const bool bos = flags.is_bos[static_cast<size_t>(r)] != 0;
      const bool eot = !bos && flags.is_eot[static_cast<size_t>(r)] != 0;
      const bool special = (bos && st.special_bos_active) || (eot && st.special_eot_active);
      frozen_d = special ? st.sigma0_bar : st.sigma_bar;
    }
    const double d = (1.0 - w) * sigma_used + w * frozen_d;
    (*d_row)[static_cast<size_t>(r)] = d;

    const double sub = center ? mu : 0.0;
    const double inv_d = 1.0 / d;
    for (int64_t j = 0; j < hidden; ++j) {
      const double c = (static_cast<double>(xr[j]) - sub) * inv_d;
      yr[j] = static_cast<T>(c * static_cast<double>(pg[j]) + static_cast<double>(pb[j]));
    }
  }

  if (out.node) {
    auto xd = x.data, gd = st.gamma.data, og = out.grad;
    auto xg = x.grad, gg = st.gamma.grad, bg = st.beta.grad;
    const bool xw = x.requires_grad, gw = st.gamma.requires_grad, bw = st.beta.requires_grad;
    out.node->backward = [=]() {
      const T* go = og->data();
      const T* pxv = xd->data();
      const T* pgv = gd->data();
      std::vector<double> gbuf(static_cast<size_t>(hidden));
      for (int64_t r = 0; r < rows; ++r) {
        const T* xr = pxv + r * hidden;
        const T* gr = go + r * hidden;
        const double mu = (*mu_row)[static_cast<size_t>(r)];
        const double d = (*d_row)[static_cast<size_t>(r)];
        const double inv_d = 1.0 / d;
        const double sub = center ? mu : 0.0;

        if (gw || bw) {
          T* dgam = gw ? gg->data() : nullptr;
          T* dbet = bw ? bg->data() : nullptr;
          for (int64_t j = 0; j < hidden; ++j) {
            if (dbet) dbet[j] += gr[j];
            if (dgam) {
              const double c = (static_cast<double>(xr[j]) - sub) * inv_d;
              dgam[j] += static_cast<T>(static_cast<double>(gr[j]) * c);
            }
          }
        }

        if (!xw) continue;
        // g = dL/dy * gamma
        double gmean = 0.0;
        for (int64_t j = 0; j < hidden; ++j) {
          gbuf[static_cast<size_t>(j)] = static_cast<double>(gr[j]) * static_cast<double>(pgv[j]);
          gmean += gbuf[static_cast<size_t>(j)];
        }
        gmean *= inv_h;

        const bool sigma_term = needs_sigma && (1.0 - w) > 0.0 &&
                                (*sig_live)[static_cast<size_t>(r)] != 0;
        double coeff = 0.0;
        if (sigma_term) {
          double s = 0.0;  // sum_j g_j * (x_j - sub)
          for (int64_t j = 0; j < hidden; ++j) {
            s += gbuf[static_cast<size_t>(j)] * (static_cast<double>(xr[j]) - sub);
          }
          const double sigma = (*sig_row)[static_cast<size_t>(r)];
          coeff = (1.0 - w) * s * inv_d * inv_d * inv_h / sigma;
        }

        T* dxr = xg->data() + r * hidden;
        for (int64_t j = 0; j < hidden; ++j) {
          double dx = (gbuf[static_cast<size_t>(j)] - (center ? gmean : 0.0)) * inv_d;
          if (sigma_term) dx -= coeff * (static_cast<double>(xr[j]) - mu);
          dxr[j] += static_cast<T>(dx);
        }
      }
    };
  }
  return out;
}

}  // namespace lnablate
