#pragma once

// Model surgery around the norm sites: splitting the shared ln1 into the
// qk/v pair, applying removal-schedule events, collecting sigma statistics,
// and folding all frozen sites into neighboring weights for export.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "lnablate/model.hpp"
#include "lnablate/sigma_stats.hpp"

namespace lnablate {

enum class RemovalActionKind { FreezeMain, DropEOTSpecial, DropBOSSpecial, SetInterpolation };

struct RemovalAction {
  RemovalActionKind kind = RemovalActionKind::FreezeMain;
  double interp_w = 0.0;  // only for SetInterpolation

  bool operator==(const RemovalAction&) const = default;
};

std::string to_string(const RemovalAction& a);

// Duplicates the shared ln1 of one block into independent ln1qk/ln1v states.
// Function-preserving at the moment of the split.
template <typename T>
void split_ln1(Gpt<T>& m, int block) {
  if (block < 0 || block >= static_cast<int>(m.blocks.size())) {
    throw IndexError("split_ln1: block " + std::to_string(block) + " out of range");
  }
  Block<T>& bl = m.blocks[static_cast<size_t>(block)];
  if (bl.ln1_split) {
    throw StateError("split_ln1: block " + std::to_string(block) + " already split");
  }
  bl.ln1v = clone_state(bl.ln1qk);
  bl.ln1_split = true;
}

template <typename T>
void split_all_ln1(Gpt<T>& m) {
  for (int b = 0; b < static_cast<int>(m.blocks.size()); ++b) {
    if (!m.blocks[static_cast<size_t>(b)].ln1_split) split_ln1(m, b);
  }
}

namespace detail {

template <typename T>
void init_frozen_constants(NormState<T>& st, const NormSiteId& site, const SigmaStats& stats) {
  const SigmaStats::Resolved r = stats.resolve(site);
  if (!(r.sigma_bar > 0.0) || !(r.sigma0_bar > 0.0)) {
    throw StateError("apply_event: non-positive sigma constants for site " + to_string(site));
  }
  st.sigma_bar = r.sigma_bar;
  st.sigma0_bar = r.sigma0_bar;
  // BOS special on every site; EOT special only where the value path reads.
  st.special_bos_active = true;
  st.special_eot_active = site.kind == SiteKind::ln1v || site.kind == SiteKind::ln1;
}

}  // namespace detail

// One removal-schedule event applied to a live model.
template <typename T>
void apply_event(Gpt<T>& m, const NormSiteId& site, const RemovalAction& action,
                 const SigmaStats& stats) {
  NormState<T>* st = find_site(m, site);
  if (st == nullptr) {
    std::string why = "apply_event: site " + to_string(site) + " does not exist";
    if (site.kind == SiteKind::ln1qk || site.kind == SiteKind::ln1v) why += " (ln1 not split)";
    if (site.kind == SiteKind::ln1) why += " (ln1 already split)";
    throw StateError(why);
  }
  switch (action.kind) {
    case RemovalActionKind::FreezeMain:
      if (st->mode != NormMode::Standard && st->mode != NormMode::Interpolating) {
        throw StateError("apply_event: freeze of " + to_string(site) + " while " +
                         to_string(st->mode));
      }
      detail::init_frozen_constants(*st, site, stats);
      st->mode = NormMode::Frozen;
      st->interp_w = 0.0;
      break;
    case RemovalActionKind::DropEOTSpecial:
      if (st->mode != NormMode::Frozen || !st->special_eot_active) {
        throw StateError("apply_event: drop_eot of " + to_string(site) + " while " +
                         to_string(st->mode) + (st->special_eot_active ? "" : ", special inactive"));
      }
      st->special_eot_active = false;
      break;
    case RemovalActionKind::DropBOSSpecial:
      if (st->mode != NormMode::Frozen || !st->special_bos_active) {
        throw StateError("apply_event: drop_bos of " + to_string(site) + " while " +
                         to_string(st->mode) + (st->special_bos_active ? "" : ", special inactive"));
      }
      st->special_bos_active = false;
      break;
    case RemovalActionKind::SetInterpolation:
      if (action.interp_w < 0.0 || action.interp_w > 1.0) {
        throw StateError("apply_event: interpolation weight outside [0,1]");
      }
      if (st->mode == NormMode::Standard) {
        detail::init_frozen_constants(*st, site, stats);
      } else if (st->mode != NormMode::Interpolating) {
        throw StateError("apply_event: interp of " + to_string(site) + " while " +
                         to_string(st->mode));
      }
      st->mode = NormMode::Interpolating;
      st->interp_w = action.interp_w;
      break;
  }
}

// Runs instrumented forwards over the prompts and aggregates per-site sigma
// averages. Expects an all-Standard model unless recollecting mid-removal.
template <typename T>
SigmaStats collect_sigma(Gpt<T>& m, const std::vector<std::vector<int32_t>>& prompts,
                         int32_t eot_id, bool require_standard = true) {
  if (prompts.empty()) throw ConfigError("collect_sigma: need at least one prompt");
  if (require_standard) {
    for (const NormSiteId& id : enumerate_sites(m)) {
      const NormState<T>* st = find_site(m, id);
      if (st->mode != NormMode::Standard) {
        throw StateError("collect_sigma: site " + to_string(id) + " is not in standard mode");
      }
    }
  }
  NoGradGuard ng;
  SigmaStats stats;
  SigmaRecorder rec(&stats);
  for (const auto& prompt : prompts) {
    if (prompt.empty()) throw ConfigError("collect_sigma: empty prompt");
    const int64_t seq = static_cast<int64_t>(prompt.size());
    TokenFlags flags = flags_for_tokens(prompt, 1, seq, eot_id);
    forward(m, prompt, 1, seq, flags, &rec);
  }
  return stats;
}

namespace detail {

// Composes the frozen affine norm y = gamma ((x - mu)/sigma_bar) + beta into
// the consuming projection z = y W + b:
//   b <- b + beta W        (original W)
//   W <- C diag(gamma/sigma_bar) W,  C = I - (1/H) 1 1^T when centering.
// Accumulation in double; the folded weights are cast back to T.
template <typename T>
void fold_site_into(const NormState<T>& st, Tensor<T>& w, Tensor<T>& b) {
  const int64_t hidden = w.shape[0];
  const int64_t out_dim = w.shape[1];
  const T* pg = st.gamma.ptr();
  const T* pb = st.beta.ptr();
  T* pw = w.ptr();
  T* pbias = b.ptr();

  for (int64_t j = 0; j < out_dim; ++j) {
    double acc = 0.0;
    for (int64_t i = 0; i < hidden; ++i) {
      acc += static_cast<double>(pb[i]) * static_cast<double>(pw[i * out_dim + j]);
    }
    pbias[j] = static_cast<T>(static_cast<double>(pbias[j]) + acc);
  }

  const double inv_sigma = 1.0 / st.sigma_bar;
  std::vector<double> scaled(static_cast<size_t>(hidden));
  for (int64_t j = 0; j < out_dim; ++j) {
    double col_sum = 0.0;
    for (int64_t i = 0; i < hidden; ++i) {
      const double v = static_cast<double>(pg[i]) * inv_sigma *
                       static_cast<double>(pw[i * out_dim + j]);
      scaled[static_cast<size_t>(i)] = v;
      col_sum += v;
    }
    const double col_mean = st.center_mean ? col_sum / static_cast<double>(hidden) : 0.0;
    for (int64_t i = 0; i < hidden; ++i) {
      pw[i * out_dim + j] = static_cast<T>(scaled[static_cast<size_t>(i)] - col_mean);
    }
  }
}

template <typename T>
void mark_folded(NormState<T>& st) {
  st.mode = NormMode::Folded;
  std::fill(st.gamma.data->begin(), st.gamma.data->end(), T(1));
  std::fill(st.beta.data->begin(), st.beta.data->end(), T(0));
  st.sigma_bar = 0.0;
  st.sigma0_bar = 0.0;
  st.interp_w = 0.0;
  st.special_bos_active = false;
  st.special_eot_active = false;
}

}  // namespace detail

// Exports a norm-free copy: every frozen site is composed exactly into the
// projections that read it, so the returned model's forward pass performs no
// normalization at all.
template <typename T>
Gpt<T> fold_and_export(const Gpt<T>& model) {
  std::string offenders;
  for (const NormSiteId& id : enumerate_sites(model)) {
    const NormState<T>* st = find_site(model, id);
    if (st->mode != NormMode::Frozen || st->special_bos_active || st->special_eot_active) {
      if (!offenders.empty()) offenders += ", ";
      offenders += to_string(id);
      if (st->mode != NormMode::Frozen) {
        offenders += "(" + to_string(st->mode) + ")";
      } else {
        offenders += "(special active)";
      }
    }
  }
  if (!offenders.empty()) {
    throw StateError("fold_and_export: sites not fully frozen: " + offenders);
  }

  Gpt<T> out = clone(model);
  if (out.config.tie_embeddings) {
    // Copy the tied table so lnf can fold into a private unembedding.
    const int64_t hidden = out.config.d_model;
    const int64_t vocab = out.config.vocab_size;
    out.unembed = Tensor<T>::zeros({hidden, vocab});
    for (int64_t v = 0; v < vocab; ++v) {
      for (int64_t h = 0; h < hidden; ++h) {
        (*out.unembed.data)[static_cast<size_t>(h * vocab + v)] =
            (*out.wte.data)[static_cast<size_t>(v * hidden + h)];
      }
    }
    out.unembed.set_requires_grad();
    out.config.tie_embeddings = false;
  }
  if (!out.unembed_bias.defined()) {
    out.unembed_bias = Tensor<T>::zeros({out.config.vocab_size});
    out.unembed_bias.set_requires_grad();
  }

  for (Block<T>& bl : out.blocks) {
    detail::fold_site_into(bl.ln1qk, bl.wq, bl.bq);
    detail::fold_site_into(bl.ln1qk, bl.wk, bl.bk);
    const NormState<T>& v_state = bl.ln1_split ? bl.ln1v : bl.ln1qk;
    detail::fold_site_into(v_state, bl.wv, bl.bv);
    detail::fold_site_into(bl.ln2, bl.fc_w, bl.fc_b);
    detail::mark_folded(bl.ln1qk);
    if (bl.ln1_split) detail::mark_folded(bl.ln1v);
    detail::mark_folded(bl.ln2);
  }
  detail::fold_site_into(out.lnf, out.unembed, out.unembed_bias);
  detail::mark_folded(out.lnf);
  return out;
}

}  // namespace lnablate
