#pragma once

// Decoder-only pre-norm GPT-2 style transformer with per-site addressable
// normalization. Attention keeps separate Q/K/V projections so the input
// normalization can be split into independent qk and v paths.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "lnablate/norm.hpp"
#include "lnablate/ops.hpp"
#include "lnablate/sigma_stats.hpp"
#include "lnablate/sites.hpp"

namespace lnablate {

struct ModelConfig {
  int64_t n_layers = 4;
  int64_t n_heads = 4;
  int64_t d_model = 128;
  int64_t d_ff = 0;  // 0 means 4 * d_model
  int64_t vocab_size = 257;
  int64_t context_length = 256;
  bool tie_embeddings = false;

  int64_t ff_dim() const { return d_ff > 0 ? d_ff : 4 * d_model; }

  void validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || vocab_size <= 0 || d_ff < 0) {
      throw ConfigError("model config: all sizes must be positive");
    }
    if (context_length < 2) throw ConfigError("model config: context_length must be >= 2");
    if (d_model % n_heads != 0) throw ConfigError("model config: d_model not divisible by n_heads");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct Block {
  bool ln1_split = false;
  NormState<T> ln1qk;  // holds the shared ln1 until split
  NormState<T> ln1v;   // only defined after split
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  NormState<T> ln2;
  Tensor<T> fc_w, fc_b, proj_w, proj_b;
};

template <typename T>
struct Gpt {
  ModelConfig config;
  Tensor<T> wte;  // [V, H]
  Tensor<T> wpe;  // [T_max, H]
  std::vector<Block<T>> blocks;
  NormState<T> lnf;
  Tensor<T> unembed;       // [H, V]; undefined when tied
  Tensor<T> unembed_bias;  // [V]; materialized by folding, otherwise undefined
  mutable NormTrace trace;
};

namespace detail {

template <typename T>
NormState<T> neutral_norm_state(int64_t hidden) {
  NormState<T> st;
  st.gamma = Tensor<T>::ones({hidden});
  st.beta = Tensor<T>::zeros({hidden});
  st.gamma.set_requires_grad();
  st.beta.set_requires_grad();
  return st;
}

template <typename T>
Tensor<T> param(std::vector<int64_t> shape, std::mt19937_64& rng, double stddev) {
  Tensor<T> t = stddev > 0.0 ? Tensor<T>::randn(std::move(shape), rng, stddev)
                             : Tensor<T>::zeros(std::move(shape));
  t.set_requires_grad();
  return t;
}

}  // namespace detail

// GPT-2 style init: normal(0, 0.02) weights, zero biases, neutral norm
// affines, residual output projections scaled down by 1/sqrt(2L).
template <typename T>
Gpt<T> init(const ModelConfig& config, uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const int64_t hidden = config.d_model;
  const int64_t ff = config.ff_dim();
  const double w_std = 0.02;
  const double resid_std = w_std / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  Gpt<T> m;
  m.config = config;
  m.wte = detail::param<T>({config.vocab_size, hidden}, rng, w_std);
  m.wpe = detail::param<T>({config.context_length, hidden}, rng, w_std);
  m.blocks.resize(static_cast<size_t>(config.n_layers));
  for (auto& bl : m.blocks) {
    bl.ln1qk = detail::neutral_norm_state<T>(hidden);
    bl.wq = detail::param<T>({hidden, hidden}, rng, w_std);
    bl.bq = detail::param<T>({hidden}, rng, 0.0);
    bl.wk = detail::param<T>({hidden, hidden}, rng, w_std);
    bl.bk = detail::param<T>({hidden}, rng, 0.0);
    bl.wv = detail::param<T>({hidden, hidden}, rng, w_std);
    bl.bv = detail::param<T>({hidden}, rng, 0.0);
    bl.wo = detail::param<T>({hidden, hidden}, rng, resid_std);
    bl.bo = detail::param<T>({hidden}, rng, 0.0);
    bl.ln2 = detail::neutral_norm_state<T>(hidden);
    bl.fc_w = detail::param<T>({hidden, ff}, rng, w_std);
    bl.fc_b = detail::param<T>({ff}, rng, 0.0);
    bl.proj_w = detail::param<T>({ff, hidden}, rng, resid_std);
    bl.proj_b = detail::param<T>({hidden}, rng, 0.0);
  }
  m.lnf = detail::neutral_norm_state<T>(hidden);
  if (!config.tie_embeddings) {
    m.unembed = detail::param<T>({hidden, config.vocab_size}, rng, w_std);
  }
  return m;
}

// Allocates a model with the given split layout; checkpoint loading
// overwrites every tensor and norm state.
template <typename T>
Gpt<T> make_skeleton(const ModelConfig& config, const std::vector<bool>& splits,
                     bool with_unembed_bias) {
  Gpt<T> m = init<T>(config, 0);
  if (static_cast<int64_t>(splits.size()) != config.n_layers) {
    throw ConfigError("skeleton: split flag count does not match n_layers");
  }
  const int64_t hidden = config.d_model;
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    if (splits[i]) {
      m.blocks[i].ln1_split = true;
      m.blocks[i].ln1v = detail::neutral_norm_state<T>(hidden);
    }
  }
  if (with_unembed_bias) {
    m.unembed_bias = Tensor<T>::zeros({config.vocab_size});
    m.unembed_bias.set_requires_grad();
  }
  return m;
}

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
  bool decay;  // 2-d weights get weight decay, 1-d params do not
};

template <typename T>
std::vector<NamedParam<T>> named_params(Gpt<T>& m) {
  std::vector<NamedParam<T>> out;
  auto push = [&out](std::string name, Tensor<T>& t) {
    out.push_back({std::move(name), &t, t.shape.size() >= 2});
  };
  push("wte", m.wte);
  push("wpe", m.wpe);
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    Block<T>& bl = m.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    const std::string ln1_name = bl.ln1_split ? "ln1qk" : "ln1";
    push(p + ln1_name + ".gamma", bl.ln1qk.gamma);
    push(p + ln1_name + ".beta", bl.ln1qk.beta);
    if (bl.ln1_split) {
      push(p + "ln1v.gamma", bl.ln1v.gamma);
      push(p + "ln1v.beta", bl.ln1v.beta);
    }
    push(p + "attn.wq", bl.wq);
    push(p + "attn.bq", bl.bq);
    push(p + "attn.wk", bl.wk);
    push(p + "attn.bk", bl.bk);
    push(p + "attn.wv", bl.wv);
    push(p + "attn.bv", bl.bv);
    push(p + "attn.wo", bl.wo);
    push(p + "attn.bo", bl.bo);
    push(p + "ln2.gamma", bl.ln2.gamma);
    push(p + "ln2.beta", bl.ln2.beta);
    push(p + "ff.fc_w", bl.fc_w);
    push(p + "ff.fc_b", bl.fc_b);
    push(p + "ff.proj_w", bl.proj_w);
    push(p + "ff.proj_b", bl.proj_b);
  }
  push("lnf.gamma", m.lnf.gamma);
  push("lnf.beta", m.lnf.beta);
  if (m.unembed.defined()) push("unembed", m.unembed);
  if (m.unembed_bias.defined()) push("unembed_bias", m.unembed_bias);
  return out;
}

// Norm sites in canonical order: per block ln1 (or ln1qk, ln1v), ln2; lnf last.
template <typename T>
std::vector<NormSiteId> enumerate_sites(const Gpt<T>& m) {
  std::vector<NormSiteId> out;
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    const int b = static_cast<int>(i);
    if (m.blocks[i].ln1_split) {
      out.push_back({b, SiteKind::ln1qk});
      out.push_back({b, SiteKind::ln1v});
    } else {
      out.push_back({b, SiteKind::ln1});
    }
    out.push_back({b, SiteKind::ln2});
  }
  out.push_back(final_site());
  return out;
}

template <typename T>
NormState<T>* find_site(Gpt<T>& m, const NormSiteId& id) {
  if (id.kind == SiteKind::lnf) return &m.lnf;
  if (id.block < 0 || id.block >= static_cast<int>(m.blocks.size())) return nullptr;
  Block<T>& bl = m.blocks[static_cast<size_t>(id.block)];
  switch (id.kind) {
    case SiteKind::ln1: return bl.ln1_split ? nullptr : &bl.ln1qk;
    case SiteKind::ln1qk: return bl.ln1_split ? &bl.ln1qk : nullptr;
    case SiteKind::ln1v: return bl.ln1_split ? &bl.ln1v : nullptr;
    case SiteKind::ln2: return &bl.ln2;
    default: return nullptr;
  }
}

template <typename T>
const NormState<T>* find_site(const Gpt<T>& m, const NormSiteId& id) {
  return find_site(const_cast<Gpt<T>&>(m), id);
}

// Window-position flags: position 0 of each window is BOS, EOT wherever the
// token id matches.
inline TokenFlags flags_for_tokens(const std::vector<int32_t>& tokens, int64_t batch,
                                   int64_t seq_len, int32_t eot_id) {
  TokenFlags f = TokenFlags::none(batch * seq_len);
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < seq_len; ++t) {
      const int64_t r = b * seq_len + t;
      if (t == 0) f.is_bos[static_cast<size_t>(r)] = 1;
      if (tokens[static_cast<size_t>(r)] == eot_id) f.is_eot[static_cast<size_t>(r)] = 1;
    }
  }
  return f;
}

// Full pre-norm forward pass over [batch, seq_len] token windows.
// Sites in Folded mode are skipped entirely (the exported model path).
template <typename T>
Tensor<T> forward(Gpt<T>& m, const std::vector<int32_t>& tokens, int64_t batch, int64_t seq_len,
                  const TokenFlags& flags, SigmaRecorder* recorder = nullptr) {
  if (seq_len > m.config.context_length) {
    throw ShapeError("forward: sequence length " + std::to_string(seq_len) +
                     " exceeds context length " + std::to_string(m.config.context_length));
  }
  if (flags.rows() != batch * seq_len) throw ShapeError("forward: flag rows mismatch");

  auto site_norm = [&](Tensor<T>& x, const NormState<T>& st) {
    return st.mode == NormMode::Folded ? x : norm_forward(x, st, flags, &m.trace);
  };

  Tensor<T> x = embedding(m.wte, m.wpe, tokens, batch, seq_len);
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    Block<T>& bl = m.blocks[i];
    if (recorder != nullptr) {
      const int b = static_cast<int>(i);
      if (bl.ln1_split) {
        recorder->record({b, SiteKind::ln1qk}, x, flags);
        recorder->record({b, SiteKind::ln1v}, x, flags);
      } else {
        recorder->record({b, SiteKind::ln1}, x, flags);
      }
    }
    Tensor<T> a_qk = site_norm(x, bl.ln1qk);
    Tensor<T> a_v = bl.ln1_split ? site_norm(x, bl.ln1v) : a_qk;
    Tensor<T> q = linear(a_qk, bl.wq, &bl.bq);
    Tensor<T> k = linear(a_qk, bl.wk, &bl.bk);
    Tensor<T> v = linear(a_v, bl.wv, &bl.bv);
    Tensor<T> att = causal_attention(q, k, v, m.config.n_heads);
    x = add(x, linear(att, bl.wo, &bl.bo));

    if (recorder != nullptr) recorder->record({static_cast<int>(i), SiteKind::ln2}, x, flags);
    Tensor<T> h = site_norm(x, bl.ln2);
    Tensor<T> ff = linear(gelu(linear(h, bl.fc_w, &bl.fc_b)), bl.proj_w, &bl.proj_b);
    x = add(x, ff);
  }
  if (recorder != nullptr) recorder->record(final_site(), x, flags);
  Tensor<T> z = site_norm(x, m.lnf);
  if (m.config.tie_embeddings) return linear_wt(z, m.wte);
  return linear(z, m.unembed, m.unembed_bias.defined() ? &m.unembed_bias : nullptr);
}

// Convenience single-sequence forward.
template <typename T>
Tensor<T> forward(Gpt<T>& m, const std::vector<int32_t>& tokens, const TokenFlags& flags) {
  return forward(m, tokens, 1, static_cast<int64_t>(tokens.size()), flags);
}

template <typename T>
Tensor<T> loss(Gpt<T>& m, const std::vector<int32_t>& tokens, const std::vector<int32_t>& targets,
               int64_t batch, int64_t seq_len, const TokenFlags& flags) {
  Tensor<T> logits = forward(m, tokens, batch, seq_len, flags);
  return softmax_cross_entropy(logits, targets);
}

template <typename T>
NormState<T> clone_state(const NormState<T>& st) {
  NormState<T> out = st;
  out.gamma = st.gamma.clone();
  out.beta = st.beta.clone();
  out.gamma.set_requires_grad();
  out.beta.set_requires_grad();
  return out;
}

template <typename T>
Gpt<T> clone(const Gpt<T>& m) {
  Gpt<T> out;
  out.config = m.config;
  auto dup = [](const Tensor<T>& t) {
    Tensor<T> c = t.clone();
    c.set_requires_grad();
    return c;
  };
  out.wte = dup(m.wte);
  out.wpe = dup(m.wpe);
  out.blocks.resize(m.blocks.size());
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    const Block<T>& a = m.blocks[i];
    Block<T>& b = out.blocks[i];
    b.ln1_split = a.ln1_split;
    b.ln1qk = clone_state(a.ln1qk);
    if (a.ln1_split) b.ln1v = clone_state(a.ln1v);
    b.wq = dup(a.wq);
    b.bq = dup(a.bq);
    b.wk = dup(a.wk);
    b.bk = dup(a.bk);
    b.wv = dup(a.wv);
    b.bv = dup(a.bv);
    b.wo = dup(a.wo);
    b.bo = dup(a.bo);
    b.ln2 = clone_state(a.ln2);
    b.fc_w = dup(a.fc_w);
    b.fc_b = dup(a.fc_b);
    b.proj_w = dup(a.proj_w);
    b.proj_b = dup(a.proj_b);
  }
  out.lnf = clone_state(m.lnf);
  if (m.unembed.defined()) out.unembed = dup(m.unembed);
  if (m.unembed_bias.defined()) out.unembed_bias = dup(m.unembed_bias);
  return out;
}

}  // namespace lnablate
