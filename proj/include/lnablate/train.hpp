#pragma once

// Fine-tuning loop: applies removal-schedule events between optimizer steps,
// accumulates micro-batch gradients, clips, runs AdamW, records metrics, and
// aborts on irrecoverable divergence.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lnablate/checkpoint.hpp"
#include "lnablate/data.hpp"
#include "lnablate/metrics.hpp"
#include "lnablate/model.hpp"
#include "lnablate/schedule.hpp"
#include "lnablate/sigma_stats.hpp"
#include "lnablate/surgery.hpp"

namespace lnablate {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
};

struct TrainConfig {
  int64_t micro_batch = 16;
  int64_t grad_accum = 1;
  int64_t seq_len = 256;
  int64_t total_steps = 2000;
  LRScheduleConfig lr;
  OptimizerConfig optimizer;
  int64_t eval_every = 50;
  int64_t eval_tokens = 16384;
  uint64_t seed = 0;
  double divergence_threshold = 20.0;
  int64_t divergence_patience = 50;
  int64_t ckpt_every = 0;  // 0: only best + final
  bool recollect_sigma = false;
  int64_t sigma_prompts = 16;

  int64_t tokens_per_step() const { return micro_batch * seq_len * grad_accum; }

  void validate() const {
    if (micro_batch <= 0 || grad_accum < 1 || seq_len <= 0 || total_steps < 0 ||
        eval_every <= 0 || eval_tokens < seq_len || divergence_patience <= 0 ||
        sigma_prompts < 1) {
      throw ConfigError("train config: sizes must be positive");
    }
    lr.validate();
  }
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m1;
  std::vector<std::vector<T>> m2;
  int64_t step_count = 0;
};

template <typename T>
void init_adam_state(AdamState<T>& st, const std::vector<Tensor<T>*>& params) {
  st.m1.clear();
  st.m2.clear();
  st.step_count = 0;
  for (const Tensor<T>* p : params) {
    st.m1.emplace_back(p->data->size(), T(0));
    st.m2.emplace_back(p->data->size(), T(0));
  }
}

// One AdamW update with decoupled weight decay over a parameter group.
// Returns false (and applies nothing) if any gradient is non-finite.
template <typename T>
bool optimizer_step(const std::vector<Tensor<T>*>& params, AdamState<T>& st, double lr,
                    const OptimizerConfig& cfg) {
  if (lr < 0.0) throw ConfigError("optimizer_step: negative learning rate");
  if (st.m1.size() != params.size()) throw ConfigError("optimizer_step: state/param count mismatch");
  for (const Tensor<T>* p : params) {
    const T* g = p->grad_ptr();
    const int64_t n = p->numel();
    for (int64_t i = 0; i < n; ++i) {
      if (!std::isfinite(static_cast<double>(g[i]))) return false;
    }
  }
  st.step_count += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step_count));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step_count));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& p = *params[pi];
    const T* g = p.grad_ptr();
    T* w = p.ptr();
    T* m1 = st.m1[pi].data();
    T* m2 = st.m2[pi].data();
    const int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]);
      const double m = cfg.beta1 * static_cast<double>(m1[i]) + (1.0 - cfg.beta1) * gi;
      const double v = cfg.beta2 * static_cast<double>(m2[i]) + (1.0 - cfg.beta2) * gi * gi;
      m1[i] = static_cast<T>(m);
      m2[i] = static_cast<T>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      double wi = static_cast<double>(w[i]);
      wi -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * wi);
      w[i] = static_cast<T>(wi);
    }
  }
  return true;
}

// Scales gradients so the global L2 norm is at most max_norm; returns the
// factor applied (NaN propagates when the norm is non-finite).
template <typename T>
double grad_clip(const std::vector<Tensor<T>*>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("grad_clip: max_norm must be positive");
  double sq = 0.0;
  for (const Tensor<T>* p : params) {
    const T* g = p->grad_ptr();
    const int64_t n = p->numel();
    for (int64_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]);
      sq += gi * gi;
    }
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return std::numeric_limits<double>::quiet_NaN();
  if (norm <= max_norm) return 1.0;
  const double factor = max_norm / norm;
  for (Tensor<T>* p : params) {
    T* g = p->grad_ptr();
    const int64_t n = p->numel();
    for (int64_t i = 0; i < n; ++i) g[i] = static_cast<T>(static_cast<double>(g[i]) * factor);
  }
  return factor;
}

template <typename T>
struct TrainResult {
  std::vector<MetricsRecord> log;
  Gpt<T> best_model;
  double best_val = std::numeric_limits<double>::quiet_NaN();
  int64_t best_step = -1;
  double final_val = std::numeric_limits<double>::quiet_NaN();
};

// The fine-tuner. With an empty schedule this is the vanilla baseline arm.
// Writes metrics.csv / best.ckpt / step_<s>.ckpt into run_dir when given.
template <typename T>
TrainResult<T> train_loop(Gpt<T>& model, const Corpus& corpus, const RemovalSchedule& schedule,
                          const TrainConfig& cfg, const SigmaStats* stats,
                          const std::string& run_dir = "") {
  cfg.validate();
  validate_schedule(schedule);
  if (cfg.seq_len > model.config.context_length) {
    throw ConfigError("train: seq_len exceeds model context length");
  }

  // Every site the schedule freezes must be resolvable from the stats up
  // front, unless fresh stats are collected at each freeze.
  SigmaStats local_stats = stats != nullptr ? *stats : SigmaStats{};
  if (!cfg.recollect_sigma) {
    for (const RemovalEvent& e : schedule.events) {
      if (e.action.kind == RemovalActionKind::FreezeMain ||
          e.action.kind == RemovalActionKind::SetInterpolation) {
        if (stats == nullptr || !local_stats.covers(e.site)) {
          throw StateError("train: sigma stats missing for scheduled site " + to_string(e.site) +
                           " (collect first or enable recollection)");
        }
      }
    }
  }

  TrainResult<T> result;
  result.best_model = clone(model);

  std::ofstream metrics_out;
  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir);
    metrics_out.open(run_dir + "/metrics.csv", std::ios::binary | std::ios::trunc);
    if (!metrics_out) throw IoError("cannot open metrics csv in " + run_dir);
    metrics_out << metrics_csv_header() << "\n";
  }

  auto params_all = named_params(model);
  std::vector<Tensor<T>*> decay_group, plain_group, every;
  for (auto& np : params_all) {
    every.push_back(np.tensor);
    (np.decay ? decay_group : plain_group).push_back(np.tensor);
  }
  AdamState<T> decay_state, plain_state;
  init_adam_state(decay_state, decay_group);
  init_adam_state(plain_state, plain_group);
  OptimizerConfig no_decay = cfg.optimizer;
  no_decay.weight_decay = 0.0;

  BatchSampler sampler = make_sampler(corpus, Split::train, cfg.seed, cfg.micro_batch, cfg.seq_len);

  int64_t last_event_step = -1;
  int64_t bad_steps = 0;
  std::vector<std::string> recent_events;

  for (int64_t step = 0; step < cfg.total_steps; ++step) {
    MetricsRecord rec;
    rec.step = step;
    rec.lr = lr_at(cfg.lr, step);

    for (const RemovalEvent& e : events_at(schedule, step)) {
      if (cfg.recollect_sigma && (e.action.kind == RemovalActionKind::FreezeMain ||
                                  e.action.kind == RemovalActionKind::SetInterpolation)) {
        auto prompts = prompt_windows(corpus, Split::train, cfg.sigma_prompts, cfg.seq_len);
        local_stats = collect_sigma(model, prompts, kEotToken, /*require_standard=*/false);
      }
      apply_event(model, e.site, e.action, local_stats);
      rec.events.push_back(to_string(e.site) + ":" + to_string(e.action));
      last_event_step = step;
    }
    if (!rec.events.empty()) recent_events = rec.events;

    for (Tensor<T>* p : every) p->zero_grad();
    double loss_sum = 0.0;
    for (int64_t acc = 0; acc < cfg.grad_accum; ++acc) {
      Batch batch = next_batch(sampler);
      Tensor<T> l = loss(model, batch.tokens, batch.targets, batch.batch, batch.seq_len, batch.flags);
      loss_sum += static_cast<double>(l.item());
      backward(l, static_cast<T>(1.0 / static_cast<double>(cfg.grad_accum)));
    }
    rec.train_loss = loss_sum / static_cast<double>(cfg.grad_accum);

    const double clip_factor = grad_clip(every, cfg.optimizer.grad_clip);
    const bool grads_ok = std::isfinite(clip_factor) &&
                          optimizer_step(decay_group, decay_state, rec.lr, cfg.optimizer) &&
                          optimizer_step(plain_group, plain_state, rec.lr, no_decay);

    const bool do_eval = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps;
    if (do_eval) {
      rec.val_loss = evaluate(model, corpus, Split::val, cfg.eval_tokens).mean_loss;
      if (std::isnan(result.best_val) || rec.val_loss < result.best_val) {
        result.best_val = rec.val_loss;
        result.best_step = step;
        result.best_model = clone(model);
        if (!run_dir.empty()) save_checkpoint(result.best_model, run_dir + "/best.ckpt");
      }
      result.final_val = rec.val_loss;
    }

    result.log.push_back(rec);
    if (metrics_out.is_open()) {
      metrics_out << metrics_csv_line(rec) << "\n";
      metrics_out.flush();
    }
    if (!run_dir.empty() && cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0) {
      save_checkpoint(model, run_dir + "/step_" + std::to_string(step) + ".ckpt");
    }

    auto describe_events = [&]() {
      std::string s = recent_events.empty() ? std::string("none") : std::string();
      for (size_t i = 0; i < recent_events.size(); ++i) {
        if (i) s += ", ";
        s += recent_events[i];
      }
      return s + " (step " + std::to_string(last_event_step) + ")";
    };
    if (!std::isfinite(rec.train_loss) || !grads_ok) {
      throw DivergenceError("training diverged at step " + std::to_string(step) +
                            " (non-finite loss or gradients); most recent events: " +
                            describe_events());
    }
    if (rec.train_loss > cfg.divergence_threshold) {
      bad_steps += 1;
      if (bad_steps > cfg.divergence_patience && step - last_event_step > cfg.divergence_patience) {
        throw DivergenceError("training diverged: loss above " +
                              std::to_string(cfg.divergence_threshold) + " for " +
                              std::to_string(bad_steps) + " steps; most recent events: " +
                              describe_events());
      }
    } else {
      bad_steps = 0;
    }
  }

  if (!run_dir.empty() && cfg.total_steps > 0) {
    save_checkpoint(model, run_dir + "/step_" + std::to_string(cfg.total_steps - 1) + ".ckpt");
  }
  return result;
}

}  // namespace lnablate
