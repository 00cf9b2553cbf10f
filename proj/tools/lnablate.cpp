// lnablate: train a byte-level GPT, freeze its normalization sites on a
// removal schedule while fine-tuning, fold the frozen sites into the
// weights, and export a model that runs with no normalization at all.
//
// Commands: pretrain, collect-sigma, remove-ln, eval, generate, export,
// curves. Exit codes: 0 success, 1 divergence, 2 usage or I/O errors.
// Set LNABL_PRECISION=f64 to run every command in 64-bit floats.

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lnablate/checkpoint.hpp"
#include "lnablate/data.hpp"
#include "lnablate/metrics.hpp"
#include "lnablate/model.hpp"
#include "lnablate/schedule.hpp"
#include "lnablate/sigma_stats.hpp"
#include "lnablate/surgery.hpp"
#include "lnablate/train.hpp"

using namespace lnablate;

namespace {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  double val_fraction = 0.1;
  bool lr_kind_set = false;  // config file or flag chose the LR schedule kind
};

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: bad boolean value '" + v + "'");
}

void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto as_i64 = [&]() { return static_cast<int64_t>(std::stoll(value)); };
  auto as_f64 = [&]() { return std::stod(value); };
  try {
    if (key == "n_layers") cfg.model.n_layers = as_i64();
    else if (key == "n_heads") cfg.model.n_heads = as_i64();
    else if (key == "d_model") cfg.model.d_model = as_i64();
    else if (key == "d_ff") cfg.model.d_ff = as_i64();
    else if (key == "vocab_size") cfg.model.vocab_size = as_i64();
    else if (key == "context_length") cfg.model.context_length = as_i64();
    else if (key == "tie_embeddings") cfg.model.tie_embeddings = parse_bool(value);
    else if (key == "micro_batch") cfg.train.micro_batch = as_i64();
    else if (key == "grad_accum") cfg.train.grad_accum = as_i64();
    else if (key == "seq_len") cfg.train.seq_len = as_i64();
    else if (key == "total_steps") cfg.train.total_steps = as_i64();
    else if (key == "eval_every") cfg.train.eval_every = as_i64();
    else if (key == "eval_tokens") cfg.train.eval_tokens = as_i64();
    else if (key == "seed") cfg.train.seed = static_cast<uint64_t>(std::stoull(value));
    else if (key == "divergence_threshold") cfg.train.divergence_threshold = as_f64();
    else if (key == "divergence_patience") cfg.train.divergence_patience = as_i64();
    else if (key == "ckpt_every") cfg.train.ckpt_every = as_i64();
    else if (key == "recollect_sigma") cfg.train.recollect_sigma = parse_bool(value);
    else if (key == "sigma_prompts") cfg.train.sigma_prompts = as_i64();
    else if (key == "lr_kind") {
      if (value == "constant") cfg.train.lr.kind = LRScheduleConfig::Kind::Constant;
      else if (value == "warmup_cosine") cfg.train.lr.kind = LRScheduleConfig::Kind::WarmupCosine;
      else throw ConfigError("config: lr_kind must be constant or warmup_cosine");
      cfg.lr_kind_set = true;
    } else if (key == "base_lr") cfg.train.lr.base_lr = as_f64();
    else if (key == "min_lr") cfg.train.lr.min_lr = as_f64();
    else if (key == "warmup_steps") cfg.train.lr.warmup_steps = as_i64();
    else if (key == "decay_end_step") cfg.train.lr.decay_end_step = as_i64();
    else if (key == "beta1") cfg.train.optimizer.beta1 = as_f64();
    else if (key == "beta2") cfg.train.optimizer.beta2 = as_f64();
    else if (key == "eps") cfg.train.optimizer.eps = as_f64();
    else if (key == "weight_decay") cfg.train.optimizer.weight_decay = as_f64();
    else if (key == "grad_clip") cfg.train.optimizer.grad_clip = as_f64();
    else if (key == "val_fraction") cfg.val_fraction = as_f64();
    else throw ConfigError("config: unknown key '" + key + "'");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("config: bad value '" + value + "' for key '" + key + "'");
  }
}

void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: expected key=value at " + path + ":" + std::to_string(line_no));
    }
    auto trim = [](std::string s) {
      const size_t a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const size_t b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    apply_config_kv(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> corpus_paths;
  std::string out;
  std::string ckpt;
  std::string write_cache;
};

Corpus load_any_corpus(const CommonArgs& args, const RunConfig& cfg) {
  if (args.corpus_paths.empty()) throw ConfigError("no --corpus given");
  if (args.corpus_paths.size() == 1 && args.corpus_paths[0].size() > 5 &&
      args.corpus_paths[0].substr(args.corpus_paths[0].size() - 5) == ".corp") {
    return load_corpus_cache(args.corpus_paths[0]);
  }
  Corpus c = load_corpus(args.corpus_paths, cfg.val_fraction, cfg.train.seed);
  if (!args.write_cache.empty()) {
    save_corpus_cache(c, args.write_cache);
    std::cout << "wrote corpus cache to " << args.write_cache << "\n";
  }
  return c;
}

void print_eval_line(const char* tag, const EvalReport& rep) {
  std::printf("%-18s loss %.6f nats  ppl %8.3f  (%lld tokens, %s)\n", tag, rep.mean_loss,
              rep.perplexity, static_cast<long long>(rep.token_count), rep.dataset.c_str());
}

template <typename T>
int run_pretrain(const RunConfig& cfg, const CommonArgs& args) {
  Corpus corpus = load_any_corpus(args, cfg);
  std::cout << "corpus: " << corpus.tokens.size() << " tokens, " << corpus.n_docs()
            << " documents (" << corpus.n_train_docs << " train)\n";
  Gpt<T> model = init<T>(cfg.model, cfg.train.seed);
  TrainResult<T> res = train_loop(model, corpus, RemovalSchedule{}, cfg.train, nullptr, args.out);
  std::printf("pretrain done: best val %.6f at step %lld, final val %.6f\n", res.best_val,
              static_cast<long long>(res.best_step), res.final_val);
  std::cout << "checkpoints and metrics.csv in " << args.out << "\n";
  return 0;
}

template <typename T>
int run_collect_sigma(const RunConfig& cfg, const CommonArgs& args, int64_t n_prompts,
                      int64_t window) {
  Gpt<T> model = load_checkpoint<T>(args.ckpt);
  Corpus corpus = load_any_corpus(args, cfg);
  if (window <= 0) window = model.config.context_length;
  auto prompts = prompt_windows(corpus, Split::train, n_prompts, window);
  SigmaStats stats = collect_sigma(model, prompts, kEotToken);
  const size_t expected = enumerate_sites(model).size();
  if (stats.records.size() != expected) {
    throw StateError("collect-sigma: expected " + std::to_string(expected) + " site rows, got " +
                     std::to_string(stats.records.size()));
  }
  save_sigma_stats(stats, args.out);
  std::cout << "collected sigma over " << prompts.size() << " prompts of " << window
            << " tokens; " << stats.records.size() << " site rows -> " << args.out << "\n";
  return 0;
}

template <typename T>
int run_remove_ln(RunConfig cfg, const CommonArgs& args, const std::string& schedule_path,
                  const std::string& stats_path, double scale, bool steps_set) {
  Gpt<T> model = load_checkpoint<T>(args.ckpt);
  Corpus corpus = load_any_corpus(args, cfg);
  split_all_ln1(model);

  RemovalSchedule schedule = load_schedule_file(schedule_path);
  schedule = adapt_schedule_depth(schedule, model.config.n_layers);
  if (scale != 1.0) schedule = scale_schedule(schedule, scale);
  const int64_t last = schedule_last_step(schedule);

  if (!steps_set) {
    // Leave room to recover after the last event.
    cfg.train.total_steps = last + 1 + std::max<int64_t>(20, last / 10);
    std::cout << "running " << cfg.train.total_steps << " steps (last event at step " << last
              << ")\n";
  } else if (cfg.train.total_steps <= last) {
    throw ConfigError("remove-ln: --steps must exceed the last schedule step " +
                      std::to_string(last));
  }

  const bool needs_stats = std::any_of(
      schedule.events.begin(), schedule.events.end(), [](const RemovalEvent& e) {
        return e.action.kind == RemovalActionKind::FreezeMain ||
               e.action.kind == RemovalActionKind::SetInterpolation;
      });
  SigmaStats stats;
  if (!stats_path.empty()) stats = load_sigma_stats(stats_path);
  else if (needs_stats && !cfg.train.recollect_sigma) {
    throw ConfigError("remove-ln: provide --stats or --recollect");
  }

  const EvalReport base_eval = evaluate(model, corpus, Split::val, cfg.train.eval_tokens);
  TrainResult<T> res = train_loop(model, corpus, schedule, cfg.train,
                                  stats_path.empty() ? nullptr : &stats, args.out);

  const EvalReport final_eval = evaluate(model, corpus, Split::val, cfg.train.eval_tokens);
  std::cout << "\nschedule " << schedule.name << " x" << scale << ", " << schedule.events.size()
            << " events\n";
  print_eval_line("baseline", base_eval);
  if (schedule.events.empty()) {
    // A scheduleless run is the vanilla fine-tune control arm; there is
    // nothing frozen to fold.
    print_eval_line("final (vanilla)", final_eval);
    std::printf("best val during run %.6f at step %lld; no events, skipping export\n",
                res.best_val, static_cast<long long>(res.best_step));
    return 0;
  }

  Gpt<T> exported = fold_and_export(model);
  save_checkpoint(exported, args.out + "/lnfree.ckpt");
  const EvalReport lnfree_eval = evaluate(exported, corpus, Split::val, cfg.train.eval_tokens);
  print_eval_line("final (frozen)", final_eval);
  print_eval_line("exported (no-LN)", lnfree_eval);
  std::printf("export delta: %.2e nats; best val during run %.6f at step %lld\n",
              std::abs(lnfree_eval.mean_loss - final_eval.mean_loss), res.best_val,
              static_cast<long long>(res.best_step));
  std::cout << "wrote " << args.out << "/lnfree.ckpt\n";
  return 0;
}

template <typename T>
int run_eval(const RunConfig& cfg, const CommonArgs& args, const std::string& split_name,
             int64_t max_tokens) {
  Gpt<T> model = load_checkpoint<T>(args.ckpt);
  Corpus corpus = load_any_corpus(args, cfg);
  const Split split = split_name == "train" ? Split::train : Split::val;
  model.trace.reset();
  EvalReport rep = evaluate(model, corpus, split, max_tokens);
  print_eval_line("eval", rep);
  std::printf("norm ops executed: %llu site evals, %llu per-token sigma computations\n",
              static_cast<unsigned long long>(model.trace.norm_site_evals),
              static_cast<unsigned long long>(model.trace.sigma_token_evals));
  std::printf("EVAL dataset=%s loss=%.9g ppl=%.9g tokens=%lld sigma_evals=%llu\n",
              rep.dataset.c_str(), rep.mean_loss, rep.perplexity,
              static_cast<long long>(rep.token_count),
              static_cast<unsigned long long>(model.trace.sigma_token_evals));
  return 0;
}

template <typename T>
int run_generate(const RunConfig& cfg, const CommonArgs& args, const std::string& prompt,
                 int64_t n_tokens, double temperature, int64_t top_k, bool greedy) {
  (void)cfg;
  Gpt<T> model = load_checkpoint<T>(args.ckpt);
  std::vector<uint8_t> prompt_bytes(prompt.begin(), prompt.end());
  auto bytes = generate(model, prompt_bytes, n_tokens, greedy ? 0.0 : temperature, top_k,
                        cfg.train.seed);
  std::cout << prompt << std::string(bytes.begin(), bytes.end()) << "\n";
  return 0;
}

template <typename T>
int run_export(const CommonArgs& args) {
  Gpt<T> model = load_checkpoint<T>(args.ckpt);
  Gpt<T> exported = fold_and_export(model);
  save_checkpoint(exported, args.out);

  // Self-check: exported logits against the frozen model on random windows.
  std::mt19937_64 rng(0);
  std::uniform_int_distribution<int32_t> tok(0, static_cast<int32_t>(model.config.vocab_size - 1));
  double worst = 0.0;
  NoGradGuard ng;
  for (int trial = 0; trial < 8; ++trial) {
    const int64_t len = std::min<int64_t>(model.config.context_length, 64);
    std::vector<int32_t> toks(static_cast<size_t>(len));
    for (auto& t : toks) t = tok(rng);
    TokenFlags flags = flags_for_tokens(toks, 1, len, kEotToken);
    auto a = forward(model, toks, 1, len, flags);
    auto b = forward(exported, toks, 1, len, flags);
    for (int64_t i = 0; i < a.numel(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>((*a.data)[i]) -
                                       static_cast<double>((*b.data)[i])));
    }
  }
  std::printf("exported %s; max |logit delta| on random windows: %.3e\n", args.out.c_str(), worst);
  return 0;
}

int run_curves(const std::string& run_dir, const std::string& out_path) {
  auto rows = load_metrics_csv(run_dir + "/metrics.csv");
  std::ostringstream out;
  out << "step,train_loss,train_loss_ma10,val_loss,lr,events\n";
  double last_val = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> window;
  int64_t prev_step = -1;
  size_t emitted = 0;
  for (const auto& rec : rows) {
    if (rec.step == prev_step) continue;  // one row per unique step
    prev_step = rec.step;
    window.push_back(rec.train_loss);
    if (window.size() > 10) window.erase(window.begin());
    double ma = 0.0;
    for (double v : window) ma += v;
    ma /= static_cast<double>(window.size());
    if (!std::isnan(rec.val_loss)) last_val = rec.val_loss;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,", static_cast<long long>(rec.step),
                  rec.train_loss, ma);
    out << buf;
    if (!std::isnan(last_val)) {
      std::snprintf(buf, sizeof(buf), "%.9g", last_val);
      out << buf;
    }
    std::snprintf(buf, sizeof(buf), ",%.9g,", rec.lr);
    out << buf;
    for (size_t i = 0; i < rec.events.size(); ++i) out << (i ? ";" : "") << rec.events[i];
    out << "\n";
    ++emitted;
  }
  if (out_path.empty()) {
    std::cout << out.str();
  } else {
    std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + out_path);
    f << out.str();
    std::cerr << "wrote " << emitted << " rows to " << out_path << "\n";
  }
  return 0;
}

bool use_f64() {
  const char* p = std::getenv("LNABL_PRECISION");
  if (p == nullptr || std::string(p) == "f32" || std::string(p).empty()) return false;
  if (std::string(p) == "f64") return true;
  throw ConfigError("LNABL_PRECISION must be f32 or f64");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LayerNorm removal workbench: pretrain, freeze on a schedule, fold, export"};
  app.require_subcommand(1);

  RunConfig cfg;
  CommonArgs args;

  // The config file loads before flag parsing so flags win over file values.
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) args.config_path = argv[i + 1];
    else if (a.rfind("--config=", 0) == 0) args.config_path = a.substr(9);
  }

  auto add_common = [&](CLI::App* cmd, bool corpus, bool ckpt, bool out) {
    cmd->add_option("--config", args.config_path, "flat key=value config file");
    cmd->add_option("--seed", cfg.train.seed, "run seed");
    if (corpus) cmd->add_option("--corpus", args.corpus_paths, "text files or one .corp cache");
    if (ckpt) cmd->add_option("--ckpt", args.ckpt, "input checkpoint")->required();
    if (out) cmd->add_option("--out", args.out, "output path")->required();
  };

  auto* pre = app.add_subcommand("pretrain", "train a baseline model with standard LN");
  add_common(pre, true, false, true);
  pre->add_option("--steps", cfg.train.total_steps, "optimizer steps");
  pre->add_option("--write-cache", args.write_cache, "also write a corpus cache file");

  auto* col = app.add_subcommand("collect-sigma", "record per-site average sigma constants");
  add_common(col, true, true, true);
  int64_t n_prompts = 16;
  int64_t sigma_window = 0;
  col->add_option("--n-prompts", n_prompts, "prompts to average over (default 16)");
  col->add_option("--window", sigma_window, "prompt window length (default: context length)");

  auto* rem = app.add_subcommand("remove-ln", "fine-tune through a removal schedule and export");
  add_common(rem, true, true, true);
  std::string schedule_path, stats_path;
  double scale = 1.0;
  auto* steps_opt = rem->add_option("--steps", cfg.train.total_steps, "optimizer steps");
  rem->add_option("--schedule", schedule_path, "removal schedule .tsv")->required();
  rem->add_option("--stats", stats_path, "sigma stats file from collect-sigma");
  rem->add_option("--scale", scale, "uniform step rescaling factor");
  rem->add_flag("--recollect", cfg.train.recollect_sigma,
                "recollect sigma right before each freeze");

  auto* eva = app.add_subcommand("eval", "cross-entropy of a checkpoint on a corpus split");
  add_common(eva, true, true, false);
  std::string split_name = "val";
  int64_t max_tokens = 16384;
  eva->add_option("--split", split_name, "train or val")
      ->check(CLI::IsMember({"train", "val"}));
  eva->add_option("--max-tokens", max_tokens, "evaluation token budget");

  auto* gen = app.add_subcommand("generate", "sample text from a checkpoint");
  add_common(gen, false, true, false);
  std::string prompt;
  int64_t n_tokens = 200, top_k = 40;
  double temperature = 0.8;
  bool greedy = false;
  gen->add_option("--prompt", prompt, "prompt text");
  gen->add_option("--n-tokens", n_tokens, "max bytes to generate");
  gen->add_option("--temperature", temperature, "softmax temperature (0 = greedy)");
  gen->add_option("--top-k", top_k, "restrict sampling to the k best (0 = all)");
  gen->add_flag("--greedy", greedy, "argmax decoding");

  auto* exp = app.add_subcommand("export", "fold a fully frozen checkpoint into a no-LN model");
  add_common(exp, false, true, true);

  auto* cur = app.add_subcommand("curves", "re-emit metrics.csv resampled for plotting");
  std::string run_dir, curves_out;
  cur->add_option("--run", run_dir, "run directory containing metrics.csv")->required();
  cur->add_option("--out", curves_out, "output csv (default: stdout)");

  try {
    if (!args.config_path.empty()) load_config_file(cfg, args.config_path);
    // Removal fine-tunes default to a constant learning rate unless the
    // config or flags picked a schedule.
    app.parse(argc, argv);
    if (rem->parsed() && !cfg.lr_kind_set) {
      cfg.train.lr.kind = LRScheduleConfig::Kind::Constant;
    }

    const bool f64 = use_f64();
    auto dispatch = [&]<typename T>() -> int {
      if (pre->parsed()) return run_pretrain<T>(cfg, args);
      if (col->parsed()) return run_collect_sigma<T>(cfg, args, n_prompts, sigma_window);
      if (rem->parsed())
        return run_remove_ln<T>(cfg, args, schedule_path, stats_path, scale,
                                steps_opt->count() > 0);
      if (eva->parsed()) return run_eval<T>(cfg, args, split_name, max_tokens);
      if (gen->parsed()) return run_generate<T>(cfg, args, prompt, n_tokens, temperature, top_k, greedy);
      if (exp->parsed()) return run_export<T>(args);
      if (cur->parsed()) return run_curves(run_dir, curves_out);
      return 2;
    };
    return f64 ? dispatch.template operator()<double>() : dispatch.template operator()<float>();
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
