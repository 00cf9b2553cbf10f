#pragma once

// Byte-level corpus handling: ids 0-255 are raw bytes, 256 is the EOT
// separator terminating every document. Streams fed to the model get one
// extra EOT prepended so position-0 handling is exercised from the start.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lnablate/model.hpp"

namespace lnablate {

inline constexpr int32_t kEotToken = 256;
inline constexpr int64_t kByteVocab = 257;

enum class Split { train, val };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "val"; }

struct Corpus {
  std::vector<uint16_t> tokens;    // shuffled documents, each EOT-terminated
  std::vector<uint64_t> doc_ends;  // exclusive end offsets, ascending
  uint64_t n_train_docs = 0;
  std::vector<uint64_t> source_digests;  // FNV-1a of each input file

  size_t n_docs() const { return doc_ends.size(); }
  uint64_t split_offset() const {
    return n_train_docs == 0 ? 0 : doc_ends[static_cast<size_t>(n_train_docs - 1)];
  }
  uint64_t digest() const;
};

// Byte-level identity tokenizer.
std::vector<uint16_t> tokenize_bytes(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> detokenize_bytes(const std::vector<uint16_t>& tokens);  // skips EOT

// Splits raw text into documents on blank-line boundaries (runs of two or
// more newlines end a document, separator bytes staying with it).
std::vector<std::vector<uint8_t>> split_documents(const std::vector<uint8_t>& bytes);

Corpus corpus_from_documents(std::vector<std::vector<uint8_t>> docs, double val_fraction,
                             uint64_t seed);
Corpus load_corpus(const std::vector<std::string>& paths, double val_fraction, uint64_t seed);

// Cache container: magic "CORP0001", u32 version, u64 token count, document
// index (doc ends, split point, source digests), u16 payload, little-endian.
void save_corpus_cache(const Corpus& corpus, const std::string& path);
Corpus load_corpus_cache(const std::string& path);

// EOT-prefixed token stream of one split, documents in corpus order.
std::vector<int32_t> split_stream(const Corpus& corpus, Split split);

struct Batch {
  std::vector<int32_t> tokens;   // [B*T]
  std::vector<int32_t> targets;  // [B*T], inputs shifted by one
  TokenFlags flags;
  int64_t batch = 0;
  int64_t seq_len = 0;
};

// Deterministic contiguous-window sampler. A full pass serves every stream
// token once as input; the partial tail before a wrap is skipped and the
// documents are reshuffled.
struct BatchSampler {
  int64_t micro_batch = 0;
  int64_t seq_len = 0;
  Split split = Split::train;
  std::mt19937_64 rng;
  std::vector<std::vector<int32_t>> docs;  // split documents, EOT-terminated
  std::vector<size_t> order;
  std::vector<int32_t> stream;  // EOT + docs in `order`
  size_t cursor = 0;
  int64_t epoch = 0;
};

BatchSampler make_sampler(const Corpus& corpus, Split split, uint64_t seed, int64_t micro_batch,
                          int64_t seq_len);
Batch next_batch(BatchSampler& sampler);

struct EvalReport {
  std::string dataset;
  double mean_loss = 0.0;  // nats per token
  int64_t token_count = 0;
  double perplexity = 0.0;
};

// Mean next-token cross-entropy over a deterministic prefix of the split.
template <typename T>
EvalReport evaluate(Gpt<T>& m, const Corpus& corpus, Split split, int64_t max_tokens) {
  const int64_t seq = m.config.context_length;
  if (max_tokens < seq) throw ConfigError("evaluate: max_tokens must be at least one window");
  std::vector<int32_t> stream = split_stream(corpus, split);
  const int64_t usable = static_cast<int64_t>(stream.size()) - 1;
  int64_t n_windows = usable / seq;
  n_windows = std::min(n_windows, (max_tokens + seq - 1) / seq);
  if (n_windows <= 0) {
    throw ConfigError("evaluate: split '" + std::string(to_string(split)) + "' is too small");
  }

  NoGradGuard ng;
  constexpr int64_t kEvalBatch = 8;
  double total = 0.0;
  int64_t counted = 0;
  for (int64_t w = 0; w < n_windows;) {
    const int64_t b = std::min<int64_t>(kEvalBatch, n_windows - w);
    std::vector<int32_t> tokens(static_cast<size_t>(b * seq));
    std::vector<int32_t> targets(static_cast<size_t>(b * seq));
    for (int64_t i = 0; i < b; ++i) {
      const int64_t base = (w + i) * seq;
      for (int64_t t = 0; t < seq; ++t) {
        tokens[static_cast<size_t>(i * seq + t)] = stream[static_cast<size_t>(base + t)];
        targets[static_cast<size_t>(i * seq + t)] = stream[static_cast<size_t>(base + t + 1)];
      }
    }
    TokenFlags flags = flags_for_tokens(tokens, b, seq, kEotToken);
    Tensor<T> l = loss(m, tokens, targets, b, seq, flags);
    total += static_cast<double>(l.item()) * static_cast<double>(b * seq);
    counted += b * seq;
    w += b;
  }
  EvalReport rep;
  rep.dataset = to_string(split);
  rep.mean_loss = total / static_cast<double>(counted);
  rep.token_count = counted;
  rep.perplexity = std::exp(rep.mean_loss);
  return rep;
}

// First n non-overlapping windows of the split, for sigma collection.
std::vector<std::vector<int32_t>> prompt_windows(const Corpus& corpus, Split split, int64_t count,
                                                 int64_t seq_len);

// Autoregressive byte sampling. temperature 0 or top_k 1 means greedy;
// sampling is an explicit 53-bit-uniform CDF draw so runs are reproducible.
// Prompts longer than the context are truncated from the left. Generation
// stops early when EOT is sampled.
template <typename T>
std::vector<uint8_t> generate(Gpt<T>& m, const std::vector<uint8_t>& prompt, int64_t n_tokens,
                              double temperature, int64_t top_k, uint64_t seed) {
  if (n_tokens < 1) throw ConfigError("generate: n_tokens must be >= 1");
  if (temperature < 0.0) throw ConfigError("generate: temperature must be >= 0");
  const int64_t t_max = m.config.context_length;
  const int64_t vocab = m.config.vocab_size;
  const bool greedy = temperature == 0.0 || top_k == 1;

  std::vector<int32_t> ctx;
  ctx.push_back(kEotToken < vocab ? kEotToken : 0);
  for (uint8_t b : prompt) ctx.push_back(static_cast<int32_t>(b));
  if (static_cast<int64_t>(ctx.size()) > t_max) {
    ctx.erase(ctx.begin(), ctx.end() - t_max);
  }

  NoGradGuard ng;
  std::mt19937_64 rng(seed);
  std::vector<uint8_t> out;
  for (int64_t i = 0; i < n_tokens; ++i) {
    const int64_t seq = static_cast<int64_t>(ctx.size());
    TokenFlags flags = flags_for_tokens(ctx, 1, seq, kEotToken);
    Tensor<T> logits = forward(m, ctx, 1, seq, flags);
    const T* row = logits.ptr() + (seq - 1) * vocab;

    int32_t picked = 0;
    if (greedy) {
      for (int64_t v = 1; v < vocab; ++v) {
        if (row[v] > row[picked]) picked = static_cast<int32_t>(v);
      }
    } else {
      std::vector<std::pair<double, int32_t>> scored(static_cast<size_t>(vocab));
      for (int64_t v = 0; v < vocab; ++v) {
        scored[static_cast<size_t>(v)] = {static_cast<double>(row[v]) / temperature,
                                          static_cast<int32_t>(v)};
      }
      int64_t k = top_k > 0 ? std::min<int64_t>(top_k, vocab) : vocab;
      std::partial_sort(scored.begin(), scored.begin() + k, scored.end(),
                        [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                        });
      double mx = scored[0].first;
      double denom = 0.0;
      for (int64_t v = 0; v < k; ++v) denom += std::exp(scored[static_cast<size_t>(v)].first - mx);
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * denom;
      double acc = 0.0;
      picked = scored[static_cast<size_t>(k - 1)].second;
      for (int64_t v = 0; v < k; ++v) {
        acc += std::exp(scored[static_cast<size_t>(v)].first - mx);
        if (u < acc) {
          picked = scored[static_cast<size_t>(v)].second;
          break;
        }
      }
    }

    if (picked == kEotToken) break;
    if (picked >= 0 && picked < 256) out.push_back(static_cast<uint8_t>(picked));
    ctx.push_back(picked);
    if (static_cast<int64_t>(ctx.size()) > t_max) ctx.erase(ctx.begin());
  }
  return out;
}

}  // namespace lnablate
