#include "lnablate/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace lnablate {

namespace {

constexpr char kCorpusMagic[8] = {'C', 'O', 'R', 'P', '0', '0', '0', '1'};
constexpr uint32_t kCorpusVersion = 1;

uint64_t fnv1a(const void* data, size_t len, uint64_t h = 14695981039346656037ULL) {
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

uint64_t Corpus::digest() const {
  uint64_t h = fnv1a(tokens.data(), tokens.size() * sizeof(uint16_t));
  h = fnv1a(doc_ends.data(), doc_ends.size() * sizeof(uint64_t), h);
  h = fnv1a(&n_train_docs, sizeof(n_train_docs), h);
  return h;
}

std::vector<uint16_t> tokenize_bytes(const std::vector<uint8_t>& bytes) {
  std::vector<uint16_t> out(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) out[i] = bytes[i];
  return out;
}

std::vector<uint8_t> detokenize_bytes(const std::vector<uint16_t>& tokens) {
  std::vector<uint8_t> out;
  out.reserve(tokens.size());
  for (uint16_t t : tokens) {
    if (t < 256) out.push_back(static_cast<uint8_t>(t));
  }
  return out;
}

std::vector<std::vector<uint8_t>> split_documents(const std::vector<uint8_t>& bytes) {
  std::vector<std::vector<uint8_t>> docs;
  size_t start = 0;
  size_t i = 0;
  while (i < bytes.size()) {
    if (bytes[i] == '\n') {
      size_t run = i;
      while (run < bytes.size() && bytes[run] == '\n') ++run;
      if (run - i >= 2) {
        docs.emplace_back(bytes.begin() + static_cast<long>(start),
                          bytes.begin() + static_cast<long>(run));
        start = run;
      }
      i = run;
    } else {
      ++i;
    }
  }
  if (start < bytes.size()) {
    docs.emplace_back(bytes.begin() + static_cast<long>(start), bytes.end());
  }
  return docs;
}

Corpus corpus_from_documents(std::vector<std::vector<uint8_t>> docs, double val_fraction,
                             uint64_t seed) {
  if (!(val_fraction > 0.0) || !(val_fraction < 1.0)) {
    throw ConfigError("corpus: val_fraction must be in (0,1)");
  }
  if (docs.empty()) throw ConfigError("corpus: no documents");
  if (docs.size() < 2) {
    throw ConfigError("corpus: need at least 2 documents for a document-aligned split");
  }

  std::vector<size_t> order(docs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto n_docs = static_cast<int64_t>(docs.size());
  int64_t n_val = std::llround(static_cast<double>(n_docs) * val_fraction);
  n_val = std::clamp<int64_t>(n_val, 1, n_docs - 1);

  Corpus c;
  c.n_train_docs = static_cast<uint64_t>(n_docs - n_val);
  for (size_t oi : order) {
    for (uint8_t b : docs[oi]) c.tokens.push_back(static_cast<uint16_t>(b));
    c.tokens.push_back(static_cast<uint16_t>(kEotToken));
    c.doc_ends.push_back(c.tokens.size());
  }
  return c;
}

Corpus load_corpus(const std::vector<std::string>& paths, double val_fraction, uint64_t seed) {
  if (paths.empty()) throw ConfigError("corpus: no input paths");
  std::vector<std::vector<uint8_t>> docs;
  std::vector<uint64_t> digests;
  for (const std::string& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    digests.push_back(fnv1a(bytes.data(), bytes.size()));
    for (auto& d : split_documents(bytes)) docs.push_back(std::move(d));
  }
  if (docs.empty()) throw ConfigError("corpus: inputs contain no text");
  Corpus c = corpus_from_documents(std::move(docs), val_fraction, seed);
  c.source_digests = std::move(digests);
  return c;
}

void save_corpus_cache(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open corpus cache for write: " + path);
  out.write(kCorpusMagic, sizeof(kCorpusMagic));
  const uint32_t version = kCorpusVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const uint64_t token_count = corpus.tokens.size();
  out.write(reinterpret_cast<const char*>(&token_count), sizeof(token_count));
  const uint64_t n_docs = corpus.doc_ends.size();
  out.write(reinterpret_cast<const char*>(&n_docs), sizeof(n_docs));
  out.write(reinterpret_cast<const char*>(corpus.doc_ends.data()),
            static_cast<std::streamsize>(n_docs * sizeof(uint64_t)));
  out.write(reinterpret_cast<const char*>(&corpus.n_train_docs), sizeof(corpus.n_train_docs));
  const uint64_t n_digests = corpus.source_digests.size();
  out.write(reinterpret_cast<const char*>(&n_digests), sizeof(n_digests));
  out.write(reinterpret_cast<const char*>(corpus.source_digests.data()),
            static_cast<std::streamsize>(n_digests * sizeof(uint64_t)));
  out.write(reinterpret_cast<const char*>(corpus.tokens.data()),
            static_cast<std::streamsize>(token_count * sizeof(uint16_t)));
  if (!out) throw IoError("corpus cache write failed: " + path);
}

Corpus load_corpus_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus cache: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  size_t off = 0;
  auto need = [&](size_t n, const char* what) {
    if (off + n > bytes.size()) {
      throw FormatError(std::string("corpus cache: truncated reading ") + what + " at offset " +
                        std::to_string(off));
    }
  };
  need(sizeof(kCorpusMagic), "magic");
  if (std::memcmp(bytes.data(), kCorpusMagic, sizeof(kCorpusMagic)) != 0) {
    throw FormatError("corpus cache: bad magic at offset 0");
  }
  off += sizeof(kCorpusMagic);
  uint32_t version = 0;
  need(sizeof(version), "version");
  std::memcpy(&version, bytes.data() + off, sizeof(version));
  off += sizeof(version);
  if (version != kCorpusVersion) {
    throw FormatError("corpus cache: unsupported version " + std::to_string(version));
  }
  auto read_u64 = [&](const char* what) {
    need(sizeof(uint64_t), what);
    uint64_t v = 0;
    std::memcpy(&v, bytes.data() + off, sizeof(v));
    off += sizeof(v);
    return v;
  };
  Corpus c;
  const uint64_t token_count = read_u64("token count");
  const uint64_t n_docs = read_u64("doc count");
  c.doc_ends.resize(n_docs);
  need(n_docs * sizeof(uint64_t), "doc index");
  std::memcpy(c.doc_ends.data(), bytes.data() + off, n_docs * sizeof(uint64_t));
  off += n_docs * sizeof(uint64_t);
  c.n_train_docs = read_u64("split point");
  const uint64_t n_digests = read_u64("digest count");
  c.source_digests.resize(n_digests);
  need(n_digests * sizeof(uint64_t), "digests");
  std::memcpy(c.source_digests.data(), bytes.data() + off, n_digests * sizeof(uint64_t));
  off += n_digests * sizeof(uint64_t);
  c.tokens.resize(token_count);
  need(token_count * sizeof(uint16_t), "token payload");
  std::memcpy(c.tokens.data(), bytes.data() + off, token_count * sizeof(uint16_t));
  off += token_count * sizeof(uint16_t);
  if (off != bytes.size()) {
    throw FormatError("corpus cache: trailing bytes at offset " + std::to_string(off));
  }

  uint64_t prev = 0;
  for (uint64_t e : c.doc_ends) {
    if (e <= prev || e > token_count) throw FormatError("corpus cache: invalid document index");
    prev = e;
  }
  if (!c.doc_ends.empty() && c.doc_ends.back() != token_count) {
    throw FormatError("corpus cache: document index does not cover payload");
  }
  if (c.n_train_docs > n_docs) throw FormatError("corpus cache: invalid split point");
  for (uint16_t t : c.tokens) {
    if (t >= kByteVocab) throw FormatError("corpus cache: token id out of range");
  }
  return c;
}

std::vector<int32_t> split_stream(const Corpus& corpus, Split split) {
  const uint64_t begin = split == Split::train ? 0 : corpus.split_offset();
  const uint64_t end = split == Split::train ? corpus.split_offset() : corpus.tokens.size();
  std::vector<int32_t> out;
  out.reserve(end - begin + 1);
  out.push_back(kEotToken);
  for (uint64_t i = begin; i < end; ++i) out.push_back(corpus.tokens[i]);
  return out;
}

namespace {

void rebuild_stream(BatchSampler& s) {
  s.stream.clear();
  size_t total = 1;
  for (const auto& d : s.docs) total += d.size();
  s.stream.reserve(total);
  s.stream.push_back(kEotToken);
  for (size_t oi : s.order) {
    s.stream.insert(s.stream.end(), s.docs[oi].begin(), s.docs[oi].end());
  }
}

}  // namespace

BatchSampler make_sampler(const Corpus& corpus, Split split, uint64_t seed, int64_t micro_batch,
                          int64_t seq_len) {
  if (micro_batch <= 0 || seq_len <= 0) throw ConfigError("sampler: batch and seq_len must be positive");
  BatchSampler s;
  s.micro_batch = micro_batch;
  s.seq_len = seq_len;
  s.split = split;
  s.rng.seed(seed);
  const uint64_t lo = split == Split::train ? 0 : corpus.split_offset();
  const uint64_t hi = split == Split::train ? corpus.split_offset() : corpus.tokens.size();
  uint64_t begin = lo;
  for (uint64_t e : corpus.doc_ends) {
    if (e <= lo || e > hi) continue;
    std::vector<int32_t> doc;
    doc.reserve(e - begin);
    for (uint64_t i = begin; i < e; ++i) doc.push_back(corpus.tokens[i]);
    s.docs.push_back(std::move(doc));
    begin = e;
  }
  if (s.docs.empty()) throw ConfigError("sampler: split has no documents");
  s.order.resize(s.docs.size());
  for (size_t i = 0; i < s.order.size(); ++i) s.order[i] = i;
  rebuild_stream(s);
  return s;
}

Batch next_batch(BatchSampler& s) {
  const int64_t window = s.micro_batch * s.seq_len;
  if (s.cursor + static_cast<size_t>(window) + 1 > s.stream.size()) {
    // Wrap: drop the partial tail, reshuffle documents, restart.
    std::shuffle(s.order.begin(), s.order.end(), s.rng);
    rebuild_stream(s);
    s.cursor = 0;
    s.epoch += 1;
  }
  Batch b;
  b.batch = s.micro_batch;
  b.seq_len = s.seq_len;
  b.tokens.resize(static_cast<size_t>(window));
  b.targets.resize(static_cast<size_t>(window));
  const size_t n = s.stream.size();
  for (int64_t i = 0; i < window; ++i) {
    const size_t idx = s.cursor + static_cast<size_t>(i);
    b.tokens[static_cast<size_t>(i)] = s.stream[idx % n];
    b.targets[static_cast<size_t>(i)] = s.stream[(idx + 1) % n];
  }
  s.cursor += static_cast<size_t>(window);
  b.flags = flags_for_tokens(b.tokens, b.batch, b.seq_len, kEotToken);
  return b;
}

std::vector<std::vector<int32_t>> prompt_windows(const Corpus& corpus, Split split, int64_t count,
                                                 int64_t seq_len) {
  if (count < 1) throw ConfigError("prompt_windows: count must be >= 1");
  std::vector<int32_t> stream = split_stream(corpus, split);
  std::vector<std::vector<int32_t>> out;
  for (int64_t w = 0; w < count; ++w) {
    const size_t base = static_cast<size_t>(w * seq_len);
    if (base + static_cast<size_t>(seq_len) > stream.size()) break;
    out.emplace_back(stream.begin() + static_cast<long>(base),
                     stream.begin() + static_cast<long>(base + seq_len));
  }
  if (out.empty()) {
    // Tiny split: fall back to one window of whatever is available.
    out.emplace_back(stream.begin(),
                     stream.begin() + static_cast<long>(std::min<size_t>(stream.size(),
                                                                         static_cast<size_t>(seq_len))));
  }
  return out;
}

}  // namespace lnablate
