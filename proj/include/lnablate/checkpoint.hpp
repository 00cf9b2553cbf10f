#pragma once

// Checkpoint container: magic "GPT2NLN1", u32 version, u64 header length,
// UTF-8 JSON header (config, per-site norm states, split flags, tensor
// index), then raw little-endian tensor payloads in index order. Save and
// re-save of an unchanged model is byte-identical.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lnablate/model.hpp"
#include "lnablate/surgery.hpp"

namespace lnablate {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in native little-endian order");

inline constexpr char kCheckpointMagic[8] = {'G', 'P', 'T', '2', 'N', 'L', 'N', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) {
    return "f32";
  } else {
    return "f64";
  }
}

inline NormMode parse_mode(const std::string& s) {
  if (s == "standard") return NormMode::Standard;
  if (s == "interpolating") return NormMode::Interpolating;
  if (s == "frozen") return NormMode::Frozen;
  if (s == "folded") return NormMode::Folded;
  throw FormatError("checkpoint: unknown norm mode '" + s + "'");
}

template <typename T>
nlohmann::json norm_state_json(const NormSiteId& id, const NormState<T>& st) {
  return nlohmann::json{{"site", to_string(id)},
                        {"mode", to_string(st.mode)},
                        {"sigma_bar", st.sigma_bar},
                        {"sigma0_bar", st.sigma0_bar},
                        {"interp_w", st.interp_w},
                        {"special_bos", st.special_bos_active},
                        {"special_eot", st.special_eot_active},
                        {"center_mean", st.center_mean}};
}

}  // namespace detail

template <typename T>
void save_checkpoint(Gpt<T>& model, const std::string& path) {
  nlohmann::json header;
  header["config"] = {{"n_layers", model.config.n_layers},
                      {"n_heads", model.config.n_heads},
                      {"d_model", model.config.d_model},
                      {"d_ff", model.config.d_ff},
                      {"vocab_size", model.config.vocab_size},
                      {"context_length", model.config.context_length},
                      {"tie_embeddings", model.config.tie_embeddings}};
  nlohmann::json splits = nlohmann::json::array();
  for (const Block<T>& bl : model.blocks) splits.push_back(bl.ln1_split);
  header["blocks_split"] = splits;

  nlohmann::json states = nlohmann::json::array();
  for (const NormSiteId& id : enumerate_sites(model)) {
    states.push_back(detail::norm_state_json(id, *find_site(model, id)));
  }
  header["norm_states"] = states;

  auto params = named_params(model);
  nlohmann::json index = nlohmann::json::array();
  uint64_t offset = 0;
  for (const NamedParam<T>& p : params) {
    index.push_back(nlohmann::json::array(
        {p.name, detail::dtype_name<T>(), p.tensor->shape, offset}));
    offset += static_cast<uint64_t>(p.tensor->numel()) * sizeof(T);
  }
  header["tensors"] = index;

  const std::string header_text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for write: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const NamedParam<T>& p : params) {
    out.write(reinterpret_cast<const char*>(p.tensor->ptr()),
              static_cast<std::streamsize>(p.tensor->numel() * sizeof(T)));
  }
  if (!out) throw IoError("checkpoint write failed: " + path);
}

template <typename T>
Gpt<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < sizeof(kCheckpointMagic) + sizeof(uint32_t) + sizeof(uint64_t)) {
    throw FormatError("checkpoint: truncated before header (size " + std::to_string(bytes.size()) + ")");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("checkpoint: bad magic at offset 0");
  }
  uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 8, sizeof(version));
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " at offset 8");
  }
  uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 12, sizeof(header_len));
  const uint64_t payload_start = 20 + header_len;
  if (payload_start > bytes.size()) {
    throw FormatError("checkpoint: header length " + std::to_string(header_len) +
                      " overruns file at offset 12");
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + static_cast<long>(payload_start));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header parse failed: ") + e.what());
  }

  ModelConfig config;
  std::vector<bool> splits;
  bool has_unembed_bias = false;
  try {
    const auto& c = header.at("config");
    config.n_layers = c.at("n_layers").get<int64_t>();
    config.n_heads = c.at("n_heads").get<int64_t>();
    config.d_model = c.at("d_model").get<int64_t>();
    config.d_ff = c.at("d_ff").get<int64_t>();
    config.vocab_size = c.at("vocab_size").get<int64_t>();
    config.context_length = c.at("context_length").get<int64_t>();
    config.tie_embeddings = c.at("tie_embeddings").get<bool>();
    for (const auto& s : header.at("blocks_split")) splits.push_back(s.get<bool>());
    for (const auto& entry : header.at("tensors")) {
      if (entry.at(0).get<std::string>() == "unembed_bias") has_unembed_bias = true;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  config.validate();

  Gpt<T> model = make_skeleton<T>(config, splits, has_unembed_bias);

  for (const auto& sj : header.at("norm_states")) {
    NormSiteId id;
    try {
      id = sj.at("site").get<std::string>() == "lnf" ? final_site()
                                                     : parse_site(sj.at("site").get<std::string>());
    } catch (const FormatError& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
    NormState<T>* st = find_site(model, id);
    if (st == nullptr) {
      throw FormatError("checkpoint: norm state for unknown site " + to_string(id));
    }
    try {
      st->mode = detail::parse_mode(sj.at("mode").get<std::string>());
      st->sigma_bar = sj.at("sigma_bar").get<double>();
      st->sigma0_bar = sj.at("sigma0_bar").get<double>();
      st->interp_w = sj.at("interp_w").get<double>();
      st->special_bos_active = sj.at("special_bos").get<bool>();
      st->special_eot_active = sj.at("special_eot").get<bool>();
      st->center_mean = sj.at("center_mean").get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("checkpoint: malformed norm state: ") + e.what());
    }
  }

  auto params = named_params(model);
  std::vector<bool> filled(params.size(), false);
  for (const auto& entry : header.at("tensors")) {
    std::string name, dtype;
    std::vector<int64_t> shape;
    uint64_t offset = 0;
    try {
      name = entry.at(0).get<std::string>();
      dtype = entry.at(1).get<std::string>();
      shape = entry.at(2).get<std::vector<int64_t>>();
      offset = entry.at(3).get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("checkpoint: malformed tensor index entry: ") + e.what());
    }
    size_t pi = params.size();
    for (size_t i = 0; i < params.size(); ++i) {
      if (params[i].name == name) {
        pi = i;
        break;
      }
    }
    if (pi == params.size()) throw FormatError("checkpoint: unknown tensor '" + name + "'");
    Tensor<T>& t = *params[pi].tensor;
    if (t.shape != shape) {
      throw FormatError("checkpoint: shape mismatch for tensor '" + name + "'");
    }
    const size_t elem = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    if (elem == 0) throw FormatError("checkpoint: unknown dtype '" + dtype + "' for tensor '" + name + "'");
    const uint64_t begin = payload_start + offset;
    const uint64_t length = static_cast<uint64_t>(t.numel()) * elem;
    if (begin + length > bytes.size()) {
      throw FormatError("checkpoint: tensor '" + name + "' truncated at offset " +
                        std::to_string(begin));
    }
    const char* src = bytes.data() + begin;
    if (elem == sizeof(T)) {
      std::memcpy(t.ptr(), src, length);
    } else if (elem == 4) {
      for (int64_t i = 0; i < t.numel(); ++i) {
        float v;
        std::memcpy(&v, src + i * 4, 4);
        (*t.data)[static_cast<size_t>(i)] = static_cast<T>(v);
      }
    } else {
      for (int64_t i = 0; i < t.numel(); ++i) {
        double v;
        std::memcpy(&v, src + i * 8, 8);
        (*t.data)[static_cast<size_t>(i)] = static_cast<T>(v);
      }
    }
    filled[pi] = true;
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (!filled[i]) throw FormatError("checkpoint: missing tensor '" + params[i].name + "'");
  }
  return model;
}

}  // namespace lnablate
