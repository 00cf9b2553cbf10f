#pragma once

#include <cstdint>
#include <string>

#include "lnablate/errors.hpp"

namespace lnablate {

// ln1 is the shared pre-attention site before split_ln1; afterwards the same
// input is read through the independent ln1qk / ln1v pair.
enum class SiteKind { ln1, ln1qk, ln1v, ln2, lnf };

struct NormSiteId {
  static constexpr int kFinal = -1;

  int block = 0;  // kFinal iff kind == lnf
  SiteKind kind = SiteKind::ln2;

  bool operator==(const NormSiteId&) const = default;
};

inline NormSiteId final_site() { return {NormSiteId::kFinal, SiteKind::lnf}; }

std::string to_string(SiteKind kind);
std::string to_string(const NormSiteId& id);

// Parses "3.ln1v", "0.ln2", "lnf". Throws FormatError on anything else.
NormSiteId parse_site(const std::string& text);

}  // namespace lnablate
