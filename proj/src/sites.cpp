#include "lnablate/sites.hpp"

namespace lnablate {

std::string to_string(SiteKind kind) {
  switch (kind) {
    case SiteKind::ln1: return "ln1";
    case SiteKind::ln1qk: return "ln1qk";
    case SiteKind::ln1v: return "ln1v";
    case SiteKind::ln2: return "ln2";
    case SiteKind::lnf: return "lnf";
  }
  return "?";
}

std::string to_string(const NormSiteId& id) {
  if (id.kind == SiteKind::lnf) return "lnf";
  return std::to_string(id.block) + "." + to_string(id.kind);
}

NormSiteId parse_site(const std::string& text) {
  if (text == "lnf") return final_site();
  const size_t dot = text.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 >= text.size()) {
    throw FormatError("bad norm site '" + text + "'");
  }
  int block = 0;
  try {
    size_t used = 0;
    block = std::stoi(text.substr(0, dot), &used);
    if (used != dot) throw std::invalid_argument("");
  } catch (const std::exception&) {
    throw FormatError("bad block index in norm site '" + text + "'");
  }
  if (block < 0) throw FormatError("negative block index in norm site '" + text + "'");
  const std::string kind = text.substr(dot + 1);
  if (kind == "ln1") return {block, SiteKind::ln1};
  if (kind == "ln1qk") return {block, SiteKind::ln1qk};
  if (kind == "ln1v") return {block, SiteKind::ln1v};
  if (kind == "ln2") return {block, SiteKind::ln2};
  throw FormatError("unknown norm site kind '" + kind + "'");
}

}  // namespace lnablate
