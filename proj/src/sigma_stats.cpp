#include "lnablate/sigma_stats.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace lnablate {

namespace {

double mean_or_throw(double sum, uint64_t n, const char* what) {
  if (n == 0) throw StateError(std::string("sigma stats: no samples for ") + what);
  return sum / static_cast<double>(n);
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

}  // namespace

double SigmaRecord::sigma_bar() const { return mean_or_throw(sum_main, n_main, "sigma_bar"); }
double SigmaRecord::sigma0_bar() const { return mean_or_throw(sum_bos, n_bos, "sigma0_bar"); }
double SigmaRecord::sigma_eot_bar() const { return mean_or_throw(sum_eot, n_eot, "sigma_eot_bar"); }

const SigmaRecord* SigmaStats::find(const NormSiteId& site) const {
  for (const auto& [id, rec] : records) {
    if (id == site) return &rec;
  }
  return nullptr;
}

SigmaRecord& SigmaStats::at_or_insert(const NormSiteId& site) {
  for (auto& [id, rec] : records) {
    if (id == site) return rec;
  }
  records.emplace_back(site, SigmaRecord{});
  return records.back().second;
}

SigmaStats::Resolved SigmaStats::resolve(const NormSiteId& site) const {
  const SigmaRecord* rec = find(site);
  if (rec == nullptr && (site.kind == SiteKind::ln1qk || site.kind == SiteKind::ln1v)) {
    rec = find({site.block, SiteKind::ln1});
  }
  if (rec == nullptr) {
    throw StateError("sigma stats: no record for site " + to_string(site));
  }
  return {rec->sigma_bar(), rec->sigma0_bar()};
}

bool SigmaStats::covers(const NormSiteId& site) const {
  const SigmaRecord* rec = find(site);
  if (rec == nullptr && (site.kind == SiteKind::ln1qk || site.kind == SiteKind::ln1v)) {
    rec = find({site.block, SiteKind::ln1});
  }
  return rec != nullptr && rec->n_main > 0 && rec->n_bos > 0;
}

std::string SigmaStats::serialize() const {
  std::ostringstream out;
  for (const auto& [id, rec] : records) {
    const std::string block = id.kind == SiteKind::lnf ? "final" : std::to_string(id.block);
    out << block << ' ' << to_string(id.kind) << ' '
        << fmt(rec.n_main ? rec.sigma_bar() : 0.0) << ' '
        << fmt(rec.n_bos ? rec.sigma0_bar() : 0.0) << ' '
        << fmt(rec.n_eot ? rec.sigma_eot_bar() : 0.0) << ' '
        << rec.n_main << ' ' << rec.n_bos << ' ' << rec.n_eot << '\n';
  }
  return out.str();
}

SigmaStats SigmaStats::parse(const std::string& text) {
  SigmaStats stats;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string block, kind;
    double sb = 0, s0 = 0, se = 0;
    uint64_t n = 0, n0 = 0, ne = 0;
    if (!(fields >> block >> kind >> sb >> s0 >> se >> n >> n0 >> ne)) {
      throw FormatError("sigma stats: malformed line " + std::to_string(line_no));
    }
    NormSiteId site;
    if (block == "final") {
      site = final_site();
      if (kind != "lnf") throw FormatError("sigma stats: final row must be lnf, line " + std::to_string(line_no));
    } else {
      site = parse_site(block + "." + kind);
    }
    SigmaRecord rec;
    rec.sum_main = sb * static_cast<double>(n);
    rec.n_main = n;
    rec.sum_bos = s0 * static_cast<double>(n0);
    rec.n_bos = n0;
    rec.sum_eot = se * static_cast<double>(ne);
    rec.n_eot = ne;
    if (stats.find(site) != nullptr) {
      throw FormatError("sigma stats: duplicate site " + to_string(site) + " at line " +
                        std::to_string(line_no));
    }
    stats.records.emplace_back(site, rec);
  }
  return stats;
}

void save_sigma_stats(const SigmaStats& stats, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  out << stats.serialize();
  if (!out) throw IoError("write failed: " + path);
}

SigmaStats load_sigma_stats(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return SigmaStats::parse(buf.str());
}

}  // namespace lnablate
