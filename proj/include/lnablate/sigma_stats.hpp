#pragma once

// Collected per-site standard-deviation averages. Position-0 tokens feed
// sigma0_bar, EOT tokens at later positions feed sigma_eot_bar, everything
// else feeds sigma_bar; each token lands in exactly one bucket.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lnablate/norm.hpp"
#include "lnablate/sites.hpp"
#include "lnablate/tensor.hpp"

namespace lnablate {

struct SigmaRecord {
  double sum_main = 0.0, sum_bos = 0.0, sum_eot = 0.0;
  uint64_t n_main = 0, n_bos = 0, n_eot = 0;

  double sigma_bar() const;
  double sigma0_bar() const;
  double sigma_eot_bar() const;
};

struct SigmaStats {
  // Insertion-ordered so the serialized table follows site enumeration order.
  std::vector<std::pair<NormSiteId, SigmaRecord>> records;

  const SigmaRecord* find(const NormSiteId& site) const;
  SigmaRecord& at_or_insert(const NormSiteId& site);

  // Frozen divisors for a site. ln1qk/ln1v fall back to the shared ln1 row
  // when the stats were collected before the split (same input either way).
  struct Resolved {
    double sigma_bar;
    double sigma0_bar;
  };
  Resolved resolve(const NormSiteId& site) const;  // throws StateError when missing
  bool covers(const NormSiteId& site) const;

  bool empty() const { return records.empty(); }

  // One line per site: site kind sigma_bar sigma0_bar sigma_eot_bar n n0 n_eot.
  std::string serialize() const;
  static SigmaStats parse(const std::string& text);
};

void save_sigma_stats(const SigmaStats& stats, const std::string& path);
SigmaStats load_sigma_stats(const std::string& path);

// Accumulates input-side sigma observations during an instrumented forward.
class SigmaRecorder {
 public:
  explicit SigmaRecorder(SigmaStats* stats) : stats_(stats) {}

  template <typename T>
  void record(const NormSiteId& site, const Tensor<T>& x, const TokenFlags& flags) {
    const int64_t hidden = x.shape.back();
    const int64_t rows = x.numel() / hidden;
    SigmaRecord& rec = stats_->at_or_insert(site);
    const T* px = x.ptr();
    const double inv_h = 1.0 / static_cast<double>(hidden);
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = px + r * hidden;
      double mu = 0.0;
      for (int64_t j = 0; j < hidden; ++j) mu += static_cast<double>(xr[j]);
      mu *= inv_h;
      double var = 0.0;
      for (int64_t j = 0; j < hidden; ++j) {
        const double c = static_cast<double>(xr[j]) - mu;
        var += c * c;
      }
      const double sigma = std::sqrt(var * inv_h);
      const bool bos = flags.is_bos[static_cast<size_t>(r)] != 0;
      const bool eot = !bos && flags.is_eot[static_cast<size_t>(r)] != 0;  // position rule wins
      if (bos) {
        rec.sum_bos += sigma;
        rec.n_bos += 1;
      } else if (eot) {
        rec.sum_eot += sigma;
        rec.n_eot += 1;
      } else {
        rec.sum_main += sigma;
        rec.n_main += 1;
      }
    }
  }

 private:
  SigmaStats* stats_;
};

}  // namespace lnablate
