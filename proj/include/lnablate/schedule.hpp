#pragma once

// Removal schedules as data: step-indexed freeze / special-drop /
// interpolation events, plus the warmup-cosine learning-rate schedule.

#include <cstdint>
#include <string>
#include <vector>

#include "lnablate/sites.hpp"
#include "lnablate/surgery.hpp"

namespace lnablate {

struct RemovalEvent {
  int64_t step = 0;
  NormSiteId site;
  RemovalAction action;

  bool operator==(const RemovalEvent&) const = default;
};

struct RemovalSchedule {
  std::string name;
  std::vector<RemovalEvent> events;  // sorted by step

  bool operator==(const RemovalSchedule& o) const { return events == o.events; }
};

// File format: `step<TAB>site<TAB>action` lines, `#` comments. Actions are
// freeze, drop_eot, drop_bos, interp:<w>.
RemovalSchedule parse_schedule(const std::string& text, const std::string& name = "");
RemovalSchedule load_schedule_file(const std::string& path);
std::string serialize_schedule(const RemovalSchedule& schedule);

// Ordering rules: events sorted by step, at most one FreezeMain and one of
// each Drop per site, drops not before their site's freeze.
void validate_schedule(const RemovalSchedule& schedule);

std::vector<RemovalEvent> events_at(const RemovalSchedule& schedule, int64_t step);

// Uniform step rescaling: rounds half-up, clamps to >= 1, and keeps strict
// orderings strict where the original was strict.
RemovalSchedule scale_schedule(const RemovalSchedule& schedule, double factor);

// Remaps block indices of a deeper schedule onto a shallower model
// (block b -> floor(b * L / orig_L)), keeping the earliest event per
// (site, action) and dropping the rest.
RemovalSchedule adapt_schedule_depth(const RemovalSchedule& schedule, int64_t n_layers);

int64_t schedule_max_block(const RemovalSchedule& schedule);  // -1 if only lnf
int64_t schedule_last_step(const RemovalSchedule& schedule);  // -1 if empty

struct LRScheduleConfig {
  enum class Kind { Constant, WarmupCosine };
  Kind kind = Kind::WarmupCosine;
  double base_lr = 6e-4;
  double min_lr = 6e-5;
  int64_t warmup_steps = 100;
  int64_t decay_end_step = 2000;

  void validate() const;
};

// Linear 0 -> base over warmup, cosine base -> min until decay end, min after.
double lr_at(const LRScheduleConfig& config, int64_t step);

}  // namespace lnablate
