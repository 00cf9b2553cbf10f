#include "lnablate/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace lnablate {

std::string to_string(const RemovalAction& a) {
  switch (a.kind) {
    case RemovalActionKind::FreezeMain: return "freeze";
    case RemovalActionKind::DropEOTSpecial: return "drop_eot";
    case RemovalActionKind::DropBOSSpecial: return "drop_bos";
    case RemovalActionKind::SetInterpolation: {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "interp:%.12g", a.interp_w);
      return buf;
    }
  }
  return "?";
}

namespace {

RemovalAction parse_action(const std::string& text) {
  if (text == "freeze") return {RemovalActionKind::FreezeMain, 0.0};
  if (text == "drop_eot") return {RemovalActionKind::DropEOTSpecial, 0.0};
  if (text == "drop_bos") return {RemovalActionKind::DropBOSSpecial, 0.0};
  if (text.rfind("interp:", 0) == 0) {
    double w = 0.0;
    try {
      size_t used = 0;
      w = std::stod(text.substr(7), &used);
      if (used != text.size() - 7) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw FormatError("bad interpolation weight in '" + text + "'");
    }
    if (w < 0.0 || w > 1.0) throw FormatError("interpolation weight outside [0,1] in '" + text + "'");
    return {RemovalActionKind::SetInterpolation, w};
  }
  throw FormatError("unknown action '" + text + "'");
}

struct SiteKeyLess {
  bool operator()(const NormSiteId& a, const NormSiteId& b) const {
    if (a.block != b.block) return a.block < b.block;
    return static_cast<int>(a.kind) < static_cast<int>(b.kind);
  }
};

void validate_events(const std::vector<RemovalEvent>& events,
                     const std::vector<int>* lines) {
  auto where = [&](size_t i) {
    if (lines != nullptr) return " at line " + std::to_string((*lines)[i]);
    return " at event index " + std::to_string(i);
  };
  std::map<NormSiteId, int64_t, SiteKeyLess> freeze_step;
  std::vector<std::pair<NormSiteId, int>> seen;
  int64_t prev_step = -1;
  for (size_t i = 0; i < events.size(); ++i) {
    const RemovalEvent& e = events[i];
    if (e.step < 0) throw ValidationError("schedule: negative step" + where(i));
    if (e.step < prev_step) throw ValidationError("schedule: events not sorted by step" + where(i));
    prev_step = e.step;
    if (e.action.kind == RemovalActionKind::FreezeMain) {
      if (freeze_step.count(e.site)) {
        throw ValidationError("schedule: duplicate freeze for site " + to_string(e.site) + where(i));
      }
      freeze_step[e.site] = e.step;
    }
    if (e.action.kind != RemovalActionKind::SetInterpolation) {
      const auto key = std::make_pair(e.site, static_cast<int>(e.action.kind));
      if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
        throw ValidationError("schedule: duplicate " + to_string(e.action) + " for site " +
                              to_string(e.site) + where(i));
      }
      seen.push_back(key);
    }
  }
  for (size_t i = 0; i < events.size(); ++i) {
    const RemovalEvent& e = events[i];
    if (e.action.kind == RemovalActionKind::DropEOTSpecial ||
        e.action.kind == RemovalActionKind::DropBOSSpecial) {
      auto it = freeze_step.find(e.site);
      if (it != freeze_step.end() && e.step < it->second) {
        throw ValidationError("schedule: " + to_string(e.action) + " for site " + to_string(e.site) +
                              " precedes its freeze" + where(i));
      }
    }
  }
}

}  // namespace

RemovalSchedule parse_schedule(const std::string& text, const std::string& name) {
  RemovalSchedule s;
  s.name = name;
  std::vector<int> lines;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream fields(line);
    std::string step_text, site_text, action_text;
    if (!(fields >> step_text)) continue;  // blank / comment-only line
    if (!(fields >> site_text >> action_text)) {
      throw ValidationError("schedule: expected 'step site action' at line " + std::to_string(line_no));
    }
    std::string extra;
    if (fields >> extra) {
      throw ValidationError("schedule: trailing field '" + extra + "' at line " + std::to_string(line_no));
    }
    RemovalEvent e;
    try {
      size_t used = 0;
      e.step = std::stoll(step_text, &used);
      if (used != step_text.size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw ValidationError("schedule: bad step '" + step_text + "' at line " + std::to_string(line_no));
    }
    try {
      e.site = parse_site(site_text);
      e.action = parse_action(action_text);
    } catch (const FormatError& err) {
      throw ValidationError(std::string("schedule: ") + err.what() + " at line " + std::to_string(line_no));
    }
    s.events.push_back(e);
    lines.push_back(line_no);
  }
  validate_events(s.events, &lines);
  return s;
}

RemovalSchedule load_schedule_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open schedule file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string name = path;
  const size_t slash = name.find_last_of('/');
  if (slash != std::string::npos) name = name.substr(slash + 1);
  return parse_schedule(buf.str(), name);
}

std::string serialize_schedule(const RemovalSchedule& schedule) {
  std::ostringstream out;
  for (const RemovalEvent& e : schedule.events) {
    out << e.step << '\t' << to_string(e.site) << '\t' << to_string(e.action) << '\n';
  }
  return out.str();
}

void validate_schedule(const RemovalSchedule& schedule) {
  validate_events(schedule.events, nullptr);
}

std::vector<RemovalEvent> events_at(const RemovalSchedule& schedule, int64_t step) {
  std::vector<RemovalEvent> out;
  for (const RemovalEvent& e : schedule.events) {
    if (e.step == step) out.push_back(e);
    if (e.step > step) break;
  }
  return out;
}

RemovalSchedule scale_schedule(const RemovalSchedule& schedule, double factor) {
  if (!(factor > 0.0)) throw ConfigError("schedule scale factor must be positive");
  RemovalSchedule out;
  out.name = schedule.name;
  out.events = schedule.events;
  int64_t prev_orig = -1;
  int64_t prev_new = 0;
  for (RemovalEvent& e : out.events) {
    const int64_t orig = e.step;
    int64_t scaled = static_cast<int64_t>(std::floor(static_cast<double>(orig) * factor + 0.5));
    scaled = std::max<int64_t>(scaled, 1);
    if (prev_orig >= 0) {
      if (orig == prev_orig) {
        scaled = prev_new;
      } else {
        scaled = std::max(scaled, prev_new + 1);
      }
    }
    e.step = scaled;
    prev_orig = orig;
    prev_new = scaled;
  }
  validate_schedule(out);
  return out;
}

RemovalSchedule adapt_schedule_depth(const RemovalSchedule& schedule, int64_t n_layers) {
  if (n_layers <= 0) throw ConfigError("adapt_schedule_depth: n_layers must be positive");
  const int64_t orig_layers = schedule_max_block(schedule) + 1;
  if (orig_layers <= n_layers) return schedule;
  RemovalSchedule out;
  out.name = schedule.name;
  std::vector<std::pair<NormSiteId, int>> kept;  // (site, action kind) already emitted
  for (const RemovalEvent& e : schedule.events) {
    RemovalEvent mapped = e;
    if (mapped.site.kind != SiteKind::lnf) {
      mapped.site.block = static_cast<int>((static_cast<int64_t>(mapped.site.block) * n_layers) /
                                           orig_layers);
    }
    const auto key = std::make_pair(mapped.site, static_cast<int>(mapped.action.kind));
    if (std::find(kept.begin(), kept.end(), key) != kept.end()) continue;
    kept.push_back(key);
    out.events.push_back(mapped);
  }
  validate_schedule(out);
  return out;
}

int64_t schedule_max_block(const RemovalSchedule& schedule) {
  int64_t mx = -1;
  for (const RemovalEvent& e : schedule.events) {
    if (e.site.kind != SiteKind::lnf) mx = std::max<int64_t>(mx, e.site.block);
  }
  return mx;
}

int64_t schedule_last_step(const RemovalSchedule& schedule) {
  return schedule.events.empty() ? -1 : schedule.events.back().step;
}

void LRScheduleConfig::validate() const {
  if (!(min_lr > 0.0) || min_lr > base_lr) {
    throw ConfigError("lr schedule: need 0 < min_lr <= base_lr");
  }
  if (kind == Kind::WarmupCosine && (warmup_steps < 0 || warmup_steps >= decay_end_step)) {
    throw ConfigError("lr schedule: need 0 <= warmup_steps < decay_end_step");
  }
}

double lr_at(const LRScheduleConfig& config, int64_t step) {
  if (step < 0) throw ConfigError("lr_at: negative step");
  if (config.kind == LRScheduleConfig::Kind::Constant) return config.base_lr;
  if (step < config.warmup_steps) {
    return config.base_lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  }
  if (step >= config.decay_end_step) return config.min_lr;
  const double t = static_cast<double>(step - config.warmup_steps) /
                   static_cast<double>(config.decay_end_step - config.warmup_steps);
  return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (1.0 + std::cos(M_PI * t));
}

}  // namespace lnablate
