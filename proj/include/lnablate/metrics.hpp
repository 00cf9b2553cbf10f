#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace lnablate {

struct MetricsRecord {
  int64_t step = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
  double lr = 0.0;
  std::vector<std::string> events;  // "site:action" strings applied this step
};

// CSV layout: step,train_loss,val_loss,lr,events — val_loss empty when not
// evaluated, events ';'-joined.
std::string metrics_csv_header();
std::string metrics_csv_line(const MetricsRecord& rec);
std::vector<MetricsRecord> parse_metrics_csv(const std::string& text);
std::vector<MetricsRecord> load_metrics_csv(const std::string& path);

}  // namespace lnablate
