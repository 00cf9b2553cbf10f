#include "lnablate/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "lnablate/errors.hpp"

namespace lnablate {

namespace {

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

std::string metrics_csv_header() { return "step,train_loss,val_loss,lr,events"; }

std::string metrics_csv_line(const MetricsRecord& rec) {
  std::string line = std::to_string(rec.step) + "," + fmt(rec.train_loss) + ",";
  if (!std::isnan(rec.val_loss)) line += fmt(rec.val_loss);
  line += "," + fmt(rec.lr) + ",";
  for (size_t i = 0; i < rec.events.size(); ++i) {
    if (i) line += ";";
    line += rec.events[i];
  }
  return line;
}

std::vector<MetricsRecord> parse_metrics_csv(const std::string& text) {
  std::vector<MetricsRecord> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line == metrics_csv_header()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
      const size_t comma = line.find(',', start);
      if (comma == std::string::npos) {
        fields.push_back(line.substr(start));
        break;
      }
      fields.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    if (fields.size() != 5) {
      throw FormatError("metrics csv: expected 5 fields at line " + std::to_string(line_no));
    }
    MetricsRecord rec;
    try {
      rec.step = std::stoll(fields[0]);
      rec.train_loss = std::stod(fields[1]);
      if (!fields[2].empty()) rec.val_loss = std::stod(fields[2]);
      rec.lr = std::stod(fields[3]);
    } catch (const std::exception&) {
      throw FormatError("metrics csv: bad number at line " + std::to_string(line_no));
    }
    if (!fields[4].empty()) {
      size_t s = 0;
      while (true) {
        const size_t semi = fields[4].find(';', s);
        if (semi == std::string::npos) {
          rec.events.push_back(fields[4].substr(s));
          break;
        }
        rec.events.push_back(fields[4].substr(s, semi - s));
        s = semi + 1;
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<MetricsRecord> load_metrics_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open metrics csv: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_metrics_csv(buf.str());
}

}  // namespace lnablate
