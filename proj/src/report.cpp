#include "mblm/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mblm {

void write_metrics_file(const std::string& path, const RunMetrics& metrics) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << "# config_hash=" << metrics.hash << "\trun=" << metrics.run
      << "\tseed=" << metrics.seed << "\tbest_epoch=" << metrics.best_epoch << "\n";
  out << "language\tsplit\tmetric\tvalue\n";
  out << std::setprecision(10);
  for (const auto& [language, by_metric] : metrics.values) {
    for (const auto& [metric, value] : by_metric) {
      out << language << "\ttest\t" << metric << "\t" << value << "\n";
    }
  }
  if (!out) throw DataError("failed while writing " + path);
}

RunMetrics read_metrics_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  RunMetrics metrics;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) {
    throw DataError(path + " is missing its metrics header");
  }
  std::istringstream header(line.substr(2));
  std::string field;
  while (std::getline(header, field, '\t')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = field.substr(0, eq);
    const std::string value = field.substr(eq + 1);
    if (key == "config_hash") metrics.hash = value;
    if (key == "run") metrics.run = value;
    if (key == "seed") metrics.seed = std::stoull(value);
    if (key == "best_epoch") metrics.best_epoch = std::stoi(value);
  }
  std::getline(in, line);  // column header
  size_t line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string language, split, metric, value;
    if (!std::getline(row, language, '\t') || !std::getline(row, split, '\t') ||
        !std::getline(row, metric, '\t') || !std::getline(row, value, '\t')) {
      throw DataError(path + ":" + std::to_string(line_no) + " is malformed");
    }
    metrics.values[language][metric] = std::stod(value);
  }
  return metrics;
}

ReportTable::ReportTable(std::vector<std::string> languages, int supervised_count)
    : languages_(std::move(languages)), supervised_count_(supervised_count) {
  if (supervised_count_ < 0 || supervised_count_ > static_cast<int>(languages_.size())) {
    throw ContractError("supervised count does not fit the language list");
  }
}

void ReportTable::add(const std::string& method, const std::string& language, double value) {
  if (std::find(languages_.begin(), languages_.end(), language) == languages_.end()) {
    throw ContractError("unknown language column: " + language);
  }
  if (!samples_.count(method)) method_order_.push_back(method);
  samples_[method][language].push_back(value);
}

ReportTable::Cell ReportTable::cell(const std::string& method,
                                    const std::string& language) const {
  auto mit = samples_.find(method);
  if (mit == samples_.end()) throw ContractError("unknown method row: " + method);
  auto lit = mit->second.find(language);
  Cell c;
  if (lit == mit->second.end() || lit->second.empty()) return c;
  const auto& xs = lit->second;
  c.n = static_cast<int>(xs.size());
  for (double x : xs) c.mean += x;
  c.mean /= c.n;
  if (c.n > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - c.mean) * (x - c.mean);
    c.stddev = std::sqrt(ss / (c.n - 1));
  }
  return c;
}

double ReportTable::aggregate(const std::string& method, const std::string& which) const {
  int begin = 0, end = static_cast<int>(languages_.size());
  if (which == "S") end = supervised_count_;
  if (which == "Z") begin = supervised_count_;
  if (begin >= end) return 0.0;
  double sum = 0;
  for (int l = begin; l < end; ++l) sum += cell(method, languages_[l]).mean;
  return sum / (end - begin);
}

std::vector<std::string> ReportTable::methods() const { return method_order_; }

std::string ReportTable::render_tsv(const std::string& metric,
                                    const std::vector<std::string>& config_hashes) const {
  std::ostringstream out;
  out << "# metric=" << metric << "\tconfig_hashes=";
  for (size_t i = 0; i < config_hashes.size(); ++i) {
    if (i) out << ",";
    out << config_hashes[i];
  }
  out << "\n";
  out << "method\tlanguage\tmean\tstd\tseeds\n";
  out << std::setprecision(10);
  for (const auto& method : method_order_) {
    for (const auto& language : languages_) {
      const Cell c = cell(method, language);
      out << method << "\t" << language << "\t" << c.mean << "\t" << c.stddev << "\t" << c.n
          << "\n";
    }
    out << method << "\tAVG(S)\t" << aggregate(method, "S") << "\t\t\n";
    out << method << "\tAVG(Z)\t" << aggregate(method, "Z") << "\t\t\n";
    out << method << "\tAVG(A)\t" << aggregate(method, "A") << "\t\t\n";
  }
  return out.str();
}

std::string ReportTable::render_text(const std::string& metric) const {
  std::ostringstream out;
  size_t method_width = 8;
  for (const auto& m : method_order_) method_width = std::max(method_width, m.size());

  out << "scores (x100, mean+-std over seeds), metric: " << metric << "\n";
  out << std::left << std::setw(static_cast<int>(method_width) + 2) << "method";
  for (const auto& l : languages_) out << std::right << std::setw(12) << l;
  for (const char* a : {"AVG(S)", "AVG(Z)", "AVG(A)"}) out << std::right << std::setw(12) << a;
  out << "\n";

  auto fmt = [](double mean, double stddev, int n) {
    std::ostringstream cell;
    cell << std::fixed << std::setprecision(2) << mean * 100.0;
    if (n > 1) cell << "+-" << std::fixed << std::setprecision(2) << stddev * 100.0;
    return cell.str();
  };
  for (const auto& method : method_order_) {
    out << std::left << std::setw(static_cast<int>(method_width) + 2) << method;
    for (const auto& l : languages_) {
      const Cell c = cell(method, l);
      out << std::right << std::setw(12) << fmt(c.mean, c.stddev, c.n);
    }
    for (const char* a : {"S", "Z", "A"}) {
      out << std::right << std::setw(12) << fmt(aggregate(method, a), 0, 1);
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace mblm
