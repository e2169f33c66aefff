#pragma once

#include <map>
#include <string>
#include <vector>

#include "mblm/errors.hpp"

namespace mblm {

// Per-run test metrics as persisted on disk.
struct RunMetrics {
  std::string run;
  uint64_t seed = 0;
  std::string hash;
  int best_epoch = -1;
  // language id -> metric name -> value (test split)
  std::map<std::string, std::map<std::string, double>> values;
};

void write_metrics_file(const std::string& path, const RunMetrics& metrics);
RunMetrics read_metrics_file(const std::string& path);

// method x language score matrix aggregated over seeds. Aggregate columns
// are recomputed from the per-language cells at render time, never stored.
class ReportTable {
 public:
  ReportTable(std::vector<std::string> languages, int supervised_count);

  void add(const std::string& method, const std::string& language, double value);

  struct Cell {
    double mean = 0.0;
    double stddev = 0.0;
    int n = 0;
  };
  Cell cell(const std::string& method, const std::string& language) const;
  double aggregate(const std::string& method, const std::string& which) const;  // S | Z | A

  std::vector<std::string> methods() const;
  const std::vector<std::string>& languages() const { return languages_; }

  std::string render_tsv(const std::string& metric,
                         const std::vector<std::string>& config_hashes) const;
  std::string render_text(const std::string& metric) const;

 private:
  std::vector<std::string> languages_;
  int supervised_count_;
  std::vector<std::string> method_order_;
  std::map<std::string, std::map<std::string, std::vector<double>>> samples_;
};

}  // namespace mblm
