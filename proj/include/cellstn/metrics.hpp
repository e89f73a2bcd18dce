#pragma once
// Confusion-matrix metrics and the report writers.
#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cellstn/losses.hpp"

namespace cellstn {

using Confusion = std::array<std::array<std::size_t, kNumClasses>, kNumClasses>;  // [truth][prediction]

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct MetricsReport {
  Confusion confusion{};
  std::array<ClassMetrics, kNumClasses> per_class{};
  double accuracy = 0.0;
  ClassMetrics macro;     // unweighted class mean; support = total
  ClassMetrics weighted;  // support-weighted mean; support = total

  std::size_t total() const;
  // Precision of a class with no predicted members is 0, as is its F1.
  static MetricsReport from_confusion(const Confusion& confusion);
  static MetricsReport from_predictions(std::span<const CellClass> truth, std::span<const CellClass> predicted);
};

// Index of the largest probability; ties go to the lowest index.
CellClass argmax_class(std::span<const double> probs);

struct NamedReport {
  std::string model;
  MetricsReport report;
};

// model,class,precision,recall,f1,support with an avg/total row per model
// (support-weighted).
std::string metrics_csv(std::span<const NamedReport> reports);
void write_metrics_csv(const std::filesystem::path& path, std::span<const NamedReport> reports);

// Blocks of per-class rows followed by "avg / total", then accuracy, macro
// averages and the confusion matrix of each model.
std::string render_report(std::span<const NamedReport> reports);

}  // namespace cellstn
