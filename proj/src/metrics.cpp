#include "cellstn/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "cellstn/errors.hpp"

namespace cellstn {
namespace {

double ratio(std::size_t num, std::size_t den) { return den == 0 ? 0.0 : double(num) / double(den); }

double harmonic(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

// Row labels used in the text report.
const char* display_name(std::size_t c) {
  static const char* names[kNumClasses] = {"granulocytes", "mitotic figures", "normal t. cells"};
  return names[c];
}

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

}  // namespace

std::size_t MetricsReport::total() const {
  std::size_t n = 0;
  for (const auto& row : confusion)
    for (std::size_t v : row) n += v;
  return n;
}

MetricsReport MetricsReport::from_confusion(const Confusion& confusion) {
  MetricsReport r;
  r.confusion = confusion;
  const std::size_t n = r.total();
  if (n == 0) throw ContractError("metrics need at least one prediction");
  std::size_t correct = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < kNumClasses; ++j) {
      row += confusion[c][j];
      col += confusion[j][c];
    }
    const std::size_t tp = confusion[c][c];
    correct += tp;
    ClassMetrics& m = r.per_class[c];
    m.precision = ratio(tp, col);
    m.recall = ratio(tp, row);
    m.f1 = harmonic(m.precision, m.recall);
    m.support = row;
  }
  r.accuracy = ratio(correct, n);
  r.macro.support = r.weighted.support = n;
  for (const ClassMetrics& m : r.per_class) {
    r.macro.precision += m.precision / double(kNumClasses);
    r.macro.recall += m.recall / double(kNumClasses);
    r.macro.f1 += m.f1 / double(kNumClasses);
    const double w = double(m.support) / double(n);
    r.weighted.precision += w * m.precision;
    r.weighted.recall += w * m.recall;
    r.weighted.f1 += w * m.f1;
  }
  return r;
}

MetricsReport MetricsReport::from_predictions(std::span<const CellClass> truth, std::span<const CellClass> predicted) {
  if (truth.size() != predicted.size())
    throw DimensionError("metrics: " + std::to_string(truth.size()) + " labels but " +
                         std::to_string(predicted.size()) + " predictions");
  Confusion c{};
  for (std::size_t i = 0; i < truth.size(); ++i) ++c[class_index(truth[i])][class_index(predicted[i])];
  return from_confusion(c);
}

CellClass argmax_class(std::span<const double> probs) {
  if (probs.size() != kNumClasses)
    throw DimensionError("argmax_class: expected " + std::to_string(kNumClasses) + " probabilities, got " +
                         std::to_string(probs.size()));
  std::size_t best = 0;
  for (std::size_t c = 1; c < kNumClasses; ++c)
    if (probs[c] > probs[best]) best = c;
  return CellClass(best);
}

std::string metrics_csv(std::span<const NamedReport> reports) {
  std::string out = "model,class,precision,recall,f1,support\n";
  const auto row = [&out](const std::string& model, std::string_view cls, const ClassMetrics& m) {
    out += model + "," + std::string(cls) + fmt(",%.6f,%.6f,%.6f,%zu\n", m.precision, m.recall, m.f1, m.support);
  };
  for (const NamedReport& r : reports) {
    for (std::size_t c = 0; c < kNumClasses; ++c) row(r.model, class_name(CellClass(c)), r.report.per_class[c]);
    row(r.model, "avg/total", r.report.weighted);
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const NamedReport> reports) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << metrics_csv(reports);
}

std::string render_report(std::span<const NamedReport> reports) {
  std::ostringstream out;
  const std::string rule(78, '-');
  out << rule << "\n"
      << fmt("%-24s %-17s %10s %10s %10s %9s\n", "approach", "name", "precision", "recall", "f1-score", "support")
      << rule << "\n";
  for (const NamedReport& r : reports) {
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const ClassMetrics& m = r.report.per_class[c];
      out << fmt("%-24s %-17s %10.3f %10.3f %10.3f %9zu\n", c == 0 ? r.model.c_str() : "", display_name(c),
                 m.precision, m.recall, m.f1, m.support);
    }
    const ClassMetrics& w = r.report.weighted;
    out << fmt("%-24s %-17s %10.3f %10.3f %10.3f %9zu\n", "", "avg / total", w.precision, w.recall, w.f1, w.support)
        << rule << "\n";
  }
  out << "\n";
  for (const NamedReport& r : reports) {
    const MetricsReport& m = r.report;
    out << r.model << "\n"
        << fmt("  accuracy %.4f   macro precision %.4f recall %.4f f1 %.4f\n", m.accuracy, m.macro.precision,
               m.macro.recall, m.macro.f1)
        << "  confusion (rows: truth, columns: prediction)\n";
    for (std::size_t t = 0; t < kNumClasses; ++t) {
      out << fmt("  %-17s", display_name(t));
      for (std::size_t p = 0; p < kNumClasses; ++p) out << fmt(" %7zu", m.confusion[t][p]);
      out << "\n";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace cellstn
