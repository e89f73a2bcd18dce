#include <gtest/gtest.h>

#include <random>

#include "cellstn/errors.hpp"
#include "cellstn/metrics.hpp"

using namespace cellstn;

namespace {

// Counts straight from the pairs, no confusion matrix involved.
struct Recount {
  double precision, recall, f1;
  std::size_t support;
};

Recount recount(const std::vector<CellClass>& truth, const std::vector<CellClass>& pred, CellClass c) {
  std::size_t tp = 0, predicted = 0, actual = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    tp += truth[i] == c && pred[i] == c;
    predicted += pred[i] == c;
    actual += truth[i] == c;
  }
  const double p = predicted ? double(tp) / double(predicted) : 0.0;
  const double r = actual ? double(tp) / double(actual) : 0.0;
  return {p, r, p + r > 0 ? 2 * p * r / (p + r) : 0.0, actual};
}

}  // namespace

TEST(Metrics, HandCase) {
  const Confusion c{{{8, 2, 0}, {1, 9, 0}, {0, 0, 10}}};
  const MetricsReport r = MetricsReport::from_confusion(c);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.9);
  EXPECT_DOUBLE_EQ(r.per_class[0].precision, 8.0 / 9.0);
  EXPECT_DOUBLE_EQ(r.per_class[0].recall, 0.8);
  EXPECT_DOUBLE_EQ(r.per_class[1].precision, 9.0 / 11.0);
  EXPECT_DOUBLE_EQ(r.per_class[1].recall, 0.9);
  EXPECT_DOUBLE_EQ(r.per_class[2].f1, 1.0);
  EXPECT_EQ(r.per_class[2].support, 10u);
  EXPECT_EQ(r.total(), 30u);
  EXPECT_EQ(r.weighted.support, 30u);
}

TEST(Metrics, AllCorrect) {
  const std::vector<CellClass> t{CellClass::tumor, CellClass::mitosis, CellClass::granulocyte, CellClass::tumor};
  const MetricsReport r = MetricsReport::from_predictions(t, t);
  EXPECT_EQ(r.accuracy, 1.0);
  for (const ClassMetrics& m : r.per_class) {
    EXPECT_EQ(m.precision, 1.0);
    EXPECT_EQ(m.recall, 1.0);
    EXPECT_EQ(m.f1, 1.0);
  }
  EXPECT_EQ(r.weighted.f1, 1.0);
}

TEST(Metrics, NeverPredictedClassHasZeroPrecision) {
  const std::vector<CellClass> t{CellClass::tumor, CellClass::mitosis};
  const std::vector<CellClass> p{CellClass::tumor, CellClass::tumor};
  const MetricsReport r = MetricsReport::from_predictions(t, p);
  EXPECT_EQ(r.per_class[class_index(CellClass::mitosis)].precision, 0.0);
  EXPECT_EQ(r.per_class[class_index(CellClass::mitosis)].f1, 0.0);
  EXPECT_EQ(r.per_class[class_index(CellClass::tumor)].precision, 0.5);
}

TEST(Metrics, LengthMismatchRejected) {
  const std::vector<CellClass> t{CellClass::tumor, CellClass::mitosis};
  const std::vector<CellClass> p{CellClass::tumor};
  EXPECT_ANY_THROW(MetricsReport::from_predictions(t, p));
}

TEST(Metrics, MatchesRecountOnRandomPairs) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 400)(rng);
    std::uniform_int_distribution<int> cls(0, 2);
    std::vector<CellClass> truth(n), pred(n);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = CellClass(cls(rng));
      pred[i] = CellClass(cls(rng));
      correct += truth[i] == pred[i];
    }
    const MetricsReport r = MetricsReport::from_predictions(truth, pred);
    EXPECT_NEAR(r.accuracy, double(correct) / double(n), 1e-12);
    double wp = 0, wr = 0, wf = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      const Recount e = recount(truth, pred, CellClass(c));
      EXPECT_NEAR(r.per_class[c].precision, e.precision, 1e-12);
      EXPECT_NEAR(r.per_class[c].recall, e.recall, 1e-12);
      EXPECT_NEAR(r.per_class[c].f1, e.f1, 1e-12);
      EXPECT_EQ(r.per_class[c].support, e.support);
      wp += e.precision * double(e.support);
      wr += e.recall * double(e.support);
      wf += e.f1 * double(e.support);
    }
    EXPECT_NEAR(r.weighted.precision, wp / double(n), 1e-12);
    EXPECT_NEAR(r.weighted.recall, wr / double(n), 1e-12);
    EXPECT_NEAR(r.weighted.f1, wf / double(n), 1e-12);
  }
}

TEST(Metrics, ArgmaxTiesGoLow) {
  EXPECT_EQ(argmax_class(std::array<double, 3>{0.2, 0.5, 0.3}), CellClass::mitosis);
  EXPECT_EQ(argmax_class(std::array<double, 3>{0.4, 0.4, 0.2}), CellClass::granulocyte);
  EXPECT_EQ(argmax_class(std::array<double, 3>{0.2, 0.4, 0.4}), CellClass::mitosis);
  EXPECT_THROW(argmax_class(std::array<double, 2>{0.5, 0.5}), DimensionError);
}

TEST(MetricsCsv, HeaderAndRows) {
  const Confusion c{{{8, 2, 0}, {1, 9, 0}, {0, 0, 10}}};
  const std::vector<NamedReport> reps{{"CNN-STN", MetricsReport::from_confusion(c)},
                                      {"CNN baseline", MetricsReport::from_confusion(c)}};
  const std::string csv = metrics_csv(reps);
  EXPECT_EQ(csv.rfind("model,class,precision,recall,f1,support\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
  EXPECT_NE(csv.find("CNN-STN,granulocyte,0.888889,0.800000,"), std::string::npos);
  EXPECT_NE(csv.find("CNN baseline,avg/total,"), std::string::npos);
  EXPECT_NE(csv.find(",30\n"), std::string::npos);
}

TEST(MetricsReport, RendersBothBlocks) {
  const Confusion c{{{8, 2, 0}, {1, 9, 0}, {0, 0, 10}}};
  const std::vector<NamedReport> reps{{"CNN baseline", MetricsReport::from_confusion(c)},
                                      {"CNN-STN", MetricsReport::from_confusion(c)}};
  const std::string text = render_report(reps);
  EXPECT_NE(text.find("CNN baseline"), std::string::npos);
  EXPECT_NE(text.find("CNN-STN"), std::string::npos);
  std::size_t blocks = 0;
  for (std::size_t at = text.find("avg / total"); at != std::string::npos; at = text.find("avg / total", at + 1))
    ++blocks;
  EXPECT_EQ(blocks, 2u);
  EXPECT_NE(text.find("accuracy 0.9000"), std::string::npos);
}
