#include <gtest/gtest.h>

#include <bit>
#include <map>
#include <numbers>
#include <random>

#include "cellstn/errors.hpp"
#include "cellstn/pipeline.hpp"

using namespace cellstn;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.geom.input_size = 64;
  c.geom.cell_size = 32;
  c.stage1 = {4, 1e-3};
  c.stage2 = {4, 1e-3};
  c.stage3 = {3, 1e-4};
  c.baseline = {3, 1e-3};
  c.batch_size = 16;
  c.folds = 3;
  c.seed = 21;
  return c;
}

const Dataset& small_data() {
  static const Dataset data = [] {
    std::mt19937_64 rng(5);
    return synth_generate(20, small_config().geom, rng);
  }();
  return data;
}

std::vector<TrainItem> offset_items(const Dataset& data, const CropGeometry& geom, std::uint64_t seed) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::mt19937_64 rng(seed);
  return prepare_test_items(all, geom, rng);
}

std::uint64_t bits(double v) { return std::bit_cast<std::uint64_t>(v); }

}  // namespace

TEST(Items, BalanceThenAugment) {
  const Dataset& data = small_data();
  const TrainConfig config = small_config();
  // Drop some mitosis records so balancing has work to do.
  std::vector<std::size_t> indices;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.record(i).cls != CellClass::mitosis || i < 30) indices.push_back(i);
  std::size_t minority = 0;
  for (std::size_t i : indices) minority += data.record(i).cls == CellClass::mitosis;
  std::mt19937_64 rng(1);
  const auto items = prepare_training_items(data, indices, config, rng);
  ASSERT_EQ(items.size(), 2 * 3 * minority);
  std::map<CellClass, std::size_t> hist;
  std::size_t rotated = 0;
  for (const TrainItem& it : items) {
    ++hist[data.record(it.record).cls];
    ASSERT_TRUE(it.offset.has_value());
    EXPECT_LE(std::abs(it.offset->dx), config.geom.max_offset());
    EXPECT_LE(std::abs(it.offset->dy), config.geom.max_offset());
    EXPECT_GE(it.angle, 0.0);
    EXPECT_LT(it.angle, 2 * std::numbers::pi);
    rotated += it.angle != 0.0;
    EXPECT_TRUE(std::binary_search(indices.begin(), indices.end(), it.record));
  }
  EXPECT_EQ(rotated, items.size() / 2);
  for (auto [c, n] : hist) EXPECT_EQ(n, 2 * minority);

  TrainConfig plain = config;
  plain.augment = false;
  plain.balance = false;
  std::mt19937_64 rng2(1);
  EXPECT_EQ(prepare_training_items(data, indices, plain, rng2).size(), indices.size());
}

TEST(Items, ViewsHaveConfiguredSizes) {
  const Dataset& data = small_data();
  const TrainItem item{3, 0.7, Offset{5, -9}};
  EXPECT_EQ(offset_patch(data, item).shape(), (Shape{3, 64, 64}));
  EXPECT_EQ(centered_patch(data, item).shape(), (Shape{3, 64, 64}));
  EXPECT_EQ(centered_cell(data, item).shape(), (Shape{3, 32, 32}));
  // Zero offset: the offset patch is the centred patch.
  const TrainItem centred{3, 0.0, Offset{}};
  const Tensor a = offset_patch(data, centred), b = centered_patch(data, centred);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]);
}

TEST(Stage1, TrainsClassifierOnly) {
  const Dataset& data = small_data();
  const TrainConfig config = small_config();
  ModelParams m = build_stn_model(config.geom, 3);
  const auto loc_before = checksum(m.group(kLocalizer));
  const auto cls_before = checksum(m.group(kClassifier));
  const auto items = centered_items(offset_items(data, config.geom, 2));
  const StageResult r = stage1_train_classifier(m, config, data, items);
  ASSERT_EQ(r.loss_trace.size(), 4u);
  EXPECT_LT(r.loss_trace.back(), r.loss_trace.front());
  EXPECT_EQ(checksum(m.group(kLocalizer)), loc_before);
  EXPECT_NE(checksum(m.group(kClassifier)), cls_before);
}

TEST(Stage1, Deterministic) {
  const Dataset& data = small_data();
  const TrainConfig config = small_config();
  const auto items = centered_items(offset_items(data, config.geom, 2));
  ModelParams a = build_stn_model(config.geom, 3), b = build_stn_model(config.geom, 3);
  const StageResult ra = stage1_train_classifier(a, config, data, items);
  const StageResult rb = stage1_train_classifier(b, config, data, items);
  EXPECT_EQ(bits(ra.loss_trace.back()), bits(rb.loss_trace.back()));
  EXPECT_EQ(checksum(a.group(kClassifier)), checksum(b.group(kClassifier)));
}

TEST(Stage1, RejectsOffsetSamples) {
  const Dataset& data = small_data();
  const TrainConfig config = small_config();
  ModelParams m = build_stn_model(config.geom, 3);
  std::vector<TrainItem> items{{0, 0.0, Offset{0, 0}}, {1, 0.0, Offset{2, 0}}};
  EXPECT_THROW(stage1_train_classifier(m, config, data, items), ContractError);
}

TEST(Stage2, TrainsLocalizerWithoutLabels) {
  const Dataset data = small_data();
  const TrainConfig config = small_config();
  ModelParams m = build_stn_model(config.geom, 4);
  const auto loc_before = checksum(m.group(kLocalizer));
  const auto cls_before = checksum(m.group(kClassifier));
  const auto items = offset_items(data, config.geom, 3);
  const std::size_t reads = data.label_reads();
  const StageResult r = stage2_train_localizer(m, config, data, items);
  EXPECT_EQ(data.label_reads(), reads);
  EXPECT_LT(r.loss_trace.back(), r.loss_trace.front());
  EXPECT_EQ(checksum(m.group(kClassifier)), cls_before);
  EXPECT_NE(checksum(m.group(kLocalizer)), loc_before);
}

TEST(Stage2, RequiresOffsets) {
  const Dataset& data = small_data();
  const TrainConfig config = small_config();
  ModelParams m = build_stn_model(config.geom, 4);
  std::vector<TrainItem> items{{0, 0.0, Offset{1, 1}}, {1, 0.0, std::nullopt}};
  EXPECT_THROW(stage2_train_localizer(m, config, data, items), ContractError);
}

TEST(Stage3, CombinedLossDecreases) {
  const Dataset& data = small_data();
  TrainConfig config = small_config();
  ModelParams m = build_stn_model(config.geom, 5);
  const auto items = offset_items(data, config.geom, 4);
  stage1_train_classifier(m, config, data, centered_items(items));
  stage2_train_localizer(m, config, data, items);
  const StageResult r = stage3_joint_refine(m, config, data, items);
  EXPECT_LT(r.loss_trace.back(), r.loss_trace.front());
}

TEST(Stage3, KappaZeroLeavesClassifier) {
  const Dataset& data = small_data();
  TrainConfig config = small_config();
  config.kappa = 0.0;
  config.stage3.epochs = 1;
  ModelParams m = build_stn_model(config.geom, 6);
  const auto cls_before = checksum(m.group(kClassifier));
  const auto loc_before = checksum(m.group(kLocalizer));
  stage3_joint_refine(m, config, data, offset_items(data, config.geom, 5));
  EXPECT_EQ(checksum(m.group(kClassifier)), cls_before);
  EXPECT_NE(checksum(m.group(kLocalizer)), loc_before);
}

TEST(Baseline, FitsCentredTrainingData) {
  const Dataset& data = small_data();
  TrainConfig config = small_config();
  config.baseline = {25, 1e-3};
  ModelParams m = build_baseline_model(config.geom, 7);
  const auto items = centered_items(offset_items(data, config.geom, 6));
  train_baseline(m, config, data, items);
  EXPECT_EQ(m.group(kBaseline).spec.outputs(), 3u);
  EXPECT_GE(evaluate(m, config, data, items).accuracy, 0.9);
}

TEST(Baseline, Deterministic) {
  const Dataset& data = small_data();
  TrainConfig config = small_config();
  config.baseline.epochs = 1;
  const auto items = offset_items(data, config.geom, 6);
  ModelParams a = build_baseline_model(config.geom, 7), b = build_baseline_model(config.geom, 7);
  const auto ra = train_baseline(a, config, data, items), rb = train_baseline(b, config, data, items);
  EXPECT_EQ(bits(ra.loss_trace[0]), bits(rb.loss_trace[0]));
  EXPECT_EQ(checksum(a.group(kBaseline)), checksum(b.group(kBaseline)));
}

TEST(Evaluate, MatchesRecountOfPredictions) {
  const Dataset& data = small_data();
  const TrainConfig config = small_config();
  const ModelParams m = build_stn_model(config.geom, 8);
  const auto items = offset_items(data, config.geom, 7);
  const MetricsReport rep = evaluate(m, config, data, items);
  const auto pred = predict(m, config, data, items);
  std::size_t correct = 0;
  Confusion conf{};
  for (std::size_t i = 0; i < items.size(); ++i) {
    const CellClass truth = data.record(items[i].record).cls;
    correct += truth == pred[i];
    ++conf[class_index(truth)][class_index(pred[i])];
  }
  EXPECT_EQ(rep.confusion, conf);
  EXPECT_DOUBLE_EQ(rep.accuracy, double(correct) / double(items.size()));
  EXPECT_THROW(evaluate(m, config, data, std::span<const TrainItem>{}), ContractError);
  const auto thetas = predict_theta(m, config, data, items);
  ASSERT_EQ(thetas.size(), items.size());
  EXPECT_EQ(thetas[0].m, (std::array<double, 6>{0.5, 0, 0, 0, 0.5, 0}));
}

TEST(CrossValidate, EnsembleCoversDatasetDeterministically) {
  const Dataset& data = small_data();
  TrainConfig config = small_config();
  config.stage1.epochs = config.stage2.epochs = config.stage3.epochs = config.baseline.epochs = 1;
  std::size_t folds_seen = 0;
  CvHooks hooks;
  hooks.on_fold = [&](const FoldResult&) { ++folds_seen; };
  const CrossValidation a = cross_validate(config, data, hooks);
  const CrossValidation b = cross_validate(config, data);
  EXPECT_EQ(folds_seen, 3u);
  EXPECT_EQ(a.stn.total(), data.size());
  EXPECT_EQ(a.baseline_offset.total(), data.size());
  EXPECT_EQ(a.baseline_centered.total(), data.size());
  std::vector<std::size_t> covered;
  for (const FoldResult& f : a.folds) covered.insert(covered.end(), f.test_indices.begin(), f.test_indices.end());
  std::sort(covered.begin(), covered.end());
  for (std::size_t i = 0; i < covered.size(); ++i) EXPECT_EQ(covered[i], i);
  const auto na = a.named(), nb = b.named();
  EXPECT_EQ(metrics_csv(na), metrics_csv(nb));
  ASSERT_EQ(na.size(), 3u);
  EXPECT_EQ(na[0].model, "CNN-STN");
  EXPECT_EQ(checksum(a.last_stn.group(kLocalizer)), checksum(b.last_stn.group(kLocalizer)));
}

TEST(FocusPanel, SideBySide) {
  const Dataset& data = small_data();
  const TrainConfig config = small_config();
  const ModelParams m = build_stn_model(config.geom, 9);
  const Tensor patch = offset_patch(data, TrainItem{0, 0.0, Offset{4, 4}});
  const StnOutput out = stn_forward(m, patch, config.geom);
  const Image8 panel = focus_panel(patch, AffineTheta::from_values(out.theta.values()), out.focus);
  EXPECT_EQ(panel.height, 64u);
  EXPECT_GT(panel.width, 128u);
  EXPECT_EQ(panel.rgb.size(), panel.width * panel.height * 3);
}
