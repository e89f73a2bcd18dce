#pragma once
// Staged training, baseline training, evaluation and cross-validation.
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "cellstn/config.hpp"
#include "cellstn/data.hpp"
#include "cellstn/metrics.hpp"
#include "cellstn/networks.hpp"

namespace cellstn {

struct Offset {
  int dx = 0;
  int dy = 0;
};

// One training or test view of a dataset record: optionally rotated about the
// cell, optionally cropped off centre.
struct TrainItem {
  std::size_t record = 0;
  double angle = 0.0;
  std::optional<Offset> offset;
};

// Views materialised from the record canvas.
Tensor view_canvas(const Dataset& data, const TrainItem& item);
Tensor offset_patch(const Dataset& data, const TrainItem& item);    // [3,d_i,d_i]; offset (0,0) when absent
Tensor centered_patch(const Dataset& data, const TrainItem& item);  // [3,d_i,d_i]
Tensor centered_cell(const Dataset& data, const TrainItem& item);   // [3,d_c,d_c]

// Training views of `indices`: balanced when config.balance, each kept record
// once as is and once rotated when config.augment, every view with a uniform
// random offset.
std::vector<TrainItem> prepare_training_items(const Dataset& data, std::span<const std::size_t> indices,
                                              const TrainConfig& config, std::mt19937_64& rng);
// One unrotated view per index with a uniform random offset.
std::vector<TrainItem> prepare_test_items(std::span<const std::size_t> indices, const CropGeometry& geom,
                                          std::mt19937_64& rng);
// Copies with offsets set to (0,0).
std::vector<TrainItem> centered_items(std::span<const TrainItem> items);

using EpochHook = std::function<void(std::string_view stage, std::size_t epoch, double mean_loss)>;

struct StageResult {
  std::vector<double> loss_trace;  // sample-weighted mean loss per epoch
};

// Classifier on centred d_c crops with cross-entropy. Items must carry zero
// offsets.
StageResult stage1_train_classifier(ModelParams& model, const TrainConfig& config, const Dataset& data,
                                    std::span<const TrainItem> items, const EpochHook& hook = {});
// Localizer on offset patches with the localization loss. Items must carry
// offsets; labels are never read.
StageResult stage2_train_localizer(ModelParams& model, const TrainConfig& config, const Dataset& data,
                                   std::span<const TrainItem> items, const EpochHook& hook = {});
// All parameters with the combined loss through the transformer.
StageResult stage3_joint_refine(ModelParams& model, const TrainConfig& config, const Dataset& data,
                                std::span<const TrainItem> items, const EpochHook& hook = {});
// Baseline on full offset patches with cross-entropy.
StageResult train_baseline(ModelParams& model, const TrainConfig& config, const Dataset& data,
                           std::span<const TrainItem> items, const EpochHook& hook = {});

enum class PatchMode { offset, centered };

// Localizer + classifier models always see offset patches; baseline models
// see offset or centred patches by mode.
std::vector<CellClass> predict(const ModelParams& model, const TrainConfig& config, const Dataset& data,
                               std::span<const TrainItem> items, PatchMode mode = PatchMode::offset);
// Localizer output per item, [6] each.
std::vector<AffineTheta> predict_theta(const ModelParams& model, const TrainConfig& config, const Dataset& data,
                                       std::span<const TrainItem> items);
MetricsReport evaluate(const ModelParams& model, const TrainConfig& config, const Dataset& data,
                       std::span<const TrainItem> items, PatchMode mode = PatchMode::offset);

struct FoldResult {
  std::size_t fold = 0;
  std::size_t train_views = 0;
  std::vector<std::size_t> test_indices;
  MetricsReport stn;
  MetricsReport stage1_offset;  // classifier after stage 1 only, off-centre patches
  MetricsReport baseline_offset;
  MetricsReport baseline_centered;
  StageResult stage1, stage2, stage3, baseline;
};

struct CrossValidation {
  std::vector<FoldResult> folds;
  // Ensemble metrics over the concatenated test predictions of all folds.
  MetricsReport stn;
  MetricsReport baseline_offset;
  MetricsReport baseline_centered;
  // Models of the last fold.
  ModelParams last_stn;
  ModelParams last_baseline;
  std::vector<TrainItem> last_test_items;

  std::vector<NamedReport> named() const;
};

struct CvHooks {
  EpochHook on_epoch;
  std::function<void(const FoldResult&)> on_fold;
};

CrossValidation cross_validate(const TrainConfig& config, const Dataset& data, const CvHooks& hooks = {});

// Side-by-side panel: the patch with the sampled region outlined, next to the
// focus crop scaled to the patch height.
Image8 focus_panel(const Tensor& patch, const AffineTheta& theta, const Tensor& focus);

}  // namespace cellstn
