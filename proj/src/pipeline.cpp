#include "cellstn/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "cellstn/adam.hpp"
#include "cellstn/errors.hpp"
#include "cellstn/losses.hpp"
#include "cellstn/ops.hpp"

namespace cellstn {
namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(a), std::uint32_t(b)};
  std::uint32_t out[2];
  seq.generate(std::begin(out), std::end(out));
  return (std::uint64_t(out[0]) << 32) | out[1];
}

enum StageTag : std::uint64_t { kStage1 = 1, kStage2, kStage3, kBaselineStage, kFold = 100 };

int canvas_centre(const Dataset& data) { return canvas_size(data.geometry()) / 2; }

using ViewFn = Tensor (*)(const Dataset&, const TrainItem&);

// [B,3,S,S] batch of views.
Tensor batch_of(const Dataset& data, std::span<const TrainItem> items, std::span<const std::size_t> pick, ViewFn view) {
  std::vector<double> values;
  Shape one;
  for (std::size_t i : pick) {
    const Tensor t = view(data, items[i]);
    if (one.empty()) {
      one = t.shape();
      values.reserve(pick.size() * t.size());
    }
    values.insert(values.end(), t.values().begin(), t.values().end());
  }
  Shape shape{pick.size()};
  shape.insert(shape.end(), one.begin(), one.end());
  return Tensor::from(std::move(shape), std::move(values));
}

CropGeometry offset_geometry(const CropGeometry& geom, const TrainItem& item) {
  CropGeometry g = geom;
  g.dx = item.offset ? item.offset->dx : 0;
  g.dy = item.offset ? item.offset->dy : 0;
  return g;
}

using BatchLoss = std::function<Tensor(std::span<const std::size_t>)>;

StageResult run_stage(std::string_view name, const StageSchedule& schedule, std::vector<Tensor> trainable,
                      std::size_t n, std::size_t batch_size, std::uint64_t seed, const BatchLoss& batch_loss,
                      const EpochHook& hook) {
  if (n == 0) throw ContractError(std::string(name) + ": empty training set");
  AdamState adam;
  adam.learning_rate = schedule.learning_rate;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  StageResult result;
  for (std::size_t epoch = 1; epoch <= schedule.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t begin = 0; begin < n; begin += batch_size) {
      const std::span<const std::size_t> pick(order.data() + begin, std::min(batch_size, n - begin));
      for (Tensor& t : trainable) t.zero_grad();
      const Tensor loss = batch_loss(pick);
      loss.backward();
      adam_step(trainable, adam);
      total += loss.item() * double(pick.size());
    }
    result.loss_trace.push_back(total / double(n));
    if (hook) hook(name, epoch, result.loss_trace.back());
  }
  return result;
}

std::vector<CellClass> labels_of(const Dataset& data, std::span<const TrainItem> items,
                                 std::span<const std::size_t> pick) {
  std::vector<CellClass> out;
  out.reserve(pick.size());
  for (std::size_t i : pick) out.push_back(data.label(items[i].record));
  return out;
}

std::vector<AffineTheta> ground_truth_of(const Dataset& data, std::span<const TrainItem> items,
                                         std::span<const std::size_t> pick) {
  std::vector<AffineTheta> out;
  out.reserve(pick.size());
  for (std::size_t i : pick) out.push_back(make_ground_truth_theta(offset_geometry(data.geometry(), items[i])));
  return out;
}

void require_offsets(std::span<const TrainItem> items, const char* stage) {
  for (const TrainItem& it : items)
    if (!it.offset)
      throw ContractError(std::string(stage) + ": record " + std::to_string(it.record) + " has no crop offset");
}

}  // namespace

Tensor view_canvas(const Dataset& data, const TrainItem& item) {
  Tensor canvas = data.canvas(item.record);
  return item.angle == 0.0 ? canvas : rotate_image(canvas, item.angle);
}

Tensor offset_patch(const Dataset& data, const TrainItem& item) {
  const int c = canvas_centre(data);
  return crop_with_offset(view_canvas(data, item), c, c, offset_geometry(data.geometry(), item));
}

Tensor centered_patch(const Dataset& data, const TrainItem& item) {
  const int c = canvas_centre(data);
  return crop_centered(view_canvas(data, item), c, c, data.geometry().input_size, data.record(item.record).id);
}

Tensor centered_cell(const Dataset& data, const TrainItem& item) {
  const int c = canvas_centre(data);
  return crop_centered(view_canvas(data, item), c, c, data.geometry().cell_size, data.record(item.record).id);
}

std::vector<TrainItem> prepare_training_items(const Dataset& data, std::span<const std::size_t> indices,
                                              const TrainConfig& config, std::mt19937_64& rng) {
  std::vector<std::size_t> kept(indices.begin(), indices.end());
  if (config.balance) {
    std::vector<CellClass> labels;
    for (std::size_t i : kept) labels.push_back(data.label(i));
    std::vector<std::size_t> survivors;
    for (std::size_t j : balance_indices(labels, rng)) survivors.push_back(kept[j]);
    kept = std::move(survivors);
  }
  const int bound = config.geom.max_offset();
  std::uniform_int_distribution<int> offset(-bound, bound);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::vector<TrainItem> items;
  for (std::size_t i : kept) {
    const Offset o1{offset(rng), offset(rng)};
    items.push_back({i, 0.0, o1});
    if (config.augment) {
      const double a = angle(rng);
      const Offset o2{offset(rng), offset(rng)};
      items.push_back({i, a, o2});
    }
  }
  return items;
}

std::vector<TrainItem> prepare_test_items(std::span<const std::size_t> indices, const CropGeometry& geom,
                                          std::mt19937_64& rng) {
  std::uniform_int_distribution<int> offset(-geom.max_offset(), geom.max_offset());
  std::vector<TrainItem> items;
  for (std::size_t i : indices) {
    const Offset o{offset(rng), offset(rng)};
    items.push_back({i, 0.0, o});
  }
  return items;
}

std::vector<TrainItem> centered_items(std::span<const TrainItem> items) {
  std::vector<TrainItem> out(items.begin(), items.end());
  for (TrainItem& it : out) it.offset = Offset{};
  return out;
}

StageResult stage1_train_classifier(ModelParams& model, const TrainConfig& config, const Dataset& data,
                                    std::span<const TrainItem> items, const EpochHook& hook) {
  config.validate();
  for (const TrainItem& it : items)
    if (it.offset && (it.offset->dx != 0 || it.offset->dy != 0))
      throw ContractError("stage 1 trains on centred crops; record " + std::to_string(it.record) +
                          " carries offset (" + std::to_string(it.offset->dx) + ", " +
                          std::to_string(it.offset->dy) + ")");
  const Network& classifier = model.group(kClassifier);
  return run_stage("stage1", config.stage1, classifier.params, items.size(), config.batch_size,
                   derive_seed(config.seed, kStage1),
                   [&](std::span<const std::size_t> pick) {
                     const Tensor probs = classifier.forward(batch_of(data, items, pick, centered_cell));
                     const auto labels = labels_of(data, items, pick);
                     return cross_entropy(probs, labels);
                   },
                   hook);
}

StageResult stage2_train_localizer(ModelParams& model, const TrainConfig& config, const Dataset& data,
                                   std::span<const TrainItem> items, const EpochHook& hook) {
  config.validate();
  require_offsets(items, "stage 2");
  const Network& localizer = model.group(kLocalizer);
  return run_stage("stage2", config.stage2, localizer.params, items.size(), config.batch_size,
                   derive_seed(config.seed, kStage2),
                   [&](std::span<const std::size_t> pick) {
                     const Tensor theta = localizer.forward(batch_of(data, items, pick, offset_patch));
                     const auto gt = ground_truth_of(data, items, pick);
                     return localization_loss(theta, gt);
                   },
                   hook);
}

StageResult stage3_joint_refine(ModelParams& model, const TrainConfig& config, const Dataset& data,
                                std::span<const TrainItem> items, const EpochHook& hook) {
  config.validate();
  require_offsets(items, "stage 3");
  const LossWeights weights{config.kappa};
  return run_stage("stage3", config.stage3, model.tensors(), items.size(), config.batch_size,
                   derive_seed(config.seed, kStage3),
                   [&](std::span<const std::size_t> pick) {
                     const StnOutput out = stn_forward(model, batch_of(data, items, pick, offset_patch), config.geom);
                     const auto gt = ground_truth_of(data, items, pick);
                     const auto labels = labels_of(data, items, pick);
                     return combined_loss(localization_loss(out.theta, gt), cross_entropy(out.probs, labels), weights);
                   },
                   hook);
}

StageResult train_baseline(ModelParams& model, const TrainConfig& config, const Dataset& data,
                           std::span<const TrainItem> items, const EpochHook& hook) {
  config.validate();
  const Network& net = model.group(kBaseline);
  return run_stage("baseline", config.baseline, net.params, items.size(), config.batch_size,
                   derive_seed(config.seed, kBaselineStage),
                   [&](std::span<const std::size_t> pick) {
                     const Tensor probs = net.forward(batch_of(data, items, pick, offset_patch));
                     const auto labels = labels_of(data, items, pick);
                     return cross_entropy(probs, labels);
                   },
                   hook);
}

std::vector<CellClass> predict(const ModelParams& model, const TrainConfig& config, const Dataset& data,
                               std::span<const TrainItem> items, PatchMode mode) {
  NoGradGuard no_grad;
  const bool stn = model.has(kLocalizer);
  const ViewFn view = stn || mode == PatchMode::offset ? offset_patch : centered_patch;
  std::vector<CellClass> out;
  out.reserve(items.size());
  std::vector<std::size_t> pick;
  for (std::size_t begin = 0; begin < items.size(); begin += config.batch_size) {
    pick.resize(std::min(config.batch_size, items.size() - begin));
    std::iota(pick.begin(), pick.end(), begin);
    const Tensor batch = batch_of(data, items, pick, view);
    const Tensor probs = stn ? stn_forward(model, batch, config.geom).probs : model.group(kBaseline).forward(batch);
    const auto p = probs.values();
    for (std::size_t r = 0; r < pick.size(); ++r) out.push_back(argmax_class(p.subspan(r * kNumClasses, kNumClasses)));
  }
  return out;
}

std::vector<AffineTheta> predict_theta(const ModelParams& model, const TrainConfig& config, const Dataset& data,
                                       std::span<const TrainItem> items) {
  NoGradGuard no_grad;
  const Network& localizer = model.group(kLocalizer);
  std::vector<AffineTheta> out;
  std::vector<std::size_t> pick;
  for (std::size_t begin = 0; begin < items.size(); begin += config.batch_size) {
    pick.resize(std::min(config.batch_size, items.size() - begin));
    std::iota(pick.begin(), pick.end(), begin);
    const Tensor theta = localizer.forward(batch_of(data, items, pick, offset_patch));
    for (std::size_t r = 0; r < pick.size(); ++r) out.push_back(AffineTheta::from_values(theta.values().subspan(r * 6, 6)));
  }
  return out;
}

MetricsReport evaluate(const ModelParams& model, const TrainConfig& config, const Dataset& data,
                       std::span<const TrainItem> items, PatchMode mode) {
  if (items.empty()) throw ContractError("evaluate: empty test set");
  const auto predicted = predict(model, config, data, items, mode);
  std::vector<CellClass> truth;
  for (const TrainItem& it : items) truth.push_back(data.label(it.record));
  return MetricsReport::from_predictions(truth, predicted);
}

std::vector<NamedReport> CrossValidation::named() const {
  return {{"CNN-STN", stn}, {"CNN baseline (offset)", baseline_offset}, {"CNN baseline (centered)", baseline_centered}};
}

CrossValidation cross_validate(const TrainConfig& config, const Dataset& data, const CvHooks& hooks) {
  config.validate();
  const FoldPlan plan = kfold_split(data.size(), config.folds, derive_seed(config.seed, kFold));
  CrossValidation cv;
  std::vector<CellClass> truth, stn_pred, base_off_pred, base_cen_pred;
  for (std::size_t f = 0; f < plan.k; ++f) {
    TrainConfig fold_config = config;
    fold_config.seed = derive_seed(config.seed, kFold + 1 + f);
    std::mt19937_64 rng(fold_config.seed);
    FoldResult r;
    r.fold = f;
    r.test_indices = plan.folds[f];
    const auto train_indices = plan.training_indices(f);
    const auto items = prepare_training_items(data, train_indices, fold_config, rng);
    const auto test = prepare_test_items(r.test_indices, config.geom, rng);
    r.train_views = items.size();

    ModelParams stn = build_stn_model(config.geom, derive_seed(fold_config.seed, 1), config.localizer_stride);
    r.stage1 = stage1_train_classifier(stn, fold_config, data, centered_items(items), hooks.on_epoch);
    r.stage1_offset = evaluate(stn, fold_config, data, test);
    r.stage2 = stage2_train_localizer(stn, fold_config, data, items, hooks.on_epoch);
    r.stage3 = stage3_joint_refine(stn, fold_config, data, items, hooks.on_epoch);
    const auto sp = predict(stn, fold_config, data, test);

    ModelParams base = build_baseline_model(config.geom, derive_seed(fold_config.seed, 2));
    r.baseline = train_baseline(base, fold_config, data, items, hooks.on_epoch);
    const auto bo = predict(base, fold_config, data, test, PatchMode::offset);
    const auto bc = predict(base, fold_config, data, test, PatchMode::centered);

    std::vector<CellClass> fold_truth;
    for (const TrainItem& it : test) fold_truth.push_back(data.label(it.record));
    r.stn = MetricsReport::from_predictions(fold_truth, sp);
    r.baseline_offset = MetricsReport::from_predictions(fold_truth, bo);
    r.baseline_centered = MetricsReport::from_predictions(fold_truth, bc);
    truth.insert(truth.end(), fold_truth.begin(), fold_truth.end());
    stn_pred.insert(stn_pred.end(), sp.begin(), sp.end());
    base_off_pred.insert(base_off_pred.end(), bo.begin(), bo.end());
    base_cen_pred.insert(base_cen_pred.end(), bc.begin(), bc.end());
    if (hooks.on_fold) hooks.on_fold(r);
    if (f + 1 == plan.k) {
      cv.last_stn = std::move(stn);
      cv.last_baseline = std::move(base);
      cv.last_test_items = test;
    }
    cv.folds.push_back(std::move(r));
  }
  cv.stn = MetricsReport::from_predictions(truth, stn_pred);
  cv.baseline_offset = MetricsReport::from_predictions(truth, base_off_pred);
  cv.baseline_centered = MetricsReport::from_predictions(truth, base_cen_pred);
  return cv;
}

Image8 focus_panel(const Tensor& patch, const AffineTheta& theta, const Tensor& focus) {
  if (patch.rank() != 3 || focus.rank() != 3 || patch.dim(0) != 3 || focus.dim(0) != 3)
    throw DimensionError("focus_panel: expected [3,H,W] patch and focus");
  const Image8 left = Image8::from_tensor(patch);
  const Image8 right = Image8::from_tensor(focus);
  const std::size_t h = left.height, gap = 4, zoom = std::max<std::size_t>(1, h / right.height);
  Image8 out;
  out.width = left.width + gap + right.width * zoom;
  out.height = std::max(h, right.height * zoom);
  out.rgb.assign(out.width * out.height * 3, 255);
  const auto put = [&out](long x, long y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || y < 0 || std::size_t(x) >= out.width || std::size_t(y) >= out.height) return;
    std::uint8_t* px = &out.rgb[(std::size_t(y) * out.width + std::size_t(x)) * 3];
    px[0] = r;
    px[1] = g;
    px[2] = b;
  };
  for (std::size_t y = 0; y < left.height; ++y)
    for (std::size_t x = 0; x < left.width; ++x) {
      const std::uint8_t* s = &left.rgb[(y * left.width + x) * 3];
      put(long(x), long(y), s[0], s[1], s[2]);
    }
  for (std::size_t y = 0; y < right.height * zoom; ++y)
    for (std::size_t x = 0; x < right.width * zoom; ++x) {
      const std::uint8_t* s = &right.rgb[((y / zoom) * right.width + x / zoom) * 3];
      put(long(left.width + gap + x), long(y), s[0], s[1], s[2]);
    }
  // Outline of the sampled region: the output square's edges mapped through theta.
  const double w = double(left.width), hh = double(left.height);
  const auto to_pixel = [&](double u, double v) {
    const double x = theta.a11() * u + theta.a12() * v + theta.tx();
    const double y = theta.a21() * u + theta.a22() * v + theta.ty();
    return std::pair{(x * w + w - 1.0) / 2.0, (y * hh + hh - 1.0) / 2.0};
  };
  const std::pair<double, double> corners[4] = {to_pixel(-1, -1), to_pixel(1, -1), to_pixel(1, 1), to_pixel(-1, 1)};
  for (int e = 0; e < 4; ++e) {
    const auto [x0, y0] = corners[e];
    const auto [x1, y1] = corners[(e + 1) % 4];
    const int steps = int(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
    for (int s = 0; s <= steps; ++s) {
      const double t = double(s) / steps;
      const long px = std::lround(x0 + t * (x1 - x0)), py = std::lround(y0 + t * (y1 - y0));
      if (px >= 0 && px < long(left.width) && py >= 0 && py < long(left.height)) put(px, py, 40, 220, 60);
    }
  }
  return out;
}

}  // namespace cellstn
