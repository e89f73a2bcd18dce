// cellstn: synthetic data, cropping, staged training, evaluation,
// cross-validation and gradient checks.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cellstn/config.hpp"
#include "cellstn/data.hpp"
#include "cellstn/errors.hpp"
#include "cellstn/gradient_suite.hpp"
#include "cellstn/kernels.hpp"
#include "cellstn/metrics.hpp"
#include "cellstn/networks.hpp"
#include "cellstn/ops.hpp"
#include "cellstn/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cellstn;

namespace {

struct ConfigOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool paper_schedule = false;
  std::size_t divisor = 10;
};

struct DataOptions {
  std::string manifest;
  std::string image_root;
  std::size_t synthetic = 0;
};

struct RunOptions {
  std::string out;
  std::string runs_dir = "runs";
};

void add_config_options(CLI::App* cmd, ConfigOptions& o) {
  cmd->add_option("--config", o.config_path, "Config file (key = value)")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.overrides, "Override a config key, key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "Master seed");
  cmd->add_flag("--paper-schedule", o.paper_schedule, "Use the full 50/200/100/200 epoch schedule");
  cmd->add_option("--schedule-divisor", o.divisor, "Divide the default epoch counts by this")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
}

void add_data_options(CLI::App* cmd, DataOptions& o) {
  auto* manifest = cmd->add_option("--data", o.manifest, "Annotation CSV or synthetic manifest")->check(CLI::ExistingFile);
  cmd->add_option("--images", o.image_root, "Image root for --data (default: the CSV's directory)");
  auto* synth = cmd->add_option("--synthetic", o.synthetic, "Generate this many synthetic samples per class");
  manifest->excludes(synth);
}

void add_run_options(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--out", o.out, "Run directory (default: <runs-dir>/<timestamp>-seed<seed>)");
  cmd->add_option("--runs-dir", o.runs_dir, "Parent of timestamped run directories")->capture_default_str();
}

TrainConfig resolve_config(const ConfigOptions& o) {
  TrainConfig c = o.paper_schedule ? TrainConfig{} : TrainConfig{}.scaled(o.divisor);
  if (!o.config_path.empty()) c = load_config(o.config_path, c);
  for (const std::string& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ParseError("--set expects key=value, got '" + kv + "'");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

Dataset load_data(const DataOptions& o, const TrainConfig& config) {
  if (o.synthetic > 0) {
    std::mt19937_64 rng(config.seed);
    return synth_generate(o.synthetic, config.geom, rng);
  }
  if (o.manifest.empty()) throw ContractError("no data: pass --data <csv> or --synthetic <n>");
  const fs::path csv(o.manifest);
  const fs::path root = o.image_root.empty() ? csv.parent_path() : fs::path(o.image_root);
  const auto rows = load_annotations(csv, root);
  if (rows.empty()) throw ContractError(o.manifest + " has no annotations");
  return load_dataset(rows, config.geom);
}

fs::path make_run_dir(const RunOptions& o, std::uint64_t seed) {
  fs::path dir;
  if (!o.out.empty()) {
    dir = o.out;
  } else {
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", std::localtime(&now));
    dir = fs::path(o.runs_dir) / (std::string(stamp) + "-seed" + std::to_string(seed));
  }
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

class LossLog {
 public:
  EpochHook hook(std::string prefix = "") {
    return [this, prefix](std::string_view stage, std::size_t epoch, double loss) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%s%s,%zu,%.9g\n", prefix.c_str(), std::string(stage).c_str(), epoch, loss);
      rows_ += buf;
      std::fprintf(stderr, "  %s%s epoch %zu: loss %.6f\n", prefix.c_str(), std::string(stage).c_str(), epoch, loss);
    };
  }
  void write(const fs::path& path, const std::string& header) const { write_text(path, header + "\n" + rows_); }

 private:
  std::string rows_;
};

std::vector<std::size_t> all_indices(const Dataset& data) {
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

void check_geometry(const ModelParams& model, const TrainConfig& config) {
  const auto expect = [](const Network& n, int size) {
    if (n.spec.in_size != std::size_t(size))
      throw ContractError("checkpoint " + n.spec.name + " expects " + std::to_string(n.spec.in_size) +
                          " px inputs, config says " + std::to_string(size));
  };
  if (model.has(kLocalizer)) {
    expect(model.group(kLocalizer), config.geom.input_size);
    expect(model.group(kClassifier), config.geom.cell_size);
  } else {
    expect(model.group(kBaseline), config.geom.input_size);
  }
}

void dump_focus(const ModelParams& model, const TrainConfig& config, const Dataset& data,
                std::span<const TrainItem> items, std::size_t count, const fs::path& dir) {
  if (count == 0 || !model.has(kLocalizer)) return;
  fs::create_directories(dir);
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < std::min(count, items.size()); ++i) {
    const Tensor patch = offset_patch(data, items[i]);
    const StnOutput out = stn_forward(model, patch, config.geom);
    const AffineTheta theta = AffineTheta::from_values(out.theta.values());
    const CellClass predicted = argmax_class(out.probs.values());
    char name[128];
    std::snprintf(name, sizeof name, "focus_%03zu_%s_pred-%s.png", i,
                  std::string(class_name(data.record(items[i].record).cls)).c_str(),
                  std::string(class_name(predicted)).c_str());
    write_png(dir / name, focus_panel(patch, theta, out.focus));
  }
}

int cmd_synth(std::size_t n, const ConfigOptions& co, const std::string& out) {
  const TrainConfig config = resolve_config(co);
  std::mt19937_64 rng(config.seed);
  const Dataset data = synth_generate(n, config.geom, rng);
  write_dataset(data, out);
  std::cout << "wrote " << data.size() << " samples to " << (fs::path(out) / "manifest.csv").string() << "\n";
  return 0;
}

int cmd_crop(const std::string& csv, const std::string& images, const std::string& out, int size,
             const ConfigOptions& co) {
  const TrainConfig config = resolve_config(co);
  const int side = size > 0 ? size : canvas_size(config.geom);
  const fs::path root = images.empty() ? fs::path(csv).parent_path() : fs::path(images);
  const auto rows = load_annotations(csv, root);
  fs::create_directories(out);
  std::map<fs::path, Tensor> cache;
  std::vector<Annotation> written;
  for (const Annotation& a : rows) {
    auto it = cache.find(a.image);
    if (it == cache.end()) it = cache.emplace(a.image, read_png(a.image).to_tensor()).first;
    const std::string what = csv + ":" + std::to_string(a.line) + " (" + a.image.filename().string() + ")";
    const Tensor patch = crop_centered(it->second, a.cx, a.cy, side, what);
    char name[64];
    std::snprintf(name, sizeof name, "crop_%05zu.png", written.size());
    Annotation w = a;
    w.image = fs::path(out) / name;
    const int x0 = a.cx - side / 2, y0 = a.cy - side / 2;
    w.cx = a.cx - x0;
    w.cy = a.cy - y0;
    if (a.true_cx) w.true_cx = *a.true_cx - x0;
    if (a.true_cy) w.true_cy = *a.true_cy - y0;
    write_png(w.image, Image8::from_tensor(patch));
    written.push_back(std::move(w));
  }
  write_annotations(fs::path(out) / "manifest.csv", written, out);
  std::cout << "wrote " << written.size() << " crops of side " << side << " to " << out << "\n";
  return 0;
}

int cmd_train(bool baseline, const ConfigOptions& co, const DataOptions& dopt, const RunOptions& ropt) {
  const TrainConfig config = resolve_config(co);
  const Dataset data = load_data(dopt, config);
  const fs::path dir = make_run_dir(ropt, config.seed);
  write_text(dir / "config.toml", format_config(config));
  std::mt19937_64 rng(config.seed);
  const auto idx = all_indices(data);
  const auto items = prepare_training_items(data, idx, config, rng);
  std::fprintf(stderr, "%zu records, %zu training views\n", data.size(), items.size());
  LossLog log;
  ModelParams model;
  if (baseline) {
    model = build_baseline_model(config.geom, config.seed);
    train_baseline(model, config, data, items, log.hook());
    save_checkpoint(dir / "baseline.ckpt", model);
  } else {
    model = build_stn_model(config.geom, config.seed, config.localizer_stride);
    stage1_train_classifier(model, config, data, centered_items(items), log.hook());
    stage2_train_localizer(model, config, data, items, log.hook());
    stage3_joint_refine(model, config, data, items, log.hook());
    save_checkpoint(dir / "stn.ckpt", model);
  }
  log.write(dir / "losses.csv", "stage,epoch,loss");
  std::cout << "run directory " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& mode, std::size_t focus, const ConfigOptions& co,
             const DataOptions& dopt, const RunOptions& ropt) {
  const TrainConfig config = resolve_config(co);
  const ModelParams model = load_checkpoint(checkpoint);
  check_geometry(model, config);
  const Dataset data = load_data(dopt, config);
  const fs::path dir = make_run_dir(ropt, config.seed);
  std::mt19937_64 rng(config.seed);
  const auto idx = all_indices(data);
  const auto items = prepare_test_items(idx, config.geom, rng);
  std::vector<NamedReport> reports;
  if (model.has(kLocalizer)) {
    reports.push_back({"CNN-STN", evaluate(model, config, data, items)});
  } else {
    if (mode != "centered") reports.push_back({"CNN baseline (offset)", evaluate(model, config, data, items, PatchMode::offset)});
    if (mode != "offset")
      reports.push_back({"CNN baseline (centered)", evaluate(model, config, data, items, PatchMode::centered)});
  }
  write_metrics_csv(dir / "metrics.csv", reports);
  const std::string report = render_report(reports);
  write_text(dir / "report.txt", report);
  dump_focus(model, config, data, items, focus, dir / "focus");
  std::cout << report << "run directory " << dir.string() << "\n";
  return 0;
}

int cmd_cv(std::size_t focus, bool save_models, const ConfigOptions& co, const DataOptions& dopt,
           const RunOptions& ropt) {
  const TrainConfig config = resolve_config(co);
  const Dataset data = load_data(dopt, config);
  const fs::path dir = make_run_dir(ropt, config.seed);
  write_text(dir / "config.toml", format_config(config));
  LossLog log;
  std::string fold_rows = "fold,model,accuracy,precision,recall,f1,support\n";
  std::size_t current_fold = 0;
  CvHooks hooks;
  hooks.on_epoch = [&](std::string_view stage, std::size_t epoch, double loss) {
    log.hook(std::to_string(current_fold) + ",")(stage, epoch, loss);
  };
  hooks.on_fold = [&](const FoldResult& r) {
    const std::pair<const char*, const MetricsReport*> rows[] = {{"CNN-STN", &r.stn},
                                                                 {"CNN-STN after stage 1", &r.stage1_offset},
                                                                 {"CNN baseline (offset)", &r.baseline_offset},
                                                                 {"CNN baseline (centered)", &r.baseline_centered}};
    for (const auto& [name, m] : rows) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "%zu,%s,%.6f,%.6f,%.6f,%.6f,%zu\n", r.fold, name, m->accuracy,
                    m->weighted.precision, m->weighted.recall, m->weighted.f1, m->total());
      fold_rows += buf;
    }
    std::fprintf(stderr, "fold %zu: CNN-STN %.4f, baseline offset %.4f, centered %.4f\n", r.fold, r.stn.accuracy,
                 r.baseline_offset.accuracy, r.baseline_centered.accuracy);
    ++current_fold;
  };
  std::fprintf(stderr, "cross-validating %zu records in %zu folds\n", data.size(), config.folds);
  const CrossValidation cv = cross_validate(config, data, hooks);
  const auto reports = cv.named();
  write_metrics_csv(dir / "metrics.csv", reports);
  write_text(dir / "folds.csv", fold_rows);
  log.write(dir / "losses.csv", "fold,stage,epoch,loss");
  const std::string report = render_report(reports);
  write_text(dir / "report.txt", report);
  if (save_models) {
    save_checkpoint(dir / "stn.ckpt", cv.last_stn);
    save_checkpoint(dir / "baseline.ckpt", cv.last_baseline);
  }
  dump_focus(cv.last_stn, config, data, cv.last_test_items, focus, dir / "focus");
  std::cout << report << "run directory " << dir.string() << "\n";
  return 0;
}

int cmd_gradcheck(std::size_t instances, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  bool all = true;
  for (const SuiteResult& r : run_gradient_suite(instances, seed)) {
    std::printf("%s %-45s %zu instances, %6zu elements, max rel error %.2e", r.passed ? "PASS" : "FAIL",
                r.op.c_str(), r.instances, r.checked, r.max_rel_error);
    if (r.kinks > 0) std::printf(", %zu skipped at kinks", r.kinks);
    std::printf("\n");
    for (const GradcheckFailure& f : r.failures)
      std::printf("     input %zu element %zu: analytic %.9g numeric %.9g (rel %.2e)\n", f.input, f.element, f.analytic,
                  f.numeric, f.rel_error);
    all = all && r.passed;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s in %.1f s (kernels: %s)\n", all ? "all gradients match" : "gradient mismatch", secs,
              std::string(kernels::isa_name(kernels::active_isa())).c_str());
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial-transformer cell classifier and baseline CNN"};
  app.require_subcommand(1);

  ConfigOptions co;
  DataOptions dopt;
  RunOptions ropt;

  auto* synth = app.add_subcommand("synth", "Render a synthetic dataset (PNG canvases + manifest.csv)");
  std::size_t synth_n = 0;
  std::string synth_out;
  synth->add_option("--n", synth_n, "Samples per class")->required()->check(CLI::PositiveNumber);
  synth->add_option("--out", synth_out, "Output directory")->required();
  add_config_options(synth, co);

  auto* crop = app.add_subcommand("crop", "Cut cell-centred canvases from annotated images");
  std::string crop_csv, crop_images, crop_out;
  int crop_size = 0;
  crop->add_option("--annotations", crop_csv, "Annotation CSV (image,cx,cy,class)")->required()->check(CLI::ExistingFile);
  crop->add_option("--images", crop_images, "Image root (default: the CSV's directory)");
  crop->add_option("--out", crop_out, "Output directory")->required();
  crop->add_option("--size", crop_size, "Crop side (default: d_i + 2 * max offset)");
  add_config_options(crop, co);

  auto* train = app.add_subcommand("train", "Train the CNN-STN through all three stages");
  add_config_options(train, co);
  add_data_options(train, dopt);
  add_run_options(train, ropt);

  auto* baseline = app.add_subcommand("baseline", "Train the baseline CNN on offset patches");
  add_config_options(baseline, co);
  add_data_options(baseline, dopt);
  add_run_options(baseline, ropt);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on off-centre (and centred) patches");
  std::string checkpoint, mode = "both";
  std::size_t focus = 0;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--mode", mode, "Baseline patch mode")->check(CLI::IsMember({"offset", "centered", "both"}))->capture_default_str();
  eval->add_option("--dump-focus", focus, "Write this many focus-crop panels");
  add_config_options(eval, co);
  add_data_options(eval, dopt);
  add_run_options(eval, ropt);

  auto* cv = app.add_subcommand("cv", "k-fold cross-validation of CNN-STN and baseline");
  bool save_models = false;
  cv->add_option("--dump-focus", focus, "Write this many focus-crop panels from the last fold");
  cv->add_flag("--save-checkpoints", save_models, "Save the last fold's models");
  add_config_options(cv, co);
  add_data_options(cv, dopt);
  add_run_options(cv, ropt);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operation");
  std::size_t instances = 5;
  std::uint64_t grad_seed = 1;
  grad->add_option("--instances", instances, "Random instances per operation")->capture_default_str();
  grad->add_option("--seed", grad_seed, "Seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(synth_n, co, synth_out);
    if (*crop) return cmd_crop(crop_csv, crop_images, crop_out, crop_size, co);
    if (*train) return cmd_train(false, co, dopt, ropt);
    if (*baseline) return cmd_train(true, co, dopt, ropt);
    if (*eval) return cmd_eval(checkpoint, mode, focus, co, dopt, ropt);
    if (*cv) return cmd_cv(focus, save_models, co, dopt, ropt);
    if (*grad) return cmd_gradcheck(instances, grad_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
