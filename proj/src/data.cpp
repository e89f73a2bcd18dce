#include "cellstn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include <png.h>

#include "cellstn/errors.hpp"

namespace cellstn {

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

Tensor Image8::to_tensor() const {
  const std::size_t plane = width * height;
  std::vector<double> v(3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) v[c * plane + p] = double(rgb[3 * p + c]) / 255.0;
  return Tensor::from({3, height, width}, std::move(v));
}

Image8 Image8::from_tensor(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw DimensionError("image must be [3,H,W], got " + shape_string(image.shape()));
  Image8 out;
  out.height = image.dim(1);
  out.width = image.dim(2);
  const std::size_t plane = out.width * out.height;
  out.rgb.resize(3 * plane);
  const auto v = image.values();
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      out.rgb[3 * p + c] = std::uint8_t(std::lround(std::clamp(v[c * plane + p], 0.0, 1.0) * 255.0));
  return out;
}

Image8 read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw ParseError("cannot read PNG " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  Image8 out;
  out.width = img.width;
  out.height = img.height;
  out.rgb.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ParseError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(image.width);
  img.height = png_uint_32(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.rgb.data(), 0, nullptr))
    throw std::runtime_error("cannot write PNG " + path.string() + ": " + img.message);
}

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <typename T>
T parse_number(const std::string& s, const std::string& where, const char* column) {
  std::size_t used = 0;
  T v{};
  try {
    if constexpr (std::is_integral_v<T>)
      v = T(std::stoll(s, &used));
    else
      v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size())
    throw ParseError(where + ": column " + column + " is not a number: '" + s + "'");
  return v;
}

}  // namespace

std::vector<Annotation> load_annotations(const std::filesystem::path& csv_path,
                                         const std::filesystem::path& image_root) {
  std::ifstream in(csv_path);
  if (!in) throw ParseError("cannot open annotation file " + csv_path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(csv_path.string() + ":1: missing header");
  const auto header = split_csv(line);
  const std::vector<std::string> required = {"image", "cx", "cy", "class"};
  if (header.size() < 4 || !std::equal(required.begin(), required.end(), header.begin()))
    throw ParseError(csv_path.string() + ":1: header must start with image,cx,cy,class");
  const bool has_truth = header.size() >= 6 && header[4] == "true_cx" && header[5] == "true_cy";

  std::vector<Annotation> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = csv_path.string() + ":" + std::to_string(line_no);
    const auto f = split_csv(line);
    if (f.size() != header.size())
      throw ParseError(where + ": expected " + std::to_string(header.size()) + " fields, got " +
                       std::to_string(f.size()));
    Annotation a;
    a.line = line_no;
    if (f[0].empty()) throw ParseError(where + ": empty image reference");
    a.image = image_root / f[0];
    a.cx = parse_number<int>(f[1], where, "cx");
    a.cy = parse_number<int>(f[2], where, "cy");
    const auto cls = parse_class(f[3]);
    if (!cls) throw ParseError(where + ": unknown class '" + f[3] + "'");
    a.cls = *cls;
    if (has_truth) {
      a.true_cx = parse_number<double>(f[4], where, "true_cx");
      a.true_cy = parse_number<double>(f[5], where, "true_cy");
    }
    rows.push_back(std::move(a));
  }
  return rows;
}

void write_annotations(const std::filesystem::path& csv_path, std::span<const Annotation> rows,
                       const std::filesystem::path& image_root) {
  const bool truth = !rows.empty() && std::all_of(rows.begin(), rows.end(), [](const Annotation& a) {
    return a.true_cx.has_value() && a.true_cy.has_value();
  });
  std::ofstream out(csv_path);
  if (!out) throw std::runtime_error("cannot write " + csv_path.string());
  out << "image,cx,cy,class" << (truth ? ",true_cx,true_cy" : "") << "\n";
  char buf[64];
  for (const Annotation& a : rows) {
    out << a.image.lexically_relative(image_root).generic_string() << "," << a.cx << "," << a.cy << ","
        << class_name(a.cls);
    if (truth) {
      std::snprintf(buf, sizeof buf, ",%.6f,%.6f", *a.true_cx, *a.true_cy);
      out << buf;
    }
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Geometry helpers
// ---------------------------------------------------------------------------

Tensor crop_centered(const Tensor& image, int cx, int cy, int size, const std::string& what) {
  if (image.rank() != 3) throw DimensionError("crop_centered: image must be [C,H,W], got " + shape_string(image.shape()));
  if (size <= 0) throw ContractError("crop_centered: size must be positive");
  const int x0 = cx - size / 2, y0 = cy - size / 2;
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (x0 < 0 || y0 < 0 || std::size_t(x0 + size) > w || std::size_t(y0 + size) > h)
    throw ContractError("crop_centered: " + (what.empty() ? std::string("window") : what) + " at (" +
                        std::to_string(cx) + ", " + std::to_string(cy) + ") with side " + std::to_string(size) +
                        " leaves the image " + shape_string(image.shape()));
  const std::size_t s = std::size_t(size);
  std::vector<double> out(c * s * s);
  const double* src = image.values().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < s; ++y) {
      const double* row = src + (ch * h + std::size_t(y0) + y) * w + std::size_t(x0);
      std::copy(row, row + s, out.begin() + std::ptrdiff_t((ch * s + y) * s));
    }
  return Tensor::from({c, s, s}, std::move(out));
}

int canvas_size(const CropGeometry& geom) { return geom.input_size + 2 * geom.max_offset(); }

namespace {

double snap(double p) {
  const double r = std::nearbyint(p);
  return std::abs(p - r) <= 1e-10 ? r : p;
}

}  // namespace

// Output pixel q reads source c + R(-angle)(q - c).
Tensor rotate_image(const Tensor& image, double angle) {
  if (image.rank() != 3) throw DimensionError("rotate: image must be [C,H,W], got " + shape_string(image.shape()));
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double cs = std::cos(angle), sn = std::sin(angle);
  const double cx = (double(w) - 1.0) / 2.0, cy = (double(h) - 1.0) / 2.0;
  const double* src = image.values().data();
  std::vector<double> out(image.size(), 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double qx = double(x) - cx, qy = double(y) - cy;
      const double px = snap(cx + cs * qx + sn * qy);
      const double py = snap(cy - sn * qx + cs * qy);
      const double fx = std::floor(px), fy = std::floor(py);
      const double ax = px - fx, ay = py - fy;
      const long x0 = long(fx), y0 = long(fy);
      const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
      const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (int t = 0; t < 4; ++t) {
        if (wts[t] == 0.0 || xs[t] < 0 || ys[t] < 0 || xs[t] >= long(w) || ys[t] >= long(h)) continue;
        const std::size_t off = std::size_t(ys[t]) * w + std::size_t(xs[t]);
        for (std::size_t c = 0; c < ch; ++c) out[(c * h + y) * w + x] += wts[t] * src[c * h * w + off];
      }
    }
  return Tensor::from(image.shape(), std::move(out));
}

Sample rotate_sample(const Sample& sample, double angle, const CropGeometry& geom) {
  Sample out = sample;
  out.image = rotate_image(sample.image, angle);
  const double cs = std::cos(angle), sn = std::sin(angle);
  const int bound = geom.max_offset();
  out.dx = std::clamp(int(std::lround(cs * sample.dx - sn * sample.dy)), -bound, bound);
  out.dy = std::clamp(int(std::lround(sn * sample.dx + cs * sample.dy)), -bound, bound);
  if (out.truth) {
    const double cx = (double(sample.image.dim(2)) - 1.0) / 2.0;
    const double cy = (double(sample.image.dim(1)) - 1.0) / 2.0;
    const double qx = out.truth->cx - cx, qy = out.truth->cy - cy;
    out.truth->cx = cx + cs * qx - sn * qy;
    out.truth->cy = cy + sn * qx + cs * qy;
    out.truth->angle += angle;
  }
  return out;
}

Sample augment_rotate(const Sample& sample, std::mt19937_64& rng, const CropGeometry& geom) {
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  return rotate_sample(sample, angle(rng), geom);
}

// ---------------------------------------------------------------------------
// Balancing and folds
// ---------------------------------------------------------------------------

std::vector<std::size_t> balance_indices(std::span<const CellClass> labels, std::mt19937_64& rng) {
  std::array<std::vector<std::size_t>, kNumClasses> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[class_index(labels[i])].push_back(i);
  std::size_t minority = labels.size();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (members[c].empty())
      throw ContractError("balance_classes: class '" + std::string(class_name(CellClass(c))) + "' has no samples");
    minority = std::min(minority, members[c].size());
  }
  std::vector<std::size_t> keep;
  keep.reserve(minority * kNumClasses);
  for (auto& m : members) {
    std::shuffle(m.begin(), m.end(), rng);
    keep.insert(keep.end(), m.begin(), m.begin() + std::ptrdiff_t(minority));
  }
  std::sort(keep.begin(), keep.end());
  return keep;
}

std::vector<Sample> balance_classes(std::vector<Sample> samples, std::mt19937_64& rng) {
  std::vector<CellClass> labels;
  labels.reserve(samples.size());
  for (const Sample& s : samples) labels.push_back(s.label.cls);
  std::vector<Sample> out;
  for (std::size_t i : balance_indices(labels, rng)) out.push_back(std::move(samples[i]));
  return out;
}

std::vector<std::size_t> FoldPlan::training_indices(std::size_t f) const {
  if (f >= folds.size()) throw ContractError("fold index out of range");
  std::vector<std::size_t> out;
  for (std::size_t g = 0; g < folds.size(); ++g)
    if (g != f) out.insert(out.end(), folds[g].begin(), folds[g].end());
  std::sort(out.begin(), out.end());
  return out;
}

FoldPlan kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ContractError("kfold_split: k must be at least 2, got " + std::to_string(k));
  if (k > n)
    throw ContractError("kfold_split: cannot split " + std::to_string(n) + " samples into " + std::to_string(k) +
                        " folds");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  FoldPlan plan{k, seed, {}};
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    plan.folds.emplace_back(order.begin() + std::ptrdiff_t(pos), order.begin() + std::ptrdiff_t(pos + size));
    pos += size;
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

Dataset::Dataset(std::vector<Record> records, const CropGeometry& geom) : records_(std::move(records)), geom_(geom) {
  geom_.validate();
  const std::size_t side = std::size_t(canvas_size(geom_));
  for (const Record& r : records_)
    if (!r.canvas || r.canvas->width != side || r.canvas->height != side)
      throw ContractError("dataset record '" + r.id + "' needs a " + std::to_string(side) + "x" +
                          std::to_string(side) + " canvas");
}

Dataset::Dataset(const Dataset& other) : records_(other.records_), geom_(other.geom_) {}

Dataset& Dataset::operator=(const Dataset& other) {
  records_ = other.records_;
  geom_ = other.geom_;
  label_reads_ = 0;
  return *this;
}

CellClass Dataset::label(std::size_t i) const {
  label_reads_.fetch_add(1);
  return records_.at(i).cls;
}

std::vector<CellClass> Dataset::labels() const {
  std::vector<CellClass> out;
  out.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) out.push_back(label(i));
  return out;
}

Tensor Dataset::canvas(std::size_t i) const { return records_.at(i).canvas->to_tensor(); }

Sample Dataset::sample(std::size_t i) const {
  const Record& r = records_.at(i);
  Sample s;
  s.image = r.canvas->to_tensor();
  s.label = {label(i)};
  s.source_id = r.id;
  s.truth = r.truth;
  return s;
}

Dataset load_dataset(std::span<const Annotation> annotations, const CropGeometry& geom) {
  geom.validate();
  const int side = canvas_size(geom);
  std::map<std::filesystem::path, std::shared_ptr<const Image8>> cache;
  std::vector<Record> records;
  for (const Annotation& a : annotations) {
    auto& src = cache[a.image];
    if (!src) src = std::make_shared<const Image8>(read_png(a.image));
    auto canvas = std::make_shared<Image8>();
    canvas->width = canvas->height = std::size_t(side);
    canvas->rgb.assign(std::size_t(side) * std::size_t(side) * 3, 0);
    const int x0 = a.cx - side / 2, y0 = a.cy - side / 2;
    for (int y = 0; y < side; ++y) {
      const int sy = y0 + y;
      if (sy < 0 || sy >= int(src->height)) continue;
      for (int x = 0; x < side; ++x) {
        const int sx = x0 + x;
        if (sx < 0 || sx >= int(src->width)) continue;
        std::copy_n(&src->rgb[(std::size_t(sy) * src->width + std::size_t(sx)) * 3], 3,
                    &canvas->rgb[(std::size_t(y) * std::size_t(side) + std::size_t(x)) * 3]);
      }
    }
    Record r;
    r.canvas = std::move(canvas);
    r.cls = a.cls;
    r.id = a.image.filename().string() + "@" + std::to_string(a.cx) + "," + std::to_string(a.cy);
    if (a.true_cx && a.true_cy) {
      SyntheticTruth t;
      t.cx = *a.true_cx - double(x0);
      t.cy = *a.true_cy - double(y0);
      r.truth = t;
    }
    records.push_back(std::move(r));
  }
  return Dataset(std::move(records), geom);
}

// ---------------------------------------------------------------------------
// Synthetic cells
// ---------------------------------------------------------------------------

namespace {

struct Rgb {
  double r, g, b;
};

double coverage(double signed_distance) { return std::clamp(0.5 - signed_distance, 0.0, 1.0); }

void blend(std::vector<double>& img, std::size_t side, std::size_t x, std::size_t y, Rgb color, double alpha) {
  const std::size_t plane = side * side, p = y * side + x;
  img[p] += alpha * (color.r - img[p]);
  img[plane + p] += alpha * (color.g - img[plane + p]);
  img[2 * plane + p] += alpha * (color.b - img[2 * plane + p]);
}

template <typename SignedDistance>
void paint(std::vector<double>& img, std::size_t side, double cx, double cy, double radius, Rgb color, double opacity,
           SignedDistance sd) {
  const long x0 = std::max(0L, long(std::floor(cx - radius - 2))), x1 = std::min(long(side) - 1, long(cx + radius + 2));
  const long y0 = std::max(0L, long(std::floor(cy - radius - 2))), y1 = std::min(long(side) - 1, long(cy + radius + 2));
  for (long y = y0; y <= y1; ++y)
    for (long x = x0; x <= x1; ++x) {
      const double a = coverage(sd(double(x) - cx, double(y) - cy));
      if (a > 0.0) blend(img, side, std::size_t(x), std::size_t(y), color, a * opacity);
    }
}

Record render_cell(CellClass cls, std::uint64_t seed, std::size_t side, std::size_t index) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const std::size_t plane = side * side;
  std::vector<double> img(3 * plane);

  // Stained background with low-frequency texture.
  const Rgb base{uni(0.88, 0.95), uni(0.72, 0.82), uni(0.82, 0.90)};
  struct Wave {
    double kx, ky, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i) {
    const double dir = uni(0.0, 2.0 * std::numbers::pi), period = uni(18.0, 60.0);
    waves.push_back({std::cos(dir) * 2.0 * std::numbers::pi / period, std::sin(dir) * 2.0 * std::numbers::pi / period,
                     uni(0.0, 2.0 * std::numbers::pi), uni(0.01, 0.03)});
  }
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      double t = 0.0;
      for (const Wave& w : waves) t += w.amp * std::sin(w.kx * double(x) + w.ky * double(y) + w.phase);
      const std::size_t p = y * side + x;
      img[p] = base.r + t;
      img[plane + p] = base.g + 1.3 * t;
      img[2 * plane + p] = base.b + 0.8 * t;
    }

  const double centre = (double(side) - 1.0) / 2.0;
  // Faint distractor blobs away from the target.
  const int blobs = std::uniform_int_distribution<int>(4, 8)(rng);
  for (int i = 0; i < blobs; ++i) {
    const double dist = uni(34.0, centre), dir = uni(0.0, 2.0 * std::numbers::pi);
    const double bx = centre + dist * std::cos(dir), by = centre + dist * std::sin(dir), r = uni(3.0, 7.0);
    const Rgb c{uni(0.62, 0.75), uni(0.45, 0.58), uni(0.68, 0.80)};
    paint(img, side, bx, by, r, c, uni(0.35, 0.6), [r](double x, double y) { return std::hypot(x, y) - r; });
  }

  SyntheticTruth truth;
  truth.cx = centre + uni(-0.5, 0.5);
  truth.cy = centre + uni(-0.5, 0.5);
  switch (cls) {
    case CellClass::granulocyte: {
      const double outer = uni(13.0, 19.0), thick = uni(3.5, 5.0), mid = outer - thick / 2;
      truth.size = outer;
      const Rgb c{uni(0.36, 0.44), uni(0.14, 0.22), uni(0.48, 0.56)};
      paint(img, side, truth.cx, truth.cy, outer, c, 1.0,
            [=](double x, double y) { return std::abs(std::hypot(x, y) - mid) - thick / 2; });
      break;
    }
    case CellClass::mitosis: {
      const double half_len = uni(12.0, 18.0), half_w = uni(2.5, 4.0);
      truth.size = half_len + half_w;
      truth.angle = uni(0.0, std::numbers::pi);
      const double ca = std::cos(truth.angle), sa = std::sin(truth.angle);
      const Rgb c{uni(0.14, 0.22), uni(0.03, 0.08), uni(0.24, 0.32)};
      paint(img, side, truth.cx, truth.cy, truth.size, c, 1.0, [=](double x, double y) {
        const double along = std::clamp(x * ca + y * sa, -half_len, half_len);
        return std::hypot(x - along * ca, y - along * sa) - half_w;
      });
      break;
    }
    case CellClass::tumor: {
      const double r = uni(10.0, 16.0);
      truth.size = r;
      const Rgb c{uni(0.46, 0.54), uni(0.26, 0.34), uni(0.58, 0.66)};
      paint(img, side, truth.cx, truth.cy, r, c, 1.0, [r](double x, double y) { return std::hypot(x, y) - r; });
      break;
    }
  }

  std::normal_distribution<double> noise(0.0, 0.02);
  for (double& v : img) v += noise(rng);

  Record rec;
  rec.canvas = std::make_shared<const Image8>(Image8::from_tensor(Tensor::from({3, side, side}, std::move(img))));
  rec.cls = cls;
  char id[32];
  std::snprintf(id, sizeof id, "synth_%05zu", index);
  rec.id = id;
  rec.truth = truth;
  return rec;
}

}  // namespace

Dataset synth_generate(std::size_t n_per_class, const CropGeometry& geom, std::mt19937_64& rng) {
  if (n_per_class == 0) throw ContractError("synth_generate: n_per_class must be at least 1");
  geom.validate();
  const std::size_t side = std::size_t(canvas_size(geom));
  const std::size_t n = n_per_class * kNumClasses;
  std::vector<std::uint64_t> seeds(n);
  for (auto& s : seeds) s = rng();
  std::vector<Record> records;
  records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) records.push_back(render_cell(CellClass(i % kNumClasses), seeds[i], side, i));
  return Dataset(std::move(records), geom);
}

void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const int centre = canvas_size(data.geometry()) / 2;
  std::vector<Annotation> rows;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Record& r = data.record(i);
    Annotation a;
    a.image = dir / (r.id + ".png");
    a.cx = a.cy = centre;
    a.cls = r.cls;
    if (r.truth) {
      a.true_cx = r.truth->cx;
      a.true_cy = r.truth->cy;
    }
    write_png(a.image, *r.canvas);
    rows.push_back(std::move(a));
  }
  write_annotations(dir / "manifest.csv", rows, dir);
}

}  // namespace cellstn
