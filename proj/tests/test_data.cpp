#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>

#include "cellstn/data.hpp"
#include "cellstn/errors.hpp"
#include "test_util.hpp"

using namespace cellstn;
using cellstn::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cellstn_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string parse_error_of(const fs::path& csv) {
  try {
    load_annotations(csv, csv.parent_path());
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

// Disc of radius r at (cx, cy) on a zero background, anti-aliased by 4x4 supersampling.
Tensor disc_image(std::size_t side, double cx, double cy, double r) {
  std::vector<double> v(side * side);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      int inside = 0;
      for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx)
          inside += std::hypot(double(x) + (sx + 0.5) / 4 - 0.5 - cx, double(y) + (sy + 0.5) / 4 - 0.5 - cy) <= r;
      v[y * side + x] = inside / 16.0;
    }
  return Tensor::from({1, side, side}, std::move(v));
}

double mean_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v;
  return s / double(t.size());
}

}  // namespace

TEST(Annotations, ParsesRowsAndTruth) {
  const fs::path dir = scratch_dir("ann_ok");
  write_text(dir / "a.csv", "image,cx,cy,class\nimg1.png,520,311,mitosis\nsub/img2.png,10,20,tumor\n\n");
  const auto rows = load_annotations(dir / "a.csv", dir);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].image, dir / "img1.png");
  EXPECT_EQ(rows[0].cx, 520);
  EXPECT_EQ(rows[0].cy, 311);
  EXPECT_EQ(class_index(rows[0].cls), 1u);
  EXPECT_EQ(rows[0].line, 2u);
  EXPECT_EQ(rows[1].cls, CellClass::tumor);
  EXPECT_FALSE(rows[1].true_cx.has_value());

  write_text(dir / "b.csv", "image,cx,cy,class,true_cx,true_cy\nx.png,1,2,granulocyte,1.25,2.5\n");
  const auto truth = load_annotations(dir / "b.csv", dir);
  ASSERT_EQ(truth.size(), 1u);
  EXPECT_EQ(*truth[0].true_cx, 1.25);
  EXPECT_EQ(*truth[0].true_cy, 2.5);
}

TEST(Annotations, HeaderOnlyIsEmpty) {
  const fs::path dir = scratch_dir("ann_empty");
  write_text(dir / "a.csv", "image,cx,cy,class\n");
  EXPECT_TRUE(load_annotations(dir / "a.csv", dir).empty());
}

TEST(Annotations, ErrorsNameLineAndValue) {
  const fs::path dir = scratch_dir("ann_bad");
  write_text(dir / "a.csv", "image,cx,cy,class\nok.png,1,2,tumor\nbad.png,3,4,fibroblast\n");
  std::string msg = parse_error_of(dir / "a.csv");
  EXPECT_NE(msg.find(":3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("fibroblast"), std::string::npos) << msg;

  write_text(dir / "b.csv", "image,cx,cy,class\nok.png,1x,2,tumor\n");
  msg = parse_error_of(dir / "b.csv");
  EXPECT_NE(msg.find(":2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("cx"), std::string::npos) << msg;

  write_text(dir / "c.csv", "image,cx,cy,class\nok.png,1,2\n");
  EXPECT_NE(parse_error_of(dir / "c.csv").find(":2"), std::string::npos);
  write_text(dir / "d.csv", "file,x,y,label\n");
  EXPECT_NE(parse_error_of(dir / "d.csv").find("header"), std::string::npos);
  EXPECT_THROW(load_annotations(dir / "missing.csv", dir), ParseError);
}

TEST(Annotations, WriteThenLoadRoundTrips) {
  const fs::path dir = scratch_dir("ann_rt");
  std::vector<Annotation> rows(2);
  rows[0].image = dir / "p" / "a.png";
  rows[0].cx = 5;
  rows[0].cy = 6;
  rows[0].cls = CellClass::mitosis;
  rows[0].true_cx = 5.125;
  rows[0].true_cy = 6.5;
  rows[1].image = dir / "b.png";
  rows[1].cls = CellClass::granulocyte;
  rows[1].true_cx = 0.0;
  rows[1].true_cy = -1.0;
  write_annotations(dir / "m.csv", rows, dir);
  const auto back = load_annotations(dir / "m.csv", dir);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].image, rows[i].image);
    EXPECT_EQ(back[i].cx, rows[i].cx);
    EXPECT_EQ(back[i].cls, rows[i].cls);
    EXPECT_EQ(*back[i].true_cx, *rows[i].true_cx);
  }
}

TEST(Png, RoundTripIsExact) {
  const fs::path dir = scratch_dir("png");
  Image8 img;
  img.width = 5;
  img.height = 3;
  for (std::size_t i = 0; i < 45; ++i) img.rgb.push_back(std::uint8_t(i * 5 + 1));
  write_png(dir / "x.png", img);
  const Image8 back = read_png(dir / "x.png");
  EXPECT_EQ(back.width, 5u);
  EXPECT_EQ(back.height, 3u);
  EXPECT_EQ(back.rgb, img.rgb);
  const Tensor t = img.to_tensor();
  EXPECT_EQ(t.shape(), (Shape{3, 3, 5}));
  EXPECT_EQ(t[0], 1.0 / 255.0);   // red of pixel (0,0)
  EXPECT_EQ(t[15], 6.0 / 255.0);  // green of pixel (0,0)
  EXPECT_EQ(Image8::from_tensor(t).rgb, img.rgb);
  EXPECT_THROW(read_png(dir / "missing.png"), ParseError);
}

TEST(Crop, CentralBlock) {
  std::vector<double> v(256 * 256);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = double(i);
  const Tensor img = Tensor::from({1, 256, 256}, v);
  const Tensor c = crop_centered(img, 128, 128, 128);
  ASSERT_EQ(c.shape(), (Shape{1, 128, 128}));
  for (std::size_t y = 0; y < 128; ++y)
    for (std::size_t x = 0; x < 128; ++x) ASSERT_EQ(c[y * 128 + x], double((y + 64) * 256 + x + 64));
  const Tensor again = crop_centered(c, 64, 64, 128);
  for (std::size_t i = 0; i < c.size(); ++i) ASSERT_EQ(again[i], c[i]);
}

TEST(Crop, ConstantImage) {
  const Tensor c = crop_centered(Tensor::full({3, 200, 150}, 0.25), 70, 90, 128);
  for (double v : c.values()) EXPECT_EQ(v, 0.25);
}

TEST(Crop, OutOfBoundsNamesAnnotation) {
  try {
    crop_centered(Tensor::zeros({3, 100, 100}), 10, 50, 64, "slide7.png:12");
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("slide7.png:12"), std::string::npos);
  }
}

TEST(Rotate, ZeroAngleIsIdentity) {
  std::mt19937_64 rng(1);
  Sample s;
  s.image = random_tensor({3, 21, 21}, rng, 0, 1, false);
  s.dx = 5;
  s.dy = -7;
  CropGeometry g;
  const Sample r = rotate_sample(s, 0.0, g);
  EXPECT_EQ(r.dx, 5);
  EXPECT_EQ(r.dy, -7);
  for (std::size_t i = 0; i < s.image.size(); ++i) ASSERT_EQ(r.image[i], s.image[i]);
}

TEST(Rotate, HalfTurnOnPointSymmetricPattern) {
  const std::size_t n = 23;
  std::vector<double> v(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = double(x) - 11, dy = double(y) - 11;
      v[y * n + x] = std::cos(0.3 * dx * dy) + 0.01 * (dx * dx + dy * dy);
    }
  const Tensor img = Tensor::from({1, n, n}, v);
  const Tensor r = rotate_image(img, std::numbers::pi);
  for (std::size_t i = 0; i < v.size(); ++i) ASSERT_NEAR(r[i], v[i], 1e-12);
}

TEST(Rotate, QuarterTurnMovesPixels) {
  std::vector<double> v(5 * 5, 0.0);
  v[2 * 5 + 4] = 1.0;  // right of centre
  const Tensor r = rotate_image(Tensor::from({1, 5, 5}, v), std::numbers::pi / 2);
  double total = 0.0;
  for (double x : r.values()) total += x;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_TRUE(r[4 * 5 + 2] > 0.999 || r[0 * 5 + 2] > 0.999);
}

TEST(Rotate, DiscMeanIsConserved) {
  const Tensor img = disc_image(96, 47.5, 47.5, 20.0);
  const double before = mean_of(img);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> angle(0, 2 * std::numbers::pi);
  for (int i = 0; i < 10; ++i) EXPECT_NEAR(mean_of(rotate_image(img, angle(rng))), before, 1e-3);
}

TEST(Rotate, OffsetsFollowAndClamp) {
  CropGeometry g;
  Sample s;
  s.image = Tensor::zeros({3, 9, 9});
  s.dx = 10;
  s.dy = 0;
  Sample r = rotate_sample(s, std::numbers::pi / 2, g);
  EXPECT_EQ(std::abs(r.dx), 0);
  EXPECT_EQ(std::abs(r.dy), 10);
  s.dx = 32;
  s.dy = 32;
  r = rotate_sample(s, std::numbers::pi / 4, g);
  EXPECT_LE(std::abs(r.dx), 32);
  EXPECT_LE(std::abs(r.dy), 32);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const Sample a = augment_rotate(s, rng, g);
    EXPECT_LE(std::abs(a.dx), g.max_offset());
    EXPECT_LE(std::abs(a.dy), g.max_offset());
    EXPECT_EQ(a.label.cls, s.label.cls);
  }
}

TEST(Balance, MinorityRule) {
  std::vector<CellClass> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(CellClass::granulocyte);
  for (int i = 0; i < 50; ++i) labels.push_back(CellClass::mitosis);
  for (int i = 0; i < 80; ++i) labels.push_back(CellClass::tumor);
  std::shuffle(labels.begin(), labels.end(), std::mt19937_64(4));
  std::mt19937_64 rng(5);
  const auto kept = balance_indices(labels, rng);
  std::map<CellClass, int> hist;
  for (std::size_t i : kept) ++hist[labels[i]];
  EXPECT_EQ(hist[CellClass::granulocyte], 50);
  EXPECT_EQ(hist[CellClass::mitosis], 50);
  EXPECT_EQ(hist[CellClass::tumor], 50);
  EXPECT_TRUE(std::is_sorted(kept.begin(), kept.end()));
}

TEST(Balance, UniformIsUnchanged) {
  std::vector<CellClass> labels;
  for (int i = 0; i < 30; ++i) labels.push_back(CellClass(i % 3));
  std::mt19937_64 rng(6);
  const auto kept = balance_indices(labels, rng);
  ASSERT_EQ(kept.size(), 30u);
  for (std::size_t i = 0; i < 30; ++i) EXPECT_EQ(kept[i], i);
}

TEST(Balance, MissingClassIsRejected) {
  std::vector<CellClass> labels(10, CellClass::tumor);
  std::mt19937_64 rng(7);
  EXPECT_THROW(balance_indices(labels, rng), ContractError);
}

TEST(Balance, SamplesKeepOrder) {
  std::vector<Sample> samples;
  const int counts[3] = {4, 2, 3};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < counts[c]; ++i) {
      Sample s;
      s.label.cls = CellClass(c);
      s.source_id = std::to_string(c) + "_" + std::to_string(i);
      samples.push_back(s);
    }
  std::mt19937_64 rng(8);
  const auto out = balance_classes(samples, rng);
  ASSERT_EQ(out.size(), 6u);
  std::vector<std::string> ids;
  for (const Sample& s : samples) ids.push_back(s.source_id);
  std::size_t last = 0;
  for (const Sample& s : out) {
    const auto it = std::find(ids.begin(), ids.end(), s.source_id);
    ASSERT_NE(it, ids.end());
    EXPECT_GE(std::size_t(it - ids.begin()), last);
    last = std::size_t(it - ids.begin());
  }
}

TEST(Folds, Sizes) {
  auto sizes = [](const FoldPlan& p) {
    std::vector<std::size_t> s;
    for (const auto& f : p.folds) s.push_back(f.size());
    return s;
  };
  EXPECT_EQ(sizes(kfold_split(100, 5, 1)), std::vector<std::size_t>(5, 20));
  EXPECT_EQ(sizes(kfold_split(7, 5, 1)), (std::vector<std::size_t>{2, 2, 1, 1, 1}));
  EXPECT_THROW(kfold_split(4, 5, 1), ContractError);
  EXPECT_THROW(kfold_split(10, 1, 1), ContractError);
}

TEST(Folds, DeterministicAndSeeded) {
  const FoldPlan a = kfold_split(50, 5, 9), b = kfold_split(50, 5, 9), c = kfold_split(50, 5, 10);
  EXPECT_EQ(a.folds, b.folds);
  EXPECT_NE(a.folds, c.folds);
  const auto train = a.training_indices(2);
  EXPECT_EQ(train.size(), 40u);
  EXPECT_TRUE(std::is_sorted(train.begin(), train.end()));
  for (std::size_t i : a.folds[2]) EXPECT_FALSE(std::binary_search(train.begin(), train.end(), i));
}

TEST(Synth, CountsAndDeterminism) {
  CropGeometry g;
  std::mt19937_64 r1(11), r2(11);
  const Dataset a = synth_generate(4, g, r1), b = synth_generate(4, g, r2);
  ASSERT_EQ(a.size(), 12u);
  std::map<CellClass, int> hist;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++hist[a.label(i)];
    EXPECT_EQ(a.record(i).canvas->rgb, b.record(i).canvas->rgb);
    EXPECT_EQ(a.record(i).canvas->width, std::size_t(canvas_size(g)));
  }
  for (int c = 0; c < 3; ++c) EXPECT_EQ(hist[CellClass(c)], 4);
  EXPECT_THROW(synth_generate(0, g, r1), ContractError);
}

TEST(Synth, SamplesAreCentredAndNormalised) {
  CropGeometry g;
  std::mt19937_64 rng(12);
  const Dataset d = synth_generate(2, g, rng);
  const double centre = (canvas_size(g) - 1) / 2.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Sample s = d.sample(i);
    EXPECT_EQ(s.dx, 0);
    EXPECT_EQ(s.dy, 0);
    ASSERT_TRUE(s.truth.has_value());
    EXPECT_LE(std::abs(s.truth->cx - centre), 0.5);
    EXPECT_LE(std::abs(s.truth->cy - centre), 0.5);
    EXPECT_LE(2 * s.truth->size, g.cell_size);
    for (double v : s.image.values()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Synth, DiscCentroidMatchesTruth) {
  CropGeometry g;
  std::mt19937_64 rng(13);
  const Dataset d = synth_generate(20, g, rng);
  int checked = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.label(i) != CellClass::tumor) continue;
    const Record& r = d.record(i);
    const Image8& img = *r.canvas;
    // Darkness relative to the local background, inside the recorded radius plus a margin.
    const double radius = r.truth->size + 3;
    double bg = 0.0;
    int bg_n = 0;
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        const double dist = std::hypot(double(x) - r.truth->cx, double(y) - r.truth->cy);
        if (dist > radius && dist < radius + 6) {
          const std::uint8_t* p = &img.rgb[(y * img.width + x) * 3];
          bg += (p[0] + p[1] + p[2]) / 3.0;
          ++bg_n;
        }
      }
    bg /= bg_n;
    double sw = 0.0, sx = 0.0, sy = 0.0;
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        if (std::hypot(double(x) - r.truth->cx, double(y) - r.truth->cy) > radius) continue;
        const std::uint8_t* p = &img.rgb[(y * img.width + x) * 3];
        const double w = std::max(0.0, bg - (p[0] + p[1] + p[2]) / 3.0);
        sw += w;
        sx += w * double(x);
        sy += w * double(y);
      }
    EXPECT_LT(std::hypot(sx / sw - r.truth->cx, sy / sw - r.truth->cy), 1.0) << r.id;
    ++checked;
  }
  EXPECT_EQ(checked, 20);
}

namespace {

// Brute-force template matcher: normalised cross-correlation of the darkness
// map around the cell against rendered rings, bars and discs.
class TemplateOracle {
 public:
  static constexpr int kHalf = 24;

  TemplateOracle() {
    for (double outer = 13; outer <= 19; outer += 1)
      for (double thick : {3.5, 4.25, 5.0}) add(CellClass::granulocyte, [=](double x, double y) {
          return std::abs(std::hypot(x, y) - (outer - thick / 2)) <= thick / 2;
        });
    for (double len = 12; len <= 18; len += 2)
      for (double w : {2.5, 3.25, 4.0})
        for (int a = 0; a < 24; ++a) {
          const double ang = a * std::numbers::pi / 24, ca = std::cos(ang), sa = std::sin(ang);
          add(CellClass::mitosis, [=](double x, double y) {
            const double along = std::clamp(x * ca + y * sa, -len, len);
            return std::hypot(x - along * ca, y - along * sa) <= w;
          });
        }
    for (double r = 10; r <= 16; r += 1) add(CellClass::tumor, [=](double x, double y) { return std::hypot(x, y) <= r; });
  }

  CellClass classify(const Image8& img, double cx, double cy) const {
    std::vector<double> dark;
    for (int y = -kHalf; y < kHalf; ++y)
      for (int x = -kHalf; x < kHalf; ++x) {
        const std::size_t px = std::size_t(std::lround(cx) + x), py = std::size_t(std::lround(cy) + y);
        const std::uint8_t* p = &img.rgb[(py * img.width + px) * 3];
        dark.push_back(1.0 - (p[0] + p[1] + p[2]) / 765.0);
      }
    normalise(dark);
    double best = -2.0;
    CellClass cls = CellClass::granulocyte;
    for (const auto& [c, t] : templates_) {
      double s = 0.0;
      for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * dark[i];
      if (s > best) {
        best = s;
        cls = c;
      }
    }
    return cls;
  }

 private:
  template <typename Inside>
  void add(CellClass c, Inside inside) {
    std::vector<double> t;
    for (int y = -kHalf; y < kHalf; ++y)
      for (int x = -kHalf; x < kHalf; ++x) t.push_back(inside(double(x), double(y)) ? 1.0 : 0.0);
    normalise(t);
    templates_.emplace_back(c, std::move(t));
  }

  static void normalise(std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= double(v.size());
    double n = 0.0;
    for (double& x : v) {
      x -= m;
      n += x * x;
    }
    n = std::sqrt(n);
    for (double& x : v) x /= n;
  }

  std::vector<std::pair<CellClass, std::vector<double>>> templates_;
};

}  // namespace

TEST(Synth, TemplateMatchingSeparatesClasses) {
  CropGeometry g;
  std::mt19937_64 rng(14);
  const Dataset d = synth_generate(100, g, rng);
  const TemplateOracle oracle;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Record& r = d.record(i);
    const double c = (canvas_size(g) - 1) / 2.0;
    correct += oracle.classify(*r.canvas, c, c) == r.cls;
  }
  EXPECT_GE(double(correct) / double(d.size()), 0.99) << correct << " of " << d.size();
}

TEST(Dataset, LabelReadsAreCounted) {
  CropGeometry g;
  std::mt19937_64 rng(15);
  const Dataset d = synth_generate(2, g, rng);
  EXPECT_EQ(d.label_reads(), 0u);
  (void)d.canvas(0);
  (void)d.record(1);
  EXPECT_EQ(d.label_reads(), 0u);
  (void)d.label(0);
  (void)d.labels();
  EXPECT_EQ(d.label_reads(), 1u + d.size());
}

TEST(Dataset, LoadCutsPaddedCanvases) {
  const fs::path dir = scratch_dir("load");
  Image8 img;
  img.width = 120;
  img.height = 100;
  img.rgb.assign(120 * 100 * 3, 200);
  write_png(dir / "slide.png", img);
  write_text(dir / "a.csv", "image,cx,cy,class\nslide.png,60,50,mitosis\nslide.png,5,5,tumor\n");
  CropGeometry g;
  const Dataset d = load_dataset(load_annotations(dir / "a.csv", dir), g);
  ASSERT_EQ(d.size(), 2u);
  const int side = canvas_size(g);
  const Tensor c0 = d.canvas(0);
  EXPECT_EQ(c0.shape(), (Shape{3, std::size_t(side), std::size_t(side)}));
  // Canvas centre holds the annotated pixel; outside the image is zero.
  EXPECT_NEAR(c0[std::size_t(side / 2) * side + side / 2], 200 / 255.0, 1e-15);
  EXPECT_EQ(c0[0], 0.0);
  EXPECT_EQ(d.label(0), CellClass::mitosis);
}

TEST(Dataset, WriteThenLoadReproducesCanvases) {
  const fs::path dir = scratch_dir("synth_rt");
  CropGeometry g;
  std::mt19937_64 rng(16);
  const Dataset d = synth_generate(1, g, rng);
  write_dataset(d, dir);
  const auto rows = load_annotations(dir / "manifest.csv", dir);
  ASSERT_EQ(rows.size(), 3u);
  const Dataset back = load_dataset(rows, g);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.record(i).canvas->rgb, d.record(i).canvas->rgb);
    EXPECT_EQ(back.label(i), d.label(i));
    EXPECT_NEAR(*rows[i].true_cx, d.record(i).truth->cx, 1e-6);
  }
}
