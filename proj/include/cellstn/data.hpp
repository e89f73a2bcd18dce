#pragma once
// Dataset ingestion, augmentation, class balancing, k-fold splitting and the
// synthetic cell generator.
//
// A sample's image is a canvas centred on its cell and large enough to hold
// every offset crop: side d_i + 2 * max_offset. Canvases are kept as 8-bit RGB
// in a Dataset and expanded to [3,S,S] tensors in [0,1] on demand.
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cellstn/losses.hpp"
#include "cellstn/stn.hpp"
#include "cellstn/tensor.hpp"

namespace cellstn {

// 8-bit RGB raster, row-major with interleaved channels.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  // [3,H,W], values / 255.
  Tensor to_tensor() const;
  // Clamps to [0,1] and rounds to the nearest 1/255.
  static Image8 from_tensor(const Tensor& image);
};

Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

struct SyntheticTruth {
  double cx = 0.0;  // true centre in canvas pixel coordinates
  double cy = 0.0;
  double size = 0.0;   // outer radius or half length
  double angle = 0.0;  // bar orientation
};

struct Sample {
  Tensor image;  // [3,S,S] canvas centred on the cell
  ClassLabel label;
  int dx = 0;
  int dy = 0;
  std::string source_id;
  std::optional<SyntheticTruth> truth;
};

// One row of an annotation CSV.
struct Annotation {
  std::filesystem::path image;  // resolved against the image root
  int cx = 0;
  int cy = 0;
  CellClass cls = CellClass::granulocyte;
  std::optional<double> true_cx;
  std::optional<double> true_cy;
  std::size_t line = 0;
};

// Header `image,cx,cy,class`, optionally followed by `true_cx,true_cy`.
std::vector<Annotation> load_annotations(const std::filesystem::path& csv_path,
                                         const std::filesystem::path& image_root);
void write_annotations(const std::filesystem::path& csv_path, std::span<const Annotation> rows,
                       const std::filesystem::path& image_root);

// Axis-aligned size x size window with the cell centre at the window centre:
// origin (cx - size/2, cy - size/2).
Tensor crop_centered(const Tensor& image, int cx, int cy, int size, const std::string& what = "");

// Canvas side needed for every offset crop of the geometry.
int canvas_size(const CropGeometry& geom);

// Rotation of a [C,H,W] image by `angle` about its centre ((W-1)/2, (H-1)/2),
// bilinear, zero fill.
Tensor rotate_image(const Tensor& image, double angle);

// rotate_image applied to a sample. Offsets are
// rotated with the image, rounded and clamped to the geometry's bounds.
Sample rotate_sample(const Sample& sample, double angle, const CropGeometry& geom);
// Angle drawn uniformly from [0, 2 pi).
Sample augment_rotate(const Sample& sample, std::mt19937_64& rng, const CropGeometry& geom);

// Indices (ascending) that survive deleting random members of every class down
// to the minority count. Throws ContractError if a class is absent.
std::vector<std::size_t> balance_indices(std::span<const CellClass> labels, std::mt19937_64& rng);
std::vector<Sample> balance_classes(std::vector<Sample> samples, std::mt19937_64& rng);

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> folds;

  // Every index outside fold f, ascending.
  std::vector<std::size_t> training_indices(std::size_t f) const;
};

// Shuffled partition into k folds; the first n % k folds hold one extra index.
FoldPlan kfold_split(std::size_t n, std::size_t k, std::uint64_t seed);

// Cell records over shared 8-bit canvases.
struct Record {
  std::shared_ptr<const Image8> canvas;  // centred on the cell
  CellClass cls = CellClass::granulocyte;
  std::string id;
  std::optional<SyntheticTruth> truth;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<Record> records, const CropGeometry& geom);
  Dataset(const Dataset& other);
  Dataset& operator=(const Dataset& other);

  std::size_t size() const { return records_.size(); }
  const CropGeometry& geometry() const { return geom_; }
  const Record& record(std::size_t i) const { return records_.at(i); }

  // Class label of record i. Every call is counted.
  CellClass label(std::size_t i) const;
  std::vector<CellClass> labels() const;
  std::size_t label_reads() const { return label_reads_.load(); }

  // Canvas tensor of record i; never touches the label.
  Tensor canvas(std::size_t i) const;
  Sample sample(std::size_t i) const;

 private:
  std::vector<Record> records_;
  CropGeometry geom_;
  mutable std::atomic<std::size_t> label_reads_{0};
};

// Canvases cut from annotated images, zero padded where they leave the image.
Dataset load_dataset(std::span<const Annotation> annotations, const CropGeometry& geom);

// Renders n_per_class samples of each class, interleaved by class. Each sample
// draws its own seed from rng, so rendering order does not matter.
Dataset synth_generate(std::size_t n_per_class, const CropGeometry& geom, std::mt19937_64& rng);

// Writes one PNG per record plus manifest.csv (annotation schema with
// true_cx,true_cy when known).
void write_dataset(const Dataset& data, const std::filesystem::path& dir);

}  // namespace cellstn
