#pragma once

// The localizer, classifier and baseline networks.
//
// Each network is an interpreted layer list (NetworkSpec) plus its parameter
// tensors in layer order. Convolution and hidden dense layers are followed by
// ReLU; the output layer is affine (localizer) or softmax (classifiers).

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cellstn/stn.hpp"
#include "cellstn/tensor.hpp"

namespace cellstn {

struct InceptionSpec {
  std::size_t branch1x1 = 16;
  std::size_t branch3x3 = 16;
  std::size_t branch5x5 = 8;
  std::size_t branch_pool = 8;

  std::size_t out_channels() const { return branch1x1 + branch3x3 + branch5x5 + branch_pool; }
  void validate() const;
};

// Weights of one inception block: 1x1; 1x1 -> 3x3; 1x1 -> 5x5; pool -> 1x1.
struct InceptionParams {
  Tensor b1_w, b1_b;
  Tensor b3_reduce_w, b3_reduce_b, b3_w, b3_b;
  Tensor b5_reduce_w, b5_reduce_b, b5_w, b5_b;
  Tensor pool_w, pool_b;

  std::vector<Tensor> tensors() const;
};

InceptionParams make_inception_params(std::size_t in_channels, const InceptionSpec& spec, std::uint64_t seed);

// Channel concatenation of the four branches; spatial size preserved.
Tensor inception_block(const Tensor& input, const InceptionSpec& spec, const InceptionParams& params);

enum class LayerKind { conv, maxpool, inception, dense };
enum class Head { affine, softmax };

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::size_t width = 0;   // conv filters or dense units
  std::size_t kernel = 0;  // conv kernel side
  std::size_t stride = 1;  // conv stride
  InceptionSpec inception{};
};

struct NetworkSpec {
  std::string name;
  std::size_t in_channels = 3;
  std::size_t in_size = 0;  // square input side
  Head head = Head::softmax;
  std::vector<LayerSpec> layers;

  std::size_t layer_count() const { return layers.size(); }
  std::size_t outputs() const { return layers.empty() ? 0 : layers.back().width; }
};

struct Network {
  NetworkSpec spec;
  std::vector<Tensor> params;

  // [C,S,S] -> [K] or [N,C,S,S] -> [N,K]
  Tensor forward(const Tensor& input) const;
  std::size_t parameter_count() const;
};

// Parameter groups of one model: {localizer, classifier} or {baseline}.
struct ModelParams {
  std::vector<Network> groups;

  bool has(std::string_view name) const;
  Network& group(std::string_view name);
  const Network& group(std::string_view name) const;
  std::vector<Tensor> tensors() const;
  std::size_t parameter_count() const;
};

inline constexpr std::string_view kLocalizer = "localizer";
inline constexpr std::string_view kClassifier = "classifier";
inline constexpr std::string_view kBaseline = "baseline";

NetworkSpec localizer_spec(const CropGeometry& geom, std::size_t first_stride = 2);
NetworkSpec classifier_spec(const CropGeometry& geom);
NetworkSpec baseline_spec(const CropGeometry& geom);

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
Network build_network(const NetworkSpec& spec, std::uint64_t seed);

// Localizer whose output layer is zero with bias (s,0,0,0,s,0): the initial
// transform is the centred crop.
Network build_localizer(const CropGeometry& geom, std::uint64_t seed, std::size_t first_stride = 2);
Network build_classifier(const CropGeometry& geom, std::uint64_t seed);
Network build_baseline(const CropGeometry& geom, std::uint64_t seed);

// Localizer + classifier pair.
ModelParams build_stn_model(const CropGeometry& geom, std::uint64_t seed, std::size_t first_stride = 2);
ModelParams build_baseline_model(const CropGeometry& geom, std::uint64_t seed);

struct StnOutput {
  Tensor theta;  // [6] or [N,6]
  Tensor probs;  // [3] or [N,3]
  Tensor focus;  // [3,d_c,d_c] or [N,3,d_c,d_c]
};

// localizer -> affine grid -> bilinear sample -> classifier, differentiable end to end.
StnOutput stn_forward(const ModelParams& params, const Tensor& patch, const CropGeometry& geom);

// Order-sensitive FNV-1a hash over shapes and value bits.
std::uint64_t checksum(const Network& net);

// Binary checkpoint: magic, version, JSON architecture descriptor, then every
// parameter as rank, dims and little-endian doubles.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);
std::string encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(std::string_view bytes);

}  // namespace cellstn
