#include "cellstn/networks.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "cellstn/errors.hpp"
#include "cellstn/ops.hpp"

namespace cellstn {
namespace {

Tensor uniform_param(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(double(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor zero_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

void push_conv(std::vector<Tensor>& out, std::size_t cin, std::size_t cout, std::size_t k, std::mt19937_64& rng) {
  out.push_back(uniform_param({cout, cin, k, k}, cin * k * k, rng));
  out.push_back(zero_param({cout}));
}

constexpr std::size_t kInceptionTensors = 12;

InceptionParams inception_from(std::span<const Tensor> t) {
  return {t[0], t[1], t[2], t[3], t[4], t[5], t[6], t[7], t[8], t[9], t[10], t[11]};
}

Tensor conv_relu(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride = 1) {
  return relu(conv2d(x, w, b, Padding::same, stride));
}

// Shape bookkeeping shared by construction and forward.
struct Walk {
  std::size_t channels, size, flat;
  bool flattened = false;
};

}  // namespace

void InceptionSpec::validate() const {
  if (branch1x1 == 0 || branch3x3 == 0 || branch5x5 == 0 || branch_pool == 0)
    throw ContractError("inception branches need at least one channel each");
}

std::vector<Tensor> InceptionParams::tensors() const {
  return {b1_w, b1_b, b3_reduce_w, b3_reduce_b, b3_w, b3_b, b5_reduce_w, b5_reduce_b, b5_w, b5_b, pool_w, pool_b};
}

InceptionParams make_inception_params(std::size_t in_channels, const InceptionSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::vector<Tensor> t;
  push_conv(t, in_channels, spec.branch1x1, 1, rng);
  push_conv(t, in_channels, spec.branch3x3, 1, rng);
  push_conv(t, spec.branch3x3, spec.branch3x3, 3, rng);
  push_conv(t, in_channels, spec.branch5x5, 1, rng);
  push_conv(t, spec.branch5x5, spec.branch5x5, 5, rng);
  push_conv(t, in_channels, spec.branch_pool, 1, rng);
  return inception_from(t);
}

Tensor inception_block(const Tensor& input, const InceptionSpec& spec, const InceptionParams& p) {
  spec.validate();
  const std::size_t channel_axis = input.rank() == 4 ? 1 : 0;
  if (input.rank() < 3 || p.b1_w.rank() != 4 || p.b1_w.dim(1) != input.dim(channel_axis))
    throw DimensionError("inception_block: input " + shape_string(input.shape()) + " does not match branch weights " +
                         shape_string(p.b1_w.shape()));
  if (p.b1_w.dim(0) != spec.branch1x1 || p.b3_w.dim(0) != spec.branch3x3 || p.b5_w.dim(0) != spec.branch5x5 ||
      p.pool_w.dim(0) != spec.branch_pool)
    throw DimensionError("inception_block: branch weights do not match the spec");
  const Tensor branches[] = {
      conv_relu(input, p.b1_w, p.b1_b),
      conv_relu(conv_relu(input, p.b3_reduce_w, p.b3_reduce_b), p.b3_w, p.b3_b),
      conv_relu(conv_relu(input, p.b5_reduce_w, p.b5_reduce_b), p.b5_w, p.b5_b),
      conv_relu(max_pool(input, 3, 1, 1), p.pool_w, p.pool_b),
  };
  return concat(branches, channel_axis);
}

Tensor Network::forward(const Tensor& input) const {
  const bool batched = input.rank() == 4;
  const std::size_t channel_axis = batched ? 1 : 0;
  if ((input.rank() != 3 && !batched) || input.dim(channel_axis) != spec.in_channels ||
      input.dim(channel_axis + 1) != spec.in_size || input.dim(channel_axis + 2) != spec.in_size)
    throw DimensionError(spec.name + ": expected input [" + std::to_string(spec.in_channels) + "," +
                         std::to_string(spec.in_size) + "," + std::to_string(spec.in_size) + "], got " +
                         shape_string(input.shape()));
  Tensor x = input;
  std::size_t next = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    const bool last = i + 1 == spec.layers.size();
    switch (layer.kind) {
      case LayerKind::conv:
        x = conv_relu(x, params[next], params[next + 1], layer.stride);
        next += 2;
        break;
      case LayerKind::maxpool:
        x = maxpool2d(x);
        break;
      case LayerKind::inception:
        x = inception_block(x, layer.inception,
                            inception_from(std::span(params).subspan(next, kInceptionTensors)));
        next += kInceptionTensors;
        break;
      case LayerKind::dense: {
        if (x.rank() > (batched ? 2u : 1u))
          x = reshape(x, batched ? Shape{x.dim(0), x.size() / x.dim(0)} : Shape{x.size()});
        x = dense(x, params[next], params[next + 1]);
        next += 2;
        if (!last) x = relu(x);
        break;
      }
    }
  }
  return spec.head == Head::softmax ? softmax(x) : x;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : params) n += t.size();
  return n;
}

bool ModelParams::has(std::string_view name) const {
  for (const Network& n : groups)
    if (n.spec.name == name) return true;
  return false;
}

Network& ModelParams::group(std::string_view name) {
  for (Network& n : groups)
    if (n.spec.name == name) return n;
  throw ContractError("model has no parameter group '" + std::string(name) + "'");
}

const Network& ModelParams::group(std::string_view name) const {
  return const_cast<ModelParams*>(this)->group(name);
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> all;
  for (const Network& n : groups) all.insert(all.end(), n.params.begin(), n.params.end());
  return all;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const Network& g : groups) n += g.parameter_count();
  return n;
}

NetworkSpec localizer_spec(const CropGeometry& geom, std::size_t first_stride) {
  NetworkSpec s;
  s.name = std::string(kLocalizer);
  s.in_size = std::size_t(geom.input_size);
  s.head = Head::affine;
  s.layers = {{LayerKind::conv, 16, 5, first_stride, {}},
              {LayerKind::maxpool, 0, 0, 1, {}},
              {LayerKind::conv, 32, 3, 1, {}},
              {LayerKind::maxpool, 0, 0, 1, {}},
              {LayerKind::inception, 0, 0, 1, InceptionSpec{16, 16, 8, 8}},
              {LayerKind::dense, 128, 0, 1, {}},
              {LayerKind::dense, 6, 0, 1, {}}};
  return s;
}

NetworkSpec classifier_spec(const CropGeometry& geom) {
  NetworkSpec s;
  s.name = std::string(kClassifier);
  s.in_size = std::size_t(geom.cell_size);
  s.head = Head::softmax;
  s.layers = {{LayerKind::conv, 16, 5, 1, {}},
              {LayerKind::maxpool, 0, 0, 1, {}},
              {LayerKind::conv, 32, 3, 1, {}},
              {LayerKind::maxpool, 0, 0, 1, {}},
              {LayerKind::inception, 0, 0, 1, InceptionSpec{16, 16, 8, 8}},
              {LayerKind::dense, 64, 0, 1, {}},
              {LayerKind::dense, 3, 0, 1, {}}};
  return s;
}

NetworkSpec baseline_spec(const CropGeometry& geom) {
  NetworkSpec s;
  s.name = std::string(kBaseline);
  s.in_size = std::size_t(geom.input_size);
  s.head = Head::softmax;
  for (std::size_t width : {16, 16, 32, 32, 64}) {
    s.layers.push_back({LayerKind::conv, width, 3, 1, {}});
    s.layers.push_back({LayerKind::maxpool, 0, 0, 1, {}});
  }
  s.layers.push_back({LayerKind::dense, 64, 0, 1, {}});
  s.layers.push_back({LayerKind::dense, 3, 0, 1, {}});
  return s;
}

Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Network net;
  net.spec = spec;
  Walk w{spec.in_channels, spec.in_size, 0};
  for (const LayerSpec& layer : spec.layers) {
    switch (layer.kind) {
      case LayerKind::conv:
        if (layer.kernel % 2 == 0 || layer.stride == 0)
          throw ContractError(spec.name + ": conv layers need odd kernels and positive stride");
        push_conv(net.params, w.channels, layer.width, layer.kernel, rng);
        w.channels = layer.width;
        w.size = (w.size + 2 * ((layer.kernel - 1) / 2) - layer.kernel) / layer.stride + 1;
        break;
      case LayerKind::maxpool:
        if (w.size % 2 != 0) throw ContractError(spec.name + ": max-pool over odd size " + std::to_string(w.size));
        w.size /= 2;
        break;
      case LayerKind::inception: {
        const auto t = make_inception_params(w.channels, layer.inception, rng()).tensors();
        net.params.insert(net.params.end(), t.begin(), t.end());
        w.channels = layer.inception.out_channels();
        break;
      }
      case LayerKind::dense: {
        const std::size_t fan_in = w.flattened ? w.flat : w.channels * w.size * w.size;
        net.params.push_back(uniform_param({layer.width, fan_in}, fan_in, rng));
        net.params.push_back(zero_param({layer.width}));
        w.flattened = true;
        w.flat = layer.width;
        break;
      }
    }
  }
  return net;
}

Network build_localizer(const CropGeometry& geom, std::uint64_t seed, std::size_t first_stride) {
  geom.validate();
  Network net = build_network(localizer_spec(geom, first_stride), seed);
  const std::size_t n = net.params.size();
  for (double& v : net.params[n - 2].mutable_values()) v = 0.0;
  auto bias = net.params[n - 1].mutable_values();
  const double init[6] = {geom.scale, 0.0, 0.0, 0.0, geom.scale, 0.0};
  std::copy(std::begin(init), std::end(init), bias.begin());
  return net;
}

Network build_classifier(const CropGeometry& geom, std::uint64_t seed) {
  geom.validate();
  return build_network(classifier_spec(geom), seed);
}

Network build_baseline(const CropGeometry& geom, std::uint64_t seed) {
  geom.validate();
  return build_network(baseline_spec(geom), seed);
}

ModelParams build_stn_model(const CropGeometry& geom, std::uint64_t seed, std::size_t first_stride) {
  std::seed_seq seq{seed, std::uint64_t{0x51ED}};
  std::uint64_t seeds[2];
  seq.generate(std::begin(seeds), std::end(seeds));
  ModelParams m;
  m.groups.push_back(build_localizer(geom, seeds[0], first_stride));
  m.groups.push_back(build_classifier(geom, seeds[1]));
  return m;
}

ModelParams build_baseline_model(const CropGeometry& geom, std::uint64_t seed) {
  ModelParams m;
  m.groups.push_back(build_baseline(geom, seed));
  return m;
}

StnOutput stn_forward(const ModelParams& params, const Tensor& patch, const CropGeometry& geom) {
  const Network& localizer = params.group(kLocalizer);
  const Network& classifier = params.group(kClassifier);
  const std::size_t dc = std::size_t(geom.cell_size);
  StnOutput out;
  out.theta = localizer.forward(patch);
  const Tensor grid = affine_grid(out.theta, dc, dc);
  out.focus = bilinear_sample(patch, grid);
  out.probs = classifier.forward(out.focus);
  return out;
}

std::uint64_t checksum(const Network& net) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 1099511628211ULL;
    }
  };
  for (const Tensor& t : net.params) {
    for (std::size_t d : t.shape()) mix(d);
    for (double v : t.values()) mix(std::bit_cast<std::uint64_t>(v));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'E', 'L', 'L', 'S', 'T', 'N', '\0'};
constexpr std::uint32_t kVersion = 1;

using nlohmann::json;

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv:
      return "conv";
    case LayerKind::maxpool:
      return "maxpool";
    case LayerKind::inception:
      return "inception";
    case LayerKind::dense:
      return "dense";
  }
  return "?";
}

LayerKind parse_kind(const std::string& s) {
  for (LayerKind k : {LayerKind::conv, LayerKind::maxpool, LayerKind::inception, LayerKind::dense})
    if (s == kind_name(k)) return k;
  throw ParseError("checkpoint: unknown layer kind '" + s + "'");
}

json describe(const NetworkSpec& s) {
  json layers = json::array();
  for (const LayerSpec& l : s.layers) {
    json j{{"kind", kind_name(l.kind)}};
    if (l.kind == LayerKind::conv) {
      j["width"] = l.width;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
    } else if (l.kind == LayerKind::dense) {
      j["width"] = l.width;
    } else if (l.kind == LayerKind::inception) {
      j["branches"] = {l.inception.branch1x1, l.inception.branch3x3, l.inception.branch5x5, l.inception.branch_pool};
    }
    layers.push_back(j);
  }
  return json{{"name", s.name},
              {"in_channels", s.in_channels},
              {"in_size", s.in_size},
              {"head", s.head == Head::affine ? "affine" : "softmax"},
              {"layers", layers}};
}

NetworkSpec parse_spec(const json& j) {
  NetworkSpec s;
  s.name = j.at("name").get<std::string>();
  s.in_channels = j.at("in_channels").get<std::size_t>();
  s.in_size = j.at("in_size").get<std::size_t>();
  s.head = j.at("head").get<std::string>() == "affine" ? Head::affine : Head::softmax;
  for (const json& l : j.at("layers")) {
    LayerSpec layer;
    layer.kind = parse_kind(l.at("kind").get<std::string>());
    if (layer.kind == LayerKind::conv) {
      layer.width = l.at("width").get<std::size_t>();
      layer.kernel = l.at("kernel").get<std::size_t>();
      layer.stride = l.at("stride").get<std::size_t>();
    } else if (layer.kind == LayerKind::dense) {
      layer.width = l.at("width").get<std::size_t>();
    } else if (layer.kind == LayerKind::inception) {
      const auto b = l.at("branches").get<std::vector<std::size_t>>();
      if (b.size() != 4) throw ParseError("checkpoint: inception needs four branch widths");
      layer.inception = {b[0], b[1], b[2], b[3]};
    }
    s.layers.push_back(layer);
  }
  return s;
}

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::endian::native == std::endian::little, "checkpoints are written little-endian");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

struct Reader {
  std::string_view bytes;
  std::size_t pos = 0;

  template <typename T>
  T get() {
    if (pos + sizeof(T) > bytes.size()) throw ParseError("checkpoint: truncated at byte " + std::to_string(pos));
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
};

}  // namespace

std::string encode_checkpoint(const ModelParams& params) {
  json groups = json::array();
  for (const Network& n : params.groups) groups.push_back(describe(n.spec));
  const std::string descriptor = json{{"format", "cellstn-checkpoint"}, {"groups", groups}}.dump();
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, descriptor.size());
  out += descriptor;
  for (const Network& n : params.groups) {
    put<std::uint64_t>(out, n.params.size());
    for (const Tensor& t : n.params) {
      put<std::uint32_t>(out, std::uint32_t(t.rank()));
      for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
      for (double v : t.values()) put<double>(out, v);
    }
  }
  return out;
}

ModelParams decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw ParseError("checkpoint: bad magic");
  Reader r{bytes, sizeof(kMagic)};
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  const auto len = r.get<std::uint64_t>();
  if (r.pos + len > bytes.size()) throw ParseError("checkpoint: truncated descriptor");
  json descriptor;
  try {
    descriptor = json::parse(bytes.substr(r.pos, len));
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: descriptor: ") + e.what());
  }
  r.pos += len;
  ModelParams model;
  for (const json& g : descriptor.at("groups")) {
    // Rebuild to get the expected shapes, then overwrite the values.
    Network net = build_network(parse_spec(g), 0);
    const auto count = r.get<std::uint64_t>();
    if (count != net.params.size())
      throw ParseError("checkpoint: group '" + net.spec.name + "' has " + std::to_string(count) +
                       " tensors, architecture needs " + std::to_string(net.params.size()));
    for (Tensor& t : net.params) {
      const auto rank = r.get<std::uint32_t>();
      Shape shape(rank);
      for (auto& d : shape) d = r.get<std::uint64_t>();
      if (shape != t.shape())
        throw ParseError("checkpoint: tensor shape " + shape_string(shape) + " does not match architecture " +
                         shape_string(t.shape()));
      for (double& v : t.mutable_values()) v = r.get<double>();
    }
    model.groups.push_back(std::move(net));
  }
  if (r.pos != bytes.size()) throw ParseError("checkpoint: trailing bytes");
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(params);
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace cellstn
