#include "cellstn/gradient_suite.hpp"

#include <functional>
#include <random>

#include "cellstn/losses.hpp"
#include "cellstn/networks.hpp"
#include "cellstn/ops.hpp"
#include "cellstn/stn.hpp"

namespace cellstn {
namespace {

struct Instance {
  std::vector<Tensor> inputs;
  GraphBuilder f;
  std::size_t max_elements = 0;
  bool skip_kinks = false;
};

using CaseFn = std::function<Instance(std::mt19937_64&)>;

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Values bounded away from zero, for kinked activations.
Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Distinct values at least 0.01 apart, so pooling windows have clear winners.
Tensor distinct(Shape shape, std::mt19937_64& rng) {
  std::vector<double> v(shape_size(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * double(i);
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Random linear functional, so every output element gets a distinct weight.
GraphBuilder projected(std::function<Tensor(std::span<const Tensor>)> op, Shape out_shape, std::mt19937_64& rng) {
  const Tensor weights = uniform(std::move(out_shape), rng, -1.0, 1.0, false);
  return [op = std::move(op), weights](std::span<const Tensor> in) { return sum(mul(op(in), weights)); };
}

std::vector<CellClass> random_labels(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> c(0, int(kNumClasses) - 1);
  std::vector<CellClass> out(n);
  for (auto& l : out) l = CellClass(c(rng));
  return out;
}

std::vector<AffineTheta> random_ground_truth(std::size_t n, std::mt19937_64& rng) {
  CropGeometry g;
  std::uniform_int_distribution<int> off(-g.max_offset(), g.max_offset());
  std::vector<AffineTheta> out;
  for (std::size_t i = 0; i < n; ++i) {
    g.dx = off(rng);
    g.dy = off(rng);
    out.push_back(make_ground_truth_theta(g));
  }
  return out;
}

Tensor near_ground_truth(std::size_t batch, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jitter(-0.15, 0.15);
  std::vector<double> v;
  for (std::size_t b = 0; b < batch; ++b) {
    const double base[6] = {0.5, 0.0, 0.0, 0.0, 0.5, 0.0};
    for (double x : base) v.push_back(x + jitter(rng));
  }
  return Tensor::from({batch, 6}, std::move(v), true);
}

std::vector<std::pair<std::string, CaseFn>> cases() {
  std::vector<std::pair<std::string, CaseFn>> c;
  c.emplace_back("conv2d same", [](std::mt19937_64& rng) {
    Instance in{{uniform({2, 5, 5}, rng), uniform({3, 2, 3, 3}, rng), uniform({3}, rng)}, {}};
    in.f = projected([](auto x) { return conv2d(x[0], x[1], x[2], Padding::same); }, {3, 5, 5}, rng);
    return in;
  });
  c.emplace_back("conv2d valid", [](std::mt19937_64& rng) {
    Instance in{{uniform({2, 6, 6}, rng), uniform({2, 2, 3, 3}, rng), uniform({2}, rng)}, {}};
    in.f = projected([](auto x) { return conv2d(x[0], x[1], x[2], Padding::valid); }, {2, 4, 4}, rng);
    return in;
  });
  c.emplace_back("conv2d stride 2 batch", [](std::mt19937_64& rng) {
    Instance in{{uniform({2, 2, 6, 6}, rng), uniform({3, 2, 5, 5}, rng), uniform({3}, rng)}, {}};
    in.f = projected([](auto x) { return conv2d(x[0], x[1], x[2], Padding::same, 2); }, {2, 3, 3, 3}, rng);
    return in;
  });
  c.emplace_back("maxpool2d", [](std::mt19937_64& rng) {
    Instance in{{distinct({2, 8, 8}, rng)}, {}};
    in.f = projected([](auto x) { return maxpool2d(x[0]); }, {2, 4, 4}, rng);
    return in;
  });
  c.emplace_back("max_pool 3x3 stride 1", [](std::mt19937_64& rng) {
    Instance in{{distinct({2, 5, 5}, rng)}, {}};
    in.f = projected([](auto x) { return max_pool(x[0], 3, 1, 1); }, {2, 5, 5}, rng);
    return in;
  });
  c.emplace_back("dense", [](std::mt19937_64& rng) {
    Instance in{{uniform({2, 4}, rng), uniform({3, 4}, rng), uniform({3}, rng)}, {}};
    in.f = projected([](auto x) { return dense(x[0], x[1], x[2]); }, {2, 3}, rng);
    return in;
  });
  c.emplace_back("relu", [](std::mt19937_64& rng) {
    Instance in{{away_from_zero({24}, rng)}, {}};
    in.f = projected([](auto x) { return relu(x[0]); }, {24}, rng);
    return in;
  });
  c.emplace_back("softmax", [](std::mt19937_64& rng) {
    Instance in{{uniform({3, 3}, rng, -2.0, 2.0)}, {}};
    in.f = projected([](auto x) { return softmax(x[0]); }, {3, 3}, rng);
    return in;
  });
  c.emplace_back("bilinear_sample", [](std::mt19937_64& rng) {
    // Grid points can land within eps of a pixel boundary.
    Instance in{{uniform({2, 6, 6}, rng), uniform({4, 4, 2}, rng, -1.1, 1.1)}, {}, 0, true};
    in.f = projected([](auto x) { return bilinear_sample(x[0], x[1]); }, {2, 4, 4}, rng);
    return in;
  });
  c.emplace_back("affine_grid + bilinear_sample (theta path)", [](std::mt19937_64& rng) {
    Instance in{{uniform({3, 8, 8}, rng), near_ground_truth(1, rng)}, {}, 0, true};
    in.f = projected([](auto x) { return bilinear_sample(x[0], affine_grid(reshape(x[1], {6}), 4, 4)); }, {3, 4, 4},
                     rng);
    return in;
  });
  c.emplace_back("extract_scales", [](std::mt19937_64& rng) {
    Instance in{{near_ground_truth(3, rng)}, {}};
    const Tensor wx = uniform({3}, rng, -1.0, 1.0, false), wy = uniform({3}, rng, -1.0, 1.0, false);
    in.f = [wx, wy](std::span<const Tensor> x) {
      const auto [sx, sy] = extract_scales(x[0]);
      return add(sum(mul(sx, wx)), sum(mul(sy, wy)));
    };
    return in;
  });
  c.emplace_back("cross_entropy", [](std::mt19937_64& rng) {
    Instance in{{uniform({4, 3}, rng, -2.0, 2.0)}, {}};
    const auto labels = random_labels(4, rng);
    in.f = [labels](std::span<const Tensor> x) { return cross_entropy(softmax(x[0]), labels); };
    return in;
  });
  c.emplace_back("localization_loss", [](std::mt19937_64& rng) {
    Instance in{{near_ground_truth(4, rng)}, {}};
    const auto gt = random_ground_truth(4, rng);
    in.f = [gt](std::span<const Tensor> x) { return localization_loss(x[0], gt); };
    return in;
  });
  c.emplace_back("combined_loss", [](std::mt19937_64& rng) {
    Instance in{{near_ground_truth(3, rng), uniform({3, 3}, rng, -2.0, 2.0)}, {}};
    const auto gt = random_ground_truth(3, rng);
    const auto labels = random_labels(3, rng);
    in.f = [gt, labels](std::span<const Tensor> x) {
      return combined_loss(localization_loss(x[0], gt), cross_entropy(softmax(x[1]), labels), LossWeights{0.7});
    };
    return in;
  });
  c.emplace_back("inception block", [](std::mt19937_64& rng) {
    const InceptionSpec spec{2, 2, 2, 2};
    const InceptionParams p = make_inception_params(3, spec, rng());
    // Composite ReLU and pooling inputs are not controlled, so kinks are skipped.
    Instance in{{uniform({3, 4, 4}, rng)}, {}, 0, true};
    for (const Tensor& t : p.tensors()) {
      Tensor v = uniform(t.shape(), rng, -0.5, 0.5);
      in.inputs.push_back(v);
    }
    in.f = projected(
        [spec](auto x) {
          const InceptionParams q{x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8], x[9], x[10], x[11], x[12]};
          return inception_block(x[0], spec, q);
        },
        {spec.out_channels(), 4, 4}, rng);
    return in;
  });
  c.emplace_back("stn_forward (spot check)", [](std::mt19937_64& rng) {
    CropGeometry geom;
    geom.input_size = 16;
    geom.cell_size = 8;
    ModelParams model = build_stn_model(geom, rng(), 2);
    // A generic output layer instead of the zero-weight initialisation keeps
    // localizer gradients well above finite-difference resolution and moves
    // the transform off the pixel lattice, where sampling has kinks.
    std::vector<Tensor>& loc = model.group(kLocalizer).params;
    std::uniform_real_distribution<double> weight(-0.1, 0.1), jitter(-0.05, 0.05);
    for (double& v : loc[loc.size() - 2].mutable_values()) v = weight(rng);
    for (double& v : loc.back().mutable_values()) v += jitter(rng);
    Instance in{{uniform({2, 3, 16, 16}, rng, 0.0, 1.0)}, {}, 4, true};
    const std::vector<Tensor> params = model.tensors();
    in.inputs.insert(in.inputs.end(), params.begin(), params.end());
    const auto gt = random_ground_truth(2, rng);
    const auto labels = random_labels(2, rng);
    in.f = [model, geom, gt, labels](std::span<const Tensor> x) {
      // The inputs alias the model's parameter tensors.
      const StnOutput out = stn_forward(model, x[0], geom);
      return combined_loss(localization_loss(out.theta, gt), cross_entropy(out.probs, labels), LossWeights{});
    };
    return in;
  });
  return c;
}

}  // namespace

std::vector<SuiteResult> run_gradient_suite(std::size_t instances, std::uint64_t seed,
                                            const GradcheckOptions& options) {
  std::vector<SuiteResult> results;
  std::uint64_t case_index = 0;
  for (const auto& [name, make] : cases()) {
    SuiteResult r;
    r.op = name;
    for (std::size_t i = 0; i < instances; ++i) {
      std::mt19937_64 rng(seed * 1000003ULL + case_index * 101ULL + i);
      Instance in = make(rng);
      GradcheckOptions opts = options;
      opts.seed = rng();
      opts.max_elements_per_input = in.max_elements;
      opts.skip_kinks = in.skip_kinks;
      const GradcheckReport rep = finite_diff_gradcheck(in.f, in.inputs, opts);
      r.instances += 1;
      r.checked += rep.checked;
      r.kinks += rep.kinks;
      r.max_rel_error = std::max(r.max_rel_error, rep.max_rel_error);
      r.passed = r.passed && rep.passed;
      r.failures.insert(r.failures.end(), rep.failures.begin(), rep.failures.end());
    }
    if (20 * r.kinks > r.checked + r.kinks) r.passed = false;
    results.push_back(r);
    ++case_index;
  }
  return results;
}

}  // namespace cellstn
