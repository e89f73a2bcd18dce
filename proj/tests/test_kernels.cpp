#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "cellstn/kernels.hpp"

using namespace cellstn::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

std::vector<Isa> vector_isas() {
  std::vector<Isa> out;
  for (Isa i : {Isa::avx2, Isa::avx512})
    if (isa_supported(i)) out.push_back(i);
  return out;
}

}  // namespace

TEST(Kernels, ParseIsa) {
  Isa i{};
  EXPECT_TRUE(parse_isa("avx2", i));
  EXPECT_EQ(i, Isa::avx2);
  EXPECT_TRUE(parse_isa("scalar", i));
  EXPECT_FALSE(parse_isa("sse9", i));
  EXPECT_TRUE(isa_supported(Isa::scalar));
  EXPECT_TRUE(isa_supported(best_supported_isa()));
}

TEST(Kernels, ScalarGemmMatchesLoops) {
  std::mt19937_64 rng(1);
  const std::size_t m = 5, n = 7, k = 4;
  const auto a = random_vec(m * k, rng), b = random_vec(k * n, rng);
  std::vector<double> c(m * n, 3.0);
  gemm(Isa::scalar, Trans::no, Trans::no, m, n, k, a.data(), k, b.data(), n, c.data(), n, true);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 3.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      EXPECT_NEAR(c[i * n + j], s, 1e-14);
    }
}

TEST(Kernels, GemmVariantsAgree) {
  std::mt19937_64 rng(2);
  for (Isa isa : vector_isas()) {
    for (auto [m, n, k] : {std::array<std::size_t, 3>{1, 1, 1}, {3, 17, 9}, {16, 33, 25}, {31, 8, 64}, {64, 70, 5}}) {
      for (Trans ta : {Trans::no, Trans::yes})
        for (Trans tb : {Trans::no, Trans::yes}) {
          const auto a = random_vec(m * k, rng), b = random_vec(k * n, rng), c0 = random_vec(m * n, rng);
          const std::size_t lda = ta == Trans::no ? k : m, ldb = tb == Trans::no ? n : k;
          for (bool acc : {false, true}) {
            auto ref = c0, got = c0;
            gemm(Isa::scalar, ta, tb, m, n, k, a.data(), lda, b.data(), ldb, ref.data(), n, acc);
            gemm(isa, ta, tb, m, n, k, a.data(), lda, b.data(), ldb, got.data(), n, acc);
            for (std::size_t i = 0; i < ref.size(); ++i)
              ASSERT_NEAR(got[i], ref[i], 1e-12 * (1 + std::abs(ref[i]))) << isa_name(isa) << " m" << m << " n" << n;
          }
        }
    }
  }
}

TEST(Kernels, ElementwiseVariantsAgree) {
  std::mt19937_64 rng(3);
  for (Isa isa : vector_isas()) {
    for (std::size_t n : {1u, 7u, 8u, 31u, 100u}) {
      const auto x = random_vec(n, rng), dy = random_vec(n, rng), y0 = random_vec(n, rng);
      auto ya = y0, yb = y0;
      axpy(Isa::scalar, n, 0.37, x.data(), ya.data());
      axpy(isa, n, 0.37, x.data(), yb.data());
      EXPECT_EQ(ya, yb);
      std::vector<double> ra(n), rb(n);
      relu_forward(Isa::scalar, n, x.data(), ra.data());
      relu_forward(isa, n, x.data(), rb.data());
      EXPECT_EQ(ra, rb);
      auto da = y0, db = y0;
      relu_backward(Isa::scalar, n, x.data(), dy.data(), da.data());
      relu_backward(isa, n, x.data(), dy.data(), db.data());
      EXPECT_EQ(da, db);
    }
  }
}

TEST(Kernels, AdamVariantsAgree) {
  std::mt19937_64 rng(4);
  const AdamCoefficients k{1e-3, 0.9, 0.999, 1e-8, 1 - 0.9 * 0.9, 1 - 0.999 * 0.999};
  for (Isa isa : vector_isas()) {
    const std::size_t n = 37;
    const auto g = random_vec(n, rng), p0 = random_vec(n, rng);
    auto m0 = random_vec(n, rng), v0 = random_vec(n, rng);
    for (double& v : v0) v = std::abs(v);
    auto ma = m0, va = v0, pa = p0, mb = m0, vb = v0, pb = p0;
    adam_update(Isa::scalar, n, k, g.data(), ma.data(), va.data(), pa.data());
    adam_update(isa, n, k, g.data(), mb.data(), vb.data(), pb.data());
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(ma[i], mb[i], 1e-15);
      EXPECT_NEAR(va[i], vb[i], 1e-15);
      EXPECT_NEAR(pa[i], pb[i], 1e-15);
    }
  }
}
