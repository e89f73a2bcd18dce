// Throughput of the GEMM kernel variants on the layer shapes used by the
// networks. Usage: cellstn_bench [repeats]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <string>
#include <vector>

#include "cellstn/kernels.hpp"

namespace {

struct Shape {
  const char* name;
  cellstn::kernels::Trans ta, tb;
  std::size_t m, n, k;
};

}  // namespace

int main(int argc, char** argv) {
  using cellstn::kernels::Isa;
  using cellstn::kernels::Trans;
  const int repeats = argc > 1 ? std::atoi(argv[1]) : 5;
  const Shape shapes[] = {
      {"conv 5x5 3->16 @64x64 fwd", Trans::no, Trans::no, 16, 4096, 75},
      {"conv 3x3 16->32 @32x32 fwd", Trans::no, Trans::no, 32, 1024, 144},
      {"conv 3x3 16->32 dW", Trans::no, Trans::yes, 32, 144, 1024},
      {"conv 3x3 16->32 dcol", Trans::yes, Trans::no, 144, 1024, 32},
      {"dense 12288->128 batch 32", Trans::no, Trans::yes, 32, 128, 12288},
      {"dense dW 128x12288", Trans::yes, Trans::no, 128, 12288, 32},
      {"square 512", Trans::no, Trans::no, 512, 512, 512},
  };
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  for (const auto& s : shapes) {
    std::vector<double> a(s.m * s.k), b(s.k * s.n), c(s.m * s.n);
    for (auto& x : a) x = u(rng);
    for (auto& x : b) x = u(rng);
    const std::size_t lda = s.ta == Trans::no ? s.k : s.m;
    const std::size_t ldb = s.tb == Trans::no ? s.n : s.k;
    std::printf("%-30s", s.name);
    for (Isa isa : {Isa::scalar, Isa::avx2, Isa::avx512}) {
      if (!cellstn::kernels::isa_supported(isa)) continue;
      cellstn::kernels::gemm(isa, s.ta, s.tb, s.m, s.n, s.k, a.data(), lda, b.data(), ldb,
                             c.data(), s.n, false);
      const auto t0 = std::chrono::steady_clock::now();
      for (int r = 0; r < repeats; ++r)
        cellstn::kernels::gemm(isa, s.ta, s.tb, s.m, s.n, s.k, a.data(), lda, b.data(), ldb,
                               c.data(), s.n, false);
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / repeats;
      std::printf("  %s %6.2f GMAC/s", std::string(cellstn::kernels::isa_name(isa)).c_str(),
                  double(s.m) * s.n * s.k / secs / 1e9);
    }
    std::printf("\n");
  }
}
