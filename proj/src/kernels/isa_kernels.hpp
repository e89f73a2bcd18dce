#pragma once

// Per-ISA entry points. The SIMD translation units are compiled with their own
// -m flags, so they must not instantiate standard-library templates that could
// be merged with the baseline build at link time; keep them intrinsic-only.

#include <cstddef>

namespace cellstn::kernels {
struct AdamCoefficients;
}

namespace cellstn::kernels::detail {

// c[mr x nr] (row stride ldc) += packed A panel (kc x mr) * packed B panel (kc x nr)
using MicroKernel = void (*)(std::size_t kc, const double* a, const double* b, double* c,
                             std::size_t ldc);

struct IsaKernels {
  std::size_t mr;
  std::size_t nr;
  std::size_t kc;
  MicroKernel micro;
  void (*axpy)(std::size_t, double, const double*, double*);
  void (*relu_forward)(std::size_t, const double*, double*);
  void (*relu_backward)(std::size_t, const double*, const double*, double*);
  void (*adam_update)(std::size_t, const AdamCoefficients&, const double*, double*, double*,
                      double*);
};

const IsaKernels& avx2_kernels();
const IsaKernels& avx512_kernels();

}  // namespace cellstn::kernels::detail
