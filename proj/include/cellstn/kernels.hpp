#pragma once

// Numeric inner loops with runtime-selected instruction sets.
//
// Every kernel has a portable scalar reference and optional AVX2 / AVX-512
// variants. The active variant is chosen once from CPUID and may be forced
// with set_isa() or the CELLSTN_ISA environment variable
// ("scalar", "avx2", "avx512"). For a fixed variant every kernel is
// bit-deterministic: reduction orders never depend on timing or threads.

#include <cstddef>
#include <string_view>

namespace cellstn::kernels {

enum class Isa { scalar, avx2, avx512 };

enum class Trans { no, yes };

std::string_view isa_name(Isa isa);
bool isa_supported(Isa isa);
Isa best_supported_isa();

// Active variant used by the free functions below.
Isa active_isa();
void set_isa(Isa isa);

// Parses "scalar" / "avx2" / "avx512"; returns false on anything else.
bool parse_isa(std::string_view text, Isa& out);

// C[m x n] = (accumulate ? C : 0) + op(A)[m x k] * op(B)[k x n], row-major.
// op(A) is A when ta == Trans::no, otherwise A^T stored as [k x m].
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          const double* a, std::size_t lda, const double* b, std::size_t ldb,
          double* c, std::size_t ldc, bool accumulate);

// y += alpha * x
void axpy(std::size_t n, double alpha, const double* x, double* y);

// y = max(x, 0)
void relu_forward(std::size_t n, const double* x, double* y);

// dx += (x > 0) ? dy : 0
void relu_backward(std::size_t n, const double* x, const double* dy, double* dx);

struct AdamCoefficients {
  double lr;
  double beta1;
  double beta2;
  double epsilon;
  double bias1;  // 1 - beta1^t
  double bias2;  // 1 - beta2^t
};

// One bias-corrected Adam update over a flat parameter buffer.
void adam_update(std::size_t n, const AdamCoefficients& k, const double* grad,
                 double* m, double* v, double* param);

// Same operations pinned to one variant, used by the equivalence tests.
void gemm(Isa isa, Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          const double* a, std::size_t lda, const double* b, std::size_t ldb,
          double* c, std::size_t ldc, bool accumulate);
void axpy(Isa isa, std::size_t n, double alpha, const double* x, double* y);
void relu_forward(Isa isa, std::size_t n, const double* x, double* y);
void relu_backward(Isa isa, std::size_t n, const double* x, const double* dy, double* dx);
void adam_update(Isa isa, std::size_t n, const AdamCoefficients& k, const double* grad,
                 double* m, double* v, double* param);

}  // namespace cellstn::kernels
