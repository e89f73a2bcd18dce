#include <immintrin.h>

#include "cellstn/kernels.hpp"
#include "isa_kernels.hpp"

namespace cellstn::kernels::detail {
namespace {

constexpr std::size_t kMr = 8;
constexpr std::size_t kNr = 24;

void micro_8x24(std::size_t kc, const double* a, const double* b, double* c, std::size_t ldc) {
  __m512d acc[kMr][3];
#pragma GCC unroll 8
  for (std::size_t r = 0; r < kMr; ++r) {
    acc[r][0] = _mm512_setzero_pd();
    acc[r][1] = _mm512_setzero_pd();
    acc[r][2] = _mm512_setzero_pd();
  }
  for (std::size_t p = 0; p < kc; ++p) {
    const __m512d b0 = _mm512_loadu_pd(b);
    const __m512d b1 = _mm512_loadu_pd(b + 8);
    const __m512d b2 = _mm512_loadu_pd(b + 16);
#pragma GCC unroll 8
    for (std::size_t r = 0; r < kMr; ++r) {
      const __m512d av = _mm512_set1_pd(a[r]);
      acc[r][0] = _mm512_fmadd_pd(av, b0, acc[r][0]);
      acc[r][1] = _mm512_fmadd_pd(av, b1, acc[r][1]);
      acc[r][2] = _mm512_fmadd_pd(av, b2, acc[r][2]);
    }
    a += kMr;
    b += kNr;
  }
#pragma GCC unroll 8
  for (std::size_t r = 0; r < kMr; ++r) {
    double* row = c + r * ldc;
    _mm512_storeu_pd(row, _mm512_add_pd(_mm512_loadu_pd(row), acc[r][0]));
    _mm512_storeu_pd(row + 8, _mm512_add_pd(_mm512_loadu_pd(row + 8), acc[r][1]));
    _mm512_storeu_pd(row + 16, _mm512_add_pd(_mm512_loadu_pd(row + 16), acc[r][2]));
  }
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  const __m512d av = _mm512_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m512d prod = _mm512_mul_pd(av, _mm512_loadu_pd(x + i));
    _mm512_storeu_pd(y + i, _mm512_add_pd(_mm512_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void relu_forward(std::size_t n, const double* x, double* y) {
  const __m512d zero = _mm512_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m512d v = _mm512_loadu_pd(x + i);
    const __mmask8 keep = _mm512_cmp_pd_mask(v, zero, _CMP_GT_OQ);
    _mm512_storeu_pd(y + i, _mm512_maskz_mov_pd(keep, v));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(std::size_t n, const double* x, const double* dy, double* dx) {
  const __m512d zero = _mm512_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __mmask8 keep = _mm512_cmp_pd_mask(_mm512_loadu_pd(x + i), zero, _CMP_GT_OQ);
    const __m512d g = _mm512_maskz_mov_pd(keep, _mm512_loadu_pd(dy + i));
    _mm512_storeu_pd(dx + i, _mm512_add_pd(_mm512_loadu_pd(dx + i), g));
  }
  for (; i < n; ++i) dx[i] += x[i] > 0.0 ? dy[i] : 0.0;
}

void adam_update(std::size_t n, const AdamCoefficients& k, const double* grad, double* m,
                 double* v, double* param) {
  const __m512d b1 = _mm512_set1_pd(k.beta1);
  const __m512d b2 = _mm512_set1_pd(k.beta2);
  const __m512d one_b1 = _mm512_set1_pd(1.0 - k.beta1);
  const __m512d one_b2 = _mm512_set1_pd(1.0 - k.beta2);
  const __m512d bias1 = _mm512_set1_pd(k.bias1);
  const __m512d bias2 = _mm512_set1_pd(k.bias2);
  const __m512d lr = _mm512_set1_pd(k.lr);
  const __m512d eps = _mm512_set1_pd(k.epsilon);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m512d g = _mm512_loadu_pd(grad + i);
    const __m512d mv =
        _mm512_add_pd(_mm512_mul_pd(b1, _mm512_loadu_pd(m + i)), _mm512_mul_pd(one_b1, g));
    const __m512d vv = _mm512_add_pd(_mm512_mul_pd(b2, _mm512_loadu_pd(v + i)),
                                     _mm512_mul_pd(one_b2, _mm512_mul_pd(g, g)));
    _mm512_storeu_pd(m + i, mv);
    _mm512_storeu_pd(v + i, vv);
    const __m512d mhat = _mm512_div_pd(mv, bias1);
    const __m512d vhat = _mm512_div_pd(vv, bias2);
    const __m512d step =
        _mm512_div_pd(_mm512_mul_pd(lr, mhat), _mm512_add_pd(_mm512_sqrt_pd(vhat), eps));
    _mm512_storeu_pd(param + i, _mm512_sub_pd(_mm512_loadu_pd(param + i), step));
  }
  for (; i < n; ++i) {
    m[i] = k.beta1 * m[i] + (1.0 - k.beta1) * grad[i];
    v[i] = k.beta2 * v[i] + (1.0 - k.beta2) * (grad[i] * grad[i]);
    const double mhat = m[i] / k.bias1;
    const double vhat = v[i] / k.bias2;
    param[i] -= (k.lr * mhat) / (__builtin_sqrt(vhat) + k.epsilon);
  }
}

const IsaKernels kTable{kMr, kNr, 192, micro_8x24, axpy, relu_forward, relu_backward, adam_update};

}  // namespace

const IsaKernels& avx512_kernels() { return kTable; }

}  // namespace cellstn::kernels::detail
