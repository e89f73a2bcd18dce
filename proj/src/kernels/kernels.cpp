#include "cellstn/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include "isa_kernels.hpp"

namespace cellstn::kernels {
namespace {

// ---------------------------------------------------------------------------
// Scalar reference
// ---------------------------------------------------------------------------

void scalar_gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
                 std::size_t ldc, bool accumulate) {
  std::vector<double> b_rows;
  const double* brow_base = b;
  std::size_t brow_stride = ldb;
  if (tb == Trans::yes) {
    b_rows.resize(k * n);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) b_rows[p * n + j] = b[j * ldb + p];
    brow_base = b_rows.data();
    brow_stride = n;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ta == Trans::no ? a[i * lda + p] : a[p * lda + i];
      const double* brow = brow_base + p * brow_stride;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void scalar_axpy(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scalar_relu_forward(std::size_t n, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void scalar_relu_backward(std::size_t n, const double* x, const double* dy, double* dx) {
  for (std::size_t i = 0; i < n; ++i) dx[i] += x[i] > 0.0 ? dy[i] : 0.0;
}

void scalar_adam_update(std::size_t n, const AdamCoefficients& k, const double* grad, double* m,
                        double* v, double* param) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = k.beta1 * m[i] + (1.0 - k.beta1) * grad[i];
    v[i] = k.beta2 * v[i] + (1.0 - k.beta2) * (grad[i] * grad[i]);
    const double mhat = m[i] / k.bias1;
    const double vhat = v[i] / k.bias2;
    param[i] -= (k.lr * mhat) / (std::sqrt(vhat) + k.epsilon);
  }
}

// ---------------------------------------------------------------------------
// Packed GEMM driver shared by the SIMD micro-kernels
// ---------------------------------------------------------------------------

struct PackBuffers {
  std::vector<double> a;
  std::vector<double> b;
  std::vector<double> tile;
};

PackBuffers& pack_buffers() {
  thread_local PackBuffers buffers;
  return buffers;
}

// Packs op(A)[i0 : i0+mc, p0 : p0+kc] into mr-row micro-panels, zero padded.
void pack_a(Trans ta, const double* a, std::size_t lda, std::size_t i0, std::size_t mc,
            std::size_t p0, std::size_t kc, std::size_t mr, double* out) {
  for (std::size_t ir = 0; ir < mc; ir += mr) {
    const std::size_t rows = std::min(mr, mc - ir);
    for (std::size_t p = 0; p < kc; ++p) {
      std::size_t r = 0;
      if (ta == Trans::no) {
        for (; r < rows; ++r) out[r] = a[(i0 + ir + r) * lda + p0 + p];
      } else {
        const double* src = a + (p0 + p) * lda + i0 + ir;
        for (; r < rows; ++r) out[r] = src[r];
      }
      for (; r < mr; ++r) out[r] = 0.0;
      out += mr;
    }
  }
}

// Packs op(B)[p0 : p0+kc, j0 : j0+nc] into nr-column micro-panels, zero padded.
void pack_b(Trans tb, const double* b, std::size_t ldb, std::size_t p0, std::size_t kc,
            std::size_t j0, std::size_t nc, std::size_t nr, double* out) {
  for (std::size_t jr = 0; jr < nc; jr += nr) {
    const std::size_t cols = std::min(nr, nc - jr);
    if (tb == Trans::no) {
      for (std::size_t p = 0; p < kc; ++p) {
        const double* src = b + (p0 + p) * ldb + j0 + jr;
        std::size_t c = 0;
        for (; c < cols; ++c) out[c] = src[c];
        for (; c < nr; ++c) out[c] = 0.0;
        out += nr;
      }
    } else {
      for (std::size_t c = 0; c < nr; ++c) {
        if (c < cols) {
          const double* src = b + (j0 + jr + c) * ldb + p0;
          for (std::size_t p = 0; p < kc; ++p) out[p * nr + c] = src[p];
        } else {
          for (std::size_t p = 0; p < kc; ++p) out[p * nr + c] = 0.0;
        }
      }
      out += kc * nr;
    }
  }
}

void blocked_gemm(const detail::IsaKernels& isa, Trans ta, Trans tb, std::size_t m,
                  std::size_t n, std::size_t k, const double* a, std::size_t lda, const double* b,
                  std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  const std::size_t mr = isa.mr;
  const std::size_t nr = isa.nr;
  const std::size_t kc_max = isa.kc;
  const std::size_t mc_max = mr * 16;
  const std::size_t nc_max = nr * 64;

  if (!accumulate)
    for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, 0.0);
  if (k == 0) return;

  PackBuffers& buf = pack_buffers();
  buf.a.resize(mc_max * kc_max);
  buf.b.resize(nc_max * kc_max);
  buf.tile.resize(mr * nr);

  for (std::size_t jc = 0; jc < n; jc += nc_max) {
    const std::size_t nc = std::min(nc_max, n - jc);
    for (std::size_t pc = 0; pc < k; pc += kc_max) {
      const std::size_t kc = std::min(kc_max, k - pc);
      pack_b(tb, b, ldb, pc, kc, jc, nc, nr, buf.b.data());
      for (std::size_t ic = 0; ic < m; ic += mc_max) {
        const std::size_t mc = std::min(mc_max, m - ic);
        pack_a(ta, a, lda, ic, mc, pc, kc, mr, buf.a.data());
        for (std::size_t jr = 0; jr < nc; jr += nr) {
          const std::size_t cols = std::min(nr, nc - jr);
          const double* bpanel = buf.b.data() + (jr / nr) * kc * nr;
          for (std::size_t ir = 0; ir < mc; ir += mr) {
            const std::size_t rows = std::min(mr, mc - ir);
            const double* apanel = buf.a.data() + (ir / mr) * kc * mr;
            double* cblock = c + (ic + ir) * ldc + jc + jr;
            if (rows == mr && cols == nr) {
              isa.micro(kc, apanel, bpanel, cblock, ldc);
            } else {
              std::fill(buf.tile.begin(), buf.tile.end(), 0.0);
              isa.micro(kc, apanel, bpanel, buf.tile.data(), nr);
              for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t cc = 0; cc < cols; ++cc) cblock[r * ldc + cc] += buf.tile[r * nr + cc];
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

bool cpu_has_avx2() { return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"); }
bool cpu_has_avx512() { return __builtin_cpu_supports("avx512f"); }

Isa initial_isa() {
  Isa isa = best_supported_isa();
  if (const char* env = std::getenv("CELLSTN_ISA")) {
    Isa requested{};
    if (parse_isa(env, requested) && isa_supported(requested)) isa = requested;
  }
  return isa;
}

std::atomic<Isa>& active() {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

const detail::IsaKernels* simd_table(Isa isa) {
  switch (isa) {
    case Isa::avx2:
      return &detail::avx2_kernels();
    case Isa::avx512:
      return &detail::avx512_kernels();
    case Isa::scalar:
      break;
  }
  return nullptr;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
    case Isa::avx512:
      return "avx512";
  }
  return "unknown";
}

bool parse_isa(std::string_view text, Isa& out) {
  for (Isa isa : {Isa::scalar, Isa::avx2, Isa::avx512}) {
    if (text == isa_name(isa)) {
      out = isa;
      return true;
    }
  }
  return false;
}

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
      return cpu_has_avx2();
    case Isa::avx512:
      return cpu_has_avx512();
  }
  return false;
}

Isa best_supported_isa() {
  if (cpu_has_avx512()) return Isa::avx512;
  if (cpu_has_avx2()) return Isa::avx2;
  return Isa::scalar;
}

Isa active_isa() { return active().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
  if (!isa_supported(isa))
    throw std::runtime_error("instruction set not supported on this CPU: " + std::string(isa_name(isa)));
  active().store(isa, std::memory_order_relaxed);
}

void gemm(Isa isa, Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
          std::size_t ldc, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (const auto* t = simd_table(isa))
    blocked_gemm(*t, ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  else
    scalar_gemm(ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

void axpy(Isa isa, std::size_t n, double alpha, const double* x, double* y) {
  if (const auto* t = simd_table(isa))
    t->axpy(n, alpha, x, y);
  else
    scalar_axpy(n, alpha, x, y);
}

void relu_forward(Isa isa, std::size_t n, const double* x, double* y) {
  if (const auto* t = simd_table(isa))
    t->relu_forward(n, x, y);
  else
    scalar_relu_forward(n, x, y);
}

void relu_backward(Isa isa, std::size_t n, const double* x, const double* dy, double* dx) {
  if (const auto* t = simd_table(isa))
    t->relu_backward(n, x, dy, dx);
  else
    scalar_relu_backward(n, x, dy, dx);
}

void adam_update(Isa isa, std::size_t n, const AdamCoefficients& k, const double* grad,
                 double* m, double* v, double* param) {
  if (const auto* t = simd_table(isa))
    t->adam_update(n, k, grad, m, v, param);
  else
    scalar_adam_update(n, k, grad, m, v, param);
}

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const double* a,
          std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
          bool accumulate) {
  gemm(active_isa(), ta, tb, m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  axpy(active_isa(), n, alpha, x, y);
}

void relu_forward(std::size_t n, const double* x, double* y) {
  relu_forward(active_isa(), n, x, y);
}

void relu_backward(std::size_t n, const double* x, const double* dy, double* dx) {
  relu_backward(active_isa(), n, x, dy, dx);
}

void adam_update(std::size_t n, const AdamCoefficients& k, const double* grad, double* m,
                 double* v, double* param) {
  adam_update(active_isa(), n, k, grad, m, v, param);
}

}  // namespace cellstn::kernels
