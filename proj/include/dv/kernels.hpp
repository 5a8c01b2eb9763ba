#pragma once

#include <cstddef>
#include <string>

// Low-level numeric kernels backing the tensor engine's inner loops.
// Each kernel has a scalar reference implementation and, where profitable,
// an AVX2+FMA variant. The active backend is chosen once at startup from
// cpuid; DV_FORCE_SCALAR=1 in the environment pins the scalar path.

namespace dv::kern {

struct Ops {
    // y[i] += a * x[i]
    void (*axpy)(std::size_t n, double a, const double* x, double* y);
    // sum_i x[i] * y[i]
    double (*dot)(std::size_t n, const double* x, const double* y);
    // out[i] = x[i] + y[i] / x[i] * y[i]
    void (*add)(std::size_t n, const double* x, const double* y, double* out);
    void (*mul)(std::size_t n, const double* x, const double* y, double* out);
    // x[i] *= a
    void (*scale)(std::size_t n, double a, double* x);
    // C[MxN] (+)= A[MxK] * B[KxN], row-major
    void (*gemm)(std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c, bool accumulate);
    // C[MxN] (+)= A^T[KxM] * B[KxN]  (A stored KxM row-major)
    void (*gemm_at)(std::size_t m, std::size_t n, std::size_t k,
                    const double* a, const double* b, double* c, bool accumulate);
    // C[MxN] (+)= A[MxK] * B^T[NxK]  (B stored NxK row-major)
    void (*gemm_bt)(std::size_t m, std::size_t n, std::size_t k,
                    const double* a, const double* b, double* c, bool accumulate);
    const char* name;
};

namespace scalar {
void axpy(std::size_t n, double a, const double* x, double* y);
double dot(std::size_t n, const double* x, const double* y);
void add(std::size_t n, const double* x, const double* y, double* out);
void mul(std::size_t n, const double* x, const double* y, double* out);
void scale(std::size_t n, double a, double* x);
void gemm(std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);
void gemm_at(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate);
void gemm_bt(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
namespace avx2 {
void axpy(std::size_t n, double a, const double* x, double* y);
double dot(std::size_t n, const double* x, const double* y);
void add(std::size_t n, const double* x, const double* y, double* out);
void mul(std::size_t n, const double* x, const double* y, double* out);
void scale(std::size_t n, double a, double* x);
void gemm(std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);
void gemm_at(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate);
void gemm_bt(std::size_t m, std::size_t n, std::size_t k,
             const double* a, const double* b, double* c, bool accumulate);
}  // namespace avx2
#endif

// Active dispatch table. Initialized on first use.
const Ops& active();
const Ops& scalar_ops();
std::string backend_name();

}  // namespace dv::kern
