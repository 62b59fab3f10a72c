#pragma once

// Dense arithmetic kernels behind every layer. Each entry point has a
// portable scalar reference and, on x86-64, an AVX2+FMA variant; the active
// variant is chosen once at startup from cpuid and can be pinned for testing.

#include <cstddef>
#include <string_view>

namespace orbitseg::kernels {

enum class Isa { Scalar, Avx2 };
enum class Trans { No, Yes };

bool isa_supported(Isa isa);
Isa active_isa();
// Throws std::invalid_argument if the ISA is not available on this machine.
void set_active_isa(Isa isa);
std::string_view isa_name(Isa isa);

// RAII pin of the active ISA, restored on scope exit.
class ScopedIsa {
public:
    explicit ScopedIsa(Isa isa) : previous_(active_isa()) { set_active_isa(isa); }
    ~ScopedIsa() { set_active_isa(previous_); }
    ScopedIsa(const ScopedIsa&) = delete;
    ScopedIsa& operator=(const ScopedIsa&) = delete;

private:
    Isa previous_;
};

// C = alpha * op(A) * op(B) + beta * C, row-major. op(A) is m x k, op(B) is k x n.
// beta == 0 overwrites C without reading it.
void gemm(Trans ta, Trans tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);
void gemm(Trans ta, Trans tb, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc);

// y += alpha * x
void axpy(std::size_t n, float alpha, const float* x, float* y);
void axpy(std::size_t n, double alpha, const double* x, double* y);

float dot(std::size_t n, const float* x, const float* y);
double dot(std::size_t n, const double* x, const double* y);

struct AdamStep {
    double lr;
    double beta1;
    double beta2;
    double eps;
    double bias_correction1;  // 1 - beta1^t
    double bias_correction2;  // 1 - beta2^t
};

// In-place Adam update of one parameter array and its moment estimates.
void adam_update(std::size_t n, float* param, const float* grad, float* m, float* v, const AdamStep& s);
void adam_update(std::size_t n, double* param, const double* grad, double* m, double* v, const AdamStep& s);

}  // namespace orbitseg::kernels
