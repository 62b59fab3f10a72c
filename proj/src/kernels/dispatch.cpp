#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "kernel_table.hpp"

namespace orbitseg::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(ORBITSEG_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

// ORBITSEG_SIMD=scalar forces the reference path process-wide.
Isa detect_default() {
    if (const char* env = std::getenv("ORBITSEG_SIMD")) {
        if (std::string(env) == "scalar") return Isa::Scalar;
    }
    return cpu_has_avx2() ? Isa::Avx2 : Isa::Scalar;
}

std::atomic<Isa>& active() {
    static std::atomic<Isa> isa{detect_default()};
    return isa;
}

template <typename T>
const detail::KernelTable<T>& table();

template <>
const detail::KernelTable<float>& table<float>() {
#if defined(ORBITSEG_HAVE_AVX2)
    if (active().load(std::memory_order_relaxed) == Isa::Avx2) return detail::avx2::table_f32;
#endif
    return detail::scalar::table_f32;
}

template <>
const detail::KernelTable<double>& table<double>() {
#if defined(ORBITSEG_HAVE_AVX2)
    if (active().load(std::memory_order_relaxed) == Isa::Avx2) return detail::avx2::table_f64;
#endif
    return detail::scalar::table_f64;
}

}  // namespace

bool isa_supported(Isa isa) {
    if (isa == Isa::Scalar) return true;
    static const bool avx2 = cpu_has_avx2();
    return avx2;
}

Isa active_isa() { return active().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
    if (!isa_supported(isa)) {
        throw std::invalid_argument("SIMD variant not supported on this CPU: " + std::string(isa_name(isa)));
    }
    active().store(isa, std::memory_order_relaxed);
}

std::string_view isa_name(Isa isa) {
    switch (isa) {
        case Isa::Scalar: return "scalar";
        case Isa::Avx2: return "avx2";
    }
    return "unknown";
}

void gemm(Trans ta, Trans tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
    table<float>().gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
void gemm(Trans ta, Trans tb, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
    table<double>().gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void axpy(std::size_t n, float alpha, const float* x, float* y) { table<float>().axpy(n, alpha, x, y); }
void axpy(std::size_t n, double alpha, const double* x, double* y) { table<double>().axpy(n, alpha, x, y); }

float dot(std::size_t n, const float* x, const float* y) { return table<float>().dot(n, x, y); }
double dot(std::size_t n, const double* x, const double* y) { return table<double>().dot(n, x, y); }

void adam_update(std::size_t n, float* param, const float* grad, float* m, float* v, const AdamStep& s) {
    table<float>().adam_update(n, param, grad, m, v, s);
}
void adam_update(std::size_t n, double* param, const double* grad, double* m, double* v, const AdamStep& s) {
    table<double>().adam_update(n, param, grad, m, v, s);
}

}  // namespace orbitseg::kernels
