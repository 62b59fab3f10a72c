// Portable reference kernels. These define the semantics the SIMD variants
// are tested against.

#include <cmath>
#include <cstddef>

#include "kernel_table.hpp"

namespace orbitseg::kernels::detail::scalar {
namespace {

template <typename T>
void gemm_ref(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
              int ldb, T beta, T* c, int ldc) {
    scale_matrix(m, n, beta, c, ldc);
    if (k == 0 || alpha == T(0)) return;
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
        for (int p = 0; p < k; ++p) {
            const T aip = alpha * (ta == Trans::No ? a[static_cast<std::ptrdiff_t>(i) * lda + p]
                                                   : a[static_cast<std::ptrdiff_t>(p) * lda + i]);
            if (aip == T(0)) continue;
            if (tb == Trans::No) {
                const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
                for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
            } else {
                for (int j = 0; j < n; ++j) crow[j] += aip * b[static_cast<std::ptrdiff_t>(j) * ldb + p];
            }
        }
    }
}

template <typename T>
void axpy_ref(std::size_t n, T alpha, const T* x, T* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T dot_ref(std::size_t n, const T* x, const T* y) {
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

template <typename T>
void adam_ref(std::size_t n, T* param, const T* grad, T* m, T* v, const AdamStep& s) {
    const T b1 = static_cast<T>(s.beta1);
    const T b2 = static_cast<T>(s.beta2);
    const T step = static_cast<T>(s.lr / s.bias_correction1);
    const T inv_bc2 = static_cast<T>(1.0 / s.bias_correction2);
    const T eps = static_cast<T>(s.eps);
    for (std::size_t i = 0; i < n; ++i) {
        const T g = grad[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        param[i] -= step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
}

}  // namespace

const KernelTable<float> table_f32{&gemm_ref<float>, &axpy_ref<float>, &dot_ref<float>, &adam_ref<float>};
const KernelTable<double> table_f64{&gemm_ref<double>, &axpy_ref<double>, &dot_ref<double>,
                                    &adam_ref<double>};

}  // namespace orbitseg::kernels::detail::scalar
