#pragma once

#include "orbitseg/kernels.hpp"

namespace orbitseg::kernels::detail {

template <typename T>
struct KernelTable {
    void (*gemm)(Trans, Trans, int, int, int, T, const T*, int, const T*, int, T, T*, int);
    void (*axpy)(std::size_t, T, const T*, T*);
    T (*dot)(std::size_t, const T*, const T*);
    void (*adam_update)(std::size_t, T*, const T*, T*, T*, const AdamStep&);
};

namespace scalar {
extern const KernelTable<float> table_f32;
extern const KernelTable<double> table_f64;
}  // namespace scalar

#if defined(ORBITSEG_HAVE_AVX2)
namespace avx2 {
extern const KernelTable<float> table_f32;
extern const KernelTable<double> table_f64;
}  // namespace avx2
#endif

// Scales C by beta (beta == 0 clears without reading). Shared by both variants.
template <typename T>
inline void scale_matrix(int m, int n, T beta, T* c, int ldc) {
    if (beta == T(1)) return;
    for (int i = 0; i < m; ++i) {
        T* row = c + static_cast<std::ptrdiff_t>(i) * ldc;
        if (beta == T(0)) {
            for (int j = 0; j < n; ++j) row[j] = T(0);
        } else {
            for (int j = 0; j < n; ++j) row[j] *= beta;
        }
    }
}

}  // namespace orbitseg::kernels::detail
