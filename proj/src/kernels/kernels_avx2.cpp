// AVX2 + FMA kernels. Compiled with -mavx2 -mfma; only reached through the
// dispatch table after a cpuid check.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "kernel_table.hpp"

namespace orbitseg::kernels::detail::avx2 {
namespace {

template <typename T>
struct Vec;

template <>
struct Vec<float> {
    using type = __m256;
    static constexpr int width = 8;
    static type zero() { return _mm256_setzero_ps(); }
    static type load(const float* p) { return _mm256_loadu_ps(p); }
    static void store(float* p, type v) { _mm256_storeu_ps(p, v); }
    static type set1(float x) { return _mm256_set1_ps(x); }
    static type fma(type a, type b, type c) { return _mm256_fmadd_ps(a, b, c); }
    static type add(type a, type b) { return _mm256_add_ps(a, b); }
    static type mul(type a, type b) { return _mm256_mul_ps(a, b); }
    static type sub(type a, type b) { return _mm256_sub_ps(a, b); }
    static type div(type a, type b) { return _mm256_div_ps(a, b); }
    static type sqrt(type a) { return _mm256_sqrt_ps(a); }
    static float hsum(type v) {
        __m128 lo = _mm256_castps256_ps128(v);
        __m128 hi = _mm256_extractf128_ps(v, 1);
        lo = _mm_add_ps(lo, hi);
        __m128 sh = _mm_movehdup_ps(lo);
        __m128 s = _mm_add_ps(lo, sh);
        sh = _mm_movehl_ps(sh, s);
        s = _mm_add_ss(s, sh);
        return _mm_cvtss_f32(s);
    }
};

template <>
struct Vec<double> {
    using type = __m256d;
    static constexpr int width = 4;
    static type zero() { return _mm256_setzero_pd(); }
    static type load(const double* p) { return _mm256_loadu_pd(p); }
    static void store(double* p, type v) { _mm256_storeu_pd(p, v); }
    static type set1(double x) { return _mm256_set1_pd(x); }
    static type fma(type a, type b, type c) { return _mm256_fmadd_pd(a, b, c); }
    static type add(type a, type b) { return _mm256_add_pd(a, b); }
    static type mul(type a, type b) { return _mm256_mul_pd(a, b); }
    static type sub(type a, type b) { return _mm256_sub_pd(a, b); }
    static type div(type a, type b) { return _mm256_div_pd(a, b); }
    static type sqrt(type a) { return _mm256_sqrt_pd(a); }
    static double hsum(type v) {
        __m128d lo = _mm256_castpd256_pd128(v);
        __m128d hi = _mm256_extractf128_pd(v, 1);
        lo = _mm_add_pd(lo, hi);
        __m128d h = _mm_unpackhi_pd(lo, lo);
        return _mm_cvtsd_f64(_mm_add_sd(lo, h));
    }
};

// Register tile: MR rows x (2 vectors) columns, 12 accumulators.
constexpr int kMR = 6;
constexpr int kKC = 256;
constexpr int kMC = 96;
constexpr int kNC = 2048;

template <typename T>
constexpr int nr() { return 2 * Vec<T>::width; }

template <typename T>
struct PackBuffers {
    std::vector<T> a;
    std::vector<T> b;
};

template <typename T>
PackBuffers<T>& pack_buffers() {
    thread_local PackBuffers<T> buffers;
    return buffers;
}

// Packs an mc x kc block of alpha*op(A) into MR-row strips, k-major within a strip.
template <typename T>
void pack_a(Trans ta, const T* a, int lda, int row0, int col0, int mc, int kc, T alpha, T* out) {
    for (int i0 = 0; i0 < mc; i0 += kMR) {
        const int rows = std::min(kMR, mc - i0);
        for (int p = 0; p < kc; ++p) {
            T* dst = out + p * kMR;
            for (int ii = 0; ii < rows; ++ii) {
                const int i = row0 + i0 + ii;
                const int kk = col0 + p;
                const T v = ta == Trans::No ? a[static_cast<std::ptrdiff_t>(i) * lda + kk]
                                            : a[static_cast<std::ptrdiff_t>(kk) * lda + i];
                dst[ii] = alpha * v;
            }
            for (int ii = rows; ii < kMR; ++ii) dst[ii] = T(0);
        }
        out += static_cast<std::ptrdiff_t>(kc) * kMR;
    }
}

// Packs a kc x nc block of op(B) into NR-column strips, k-major within a strip.
template <typename T>
void pack_b(Trans tb, const T* b, int ldb, int row0, int col0, int kc, int nc, T* out) {
    constexpr int NR = nr<T>();
    for (int j0 = 0; j0 < nc; j0 += NR) {
        const int cols = std::min(NR, nc - j0);
        for (int p = 0; p < kc; ++p) {
            T* dst = out + p * NR;
            const int kk = row0 + p;
            if (tb == Trans::No) {
                const T* src = b + static_cast<std::ptrdiff_t>(kk) * ldb + col0 + j0;
                for (int jj = 0; jj < cols; ++jj) dst[jj] = src[jj];
            } else {
                for (int jj = 0; jj < cols; ++jj)
                    dst[jj] = b[static_cast<std::ptrdiff_t>(col0 + j0 + jj) * ldb + kk];
            }
            for (int jj = cols; jj < NR; ++jj) dst[jj] = T(0);
        }
        out += static_cast<std::ptrdiff_t>(kc) * NR;
    }
}

// Adds the tile product into C, or stores it when `overwrite` is set.
template <typename T>
void micro_kernel(int kc, const T* ap, const T* bp, T* c, int ldc, int rows, int cols, bool overwrite) {
    using V = Vec<T>;
    constexpr int W = V::width;
    constexpr int NR = nr<T>();
    typename V::type acc[kMR][2];
    for (int i = 0; i < kMR; ++i) {
        acc[i][0] = V::zero();
        acc[i][1] = V::zero();
    }
    for (int p = 0; p < kc; ++p) {
        const typename V::type b0 = V::load(bp + p * NR);
        const typename V::type b1 = V::load(bp + p * NR + W);
        const T* arow = ap + p * kMR;
        for (int i = 0; i < kMR; ++i) {
            const typename V::type av = V::set1(arow[i]);
            acc[i][0] = V::fma(av, b0, acc[i][0]);
            acc[i][1] = V::fma(av, b1, acc[i][1]);
        }
    }
    if (rows == kMR && cols == NR) {
        for (int i = 0; i < kMR; ++i) {
            T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
            if (overwrite) {
                V::store(crow, acc[i][0]);
                V::store(crow + W, acc[i][1]);
            } else {
                V::store(crow, V::add(V::load(crow), acc[i][0]));
                V::store(crow + W, V::add(V::load(crow + W), acc[i][1]));
            }
        }
        return;
    }
    alignas(32) T tile[kMR * NR];
    for (int i = 0; i < kMR; ++i) {
        V::store(tile + i * NR, acc[i][0]);
        V::store(tile + i * NR + W, acc[i][1]);
    }
    for (int i = 0; i < rows; ++i) {
        T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
        if (overwrite)
            for (int j = 0; j < cols; ++j) crow[j] = tile[i * NR + j];
        else
            for (int j = 0; j < cols; ++j) crow[j] += tile[i * NR + j];
    }
}

template <typename T>
void gemm_avx2(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
               int ldb, T beta, T* c, int ldc) {
    if (m == 0 || n == 0) return;
    if (k == 0 || alpha == T(0)) {
        scale_matrix(m, n, beta, c, ldc);
        return;
    }
    // With beta == 0 the first k-block overwrites C, so C is never read.
    const bool overwrite_first = beta == T(0);
    if (!overwrite_first) scale_matrix(m, n, beta, c, ldc);
    constexpr int NR = nr<T>();
    auto& buf = pack_buffers<T>();
    const int kc_max = std::min(k, kKC);
    const int mc_max = std::min(((m + kMR - 1) / kMR) * kMR, kMC);
    const int nc_max = std::min(((n + NR - 1) / NR) * NR, kNC);
    // Grow only; shrinking and regrowing would re-zero the buffers on every call.
    if (buf.a.size() < static_cast<std::size_t>(kc_max) * mc_max) buf.a.resize(static_cast<std::size_t>(kc_max) * mc_max);
    if (buf.b.size() < static_cast<std::size_t>(kc_max) * nc_max) buf.b.resize(static_cast<std::size_t>(kc_max) * nc_max);

    for (int jc = 0; jc < n; jc += kNC) {
        const int nc = std::min(kNC, n - jc);
        for (int pc = 0; pc < k; pc += kKC) {
            const int kc = std::min(kKC, k - pc);
            pack_b(tb, b, ldb, pc, jc, kc, nc, buf.b.data());
            for (int ic = 0; ic < m; ic += kMC) {
                const int mc = std::min(kMC, m - ic);
                pack_a(ta, a, lda, ic, pc, mc, kc, alpha, buf.a.data());
                for (int jr = 0; jr < nc; jr += NR) {
                    const int cols = std::min(NR, nc - jr);
                    const T* bp = buf.b.data() + static_cast<std::ptrdiff_t>(jr / NR) * kc * NR;
                    for (int ir = 0; ir < mc; ir += kMR) {
                        const int rows = std::min(kMR, mc - ir);
                        const T* ap = buf.a.data() + static_cast<std::ptrdiff_t>(ir / kMR) * kc * kMR;
                        T* cblk = c + static_cast<std::ptrdiff_t>(ic + ir) * ldc + jc + jr;
                        micro_kernel(kc, ap, bp, cblk, ldc, rows, cols, overwrite_first && pc == 0);
                    }
                }
            }
        }
    }
}

template <typename T>
void axpy_avx2(std::size_t n, T alpha, const T* x, T* y) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    const typename V::type av = V::set1(alpha);
    std::size_t i = 0;
    for (; i + W <= n; i += W) V::store(y + i, V::fma(av, V::load(x + i), V::load(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T dot_avx2(std::size_t n, const T* x, const T* y) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    typename V::type s0 = V::zero();
    typename V::type s1 = V::zero();
    std::size_t i = 0;
    for (; i + 2 * W <= n; i += 2 * W) {
        s0 = V::fma(V::load(x + i), V::load(y + i), s0);
        s1 = V::fma(V::load(x + i + W), V::load(y + i + W), s1);
    }
    for (; i + W <= n; i += W) s0 = V::fma(V::load(x + i), V::load(y + i), s0);
    T s = V::hsum(V::add(s0, s1));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

template <typename T>
void adam_avx2(std::size_t n, T* param, const T* grad, T* m, T* v, const AdamStep& s) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    const T b1 = static_cast<T>(s.beta1);
    const T b2 = static_cast<T>(s.beta2);
    const T step = static_cast<T>(s.lr / s.bias_correction1);
    const T inv_bc2 = static_cast<T>(1.0 / s.bias_correction2);
    const T eps = static_cast<T>(s.eps);
    const auto vb1 = V::set1(b1), vb1c = V::set1(T(1) - b1);
    const auto vb2 = V::set1(b2), vb2c = V::set1(T(1) - b2);
    const auto vstep = V::set1(step), vinv = V::set1(inv_bc2), veps = V::set1(eps);
    std::size_t i = 0;
    for (; i + W <= n; i += W) {
        const auto g = V::load(grad + i);
        const auto mi = V::add(V::mul(vb1, V::load(m + i)), V::mul(vb1c, g));
        const auto vi = V::add(V::mul(vb2, V::load(v + i)), V::mul(V::mul(vb2c, g), g));
        V::store(m + i, mi);
        V::store(v + i, vi);
        const auto denom = V::add(V::sqrt(V::mul(vi, vinv)), veps);
        V::store(param + i, V::sub(V::load(param + i), V::div(V::mul(vstep, mi), denom)));
    }
    for (; i < n; ++i) {
        const T g = grad[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        param[i] -= step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
}

}  // namespace

const KernelTable<float> table_f32{&gemm_avx2<float>, &axpy_avx2<float>, &dot_avx2<float>,
                                   &adam_avx2<float>};
const KernelTable<double> table_f64{&gemm_avx2<double>, &axpy_avx2<double>, &dot_avx2<double>,
                                    &adam_avx2<double>};

}  // namespace orbitseg::kernels::detail::avx2
