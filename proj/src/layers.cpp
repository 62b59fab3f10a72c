#include "orbitseg/layers.hpp"

#include <algorithm>
#include <cmath>

#include "orbitseg/kernels.hpp"

namespace orbitseg::nn {
namespace {

using kernels::Trans;

// Upper bound on the im2col buffer (elements); frames are processed in
// chunks so small feature maps still give the GEMM a wide N dimension.
constexpr std::size_t kColBudget = std::size_t{1} << 22;

template <typename T>
struct Scratch {
    std::vector<T> col;
    std::vector<T> mat;
};

// Buffers only grow, so repeated calls never re-zero them.
template <typename T>
void grow(std::vector<T>& v, std::size_t n) {
    if (v.size() < n) v.resize(n);
}

template <typename T>
Scratch<T>& scratch() {
    thread_local Scratch<T> s;
    return s;
}

struct ConvGeom {
    int cin, h, w, cout, k, stride, pad, ho, wo;
    int kdim() const { return cin * k * k; }
    int out_plane() const { return ho * wo; }
    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

template <typename T>
ConvGeom geometry(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
    if (w.c() != x.c())
        throw ShapeError("conv2d: input has " + std::to_string(x.c()) + " channels, kernel expects " +
                         std::to_string(w.c()));
    if (w.h() != w.w()) throw ShapeError("conv2d: kernel must be square");
    ConvGeom g{x.c(), x.h(), x.w(), w.n(), w.h(), stride, pad, 0, 0};
    g.ho = conv_out_size(g.h, g.k, stride, pad);
    g.wo = conv_out_size(g.w, g.k, stride, pad);
    if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_string(x.shape()));
    return g;
}

int frames_per_chunk(const ConvGeom& g, int frames) {
    const std::size_t per_frame = static_cast<std::size_t>(g.kdim()) * g.out_plane();
    const std::size_t f = std::max<std::size_t>(1, kColBudget / std::max<std::size_t>(1, per_frame));
    return static_cast<int>(std::min<std::size_t>(f, static_cast<std::size_t>(frames)));
}

// Padding borders are a pixel or two wide; avoid a library call per row.
template <typename T>
inline void zero_border(T* p, int n) {
    if (n == 1) *p = T(0);
    else if (n > 1) std::fill(p, p + n, T(0));
}

// col[(ci*k + ky)*k + kx][fi*plane + oy*wo + ox]
template <typename T>
void im2col(const Tensor<T>& x, const ConvGeom& g, int f0, int nf, T* col) {
    const int plane = g.out_plane();
    const int ld = nf * plane;
    for (int ci = 0; ci < g.cin; ++ci) {
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                T* row = col + static_cast<std::ptrdiff_t>((ci * g.k + ky) * g.k + kx) * ld;
                for (int fi = 0; fi < nf; ++fi) {
                    const T* src = x.channel(f0 + fi, ci);
                    T* dst = row + static_cast<std::ptrdiff_t>(fi) * plane;
                    for (int oy = 0; oy < g.ho; ++oy) {
                        const int iy = oy * g.stride - g.pad + ky;
                        T* drow = dst + oy * g.wo;
                        if (iy < 0 || iy >= g.h) {
                            std::fill(drow, drow + g.wo, T(0));
                            continue;
                        }
                        const T* srow = src + static_cast<std::ptrdiff_t>(iy) * g.w;
                        if (g.stride == 1) {
                            const int lo = std::clamp(g.pad - kx, 0, g.wo);
                            const int hi = std::clamp(g.w + g.pad - kx, lo, g.wo);
                            zero_border(drow, lo);
                            std::copy(srow + lo - g.pad + kx, srow + hi - g.pad + kx, drow + lo);
                            zero_border(drow + hi, g.wo - hi);
                            continue;
                        }
                        for (int ox = 0; ox < g.wo; ++ox) {
                            const int ix = ox * g.stride - g.pad + kx;
                            drow[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : T(0);
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, int f0, int nf, Tensor<T>& dx) {
    const int plane = g.out_plane();
    const int ld = nf * plane;
    for (int ci = 0; ci < g.cin; ++ci) {
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                const T* row = col + static_cast<std::ptrdiff_t>((ci * g.k + ky) * g.k + kx) * ld;
                for (int fi = 0; fi < nf; ++fi) {
                    T* dst = dx.channel(f0 + fi, ci);
                    const T* src = row + static_cast<std::ptrdiff_t>(fi) * plane;
                    for (int oy = 0; oy < g.ho; ++oy) {
                        const int iy = oy * g.stride - g.pad + ky;
                        if (iy < 0 || iy >= g.h) continue;
                        T* drow = dst + static_cast<std::ptrdiff_t>(iy) * g.w;
                        const T* srow = src + oy * g.wo;
                        if (g.stride == 1) {
                            const int lo = std::clamp(g.pad - kx, 0, g.wo);
                            const int hi = std::clamp(g.w + g.pad - kx, lo, g.wo);
                            T* d = drow - g.pad + kx;
                            for (int ox = lo; ox < hi; ++ox) d[ox] += srow[ox];
                            continue;
                        }
                        for (int ox = 0; ox < g.wo; ++ox) {
                            const int ix = ox * g.stride - g.pad + kx;
                            if (ix >= 0 && ix < g.w) drow[ix] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const T* bias, int stride, int pad, Tensor<T>& y) {
    const ConvGeom g = geometry(x, w, stride, pad);
    const int frames = x.n();
    y = Tensor<T>(frames, g.cout, g.ho, g.wo);
    const int plane = g.out_plane();

    if (g.pointwise()) {
        for (int f = 0; f < frames; ++f) {
            kernels::gemm(Trans::No, Trans::No, g.cout, plane, g.cin, T(1), w.data(), g.cin, x.frame(f), plane,
                          T(0), y.frame(f), plane);
        }
    } else {
        auto& s = scratch<T>();
        const int chunk = frames_per_chunk(g, frames);
        for (int f0 = 0; f0 < frames; f0 += chunk) {
            const int nf = std::min(chunk, frames - f0);
            const int ld = nf * plane;
            grow(s.col, static_cast<std::size_t>(g.kdim()) * ld);
            im2col(x, g, f0, nf, s.col.data());
            if (nf == 1) {
                kernels::gemm(Trans::No, Trans::No, g.cout, ld, g.kdim(), T(1), w.data(), g.kdim(), s.col.data(), ld,
                              T(0), y.frame(f0), plane);
                continue;
            }
            grow(s.mat, static_cast<std::size_t>(g.cout) * ld);
            kernels::gemm(Trans::No, Trans::No, g.cout, ld, g.kdim(), T(1), w.data(), g.kdim(), s.col.data(), ld,
                          T(0), s.mat.data(), ld);
            for (int fi = 0; fi < nf; ++fi) {
                for (int co = 0; co < g.cout; ++co) {
                    const T* src = s.mat.data() + static_cast<std::ptrdiff_t>(co) * ld + fi * plane;
                    std::copy(src, src + plane, y.channel(f0 + fi, co));
                }
            }
        }
    }
    if (bias) {
        for (int f = 0; f < frames; ++f) {
            for (int co = 0; co < g.cout; ++co) {
                T* p = y.channel(f, co);
                const T b = bias[co];
                for (int i = 0; i < plane; ++i) p[i] += b;
            }
        }
    }
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad, const Tensor<T>& dy,
                     Tensor<T>* dx, Tensor<T>* dw, T* db) {
    const ConvGeom g = geometry(x, w, stride, pad);
    const int frames = x.n();
    require_shape(dy, Shape4{frames, g.cout, g.ho, g.wo}, "conv2d_backward dy");
    if (dx) require_shape(*dx, x.shape(), "conv2d_backward dx");
    if (dw) require_shape(*dw, w.shape(), "conv2d_backward dw");
    const int plane = g.out_plane();

    if (db) {
        for (int f = 0; f < frames; ++f) {
            for (int co = 0; co < g.cout; ++co) {
                const T* p = dy.channel(f, co);
                T s = 0;
                for (int i = 0; i < plane; ++i) s += p[i];
                db[co] += s;
            }
        }
    }
    if (!dx && !dw) return;

    if (g.pointwise()) {
        for (int f = 0; f < frames; ++f) {
            if (dw)
                kernels::gemm(Trans::No, Trans::Yes, g.cout, g.cin, plane, T(1), dy.frame(f), plane, x.frame(f), plane,
                              T(1), dw->data(), g.cin);
            if (dx)
                kernels::gemm(Trans::Yes, Trans::No, g.cin, plane, g.cout, T(1), w.data(), g.cin, dy.frame(f), plane,
                              T(1), dx->frame(f), plane);
        }
        return;
    }

    auto& s = scratch<T>();
    const int chunk = frames_per_chunk(g, frames);
    for (int f0 = 0; f0 < frames; f0 += chunk) {
        const int nf = std::min(chunk, frames - f0);
        const int ld = nf * plane;
        const T* dymat = nullptr;
        if (nf == 1) {
            dymat = dy.frame(f0);
        } else {
            grow(s.mat, static_cast<std::size_t>(g.cout) * ld);
            for (int fi = 0; fi < nf; ++fi) {
                for (int co = 0; co < g.cout; ++co) {
                    const T* src = dy.channel(f0 + fi, co);
                    std::copy(src, src + plane, s.mat.data() + static_cast<std::ptrdiff_t>(co) * ld + fi * plane);
                }
            }
            dymat = s.mat.data();
        }
        grow(s.col, static_cast<std::size_t>(g.kdim()) * ld);
        if (dw) {
            im2col(x, g, f0, nf, s.col.data());
            kernels::gemm(Trans::No, Trans::Yes, g.cout, g.kdim(), ld, T(1), dymat, ld, s.col.data(), ld, T(1),
                          dw->data(), g.kdim());
        }
        if (dx) {
            kernels::gemm(Trans::Yes, Trans::No, g.kdim(), ld, g.cout, T(1), w.data(), g.kdim(), dymat, ld, T(0),
                          s.col.data(), ld);
            col2im_add(s.col.data(), g, f0, nf, *dx);
        }
    }
}

template <typename T>
void elu_forward(const Tensor<T>& x, Tensor<T>& y) {
    y = x.like();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : std::expm1(x[i]);
}

template <typename T>
void elu_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx) {
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] += dy[i] * (y[i] > T(0) ? T(1) : y[i] + T(1));
}

template <typename T>
void relu_forward(const Tensor<T>& x, Tensor<T>& y) {
    y = x.like();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx) {
    for (std::size_t i = 0; i < y.size(); ++i)
        if (y[i] > T(0)) dx[i] += dy[i];
}

template <typename T>
void leaky_relu_forward(const Tensor<T>& x, T slope, Tensor<T>& y) {
    y = x.like();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : slope * x[i];
}

template <typename T>
void leaky_relu_backward(const Tensor<T>& y, T slope, const Tensor<T>& dy, Tensor<T>& dx) {
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] += dy[i] * (y[i] > T(0) ? T(1) : slope);
}

template <typename T>
T sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
void sigmoid_forward(const Tensor<T>& x, Tensor<T>& y) {
    y = x.like();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
}

template <typename T>
void sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx) {
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
}

template <typename T>
void maxpool2_forward(const Tensor<T>& x, Tensor<T>& y, std::vector<std::int32_t>& argmax) {
    if (x.h() % 2 != 0 || x.w() % 2 != 0) throw ShapeError("maxpool2: odd spatial size " + shape_string(x.shape()));
    const int ho = x.h() / 2, wo = x.w() / 2;
    y = Tensor<T>(x.n(), x.c(), ho, wo);
    argmax.resize(y.size());
    std::size_t o = 0;
    for (int n = 0; n < x.n(); ++n) {
        for (int c = 0; c < x.c(); ++c) {
            const T* src = x.channel(n, c);
            for (int oy = 0; oy < ho; ++oy) {
                for (int ox = 0; ox < wo; ++ox, ++o) {
                    int best = (2 * oy) * x.w() + 2 * ox;
                    for (int dy = 0; dy < 2; ++dy) {
                        for (int dx = 0; dx < 2; ++dx) {
                            const int idx = (2 * oy + dy) * x.w() + 2 * ox + dx;
                            if (src[idx] > src[best]) best = idx;
                        }
                    }
                    y[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
    }
}

template <typename T>
void maxpool2_backward(const Tensor<T>& dy, const std::vector<std::int32_t>& argmax, Tensor<T>& dx) {
    const std::size_t out_plane = dy.plane();
    for (int n = 0; n < dy.n(); ++n) {
        for (int c = 0; c < dy.c(); ++c) {
            T* dst = dx.channel(n, c);
            const T* src = dy.channel(n, c);
            const std::size_t base = (static_cast<std::size_t>(n) * dy.c() + c) * out_plane;
            for (std::size_t i = 0; i < out_plane; ++i) dst[argmax[base + i]] += src[i];
        }
    }
}

template <typename T>
void upsample2_forward(const Tensor<T>& x, Tensor<T>& y) {
    y = Tensor<T>(x.n(), x.c(), 2 * x.h(), 2 * x.w());
    for (int n = 0; n < x.n(); ++n) {
        for (int c = 0; c < x.c(); ++c) {
            const T* src = x.channel(n, c);
            T* dst = y.channel(n, c);
            for (int oy = 0; oy < y.h(); ++oy) {
                const T* srow = src + (oy / 2) * x.w();
                T* drow = dst + oy * y.w();
                for (int ox = 0; ox < y.w(); ++ox) drow[ox] = srow[ox / 2];
            }
        }
    }
}

template <typename T>
void upsample2_backward(const Tensor<T>& dy, Tensor<T>& dx) {
    for (int n = 0; n < dx.n(); ++n) {
        for (int c = 0; c < dx.c(); ++c) {
            const T* src = dy.channel(n, c);
            T* dst = dx.channel(n, c);
            for (int oy = 0; oy < dy.h(); ++oy) {
                const T* srow = src + oy * dy.w();
                T* drow = dst + (oy / 2) * dx.w();
                for (int ox = 0; ox < dy.w(); ++ox) drow[ox / 2] += srow[ox];
            }
        }
    }
}

template <typename T>
void concat_forward(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y) {
    if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
        throw ShapeError("concat: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    y = Tensor<T>(a.n(), a.c() + b.c(), a.h(), a.w());
    for (int n = 0; n < a.n(); ++n) {
        std::copy(a.frame(n), a.frame(n) + a.frame_size(), y.frame(n));
        std::copy(b.frame(n), b.frame(n) + b.frame_size(), y.frame(n) + a.frame_size());
    }
}

template <typename T>
void concat_backward(const Tensor<T>& dy, Tensor<T>& da, Tensor<T>& db) {
    for (int n = 0; n < dy.n(); ++n) {
        const T* src = dy.frame(n);
        T* pa = da.frame(n);
        for (std::size_t i = 0; i < da.frame_size(); ++i) pa[i] += src[i];
        src += da.frame_size();
        T* pb = db.frame(n);
        for (std::size_t i = 0; i < db.frame_size(); ++i) pb[i] += src[i];
    }
}

template <typename T>
void linear_forward(const Tensor<T>& x, const Tensor<T>& w, const T* bias, Tensor<T>& y) {
    const int in = static_cast<int>(x.frame_size());
    if (w.c() * w.h() * w.w() != in)
        throw ShapeError("linear: input features " + std::to_string(in) + " vs weight " + shape_string(w.shape()));
    const int out = w.n();
    y = Tensor<T>(x.n(), out, 1, 1);
    kernels::gemm(Trans::No, Trans::Yes, x.n(), out, in, T(1), x.data(), in, w.data(), in, T(0), y.data(), out);
    if (bias) {
        for (int n = 0; n < x.n(); ++n)
            for (int o = 0; o < out; ++o) y.at(n, o, 0, 0) += bias[o];
    }
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>* dx, Tensor<T>* dw,
                     T* db) {
    const int in = static_cast<int>(x.frame_size());
    const int out = w.n();
    const int batch = x.n();
    if (db) {
        for (int n = 0; n < batch; ++n)
            for (int o = 0; o < out; ++o) db[o] += dy.at(n, o, 0, 0);
    }
    if (dw)
        kernels::gemm(Trans::Yes, Trans::No, out, in, batch, T(1), dy.data(), out, x.data(), in, T(1), dw->data(), in);
    if (dx)
        kernels::gemm(Trans::No, Trans::No, batch, in, out, T(1), dy.data(), out, w.data(), in, T(1), dx->data(), in);
}

template <typename T>
void accumulate(const Tensor<T>& x, Tensor<T>& y) {
    kernels::axpy(x.size(), T(1), x.data(), y.data());
}

#define ORBITSEG_INSTANTIATE(T)                                                                                  \
    template void conv2d_forward<T>(const Tensor<T>&, const Tensor<T>&, const T*, int, int, Tensor<T>&);         \
    template void conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&, int, int, const Tensor<T>&, Tensor<T>*,  \
                                     Tensor<T>*, T*);                                                            \
    template void elu_forward<T>(const Tensor<T>&, Tensor<T>&);                                                  \
    template void elu_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                               \
    template void relu_forward<T>(const Tensor<T>&, Tensor<T>&);                                                 \
    template void relu_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                              \
    template void leaky_relu_forward<T>(const Tensor<T>&, T, Tensor<T>&);                                        \
    template void leaky_relu_backward<T>(const Tensor<T>&, T, const Tensor<T>&, Tensor<T>&);                     \
    template T sigmoid<T>(T);                                                                                    \
    template void sigmoid_forward<T>(const Tensor<T>&, Tensor<T>&);                                              \
    template void sigmoid_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                           \
    template void maxpool2_forward<T>(const Tensor<T>&, Tensor<T>&, std::vector<std::int32_t>&);                 \
    template void maxpool2_backward<T>(const Tensor<T>&, const std::vector<std::int32_t>&, Tensor<T>&);          \
    template void upsample2_forward<T>(const Tensor<T>&, Tensor<T>&);                                            \
    template void upsample2_backward<T>(const Tensor<T>&, Tensor<T>&);                                           \
    template void concat_forward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                             \
    template void concat_backward<T>(const Tensor<T>&, Tensor<T>&, Tensor<T>&);                                  \
    template void linear_forward<T>(const Tensor<T>&, const Tensor<T>&, const T*, Tensor<T>&);                   \
    template void linear_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*,           \
                                     Tensor<T>*, T*);                                                            \
    template void accumulate<T>(const Tensor<T>&, Tensor<T>&);

ORBITSEG_INSTANTIATE(float)
ORBITSEG_INSTANTIATE(double)

#undef ORBITSEG_INSTANTIATE

}  // namespace orbitseg::nn
