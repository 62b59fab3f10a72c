#include <cmath>
#include <functional>

#include "doctest.h"
#include "orbitseg/kernels.hpp"
#include "orbitseg/layers.hpp"
#include "test_util.hpp"

using namespace orbitseg;
using namespace orbitseg::nn;
using testutil::random_tensor;

namespace {

// Direct convolution used as the oracle for the im2col path.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const double* bias, int stride, int pad) {
    const int k = w.h();
    const int ho = conv_out_size(x.h(), k, stride, pad), wo = conv_out_size(x.w(), k, stride, pad);
    Tensor<double> y(x.n(), w.n(), ho, wo);
    for (int n = 0; n < x.n(); ++n)
        for (int co = 0; co < w.n(); ++co)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    double s = bias ? bias[co] : 0.0;
                    for (int ci = 0; ci < x.c(); ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                                if (iy < 0 || ix < 0 || iy >= x.h() || ix >= x.w()) continue;
                                s += x.at(n, ci, iy, ix) * w.at(co, ci, ky, kx);
                            }
                    y.at(n, co, oy, ox) = s;
                }
    return y;
}

// Central-difference check of d(sum(g * f(x)))/dx against an analytic gradient.
void check_input_gradient(Tensor<double>& x, const std::function<Tensor<double>(const Tensor<double>&)>& f,
                          const Tensor<double>& g, const Tensor<double>& analytic, double tol = 1e-6) {
    const double h = 1e-6;
    for (std::size_t i = 0; i < x.size(); i += std::max<std::size_t>(1, x.size() / 23)) {
        const double saved = x[i];
        x[i] = saved + h;
        const Tensor<double> up = f(x);
        x[i] = saved - h;
        const Tensor<double> dn = f(x);
        x[i] = saved;
        double num = 0;
        for (std::size_t j = 0; j < g.size(); ++j) num += g[j] * (up[j] - dn[j]) / (2 * h);
        CHECK(analytic[i] == doctest::Approx(num).epsilon(tol).scale(1.0));
    }
}

}  // namespace

TEST_CASE("conv2d matches direct convolution for every kernel variant") {
    Rng rng(3);
    struct Case {
        int cin, cout, h, k, stride, pad;
    };
    for (Case c : {Case{1, 2, 6, 3, 1, 1}, Case{3, 4, 8, 5, 2, 2}, Case{5, 3, 7, 1, 1, 0}, Case{2, 2, 8, 3, 2, 0}}) {
        const auto x = random_tensor<double>({2, c.cin, c.h, c.h}, rng);
        const auto w = random_tensor<double>({c.cout, c.cin, c.k, c.k}, rng);
        const auto b = random_tensor<double>({c.cout, 1, 1, 1}, rng);
        const auto expect = naive_conv(x, w, b.data(), c.stride, c.pad);
        for (auto isa : {kernels::Isa::Scalar, kernels::Isa::Avx2}) {
            if (!kernels::isa_supported(isa)) continue;
            kernels::ScopedIsa pin(isa);
            Tensor<double> y;
            conv2d_forward(x, w, b.data(), c.stride, c.pad, y);
            REQUIRE(y.shape() == expect.shape());
            for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(expect[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("conv2d backward matches finite differences") {
    Rng rng(4);
    auto x = random_tensor<double>({2, 3, 6, 6}, rng);
    auto w = random_tensor<double>({4, 3, 3, 3}, rng);
    const auto g = random_tensor<double>({2, 4, 3, 3}, rng);
    Tensor<double> dx = x.like(), dw = w.like();
    std::vector<double> db(4, 0.0);
    conv2d_backward(x, w, 2, 1, g, &dx, &dw, db.data());
    check_input_gradient(x, [&](const Tensor<double>& in) { return naive_conv(in, w, nullptr, 2, 1); }, g, dx);
    check_input_gradient(w, [&](const Tensor<double>& in) { return naive_conv(x, in, nullptr, 2, 1); }, g, dw);
    for (int co = 0; co < 4; ++co) {
        double s = 0;
        for (int n = 0; n < 2; ++n)
            for (std::size_t i = 0; i < g.plane(); ++i) s += g.channel(n, co)[i];
        CHECK(db[co] == doctest::Approx(s));
    }
}

TEST_CASE("backward functions accumulate into existing gradients") {
    Rng rng(8);
    const auto x = random_tensor<double>({1, 2, 4, 4}, rng);
    const auto w = random_tensor<double>({2, 2, 3, 3}, rng);
    const auto g = random_tensor<double>({1, 2, 4, 4}, rng);
    Tensor<double> once = x.like(), twice = x.like();
    conv2d_backward<double>(x, w, 1, 1, g, &once, nullptr, nullptr);
    conv2d_backward<double>(x, w, 1, 1, g, &twice, nullptr, nullptr);
    conv2d_backward<double>(x, w, 1, 1, g, &twice, nullptr, nullptr);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(twice[i] == doctest::Approx(2 * once[i]));
}

TEST_CASE("activations and their derivatives") {
    Tensor<double> x(1, 1, 1, 4);
    x[0] = -2, x[1] = -0.5, x[2] = 0.5, x[3] = 3;
    Tensor<double> y, dx(1, 1, 1, 4);
    Tensor<double> ones(1, 1, 1, 4);
    ones.fill(1);

    elu_forward(x, y);
    CHECK(y[0] == doctest::Approx(std::exp(-2.0) - 1));
    CHECK(y[3] == 3);
    elu_backward(y, ones, dx);
    CHECK(dx[0] == doctest::Approx(std::exp(-2.0)));
    CHECK(dx[3] == 1);

    dx.zero();
    leaky_relu_forward(x, 0.2, y);
    CHECK(y[1] == doctest::Approx(-0.1));
    leaky_relu_backward(y, 0.2, ones, dx);
    CHECK(dx[1] == doctest::Approx(0.2));
    CHECK(dx[2] == 1);

    dx.zero();
    relu_forward(x, y);
    CHECK(y[0] == 0);
    relu_backward(y, ones, dx);
    CHECK(dx[0] == 0);
    CHECK(dx[2] == 1);

    CHECK(sigmoid(0.0) == 0.5);
    CHECK(sigmoid(-800.0) >= 0.0);
    CHECK(std::isfinite(sigmoid(-800.0)));
    CHECK(sigmoid(800.0) == 1.0);
}

TEST_CASE("max pooling keeps the winner and routes its gradient") {
    Tensor<double> x(1, 1, 2, 4);
    const double v[] = {1, 5, 2, 2, 3, 4, 9, 0};
    std::copy(v, v + 8, x.data());
    Tensor<double> y;
    std::vector<std::int32_t> arg;
    maxpool2_forward(x, y, arg);
    REQUIRE(y.shape() == Shape4{1, 1, 1, 2});
    CHECK(y[0] == 5);
    CHECK(y[1] == 9);
    Tensor<double> dy(1, 1, 1, 2);
    dy[0] = 1, dy[1] = 2;
    Tensor<double> dx = x.like();
    maxpool2_backward(dy, arg, dx);
    CHECK(dx[1] == 1);
    CHECK(dx[6] == 2);
    double total = 0;
    for (std::size_t i = 0; i < dx.size(); ++i) total += dx[i];
    CHECK(total == 3);
}

TEST_CASE("nearest upsampling and its adjoint") {
    Rng rng(2);
    auto x = random_tensor<double>({2, 3, 3, 4}, rng);
    Tensor<double> y;
    upsample2_forward(x, y);
    REQUIRE(y.shape() == Shape4{2, 3, 6, 8});
    CHECK(y.at(1, 2, 5, 7) == x.at(1, 2, 2, 3));
    CHECK(y.at(0, 1, 2, 3) == x.at(0, 1, 1, 1));
    const auto g = random_tensor<double>(y.shape(), rng);
    Tensor<double> dx = x.like();
    upsample2_backward(g, dx);
    check_input_gradient(x, [](const Tensor<double>& in) {
        Tensor<double> out;
        upsample2_forward(in, out);
        return out;
    }, g, dx);
}

TEST_CASE("concat places a before b along channels") {
    Rng rng(6);
    const auto a = random_tensor<double>({2, 2, 3, 3}, rng);
    const auto b = random_tensor<double>({2, 3, 3, 3}, rng);
    Tensor<double> y;
    concat_forward(a, b, y);
    REQUIRE(y.shape() == Shape4{2, 5, 3, 3});
    CHECK(y.at(1, 1, 2, 2) == a.at(1, 1, 2, 2));
    CHECK(y.at(1, 2, 0, 1) == b.at(1, 0, 0, 1));
    Tensor<double> da = a.like(), db = b.like();
    concat_backward(y, da, db);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(da[i] == a[i]);
    for (std::size_t i = 0; i < b.size(); ++i) CHECK(db[i] == b[i]);
}

TEST_CASE("linear layer matches finite differences") {
    Rng rng(9);
    auto x = random_tensor<double>({3, 4, 1, 1}, rng);
    auto w = random_tensor<double>({5, 4, 1, 1}, rng);
    const auto bias = random_tensor<double>({5, 1, 1, 1}, rng);
    Tensor<double> y;
    linear_forward(x, w, bias.data(), y);
    REQUIRE(y.n() == 3);
    REQUIRE(y.c() == 5);
    double s = bias[2];
    for (int i = 0; i < 4; ++i) s += w.at(2, i, 0, 0) * x.at(1, i, 0, 0);
    CHECK(y.at(1, 2, 0, 0) == doctest::Approx(s));

    const auto g = random_tensor<double>(y.shape(), rng);
    Tensor<double> dx = x.like(), dw = w.like();
    std::vector<double> db(5, 0.0);
    linear_backward(x, w, g, &dx, &dw, db.data());
    auto fx = [&](const Tensor<double>& in) {
        Tensor<double> out;
        linear_forward(in, w, bias.data(), out);
        return out;
    };
    check_input_gradient(x, fx, g, dx);
    auto fw = [&](const Tensor<double>& in) {
        Tensor<double> out;
        linear_forward(x, in, bias.data(), out);
        return out;
    };
    check_input_gradient(w, fw, g, dw);
}

TEST_CASE("reshape rejects a size change") {
    Tensor<float> t(1, 2, 3, 4);
    CHECK_NOTHROW(t.reshape({2, 1, 4, 3}));
    CHECK_THROWS_AS(t.reshape({2, 2, 3, 4}), ShapeError);
}
