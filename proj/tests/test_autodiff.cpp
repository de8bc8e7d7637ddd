#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "petrec/autodiff.hpp"
#include "petrec/geometry.hpp"
#include "petrec/rng.hpp"

using namespace petrec;
using namespace petrec::ad;

namespace {

std::vector<double> random_values(std::int64_t n, std::uint64_t seed, double lo = -1.0,
                                  double hi = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(n));
    CounterRng rng(seed, 0);
    for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
    return v;
}

}  // namespace

TEST_CASE("1x1 convolution with unit weight is the identity") {
    Tape t;
    Tensor x = t.leaf(Shape{1, 1, 4, 4}, random_values(16, 1), "x");
    Tensor w = constant(Shape{1, 1, 1, 1}, {1.0});
    Tensor b = constant(Shape{1, 1, 1, 1}, {0.0});
    Tensor y = conv2d(t, x, w, b, 0);
    REQUIRE(y.shape == Shape{1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) REQUIRE((*y.data)[i] == (*x.data)[i]);
}

TEST_CASE("3x3 all-ones convolution counts the padded neighborhood") {
    Tape t;
    Tensor x = constant_fill(Shape{1, 1, 3, 3}, 1.0);
    Tensor xv = t.leaf(x.shape, *x.data, "x");
    Tensor w = constant_fill(Shape{1, 1, 3, 3}, 1.0);
    Tensor b = constant(Shape{1, 1, 1, 1}, {0.0});
    Tensor y = conv2d(t, xv, w, b, 1);
    REQUIRE(y.shape == Shape{1, 1, 3, 3});
    // center sees all 9 inputs, corners see 4
    REQUIRE((*y.data)[4] == 9.0);
    REQUIRE((*y.data)[0] == 4.0);
    REQUIRE((*y.data)[2] == 4.0);
    REQUIRE((*y.data)[6] == 4.0);
    REQUIRE((*y.data)[8] == 4.0);
    REQUIRE((*y.data)[1] == 6.0);  // edge sees 6
}

TEST_CASE("conv2d gradients match finite differences for input, weight and bias") {
    const Shape xs{1, 2, 5, 6};
    const Shape ws{3, 2, 3, 3};
    auto xv = random_values(xs.numel(), 10);
    auto wv = random_values(ws.numel(), 11);
    auto bv = random_values(3, 12);

    auto wrt_input = [&](Tape& t, const Tensor& x) {
        Tensor w = constant(ws, wv);
        Tensor b = constant(Shape{1, 3, 1, 1}, bv);
        return sum(t, square(t, conv2d(t, x, w, b, 1)));
    };
    REQUIRE(grad_check(wrt_input, constant(xs, xv), 1e-3) < 1e-4);

    auto wrt_weight = [&](Tape& t, const Tensor& w) {
        Tensor x = constant(xs, xv);
        Tensor b = constant(Shape{1, 3, 1, 1}, bv);
        return sum(t, square(t, conv2d(t, x, w, b, 1)));
    };
    REQUIRE(grad_check(wrt_weight, constant(ws, wv), 1e-3) < 1e-4);

    auto wrt_bias = [&](Tape& t, const Tensor& b) {
        Tensor x = constant(xs, xv);
        Tensor w = constant(ws, wv);
        return sum(t, square(t, conv2d(t, x, w, b, 1)));
    };
    REQUIRE(grad_check(wrt_bias, constant(Shape{1, 3, 1, 1}, bv), 1e-3) < 1e-4);

    // unpadded 1x1 case as well
    auto wrt_input_1x1 = [&](Tape& t, const Tensor& x) {
        Tensor w = constant(Shape{2, 2, 1, 1}, random_values(4, 13));
        Tensor b = constant(Shape{1, 2, 1, 1}, random_values(2, 14));
        return sum(t, square(t, conv2d(t, x, w, b, 0)));
    };
    REQUIRE(grad_check(wrt_input_1x1, constant(xs, xv), 1e-3) < 1e-4);
}

TEST_CASE("conv2d rejects bad shapes") {
    Tape t;
    Tensor x = t.leaf(Shape{1, 2, 4, 4}, random_values(32, 2), "x");
    Tensor w5 = constant(Shape{1, 2, 5, 5}, random_values(50, 3));
    Tensor b1 = constant(Shape{1, 1, 1, 1}, {0.0});
    REQUIRE_THROWS_AS(conv2d(t, x, w5, b1, 2), input_error);
    Tensor wbad = constant(Shape{1, 3, 3, 3}, random_values(27, 4));  // wrong Cin
    REQUIRE_THROWS_AS(conv2d(t, x, wbad, b1, 1), input_error);
    Tensor w = constant(Shape{2, 2, 3, 3}, random_values(36, 5));
    REQUIRE_THROWS_AS(conv2d(t, x, w, b1, 1), input_error);  // bias size 1 != Cout 2
}

TEST_CASE("batch norm maps a constant channel to beta") {
    Tape t;
    Tensor x = t.leaf(Shape{1, 2, 4, 4}, std::vector<double>(32, 7.25), "x");
    Tensor g = constant(Shape{1, 2, 1, 1}, {1.5, -2.0});
    Tensor b = constant(Shape{1, 2, 1, 1}, {0.25, 3.0});
    Tensor y = batch_norm(t, x, g, b);
    for (int i = 0; i < 16; ++i) REQUIRE((*y.data)[i] == Catch::Approx(0.25).margin(1e-12));
    for (int i = 16; i < 32; ++i) REQUIRE((*y.data)[i] == Catch::Approx(3.0).margin(1e-12));
}

TEST_CASE("batch norm with unit gamma reproduces a standardized input") {
    // channel already has mean 0, variance 1
    std::vector<double> v = {1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0,
                             1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0};
    Tape t;
    Tensor x = t.leaf(Shape{1, 1, 4, 4}, v, "x");
    Tensor g = constant(Shape{1, 1, 1, 1}, {1.0});
    Tensor b = constant(Shape{1, 1, 1, 1}, {0.0});
    Tensor y = batch_norm(t, x, g, b, 1e-5);
    const double f = 1.0 / std::sqrt(1.0 + 1e-5);
    for (std::size_t i = 0; i < v.size(); ++i)
        REQUIRE((*y.data)[i] == Catch::Approx(v[i] * f).margin(1e-12));
}

TEST_CASE("batch norm gradients match finite differences") {
    const Shape xs{1, 3, 4, 5};
    auto xv = random_values(xs.numel(), 20);
    auto gv = random_values(3, 21, 0.5, 1.5);
    auto bv = random_values(3, 22);
    auto wrt_input = [&](Tape& t, const Tensor& x) {
        Tensor g = constant(Shape{1, 3, 1, 1}, gv);
        Tensor b = constant(Shape{1, 3, 1, 1}, bv);
        return sum(t, square(t, batch_norm(t, x, g, b)));
    };
    REQUIRE(grad_check(wrt_input, constant(xs, xv), 1e-3) < 1e-4);
    auto wrt_gamma = [&](Tape& t, const Tensor& g) {
        Tensor x = constant(xs, xv);
        Tensor b = constant(Shape{1, 3, 1, 1}, bv);
        return sum(t, square(t, batch_norm(t, x, g, b)));
    };
    REQUIRE(grad_check(wrt_gamma, constant(Shape{1, 3, 1, 1}, gv), 1e-3) < 1e-4);
    auto wrt_beta = [&](Tape& t, const Tensor& b) {
        Tensor x = constant(xs, xv);
        Tensor g = constant(Shape{1, 3, 1, 1}, gv);
        return sum(t, square(t, batch_norm(t, x, g, b)));
    };
    REQUIRE(grad_check(wrt_beta, constant(Shape{1, 3, 1, 1}, bv), 1e-3) < 1e-4);
}

TEST_CASE("relu clamps and routes gradients by sign") {
    Tape t;
    Tensor x = t.leaf(Shape{1, 1, 1, 2}, {-1.0, 2.0}, "x");
    Tensor y = relu(t, x);
    REQUIRE((*y.data)[0] == 0.0);
    REQUIRE((*y.data)[1] == 2.0);
    Tensor loss = sum(t, y);
    t.backward(loss);
    auto g = t.gradient(x);
    REQUIRE(g[0] == 0.0);
    REQUIRE(g[1] == 1.0);

    // away from the kink, finite differences agree tightly
    auto fn = [](Tape& tp, const Tensor& v) { return sum(tp, square(tp, relu(tp, v))); };
    std::vector<double> pt = random_values(24, 30);
    for (auto& v : pt) v += (v >= 0 ? 0.2 : -0.2);  // keep |v| > 0.2 > step
    REQUIRE(grad_check(fn, constant(Shape{1, 2, 3, 4}, pt), 1e-3) < 1e-6);
}

TEST_CASE("max pooling takes window maxima and back-routes to the argmax") {
    Tape t;
    Tensor x = t.leaf(Shape{1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}, "x");
    Tensor y = max_pool2(t, x);
    REQUIRE(y.shape == Shape{1, 1, 1, 1});
    REQUIRE((*y.data)[0] == 4.0);
    t.backward(sum(t, y));
    auto g = t.gradient(x);
    REQUIRE(g == std::vector<double>{0.0, 0.0, 0.0, 1.0});
}

TEST_CASE("max pooling breaks ties toward the first scan position") {
    Tape t;
    Tensor x = t.leaf(Shape{1, 1, 2, 2}, {5.0, 5.0, 5.0, 5.0}, "x");
    Tensor y = max_pool2(t, x);
    t.backward(sum(t, y));
    auto g = t.gradient(x);
    REQUIRE(g == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("max pooling rejects odd spatial dims and matches finite differences") {
    Tape t;
    Tensor x = t.leaf(Shape{1, 1, 3, 4}, random_values(12, 7), "x");
    REQUIRE_THROWS_AS(max_pool2(t, x), input_error);

    // well-separated values keep the argmax stable within +-step
    std::vector<double> v(static_cast<std::size_t>(2 * 4 * 6));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::fmod(i * 17.0, 31.0) / 10.0;
    auto fn = [](Tape& tp, const Tensor& in) { return sum(tp, square(tp, max_pool2(tp, in))); };
    REQUIRE(grad_check(fn, constant(Shape{1, 2, 4, 6}, v), 1e-3) < 1e-6);
}

TEST_CASE("bilinear upsampling interpolates the half-pixel grid") {
    Tape t;
    Tensor c = t.leaf(Shape{1, 1, 2, 2}, {3.0, 3.0, 3.0, 3.0}, "c");
    Tensor yc = upsample_bilinear2(t, c);
    REQUIRE(yc.shape == Shape{1, 1, 4, 4});
    for (double v : *yc.data) REQUIRE(v == Catch::Approx(3.0).margin(1e-12));

    Tape t2;
    Tensor x = t2.leaf(Shape{1, 1, 2, 2}, {0.0, 1.0, 0.0, 1.0}, "x");
    Tensor y = upsample_bilinear2(t2, x);
    const double expect[4] = {0.0, 0.25, 0.75, 1.0};
    for (int row = 0; row < 4; ++row)
        for (int col = 0; col < 4; ++col)
            REQUIRE((*y.data)[row * 4 + col] == Catch::Approx(expect[col]).margin(1e-12));
}

TEST_CASE("bilinear upsampling gradients match finite differences") {
    auto fn = [](Tape& tp, const Tensor& in) {
        return sum(tp, square(tp, upsample_bilinear2(tp, in)));
    };
    REQUIRE(grad_check(fn, constant(Shape{1, 2, 3, 5}, random_values(30, 40)), 1e-3) < 1e-4);
}

TEST_CASE("elementwise and reduction ops satisfy their closed forms") {
    Tape t;
    Tensor ones = t.leaf(Shape{1, 1, 2, 3}, std::vector<double>(6, 1.0), "ones");
    REQUIRE((*sum(t, ones).data)[0] == 6.0);
    REQUIRE((*mean(t, ones).data)[0] == 1.0);

    Tape t2;
    auto xv = random_values(12, 50);
    Tensor x = t2.leaf(Shape{1, 1, 3, 4}, xv, "x");
    Tensor loss = dot(t2, x, x);
    t2.backward(loss);
    auto g = t2.gradient(x);
    for (std::size_t i = 0; i < xv.size(); ++i)
        REQUIRE(g[i] == Catch::Approx(2.0 * xv[i]).margin(1e-12));

    Tape t3;
    Tensor a = t3.leaf(Shape{1, 2, 2, 2}, random_values(8, 51), "a");
    Tensor b = t3.leaf(Shape{1, 3, 2, 2}, random_values(12, 52), "b");
    Tensor cat = concat_channels(t3, a, b);
    REQUIRE(cat.shape == Shape{1, 5, 2, 2});
    for (int i = 0; i < 8; ++i) REQUIRE((*cat.data)[i] == (*a.data)[i]);
    for (int i = 0; i < 12; ++i) REQUIRE((*cat.data)[8 + i] == (*b.data)[i]);
    t3.backward(sum(t3, square(t3, cat)));
    auto ga = t3.gradient(a), gb = t3.gradient(b);
    for (int i = 0; i < 8; ++i) REQUIRE(ga[i] == Catch::Approx(2.0 * (*a.data)[i]).margin(1e-12));
    for (int i = 0; i < 12; ++i) REQUIRE(gb[i] == Catch::Approx(2.0 * (*b.data)[i]).margin(1e-12));

    // composite expression against finite differences
    auto fn = [](Tape& tp, const Tensor& v) {
        Tensor s = scalar_mul(tp, square(tp, v), 0.5);
        Tensor d = sub(tp, s, v);
        Tensor m = mul(tp, d, d);
        return add(tp, mean(tp, m), scalar_mul(tp, sum(tp, s), 0.1));
    };
    REQUIRE(grad_check(fn, constant(Shape{1, 2, 3, 3}, random_values(18, 53)), 1e-3) < 1e-4);
}

TEST_CASE("backward demands a scalar tracked loss") {
    Tape t;
    Tensor x = t.leaf(Shape{1, 1, 2, 2}, random_values(4, 60), "x");
    Tensor y = square(t, x);
    REQUIRE_THROWS_AS(t.backward(y), input_error);
    Tensor c = constant_fill(Shape{1, 1, 1, 1}, 1.0);
    REQUIRE_THROWS_AS(t.backward(c), input_error);
}

TEST_CASE("sum-loss and quadratic-loss gradients are exact") {
    Tape t;
    auto xv = random_values(9, 61);
    Tensor x = t.leaf(Shape{1, 1, 3, 3}, xv, "x");
    t.backward(sum(t, x));
    for (double g : t.gradient(x)) REQUIRE(g == 1.0);

    Tape t2;
    Tensor x2 = t2.leaf(Shape{1, 1, 3, 3}, xv, "x");
    t2.backward(scalar_mul(t2, dot(t2, x2, x2), 0.5));
    auto g2 = t2.gradient(x2);
    for (std::size_t i = 0; i < xv.size(); ++i)
        REQUIRE(g2[i] == Catch::Approx(xv[i]).margin(1e-12));
}

TEST_CASE("parameters unreachable from the loss receive zero gradients") {
    Tape t;
    Tensor used = t.leaf(Shape{1, 1, 2, 2}, random_values(4, 62), "used");
    Tensor unused = t.leaf(Shape{1, 1, 2, 2}, random_values(4, 63), "unused");
    t.backward(sum(t, square(t, used)));
    auto g = t.gradient(unused);
    for (double v : g) REQUIRE(v == 0.0);
}

TEST_CASE("backward is linear in the upstream gradient") {
    auto xv = random_values(16, 64);
    auto run = [&](double scale) {
        Tape t;
        Tensor x = t.leaf(Shape{1, 1, 4, 4}, xv, "x");
        Tensor loss = sum(t, square(t, relu(t, x)));
        t.backward(scalar_mul(t, loss, scale));
        return t.gradient(x);
    };
    auto g1 = run(1.0);
    auto g3 = run(3.0);
    for (std::size_t i = 0; i < g1.size(); ++i)
        REQUIRE(g3[i] == Catch::Approx(3.0 * g1[i]).epsilon(1e-12).margin(1e-15));
}

TEST_CASE("a parameter used on two paths accumulates both contributions") {
    const Shape ws{1, 1, 2, 2};
    auto wv = random_values(4, 65);
    auto c1 = random_values(4, 66), c2 = random_values(4, 67);
    auto fn = [&](Tape& t, const Tensor& w) {
        Tensor a = mul(t, w, constant(ws, c1));
        Tensor b = mul(t, w, constant(ws, c2));
        return sum(t, square(t, add(t, a, b)));
    };
    REQUIRE(grad_check(fn, constant(ws, wv), 1e-3) < 1e-4);
    // explicit closed form: d/dw sum((w(c1+c2))^2) = 2 w (c1+c2)^2
    Tape t;
    Tensor w = t.leaf(ws, wv, "w");
    t.backward(fn(t, w));
    auto g = t.gradient(w);
    for (int i = 0; i < 4; ++i) {
        double cs = c1[i] + c2[i];
        REQUIRE(g[i] == Catch::Approx(2.0 * wv[i] * cs * cs).margin(1e-10));
    }
}

TEST_CASE("identity linear operator passes values and gradients through") {
    LinearOp op;
    op.in_shape = op.out_shape = Shape{1, 1, 2, 2};
    op.apply = [](const std::vector<double>& v) { return v; };
    op.adjoint = [](const std::vector<double>& v) { return v; };
    Tape t;
    auto xv = random_values(4, 70);
    Tensor x = t.leaf(op.in_shape, xv, "x");
    Tensor y = linear_op(t, op, x);
    for (int i = 0; i < 4; ++i) REQUIRE((*y.data)[i] == xv[i]);
    t.backward(sum(t, square(t, y)));
    auto g = t.gradient(x);
    for (int i = 0; i < 4; ++i) REQUIRE(g[i] == Catch::Approx(2.0 * xv[i]).margin(1e-12));
}

TEST_CASE("projection operator gradient equals the adjoint of the residual") {
    ImageGrid grid;
    grid.nx = grid.ny = 16;
    grid.pixel_size = 1.0;
    ScanGeometry geom = make_parallel_geometry(20, 12, grid);
    Projector proj(grid, geom);

    LinearOp op;
    op.name = "forward_project";
    op.in_shape = Shape{1, 1, 16, 16};
    op.out_shape = Shape{1, 1, geom.n_angles(), geom.n_radial};
    op.apply = [&](const std::vector<double>& v) {
        Image img{grid, v};
        return proj.forward(img).values;
    };
    op.adjoint = [&](const std::vector<double>& v) {
        Sinogram s{geom, v};
        return proj.back(s).values;
    };

    auto xv = random_values(256, 71, 0.0, 1.0);
    // gradient of 0.5 ||P x||^2 is P^T P x
    Tape t;
    Tensor x = t.leaf(op.in_shape, xv, "x");
    t.backward(scalar_mul(t, sum(t, square(t, linear_op(t, op, x))), 0.5));
    auto g = t.gradient(x);
    Image img{grid, xv};
    Image expect = proj.back(proj.forward(img));
    for (std::size_t i = 0; i < g.size(); ++i)
        REQUIRE(g[i] == Catch::Approx(expect.values[i]).margin(1e-10));

    auto fn = [&](Tape& tp, const Tensor& v) {
        return scalar_mul(tp, sum(tp, square(tp, linear_op(tp, op, v))), 0.5);
    };
    REQUIRE(grad_check(fn, constant(op.in_shape, xv), 1e-3) < 1e-4);
}

TEST_CASE("a wrong adjoint fails the registration probe") {
    LinearOp op;
    op.in_shape = op.out_shape = Shape{1, 1, 2, 2};
    op.apply = [](const std::vector<double>& v) { return v; };
    op.adjoint = [](const std::vector<double>& v) {
        std::vector<double> o = v;
        for (auto& x : o) x *= 0.9;  // deliberately not the adjoint
        return o;
    };
    Tape t;
    Tensor x = t.leaf(op.in_shape, random_values(4, 72), "x");
    REQUIRE_THROWS_AS(linear_op(t, op, x), input_error);
}

TEST_CASE("grad_check is exact on quadratics up to roundoff") {
    auto fn = [](Tape& t, const Tensor& x) { return dot(t, x, x); };
    REQUIRE(grad_check(fn, constant(Shape{1, 1, 3, 3}, random_values(9, 80)), 1e-3) < 1e-9);
}

TEST_CASE("the tape dumps a readable graph") {
    Tape t;
    Tensor x = t.leaf(Shape{1, 1, 2, 2}, random_values(4, 81), "x");
    Tensor w = constant(Shape{1, 1, 1, 1}, {2.0});
    Tensor b = constant(Shape{1, 1, 1, 1}, {0.5});
    sum(t, relu(t, conv2d(t, x, w, b, 0)));
    std::string d = t.dump();
    REQUIRE(d.find("conv2d") != std::string::npos);
    REQUIRE(d.find("relu") != std::string::npos);
    REQUIRE(d.find("sum") != std::string::npos);
    REQUIRE(d.find("<-") != std::string::npos);
}

TEST_CASE("the debug flag surfaces non-finite values") {
    Tape t;
    t.debug_check_finite = true;
    Tensor x = t.leaf(Shape{1, 1, 1, 2}, {1.0, 2.0}, "x");
    Tensor bad = constant(Shape{1, 1, 1, 2}, {std::nan(""), 0.0});
    REQUIRE_THROWS_AS(add(t, x, bad), numeric_error);
}

TEST_CASE("forward and backward are bit-identical across repeated runs") {
    const Shape xs{1, 2, 6, 6};
    const Shape ws{2, 2, 3, 3};
    auto xv = random_values(xs.numel(), 90);
    auto wv = random_values(ws.numel(), 91);
    auto run = [&]() {
        Tape t;
        Tensor x = t.leaf(xs, xv, "x");
        Tensor w = t.leaf(ws, wv, "w");
        Tensor b = constant(Shape{1, 2, 1, 1}, {0.1, -0.2});
        Tensor y = max_pool2(t, relu(t, conv2d(t, x, w, b, 1)));
        t.backward(sum(t, square(t, y)));
        return std::pair(t.gradient(x), t.gradient(w));
    };
    auto [gx1, gw1] = run();
    auto [gx2, gw2] = run();
    REQUIRE(std::memcmp(gx1.data(), gx2.data(), gx1.size() * sizeof(double)) == 0);
    REQUIRE(std::memcmp(gw1.data(), gw2.data(), gw1.size() * sizeof(double)) == 0);
}
