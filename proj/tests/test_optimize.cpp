#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "petrec/optimize.hpp"
#include "petrec/rng.hpp"

using namespace petrec;

namespace {

ParamSet make_params(const std::vector<std::vector<double>>& vals) {
    ParamSet ps;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        ad::Parameter p("p" + std::to_string(i), ad::ParamRole::weight,
                        ad::Shape{1, 1, 1, static_cast<int>(vals[i].size())});
        *p.values = vals[i];
        ps.add(std::move(p));
    }
    return ps;
}

std::vector<std::vector<double>> snapshot(const ParamSet& ps) {
    std::vector<std::vector<double>> out;
    for (const auto& p : ps.all()) out.push_back(*p.values);
    return out;
}

ImageGrid make_grid(int n) {
    ImageGrid g;
    g.nx = n;
    g.ny = n;
    g.pixel_size = 1.0;
    return g;
}

}  // namespace

TEST_CASE("adam leaves parameters unchanged for zero gradient and zero moments") {
    ParamSet ps = make_params({{1.5, -0.25, 3.0}, {0.0, 42.0}});
    OptimState st(ps, 1e-3, 0.0, 0.0, 1);
    const auto before = snapshot(ps);
    GradList g = {{0.0, 0.0, 0.0}, {0.0, 0.0}};
    adam_step(ps, g, st);
    REQUIRE(snapshot(ps) == before);
    REQUIRE(st.t == 1);
}

TEST_CASE("adam first step on a unit gradient matches the closed form") {
    ParamSet ps = make_params({{0.0}});
    const double eps = 1e-4;
    OptimState st(ps, eps, 0.0, 0.0, 1);
    GradList g = {{1.0}};
    adam_step(ps, g, st);
    // bias correction makes mhat = vhat = 1 at t = 1, so the first step is
    // exactly eps / (1 + adam_eps) regardless of beta values
    const double oracle = -eps * 1.0 / (std::sqrt(1.0) + 1e-8);
    REQUIRE(ps.at(0).values->at(0) == Catch::Approx(oracle).margin(1e-19));

    // with a constant gradient mhat and vhat stay pinned at 1, so every
    // subsequent step has the same magnitude
    for (int k = 0; k < 9; ++k) adam_step(ps, g, st);
    REQUIRE(ps.at(0).values->at(0) ==
            Catch::Approx(10.0 * oracle).epsilon(1e-13));
}

TEST_CASE("adam applies identical updates to parameters with identical gradients") {
    ParamSet ps = make_params({{3.0, -1.5}, {3.0, -1.5}});
    OptimState st(ps, 5e-3, 0.0, 0.0, 7);
    GradList g = {{0.8, -2.0}, {0.8, -2.0}};
    for (int k = 0; k < 5; ++k) adam_step(ps, g, st);
    REQUIRE(ps.at(0).values->at(0) == ps.at(1).values->at(0));
    REQUIRE(ps.at(0).values->at(1) == ps.at(1).values->at(1));
}

TEST_CASE("non-finite gradients abort with a diagnostic naming the parameter") {
    ParamSet ps = make_params({{1.0}, {2.0}});
    OptimState st(ps, 1e-3, 0.0, 0.0, 1);
    GradList g = {{0.5}, {std::nan("")}};
    REQUIRE_THROWS_MATCHES(adam_step(ps, g, st), numeric_error,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("p1")));
    GradList inf = {{std::numeric_limits<double>::infinity()}, {0.0}};
    REQUIRE_THROWS_MATCHES(sgd_step(ps, inf, st), numeric_error,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("p0")));
}

TEST_CASE("sgd step is the plain scaled gradient descent update") {
    ParamSet ps = make_params({{1.0, 2.0}});
    OptimState st(ps, 0.1, 0.0, 0.0, 1, OptimState::Rule::sgd);
    GradList g = {{0.5, -1.0}};
    sgd_step(ps, g, st);
    REQUIRE(ps.at(0).values->at(0) == 1.0 - 0.1 * 0.5);
    REQUIRE(ps.at(0).values->at(1) == 2.0 + 0.1 * 1.0);
}

TEST_CASE("noise injection with zero scale leaves parameters untouched") {
    ParamSet ps = make_params({{0.5, -0.5, 1.25}});
    OptimState st(ps, 1e-4, 0.0, 0.0, 99);
    const auto before = snapshot(ps);
    sgld_inject(ps, st);
    REQUIRE(snapshot(ps) == before);
}

TEST_CASE("injected noise has the advertised standard deviation") {
    const std::size_t n = 100000;
    ParamSet ps = make_params({std::vector<double>(n, 0.0)});
    OptimState st(ps, 1e-4, 0.0, 1.0, 2024);
    sgld_inject(ps, st);
    const std::vector<double>& x = *ps.at(0).values;

    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double sd = std::sqrt(var);

    // kappa * sqrt(eps) = 1e-2; empirical std within 2%, mean within 5 sigma
    REQUIRE(sd == Catch::Approx(1e-2).epsilon(0.02));
    REQUIRE(std::abs(mean) < 5.0 * 1e-2 / std::sqrt(static_cast<double>(n)));

    // lag-1 autocorrelation of the same draw sequence
    double num = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) num += (x[i] - mean) * (x[i + 1] - mean);
    const double r1 = num / (var * static_cast<double>(n));
    REQUIRE(std::abs(r1) < 0.01);
}

TEST_CASE("a fixed rng seed reproduces the same noise sequence") {
    ParamSet a = make_params({{0.0, 0.0, 0.0}, {0.0}});
    ParamSet b = make_params({{0.0, 0.0, 0.0}, {0.0}});
    OptimState sa(a, 1e-4, 0.0, 1.0, 31337);
    OptimState sb(b, 1e-4, 0.0, 1.0, 31337);
    for (int k = 0; k < 3; ++k) {
        sgld_inject(a, sa);
        sgld_inject(b, sb);
    }
    REQUIRE(snapshot(a) == snapshot(b));

    ParamSet c = make_params({{0.0, 0.0, 0.0}, {0.0}});
    OptimState sc(c, 1e-4, 0.0, 1.0, 31338);
    sgld_inject(c, sc);
    REQUIRE(snapshot(c) != snapshot(a));
}

TEST_CASE("prior gradient is tau times the parameters") {
    ParamSet ps = make_params({{2.0, -2.0}});

    GradList zero = prior_gradient(ps, 0.0);
    REQUIRE(zero[0] == std::vector<double>{0.0, 0.0});

    GradList half = prior_gradient(ps, 0.5);
    REQUIRE(half[0] == std::vector<double>{1.0, -1.0});

    GradList acc = {{0.25, 0.25}};
    add_prior_gradient(ps, 0.5, acc);
    REQUIRE(acc[0] == std::vector<double>{1.25, -0.75});
}

TEST_CASE("objective-plus-prior gradient passes a finite-difference check") {
    // f(theta) = sum_i c_i sin(theta_i); total objective F = f + (tau/2)|theta|^2
    const std::vector<double> theta = {0.3, -1.2, 2.0};
    const std::vector<double> c = {1.0, 0.7, -0.4};
    const double tau = 0.35;

    auto F = [&](const std::vector<double>& th) {
        double s = 0.0;
        for (std::size_t i = 0; i < th.size(); ++i)
            s += c[i] * std::sin(th[i]) + 0.5 * tau * th[i] * th[i];
        return s;
    };

    ParamSet ps = make_params({theta});
    GradList grad = {{}};
    grad[0].resize(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) grad[0][i] = c[i] * std::cos(theta[i]);
    add_prior_gradient(ps, tau, grad);

    const double h = 1e-6;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        std::vector<double> lo = theta, hi = theta;
        lo[i] -= h;
        hi[i] += h;
        const double fd = (F(hi) - F(lo)) / (2.0 * h);
        REQUIRE(grad[0][i] == Catch::Approx(fd).margin(1e-8));
    }
}

TEST_CASE("zero noise and zero prior make the sgld pipeline bit-identical to plain adam") {
    ParamSet a = make_params({{0.4, -0.8, 1.6}, {2.5}});
    ParamSet b = make_params({{0.4, -0.8, 1.6}, {2.5}});
    OptimState sa(a, 1e-3, 0.0, 0.0, 5);
    OptimState sb(b, 1e-3, 0.0, 0.0, 5);

    // gradient of the quadratic 0.5*|theta|^2 evaluated at the current iterate
    auto quad_grads = [](const ParamSet& ps) {
        GradList g;
        for (const auto& p : ps.all()) g.push_back(*p.values);
        return g;
    };

    for (int k = 0; k < 50; ++k) {
        GradList ga = quad_grads(a);
        sgld_step(a, ga, sa);
        GradList gb = quad_grads(b);
        adam_step(b, gb, sb);
    }
    REQUIRE(snapshot(a) == snapshot(b));
}

TEST_CASE("adam step magnitude stays below ten step sizes per coordinate") {
    const double eps = 1e-3;
    ParamSet ps = make_params({std::vector<double>(64, 0.0)});
    OptimState st(ps, eps, 0.0, 0.0, 1);
    CounterRng rng(0xabcdef, 17);
    double worst = 0.0;
    for (int k = 0; k < 200; ++k) {
        GradList g = {{}};
        g[0].resize(64);
        // adversarial mix: huge, tiny, and sign-flipping gradients
        for (std::size_t j = 0; j < 64; ++j) {
            const double r = rng.gaussian();
            g[0][j] = (j % 3 == 0) ? 1e6 * r : (j % 3 == 1) ? 1e-6 * r : ((k % 2) ? 1.0 : -1.0);
        }
        const auto before = snapshot(ps);
        adam_step(ps, g, st);
        for (std::size_t j = 0; j < 64; ++j)
            worst = std::max(worst, std::abs(ps.at(0).values->at(j) - before[0][j]));
    }
    REQUIRE(worst <= 10.0 * eps);
}

TEST_CASE("gradient-space noise realizes the same perturbation under plain sgd") {
    // default mode adds noise after the step; the alternative folds it into
    // the gradient first. For SGD with zero gradient the two realizations are
    // the same draw up to sign (immaterial for a symmetric law) and rounding.
    const std::size_t n = 1000;
    ParamSet a = make_params({std::vector<double>(n, 0.0)});
    ParamSet b = make_params({std::vector<double>(n, 0.0)});
    OptimState sa(a, 1e-4, 0.0, 1.0, 404, OptimState::Rule::sgd);
    OptimState sb(b, 1e-4, 0.0, 1.0, 404, OptimState::Rule::sgd);
    sb.noise_into_moments = true;

    GradList zero = {std::vector<double>(n, 0.0)};
    sgld_step(a, zero, sa);
    sgld_step(b, zero, sb);
    for (std::size_t j = 0; j < n; ++j) {
        const double post = a.at(0).values->at(j);
        const double pre = b.at(0).values->at(j);
        REQUIRE(pre == Catch::Approx(-post).epsilon(1e-14));
    }
}

TEST_CASE("moment-entering noise changes the adam trajectory but stays finite") {
    ParamSet a = make_params({std::vector<double>(16, 0.5)});
    ParamSet b = make_params({std::vector<double>(16, 0.5)});
    OptimState sa(a, 1e-3, 0.0, 1.0, 11);
    OptimState sb(b, 1e-3, 0.0, 1.0, 11);
    sb.noise_into_moments = true;
    GradList g = {std::vector<double>(16, 0.2)};
    for (int k = 0; k < 20; ++k) {
        sgld_step(a, g, sa);
        sgld_step(b, g, sb);
    }
    REQUIRE(snapshot(a) != snapshot(b));
    for (double v : *b.at(0).values) REQUIRE(std::isfinite(v));
}

TEST_CASE("averager starts sampling exactly at the burn-in boundary") {
    PosteriorAverager avg(0.7, 10);
    REQUIRE_FALSE(avg.should_sample(690, 1000));
    REQUIRE_FALSE(avg.should_sample(699, 1000));
    REQUIRE(avg.should_sample(700, 1000));
    REQUIRE_FALSE(avg.should_sample(701, 1000));
    REQUIRE(avg.should_sample(710, 1000));
    REQUIRE(avg.should_sample(990, 1000));

    // binary rounding of the fraction must not push the boundary past the
    // intended iterate: 0.1 * 1000 evaluates just above 100
    PosteriorAverager tenth(0.1, 10);
    REQUIRE(tenth.should_sample(100, 1000));
    REQUIRE_FALSE(tenth.should_sample(90, 1000));

    REQUIRE_THROWS_AS(avg.should_sample(1000, 1000), input_error);
}

TEST_CASE("averager over a full run collects the expected samples and mean") {
    ImageGrid g = make_grid(4);
    PosteriorAverager avg(0.7, 10);
    Image img = Image::zeros(g);
    for (int it = 0; it < 1000; ++it) {
        for (double& v : img.values) v = static_cast<double>(it);
        avg.update(it, 1000, img);
    }
    REQUIRE(avg.count() == 30);
    // samples are 700, 710, ..., 990 -> mean 845, exact in binary
    Image est = avg.estimate(img);
    for (double v : est.values) REQUIRE(v == 845.0);
}

TEST_CASE("averager of constant samples returns that constant") {
    ImageGrid g = make_grid(3);
    PosteriorAverager avg(0.0, 1);
    Image img = Image::zeros(g);
    for (double& v : img.values) v = 0.5;
    for (int it = 0; it < 7; ++it) avg.update(it, 7, img);
    REQUIRE(avg.count() == 7);
    Image est = avg.estimate(img);
    for (double v : est.values) REQUIRE(v == 0.5);
}

TEST_CASE("averager of alternating samples is their midpoint") {
    ImageGrid g = make_grid(2);
    PosteriorAverager avg(0.0, 1);
    Image a = Image::zeros(g), b = Image::zeros(g);
    for (double& v : a.values) v = 1.25;
    for (double& v : b.values) v = 3.75;
    for (int it = 0; it < 8; ++it) avg.update(it, 8, (it % 2 == 0) ? a : b);
    Image est = avg.estimate(b);
    for (double v : est.values) REQUIRE(v == 2.5);
}

TEST_CASE("averager with no folded samples falls back to the last iterate") {
    ImageGrid g = make_grid(2);
    PosteriorAverager avg(0.9, 1);
    Image last = Image::zeros(g);
    last.values = {1.0, 2.0, 3.0, 4.0};
    for (int it = 0; it < 8; ++it) avg.update(it, 10, last);  // burn-in never reached
    REQUIRE(avg.count() == 0);
    Image est = avg.estimate(last);
    REQUIRE(est.values == last.values);
}

TEST_CASE("compensated averaging matches a long-double mean to 1e-12") {
    ImageGrid g = make_grid(4);
    PosteriorAverager avg(0.0, 1);
    const int n = 5000;
    std::vector<long double> oracle(16, 0.0L);
    Image img = Image::zeros(g);
    for (int k = 0; k < n; ++k) {
        for (int i = 0; i < 16; ++i) {
            const double v = ((k % 2 == 0) ? 1e8 : 1e-3) + 0.001 * k * (i + 1);
            img.values[static_cast<std::size_t>(i)] = v;
            oracle[static_cast<std::size_t>(i)] += static_cast<long double>(v);
        }
        avg.update(k, n, img);
    }
    Image est = avg.estimate(img);
    for (int i = 0; i < 16; ++i) {
        const double want = static_cast<double>(oracle[static_cast<std::size_t>(i)] / n);
        REQUIRE(est.values[static_cast<std::size_t>(i)] ==
                Catch::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("optimizer state and averager reject invalid settings") {
    ParamSet ps = make_params({{1.0}});
    REQUIRE_THROWS_AS(OptimState(ps, 0.0, 0.0, 0.0, 1), input_error);
    REQUIRE_THROWS_AS(OptimState(ps, -1e-3, 0.0, 0.0, 1), input_error);
    REQUIRE_THROWS_AS(OptimState(ps, 1e-3, -0.1, 0.0, 1), input_error);
    REQUIRE_THROWS_AS(OptimState(ps, 1e-3, 0.0, -1.0, 1), input_error);
    REQUIRE_THROWS_AS(PosteriorAverager(1.0, 10), input_error);
    REQUIRE_THROWS_AS(PosteriorAverager(-0.1, 10), input_error);
    REQUIRE_THROWS_AS(PosteriorAverager(0.5, 0), input_error);
    REQUIRE_THROWS_AS(prior_gradient(ps, -0.5), input_error);

    OptimState st(ps, 1e-3, 0.0, 0.0, 1);
    GradList wrong = {{1.0, 2.0}};
    REQUIRE_THROWS_AS(adam_step(ps, wrong, st), input_error);
    GradList missing;
    REQUIRE_THROWS_AS(adam_step(ps, missing, st), input_error);
}
