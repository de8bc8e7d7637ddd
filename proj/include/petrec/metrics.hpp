#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "petrec/common.hpp"
#include "petrec/geometry.hpp"

namespace petrec {

struct MetricResult {
    double psnr_db = 0.0;
    double ssim = 0.0;
    double data_range = 0.0;
};

struct LineProfile {
    bool is_row = true;
    int index = 0;
    std::vector<int> positions;
    std::vector<std::vector<double>> values;  // one vector per compared image
};

inline double default_data_range(const Image& ref) {
    double mn = std::numeric_limits<double>::infinity();
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : ref.values) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    return mx - mn;
}

// 10 log10(L^2 / MSE); identical images return +infinity.
inline double psnr(const Image& ref, const Image& test,
                   std::optional<double> data_range = std::nullopt) {
    if (!(ref.grid == test.grid))
        throw input_error("psnr: images have different shapes");
    double mse = 0.0;
    const std::size_t n = ref.values.size();
    for (std::size_t i = 0; i < n; ++i) {
        double d = ref.values[i] - test.values[i];
        mse += d * d;
    }
    mse /= static_cast<double>(n);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    double L = data_range ? *data_range : default_data_range(ref);
    if (!(L > 0.0)) throw input_error("psnr: data range must be > 0");
    return 10.0 * std::log10(L * L / mse);
}

// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), C1=(0.01 L)^2,
// C2=(0.03 L)^2, averaged over fully interior window positions.
inline double ssim(const Image& ref, const Image& test,
                   std::optional<double> data_range = std::nullopt) {
    if (!(ref.grid == test.grid))
        throw input_error("ssim: images have different shapes");
    const int W = 11, H = ref.grid.ny, Wd = ref.grid.nx;
    if (Wd < W || H < W)
        throw input_error("ssim: image smaller than the 11x11 window");
    double L = data_range ? *data_range : default_data_range(ref);
    if (!(L > 0.0)) throw input_error("ssim: data range must be > 0");
    const double C1 = (0.01 * L) * (0.01 * L);
    const double C2 = (0.03 * L) * (0.03 * L);

    double w[W * W];
    {
        const double sigma = 1.5;
        double s = 0.0;
        for (int dy = 0; dy < W; ++dy)
            for (int dx = 0; dx < W; ++dx) {
                double u = dx - (W - 1) / 2.0, v = dy - (W - 1) / 2.0;
                w[dy * W + dx] = std::exp(-(u * u + v * v) / (2.0 * sigma * sigma));
                s += w[dy * W + dx];
            }
        for (double& x : w) x /= s;
    }

    const double* a = ref.values.data();
    const double* b = test.values.data();
    double acc = 0.0;
    std::int64_t count = 0;
    for (int y0 = 0; y0 + W <= H; ++y0)
        for (int x0 = 0; x0 + W <= Wd; ++x0) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int dy = 0; dy < W; ++dy)
                for (int dx = 0; dx < W; ++dx) {
                    double wk = w[dy * W + dx];
                    double xa = a[(y0 + dy) * Wd + (x0 + dx)];
                    double yb = b[(y0 + dy) * Wd + (x0 + dx)];
                    mx += wk * xa;
                    my += wk * yb;
                    xx += wk * xa * xa;
                    yy += wk * yb * yb;
                    xy += wk * (xa * yb);  // grouping keeps ssim(a,b) == ssim(b,a) exactly
                }
            double p = mx * mx, q = my * my;
            double vx = xx - p;
            double vy = yy - q;
            double cxy = xy - mx * my;
            // min/max ordering keeps the mixed sums identical under a
            // reference/test swap even when the compiler fuses multiply-adds
            double num = (2.0 * mx * my + C1) * (2.0 * cxy + C2);
            double den = (std::min(p, q) + std::max(p, q) + C1) *
                         (std::min(vx, vy) + std::max(vx, vy) + C2);
            acc += num / den;
            ++count;
        }
    return acc / static_cast<double>(count);
}

inline MetricResult evaluate_metrics(const Image& ref, const Image& test,
                                     std::optional<double> data_range = std::nullopt) {
    double L = data_range ? *data_range : default_data_range(ref);
    return MetricResult{psnr(ref, test, L), ssim(ref, test, L), L};
}

// 1-D slice at the same location from each image.
inline LineProfile line_profile(const std::vector<const Image*>& images, bool is_row, int index) {
    if (images.empty()) throw input_error("line_profile: no images given");
    const ImageGrid& g = images[0]->grid;
    for (const Image* im : images)
        if (!(im->grid == g)) throw input_error("line_profile: images have different shapes");
    const int len = is_row ? g.nx : g.ny;
    const int lim = is_row ? g.ny : g.nx;
    if (index < 0 || index >= lim) throw input_error("line_profile: index out of range");
    LineProfile p;
    p.is_row = is_row;
    p.index = index;
    p.positions.resize(len);
    for (int i = 0; i < len; ++i) p.positions[i] = i;
    for (const Image* im : images) {
        std::vector<double> v(len);
        for (int i = 0; i < len; ++i) v[i] = is_row ? im->at(i, index) : im->at(index, i);
        p.values.push_back(std::move(v));
    }
    return p;
}

}  // namespace petrec
