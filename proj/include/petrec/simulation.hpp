#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "petrec/common.hpp"
#include "petrec/geometry.hpp"
#include "petrec/phantom.hpp"
#include "petrec/rng.hpp"

namespace petrec {

struct CountLevel {
    double total_true_counts = 1e7;
};

// One simulated acquisition: measured counts y ~ Poisson(noise_free + r),
// a known uniform randoms expectation r, zero scatter s, plus the scaled
// ground truth for metric evaluation.
struct NoisySinogramBundle {
    Sinogram y;
    Sinogram randoms;
    Sinogram scatter;
    Sinogram noise_free;
    Image scaled_truth;
    std::uint64_t seed = 0;
    double scale_factor = 1.0;  // applied to the phantom to reach the count level
};

// Poisson draw. Sequential-search inversion below mean 30; above that a
// rounded, zero-clamped normal approximation (the error is far below the
// shot noise at such means).
inline std::int64_t poisson_sample(double mean, CounterRng& rng) {
    if (!(mean >= 0.0) || !std::isfinite(mean))
        throw input_error("poisson_sample: mean must be finite and >= 0");
    if (mean == 0.0) return 0;
    if (mean < 30.0) {
        double u = rng.uniform();
        double p = std::exp(-mean);
        double cdf = p;
        std::int64_t k = 0;
        // cap guards against cdf stagnating just below 1 in floating point
        const std::int64_t cap = static_cast<std::int64_t>(mean + 40.0 * std::sqrt(mean) + 50.0);
        while (u > cdf && k < cap) {
            ++k;
            p *= mean / k;
            cdf += p;
        }
        return k;
    }
    double g = mean + std::sqrt(mean) * rng.gaussian();
    return g <= 0.0 ? 0 : static_cast<std::int64_t>(std::llround(g));
}

// Forward project the phantom, scale to the requested total true counts, add
// a uniform randoms expectation of background_fraction x that total on top,
// and Poisson-sample each bin with an independent (seed, bin) stream.
inline NoisySinogramBundle simulate_scan(const Phantom& ph, const Projector& proj,
                                         CountLevel level, double background_fraction,
                                         std::uint64_t seed) {
    if (!(level.total_true_counts > 0.0))
        throw input_error("simulate_scan: count level must be > 0");
    if (!(background_fraction >= 0.0))
        throw input_error("simulate_scan: background fraction must be >= 0");
    if (!(ph.image.grid == proj.grid()))
        throw input_error("simulate_scan: phantom grid does not match the projector");

    NoisySinogramBundle b;
    b.seed = seed;
    b.noise_free = proj.forward(ph.image);

    double total = 0.0;
    for (double v : b.noise_free.values) total += v;
    if (!(total > 0.0))
        throw input_error("simulate_scan: phantom projects to an all-zero sinogram");

    b.scale_factor = level.total_true_counts / total;
    for (auto& v : b.noise_free.values) v *= b.scale_factor;

    b.scaled_truth = ph.image;
    for (auto& v : b.scaled_truth.values) v *= b.scale_factor;

    const std::size_t m = b.noise_free.values.size();
    b.randoms = Sinogram::zeros(proj.geometry());
    const double r_per_bin = background_fraction * level.total_true_counts / static_cast<double>(m);
    for (auto& v : b.randoms.values) v = r_per_bin;

    b.scatter = Sinogram::zeros(proj.geometry());

    b.y = Sinogram::zeros(proj.geometry());
    for (std::size_t i = 0; i < m; ++i) {
        CounterRng rng(seed, static_cast<std::uint64_t>(i));
        b.y.values[i] =
            static_cast<double>(poisson_sample(b.noise_free.values[i] + r_per_bin, rng));
    }
    return b;
}

inline NoisySinogramBundle simulate_scan(const Phantom& ph, const ScanGeometry& geom,
                                         CountLevel level, double background_fraction,
                                         std::uint64_t seed) {
    Projector proj(ph.image.grid, geom);
    return simulate_scan(ph, proj, level, background_fraction, seed);
}

}  // namespace petrec
