#pragma once
// Parameter-update rules for the reconstruction loops: bias-corrected Adam,
// plain SGD, the Langevin noise injection that turns either into a posterior
// sampler, the Gaussian weight-prior gradient, and the posterior-averaging
// bookkeeping that produces the final estimate from post-burn-in iterates.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "petrec/common.hpp"
#include "petrec/geometry.hpp"
#include "petrec/networks.hpp"
#include "petrec/rng.hpp"

namespace petrec {

// One gradient vector per parameter, in ParamSet order.
using GradList = std::vector<std::vector<double>>;

struct OptimState {
    enum class Rule { adam, sgd };

    Rule rule = Rule::adam;
    double step_size = 1e-4;  // epsilon
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_prior_coeff = 0.0;  // tau; L2 prior strength
    double noise_scale = 1.0;         // kappa; injected noise std is kappa*sqrt(step_size)
    // Where the Langevin noise enters. false (default): added to the
    // parameters after the update, so the moment estimates stay noise-free.
    // true: folded into the gradient before the moment update, scaled by
    // 1/step_size so a plain-SGD step realizes the identical parameter-space
    // noise either way; under Adam the two genuinely differ.
    bool noise_into_moments = false;

    std::int64_t t = 0;   // completed update steps
    GradList m;           // first moments, ParamSet order
    GradList v;           // second moments
    CounterRng rng;       // noise stream; stream id far above any per-bin simulation stream

    static constexpr std::uint64_t kNoiseStream = 0x6f7074696d697aull;

    OptimState(const ParamSet& ps, double eps, double tau, double kappa,
               std::uint64_t seed, Rule r = Rule::adam)
        : rule(r), step_size(eps), weight_prior_coeff(tau), noise_scale(kappa),
          rng(seed, kNoiseStream) {
        if (!(std::isfinite(eps) && eps > 0.0))
            throw input_error("OptimState: step size must be positive");
        if (!(std::isfinite(tau) && tau >= 0.0))
            throw input_error("OptimState: weight prior coefficient must be >= 0");
        if (!(std::isfinite(kappa) && kappa >= 0.0))
            throw input_error("OptimState: noise scale must be >= 0");
        m.resize(ps.size());
        v.resize(ps.size());
        for (std::size_t i = 0; i < ps.size(); ++i) {
            const std::size_t n = ps.at(i).values->size();
            m[i].assign(n, 0.0);
            v[i].assign(n, 0.0);
        }
    }

    double noise_std() const { return noise_scale * std::sqrt(step_size); }
};

namespace detail {

inline void check_grads(const ParamSet& ps, const GradList& grads, const OptimState& st) {
    if (grads.size() != ps.size() || st.m.size() != ps.size())
        throw input_error("optimizer: gradient list does not match parameter set");
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const ad::Parameter& p = ps.at(i);
        if (grads[i].size() != p.values->size())
            throw input_error("optimizer: gradient size mismatch for parameter '" + p.name + "'");
        for (double g : grads[i])
            if (!std::isfinite(g))
                throw numeric_error("optimizer: non-finite gradient for parameter '" + p.name + "'");
    }
}

}  // namespace detail

// Standard bias-corrected Adam update, one step.
inline void adam_step(ParamSet& ps, const GradList& grads, OptimState& st) {
    detail::check_grads(ps, grads, st);
    st.t += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        std::vector<double>& th = *ps.at(i).values;
        std::vector<double>& m = st.m[i];
        std::vector<double>& v = st.v[i];
        const std::vector<double>& g = grads[i];
        for (std::size_t j = 0; j < th.size(); ++j) {
            m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
            v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            th[j] -= st.step_size * mhat / (std::sqrt(vhat) + st.adam_eps);
        }
    }
}

inline void sgd_step(ParamSet& ps, const GradList& grads, OptimState& st) {
    detail::check_grads(ps, grads, st);
    st.t += 1;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        std::vector<double>& th = *ps.at(i).values;
        const std::vector<double>& g = grads[i];
        for (std::size_t j = 0; j < th.size(); ++j) th[j] -= st.step_size * g[j];
    }
}

// Adds i.i.d. Gaussian noise of std kappa*sqrt(step_size) to every parameter.
// kappa = 0 returns without touching the RNG, so the deterministic optimizer
// path is bit-identical to never having had noise injection at all.
inline void sgld_inject(ParamSet& ps, OptimState& st) {
    if (st.noise_scale == 0.0) return;
    const double sd = st.noise_std();
    for (std::size_t i = 0; i < ps.size(); ++i)
        for (double& x : *ps.at(i).values) x += sd * st.rng.gaussian();
}

// One SGLD iteration: gradient step plus Langevin noise, placement per
// st.noise_into_moments. With noise_scale = 0 this is exactly the plain
// optimizer (no RNG draws consumed).
inline void sgld_step(ParamSet& ps, const GradList& grads, OptimState& st) {
    if (st.noise_into_moments && st.noise_scale > 0.0) {
        GradList noisy = grads;
        const double sd = st.noise_std() / st.step_size;
        for (auto& g : noisy)
            for (double& x : g) x += sd * st.rng.gaussian();
        if (st.rule == OptimState::Rule::adam) adam_step(ps, noisy, st);
        else sgd_step(ps, noisy, st);
        return;
    }
    if (st.rule == OptimState::Rule::adam) adam_step(ps, grads, st);
    else sgd_step(ps, grads, st);
    sgld_inject(ps, st);
}

// Gradient of the Gaussian weight prior (tau/2)*||theta||^2, i.e. tau*theta.
inline GradList prior_gradient(const ParamSet& ps, double tau) {
    if (!(std::isfinite(tau) && tau >= 0.0))
        throw input_error("prior_gradient: tau must be >= 0");
    GradList out(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const std::vector<double>& th = *ps.at(i).values;
        if (tau == 0.0) {
            out[i].assign(th.size(), 0.0);
            continue;
        }
        out[i].resize(th.size());
        for (std::size_t j = 0; j < th.size(); ++j) out[i][j] = tau * th[j];
    }
    return out;
}

// In-place variant used by the optimization loops: grads += tau * theta.
inline void add_prior_gradient(const ParamSet& ps, double tau, GradList& grads) {
    if (!(std::isfinite(tau) && tau >= 0.0))
        throw input_error("add_prior_gradient: tau must be >= 0");
    if (grads.size() != ps.size())
        throw input_error("add_prior_gradient: gradient list does not match parameter set");
    if (tau == 0.0) return;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const std::vector<double>& th = *ps.at(i).values;
        if (grads[i].size() != th.size())
            throw input_error("add_prior_gradient: gradient size mismatch for parameter '" +
                              ps.at(i).name + "'");
        for (std::size_t j = 0; j < th.size(); ++j) grads[i][j] += tau * th[j];
    }
}

// Running mean over post-burn-in iterates. Kahan-compensated accumulation
// keeps the result equal to the arithmetic mean of the folded samples to
// machine precision regardless of sample count.
class PosteriorAverager {
public:
    explicit PosteriorAverager(double burn_in_fraction = 0.7, int sample_stride = 10)
        : burn_in_(burn_in_fraction), stride_(sample_stride) {
        if (!(std::isfinite(burn_in_) && burn_in_ >= 0.0 && burn_in_ < 1.0))
            throw input_error("PosteriorAverager: burn-in fraction must be in [0, 1)");
        if (stride_ < 1) throw input_error("PosteriorAverager: sample stride must be >= 1");
    }

    bool should_sample(std::int64_t iteration, std::int64_t total_iters) const {
        if (total_iters < 1 || iteration < 0 || iteration >= total_iters)
            throw input_error("PosteriorAverager: iteration must lie in [0, total_iters)");
        // ceil with slack: 0.1*1000 evaluates just above 100 in binary, and
        // sampling must still start at iteration 100
        const auto first = static_cast<std::int64_t>(
            std::ceil(burn_in_ * static_cast<double>(total_iters) - 1e-9));
        return iteration >= first && iteration % stride_ == 0;
    }

    void update(std::int64_t iteration, std::int64_t total_iters, const Image& out) {
        if (should_sample(iteration, total_iters)) fold(out);
    }

    void fold(const Image& sample) {
        if (count_ == 0) {
            sum_ = Image::zeros(sample.grid);
            comp_.assign(sample.values.size(), 0.0);
        } else if (!(sample.grid == sum_.grid)) {
            throw input_error("PosteriorAverager: sample grid changed between updates");
        }
        for (std::size_t i = 0; i < sample.values.size(); ++i) {
            const double y = sample.values[i] - comp_[i];
            const double t = sum_.values[i] + y;
            comp_[i] = (t - sum_.values[i]) - y;
            sum_.values[i] = t;
        }
        ++count_;
    }

    std::int64_t count() const { return count_; }
    double burn_in_fraction() const { return burn_in_; }
    int sample_stride() const { return stride_; }

    // Posterior-mean image, or the last iterate when nothing was folded.
    Image estimate(const Image& last_iterate) const {
        if (count_ == 0) return last_iterate;
        Image out = sum_;
        const double inv = 1.0 / static_cast<double>(count_);
        for (double& v : out.values) v *= inv;
        return out;
    }

private:
    double burn_in_;
    int stride_;
    Image sum_;  // compensated running sum of folded samples
    std::vector<double> comp_;
    std::int64_t count_ = 0;
};

}  // namespace petrec
