#pragma once
// Reconstruction drivers. Classical baselines (ML-EM, TV-penalized least
// squares, NLM post-filtering) and the deep-prior family (plain DIP,
// RED-regularized SGD, and the Langevin-sampled variant with posterior
// averaging). Every driver consumes a NoisySinogramBundle and emits a final
// image plus a per-evaluation trace.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "petrec/autodiff.hpp"
#include "petrec/common.hpp"
#include "petrec/geometry.hpp"
#include "petrec/metrics.hpp"
#include "petrec/networks.hpp"
#include "petrec/optimize.hpp"
#include "petrec/simulation.hpp"

namespace petrec {

// ---------------------------------------------------------------------------
// configuration and reporting
// ---------------------------------------------------------------------------

enum class Method { em, tv, nlm, dip, deepred_sgd, deepred_sgld };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::em: return "em";
        case Method::tv: return "tv";
        case Method::nlm: return "nlm";
        case Method::dip: return "dip";
        case Method::deepred_sgd: return "deepred_sgd";
        case Method::deepred_sgld: return "deepred_sgld";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "em") return Method::em;
    if (s == "tv") return Method::tv;
    if (s == "nlm") return Method::nlm;
    if (s == "dip") return Method::dip;
    if (s == "deepred_sgd") return Method::deepred_sgd;
    if (s == "deepred_sgld") return Method::deepred_sgld;
    throw input_error("unknown method '" + s +
                      "' (expected em, tv, nlm, dip, deepred_sgd or deepred_sgld)");
}

struct ReconConfig {
    Method method = Method::em;
    int iterations = 100;
    double lambda = 1.0;  // RED weight
    double beta = 0.05;   // TV weight
    int nlm_patch_radius = 1;
    int nlm_search_radius = 5;
    double nlm_h = 0.1;

    // optimizer settings shared by the deep-prior methods
    double step_size = 1e-4;
    double tau = 1e-5;   // L2 weight prior, applied to generator and denoiser
    double kappa = 1.0;  // Langevin noise scale (deepred_sgld only)
    bool noise_into_moments = false;
    double burn_in_fraction = 0.7;
    int sample_stride = 10;

    NetworkSpec gen_spec{NetworkSpec::Kind::generator, 16, 3, 1, 1};
    NetworkSpec den_spec{NetworkSpec::Kind::denoiser, 16, 5, 1, 1};
    // non-empty: replace the learned denoiser by a fixed one ("nlm" built in,
    // others via classical_denoiser_plugin)
    std::string classical_denoiser;

    std::uint64_t seed = 1;
    int eval_every = 25;
    std::optional<Image> ground_truth;  // metrics only, never enters the solve
    std::string dump_dir;  // when set: checkpoints on finish, diagnostics on abort

    void validate() const {
        if (iterations < 1) throw input_error("config: iterations must be >= 1");
        if (!(std::isfinite(lambda) && lambda >= 0.0))
            throw input_error("config: lambda must be >= 0");
        if (!(std::isfinite(beta) && beta >= 0.0)) throw input_error("config: beta must be >= 0");
        if (eval_every < 1) throw input_error("config: eval_every must be >= 1");
        if (!(std::isfinite(step_size) && step_size > 0.0))
            throw input_error("config: step size must be > 0");
        if (!(std::isfinite(tau) && tau >= 0.0)) throw input_error("config: tau must be >= 0");
        if (!(std::isfinite(kappa) && kappa >= 0.0))
            throw input_error("config: kappa must be >= 0");
        if (!(burn_in_fraction >= 0.0 && burn_in_fraction < 1.0))
            throw input_error("config: burn-in fraction must be in [0, 1)");
        if (sample_stride < 1) throw input_error("config: sample stride must be >= 1");
        if (nlm_patch_radius < 0 || nlm_search_radius < 0)
            throw input_error("config: nlm radii must be >= 0");
        if (!(std::isfinite(nlm_h) && nlm_h > 0.0)) throw input_error("config: nlm h must be > 0");
    }
};

struct EvalRow {
    std::int64_t iteration = 0;
    double fidelity = 0.0;     // data term
    double regularizer = 0.0;  // RED term / beta*TV; 0 for EM
    double objective = 0.0;
    // metrics versus the supplied ground truth; NaN (written as "na") if none
    double psnr = std::numeric_limits<double>::quiet_NaN();
    double ssim = std::numeric_limits<double>::quiet_NaN();
};

struct RunReport {
    std::string method;
    std::vector<EvalRow> rows;
    double wall_seconds = 0.0;
    std::vector<std::pair<std::string, std::string>> config_echo;
    std::string notes;
};

struct RunResult {
    Image image;
    RunReport report;
};

inline std::string report_csv(const RunReport& r) {
    std::string out = "iteration,fidelity,regularizer,objective,psnr,ssim\n";
    auto field = [](double v) { return std::isnan(v) ? std::string("na") : fmt_g17(v); };
    for (const EvalRow& row : r.rows) {
        out += std::to_string(row.iteration);
        out += ',';
        out += fmt_g17(row.fidelity);
        out += ',';
        out += fmt_g17(row.regularizer);
        out += ',';
        out += fmt_g17(row.objective);
        out += ',';
        out += field(row.psnr);
        out += ',';
        out += field(row.ssim);
        out += '\n';
    }
    return out;
}

inline void write_report_csv(const RunReport& r, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw input_error("cannot open report file '" + path + "' for writing");
    f << report_csv(r);
    if (!f) throw input_error("short write to report file '" + path + "'");
}

// Human-readable summary. Wall time is the one run-dependent line; callers
// that need byte-reproducible output pass include_wall = false.
inline std::string report_summary(const RunReport& r, bool include_wall = true) {
    std::string out;
    out += "method: " + r.method + "\n";
    for (const auto& kv : r.config_echo) out += kv.first + ": " + kv.second + "\n";
    out += "rows: " + std::to_string(r.rows.size()) + "\n";
    if (!r.rows.empty()) {
        const EvalRow& last = r.rows.back();
        out += "final_iteration: " + std::to_string(last.iteration) + "\n";
        out += "final_objective: " + fmt_g17(last.objective) + "\n";
        if (!std::isnan(last.psnr)) out += "final_psnr_db: " + fmt_g17(last.psnr) + "\n";
        if (!std::isnan(last.ssim)) out += "final_ssim: " + fmt_g17(last.ssim) + "\n";
    }
    if (!r.notes.empty()) out += "notes: " + r.notes + "\n";
    out += "wall_seconds: " + (include_wall ? fmt_g17(r.wall_seconds) : std::string("na")) + "\n";
    return out;
}

namespace detail {

inline double now_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

inline void check_bundle(const NoisySinogramBundle& b, const Projector& proj) {
    if (!(b.y.geometry == proj.geometry()) || !(b.randoms.geometry == proj.geometry()) ||
        !(b.scatter.geometry == proj.geometry()))
        throw input_error("bundle geometry does not match the projector");
    for (double v : b.y.values)
        if (!(v >= 0.0) || !std::isfinite(v))
            throw input_error("measured sinogram has negative or non-finite entries");
}

inline void fill_metrics(EvalRow& row, const Image* gt, const Image& est) {
    if (!gt) return;
    MetricResult m = evaluate_metrics(*gt, est);
    row.psnr = m.psnr_db;
    row.ssim = m.ssim;
}

}  // namespace detail

inline Image clamped_nonneg(Image img) {
    for (double& v : img.values)
        if (v < 0.0) v = 0.0;
    return img;
}

// Poisson log-likelihood sum_i (y_i log ybar_i - ybar_i) with 0 log 0 := 0.
// Bins with ybar = 0 but y > 0 make the likelihood -inf; callers guard.
inline double poisson_log_likelihood(const Sinogram& y, const Sinogram& ybar) {
    if (!(y.geometry == ybar.geometry))
        throw input_error("log-likelihood: sinogram shapes differ");
    KahanSum s;
    for (std::size_t i = 0; i < y.values.size(); ++i) {
        const double yi = y.values[i], bi = ybar.values[i];
        if (bi > 0.0)
            s.add(yi * std::log(bi) - bi);
        else if (yi > 0.0)
            return -std::numeric_limits<double>::infinity();
    }
    return s.value();
}

// ---------------------------------------------------------------------------
// ML-EM
// ---------------------------------------------------------------------------

// Multiplicative EM: x <- (x / P^T 1) * P^T( y / (P x + r + s) ). Bins with
// zero expectation and zero counts contribute ratio 1; zero-sensitivity
// pixels are frozen at 0. Rows report the Poisson log-likelihood (negated, so
// the objective column decreases) for the iterate *before* each update plus
// one final row, so monotonicity is visible directly in the trace.
inline RunResult em_reconstruct(const NoisySinogramBundle& bundle, const Projector& proj,
                                int iterations, const Image* x0 = nullptr,
                                const Image* ground_truth = nullptr) {
    const double t0 = detail::now_seconds();
    if (iterations < 1) throw input_error("em: iterations must be >= 1");
    detail::check_bundle(bundle, proj);

    const Image sens = proj.sensitivity();
    Image x = Image::zeros(proj.grid());
    if (x0) {
        if (!(x0->grid == proj.grid())) throw input_error("em: x0 grid mismatch");
        for (double v : x0->values)
            if (!(v >= 0.0) || !std::isfinite(v))
                throw input_error("em: x0 must be nonnegative and finite");
        x = *x0;
    } else {
        for (double& v : x.values) v = 1.0;
    }
    // zero-sensitivity pixels never receive data; freeze them at 0
    for (std::size_t j = 0; j < x.values.size(); ++j)
        if (sens.values[j] == 0.0) x.values[j] = 0.0;

    RunReport rep;
    rep.method = "em";
    rep.config_echo = {{"iterations", std::to_string(iterations)}};

    Sinogram ybar = Sinogram::zeros(proj.geometry());
    Sinogram ratio = Sinogram::zeros(proj.geometry());
    Image back = Image::zeros(proj.grid());

    for (int it = 0; it <= iterations; ++it) {
        proj.forward_raw(x.values.data(), ybar.values.data());
        for (std::size_t i = 0; i < ybar.values.size(); ++i)
            ybar.values[i] += bundle.randoms.values[i] + bundle.scatter.values[i];
        for (std::size_t i = 0; i < ybar.values.size(); ++i)
            if (ybar.values[i] == 0.0 && bundle.y.values[i] > 0.0)
                throw numeric_error("em: measured counts in a bin with zero expectation");

        EvalRow row;
        row.iteration = it;
        row.fidelity = -poisson_log_likelihood(bundle.y, ybar);
        row.objective = row.fidelity;
        detail::fill_metrics(row, ground_truth, x);
        rep.rows.push_back(row);
        if (it == iterations) break;

        for (std::size_t i = 0; i < ratio.values.size(); ++i)
            ratio.values[i] = ybar.values[i] > 0.0 ? bundle.y.values[i] / ybar.values[i] : 1.0;
        proj.back_raw(ratio.values.data(), back.values.data());
        for (std::size_t j = 0; j < x.values.size(); ++j)
            x.values[j] = sens.values[j] > 0.0
                              ? (x.values[j] / sens.values[j]) * back.values[j]
                              : 0.0;
    }

    rep.wall_seconds = detail::now_seconds() - t0;
    return {std::move(x), std::move(rep)};
}

inline RunResult em_reconstruct(const NoisySinogramBundle& bundle, const ScanGeometry& geom,
                                const ImageGrid& grid, int iterations,
                                const Image* x0 = nullptr, const Image* ground_truth = nullptr) {
    Projector proj(grid, geom);
    return em_reconstruct(bundle, proj, iterations, x0, ground_truth);
}

// ---------------------------------------------------------------------------
// TV-penalized least squares
// ---------------------------------------------------------------------------

// Smoothed isotropic total variation sum_p sqrt(dx^2 + dy^2 + eps^2) with
// forward differences and Neumann boundary; a constant image sits exactly on
// the eps floor (nx*ny*eps). Optionally accumulates the gradient.
inline double smoothed_tv(const Image& x, double eps, Image* grad = nullptr) {
    if (!(eps > 0.0)) throw input_error("smoothed_tv: eps must be > 0");
    const int nx = x.grid.nx, ny = x.grid.ny;
    if (grad) *grad = Image::zeros(x.grid);
    KahanSum s;
    for (int iy = 0; iy < ny; ++iy) {
        for (int ix = 0; ix < nx; ++ix) {
            const double v = x.at(ix, iy);
            const double dx = ix + 1 < nx ? x.at(ix + 1, iy) - v : 0.0;
            const double dy = iy + 1 < ny ? x.at(ix, iy + 1) - v : 0.0;
            const double t = std::sqrt(dx * dx + dy * dy + eps * eps);
            s.add(t);
            if (grad) {
                const double inv = 1.0 / t;
                if (ix + 1 < nx) {
                    grad->at(ix, iy) -= dx * inv;
                    grad->at(ix + 1, iy) += dx * inv;
                }
                if (iy + 1 < ny) {
                    grad->at(ix, iy) -= dy * inv;
                    grad->at(ix, iy + 1) += dy * inv;
                }
            }
        }
    }
    return s.value();
}

// Nonnegativity-projected gradient descent on |y - Px - r - s|^2 + beta*TV_eps
// with a Barzilai-Borwein step seed and a backtracking line search; the
// objective is non-increasing over accepted steps by construction.
inline RunResult tv_reconstruct(const NoisySinogramBundle& bundle, const Projector& proj,
                                double beta, int iterations,
                                const Image* ground_truth = nullptr) {
    const double t0 = detail::now_seconds();
    if (!(std::isfinite(beta) && beta > 0.0)) throw input_error("tv: beta must be > 0");
    if (iterations < 1) throw input_error("tv: iterations must be >= 1");
    detail::check_bundle(bundle, proj);
    const double eps_tv = 1e-6;

    // fixed data term target: y - r - s
    Sinogram target = bundle.y;
    for (std::size_t i = 0; i < target.values.size(); ++i)
        target.values[i] -= bundle.randoms.values[i] + bundle.scatter.values[i];

    Image x = Image::zeros(proj.grid());
    for (double& v : x.values) v = 1.0;

    Sinogram px = Sinogram::zeros(proj.geometry());
    Sinogram resid = Sinogram::zeros(proj.geometry());
    auto objective = [&](const Image& im, double* fid_out, double* reg_out) {
        proj.forward_raw(im.values.data(), px.values.data());
        KahanSum fid;
        for (std::size_t i = 0; i < px.values.size(); ++i) {
            const double d = px.values[i] - target.values[i];
            fid.add(d * d);
        }
        const double reg = beta * smoothed_tv(im, eps_tv);
        if (fid_out) *fid_out = fid.value();
        if (reg_out) *reg_out = reg;
        return fid.value() + reg;
    };

    RunReport rep;
    rep.method = "tv";
    rep.config_echo = {{"iterations", std::to_string(iterations)},
                       {"beta", fmt_g17(beta)},
                       {"tv_eps", fmt_g17(eps_tv)}};

    Image grad = Image::zeros(proj.grid());
    Image tv_grad = Image::zeros(proj.grid());
    Image prev_x = x, prev_grad = grad;
    double alpha = 1.0;
    bool have_prev = false;

    for (int it = 0; it <= iterations; ++it) {
        double fid = 0.0, reg = 0.0;
        const double f = objective(x, &fid, &reg);

        EvalRow row;
        row.iteration = it;
        row.fidelity = fid;
        row.regularizer = reg;
        row.objective = f;
        detail::fill_metrics(row, ground_truth, x);
        rep.rows.push_back(row);
        if (it == iterations) break;

        // gradient: 2 P^T(Px - target) + beta * dTV
        for (std::size_t i = 0; i < resid.values.size(); ++i)
            resid.values[i] = px.values[i] - target.values[i];
        proj.back_raw(resid.values.data(), grad.values.data());
        smoothed_tv(x, eps_tv, &tv_grad);
        for (std::size_t j = 0; j < grad.values.size(); ++j)
            grad.values[j] = 2.0 * grad.values[j] + beta * tv_grad.values[j];

        if (have_prev) {
            // Barzilai-Borwein step seed from the last accepted move
            double sy = 0.0, ss = 0.0;
            for (std::size_t j = 0; j < grad.values.size(); ++j) {
                const double sj = x.values[j] - prev_x.values[j];
                sy += sj * (grad.values[j] - prev_grad.values[j]);
                ss += sj * sj;
            }
            if (sy > 0.0 && ss > 0.0) alpha = std::min(ss / sy, 1e12);
        }
        prev_x = x;
        prev_grad = grad;

        Image trial = Image::zeros(proj.grid());
        bool accepted = false;
        for (int halving = 0; halving <= 40; ++halving) {
            double moved = 0.0;
            for (std::size_t j = 0; j < x.values.size(); ++j) {
                double v = x.values[j] - alpha * grad.values[j];
                trial.values[j] = v > 0.0 ? v : 0.0;
                moved += (trial.values[j] - x.values[j]) * (trial.values[j] - x.values[j]);
            }
            if (moved == 0.0) break;  // projected step is a fixed point: converged
            const double ft = objective(trial, nullptr, nullptr);
            if (ft <= f - 1e-4 * moved / alpha) {
                x = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
            if (halving == 40)
                throw numeric_error("tv: line search failed after 40 halvings at iteration " +
                                    std::to_string(it));
        }
        if (!accepted) {  // stationary point: freeze and let remaining rows repeat
            have_prev = false;
            continue;
        }
        have_prev = true;
        alpha *= 2.0;  // optimistic growth, pruned by the next search
    }

    rep.wall_seconds = detail::now_seconds() - t0;
    return {std::move(x), std::move(rep)};
}

inline RunResult tv_reconstruct(const NoisySinogramBundle& bundle, const ScanGeometry& geom,
                                const ImageGrid& grid, double beta, int iterations,
                                const Image* ground_truth = nullptr) {
    Projector proj(grid, geom);
    return tv_reconstruct(bundle, proj, beta, iterations, ground_truth);
}

// ---------------------------------------------------------------------------
// NLM post-filter
// ---------------------------------------------------------------------------

// Standard nonlocal means: every pixel becomes the weight-normalized average
// over its search window, weights exp(-d2/h^2) with d2 the mean squared patch
// difference over offsets valid for both patches (borders shrink the patch).
inline Image nlm_postfilter(const Image& noisy, int patch_radius, int search_radius, double h) {
    if (!(std::isfinite(h) && h > 0.0)) throw input_error("nlm: h must be > 0");
    if (patch_radius < 0 || search_radius < 0)
        throw input_error("nlm: radii must be >= 0");
    const int nx = noisy.grid.nx, ny = noisy.grid.ny;
    Image out = Image::zeros(noisy.grid);
    const double inv_h2 = 1.0 / (h * h);

    for (int iy = 0; iy < ny; ++iy) {
        for (int ix = 0; ix < nx; ++ix) {
            double wsum = 0.0, acc = 0.0;
            const int jy0 = std::max(0, iy - search_radius);
            const int jy1 = std::min(ny - 1, iy + search_radius);
            const int jx0 = std::max(0, ix - search_radius);
            const int jx1 = std::min(nx - 1, ix + search_radius);
            for (int jy = jy0; jy <= jy1; ++jy) {
                for (int jx = jx0; jx <= jx1; ++jx) {
                    double d2 = 0.0;
                    int n = 0;
                    for (int dy = -patch_radius; dy <= patch_radius; ++dy) {
                        const int ay = iy + dy, by = jy + dy;
                        if (ay < 0 || ay >= ny || by < 0 || by >= ny) continue;
                        for (int dx = -patch_radius; dx <= patch_radius; ++dx) {
                            const int ax = ix + dx, bx = jx + dx;
                            if (ax < 0 || ax >= nx || bx < 0 || bx >= nx) continue;
                            const double d = noisy.at(ax, ay) - noisy.at(bx, by);
                            d2 += d * d;
                            ++n;
                        }
                    }
                    const double w = std::exp(-(d2 / n) * inv_h2);
                    wsum += w;
                    acc += w * noisy.at(jx, jy);
                }
            }
            out.at(ix, iy) = acc / wsum;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// deep-prior objective
// ---------------------------------------------------------------------------

// autodiff bridge: the cached projector as a checked linear operator
// [1,1,ny,nx] -> [1,1,n_angles,n_radial]; the shared_ptr keeps the ray cache
// alive as long as any recorded graph references it.
inline ad::LinearOp projector_op(std::shared_ptr<const Projector> proj) {
    ad::LinearOp op;
    op.in_shape = ad::Shape{1, 1, proj->grid().ny, proj->grid().nx};
    op.out_shape = ad::Shape{1, 1, proj->geometry().n_angles(),
                             proj->geometry().n_radial};
    op.name = "projector";
    op.apply = [proj](const std::vector<double>& u) {
        std::vector<double> out(static_cast<std::size_t>(proj->num_lors()));
        proj->forward_raw(u.data(), out.data());
        return out;
    };
    op.adjoint = [proj](const std::vector<double>& v) {
        std::vector<double> out(static_cast<std::size_t>(proj->num_pixels()));
        proj->back_raw(v.data(), out.data());
        return out;
    };
    return op;
}

using DenoiserFn = std::function<Image(const Image&)>;

// Registry of fixed (non-learnable) denoisers usable in place of the learned
// network; each is treated as a constant within a gradient step.
inline std::map<std::string, DenoiserFn>& denoiser_registry() {
    static std::map<std::string, DenoiserFn> reg;
    return reg;
}

inline void classical_denoiser_plugin(const std::string& name, DenoiserFn fn) {
    if (!fn) throw input_error("classical_denoiser_plugin: empty function");
    denoiser_registry()[name] = std::move(fn);
}

// Fixed ingredients of the objective, precomputed once per run. The measured
// data enter in mean-normalized units (scale = mean counts per bin) so that
// network outputs stay O(1); reconstructed images are rescaled on the way
// out. The network input z is the back-projection of y scaled to peak 1.
struct DeepRedProblem {
    std::shared_ptr<const Projector> projector;
    ad::LinearOp proj_op;
    ad::Shape image_shape;
    ImageGrid grid;
    std::vector<double> z;       // network input
    std::vector<double> target;  // (y - r - s) / scale
    double scale = 1.0;
    double z_peak = 0.0;  // recorded normalization of the raw back-projection
    double lambda = 0.0;
};

inline DeepRedProblem make_deepred_problem(const NoisySinogramBundle& bundle,
                                           std::shared_ptr<const Projector> proj,
                                           double lambda) {
    if (!proj) throw input_error("deepred: null projector");
    if (!(std::isfinite(lambda) && lambda >= 0.0))
        throw input_error("deepred: lambda must be >= 0");
    detail::check_bundle(bundle, *proj);

    DeepRedProblem p;
    p.projector = proj;
    p.proj_op = projector_op(proj);
    p.grid = proj->grid();
    p.image_shape = ad::Shape{1, 1, p.grid.ny, p.grid.nx};
    p.lambda = lambda;

    KahanSum total;
    for (double v : bundle.y.values) total.add(v);
    p.scale = total.value() / static_cast<double>(bundle.y.values.size());
    if (!(p.scale > 0.0)) throw input_error("deepred: measured sinogram is empty");

    Image bp = proj->back(bundle.y);
    p.z_peak = *std::max_element(bp.values.begin(), bp.values.end());
    if (!(p.z_peak > 0.0)) throw input_error("deepred: back-projection of y is not positive");
    p.z = bp.values;
    for (double& v : p.z) v /= p.z_peak;

    p.target.resize(bundle.y.values.size());
    for (std::size_t i = 0; i < p.target.size(); ++i)
        p.target[i] = (bundle.y.values[i] - bundle.randoms.values[i] -
                       bundle.scatter.values[i]) /
                      p.scale;
    return p;
}

struct ObjectiveParts {
    ad::Tensor total;      // fidelity + RED
    ad::Tensor fidelity;   // |c - P G(z)|^2 in normalized units
    ad::Tensor red;        // (lambda/2) x^T (x - D(x)); zero constant if lambda = 0
    ad::Tensor x;          // generator output, normalized units
};

// Records one evaluation of the full objective onto the tape. Gradients flow
// through both appearances of x = G(z) and, when D is a network, through D;
// a fixed denoiser contributes a constant D(x) instead. With lambda = 0 the
// graph is exactly the data-fidelity-only (DIP) objective and no denoiser is
// touched.
inline ObjectiveParts build_deepred_objective_parts(ad::Tape& t, const DeepRedProblem& prob,
                                                    Network& G, Network* D,
                                                    const DenoiserFn* fixed_D = nullptr) {
    ad::Tensor zin = ad::constant(prob.image_shape, prob.z);
    ad::Tensor x = G.forward(t, zin);
    if (!(x.shape == prob.image_shape))
        throw input_error("deepred: generator output shape " + x.shape.str() +
                          " does not match the image " + prob.image_shape.str());
    ad::Tensor px = ad::linear_op(t, prob.proj_op, x);
    ad::Tensor c = ad::constant(prob.proj_op.out_shape, prob.target);
    ad::Tensor fid = ad::sum(t, ad::square(t, ad::sub(t, c, px)));

    if (prob.lambda == 0.0) {
        ad::Tensor zero = ad::constant_fill(ad::Shape{1, 1, 1, 1}, 0.0);
        return {fid, fid, zero, x};
    }

    ad::Tensor red;
    if (D) {
        ad::Tensor dx = D->forward(t, x);
        if (!(dx.shape == x.shape))
            throw input_error("deepred: denoiser output shape mismatch");
        red = ad::scalar_mul(t, ad::dot(t, x, ad::sub(t, x, dx)), 0.5 * prob.lambda);
    } else if (fixed_D && *fixed_D) {
        // Frozen-denoiser convention: value (lambda/2) x^T (x - D(x)) but
        // gradient lambda (x - D(x)), the usual rule when the denoiser is
        // held constant within a step. Built as lambda x^T c + const with
        // c = x - D(x) frozen at the current x, so an identity denoiser
        // contributes exactly zero to both value and gradient.
        Image xi{prob.grid, *x.data};
        Image den = (*fixed_D)(xi);
        if (!(den.grid == prob.grid))
            throw input_error("deepred: fixed denoiser changed the image grid");
        std::vector<double> c1(x.data->size());
        double xc = 0.0;
        for (std::size_t i = 0; i < c1.size(); ++i) {
            c1[i] = (*x.data)[i] - den.values[i];
            xc += (*x.data)[i] * c1[i];
        }
        ad::Tensor cres = ad::constant(prob.image_shape, c1);
        ad::Tensor lin = ad::scalar_mul(t, ad::dot(t, x, cres), prob.lambda);
        ad::Tensor corr = ad::constant_fill(ad::Shape{1, 1, 1, 1}, -0.5 * prob.lambda * xc);
        red = ad::add(t, lin, corr);
    } else {
        throw input_error("deepred: lambda > 0 requires a denoiser");
    }
    ad::Tensor total = ad::add(t, fid, red);
    return {total, fid, red, x};
}

inline ad::Tensor build_deepred_objective(ad::Tape& t, const DeepRedProblem& prob, Network& G,
                                          Network* D) {
    return build_deepred_objective_parts(t, prob, G, D).total;
}

namespace detail {

inline GradList collect_grads(const ad::Tape& t, const Network& net) {
    GradList g;
    g.reserve(net.bound->size());
    for (const ad::Tensor& b : *net.bound) g.push_back(t.gradient(b));
    return g;
}

inline DenoiserFn resolve_denoiser(const ReconConfig& cfg) {
    if (cfg.classical_denoiser == "nlm") {
        const int pr = cfg.nlm_patch_radius, sr = cfg.nlm_search_radius;
        const double h = cfg.nlm_h;
        return [pr, sr, h](const Image& im) { return nlm_postfilter(im, pr, sr, h); };
    }
    auto& reg = denoiser_registry();
    auto it = reg.find(cfg.classical_denoiser);
    if (it == reg.end())
        throw input_error("unknown classical denoiser '" + cfg.classical_denoiser + "'");
    return it->second;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// deep-prior drivers: dip / deepred_sgd / deepred_sgld
// ---------------------------------------------------------------------------

inline RunResult deepred_run(const ReconConfig& config, const NoisySinogramBundle& bundle,
                             const ScanGeometry& geom, const ImageGrid& grid) {
    const double t0 = detail::now_seconds();
    config.validate();
    if (config.method != Method::dip && config.method != Method::deepred_sgd &&
        config.method != Method::deepred_sgld)
        throw input_error("deepred_run: method must be dip, deepred_sgd or deepred_sgld");
    if (config.ground_truth && !(config.ground_truth->grid == grid))
        throw input_error("deepred_run: ground truth grid mismatch");

    auto proj = std::make_shared<const Projector>(grid, geom);
    const double lambda = config.method == Method::dip ? 0.0 : config.lambda;
    DeepRedProblem prob = make_deepred_problem(bundle, proj, lambda);

    // independent sub-seeds for the two networks and the Langevin noise
    CounterRng seeder(config.seed, 0xdee9c0ull);
    const std::uint64_t seed_g = seeder.next_u64();
    const std::uint64_t seed_d = seeder.next_u64();
    const std::uint64_t seed_noise = seeder.next_u64();

    Network G = build_network(config.gen_spec, seed_g);
    const bool use_learned_d = lambda > 0.0 && config.classical_denoiser.empty();
    const bool use_fixed_d = lambda > 0.0 && !config.classical_denoiser.empty();
    std::optional<Network> D;
    if (use_learned_d) D = build_network(config.den_spec, seed_d);
    DenoiserFn fixed_d;
    if (use_fixed_d) fixed_d = detail::resolve_denoiser(config);

    const double kappa = config.method == Method::deepred_sgld ? config.kappa : 0.0;
    OptimState st_g(*G.params, config.step_size, config.tau, kappa, seed_noise);
    st_g.noise_into_moments = config.noise_into_moments;
    std::optional<OptimState> st_d;
    if (D) st_d.emplace(*D->params, config.step_size, config.tau, 0.0, seed_noise);

    // posterior averaging is active exactly when noise is actually injected,
    // so a zero-noise "sgld" run collapses bit-for-bit onto deepred_sgd
    const bool do_average = config.method == Method::deepred_sgld && kappa > 0.0;
    PosteriorAverager avg(config.burn_in_fraction, config.sample_stride);

    RunReport rep;
    rep.method = method_name(config.method);
    rep.config_echo = {
        {"iterations", std::to_string(config.iterations)},
        {"lambda", fmt_g17(lambda)},
        {"step_size", fmt_g17(config.step_size)},
        {"tau", fmt_g17(config.tau)},
        {"kappa", fmt_g17(kappa)},
        {"noise_into_moments", config.noise_into_moments ? "true" : "false"},
        {"burn_in_fraction", fmt_g17(config.burn_in_fraction)},
        {"sample_stride", std::to_string(config.sample_stride)},
        {"eval_every", std::to_string(config.eval_every)},
        {"seed", std::to_string(config.seed)},
        {"generator", std::to_string(config.gen_spec.base_channels) + "ch_d" +
                          std::to_string(config.gen_spec.depth)},
        {"denoiser", use_learned_d
                         ? std::to_string(config.den_spec.base_channels) + "ch_d" +
                               std::to_string(config.den_spec.depth)
                         : (use_fixed_d ? config.classical_denoiser : "none")},
        {"count_scale", fmt_g17(prob.scale)},
        {"z_peak", fmt_g17(prob.z_peak)},
    };
    rep.notes = "z = back-projection of y scaled to peak 1; data in counts/" +
                fmt_g17(prob.scale) + " units";

    const Image* gt = config.ground_truth ? &*config.ground_truth : nullptr;

    auto dump_on_abort = [&](const std::string& why, std::int64_t it) {
        if (!config.dump_dir.empty()) {
            save_params(G, config.dump_dir + "/generator_abort.ckpt");
            if (D) save_params(*D, config.dump_dir + "/denoiser_abort.ckpt");
            write_report_csv(rep, config.dump_dir + "/report_abort.csv");
        }
        throw numeric_error("deepred: " + why + " at iteration " + std::to_string(it) +
                            (config.dump_dir.empty()
                                 ? ""
                                 : " (checkpoint dumped to " + config.dump_dir + ")"));
    };

    auto evaluate = [&](bool do_backward) {
        ad::Tape tape;
        ObjectiveParts parts = build_deepred_objective_parts(
            tape, prob, G, D ? &*D : nullptr, use_fixed_d ? &fixed_d : nullptr);
        struct Snap {
            double total, fid, red;
            Image x;
            GradList gg, gd;
        } s{(*parts.total.data)[0], (*parts.fidelity.data)[0], (*parts.red.data)[0],
            Image{prob.grid, *parts.x.data}, GradList{}, GradList{}};
        // a non-finite objective must reach the abort path before any
        // gradient is formed, so backward only runs on finite values
        if (do_backward && std::isfinite(s.total)) {
            tape.backward(parts.total);
            s.gg = detail::collect_grads(tape, G);
            if (D) s.gd = detail::collect_grads(tape, *D);
        }
        return s;
    };

    Image last_rescaled = Image::zeros(grid);
    for (int it = 0; it < config.iterations; ++it) {
        auto s = evaluate(true);
        if (!std::isfinite(s.total)) dump_on_abort("objective became non-finite", it);

        Image rescaled = s.x;
        for (double& v : rescaled.values) v *= prob.scale;

        if (do_average) avg.update(it, config.iterations, rescaled);
        if (it % config.eval_every == 0) {
            EvalRow row;
            row.iteration = it;
            row.fidelity = s.fid;
            row.regularizer = s.red;
            row.objective = s.total;
            // metrics follow the method's current estimate: the running
            // posterior mean once sampling has started, else the iterate
            detail::fill_metrics(row, gt, clamped_nonneg(avg.estimate(rescaled)));
            rep.rows.push_back(row);
        }
        last_rescaled = std::move(rescaled);

        add_prior_gradient(*G.params, config.tau, s.gg);
        sgld_step(*G.params, s.gg, st_g);
        if (D) {
            add_prior_gradient(*D->params, config.tau, s.gd);
            adam_step(*D->params, s.gd, *st_d);
        }
    }

    // one forward with the final parameters for the closing row and the
    // last-iterate estimate
    auto fin = evaluate(false);
    if (!std::isfinite(fin.total))
        dump_on_abort("objective became non-finite", config.iterations);
    Image final_rescaled = fin.x;
    for (double& v : final_rescaled.values) v *= prob.scale;
    Image estimate = clamped_nonneg(avg.estimate(final_rescaled));
    {
        EvalRow row;
        row.iteration = config.iterations;
        row.fidelity = fin.fid;
        row.regularizer = fin.red;
        row.objective = fin.total;
        // closing row measures the image the run actually returns
        detail::fill_metrics(row, gt, estimate);
        rep.rows.push_back(row);
    }
    if (do_average)
        rep.config_echo.emplace_back("posterior_samples", std::to_string(avg.count()));

    if (!config.dump_dir.empty()) {
        save_params(G, config.dump_dir + "/generator.ckpt");
        if (D) save_params(*D, config.dump_dir + "/denoiser.ckpt");
    }

    rep.wall_seconds = detail::now_seconds() - t0;
    return {std::move(estimate), std::move(rep)};
}

// NLM as a reconstruction method: EM first, then the post-filter; the trace
// is the EM trace with the final row's metrics recomputed on the filtered
// image.
inline RunResult nlm_reconstruct(const NoisySinogramBundle& bundle, const Projector& proj,
                                 const ReconConfig& config,
                                 const Image* ground_truth = nullptr) {
    const double t0 = detail::now_seconds();
    config.validate();
    RunResult em = em_reconstruct(bundle, proj, config.iterations, nullptr, ground_truth);
    Image filtered = nlm_postfilter(em.image, config.nlm_patch_radius,
                                    config.nlm_search_radius, config.nlm_h);
    RunReport rep = std::move(em.report);
    rep.method = "nlm";
    rep.config_echo.emplace_back("patch_radius", std::to_string(config.nlm_patch_radius));
    rep.config_echo.emplace_back("search_radius", std::to_string(config.nlm_search_radius));
    rep.config_echo.emplace_back("h", fmt_g17(config.nlm_h));
    rep.notes = "EM output post-filtered by NLM; final row metrics are post-filter";
    if (!rep.rows.empty()) detail::fill_metrics(rep.rows.back(), ground_truth, filtered);
    rep.wall_seconds = detail::now_seconds() - t0;
    return {std::move(filtered), std::move(rep)};
}

}  // namespace petrec
