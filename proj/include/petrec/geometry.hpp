#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "petrec/common.hpp"

namespace petrec {

// Square-pixel lattice. Pixel (ix, iy) covers the half-open cell
// [x0 + ix*p, x0 + (ix+1)*p) x [y0 + iy*p, y0 + (iy+1)*p); a point on a shared
// boundary therefore belongs to the pixel with the larger index. Flat index is
// iy * nx + ix (row-major, rows along y).
struct ImageGrid {
    int nx = 0;
    int ny = 0;
    double pixel_size = 1.0;
    double origin_x = 0.0;  // grid center, mm
    double origin_y = 0.0;

    int64_t num_pixels() const { return static_cast<int64_t>(nx) * ny; }
    double x_min() const { return origin_x - 0.5 * nx * pixel_size; }
    double y_min() const { return origin_y - 0.5 * ny * pixel_size; }
    double x_max() const { return x_min() + nx * pixel_size; }
    double y_max() const { return y_min() + ny * pixel_size; }
    double fov() const { return std::max(nx, ny) * pixel_size; }

    void validate() const {
        if (nx < 1 || ny < 1) throw input_error("ImageGrid: nx and ny must be >= 1");
        if (!(pixel_size > 0.0)) throw input_error("ImageGrid: pixel_size must be > 0");
    }
    bool operator==(const ImageGrid& o) const {
        return nx == o.nx && ny == o.ny && pixel_size == o.pixel_size &&
               origin_x == o.origin_x && origin_y == o.origin_y;
    }
};

// Parallel-beam LOR layout: angles in [0, pi), radial bins centered on the
// grid. LOR index = angle_index * n_radial + radial_index.
struct ScanGeometry {
    int n_radial = 0;
    double radial_spacing = 1.0;
    std::vector<double> angles;  // radians, strictly increasing, in [0, pi)

    int n_angles() const { return static_cast<int>(angles.size()); }
    int64_t num_lors() const { return static_cast<int64_t>(n_radial) * n_angles(); }
    // Offset of radial bin k from the grid center, along (-sin a, cos a).
    double radial_offset(int k) const {
        return (k - 0.5 * (n_radial - 1)) * radial_spacing;
    }

    void validate() const {
        if (n_radial < 1) throw input_error("ScanGeometry: n_radial must be >= 1");
        if (angles.empty()) throw input_error("ScanGeometry: need at least one angle");
        if (!(radial_spacing > 0.0)) throw input_error("ScanGeometry: radial_spacing must be > 0");
        for (std::size_t i = 0; i < angles.size(); ++i) {
            if (!(angles[i] >= 0.0 && angles[i] < 3.14159265358979323846))
                throw input_error("ScanGeometry: angles must lie in [0, pi)");
            if (i > 0 && !(angles[i] > angles[i - 1]))
                throw input_error("ScanGeometry: angles must be strictly increasing");
        }
    }
    bool operator==(const ScanGeometry& o) const {
        return n_radial == o.n_radial && radial_spacing == o.radial_spacing && angles == o.angles;
    }
};

// Uniformly spaced angles over [0, pi); radial extent covers the grid diagonal.
inline ScanGeometry make_parallel_geometry(int n_radial, int n_angles, const ImageGrid& grid) {
    grid.validate();
    ScanGeometry g;
    g.n_radial = n_radial;
    double diag = grid.pixel_size * std::hypot(static_cast<double>(grid.nx), static_cast<double>(grid.ny));
    g.radial_spacing = diag / n_radial;
    g.angles.resize(n_angles);
    for (int a = 0; a < n_angles; ++a) g.angles[a] = 3.14159265358979323846 * a / n_angles;
    g.validate();
    return g;
}

struct Image {
    ImageGrid grid;
    std::vector<double> values;  // length nx*ny

    static Image zeros(const ImageGrid& g) {
        g.validate();
        return Image{g, std::vector<double>(static_cast<std::size_t>(g.num_pixels()), 0.0)};
    }
    double& at(int ix, int iy) { return values[static_cast<std::size_t>(iy) * grid.nx + ix]; }
    double at(int ix, int iy) const { return values[static_cast<std::size_t>(iy) * grid.nx + ix]; }
};

struct Sinogram {
    ScanGeometry geometry;
    std::vector<double> values;  // length n_angles*n_radial, [angle][radial]

    static Sinogram zeros(const ScanGeometry& g) {
        g.validate();
        return Sinogram{g, std::vector<double>(static_cast<std::size_t>(g.num_lors()), 0.0)};
    }
    double& at(int angle, int radial) {
        return values[static_cast<std::size_t>(angle) * geometry.n_radial + radial];
    }
    double at(int angle, int radial) const {
        return values[static_cast<std::size_t>(angle) * geometry.n_radial + radial];
    }
};

struct RaySegment {
    int32_t pixel;   // flat index into the grid
    double length;   // exact intersection length, mm
};
using RaySegmentList = std::vector<RaySegment>;

// Siddon trace of the infinite line at `angle` through the grid, displaced by
// `radial_offset` from the grid center along the normal (-sin a, cos a).
// Returns every crossed pixel with its exact chord length; empty on a miss.
inline RaySegmentList trace_ray(const ImageGrid& grid, double angle, double radial_offset) {
    grid.validate();
    if (!(angle >= 0.0 && angle < 3.14159265358979323846))
        throw input_error("trace_ray: angle must lie in [0, pi)");

    const double dx = std::cos(angle);
    const double dy = std::sin(angle);
    const double px = grid.origin_x - radial_offset * dy;  // point on the ray
    const double py = grid.origin_y + radial_offset * dx;

    const double x0 = grid.x_min(), x1 = grid.x_max();
    const double y0 = grid.y_min(), y1 = grid.y_max();
    const double p = grid.pixel_size;

    // Slab clip. A direction component this small cannot cross a pixel plane
    // within any chord of interest, so the ray is treated as axis-parallel.
    const double kParallel = 1e-14;
    double t_enter = -std::numeric_limits<double>::infinity();
    double t_exit = std::numeric_limits<double>::infinity();
    if (std::abs(dx) > kParallel) {
        double ta = (x0 - px) / dx, tb = (x1 - px) / dx;
        t_enter = std::max(t_enter, std::min(ta, tb));
        t_exit = std::min(t_exit, std::max(ta, tb));
    } else if (px < x0 || px >= x1) {
        return {};
    }
    if (std::abs(dy) > kParallel) {
        double ta = (y0 - py) / dy, tb = (y1 - py) / dy;
        t_enter = std::max(t_enter, std::min(ta, tb));
        t_exit = std::min(t_exit, std::max(ta, tb));
    } else if (py < y0 || py >= y1) {
        return {};
    }
    if (!(t_exit - t_enter > 0.0) || !std::isfinite(t_enter) || !std::isfinite(t_exit)) return {};

    // All pixel-plane crossings inside (t_enter, t_exit), per axis, in
    // increasing t. |d| = 1, so parameter differences are lengths.
    std::vector<double> ts;
    ts.reserve(static_cast<std::size_t>(grid.nx + grid.ny + 2));
    ts.push_back(t_enter);
    auto push_axis = [&](double d, double pos, double lo, int n) {
        if (std::abs(d) <= kParallel) return;
        double a = pos + t_enter * d;
        double b = pos + t_exit * d;
        double rlo = (std::min(a, b) - lo) / p;
        double rhi = (std::max(a, b) - lo) / p;
        int i_first = std::max(0, static_cast<int>(std::ceil(rlo)) - 1);
        int i_last = std::min(n, static_cast<int>(std::floor(rhi)) + 1);
        for (int i = i_first; i <= i_last; ++i) {
            double t = (lo + i * p - pos) / d;
            if (t > t_enter && t < t_exit) ts.push_back(t);
        }
    };
    push_axis(dx, px, x0, grid.nx);
    push_axis(dy, py, y0, grid.ny);
    ts.push_back(t_exit);
    std::sort(ts.begin(), ts.end());

    const double len_eps = 1e-12 * std::max(1.0, t_exit - t_enter);
    RaySegmentList segs;
    segs.reserve(ts.size());
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
        double len = ts[i + 1] - ts[i];
        if (len <= len_eps) continue;
        double tm = 0.5 * (ts[i] + ts[i + 1]);
        int ix = static_cast<int>(std::floor((px + tm * dx - x0) / p));
        int iy = static_cast<int>(std::floor((py + tm * dy - y0) / p));
        if (ix < 0 || ix >= grid.nx || iy < 0 || iy >= grid.ny) continue;
        segs.push_back({static_cast<int32_t>(iy) * grid.nx + ix, len});
    }
    return segs;
}

// Matrix-free system operator P: rays are traced once per (grid, geometry)
// pair and cached as flat arrays. Immutable after construction; safe to share
// across threads. Back projection accumulates in LOR-index order, so results
// are bit-identical across runs.
class Projector {
public:
    Projector(ImageGrid grid, ScanGeometry geom) : grid_(grid), geom_(geom) {
        grid_.validate();
        geom_.validate();
        const int64_t m = geom_.num_lors();
        offsets_.reserve(static_cast<std::size_t>(m) + 1);
        offsets_.push_back(0);
        for (int a = 0; a < geom_.n_angles(); ++a) {
            double angle = geom_.angles[a];
            for (int r = 0; r < geom_.n_radial; ++r) {
                auto segs = trace_ray(grid_, angle, geom_.radial_offset(r));
                for (const auto& s : segs) {
                    pixels_.push_back(s.pixel);
                    lengths_.push_back(s.length);
                }
                offsets_.push_back(static_cast<int64_t>(pixels_.size()));
            }
        }
    }

    const ImageGrid& grid() const { return grid_; }
    const ScanGeometry& geometry() const { return geom_; }
    int64_t num_lors() const { return geom_.num_lors(); }
    int64_t num_pixels() const { return grid_.num_pixels(); }

    void forward_raw(const double* img, double* sino) const {
        const int64_t m = num_lors();
        for (int64_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (int64_t k = offsets_[i]; k < offsets_[i + 1]; ++k)
                acc += lengths_[k] * img[pixels_[k]];
            sino[i] = acc;
        }
    }

    void back_raw(const double* sino, double* img) const {
        std::fill(img, img + num_pixels(), 0.0);
        const int64_t m = num_lors();
        for (int64_t i = 0; i < m; ++i) {
            double v = sino[i];
            if (v == 0.0) continue;
            for (int64_t k = offsets_[i]; k < offsets_[i + 1]; ++k)
                img[pixels_[k]] += v * lengths_[k];
        }
    }

    Sinogram forward(const Image& img) const {
        if (!(img.grid == grid_))
            throw input_error("forward_project: image grid does not match the cached rays");
        Sinogram out = Sinogram::zeros(geom_);
        forward_raw(img.values.data(), out.values.data());
        return out;
    }

    Image back(const Sinogram& sino) const {
        if (!(sino.geometry == geom_))
            throw input_error("back_project: sinogram geometry does not match the cached rays");
        Image out = Image::zeros(grid_);
        back_raw(sino.values.data(), out.values.data());
        return out;
    }

    // P^T 1, the EM normalization term. Equals back(ones) by construction.
    Image sensitivity() const {
        Sinogram ones = Sinogram::zeros(geom_);
        std::fill(ones.values.begin(), ones.values.end(), 1.0);
        return back(ones);
    }

    const RaySegmentList segments(int64_t lor) const {
        RaySegmentList out;
        for (int64_t k = offsets_[lor]; k < offsets_[lor + 1]; ++k)
            out.push_back({pixels_[k], lengths_[k]});
        return out;
    }

private:
    ImageGrid grid_;
    ScanGeometry geom_;
    std::vector<int64_t> offsets_;
    std::vector<int32_t> pixels_;
    std::vector<double> lengths_;
};

inline Sinogram forward_project(const Projector& proj, const Image& img) { return proj.forward(img); }
inline Image back_project(const Projector& proj, const Sinogram& sino) { return proj.back(sino); }
inline Image sensitivity_image(const Projector& proj) { return proj.sensitivity(); }

// Pixels no LOR crosses; EM freezes these at zero.
inline std::vector<int64_t> zero_sensitivity_pixels(const Image& sens) {
    std::vector<int64_t> out;
    for (std::size_t j = 0; j < sens.values.size(); ++j)
        if (sens.values[j] == 0.0) out.push_back(static_cast<int64_t>(j));
    return out;
}

}  // namespace petrec
