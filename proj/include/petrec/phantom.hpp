#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "petrec/common.hpp"
#include "petrec/geometry.hpp"

namespace petrec {

// Deterministic analytic ground-truth image; replaces patient data in the
// simulation pipeline.
struct Phantom {
    std::string name;
    Image image;
    std::string description;
};

namespace detail {

struct Ellipse {
    double x0, y0, a, b, phi_deg, value;
};

// Evaluate an additive ellipse stack at pixel centers on normalized
// coordinates [-1, 1]^2. This is the usual construction for the Shepp-Logan
// family: overlapping ellipses add.
inline Image paint_ellipses_additive(const ImageGrid& grid, const std::vector<Ellipse>& es) {
    Image img = Image::zeros(grid);
    const double sx = 2.0 / grid.nx, sy = 2.0 / grid.ny;
    for (int iy = 0; iy < grid.ny; ++iy) {
        double y = (iy + 0.5) * sy - 1.0;
        for (int ix = 0; ix < grid.nx; ++ix) {
            double x = (ix + 0.5) * sx - 1.0;
            double acc = 0.0;
            for (const auto& e : es) {
                double phi = e.phi_deg * 3.14159265358979323846 / 180.0;
                double c = std::cos(phi), s = std::sin(phi);
                double u = c * (x - e.x0) + s * (y - e.y0);
                double v = -s * (x - e.x0) + c * (y - e.y0);
                if ((u / e.a) * (u / e.a) + (v / e.b) * (v / e.b) <= 1.0) acc += e.value;
            }
            img.at(ix, iy) = acc;
        }
    }
    return img;
}

inline bool inside_circle(double x, double y, double cx, double cy, double r) {
    return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
}

}  // namespace detail

// brain: the modified Shepp-Logan ellipse set, rescaled so min = 0, max = 1.
// body: elliptical torso with three hot lesions (4:1) and one cold lesion.
// disk: centered uniform binary disk of radius 0.4 x (half field of view).
// point: single hot pixel at the grid center.
inline Phantom make_phantom(const std::string& name, const ImageGrid& grid) {
    grid.validate();
    Phantom ph;
    ph.name = name;
    if (name == "brain") {
        // Modified (Toft) Shepp-Logan parameters.
        static const std::vector<detail::Ellipse> es = {
            {0.0, 0.0, 0.69, 0.92, 0.0, 1.0},
            {0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8},
            {0.22, 0.0, 0.11, 0.31, -18.0, -0.2},
            {-0.22, 0.0, 0.16, 0.41, 18.0, -0.2},
            {0.0, 0.35, 0.21, 0.25, 0.0, 0.1},
            {0.0, 0.1, 0.046, 0.046, 0.0, 0.1},
            {0.0, -0.1, 0.046, 0.046, 0.0, 0.1},
            {-0.08, -0.605, 0.046, 0.023, 0.0, 0.1},
            {0.0, -0.605, 0.023, 0.023, 0.0, 0.1},
            {0.06, -0.605, 0.023, 0.046, 0.0, 0.1},
        };
        ph.image = detail::paint_ellipses_additive(grid, es);
        double mx = 0.0;
        for (auto& v : ph.image.values) {
            v = std::max(v, 0.0);  // ellipse sums cancel to ~0 with FP residue
            mx = std::max(mx, v);
        }
        for (auto& v : ph.image.values) v /= mx;
        ph.description = "modified Shepp-Logan head section, normalized to [0,1]";
    } else if (name == "body") {
        ph.image = Image::zeros(grid);
        const double sx = 2.0 / grid.nx, sy = 2.0 / grid.ny;
        for (int iy = 0; iy < grid.ny; ++iy) {
            double y = (iy + 0.5) * sy - 1.0;
            for (int ix = 0; ix < grid.nx; ++ix) {
                double x = (ix + 0.5) * sx - 1.0;
                double torso = (x / 0.85) * (x / 0.85) + (y / 0.65) * (y / 0.65);
                if (torso > 1.0) continue;
                double v = 1.0;
                if (detail::inside_circle(x, y, -0.35, 0.25, 0.10)) v = 4.0;
                if (detail::inside_circle(x, y, 0.30, 0.30, 0.10)) v = 4.0;
                if (detail::inside_circle(x, y, 0.25, -0.35, 0.10)) v = 4.0;
                if (detail::inside_circle(x, y, -0.30, -0.30, 0.12)) v = 0.0;
                ph.image.at(ix, iy) = v;
            }
        }
        ph.description = "elliptical torso, three 4:1 hot lesions, one cold lesion";
    } else if (name == "disk") {
        ph.image = Image::zeros(grid);
        const double R = 0.4 * 0.5 * grid.nx;  // pixels; 0.4 x half field of view
        for (int iy = 0; iy < grid.ny; ++iy)
            for (int ix = 0; ix < grid.nx; ++ix) {
                double cx = (ix + 0.5) - 0.5 * grid.nx;
                double cy = (iy + 0.5) - 0.5 * grid.ny;
                if (cx * cx + cy * cy <= R * R) ph.image.at(ix, iy) = 1.0;
            }
        ph.description = "centered uniform binary disk";
    } else if (name == "point") {
        ph.image = Image::zeros(grid);
        ph.image.at(grid.nx / 2, grid.ny / 2) = 1.0;
        ph.description = "single hot pixel at the grid center";
    } else {
        throw usage_error("make_phantom: unknown phantom name '" + name +
                          "' (expected brain, body, disk or point)");
    }
    return ph;
}

}  // namespace petrec
