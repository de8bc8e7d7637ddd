#pragma once

// Minimal reverse-mode automatic differentiation over dense 4-D tensors
// (batch, channel, height, width), batch fixed at 1. Provides exactly the
// primitives the generator/denoiser networks and the joint objective need.
// Single-threaded per graph; deterministic accumulation order throughout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "petrec/common.hpp"
#include "petrec/rng.hpp"

namespace petrec::ad {

struct Shape {
    int b = 1, c = 1, h = 1, w = 1;
    std::int64_t numel() const { return static_cast<std::int64_t>(b) * c * h * w; }
    bool operator==(const Shape& o) const {
        return b == o.b && c == o.c && h == o.h && w == o.w;
    }
    std::string str() const {
        std::ostringstream os;
        os << "[" << b << "," << c << "," << h << "," << w << "]";
        return os.str();
    }
};

struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    int node = -1;  // -1: constant, untracked by the tape

    double* ptr() { return data->data(); }
    const double* ptr() const { return data->data(); }
    std::int64_t numel() const { return shape.numel(); }
};

inline Tensor constant(Shape s, std::vector<double> values) {
    if (static_cast<std::int64_t>(values.size()) != s.numel())
        throw input_error("tensor: value count does not match shape " + s.str());
    return Tensor{s, std::make_shared<std::vector<double>>(std::move(values)), -1};
}

inline Tensor constant_fill(Shape s, double v) {
    return Tensor{s, std::make_shared<std::vector<double>>(s.numel(), v), -1};
}

class Tape {
public:
    bool debug_check_finite = false;

    // Registers a variable whose gradient will be tracked.
    Tensor leaf(Shape s, std::shared_ptr<std::vector<double>> data, const char* name = "leaf") {
        if (static_cast<std::int64_t>(data->size()) != s.numel())
            throw input_error("tape leaf: value count does not match shape " + s.str());
        int id = add_node(s, name, {}, nullptr);
        return Tensor{s, std::move(data), id};
    }

    Tensor leaf(Shape s, std::vector<double> values, const char* name = "leaf") {
        return leaf(s, std::make_shared<std::vector<double>>(std::move(values)), name);
    }

    // Id the next add_node call will return; ops capture it in their closures.
    int next_id() const { return static_cast<int>(nodes_.size()); }

    int add_node(Shape s, const char* op, std::vector<int> parents,
                 std::function<void(Tape&)> backward) {
        nodes_.push_back(Node{s, op, std::move(parents), std::move(backward)});
        grads_.emplace_back();
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Gradient buffer for a node, allocated (zeroed) on first touch.
    std::vector<double>& grad_buf(int node) {
        auto& g = grads_[static_cast<std::size_t>(node)];
        if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[node].shape.numel()), 0.0);
        return g;
    }
    bool has_grad(int node) const { return !grads_[static_cast<std::size_t>(node)].empty(); }

    // Gradient of a tracked tensor after backward(); zeros if unreachable.
    std::vector<double> gradient(const Tensor& t) const {
        if (t.node < 0) throw input_error("gradient: tensor is a constant");
        const auto& g = grads_[static_cast<std::size_t>(t.node)];
        if (g.empty()) return std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0);
        return g;
    }
    const std::vector<double>* try_grad(int node) const {
        const auto& g = grads_[static_cast<std::size_t>(node)];
        return g.empty() ? nullptr : &g;
    }

    void backward(const Tensor& loss) {
        if (loss.node < 0) throw input_error("backward: loss is not tracked by this tape");
        if (loss.numel() != 1) throw input_error("backward: loss must be scalar");
        grad_buf(loss.node)[0] += 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            if (!has_grad(i)) continue;  // not on any path to the loss
            if (nodes_[static_cast<std::size_t>(i)].backward)
                nodes_[static_cast<std::size_t>(i)].backward(*this);
        }
    }

    std::size_t size() const { return nodes_.size(); }

    // Structured-text view of the recorded graph, for debugging.
    std::string dump() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            os << i << " " << nodes_[i].op << " " << nodes_[i].shape.str();
            if (!nodes_[i].parents.empty()) {
                os << " <-";
                for (int p : nodes_[i].parents) os << " " << p;
            }
            os << "\n";
        }
        return os.str();
    }

    void check_output(const Tensor& t, const char* op) const {
        if (!debug_check_finite) return;
        for (double v : *t.data)
            if (!std::isfinite(v))
                throw numeric_error(std::string(op) + ": non-finite value in output");
    }

private:
    struct Node {
        Shape shape;
        const char* op;
        std::vector<int> parents;
        std::function<void(Tape&)> backward;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

// A Parameter owns a persistent value buffer; bind() registers it as a tape
// leaf for one forward/backward pass while sharing the same storage.
enum class ParamRole { weight, bias, bn_gamma, bn_beta };

struct Parameter {
    std::string name;
    ParamRole role = ParamRole::weight;
    Shape shape;
    std::shared_ptr<std::vector<double>> values;

    Parameter() = default;
    Parameter(std::string n, ParamRole r, Shape s)
        : name(std::move(n)), role(r), shape(s),
          values(std::make_shared<std::vector<double>>(s.numel(), 0.0)) {}

    Tensor bind(Tape& tape) const { return tape.leaf(shape, values, name.c_str()); }
};

namespace detail {
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!(a.shape == b.shape))
        throw input_error(std::string(op) + ": shape mismatch " + a.shape.str() + " vs " +
                          b.shape.str());
}
}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and reduction primitives
// ---------------------------------------------------------------------------

inline Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    const int id = t.next_id();
    auto out = std::make_shared<std::vector<double>>(a.data->size());
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*a.data)[i] + (*b.data)[i];
    const int an = a.node, bn = b.node;
    t.add_node(a.shape, "add", {an, bn}, [id, an, bn](Tape& tp) {
        const auto& g = tp.grad_buf(id);
        if (an >= 0) {
            auto& ga = tp.grad_buf(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (bn >= 0) {
            auto& gb = tp.grad_buf(bn);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
    Tensor r{a.shape, out, id};
    t.check_output(r, "add");
    return r;
}

inline Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    const int id = t.next_id();
    auto out = std::make_shared<std::vector<double>>(a.data->size());
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*a.data)[i] - (*b.data)[i];
    const int an = a.node, bn = b.node;
    t.add_node(a.shape, "sub", {an, bn}, [id, an, bn](Tape& tp) {
        const auto& g = tp.grad_buf(id);
        if (an >= 0) {
            auto& ga = tp.grad_buf(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (bn >= 0) {
            auto& gb = tp.grad_buf(bn);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
    Tensor r{a.shape, out, id};
    t.check_output(r, "sub");
    return r;
}

inline Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    const int id = t.next_id();
    auto out = std::make_shared<std::vector<double>>(a.data->size());
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*a.data)[i] * (*b.data)[i];
    const int an = a.node, bn = b.node;
    auto ad_ = a.data, bd = b.data;
    t.add_node(a.shape, "mul", {an, bn}, [id, an, bn, ad_, bd](Tape& tp) {
        const auto& g = tp.grad_buf(id);
        if (an >= 0) {
            auto& ga = tp.grad_buf(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bd)[i];
        }
        if (bn >= 0) {
            auto& gb = tp.grad_buf(bn);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*ad_)[i];
        }
    });
    Tensor r{a.shape, out, id};
    t.check_output(r, "mul");
    return r;
}

inline Tensor scalar_mul(Tape& t, const Tensor& a, double s) {
    const int id = t.next_id();
    auto out = std::make_shared<std::vector<double>>(a.data->size());
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = s * (*a.data)[i];
    const int an = a.node;
    t.add_node(a.shape, "scalar_mul", {an}, [id, an, s](Tape& tp) {
        const auto& g = tp.grad_buf(id);
        if (an >= 0) {
            auto& ga = tp.grad_buf(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
        }
    });
    Tensor r{a.shape, out, id};
    t.check_output(r, "scalar_mul");
    return r;
}

inline Tensor square(Tape& t, const Tensor& a) {
    const int id = t.next_id();
    auto out = std::make_shared<std::vector<double>>(a.data->size());
    for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*a.data)[i] * (*a.data)[i];
    const int an = a.node;
    auto ad_ = a.data;
    t.add_node(a.shape, "square", {an}, [id, an, ad_](Tape& tp) {
        const auto& g = tp.grad_buf(id);
        if (an >= 0) {
            auto& ga = tp.grad_buf(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * (*ad_)[i] * g[i];
        }
    });
    Tensor r{a.shape, out, id};
    t.check_output(r, "square");
    return r;
}

inline Tensor sum(Tape& t, const Tensor& a) {
    const int id = t.next_id();
    double s = 0.0;
    for (double v : *a.data) s += v;
    const int an = a.node;
    t.add_node(Shape{1, 1, 1, 1}, "sum", {an}, [id, an](Tape& tp) {
        const double g = tp.grad_buf(id)[0];
        if (an >= 0) {
            auto& ga = tp.grad_buf(an);
            for (auto& v : ga) v += g;
        }
    });
    Tensor r{Shape{1, 1, 1, 1}, std::make_shared<std::vector<double>>(1, s), id};
    t.check_output(r, "sum");
    return r;
}

inline Tensor mean(Tape& t, const Tensor& a) {
    const int id = t.next_id();
    double s = 0.0;
    for (double v : *a.data) s += v;
    const double inv = 1.0 / static_cast<double>(a.numel());
    const int an = a.node;
    t.add_node(Shape{1, 1, 1, 1}, "mean", {an}, [id, an, inv](Tape& tp) {
        const double g = tp.grad_buf(id)[0] * inv;
        if (an >= 0) {
            auto& ga = tp.grad_buf(an);
            for (auto& v : ga) v += g;
        }
    });
    Tensor r{Shape{1, 1, 1, 1}, std::make_shared<std::vector<double>>(1, s * inv), id};
    t.check_output(r, "mean");
    return r;
}

inline Tensor dot(Tape& t, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "dot");
    const int id = t.next_id();
    double s = 0.0;
    for (std::size_t i = 0; i < a.data->size(); ++i) s += (*a.data)[i] * (*b.data)[i];
    const int an = a.node, bn = b.node;
    auto ad_ = a.data, bd = b.data;
    t.add_node(Shape{1, 1, 1, 1}, "dot", {an, bn}, [id, an, bn, ad_, bd](Tape& tp) {
        const double g = tp.grad_buf(id)[0];
        if (an >= 0) {
            auto& ga = tp.grad_buf(an);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (*bd)[i];
        }
        if (bn >= 0) {
            auto& gb = tp.grad_buf(bn);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * (*ad_)[i];
        }
    });
    Tensor r{Shape{1, 1, 1, 1}, std::make_shared<std::vector<double>>(1, s), id};
    t.check_output(r, "dot");
    return r;
}

inline Tensor relu(Tape& t, const Tensor& a) {
    const int id = t.next_id();
    auto out = std::make_shared<std::vector<double>>(a.data->size());
    for (std::size_t i = 0; i < out->size(); ++i)
        (*out)[i] = (*a.data)[i] > 0.0 ? (*a.data)[i] : 0.0;
    const int an = a.node;
    auto ad_ = a.data;
    t.add_node(a.shape, "relu", {an}, [id, an, ad_](Tape& tp) {
        const auto& g = tp.grad_buf(id);
        if (an >= 0) {
            auto& ga = tp.grad_buf(an);
            for (std::size_t i = 0; i < g.size(); ++i)
                if ((*ad_)[i] > 0.0) ga[i] += g[i];
        }
    });
    Tensor r{a.shape, out, id};
    t.check_output(r, "relu");
    return r;
}

// Channel concatenation, a's channels first. B, H, W must match.
inline Tensor concat_channels(Tape& t, const Tensor& a, const Tensor& b) {
    if (a.shape.b != b.shape.b || a.shape.h != b.shape.h || a.shape.w != b.shape.w)
        throw input_error("concat_channels: B/H/W mismatch " + a.shape.str() + " vs " +
                          b.shape.str());
    if (a.shape.b != 1) throw input_error("concat_channels: batch must be 1");
    const Shape os{1, a.shape.c + b.shape.c, a.shape.h, a.shape.w};
    const int id = t.next_id();
    auto out = std::make_shared<std::vector<double>>(os.numel());
    const std::size_t plane = static_cast<std::size_t>(a.shape.h) * a.shape.w;
    const std::size_t asz = static_cast<std::size_t>(a.shape.c) * plane;
    const std::size_t bsz = static_cast<std::size_t>(b.shape.c) * plane;
    std::copy(a.data->begin(), a.data->end(), out->begin());
    std::copy(b.data->begin(), b.data->end(), out->begin() + asz);
    const int an = a.node, bn = b.node;
    t.add_node(os, "concat_channels", {an, bn}, [id, an, bn, asz, bsz](Tape& tp) {
        const auto& g = tp.grad_buf(id);
        if (an >= 0) {
            auto& ga = tp.grad_buf(an);
            for (std::size_t i = 0; i < asz; ++i) ga[i] += g[i];
        }
        if (bn >= 0) {
            auto& gb = tp.grad_buf(bn);
            for (std::size_t i = 0; i < bsz; ++i) gb[i] += g[asz + i];
        }
    });
    Tensor r{os, out, id};
    t.check_output(r, "concat_channels");
    return r;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace detail {

// out[oc] += sum_ic sum_ky,kx w[oc][ic][ky][kx] * in[ic][y+ky-p][x+kx-p]
// structured as one shifted axpy pass per (oc, ic, ky, kx) so the inner x
// loop is contiguous and vectorizes.
inline void conv2d_forward(const double* in, const double* w, const double* bias, double* out,
                           int C, int Co, int H, int W, int k, int p) {
    const int Ho = H + 2 * p - k + 1, Wo = W + 2 * p - k + 1;
    for (int oc = 0; oc < Co; ++oc) {
        double* op = out + static_cast<std::size_t>(oc) * Ho * Wo;
        const double bv = bias ? bias[oc] : 0.0;
        for (int i = 0; i < Ho * Wo; ++i) op[i] = bv;
        for (int ic = 0; ic < C; ++ic) {
            const double* ip = in + static_cast<std::size_t>(ic) * H * W;
            const double* wp = w + (static_cast<std::size_t>(oc) * C + ic) * k * k;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const double wv = wp[ky * k + kx];
                    const int y0 = std::max(0, p - ky), y1 = std::min(Ho, H + p - ky);
                    const int x0 = std::max(0, p - kx), x1 = std::min(Wo, W + p - kx);
                    for (int yo = y0; yo < y1; ++yo) {
                        double* orow = op + static_cast<std::size_t>(yo) * Wo;
                        const double* irow =
                            ip + static_cast<std::size_t>(yo + ky - p) * W + (kx - p);
                        for (int xo = x0; xo < x1; ++xo) orow[xo] += wv * irow[xo];
                    }
                }
        }
    }
}

// grad wrt input: gin[ic][yi][xi] += w[oc][ic][ky][kx] * gout[oc][yi-ky+p][xi-kx+p]
inline void conv2d_backward_input(const double* gout, const double* w, double* gin, int C, int Co,
                                  int H, int W, int k, int p) {
    const int Ho = H + 2 * p - k + 1, Wo = W + 2 * p - k + 1;
    for (int oc = 0; oc < Co; ++oc) {
        const double* gp = gout + static_cast<std::size_t>(oc) * Ho * Wo;
        for (int ic = 0; ic < C; ++ic) {
            double* dp = gin + static_cast<std::size_t>(ic) * H * W;
            const double* wp = w + (static_cast<std::size_t>(oc) * C + ic) * k * k;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const double wv = wp[ky * k + kx];
                    const int y0 = std::max(0, ky - p), y1 = std::min(H, Ho + ky - p);
                    const int x0 = std::max(0, kx - p), x1 = std::min(W, Wo + kx - p);
                    for (int yi = y0; yi < y1; ++yi) {
                        double* drow = dp + static_cast<std::size_t>(yi) * W;
                        const double* grow =
                            gp + static_cast<std::size_t>(yi - ky + p) * Wo - (kx - p);
                        for (int xi = x0; xi < x1; ++xi) drow[xi] += wv * grow[xi];
                    }
                }
        }
    }
}

// grad wrt weight: gw[oc][ic][ky][kx] += gout[oc][yo][xo] * in[ic][yo+ky-p][xo+kx-p]
inline void conv2d_backward_weight(const double* gout, const double* in, double* gw, double* gb,
                                   int C, int Co, int H, int W, int k, int p) {
    const int Ho = H + 2 * p - k + 1, Wo = W + 2 * p - k + 1;
    for (int oc = 0; oc < Co; ++oc) {
        const double* gp = gout + static_cast<std::size_t>(oc) * Ho * Wo;
        if (gb) {
            double s = 0.0;
            for (int i = 0; i < Ho * Wo; ++i) s += gp[i];
            gb[oc] += s;
        }
        for (int ic = 0; ic < C; ++ic) {
            const double* ip = in + static_cast<std::size_t>(ic) * H * W;
            double* wp = gw + (static_cast<std::size_t>(oc) * C + ic) * k * k;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const int y0 = std::max(0, p - ky), y1 = std::min(Ho, H + p - ky);
                    const int x0 = std::max(0, p - kx), x1 = std::min(Wo, W + p - kx);
                    double s = 0.0;
                    for (int yo = y0; yo < y1; ++yo) {
                        const double* grow = gp + static_cast<std::size_t>(yo) * Wo;
                        const double* irow =
                            ip + static_cast<std::size_t>(yo + ky - p) * W + (kx - p);
                        for (int xo = x0; xo < x1; ++xo) s += grow[xo] * irow[xo];
                    }
                    wp[ky * k + kx] += s;
                }
        }
    }
}

}  // namespace detail

// Cross-correlation with per-output-channel bias; stride 1, k in {1,3},
// padding 0 or (k-1)/2.
inline Tensor conv2d(Tape& t, const Tensor& input, const Tensor& weight, const Tensor& bias,
                     int padding) {
    const Shape& is = input.shape;
    const Shape& ws = weight.shape;
    if (is.b != 1) throw input_error("conv2d: batch must be 1");
    const int k = ws.h;
    if (k != ws.w || (k != 1 && k != 3)) throw input_error("conv2d: kernel must be 1x1 or 3x3");
    if (ws.c != is.c)
        throw input_error("conv2d: weight expects " + std::to_string(ws.c) + " input channels, got " +
                          std::to_string(is.c));
    if (padding != 0 && padding != (k - 1) / 2)
        throw input_error("conv2d: padding must be 0 or (k-1)/2");
    const int Co = ws.b;
    if (bias.numel() != Co) throw input_error("conv2d: bias size must equal output channels");
    const int H = is.h, W = is.w, p = padding;
    const int Ho = H + 2 * p - k + 1, Wo = W + 2 * p - k + 1;
    if (Ho < 1 || Wo < 1) throw input_error("conv2d: output would be empty");
    const Shape os{1, Co, Ho, Wo};

    const int id = t.next_id();
    auto out = std::make_shared<std::vector<double>>(os.numel());
    detail::conv2d_forward(input.ptr(), weight.ptr(), bias.ptr(), out->data(), is.c, Co, H, W, k,
                           p);

    const int in_n = input.node, w_n = weight.node, b_n = bias.node;
    auto in_d = input.data, w_d = weight.data;
    const int C = is.c;
    t.add_node(os, "conv2d", {in_n, w_n, b_n},
               [id, in_n, w_n, b_n, in_d, w_d, C, Co, H, W, k, p](Tape& tp) {
                   const auto& g = tp.grad_buf(id);
                   if (in_n >= 0)
                       detail::conv2d_backward_input(g.data(), w_d->data(),
                                                     tp.grad_buf(in_n).data(), C, Co, H, W, k, p);
                   if (w_n >= 0 || b_n >= 0) {
                       // one fused pass produces both; an untracked side goes
                       // to scratch
                       std::vector<double> wsc, bsc;
                       double* gw = nullptr;
                       double* gb = nullptr;
                       if (w_n >= 0) {
                           gw = tp.grad_buf(w_n).data();
                       } else {
                           wsc.assign(static_cast<std::size_t>(Co) * C * k * k, 0.0);
                           gw = wsc.data();
                       }
                       if (b_n >= 0) {
                           gb = tp.grad_buf(b_n).data();
                       } else {
                           bsc.assign(static_cast<std::size_t>(Co), 0.0);
                           gb = bsc.data();
                       }
                       detail::conv2d_backward_weight(g.data(), in_d->data(), gw, gb, C, Co, H, W,
                                                      k, p);
                   }
               });
    Tensor r{os, out, id};
    t.check_output(r, "conv2d");
    return r;
}

// ---------------------------------------------------------------------------
// batch normalization (training mode, per-channel stats over B=1, H, W)
// ---------------------------------------------------------------------------

inline Tensor batch_norm(Tape& t, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    const Shape& s = x.shape;
    if (s.b != 1) throw input_error("batch_norm: batch must be 1");
    if (gamma.numel() != s.c || beta.numel() != s.c)
        throw input_error("batch_norm: gamma/beta size must equal channel count");
    const int C = s.c;
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const double n = static_cast<double>(plane);

    const int id = t.next_id();
    auto out = std::make_shared<std::vector<double>>(x.data->size());
    auto xhat = std::make_shared<std::vector<double>>(x.data->size());
    auto inv_std = std::make_shared<std::vector<double>>(C);

    for (int c = 0; c < C; ++c) {
        const double* xp = x.ptr() + c * plane;
        double mu = 0.0;
        for (std::size_t i = 0; i < plane; ++i) mu += xp[i];
        mu /= n;
        double var = 0.0;
        for (std::size_t i = 0; i < plane; ++i) var += (xp[i] - mu) * (xp[i] - mu);
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[c] = is;
        const double g = (*gamma.data)[c], b = (*beta.data)[c];
        double* op = out->data() + c * plane;
        double* hp = xhat->data() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            hp[i] = (xp[i] - mu) * is;
            op[i] = g * hp[i] + b;
        }
    }

    const int xn = x.node, gn = gamma.node, bn = beta.node;
    auto gamma_d = gamma.data;
    t.add_node(s, "batch_norm", {xn, gn, bn},
               [id, xn, gn, bn, xhat, inv_std, gamma_d, C, plane, n](Tape& tp) {
                   const auto& g = tp.grad_buf(id);
                   for (int c = 0; c < C; ++c) {
                       const double* gp = g.data() + c * plane;
                       const double* hp = xhat->data() + c * plane;
                       double sg = 0.0, sgh = 0.0;
                       for (std::size_t i = 0; i < plane; ++i) {
                           sg += gp[i];
                           sgh += gp[i] * hp[i];
                       }
                       if (bn >= 0) tp.grad_buf(bn)[c] += sg;
                       if (gn >= 0) tp.grad_buf(gn)[c] += sgh;
                       if (xn >= 0) {
                           double* dx = tp.grad_buf(xn).data() + c * plane;
                           const double k = (*gamma_d)[c] * (*inv_std)[c];
                           const double mg = sg / n, mgh = sgh / n;
                           for (std::size_t i = 0; i < plane; ++i)
                               dx[i] += k * (gp[i] - mg - hp[i] * mgh);
                       }
                   }
               });
    Tensor r{s, out, id};
    t.check_output(r, "batch_norm");
    return r;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling (stride 2) and x2 bilinear upsampling
// ---------------------------------------------------------------------------

inline Tensor max_pool2(Tape& t, const Tensor& x) {
    const Shape& s = x.shape;
    if (s.b != 1) throw input_error("max_pool2: batch must be 1");
    if (s.h % 2 != 0 || s.w % 2 != 0)
        throw input_error("max_pool2: spatial dims must be even, got " + s.str());
    const int C = s.c, H = s.h, W = s.w, Ho = H / 2, Wo = W / 2;
    const Shape os{1, C, Ho, Wo};
    const int id = t.next_id();
    auto out = std::make_shared<std::vector<double>>(os.numel());
    auto arg = std::make_shared<std::vector<std::int32_t>>(os.numel());
    for (int c = 0; c < C; ++c) {
        const double* xp = x.ptr() + static_cast<std::size_t>(c) * H * W;
        double* op = out->data() + static_cast<std::size_t>(c) * Ho * Wo;
        std::int32_t* ap = arg->data() + static_cast<std::size_t>(c) * Ho * Wo;
        for (int yo = 0; yo < Ho; ++yo)
            for (int xo = 0; xo < Wo; ++xo) {
                // row-major scan; strict > keeps the first occurrence on ties
                int best = (2 * yo) * W + 2 * xo;
                double bv = xp[best];
                const int cand[3] = {(2 * yo) * W + 2 * xo + 1, (2 * yo + 1) * W + 2 * xo,
                                     (2 * yo + 1) * W + 2 * xo + 1};
                for (int i = 0; i < 3; ++i)
                    if (xp[cand[i]] > bv) {
                        bv = xp[cand[i]];
                        best = cand[i];
                    }
                op[yo * Wo + xo] = bv;
                ap[yo * Wo + xo] = best;
            }
    }
    const int xn = x.node;
    const std::size_t plane_in = static_cast<std::size_t>(H) * W;
    const std::size_t plane_out = static_cast<std::size_t>(Ho) * Wo;
    t.add_node(os, "max_pool2", {xn}, [id, xn, arg, C, plane_in, plane_out](Tape& tp) {
        if (xn < 0) return;
        const auto& g = tp.grad_buf(id);
        auto& gx = tp.grad_buf(xn);
        for (int c = 0; c < C; ++c)
            for (std::size_t i = 0; i < plane_out; ++i)
                gx[c * plane_in + (*arg)[c * plane_out + i]] += g[c * plane_out + i];
    });
    Tensor r{os, out, id};
    t.check_output(r, "max_pool2");
    return r;
}

// x2 bilinear upsampling, align-corners=false: source coordinate for output
// o is (o + 0.5)/2 - 0.5, clamped to the input extent.
inline Tensor upsample_bilinear2(Tape& t, const Tensor& x) {
    const Shape& s = x.shape;
    if (s.b != 1) throw input_error("upsample_bilinear2: batch must be 1");
    const int C = s.c, H = s.h, W = s.w, Ho = 2 * H, Wo = 2 * W;
    const Shape os{1, C, Ho, Wo};
    const int id = t.next_id();

    // per-axis interpolation tables shared by forward and backward
    auto make_axis = [](int n_out, int n_in) {
        std::vector<std::int32_t> i0(n_out), i1(n_out);
        std::vector<double> w1(n_out);
        for (int o = 0; o < n_out; ++o) {
            double src = (o + 0.5) / 2.0 - 0.5;
            src = std::max(0.0, std::min(src, static_cast<double>(n_in - 1)));
            int lo = static_cast<int>(std::floor(src));
            int hi = std::min(lo + 1, n_in - 1);
            i0[o] = lo;
            i1[o] = hi;
            w1[o] = src - lo;
        }
        return std::tuple(i0, i1, w1);
    };
    auto [yi0, yi1, yw] = make_axis(Ho, H);
    auto [xi0, xi1, xw] = make_axis(Wo, W);

    auto out = std::make_shared<std::vector<double>>(os.numel());
    for (int c = 0; c < C; ++c) {
        const double* xp = x.ptr() + static_cast<std::size_t>(c) * H * W;
        double* op = out->data() + static_cast<std::size_t>(c) * Ho * Wo;
        for (int yo = 0; yo < Ho; ++yo) {
            const double wy = yw[yo];
            const double* r0 = xp + static_cast<std::size_t>(yi0[yo]) * W;
            const double* r1 = xp + static_cast<std::size_t>(yi1[yo]) * W;
            for (int xo = 0; xo < Wo; ++xo) {
                const double wx = xw[xo];
                const double a = r0[xi0[xo]] * (1 - wx) + r0[xi1[xo]] * wx;
                const double b = r1[xi0[xo]] * (1 - wx) + r1[xi1[xo]] * wx;
                op[yo * Wo + xo] = a * (1 - wy) + b * wy;
            }
        }
    }

    const int xn = x.node;
    auto tab = std::make_shared<std::tuple<std::vector<std::int32_t>, std::vector<std::int32_t>,
                                           std::vector<double>, std::vector<std::int32_t>,
                                           std::vector<std::int32_t>, std::vector<double>>>(
        yi0, yi1, yw, xi0, xi1, xw);
    t.add_node(os, "upsample_bilinear2", {xn}, [id, xn, tab, C, H, W, Ho, Wo](Tape& tp) {
        if (xn < 0) return;
        const auto& g = tp.grad_buf(id);
        auto& gx = tp.grad_buf(xn);
        const auto& [yi0, yi1, yw, xi0, xi1, xw] = *tab;
        for (int c = 0; c < C; ++c) {
            const double* gp = g.data() + static_cast<std::size_t>(c) * Ho * Wo;
            double* dp = gx.data() + static_cast<std::size_t>(c) * H * W;
            for (int yo = 0; yo < Ho; ++yo) {
                const double wy = yw[yo];
                for (int xo = 0; xo < Wo; ++xo) {
                    const double wx = xw[xo];
                    const double gv = gp[yo * Wo + xo];
                    dp[yi0[yo] * W + xi0[xo]] += gv * (1 - wy) * (1 - wx);
                    dp[yi0[yo] * W + xi1[xo]] += gv * (1 - wy) * wx;
                    dp[yi1[yo] * W + xi0[xo]] += gv * wy * (1 - wx);
                    dp[yi1[yo] * W + xi1[xo]] += gv * wy * wx;
                }
            }
        }
    });
    Tensor r{os, out, id};
    t.check_output(r, "upsample_bilinear2");
    return r;
}

// ---------------------------------------------------------------------------
// external linear operator node
// ---------------------------------------------------------------------------

// Wraps an external linear map (e.g. the ray-traced system operator) as a
// graph node: forward applies the map, backward applies its adjoint. The
// adjoint identity <A u, v> = <u, A^T v> is verified once per operator with
// a random probe; a failing probe rejects the operator.
struct LinearOp {
    std::function<std::vector<double>(const std::vector<double>&)> apply;
    std::function<std::vector<double>(const std::vector<double>&)> adjoint;
    Shape in_shape;
    Shape out_shape;
    std::string name = "linear_op";
    mutable bool probe_passed = false;

    void self_test(std::uint64_t probe_seed = 0x5eedf00d) const {
        if (probe_passed) return;
        CounterRng rng(probe_seed, 0);
        std::vector<double> u(static_cast<std::size_t>(in_shape.numel()));
        std::vector<double> v(static_cast<std::size_t>(out_shape.numel()));
        for (auto& x : u) x = 2.0 * rng.uniform() - 1.0;
        for (auto& x : v) x = 2.0 * rng.uniform() - 1.0;
        std::vector<double> Au = apply(u);
        std::vector<double> Atv = adjoint(v);
        if (Au.size() != v.size() || Atv.size() != u.size())
            throw input_error(name + ": apply/adjoint produce wrong sizes");
        double lhs = 0.0, rhs = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) lhs += Au[i] * v[i];
        for (std::size_t i = 0; i < u.size(); ++i) rhs += u[i] * Atv[i];
        if (std::abs(lhs - rhs) / (std::abs(lhs) + std::abs(rhs) + 1e-30) > 1e-8)
            throw input_error(name + ": adjoint probe failed (<Au,v>=" + std::to_string(lhs) +
                              ", <u,Atv>=" + std::to_string(rhs) + ")");
        probe_passed = true;
    }
};

inline Tensor linear_op(Tape& t, const LinearOp& op, const Tensor& x) {
    if (!(x.shape == op.in_shape))
        throw input_error(op.name + ": input shape " + x.shape.str() + " != expected " +
                          op.in_shape.str());
    op.self_test();
    const int id = t.next_id();
    auto out = std::make_shared<std::vector<double>>(op.apply(*x.data));
    if (static_cast<std::int64_t>(out->size()) != op.out_shape.numel())
        throw input_error(op.name + ": apply produced wrong size");
    const int xn = x.node;
    auto adj = op.adjoint;
    t.add_node(op.out_shape, "linear_op", {xn}, [id, xn, adj](Tape& tp) {
        if (xn < 0) return;
        std::vector<double> gin = adj(tp.grad_buf(id));
        auto& gx = tp.grad_buf(xn);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gin[i];
    });
    Tensor r{op.out_shape, out, id};
    t.check_output(r, "linear_op");
    return r;
}

// ---------------------------------------------------------------------------
// finite-difference gradient check
// ---------------------------------------------------------------------------

// Central-difference check of d(fn)/d(point). For tensors above 256 entries a
// fixed-seed random subset of 256 coordinates is probed. Returns the maximum
// relative error over probed coordinates.
inline double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& fn,
                         const Tensor& point, double step) {
    if (!(step > 0.0)) throw input_error("grad_check: step must be > 0");
    std::vector<double> analytic;
    {
        Tape t;
        Tensor x = t.leaf(point.shape, *point.data, "x");
        Tensor loss = fn(t, x);
        if (loss.numel() != 1) throw input_error("grad_check: fn must return a scalar");
        t.backward(loss);
        analytic = t.gradient(x);
    }
    auto value_at = [&](const std::vector<double>& v) {
        Tape t;
        Tensor x = t.leaf(point.shape, v, "x");
        return (*fn(t, x).data)[0];
    };
    const std::int64_t n = point.numel();
    std::vector<std::int64_t> coords;
    if (n <= 256) {
        coords.resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
        CounterRng rng(0xfdc0ffee, 0);
        for (int i = 0; i < 256; ++i)
            coords.push_back(static_cast<std::int64_t>(rng.uniform() * n));
    }
    double worst = 0.0;
    std::vector<double> v = *point.data;
    for (std::int64_t i : coords) {
        const double orig = v[static_cast<std::size_t>(i)];
        v[static_cast<std::size_t>(i)] = orig + step;
        const double fp = value_at(v);
        v[static_cast<std::size_t>(i)] = orig - step;
        const double fm = value_at(v);
        v[static_cast<std::size_t>(i)] = orig;
        const double fd = (fp - fm) / (2.0 * step);
        const double a = analytic[static_cast<std::size_t>(i)];
        const double denom = std::max({std::abs(a), std::abs(fd), 1e-8});
        worst = std::max(worst, std::abs(a - fd) / denom);
    }
    return worst;
}

}  // namespace petrec::ad
