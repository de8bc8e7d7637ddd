#pragma once

// The two network architectures assembled from autodiff primitives: a U-Net
// backbone generator (paired contracting/expansive blocks with skip
// connections, bilinear upsampling, final 1x1 compression) and a DnCNN-style
// denoiser without residual connections. Initialization is seed-pinned.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "petrec/autodiff.hpp"
#include "petrec/common.hpp"
#include "petrec/rng.hpp"

namespace petrec {

struct NetworkSpec {
    enum class Kind { generator, denoiser };
    Kind kind = Kind::generator;
    int base_channels = 64;
    int depth = 4;  // generator: scale levels; denoiser: total conv layers
    int input_channels = 1;
    int output_channels = 1;
};

// Ordered, name-unique parameter collection.
class ParamSet {
public:
    explicit ParamSet(std::uint64_t init_seed = 0) : seed_(init_seed) {}

    std::size_t add(ad::Parameter p) {
        if (index_.count(p.name))
            throw input_error("ParamSet: duplicate parameter name '" + p.name + "'");
        index_[p.name] = params_.size();
        params_.push_back(std::move(p));
        return params_.size() - 1;
    }
    ad::Parameter& at(std::size_t i) { return params_[i]; }
    const ad::Parameter& at(std::size_t i) const { return params_[i]; }
    const ad::Parameter& by_name(const std::string& n) const {
        auto it = index_.find(n);
        if (it == index_.end()) throw input_error("ParamSet: no parameter named '" + n + "'");
        return params_[it->second];
    }
    bool has(const std::string& n) const { return index_.count(n) != 0; }
    std::size_t index_of(const std::string& n) const {
        auto it = index_.find(n);
        if (it == index_.end()) throw input_error("ParamSet: no parameter named '" + n + "'");
        return it->second;
    }
    std::size_t size() const { return params_.size(); }
    std::uint64_t init_seed() const { return seed_; }
    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.shape.numel();
        return n;
    }
    const std::vector<ad::Parameter>& all() const { return params_; }
    std::vector<ad::Parameter>& all() { return params_; }

private:
    std::vector<ad::Parameter> params_;
    std::map<std::string, std::size_t> index_;
    std::uint64_t seed_;
};

// He-style initialization: conv weights ~ N(0, 2/(k^2 Cin)), biases and BN
// beta zero, BN gamma one. Each parameter draws from its own (seed, index)
// stream, so values depend only on the seed and construction order.
inline void init_params(ParamSet& ps, std::uint64_t seed) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
        ad::Parameter& p = ps.at(i);
        switch (p.role) {
            case ad::ParamRole::weight: {
                const int k = p.shape.h;
                const int cin = p.shape.c;
                const double std = std::sqrt(2.0 / (k * k * cin));
                CounterRng rng(seed, static_cast<std::uint64_t>(i));
                for (auto& v : *p.values) v = std * rng.gaussian();
                break;
            }
            case ad::ParamRole::bn_gamma:
                for (auto& v : *p.values) v = 1.0;
                break;
            case ad::ParamRole::bias:
            case ad::ParamRole::bn_beta:
                for (auto& v : *p.values) v = 0.0;
                break;
        }
    }
}

struct Network {
    NetworkSpec spec;
    std::shared_ptr<ParamSet> params;
    // one bound tensor per parameter (ParamSet order), refreshed by each
    // forward call; after tape.backward the i-th parameter's gradient is
    // tape.gradient((*bound)[i]). A network instance records onto one tape
    // at a time.
    std::shared_ptr<std::vector<ad::Tensor>> bound;
    // forward(tape, input) records one evaluation onto the tape
    std::function<ad::Tensor(ad::Tape&, const ad::Tensor&)> forward;
};

namespace detail {

// indices into the ParamSet for one conv(+BN) unit
struct ConvUnit {
    std::size_t w, b;
    std::size_t gamma = 0, beta = 0;
    bool bn = false;
};

inline ConvUnit add_conv(ParamSet& ps, const std::string& prefix, int cin, int cout, int k,
                         bool bn) {
    ConvUnit u;
    u.w = ps.add(ad::Parameter(prefix + ".weight", ad::ParamRole::weight,
                               ad::Shape{cout, cin, k, k}));
    u.b = ps.add(ad::Parameter(prefix + ".bias", ad::ParamRole::bias, ad::Shape{1, cout, 1, 1}));
    u.bn = bn;
    if (bn) {
        u.gamma = ps.add(ad::Parameter(prefix + ".bn_gamma", ad::ParamRole::bn_gamma,
                                       ad::Shape{1, cout, 1, 1}));
        u.beta = ps.add(ad::Parameter(prefix + ".bn_beta", ad::ParamRole::bn_beta,
                                      ad::Shape{1, cout, 1, 1}));
    }
    return u;
}

inline void bind_all(ad::Tape& t, const ParamSet& ps, std::vector<ad::Tensor>& out) {
    out.clear();
    out.reserve(ps.size());
    for (const auto& p : ps.all()) out.push_back(p.bind(t));
}

inline ad::Tensor apply_conv(ad::Tape& t, const std::vector<ad::Tensor>& B, const ConvUnit& u,
                             const ad::Tensor& x, int padding, bool do_relu) {
    ad::Tensor y = ad::conv2d(t, x, B[u.w], B[u.b], padding);
    if (u.bn) y = ad::batch_norm(t, y, B[u.gamma], B[u.beta]);
    return do_relu ? ad::relu(t, y) : y;
}

}  // namespace detail

// U-Net backbone: `depth` paired contracting/expansive blocks. Contracting
// block l: two (conv3x3 + BN + ReLU) at base*2^l channels, then 2x2 max-pool.
// Expansive block l: bilinear x2 upsample, channel-concat with the level's
// skip tensor (upsampled half first), then two (conv3x3 + BN + ReLU). A final
// 1x1 conv compresses base_channels down to the output channel.
inline Network build_generator(const NetworkSpec& spec, std::uint64_t seed) {
    if (spec.kind != NetworkSpec::Kind::generator)
        throw input_error("build_generator: spec.kind must be generator");
    if (spec.depth < 1) throw input_error("build_generator: depth must be >= 1");

    auto ps = std::make_shared<ParamSet>(seed);
    const int d = spec.depth, base = spec.base_channels;
    auto ch = [base](int l) { return base << l; };

    std::vector<detail::ConvUnit> down1(d), down2(d), up1(d), up2(d);
    for (int l = 0; l < d; ++l) {
        const int cin = (l == 0) ? spec.input_channels : ch(l - 1);
        const std::string p = "down" + std::to_string(l);
        down1[l] = detail::add_conv(*ps, p + ".conv1", cin, ch(l), 3, true);
        down2[l] = detail::add_conv(*ps, p + ".conv2", ch(l), ch(l), 3, true);
    }
    for (int l = d - 1; l >= 0; --l) {
        const int from_below = (l == d - 1) ? ch(d - 1) : ch(l + 1);
        const std::string p = "up" + std::to_string(l);
        up1[l] = detail::add_conv(*ps, p + ".conv1", from_below + ch(l), ch(l), 3, true);
        up2[l] = detail::add_conv(*ps, p + ".conv2", ch(l), ch(l), 3, true);
    }
    detail::ConvUnit fin = detail::add_conv(*ps, "final", base, spec.output_channels, 1, false);
    init_params(*ps, seed);

    NetworkSpec sp = spec;
    auto bound = std::make_shared<std::vector<ad::Tensor>>();
    auto fwd = [ps, sp, bound, down1, down2, up1, up2, fin](ad::Tape& t,
                                                            const ad::Tensor& z) -> ad::Tensor {
        const int d = sp.depth;
        if (z.shape.c != sp.input_channels)
            throw input_error("generator: expected " + std::to_string(sp.input_channels) +
                              " input channels");
        if (z.shape.h % (1 << d) != 0 || z.shape.w % (1 << d) != 0)
            throw input_error("generator: input spatial dims must be divisible by 2^depth");
        detail::bind_all(t, *ps, *bound);
        const auto& B = *bound;
        std::vector<ad::Tensor> skips(d);
        ad::Tensor x = z;
        for (int l = 0; l < d; ++l) {
            x = detail::apply_conv(t, B, down1[l], x, 1, true);
            x = detail::apply_conv(t, B, down2[l], x, 1, true);
            skips[l] = x;
            x = ad::max_pool2(t, x);
        }
        for (int l = d - 1; l >= 0; --l) {
            x = ad::upsample_bilinear2(t, x);
            x = ad::concat_channels(t, x, skips[l]);
            x = detail::apply_conv(t, B, up1[l], x, 1, true);
            x = detail::apply_conv(t, B, up2[l], x, 1, true);
        }
        return detail::apply_conv(t, B, fin, x, 0, false);
    };
    return Network{spec, ps, bound, fwd};
}

// DnCNN-style denoiser without the residual shortcut: conv3x3+ReLU, then
// (depth-2) conv3x3+BN+ReLU blocks, then a bare conv3x3 back to one channel.
inline Network build_denoiser(const NetworkSpec& spec, std::uint64_t seed) {
    if (spec.kind != NetworkSpec::Kind::denoiser)
        throw input_error("build_denoiser: spec.kind must be denoiser");
    if (spec.depth < 2) throw input_error("build_denoiser: depth must be >= 2");

    auto ps = std::make_shared<ParamSet>(seed);
    const int d = spec.depth, base = spec.base_channels;
    std::vector<detail::ConvUnit> layers;
    layers.push_back(detail::add_conv(*ps, "layer1", spec.input_channels, base, 3, false));
    for (int l = 2; l < d; ++l)
        layers.push_back(detail::add_conv(*ps, "layer" + std::to_string(l), base, base, 3, true));
    layers.push_back(
        detail::add_conv(*ps, "layer" + std::to_string(d), base, spec.output_channels, 3, false));
    init_params(*ps, seed);

    const int depth = d;
    auto bound = std::make_shared<std::vector<ad::Tensor>>();
    auto fwd = [ps, layers, depth, bound](ad::Tape& t, const ad::Tensor& in) -> ad::Tensor {
        detail::bind_all(t, *ps, *bound);
        ad::Tensor x = in;
        for (int i = 0; i < depth; ++i) {
            const bool last = (i == depth - 1);
            x = detail::apply_conv(t, *bound, layers[static_cast<std::size_t>(i)], x, 1, !last);
        }
        return x;
    };
    return Network{spec, ps, bound, fwd};
}

inline Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
    return spec.kind == NetworkSpec::Kind::generator ? build_generator(spec, seed)
                                                     : build_denoiser(spec, seed);
}

// ---------------------------------------------------------------------------
// checkpoint serialization: text header + little-endian float32 payload
// ---------------------------------------------------------------------------

inline void save_params(const Network& net, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw input_error("save_params: cannot open '" + path + "' for writing");
    const ParamSet& ps = *net.params;
    f << "petrec-checkpoint v1\n";
    f << "kind " << (net.spec.kind == NetworkSpec::Kind::generator ? "generator" : "denoiser")
      << "\n";
    f << "base_channels " << net.spec.base_channels << "\n";
    f << "depth " << net.spec.depth << "\n";
    f << "input_channels " << net.spec.input_channels << "\n";
    f << "output_channels " << net.spec.output_channels << "\n";
    f << "seed " << ps.init_seed() << "\n";
    f << "params " << ps.size() << "\n";
    for (const auto& p : ps.all()) f << "param " << p.name << " " << p.shape.numel() << "\n";
    f << "data\n";
    for (const auto& p : ps.all()) {
        for (double v : *p.values) {
            float x = static_cast<float>(v);
            f.write(reinterpret_cast<const char*>(&x), sizeof(float));
        }
    }
    if (!f) throw input_error("save_params: write failed for '" + path + "'");
}

// Loads a checkpoint saved by save_params into a structurally identical
// network (same parameter names and sizes, in the same order).
inline void load_params(Network& net, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw input_error("load_params: cannot open '" + path + "'");
    std::string line;
    std::getline(f, line);
    if (line != "petrec-checkpoint v1")
        throw input_error("load_params: '" + path + "' is not a checkpoint file");
    std::size_t n_params = 0;
    std::vector<std::pair<std::string, std::int64_t>> entries;
    while (std::getline(f, line)) {
        if (line == "data") break;
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "params") {
            is >> n_params;
        } else if (key == "param") {
            std::string name;
            std::int64_t count = 0;
            is >> name >> count;
            entries.emplace_back(name, count);
        }
    }
    if (entries.size() != n_params)
        throw input_error("load_params: header inconsistent in '" + path + "'");
    ParamSet& ps = *net.params;
    if (entries.size() != ps.size())
        throw input_error("load_params: checkpoint has " + std::to_string(entries.size()) +
                          " parameters, network has " + std::to_string(ps.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        ad::Parameter& p = ps.at(i);
        if (entries[i].first != p.name || entries[i].second != p.shape.numel())
            throw input_error("load_params: parameter mismatch at '" + entries[i].first +
                              "' (expected '" + p.name + "')");
        for (auto& v : *p.values) {
            float x = 0.0f;
            f.read(reinterpret_cast<char*>(&x), sizeof(float));
            v = static_cast<double>(x);
        }
    }
    if (!f) throw input_error("load_params: payload truncated in '" + path + "'");
}

}  // namespace petrec
