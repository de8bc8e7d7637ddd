#pragma once

// Experiment configuration: a small INI dialect with [grid], [geometry],
// [simulate], [method.*] and [report] sections, '#' comments, and
// line-numbered diagnostics on every parse or validation failure.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "petrec/common.hpp"
#include "petrec/geometry.hpp"
#include "petrec/io.hpp"
#include "petrec/phantom.hpp"
#include "petrec/reconstruct.hpp"

namespace petrec {

struct IniEntry {
    std::string key, value;
    int line = 0;
};

struct IniSection {
    std::string name;
    int line = 0;
    std::vector<IniEntry> entries;

    const IniEntry* find(const std::string& key) const {
        for (const auto& e : entries)
            if (e.key == key) return &e;
        return nullptr;
    }
};

struct IniDoc {
    std::string path;
    std::vector<IniSection> sections;

    const IniSection* find(const std::string& name) const {
        for (const auto& s : sections)
            if (s.name == name) return &s;
        return nullptr;
    }
};

namespace detail {

inline std::string ini_trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] inline void ini_fail(const std::string& path, int line, const std::string& msg) {
    throw input_error(path + ":" + std::to_string(line) + ": " + msg);
}

}  // namespace detail

inline IniDoc parse_ini(const std::string& text, const std::string& path) {
    IniDoc doc;
    doc.path = path;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::size_t hash = raw.find('#');
        std::string line = detail::ini_trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                detail::ini_fail(path, lineno, "unterminated section header '" + line + "'");
            const std::string name = detail::ini_trim(line.substr(1, line.size() - 2));
            if (name.empty()) detail::ini_fail(path, lineno, "empty section name");
            if (doc.find(name))
                detail::ini_fail(path, lineno, "duplicate section [" + name + "]");
            doc.sections.push_back(IniSection{name, lineno, {}});
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            detail::ini_fail(path, lineno, "expected 'key = value', got '" + line + "'");
        if (doc.sections.empty())
            detail::ini_fail(path, lineno, "key outside any [section]");
        const std::string key = detail::ini_trim(line.substr(0, eq));
        const std::string value = detail::ini_trim(line.substr(eq + 1));
        if (key.empty()) detail::ini_fail(path, lineno, "empty key");
        if (doc.sections.back().find(key))
            detail::ini_fail(path, lineno, "duplicate key '" + key + "' in section [" +
                                               doc.sections.back().name + "]");
        doc.sections.back().entries.push_back(IniEntry{key, value, lineno});
    }
    return doc;
}

namespace detail {

inline double ini_num(const IniEntry& e, const std::string& path) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(e.value, &pos);
        if (pos != e.value.size()) throw std::invalid_argument(e.value);
        return v;
    } catch (const std::exception&) {
        ini_fail(path, e.line, "'" + e.key + "' is not a number: '" + e.value + "'");
    }
}

inline int ini_int(const IniEntry& e, const std::string& path) {
    const double v = ini_num(e, path);
    const int i = static_cast<int>(v);
    if (static_cast<double>(i) != v)
        ini_fail(path, e.line, "'" + e.key + "' must be an integer, got '" + e.value + "'");
    return i;
}

inline std::uint64_t ini_u64(const IniEntry& e, const std::string& path) {
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(e.value, &pos);
        if (pos != e.value.size()) throw std::invalid_argument(e.value);
        return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
        ini_fail(path, e.line, "'" + e.key + "' is not a nonnegative integer: '" + e.value +
                                   "'");
    }
}

inline bool ini_bool(const IniEntry& e, const std::string& path) {
    if (e.value == "true" || e.value == "1") return true;
    if (e.value == "false" || e.value == "0") return false;
    ini_fail(path, e.line, "'" + e.key + "' must be true or false, got '" + e.value + "'");
}

// comma- or space-separated numeric list
inline std::vector<double> ini_num_list(const IniEntry& e, const std::string& path) {
    std::string s = e.value;
    for (char& c : s)
        if (c == ',') c = ' ';
    std::istringstream in(s);
    std::vector<double> out;
    std::string tok;
    while (in >> tok) {
        try {
            std::size_t pos = 0;
            out.push_back(std::stod(tok, &pos));
            if (pos != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            ini_fail(path, e.line, "'" + e.key + "' has a non-numeric item: '" + tok + "'");
        }
    }
    if (out.empty()) ini_fail(path, e.line, "'" + e.key + "' is an empty list");
    return out;
}

}  // namespace detail

struct ExperimentConfig {
    ImageGrid grid;
    int n_radial = 96;
    int n_angles = 96;

    std::string phantom = "disk";
    std::vector<double> levels;
    double background_fraction = 0.1;
    std::vector<std::uint64_t> seeds{1};

    // ordered as written in the file; first = default method for reconstruct
    std::vector<std::pair<std::string, ReconConfig>> methods;

    std::string out_dir = "out";
    int report_eval_every = 0;  // > 0 overrides every method's eval_every

    std::string raw_text;  // the file as read, echoed into artifacts
    std::uint64_t text_hash = 0;

    const ReconConfig* find_method(const std::string& name) const {
        for (const auto& m : methods)
            if (m.first == name) return &m.second;
        return nullptr;
    }
};

namespace detail {

inline ReconConfig parse_method_section(const IniSection& sec, const std::string& path) {
    ReconConfig cfg;
    const std::string block = sec.name.substr(std::string("method.").size());

    // the block name doubles as the method unless an explicit key overrides it
    bool have_method = false;
    for (const IniEntry& e : sec.entries) {
        if (e.key == "method") {
            try {
                cfg.method = parse_method(e.value);
            } catch (const input_error& ex) {
                ini_fail(path, e.line, ex.what());
            }
            have_method = true;
        } else if (e.key == "iterations") {
            cfg.iterations = ini_int(e, path);
        } else if (e.key == "lambda") {
            cfg.lambda = ini_num(e, path);
        } else if (e.key == "beta") {
            cfg.beta = ini_num(e, path);
        } else if (e.key == "step_size") {
            cfg.step_size = ini_num(e, path);
        } else if (e.key == "tau") {
            cfg.tau = ini_num(e, path);
        } else if (e.key == "kappa") {
            cfg.kappa = ini_num(e, path);
        } else if (e.key == "noise_into_moments") {
            cfg.noise_into_moments = ini_bool(e, path);
        } else if (e.key == "burn_in_fraction") {
            cfg.burn_in_fraction = ini_num(e, path);
        } else if (e.key == "sample_stride") {
            cfg.sample_stride = ini_int(e, path);
        } else if (e.key == "eval_every") {
            cfg.eval_every = ini_int(e, path);
        } else if (e.key == "seed") {
            cfg.seed = ini_u64(e, path);
        } else if (e.key == "gen_channels") {
            cfg.gen_spec.base_channels = ini_int(e, path);
        } else if (e.key == "gen_depth") {
            cfg.gen_spec.depth = ini_int(e, path);
        } else if (e.key == "den_channels") {
            cfg.den_spec.base_channels = ini_int(e, path);
        } else if (e.key == "den_depth") {
            cfg.den_spec.depth = ini_int(e, path);
        } else if (e.key == "nlm_patch_radius") {
            cfg.nlm_patch_radius = ini_int(e, path);
        } else if (e.key == "nlm_search_radius") {
            cfg.nlm_search_radius = ini_int(e, path);
        } else if (e.key == "nlm_h") {
            cfg.nlm_h = ini_num(e, path);
        } else if (e.key == "classical_denoiser") {
            cfg.classical_denoiser = e.value;
        } else {
            ini_fail(path, e.line, "unknown key '" + e.key + "' in [" + sec.name + "]");
        }
    }
    if (!have_method) {
        try {
            cfg.method = parse_method(block);
        } catch (const input_error&) {
            ini_fail(path, sec.line,
                     "[" + sec.name + "] needs an explicit 'method =' (block name '" + block +
                         "' is not a method)");
        }
    }
    try {
        cfg.validate();
    } catch (const input_error& ex) {
        ini_fail(path, sec.line, std::string("[") + sec.name + "]: " + ex.what());
    }
    return cfg;
}

}  // namespace detail

// `full` selects the full-scale grid/geometry defaults (128x128 image,
// 180x180 sinogram) instead of the desk-scale ones (64x64, 96x96); explicit
// [grid]/[geometry] keys always win.
inline ExperimentConfig parse_experiment_config(const std::string& text,
                                                const std::string& path, bool full = false) {
    const IniDoc doc = parse_ini(text, path);
    ExperimentConfig cfg;
    cfg.raw_text = text;
    cfg.text_hash = fnv1a64(text);
    cfg.grid.nx = cfg.grid.ny = full ? 128 : 64;
    cfg.grid.pixel_size = 1.0;
    cfg.n_radial = cfg.n_angles = full ? 180 : 96;

    for (const IniSection& sec : doc.sections) {
        if (sec.name == "grid") {
            for (const IniEntry& e : sec.entries) {
                if (e.key == "nx")
                    cfg.grid.nx = detail::ini_int(e, path);
                else if (e.key == "ny")
                    cfg.grid.ny = detail::ini_int(e, path);
                else if (e.key == "pixel_size")
                    cfg.grid.pixel_size = detail::ini_num(e, path);
                else
                    detail::ini_fail(path, e.line, "unknown key '" + e.key + "' in [grid]");
            }
        } else if (sec.name == "geometry") {
            for (const IniEntry& e : sec.entries) {
                if (e.key == "n_radial")
                    cfg.n_radial = detail::ini_int(e, path);
                else if (e.key == "n_angles")
                    cfg.n_angles = detail::ini_int(e, path);
                else
                    detail::ini_fail(path, e.line, "unknown key '" + e.key + "' in [geometry]");
            }
        } else if (sec.name == "simulate") {
            for (const IniEntry& e : sec.entries) {
                if (e.key == "phantom")
                    cfg.phantom = e.value;
                else if (e.key == "levels")
                    cfg.levels = detail::ini_num_list(e, path);
                else if (e.key == "fraction")
                    cfg.background_fraction = detail::ini_num(e, path);
                else if (e.key == "seeds") {
                    cfg.seeds.clear();
                    for (double v : detail::ini_num_list(e, path)) {
                        if (v < 0 || v != static_cast<double>(static_cast<std::uint64_t>(v)))
                            detail::ini_fail(path, e.line, "'seeds' must be nonnegative integers");
                        cfg.seeds.push_back(static_cast<std::uint64_t>(v));
                    }
                } else
                    detail::ini_fail(path, e.line, "unknown key '" + e.key + "' in [simulate]");
            }
        } else if (sec.name.rfind("method.", 0) == 0) {
            const ReconConfig mc = detail::parse_method_section(sec, path);
            cfg.methods.emplace_back(sec.name.substr(7), mc);
        } else if (sec.name == "report") {
            for (const IniEntry& e : sec.entries) {
                if (e.key == "dir") {
                    cfg.out_dir = e.value;
                } else if (e.key == "eval_every") {
                    cfg.report_eval_every = detail::ini_int(e, path);
                    if (cfg.report_eval_every < 1)
                        detail::ini_fail(path, e.line, "eval_every must be >= 1");
                } else {
                    detail::ini_fail(path, e.line, "unknown key '" + e.key + "' in [report]");
                }
            }
        } else {
            detail::ini_fail(path, sec.line, "unknown section [" + sec.name + "]");
        }
    }

    // cross-field validation with the section line when available
    try {
        cfg.grid.validate();
    } catch (const input_error& ex) {
        throw input_error(path + ": [grid]: " + ex.what());
    }
    if (cfg.n_radial < 1 || cfg.n_angles < 1)
        throw input_error(path + ": [geometry]: n_radial and n_angles must be >= 1");
    for (double lv : cfg.levels)
        if (!(lv > 0.0)) throw input_error(path + ": [simulate]: levels must be > 0");
    if (cfg.seeds.empty()) throw input_error(path + ": [simulate]: seeds list is empty");
    try {
        make_phantom(cfg.phantom, cfg.grid);
    } catch (const std::exception&) {
        throw input_error(path + ": [simulate]: unknown phantom '" + cfg.phantom + "'");
    }
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path, bool full = false) {
    return parse_experiment_config(read_file_bytes(path), path, full);
}

}  // namespace petrec
