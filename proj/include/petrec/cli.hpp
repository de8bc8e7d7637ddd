#pragma once

// Command-line experiment harness: simulate scan bundles, reconstruct with
// any configured method, sweep the method x count-level x seed grid, evaluate
// images against stored ground truth, and export line profiles and joined
// convergence traces. Exit codes: 0 ok, 2 usage, 3 input data, 4 numerical.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "petrec/config.hpp"
#include "petrec/io.hpp"
#include "petrec/metrics.hpp"
#include "petrec/phantom.hpp"
#include "petrec/reconstruct.hpp"

namespace petrec {

struct CliOptions {
    std::string config_path;
    std::string out_dir;  // overrides [report] dir when set
    std::optional<std::uint64_t> seed;
    bool deterministic = false;
    bool full = false;
};

namespace climpl {

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw input_error("cannot create directory '" + dir + "': " + ec.message());
}

// worker pool width: 1 in deterministic mode, else cores capped by the
// PETREC_MAX_WORKERS environment variable
inline int worker_width(bool deterministic) {
    if (deterministic) return 1;
    int w = static_cast<int>(std::thread::hardware_concurrency());
    if (w < 1) w = 1;
    if (const char* cap = std::getenv("PETREC_MAX_WORKERS")) {
        char* end = nullptr;
        const long v = std::strtol(cap, &end, 10);
        if (end == cap || *end != '\0' || v < 1)
            throw usage_error("PETREC_MAX_WORKERS must be a positive integer, got '" +
                              std::string(cap) + "'");
        w = std::min<long>(w, v);
    }
    return w;
}

inline std::optional<ExperimentConfig> maybe_config(const CliOptions& opt) {
    if (opt.config_path.empty()) return std::nullopt;
    return load_experiment_config(opt.config_path, opt.full);
}

inline ExperimentConfig need_config(const CliOptions& opt, const char* cmd) {
    if (opt.config_path.empty())
        throw usage_error(std::string(cmd) + " requires --config");
    return load_experiment_config(opt.config_path, opt.full);
}

inline std::string out_root(const CliOptions& opt, const std::optional<ExperimentConfig>& cfg) {
    if (!opt.out_dir.empty()) return opt.out_dir;
    if (cfg) return cfg->out_dir;
    return "out";
}

inline std::string bundle_dir_name(const std::string& phantom, double level,
                                   std::uint64_t seed) {
    return phantom + "_" + fmt_g17(level) + "_s" + std::to_string(seed);
}

// the method's run settings: a config block by name, or a bare built-in
// method name with defaults; anything else is a usage error (exit 2)
inline ReconConfig resolve_method_config(const std::optional<ExperimentConfig>& cfg,
                                         const std::string& name) {
    if (cfg)
        if (const ReconConfig* m = cfg->find_method(name)) return *m;
    try {
        ReconConfig rc;
        rc.method = parse_method(name);
        return rc;
    } catch (const input_error&) {
        std::string known;
        if (cfg)
            for (const auto& m : cfg->methods) known += (known.empty() ? "" : ", ") + m.first;
        throw usage_error("unknown method '" + name + "'" +
                          (known.empty() ? "" : " (config defines: " + known + ")"));
    }
}

// keep every eval_every-th row plus the final one; the deep-prior drivers
// already sample their traces, the classical ones record every iteration
inline void thin_rows(RunReport& rep, int eval_every) {
    if (eval_every <= 1 || rep.rows.size() < 2) return;
    std::vector<EvalRow> kept;
    for (std::size_t i = 0; i < rep.rows.size(); ++i)
        if (rep.rows[i].iteration % eval_every == 0 || i + 1 == rep.rows.size())
            kept.push_back(rep.rows[i]);
    rep.rows = std::move(kept);
}

inline RunResult run_method(const ReconConfig& mc, const NoisySinogramBundle& bundle,
                            const ScanGeometry& geom, const ImageGrid& grid,
                            const Image* ground_truth, const std::string& dump_dir) {
    switch (mc.method) {
        case Method::em: {
            Projector proj(grid, geom);
            RunResult r = em_reconstruct(bundle, proj, mc.iterations, nullptr, ground_truth);
            thin_rows(r.report, mc.eval_every);
            return r;
        }
        case Method::tv: {
            Projector proj(grid, geom);
            RunResult r = tv_reconstruct(bundle, proj, mc.beta, mc.iterations, ground_truth);
            thin_rows(r.report, mc.eval_every);
            return r;
        }
        case Method::nlm: {
            Projector proj(grid, geom);
            RunResult r = nlm_reconstruct(bundle, proj, mc, ground_truth);
            thin_rows(r.report, mc.eval_every);
            return r;
        }
        default: {
            ReconConfig dc = mc;
            if (ground_truth) dc.ground_truth = *ground_truth;
            dc.dump_dir = dump_dir;
            return deepred_run(dc, bundle, geom, grid);
        }
    }
}

// every artifact directory gets the image (f32 + png preview), the trace CSV,
// and a summary embedding the resolved settings and input content hashes
inline void write_run_artifacts(const std::string& dir, const RunResult& r,
                                bool deterministic,
                                const std::vector<std::pair<std::string, std::string>>& prov) {
    ensure_dir(dir);
    save_image(r.image, dir + "/image.f32");
    write_png16(r.image, dir + "/image.png");
    write_report_csv(r.report, dir + "/trace.csv");
    std::string summary = report_summary(r.report, !deterministic);
    for (const auto& kv : prov) summary += kv.first + ": " + kv.second + "\n";
    write_file_bytes(dir + "/summary.txt", summary);
}

// --- simulate ----------------------------------------------------------------

inline int cmd_simulate(const CliOptions& opt) {
    ExperimentConfig cfg = need_config(opt, "simulate");
    if (cfg.levels.empty())
        throw input_error(opt.config_path + ": [simulate] must list at least one level");
    std::vector<std::uint64_t> seeds = opt.seed ? std::vector<std::uint64_t>{*opt.seed}
                                                : cfg.seeds;

    const Phantom ph = make_phantom(cfg.phantom, cfg.grid);
    const ScanGeometry geom = make_parallel_geometry(cfg.n_radial, cfg.n_angles, cfg.grid);
    const Projector proj(cfg.grid, geom);
    const std::string root = out_root(opt, cfg) + "/bundles";

    for (double level : cfg.levels) {
        for (std::uint64_t seed : seeds) {
            NoisySinogramBundle b =
                simulate_scan(ph, proj, CountLevel{level}, cfg.background_fraction, seed);
            const std::string dir = root + "/" + bundle_dir_name(cfg.phantom, level, seed);
            save_bundle(b, dir,
                        {{"phantom", cfg.phantom},
                         {"level", fmt_g17(level)},
                         {"fraction", fmt_g17(cfg.background_fraction)},
                         {"config_hash", hex64(cfg.text_hash)}});
            std::cout << "wrote " << dir << "\n";
        }
    }
    std::cout << "simulated " << cfg.levels.size() * seeds.size() << " bundle(s)\n";
    return 0;
}

// --- reconstruct -------------------------------------------------------------

inline int cmd_reconstruct(const CliOptions& opt, const std::string& method_name,
                           const std::string& bundle_dir) {
    std::optional<ExperimentConfig> cfg = maybe_config(opt);
    ReconConfig mc = resolve_method_config(cfg, method_name);
    if (cfg && cfg->report_eval_every > 0) mc.eval_every = cfg->report_eval_every;
    if (opt.seed) mc.seed = *opt.seed;

    NoisySinogramBundle bundle = load_bundle(bundle_dir);
    const ImageGrid grid = bundle.scaled_truth.grid;
    const ScanGeometry geom = bundle.y.geometry;

    const std::string dir = out_root(opt, cfg) + "/" + method_name;
    ensure_dir(dir);
    RunResult r = run_method(mc, bundle, geom, grid, &bundle.scaled_truth, dir);

    std::vector<std::pair<std::string, std::string>> prov = {
        {"bundle", bundle_dir},
        {"bundle_manifest_hash", hex64(file_fnv1a64(bundle_dir + "/manifest.txt"))}};
    if (cfg) prov.emplace_back("config_hash", hex64(cfg->text_hash));
    write_run_artifacts(dir, r, opt.deterministic, prov);

    std::cout << report_summary(r.report, !opt.deterministic);
    std::cout << "artifacts: " << dir << "\n";
    return 0;
}

// --- sweep -------------------------------------------------------------------

struct SweepCell {
    std::string method;
    double level = 0.0;
    std::uint64_t seed = 0;
    ReconConfig config;
    // results
    bool ok = false;
    double psnr = 0.0, ssim = 0.0, wall = 0.0;
    std::string error;
};

inline int cmd_sweep(const CliOptions& opt) {
    ExperimentConfig cfg = need_config(opt, "sweep");
    if (cfg.methods.empty())
        throw input_error(opt.config_path + ": sweep needs at least one [method.*] block");
    if (cfg.levels.empty())
        throw input_error(opt.config_path + ": sweep needs [simulate] levels");
    const std::vector<std::uint64_t> seeds =
        opt.seed ? std::vector<std::uint64_t>{*opt.seed} : cfg.seeds;

    const std::string root = out_root(opt, cfg) + "/sweep";
    ensure_dir(root);

    std::vector<SweepCell> cells;
    for (const auto& m : cfg.methods)
        for (double level : cfg.levels)
            for (std::uint64_t seed : seeds) {
                SweepCell c;
                c.method = m.first;
                c.level = level;
                c.seed = seed;
                c.config = m.second;
                if (cfg.report_eval_every > 0) c.config.eval_every = cfg.report_eval_every;
                c.config.seed = seed;
                cells.push_back(std::move(c));
            }

    const Phantom ph = make_phantom(cfg.phantom, cfg.grid);
    const ScanGeometry geom = make_parallel_geometry(cfg.n_radial, cfg.n_angles, cfg.grid);

    std::atomic<std::size_t> next{0};
    std::mutex io_mutex;
    auto work = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            SweepCell& c = cells[i];
            const std::string dir =
                root + "/" + c.method + "_" + fmt_g17(c.level) + "_s" + std::to_string(c.seed);
            try {
                // each cell simulates its own bundle: fully isolated, and
                // identical (level, seed) cells see identical data
                ensure_dir(dir);  // deep methods checkpoint into it mid-run
                Projector proj(cfg.grid, geom);
                NoisySinogramBundle bundle = simulate_scan(
                    ph, proj, CountLevel{c.level}, cfg.background_fraction, c.seed);
                RunResult r =
                    run_method(c.config, bundle, geom, cfg.grid, &bundle.scaled_truth, dir);
                const MetricResult m = evaluate_metrics(bundle.scaled_truth, r.image);
                write_run_artifacts(dir, r, opt.deterministic,
                                    {{"level", fmt_g17(c.level)},
                                     {"seed", std::to_string(c.seed)},
                                     {"config_hash", hex64(cfg.text_hash)}});
                c.psnr = m.psnr_db;
                c.ssim = m.ssim;
                c.wall = r.report.wall_seconds;
                c.ok = true;
            } catch (const std::exception& e) {
                c.ok = false;
                std::string msg = e.what();
                for (char& ch : msg)
                    if (ch == ',' || ch == '\n') ch = ' ';
                c.error = msg;
            }
            std::lock_guard<std::mutex> lock(io_mutex);
            std::cout << "[" << (i + 1) << "/" << cells.size() << "] " << c.method << " level "
                      << fmt_g17(c.level) << " seed " << c.seed << ": "
                      << (c.ok ? "ok" : ("FAILED: " + c.error)) << "\n";
        }
    };

    const int width = worker_width(opt.deterministic);
    if (width <= 1 || cells.size() <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < width && t < static_cast<int>(cells.size()); ++t)
            pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }

    // data rows in config order, then one aggregate row per method
    std::string csv = "method,level,seed,psnr,ssim,runtime_seconds,status\n";
    for (const SweepCell& c : cells) {
        csv += c.method + "," + fmt_g17(c.level) + "," + std::to_string(c.seed) + ",";
        if (c.ok) {
            csv += fmt_g17(c.psnr) + "," + fmt_g17(c.ssim) + "," +
                   (opt.deterministic ? "na" : fmt_g17(c.wall)) + ",ok\n";
        } else {
            csv += "na,na,na,error: " + c.error + "\n";
        }
    }
    for (const auto& m : cfg.methods) {
        KahanSum psum, ssum;
        int n = 0;
        for (const SweepCell& c : cells)
            if (c.method == m.first && c.ok) {
                psum.add(c.psnr);
                ssum.add(c.ssim);
                ++n;
            }
        csv += m.first + ",all,mean,";
        if (n > 0)
            csv += fmt_g17(psum.value() / n) + "," + fmt_g17(ssum.value() / n);
        else
            csv += "na,na";
        csv += ",na,aggregate(n=" + std::to_string(n) + ")\n";
    }
    write_file_bytes(root + "/sweep.csv", csv);
    std::cout << "sweep table: " << root << "/sweep.csv\n";
    return 0;
}

// --- evaluate ----------------------------------------------------------------

inline int cmd_evaluate(const CliOptions& opt, const std::string& bundle_dir,
                        const std::string& image_path) {
    NoisySinogramBundle bundle = load_bundle(bundle_dir);  // checksum-verified
    Image img = load_image(image_path);
    if (!(img.grid == bundle.scaled_truth.grid))
        throw input_error("image grid does not match the bundle's ground truth");
    const MetricResult m = evaluate_metrics(bundle.scaled_truth, img);
    std::cout << "psnr_db: " << fmt_g17(m.psnr_db) << "\n";
    std::cout << "ssim: " << fmt_g17(m.ssim) << "\n";
    if (!opt.out_dir.empty()) {
        ensure_dir(opt.out_dir);
        write_file_bytes(opt.out_dir + "/evaluate.csv",
                         "image,psnr_db,ssim\n" + image_path + "," + fmt_g17(m.psnr_db) + "," +
                             fmt_g17(m.ssim) + "\n");
    }
    return 0;
}

// --- profile -----------------------------------------------------------------

inline std::string file_stem(const std::string& path) {
    return std::filesystem::path(path).stem().string();
}

inline int cmd_profile(const CliOptions& opt, const std::vector<std::string>& image_paths,
                       int row) {
    if (image_paths.empty()) throw usage_error("profile requires at least one --image");
    std::vector<Image> images;
    for (const std::string& p : image_paths) images.push_back(load_image(p));
    for (const Image& im : images)
        if (!(im.grid == images[0].grid))
            throw input_error("profile images have mismatched grids");
    const int nx = images[0].grid.nx, ny = images[0].grid.ny;
    if (row < 0) row = ny / 2;  // default: central row
    if (row >= ny) throw input_error("profile row " + std::to_string(row) +
                                     " out of range for ny=" + std::to_string(ny));

    std::string csv = "x";
    for (const std::string& p : image_paths) csv += "," + file_stem(p);
    csv += "\n";
    for (int ix = 0; ix < nx; ++ix) {
        csv += std::to_string(ix);
        for (const Image& im : images) csv += "," + fmt_g17(im.at(ix, row));
        csv += "\n";
    }
    if (!opt.out_dir.empty()) {
        ensure_dir(opt.out_dir);
        write_file_bytes(opt.out_dir + "/profile.csv", csv);
        std::cout << "profile: " << opt.out_dir << "/profile.csv\n";
    } else {
        std::cout << csv;
    }
    return 0;
}

// --- trace-plot --------------------------------------------------------------

struct TraceSeries {
    std::string name;
    // iteration -> psnr exactly as printed in the source CSV
    std::vector<std::pair<std::int64_t, std::string>> rows;
};

inline TraceSeries load_trace(const std::string& spec) {
    TraceSeries ts;
    std::string path = spec;
    const std::size_t eq = spec.find('=');
    if (eq != std::string::npos) {
        ts.name = spec.substr(0, eq);
        path = spec.substr(eq + 1);
    } else {
        // unnamed: use the parent directory (the per-method artifact dir)
        const auto parent = std::filesystem::path(path).parent_path().filename().string();
        ts.name = parent.empty() ? file_stem(path) : parent;
    }

    std::istringstream in(read_file_bytes(path));
    std::string header;
    if (!std::getline(in, header))
        throw input_error("'" + path + "': empty trace file");
    // locate the iteration and psnr columns
    std::vector<std::string> cols;
    std::istringstream hs(header);
    std::string col;
    while (std::getline(hs, col, ',')) cols.push_back(col);
    std::size_t it_col = cols.size(), psnr_col = cols.size();
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (cols[i] == "iteration") it_col = i;
        if (cols[i] == "psnr") psnr_col = i;
    }
    if (it_col == cols.size() || psnr_col == cols.size())
        throw input_error("'" + path + "': not a trace CSV (needs iteration and psnr columns)");

    std::string line;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::istringstream ls(line);
        std::string f;
        while (std::getline(ls, f, ',')) fields.push_back(f);
        if (fields.size() != cols.size())
            throw input_error("'" + path + "':" + std::to_string(lineno) +
                              ": wrong column count");
        try {
            ts.rows.emplace_back(std::stoll(fields[it_col]), fields[psnr_col]);
        } catch (const std::exception&) {
            throw input_error("'" + path + "':" + std::to_string(lineno) +
                              ": bad iteration '" + fields[it_col] + "'");
        }
    }
    return ts;
}

inline Image render_trace_plot(const std::vector<TraceSeries>& series) {
    const int W = 480, H = 320, margin = 10;
    ImageGrid g;
    g.nx = W;
    g.ny = H;
    g.pixel_size = 1.0;
    Image canvas = Image::zeros(g);
    for (double& v : canvas.values) v = 1.0;  // white

    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const TraceSeries& ts : series)
        for (const auto& row : ts.rows) {
            if (row.second == "na") continue;
            const double y = std::strtod(row.second.c_str(), nullptr);
            if (!std::isfinite(y)) continue;
            x0 = std::min(x0, static_cast<double>(row.first));
            x1 = std::max(x1, static_cast<double>(row.first));
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    if (x1 < x0) throw input_error("trace-plot: no finite psnr values to plot");
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;

    // frame
    for (int x = margin; x < W - margin; ++x) {
        canvas.at(x, margin) = 0.0;
        canvas.at(x, H - 1 - margin) = 0.0;
    }
    for (int y = margin; y < H - margin; ++y) {
        canvas.at(margin, y) = 0.0;
        canvas.at(W - 1 - margin, y) = 0.0;
    }

    auto px = [&](double it) {
        return margin + 1 +
               (it - x0) / (x1 - x0) * static_cast<double>(W - 2 * margin - 3);
    };
    auto py = [&](double v) {
        return H - 1 - margin - 1 -
               (v - y0) / (y1 - y0) * static_cast<double>(H - 2 * margin - 3);
    };

    for (std::size_t k = 0; k < series.size(); ++k) {
        const double shade = series.size() == 1
                                 ? 0.0
                                 : 0.6 * static_cast<double>(k) /
                                       static_cast<double>(series.size() - 1);
        double prev_x = 0, prev_y = 0;
        bool have_prev = false;
        for (const auto& row : series[k].rows) {
            if (row.second == "na") continue;
            const double v = std::strtod(row.second.c_str(), nullptr);
            if (!std::isfinite(v)) continue;
            const double cx = px(static_cast<double>(row.first)), cy = py(v);
            if (have_prev) {
                const int steps =
                    1 + static_cast<int>(std::max(std::abs(cx - prev_x), std::abs(cy - prev_y)));
                for (int s = 0; s <= steps; ++s) {
                    const double t = static_cast<double>(s) / steps;
                    const int ix = static_cast<int>(prev_x + t * (cx - prev_x) + 0.5);
                    const int iy = static_cast<int>(prev_y + t * (cy - prev_y) + 0.5);
                    if (ix >= 0 && ix < W && iy >= 0 && iy < H) canvas.at(ix, iy) = shade;
                }
            }
            prev_x = cx;
            prev_y = cy;
            have_prev = true;
        }
    }
    return canvas;
}

inline int cmd_trace_plot(const CliOptions& opt, const std::vector<std::string>& trace_specs,
                          const std::string& plot_path) {
    if (trace_specs.empty()) throw usage_error("trace-plot requires at least one --trace");
    std::vector<TraceSeries> series;
    for (const std::string& s : trace_specs) series.push_back(load_trace(s));

    // union of iterations, ascending; psnr strings copied verbatim
    std::map<std::int64_t, std::vector<std::string>> joined;
    for (std::size_t k = 0; k < series.size(); ++k)
        for (const auto& row : series[k].rows) {
            auto& slot = joined[row.first];
            slot.resize(series.size(), "na");
            slot[k] = row.second;
        }

    std::string csv = "iteration";
    for (const TraceSeries& ts : series) csv += "," + ts.name;
    csv += "\n";
    for (auto& [it, vals] : joined) {
        vals.resize(series.size(), "na");
        csv += std::to_string(it);
        for (const std::string& v : vals) csv += "," + v;
        csv += "\n";
    }

    if (!opt.out_dir.empty()) {
        ensure_dir(opt.out_dir);
        write_file_bytes(opt.out_dir + "/trace_plot.csv", csv);
        std::cout << "trace table: " << opt.out_dir << "/trace_plot.csv\n";
    } else {
        std::cout << csv;
    }
    if (!plot_path.empty()) write_png16(render_trace_plot(series), plot_path);
    return 0;
}

}  // namespace climpl

inline int cli_main(int argc, const char* const* argv) {
    CLI::App app{"petrec: 2-D emission tomography reconstruction workbench"};
    app.fallthrough(true);

    CliOptions opt;
    app.add_option("--config", opt.config_path, "experiment config file (INI)");
    app.add_option("--out", opt.out_dir, "output directory (overrides [report] dir)");
    std::uint64_t seed_value = 0;
    CLI::Option* seed_opt =
        app.add_option("--seed", seed_value, "override the config seed(s)");
    app.add_flag("--deterministic", opt.deterministic,
                 "single worker, no wall-clock in outputs: byte-reproducible runs");
    app.add_flag("--full", opt.full,
                 "full-scale defaults (128x128 image, 180x180 sinogram) instead of desk scale");

    CLI::App* sim = app.add_subcommand("simulate", "simulate scan bundles from the config");

    CLI::App* rec = app.add_subcommand("reconstruct", "run one method on one bundle");
    std::string method_name, bundle_dir, image_path;
    rec->add_option("--method", method_name, "method name or [method.*] block")->required();
    rec->add_option("--bundle", bundle_dir, "bundle directory from `simulate`")->required();

    CLI::App* swp = app.add_subcommand("sweep", "run the method x level x seed grid");

    CLI::App* eva = app.add_subcommand("evaluate", "PSNR/SSIM of an image vs bundle truth");
    eva->add_option("--bundle", bundle_dir, "bundle directory")->required();
    eva->add_option("--image", image_path, "reconstructed image (.f32)")->required();

    CLI::App* pro = app.add_subcommand("profile", "export a line profile across images");
    std::vector<std::string> image_paths;
    int profile_row = -1;
    pro->add_option("--image", image_paths, "image file (repeatable)")->required();
    pro->add_option("--row", profile_row, "image row to cut (default: center)");

    CLI::App* tpl = app.add_subcommand("trace-plot", "join trace CSVs into one PSNR table");
    std::vector<std::string> trace_specs;
    std::string plot_path;
    tpl->add_option("--trace", trace_specs, "trace.csv path or name=path (repeatable)")
        ->required();
    tpl->add_option("--plot", plot_path, "also render a PNG line plot to this path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    if (seed_opt->count() > 0) opt.seed = seed_value;

    try {
        if (sim->parsed()) return climpl::cmd_simulate(opt);
        if (rec->parsed()) return climpl::cmd_reconstruct(opt, method_name, bundle_dir);
        if (swp->parsed()) return climpl::cmd_sweep(opt);
        if (eva->parsed()) return climpl::cmd_evaluate(opt, bundle_dir, image_path);
        if (pro->parsed()) return climpl::cmd_profile(opt, image_paths, profile_row);
        if (tpl->parsed()) return climpl::cmd_trace_plot(opt, trace_specs, plot_path);
        std::cerr << app.help();
        return 2;
    } catch (const usage_error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const input_error& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 3;
    } catch (const numeric_error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "internal failure: " << e.what() << "\n";
        return 4;
    }
}

}  // namespace petrec
