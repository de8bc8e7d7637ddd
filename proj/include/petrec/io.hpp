#pragma once

// On-disk formats. Arrays are raw little-endian float32 with a line-based
// text ".meta" sidecar carrying the geometry; a simulated scan is a directory
// of such files plus a checksummed manifest; previews are 16-bit grayscale
// PNG. Everything written here is byte-reproducible for identical inputs.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "petrec/common.hpp"
#include "petrec/geometry.hpp"
#include "petrec/simulation.hpp"

namespace petrec {

// --- raw bytes ---------------------------------------------------------------

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw input_error("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << f.rdbuf();
    if (f.bad()) throw input_error("read failure on '" + path + "'");
    return ss.str();
}

inline void write_file_bytes(const std::string& path, const std::string& data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw input_error("cannot open '" + path + "' for writing");
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!f) throw input_error("short write to '" + path + "'");
}

inline std::uint64_t file_fnv1a64(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    return fnv1a64(bytes.data(), bytes.size());
}

// --- float32 arrays ----------------------------------------------------------

inline void write_f32(const std::string& path, const std::vector<double>& v) {
    std::string buf(v.size() * 4, '\0');
    for (std::size_t i = 0; i < v.size(); ++i) {
        const float x = static_cast<float>(v[i]);
        std::uint32_t u;
        std::memcpy(&u, &x, 4);
        buf[4 * i + 0] = static_cast<char>(u & 0xff);
        buf[4 * i + 1] = static_cast<char>((u >> 8) & 0xff);
        buf[4 * i + 2] = static_cast<char>((u >> 16) & 0xff);
        buf[4 * i + 3] = static_cast<char>((u >> 24) & 0xff);
    }
    write_file_bytes(path, buf);
}

inline std::vector<double> read_f32(const std::string& path) {
    const std::string buf = read_file_bytes(path);
    if (buf.size() % 4 != 0)
        throw input_error("'" + path + "' is not a float32 array (size " +
                          std::to_string(buf.size()) + " bytes)");
    std::vector<double> v(buf.size() / 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::uint32_t u = (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[4 * i])) |
                           (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[4 * i + 1]))
                            << 8) |
                           (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[4 * i + 2]))
                            << 16) |
                           (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[4 * i + 3]))
                            << 24));
        float x;
        std::memcpy(&x, &u, 4);
        v[i] = static_cast<double>(x);
    }
    return v;
}

// --- meta sidecars -----------------------------------------------------------

namespace detail {

// "key value" per line; first line is a magic "petrec-<kind> v1" header.
struct MetaDoc {
    std::string magic;
    std::vector<std::pair<std::string, std::string>> kv;

    const std::string& get(const std::string& key, const std::string& path) const {
        for (const auto& p : kv)
            if (p.first == key) return p.second;
        throw input_error("'" + path + "': missing field '" + key + "'");
    }
    double get_num(const std::string& key, const std::string& path) const {
        const std::string& s = get(key, path);
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw input_error("'" + path + "': field '" + key + "' is not a number: '" + s +
                              "'");
        }
    }
};

inline MetaDoc read_meta(const std::string& path, const std::string& expect_magic) {
    std::istringstream in(read_file_bytes(path));
    MetaDoc doc;
    if (!std::getline(in, doc.magic) || doc.magic != expect_magic)
        throw input_error("'" + path + "': expected header '" + expect_magic + "', got '" +
                          doc.magic + "'");
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const std::size_t sp = line.find(' ');
        if (sp == std::string::npos)
            throw input_error("'" + path + "': malformed line '" + line + "'");
        doc.kv.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return doc;
}

}  // namespace detail

// --- images ------------------------------------------------------------------

inline void save_image(const Image& img, const std::string& path) {
    img.grid.validate();
    write_f32(path, img.values);
    std::string meta = "petrec-image v1\n";
    meta += "nx " + std::to_string(img.grid.nx) + "\n";
    meta += "ny " + std::to_string(img.grid.ny) + "\n";
    meta += "pixel_size " + fmt_g17(img.grid.pixel_size) + "\n";
    meta += "origin_x " + fmt_g17(img.grid.origin_x) + "\n";
    meta += "origin_y " + fmt_g17(img.grid.origin_y) + "\n";
    write_file_bytes(path + ".meta", meta);
}

inline Image load_image(const std::string& path) {
    const detail::MetaDoc m = detail::read_meta(path + ".meta", "petrec-image v1");
    ImageGrid g;
    g.nx = static_cast<int>(m.get_num("nx", path));
    g.ny = static_cast<int>(m.get_num("ny", path));
    g.pixel_size = m.get_num("pixel_size", path);
    g.origin_x = m.get_num("origin_x", path);
    g.origin_y = m.get_num("origin_y", path);
    g.validate();
    Image img{g, read_f32(path)};
    if (img.values.size() != static_cast<std::size_t>(g.num_pixels()))
        throw input_error("'" + path + "': data has " + std::to_string(img.values.size()) +
                          " samples, meta declares " + std::to_string(g.num_pixels()));
    return img;
}

// --- sinograms ---------------------------------------------------------------

inline void save_sinogram(const Sinogram& s, const std::string& path) {
    s.geometry.validate();
    write_f32(path, s.values);
    std::string meta = "petrec-sinogram v1\n";
    meta += "n_radial " + std::to_string(s.geometry.n_radial) + "\n";
    meta += "radial_spacing " + fmt_g17(s.geometry.radial_spacing) + "\n";
    meta += "n_angles " + std::to_string(s.geometry.n_angles()) + "\n";
    meta += "angles";
    for (double a : s.geometry.angles) meta += " " + fmt_g17(a);
    meta += "\n";
    write_file_bytes(path + ".meta", meta);
}

inline Sinogram load_sinogram(const std::string& path) {
    const detail::MetaDoc m = detail::read_meta(path + ".meta", "petrec-sinogram v1");
    ScanGeometry g;
    g.n_radial = static_cast<int>(m.get_num("n_radial", path));
    g.radial_spacing = m.get_num("radial_spacing", path);
    const int n_angles = static_cast<int>(m.get_num("n_angles", path));
    std::istringstream as(m.get("angles", path));
    double a;
    while (as >> a) g.angles.push_back(a);
    if (static_cast<int>(g.angles.size()) != n_angles)
        throw input_error("'" + path + "': angle list length " +
                          std::to_string(g.angles.size()) + " does not match n_angles " +
                          std::to_string(n_angles));
    g.validate();
    Sinogram s{g, read_f32(path)};
    if (s.values.size() != static_cast<std::size_t>(g.num_lors()))
        throw input_error("'" + path + "': data has " + std::to_string(s.values.size()) +
                          " samples, meta declares " + std::to_string(g.num_lors()));
    return s;
}

// --- scan bundles ------------------------------------------------------------

// Directory layout: y/randoms/scatter/noise_free sinograms, truth image, and
// manifest.txt checksumming every file. The manifest is the integrity root:
// loading re-hashes each file and refuses tampered data. `extra` key-value
// lines record provenance (phantom, level, config hash) in the manifest.
inline void save_bundle(
    const NoisySinogramBundle& b, const std::string& dir,
    const std::vector<std::pair<std::string, std::string>>& extra = {}) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw input_error("cannot create directory '" + dir + "': " + ec.message());

    save_sinogram(b.y, dir + "/y.f32");
    save_sinogram(b.randoms, dir + "/randoms.f32");
    save_sinogram(b.scatter, dir + "/scatter.f32");
    save_sinogram(b.noise_free, dir + "/noise_free.f32");
    save_image(b.scaled_truth, dir + "/truth.f32");

    std::string man = "petrec-bundle v1\n";
    man += "seed " + std::to_string(b.seed) + "\n";
    man += "scale_factor " + fmt_g17(b.scale_factor) + "\n";
    for (const auto& kv : extra) {
        if (kv.first == "file" || kv.first == "seed" || kv.first == "scale_factor")
            throw input_error("bundle manifest: reserved key '" + kv.first + "'");
        man += kv.first + " " + kv.second + "\n";
    }
    static const char* kFiles[] = {"y.f32",          "y.f32.meta",
                                   "randoms.f32",    "randoms.f32.meta",
                                   "scatter.f32",    "scatter.f32.meta",
                                   "noise_free.f32", "noise_free.f32.meta",
                                   "truth.f32",      "truth.f32.meta"};
    for (const char* f : kFiles)
        man += "file " + std::string(f) + " " + hex64(file_fnv1a64(dir + "/" + f)) + "\n";
    write_file_bytes(dir + "/manifest.txt", man);
}

inline NoisySinogramBundle load_bundle(const std::string& dir, bool verify = true) {
    const std::string man_path = dir + "/manifest.txt";
    const detail::MetaDoc man = detail::read_meta(man_path, "petrec-bundle v1");

    if (verify) {
        bool any_file = false;
        for (const auto& kv : man.kv) {
            if (kv.first != "file") continue;
            any_file = true;
            const std::size_t sp = kv.second.rfind(' ');
            if (sp == std::string::npos)
                throw input_error("'" + man_path + "': malformed file entry '" + kv.second +
                                  "'");
            const std::string name = kv.second.substr(0, sp);
            const std::string want = kv.second.substr(sp + 1);
            const std::string got = hex64(file_fnv1a64(dir + "/" + name));
            if (got != want)
                throw input_error("checksum mismatch for '" + name + "' in '" + dir +
                                  "': manifest says " + want + ", file hashes to " + got);
        }
        if (!any_file) throw input_error("'" + man_path + "': no file entries");
    }

    NoisySinogramBundle b;
    b.y = load_sinogram(dir + "/y.f32");
    b.randoms = load_sinogram(dir + "/randoms.f32");
    b.scatter = load_sinogram(dir + "/scatter.f32");
    b.noise_free = load_sinogram(dir + "/noise_free.f32");
    b.scaled_truth = load_image(dir + "/truth.f32");
    b.seed = static_cast<std::uint64_t>(man.get_num("seed", man_path));
    b.scale_factor = man.get_num("scale_factor", man_path);
    if (!(b.randoms.geometry == b.y.geometry) || !(b.scatter.geometry == b.y.geometry) ||
        !(b.noise_free.geometry == b.y.geometry))
        throw input_error("'" + dir + "': sinogram geometries disagree");
    return b;
}

// --- 16-bit grayscale PNG ----------------------------------------------------

namespace detail {

inline void be32(std::string& s, std::uint32_t v) {
    s += static_cast<char>((v >> 24) & 0xff);
    s += static_cast<char>((v >> 16) & 0xff);
    s += static_cast<char>((v >> 8) & 0xff);
    s += static_cast<char>(v & 0xff);
}

inline void png_chunk(std::string& out, const char type[4], const std::string& data) {
    be32(out, static_cast<std::uint32_t>(data.size()));
    std::string td(type, 4);
    td += data;
    out += td;
    const auto crc =
        crc32(0L, reinterpret_cast<const Bytef*>(td.data()), static_cast<uInt>(td.size()));
    be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

// Min-max scaled preview; a constant image maps to black. Row 0 of the image
// is the top PNG row.
inline void write_png16(const Image& img, const std::string& path) {
    img.grid.validate();
    double lo = img.values[0], hi = img.values[0];
    for (double v : img.values) {
        if (!std::isfinite(v)) throw input_error("png: non-finite pixel value");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi > lo ? hi - lo : 1.0;

    const int nx = img.grid.nx, ny = img.grid.ny;
    std::string raw;
    raw.reserve(static_cast<std::size_t>(ny) * (1 + 2 * static_cast<std::size_t>(nx)));
    for (int iy = 0; iy < ny; ++iy) {
        raw += '\0';  // filter type 0 (None)
        for (int ix = 0; ix < nx; ++ix) {
            const double t = (img.at(ix, iy) - lo) / span;
            const auto u = static_cast<std::uint32_t>(t * 65535.0 + 0.5);
            raw += static_cast<char>((u >> 8) & 0xff);
            raw += static_cast<char>(u & 0xff);
        }
    }

    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::string comp(comp_len, '\0');
    if (compress2(reinterpret_cast<Bytef*>(comp.data()), &comp_len,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                  9) != Z_OK)
        throw numeric_error("png: deflate failed");
    comp.resize(comp_len);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    detail::be32(ihdr, static_cast<std::uint32_t>(nx));
    detail::be32(ihdr, static_cast<std::uint32_t>(ny));
    ihdr += static_cast<char>(16);  // bit depth
    ihdr += '\0';                   // color type 0: grayscale
    ihdr += '\0';                   // compression
    ihdr += '\0';                   // filter method
    ihdr += '\0';                   // no interlace
    detail::png_chunk(out, "IHDR", ihdr);
    detail::png_chunk(out, "IDAT", comp);
    detail::png_chunk(out, "IEND", "");
    write_file_bytes(path, out);
}

}  // namespace petrec
