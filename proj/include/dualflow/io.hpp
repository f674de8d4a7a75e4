#pragma once

// File formats: P6 PPM previews, pointmap files (text header + raw
// little-endian f64), CSV emission with shortest round-trip float formatting
// so reruns produce byte-identical artifacts.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dualflow/geometry.hpp"

namespace dualflow::io {

[[noreturn]] inline void io_fail(const std::string& msg) {
    throw std::runtime_error("io: " + msg);
}

/// Shortest round-trip decimal form; the single float-to-text path for every
/// emitted artifact.
inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline void write_ppm(const std::string& path, const geom::Image& im) {
    std::ofstream f(path, std::ios::binary);
    if (!f) io_fail("cannot open " + path);
    f << "P6\n" << im.width << " " << im.height << "\n255\n";
    std::vector<unsigned char> bytes(im.rgb.size());
    for (size_t i = 0; i < im.rgb.size(); ++i) {
        const double v = std::clamp(im.rgb[i], 0.0, 1.0);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) io_fail("write failed for " + path);
}

inline void write_f64(const std::string& path, const std::string& header,
                      const std::vector<double>& values) {
    std::ofstream f(path, std::ios::binary);
    if (!f) io_fail("cannot open " + path);
    f << header << "\n";
    f.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!f) io_fail("write failed for " + path);
}

inline std::vector<double> read_f64(const std::string& path, std::string* header_out = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) io_fail("cannot open " + path);
    std::string header;
    std::getline(f, header);
    if (header_out) *header_out = header;
    const std::streampos start = f.tellg();
    f.seekg(0, std::ios::end);
    const std::streampos end = f.tellg();
    f.seekg(start);
    const size_t n = static_cast<size_t>(end - start) / sizeof(double);
    std::vector<double> values(n);
    f.read(reinterpret_cast<char*>(values.data()),
           static_cast<std::streamsize>(n * sizeof(double)));
    if (!f) io_fail("truncated read from " + path);
    return values;
}

/// Pointmaps: header "pointmap v1 <H> <W> XYZ", then H*W*3 f64 values.
inline void write_pointmap(const std::string& path, const geom::Pointmap& pm) {
    std::ostringstream h;
    h << "pointmap v1 " << pm.height << " " << pm.width << " XYZ";
    write_f64(path, h.str(), pm.xyz);
}

inline geom::Pointmap read_pointmap(const std::string& path) {
    std::string header;
    std::vector<double> values = read_f64(path, &header);
    std::istringstream is(header);
    std::string magic, version, order;
    geom::Pointmap pm;
    is >> magic >> version >> pm.height >> pm.width >> order;
    if (magic != "pointmap" || version != "v1" || order != "XYZ")
        io_fail("bad pointmap header in " + path);
    if (values.size() != static_cast<size_t>(pm.height) * pm.width * 3)
        io_fail("pointmap size mismatch in " + path);
    pm.xyz = std::move(values);
    return pm;
}

class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& columns) : f_(path) {
        if (!f_) io_fail("cannot open " + path);
        for (size_t i = 0; i < columns.size(); ++i) f_ << (i ? "," : "") << columns[i];
        f_ << "\n";
    }

    void row(const std::vector<double>& values) {
        for (size_t i = 0; i < values.size(); ++i)
            f_ << (i ? "," : "") << format_double(values[i]);
        f_ << "\n";
    }

    void close() { f_.close(); }

private:
    std::ofstream f_;
};

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) io_fail("cannot open " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) io_fail("cannot open " + path);
    f << content;
    if (!f) io_fail("write failed for " + path);
}

}  // namespace dualflow::io
