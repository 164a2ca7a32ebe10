#include "putri/common.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace putri {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open file: " + path);
    f.seekg(0, std::ios::end);
    std::streamoff n = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<unsigned char> bytes(static_cast<size_t>(n));
    if (n > 0) f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) throw IoError("failed reading file: " + path);
    return bytes;
}

std::string file_digest(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

long long round_half_away(double x) {
    // std::round rounds halves away from zero, which is the convention the
    // budget equations use everywhere.
    return static_cast<long long>(std::llround(x));
}

std::string format_g6(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return std::string(buf);
}

std::string format_g6_padded(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%#.6g", v);
    return std::string(buf);
}

}  // namespace putri
