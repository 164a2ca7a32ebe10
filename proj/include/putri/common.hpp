#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace putri {

// Base class for all library errors. CLI maps these to exit code 2.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dimension mismatch in a matrix operation; message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Normal-equation solve failed even after ridge escalation.
struct SingularSystemError : Error {
    double final_ridge;
    SingularSystemError(const std::string& msg, double ridge)
        : Error(msg), final_ridge(ridge) {}
};

// Malformed or truncated model/corpus file.
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Token id outside the vocabulary.
struct VocabError : Error {
    using Error::Error;
};

// Requested sparsity cannot be reached even with every head removed and
// the per-layer FFN keep floor.
struct InfeasibleTargetError : Error {
    double max_achievable;
    InfeasibleTargetError(const std::string& msg, double max_achievable_)
        : Error(msg), max_achievable(max_achievable_) {}
};

// FNV-1a 64-bit, used for file/content digests in reports and tooling.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hex64(uint64_t v);

// Digest of a whole file as a 16-char hex string. Throws IoError.
std::string file_digest(const std::string& path);

std::vector<unsigned char> read_file_bytes(const std::string& path);

// Half-away-from-zero rounding to a 64-bit integer.
long long round_half_away(double x);

// Fixed 6-significant-digit float formatting used by reports and the CLI.
std::string format_g6(double v);       // %.6g, "inf"/"-inf"/"nan" spelled out
std::string format_g6_padded(double v);  // %#.6g, keeps trailing zeros

}  // namespace putri
