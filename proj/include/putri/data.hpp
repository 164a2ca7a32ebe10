#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace putri {

// Byte-level vocabulary: 256 byte values plus BOS/EOS/PAD.
namespace tokens {
constexpr int32_t BOS = 256;
constexpr int32_t EOS = 257;
constexpr int32_t PAD = 258;
constexpr int32_t BYTE_VOCAB = 259;
}  // namespace tokens

// [BOS] ++ raw bytes ++ [EOS]. Injective on the byte content.
std::vector<int32_t> tokenize_bytes(std::string_view text);

// Fixed-length token sequences for scoring, reconstruction and perplexity.
struct CalibrationSet {
    std::vector<std::vector<int32_t>> sequences;  // each exactly seq_len
    int seq_len = 0;
    std::string source_digest;      // FNV-1a of the raw file bytes
    std::vector<int64_t> offsets;   // window start per sequence, for provenance
};

// Reads a token stream from a file: UTF-8 text is byte-tokenized; a `.tok`
// extension selects raw little-endian u32 ids (validated against
// vocab_size).
std::vector<int32_t> load_token_stream(const std::string& path, int vocab_size);

// Cuts n_sequences windows of seq_len tokens at PRNG-seeded offsets.
// Streams no longer than one window are taken at offset 0 and padded with
// PAD (rejected if allow_pad is false).
CalibrationSet load_corpus(const std::string& path, int seq_len, int n_sequences, uint64_t seed,
                           int vocab_size = tokens::BYTE_VOCAB, bool allow_pad = true);

}  // namespace putri
