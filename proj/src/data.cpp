#include "putri/data.hpp"

#include <algorithm>

#include "putri/common.hpp"
#include "putri/rng.hpp"

namespace putri {

std::vector<int32_t> tokenize_bytes(std::string_view text) {
    std::vector<int32_t> ids;
    ids.reserve(text.size() + 2);
    ids.push_back(tokens::BOS);
    for (unsigned char c : text) ids.push_back(static_cast<int32_t>(c));
    ids.push_back(tokens::EOS);
    return ids;
}

std::vector<int32_t> load_token_stream(const std::string& path, int vocab_size) {
    const auto bytes = read_file_bytes(path);
    const bool pretokenized =
        path.size() >= 4 && path.compare(path.size() - 4, 4, ".tok") == 0;
    if (!pretokenized) {
        return tokenize_bytes(
            std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    }
    if (bytes.size() % 4 != 0) {
        throw FormatError("pre-tokenized file size not a multiple of 4: " + path);
    }
    std::vector<int32_t> ids(bytes.size() / 4);
    for (size_t i = 0; i < ids.size(); ++i) {
        const uint32_t v = static_cast<uint32_t>(bytes[4 * i]) |
                           (static_cast<uint32_t>(bytes[4 * i + 1]) << 8) |
                           (static_cast<uint32_t>(bytes[4 * i + 2]) << 16) |
                           (static_cast<uint32_t>(bytes[4 * i + 3]) << 24);
        if (v >= static_cast<uint32_t>(vocab_size)) {
            throw VocabError("pre-tokenized id " + std::to_string(v) + " >= vocab " +
                             std::to_string(vocab_size));
        }
        ids[i] = static_cast<int32_t>(v);
    }
    return ids;
}

CalibrationSet load_corpus(const std::string& path, int seq_len, int n_sequences, uint64_t seed,
                           int vocab_size, bool allow_pad) {
    if (seq_len < 2) throw Error("seq_len must be >= 2");
    if (n_sequences < 1) throw Error("n_sequences must be >= 1");

    const auto bytes = read_file_bytes(path);
    const auto stream = load_token_stream(path, vocab_size);
    if (stream.empty()) throw Error("corpus is empty after tokenization: " + path);

    const int64_t n = static_cast<int64_t>(stream.size());
    if (n < seq_len && !allow_pad) {
        throw Error("corpus shorter than one window (" + std::to_string(n) + " < " +
                    std::to_string(seq_len) + ") and padding disabled");
    }

    CalibrationSet set;
    set.seq_len = seq_len;
    set.source_digest = hex64(fnv1a64(bytes.data(), bytes.size()));

    Rng rng(seed);
    const int64_t range = n > seq_len ? n - seq_len : 0;
    for (int i = 0; i < n_sequences; ++i) {
        const int64_t offset =
            range > 0 ? static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(range))) : 0;
        std::vector<int32_t> seq(static_cast<size_t>(seq_len), tokens::PAD);
        const int64_t avail = std::min<int64_t>(seq_len, n - offset);
        for (int64_t j = 0; j < avail; ++j) {
            seq[static_cast<size_t>(j)] = stream[static_cast<size_t>(offset + j)];
        }
        set.sequences.push_back(std::move(seq));
        set.offsets.push_back(offset);
    }
    return set;
}

}  // namespace putri
