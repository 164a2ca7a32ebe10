#include "putri/eval.hpp"

#include <cmath>
#include <limits>

#include "putri/parallel.hpp"
#include "putri/pruning.hpp"

namespace putri {

namespace {

struct SeqNll {
    double nll = 0.0;
    int64_t count = 0;
    bool infinite = false;
};

SeqNll sequence_nll(const Matrix& logits, const std::vector<int32_t>& seq, int32_t pad_id) {
    SeqNll out;
    const int64_t t_len = static_cast<int64_t>(seq.size());
    const int64_t vocab = logits.cols();
    for (int64_t t = 0; t + 1 < t_len; ++t) {
        const int32_t target = seq[static_cast<size_t>(t + 1)];
        if (target == pad_id) continue;
        const float* row = logits.row_ptr(t);
        double mx = -std::numeric_limits<double>::infinity();
        bool bad = false;
        for (int64_t j = 0; j < vocab; ++j) {
            if (!std::isfinite(row[j])) {
                bad = true;
                break;
            }
            mx = std::max(mx, static_cast<double>(row[j]));
        }
        if (bad) {
            out.infinite = true;
            out.count += 1;
            continue;
        }
        double denom = 0.0;
        for (int64_t j = 0; j < vocab; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        const double nll = std::log(denom) - (static_cast<double>(row[target]) - mx);
        if (!std::isfinite(nll)) {
            out.infinite = true;
        } else {
            out.nll += nll;
        }
        out.count += 1;
    }
    return out;
}

}  // namespace

PerplexityResult perplexity_of(const LogitsFn& fwd,
                               const std::vector<std::vector<int32_t>>& sequences,
                               int32_t pad_id) {
    if (sequences.empty()) throw Error("perplexity requires at least one sequence");
    for (const auto& seq : sequences) {
        if (seq.size() < 2) throw Error("perplexity sequences must have length >= 2");
    }

    const int64_t n = static_cast<int64_t>(sequences.size());
    std::vector<SeqNll> per_seq(static_cast<size_t>(n));
    const bool par = parallel_enabled() && n > 1;
#pragma omp parallel for schedule(dynamic) if (par)
    for (int64_t i = 0; i < n; ++i) {
        const auto& seq = sequences[static_cast<size_t>(i)];
        per_seq[static_cast<size_t>(i)] = sequence_nll(fwd(seq), seq, pad_id);
    }

    PerplexityResult result;
    for (const auto& s : per_seq) {
        result.nll_sum += s.nll;
        result.token_count += s.count;
        result.infinite = result.infinite || s.infinite;
    }
    if (result.token_count == 0) throw Error("all perplexity targets are PAD");
    if (result.infinite || !std::isfinite(result.nll_sum)) {
        result.infinite = true;
        result.value = std::numeric_limits<double>::infinity();
        return result;
    }
    result.value = std::exp(result.nll_sum / static_cast<double>(result.token_count));
    if (!std::isfinite(result.value)) {
        result.infinite = true;
        result.value = std::numeric_limits<double>::infinity();
    }
    return result;
}

PerplexityResult perplexity(const ToyTransformer& model,
                            const std::vector<std::vector<int32_t>>& sequences, int32_t pad_id) {
    return perplexity_of([&](const std::vector<int32_t>& seq) { return forward(model, seq); },
                         sequences, pad_id);
}

double achieved_sparsity(const ToyTransformer& before, const ToyTransformer& after) {
    const auto [f_before, a_before] = count_prunable_params(before);
    const auto [f_after, a_after] = count_prunable_params(after);
    const long long total_before = f_before + a_before;
    const long long total_after = f_after + a_after;
    return 1.0 - static_cast<double>(total_after) / static_cast<double>(total_before);
}

}  // namespace putri
