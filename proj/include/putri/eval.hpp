#pragma once

#include <functional>
#include <limits>
#include <vector>

#include "putri/data.hpp"
#include "putri/model.hpp"

namespace putri {

struct PerplexityResult {
    double value = 0.0;      // exp(nll_sum / token_count); +inf when infinite
    int64_t token_count = 0;
    double nll_sum = 0.0;
    bool infinite = false;   // NaN/overflow in logits surfaces here, never as NaN

    static PerplexityResult inf_marker() {
        PerplexityResult r;
        r.value = std::numeric_limits<double>::infinity();
        r.infinite = true;
        return r;
    }
};

// Corpus-level perplexity: positions 0..T-2 score targets 1..T-1, softmax
// in 64-bit with max subtraction, PAD targets excluded, NLLs summed over
// all sequences then exponentiated once. Per-sequence terms may be
// computed concurrently; the final summation order is fixed.
PerplexityResult perplexity(const ToyTransformer& model,
                            const std::vector<std::vector<int32_t>>& sequences,
                            int32_t pad_id = tokens::PAD);

// Same scoring over an arbitrary logits function (used for masked-head
// candidate evaluation).
using LogitsFn = std::function<Matrix(const std::vector<int32_t>&)>;
PerplexityResult perplexity_of(const LogitsFn& fwd,
                               const std::vector<std::vector<int32_t>>& sequences,
                               int32_t pad_id = tokens::PAD);

// 1 - (F_after + A_after) / (F_before + A_before) over prunable parameters
// only, exact integer arithmetic until the final division.
double achieved_sparsity(const ToyTransformer& before, const ToyTransformer& after);

}  // namespace putri
