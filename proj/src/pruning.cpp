#include "putri/pruning.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "putri/eval.hpp"
#include "putri/linalg.hpp"
#include "putri/parallel.hpp"

namespace putri {

void PruneConfig::validate() const {
    if (!(target_sparsity >= 0.0 && target_sparsity < 1.0)) {
        throw Error("target_sparsity must be in [0, 1)");
    }
    if (!(alpha > 0.0)) throw Error("alpha must be positive");
    if (p_min < 0) throw Error("p_min must be >= 0");
    if (heads_per_iteration < 0) throw Error("heads_per_iteration must be >= 0");
    if (score_sequences < 1) throw Error("score_sequences must be >= 1");
    if (ridge < 0.0) throw Error("ridge must be >= 0");
}

std::pair<long long, long long> count_prunable_params(const ToyTransformer& model) {
    long long f = 0, a = 0;
    for (const auto& lw : model.layers) {
        f += lw.gate.size() + lw.up.size() + lw.down.size();
        a += lw.wq.size() + lw.wk.size() + lw.wv.size() + lw.wo.size();
    }
    return {f, a};
}

long long grouped_head_params(const ModelConfig& config) {
    return 2ll * config.d_model * config.head_dim * (1 + config.group_size());
}

long long ffn_node_params(const ModelConfig& config) {
    return (config.ffn_kind == FfnKind::gated ? 3ll : 2ll) * config.d_model;
}

SparsityAllocation allocate_counts(long long n_layers, long long kv_heads, double sparsity,
                                   double alpha, long long ffn_params, long long attn_params,
                                   long long d_ff, long long p_min, long long node_params,
                                   long long head_params) {
    const long long total = ffn_params + attn_params;
    const double max_removable = static_cast<double>(attn_params) +
                                 static_cast<double>(n_layers * (d_ff - p_min) * node_params);
    const double max_achievable = max_removable / static_cast<double>(total);
    if (sparsity > max_achievable + 1e-12) {
        throw InfeasibleTargetError(
            "target sparsity " + format_g6(sparsity) + " exceeds maximum achievable " +
                format_g6(max_achievable) + " (all heads removed, " + std::to_string(p_min) +
                " nodes kept per layer)",
            max_achievable);
    }

    SparsityAllocation alloc;
    alloc.ffn_params = ffn_params;
    alloc.attn_params = attn_params;

    const double exponent =
        static_cast<double>(ffn_params) / (alpha * static_cast<double>(attn_params));
    const double raw = static_cast<double>(n_layers) * std::pow(sparsity, exponent);
    long long n_attn = round_half_away(raw);
    n_attn = std::clamp(n_attn, 0ll, n_layers);
    alloc.n_attn_layers_equiv = n_attn;
    alloc.n_kv_heads_to_remove = std::clamp(kv_heads * n_attn, 0ll, kv_heads * n_layers);

    const long long removed_attn = alloc.n_kv_heads_to_remove * head_params;
    double ffn_sparsity =
        (sparsity * static_cast<double>(total) - static_cast<double>(removed_attn)) /
        static_cast<double>(ffn_params);
    ffn_sparsity = std::clamp(ffn_sparsity, 0.0, 1.0);
    alloc.ffn_sparsity = ffn_sparsity;

    long long keep = round_half_away((1.0 - ffn_sparsity) * static_cast<double>(d_ff));
    keep = std::clamp(keep, p_min, d_ff);
    alloc.keep_per_layer = keep;

    const long long removed_ffn = n_layers * (d_ff - keep) * node_params;
    alloc.predicted_achieved_sparsity =
        static_cast<double>(removed_attn + removed_ffn) / static_cast<double>(total);
    return alloc;
}

SparsityAllocation allocate(const PruneConfig& config, const ToyTransformer& model) {
    config.validate();
    for (const auto& lw : model.layers) {
        if (lw.kv_live() != model.config.n_kv_heads || lw.ff_live() != model.config.d_ff) {
            throw Error("allocate requires an unpruned model");
        }
    }
    const auto [f, a] = count_prunable_params(model);
    return allocate_counts(model.config.n_layers, model.config.n_kv_heads,
                           config.target_sparsity, config.alpha, f, a, model.config.d_ff,
                           config.p_min, ffn_node_params(model.config),
                           grouped_head_params(model.config));
}

std::vector<double> score_ffn_nodes(const Matrix& z) {
    if (z.rows() == 0 || z.cols() == 0) throw Error("score_ffn_nodes requires a nonempty matrix");
    return column_sq_norms(z);
}

std::vector<int> select_keep(const std::vector<double>& scores, int64_t p) {
    if (p < 0 || p > static_cast<int64_t>(scores.size())) {
        throw Error("keep count " + std::to_string(p) + " out of range for " +
                    std::to_string(scores.size()) + " scores");
    }
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int lhs, int rhs) {
        if (scores[static_cast<size_t>(lhs)] != scores[static_cast<size_t>(rhs)]) {
            return scores[static_cast<size_t>(lhs)] > scores[static_cast<size_t>(rhs)];
        }
        return lhs < rhs;  // ties keep the lower original index
    });
    idx.resize(static_cast<size_t>(p));
    std::sort(idx.begin(), idx.end());
    return idx;
}

namespace {

// Stacks per-sequence taps for one layer, dropping rows whose input token
// is PAD. Sequences run concurrently; row order is fixed by sequence order.
Matrix stacked_tap(const ToyTransformer& model, const CalibrationSet& calib, int layer) {
    const int64_t n = static_cast<int64_t>(calib.sequences.size());
    std::vector<Matrix> taps(static_cast<size_t>(n));
    const bool par = parallel_enabled() && n > 1;
#pragma omp parallel for schedule(dynamic) if (par)
    for (int64_t i = 0; i < n; ++i) {
        taps[static_cast<size_t>(i)] = ffn_tap(model, calib.sequences[static_cast<size_t>(i)], layer);
    }
    int64_t rows = 0;
    for (int64_t i = 0; i < n; ++i) {
        for (int32_t id : calib.sequences[static_cast<size_t>(i)]) {
            if (id != tokens::PAD) ++rows;
        }
    }
    const int64_t cols = taps.empty() ? 0 : taps[0].cols();
    Matrix out(rows, cols);
    int64_t r = 0;
    for (int64_t i = 0; i < n; ++i) {
        const auto& seq = calib.sequences[static_cast<size_t>(i)];
        for (int64_t t = 0; t < static_cast<int64_t>(seq.size()); ++t) {
            if (seq[static_cast<size_t>(t)] == tokens::PAD) continue;
            std::copy(taps[static_cast<size_t>(i)].row_ptr(t),
                      taps[static_cast<size_t>(i)].row_ptr(t) + cols, out.row_ptr(r));
            ++r;
        }
    }
    return out;
}

// One pass over the model collecting every layer's stacked tap.
std::vector<Matrix> stacked_taps_all(const ToyTransformer& model, const CalibrationSet& calib) {
    const int64_t n = static_cast<int64_t>(calib.sequences.size());
    std::vector<std::vector<Matrix>> per_seq(static_cast<size_t>(n));
    const bool par = parallel_enabled() && n > 1;
#pragma omp parallel for schedule(dynamic) if (par)
    for (int64_t i = 0; i < n; ++i) {
        per_seq[static_cast<size_t>(i)] = ffn_taps_all(model, calib.sequences[static_cast<size_t>(i)]);
    }
    const int n_layers = model.config.n_layers;
    int64_t rows = 0;
    for (const auto& seq : calib.sequences) {
        for (int32_t id : seq) {
            if (id != tokens::PAD) ++rows;
        }
    }
    std::vector<Matrix> stacked;
    stacked.reserve(static_cast<size_t>(n_layers));
    for (int l = 0; l < n_layers; ++l) {
        const int64_t cols = per_seq[0][static_cast<size_t>(l)].cols();
        Matrix out(rows, cols);
        int64_t r = 0;
        for (int64_t i = 0; i < n; ++i) {
            const auto& seq = calib.sequences[static_cast<size_t>(i)];
            const Matrix& tap = per_seq[static_cast<size_t>(i)][static_cast<size_t>(l)];
            for (int64_t t = 0; t < static_cast<int64_t>(seq.size()); ++t) {
                if (seq[static_cast<size_t>(t)] == tokens::PAD) continue;
                std::copy(tap.row_ptr(t), tap.row_ptr(t) + cols, out.row_ptr(r));
                ++r;
            }
        }
        stacked.push_back(std::move(out));
    }
    return stacked;
}

}  // namespace

std::vector<LayerPruneRecord> prune_ffn_sequential(ToyTransformer& model,
                                                   const CalibrationSet& calib,
                                                   const SparsityAllocation& allocation,
                                                   const PruneConfig& config) {
    if (calib.sequences.empty()) throw Error("calibration set is empty");
    const int n_layers = model.config.n_layers;
    const long long keep_count = allocation.keep_per_layer;

    std::vector<Matrix> original_taps;
    if (config.parallel_update) original_taps = stacked_taps_all(model, calib);

    std::vector<LayerPruneRecord> records(static_cast<size_t>(n_layers));
    for (int l = 0; l < n_layers; ++l) {
        LayerWeights& lw = model.layers[static_cast<size_t>(l)];
        LayerPruneRecord& rec = records[static_cast<size_t>(l)];

        const Matrix z = config.parallel_update ? std::move(original_taps[static_cast<size_t>(l)])
                                                : stacked_tap(model, calib, l);
        // Reconstruction target: this layer's current down-projection output.
        const Matrix target = matmul(z, lw.down);

        const std::vector<double> scores = score_ffn_nodes(z);
        const std::vector<int> keep_pos = select_keep(scores, keep_count);
        std::vector<int> keep_orig(keep_pos.size());
        for (size_t i = 0; i < keep_pos.size(); ++i) {
            keep_orig[i] = lw.live_ff[static_cast<size_t>(keep_pos[i])];
        }
        model.remove_ffn_nodes(l, keep_orig);
        rec.kept_ffn = keep_orig;

        const Matrix z_keep = z.select_columns(keep_pos);
        rec.residual_before = frob_sq_diff(matmul(z_keep, lw.down), target);
        rec.residuals_valid = true;
        if (!config.no_ffn_update && keep_count > 0) {
            SolveStats stats;
            lw.down = solve_normal_equations(z_keep, target, config.ridge, &stats);
            rec.residual_after = frob_sq_diff(matmul(z_keep, lw.down), target);
            rec.ridge_escalations = stats.escalations;
            rec.final_ridge = stats.final_ridge;
        } else {
            rec.residual_after = rec.residual_before;
        }
    }
    return records;
}

namespace {

struct HeadCandidate {
    int layer;
    int kv_orig;
    double ppl;
};

double masked_ppl(const ToyTransformer& model, const HeadMask& mask,
                  const std::vector<std::vector<int32_t>>& seqs) {
    return perplexity_of(
               [&](const std::vector<int32_t>& seq) { return apply_head_mask(model, mask, seq); },
               seqs)
        .value;
}

}  // namespace

std::vector<std::pair<int, int>> prune_attention_heads(ToyTransformer& model,
                                                       const CalibrationSet& calib,
                                                       const SparsityAllocation& allocation,
                                                       const PruneConfig& config) {
    std::vector<std::pair<int, int>> removed;
    long long budget = allocation.n_kv_heads_to_remove;
    if (budget == 0) return removed;  // implies n_attn_layers_equiv == 0

    if (static_cast<int>(calib.sequences.size()) < config.score_sequences) {
        throw Error("score_sequences exceeds available calibration sequences");
    }
    const std::vector<std::vector<int32_t>> scoring(
        calib.sequences.begin(), calib.sequences.begin() + config.score_sequences);

    if (config.full_attention) {
        // Whole attention sub-blocks, one per iteration.
        for (long long iter = 0; iter < allocation.n_attn_layers_equiv; ++iter) {
            std::vector<int> candidates;
            for (int l = 0; l < model.config.n_layers; ++l) {
                if (model.layers[static_cast<size_t>(l)].kv_live() > 0) candidates.push_back(l);
            }
            if (candidates.empty()) break;
            std::vector<double> ppls(candidates.size());
            const bool par = parallel_enabled() && candidates.size() > 1;
#pragma omp parallel for schedule(dynamic) if (par)
            for (int64_t i = 0; i < static_cast<int64_t>(candidates.size()); ++i) {
                HeadMask mask = HeadMask::all_live(model);
                for (auto& flag : mask.active[static_cast<size_t>(candidates[static_cast<size_t>(i)])]) {
                    flag = 0;
                }
                ppls[static_cast<size_t>(i)] = masked_ppl(model, mask, scoring);
            }
            size_t best = 0;
            for (size_t i = 1; i < candidates.size(); ++i) {
                if (ppls[i] < ppls[best]) best = i;  // tie keeps the lower layer
            }
            const int layer = candidates[best];
            const std::vector<int> heads = model.layers[static_cast<size_t>(layer)].live_kv;
            for (int k : heads) {
                model.remove_kv_head(layer, k);
                removed.emplace_back(layer, k);
            }
        }
        return removed;
    }

    const long long h_per_iter =
        config.heads_per_iteration > 0 ? config.heads_per_iteration : model.config.n_kv_heads;

    while (budget > 0) {
        std::vector<HeadCandidate> candidates;
        for (int l = 0; l < model.config.n_layers; ++l) {
            for (int k : model.layers[static_cast<size_t>(l)].live_kv) {
                candidates.push_back({l, k, 0.0});
            }
        }
        if (candidates.empty()) {
            throw Error("head budget exceeds live heads");  // allocate pre-checks this
        }
        const bool par = parallel_enabled() && candidates.size() > 1;
#pragma omp parallel for schedule(dynamic) if (par)
        for (int64_t i = 0; i < static_cast<int64_t>(candidates.size()); ++i) {
            HeadCandidate& c = candidates[static_cast<size_t>(i)];
            HeadMask mask = HeadMask::all_live(model);
            mask.active[static_cast<size_t>(c.layer)][static_cast<size_t>(c.kv_orig)] = 0;
            c.ppl = masked_ppl(model, mask, scoring);
        }
        std::sort(candidates.begin(), candidates.end(),
                  [](const HeadCandidate& a, const HeadCandidate& b) {
                      if (a.ppl != b.ppl) return a.ppl < b.ppl;
                      if (a.layer != b.layer) return a.layer < b.layer;
                      return a.kv_orig < b.kv_orig;
                  });
        const long long take =
            std::min<long long>(h_per_iter, std::min<long long>(budget,
                                                                static_cast<long long>(candidates.size())));
        for (long long i = 0; i < take; ++i) {
            model.remove_kv_head(candidates[static_cast<size_t>(i)].layer,
                                 candidates[static_cast<size_t>(i)].kv_orig);
            removed.emplace_back(candidates[static_cast<size_t>(i)].layer,
                                 candidates[static_cast<size_t>(i)].kv_orig);
        }
        budget -= take;
    }
    return removed;
}

PutriResult putri(const ToyTransformer& model, const CalibrationSet& calib,
                  const CalibrationSet& eval_set, const PruneConfig& config) {
    config.validate();
    const auto t0 = std::chrono::steady_clock::now();

    PutriResult result;
    PruneReport& report = result.report;
    report.config = config;
    if (report.config.heads_per_iteration == 0) {
        report.config.heads_per_iteration = model.config.n_kv_heads;
    }
    report.calib_digest = calib.source_digest;
    report.eval_digest = eval_set.source_digest;

    const auto [f, a] = count_prunable_params(model);
    report.params_before = f + a;

    try {
        const PerplexityResult before = perplexity(model, eval_set.sequences);
        report.ppl_before = before.value;
        report.ppl_before_available = true;
    } catch (const Error&) {
        report.ppl_before_available = false;
    }

    report.allocation = allocate(config, model);

    result.model = model;
    if (config.target_sparsity > 0.0) {
        report.layers = prune_ffn_sequential(result.model, calib, report.allocation, config);
        const auto removed =
            prune_attention_heads(result.model, calib, report.allocation, config);
        for (const auto& [layer, kv] : removed) {
            report.layers[static_cast<size_t>(layer)].removed_kv.push_back(kv);
        }
        for (auto& rec : report.layers) {
            std::sort(rec.removed_kv.begin(), rec.removed_kv.end());
        }
    } else {
        report.layers.resize(static_cast<size_t>(model.config.n_layers));
        for (int l = 0; l < model.config.n_layers; ++l) {
            report.layers[static_cast<size_t>(l)].kept_ffn =
                model.layers[static_cast<size_t>(l)].live_ff;
        }
    }

    try {
        const PerplexityResult after = perplexity(result.model, eval_set.sequences);
        report.ppl_after = after.value;
        report.ppl_after_available = true;
    } catch (const Error&) {
        report.ppl_after_available = false;
    }

    const auto [f_after, a_after] = count_prunable_params(result.model);
    report.params_after = f_after + a_after;
    report.achieved_sparsity = achieved_sparsity(model, result.model);
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

}  // namespace putri
