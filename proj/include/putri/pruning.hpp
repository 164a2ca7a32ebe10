#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "putri/data.hpp"
#include "putri/model.hpp"

namespace putri {

struct PruneConfig {
    double target_sparsity = 0.0;  // s in [0, 1)
    double alpha = 1.5;            // attention-vs-FFN split exponent scale
    int p_min = 1;                 // minimum kept FFN nodes per layer (0 allows block deletion)
    int heads_per_iteration = 0;   // H; 0 resolves to the model's n_kv_heads
    int score_sequences = 1;       // calibration sequences per head-candidate perplexity
    double ridge = 0.0;            // initial regularizer for the reconstruction solve
    bool no_ffn_update = false;    // ablation: slice down without least-squares update
    bool parallel_update = false;  // ablation: taps from the original model, not the pruned prefix
    bool full_attention = false;   // ablation: remove whole attention sub-blocks

    void validate() const;
};

// Resolved pruning budget.
struct SparsityAllocation {
    long long n_attn_layers_equiv = 0;   // N_Attn = round(L * s^(F / (alpha A)))
    long long n_kv_heads_to_remove = 0;  // K * N_Attn, clamped to [0, K*L]
    double ffn_sparsity = 0.0;           // share of FFN params to remove, in [0, 1]
    long long keep_per_layer = 0;        // P, uniform across layers
    double predicted_achieved_sparsity = 0.0;
    long long ffn_params = 0;   // F, original model
    long long attn_params = 0;  // A, original model
};

// (F, A): FFN and attention weight-matrix parameters; embeddings, lm_head
// and norm scales excluded.
std::pair<long long, long long> count_prunable_params(const ToyTransformer& model);

// Parameters freed by one grouped head: 2 * d_model * head_dim * (1 + G).
long long grouped_head_params(const ModelConfig& config);
// Parameters freed by one FFN node: 3 * d_model gated, 2 * d_model plain.
long long ffn_node_params(const ModelConfig& config);

// Budget arithmetic on raw counts; exact and unit-testable against
// hand-evaluated values. Throws InfeasibleTargetError when the target
// exceeds what removing every head plus all-but-p_min nodes can reach.
SparsityAllocation allocate_counts(long long n_layers, long long kv_heads, double sparsity,
                                   double alpha, long long ffn_params, long long attn_params,
                                   long long d_ff, long long p_min, long long node_params,
                                   long long head_params);

SparsityAllocation allocate(const PruneConfig& config, const ToyTransformer& model);

// scores[i] = squared L2 norm of column i of the stacked activations.
std::vector<double> score_ffn_nodes(const Matrix& z);

// The p highest-scoring indices, ascending; ties keep the lower index.
std::vector<int> select_keep(const std::vector<double>& scores, int64_t p);

struct LayerPruneRecord {
    std::vector<int> kept_ffn;    // original indices, ascending
    std::vector<int> removed_kv;  // original indices, ascending
    double residual_before = 0.0;  // ||Z_P * down_sliced - Z * down||_F^2 on calibration
    double residual_after = 0.0;   // same after the least-squares update
    bool residuals_valid = false;
    int ridge_escalations = 0;
    double final_ridge = 0.0;
};

// Layer-by-layer FFN pruning: tap the current model (or the original one
// under parallel_update), score nodes, slice gate/up and down to the keep
// set, then refit down against the pre-slice layer output unless
// no_ffn_update. PAD input rows are excluded from the stacked activations.
std::vector<LayerPruneRecord> prune_ffn_sequential(ToyTransformer& model,
                                                   const CalibrationSet& calib,
                                                   const SparsityAllocation& allocation,
                                                   const PruneConfig& config);

// Iterative grouped-head removal: every live head is scored by the
// perplexity of the model with just that head masked off, and the
// min(H, remaining budget) candidates leaving the lowest perplexity are
// removed, until the budget is spent. Ties break on (layer, head index).
// Under full_attention, whole attention sub-blocks are removed instead,
// N_Attn of them, by the same one-at-a-time criterion over layers.
// Returns the removed (layer, kv index) pairs in removal order.
std::vector<std::pair<int, int>> prune_attention_heads(ToyTransformer& model,
                                                       const CalibrationSet& calib,
                                                       const SparsityAllocation& allocation,
                                                       const PruneConfig& config);

struct PruneReport {
    PruneConfig config;  // echo, heads_per_iteration resolved
    SparsityAllocation allocation;
    std::vector<LayerPruneRecord> layers;
    double ppl_before = 0.0;
    double ppl_after = 0.0;
    bool ppl_before_available = false;
    bool ppl_after_available = false;
    double achieved_sparsity = 0.0;
    long long params_before = 0;  // F + A
    long long params_after = 0;
    double wall_clock_seconds = 0.0;  // printed by the CLI; not part of the canonical JSON
    std::string calib_digest;
    std::string eval_digest;
    std::map<std::string, long long> seeds;  // filled by the caller
    std::string status = "ok";
};

struct PutriResult {
    ToyTransformer model;
    PruneReport report;
};

// Full pipeline: allocate, prune the FFN layers sequentially, prune
// grouped heads iteratively, then measure held-out perplexity before and
// after. target_sparsity 0 returns a byte-identical model.
PutriResult putri(const ToyTransformer& model, const CalibrationSet& calib,
                  const CalibrationSet& eval_set, const PruneConfig& config);

// Canonical JSON: sorted keys, floats with 6 significant digits, infinite
// perplexity spelled "inf", unavailable values null. Deterministic for
// identical runs. wall_clock_seconds is intentionally excluded.
std::string report_to_json(const PruneReport& report);

// Flat one-row CSV form of the same report.
std::string report_csv_header();
std::string report_csv_row(const PruneReport& report);

}  // namespace putri
