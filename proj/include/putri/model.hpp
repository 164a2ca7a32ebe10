#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "putri/matrix.hpp"

namespace putri {

enum class FfnKind { gated, plain };

std::string to_string(FfnKind k);
FfnKind ffn_kind_from_string(const std::string& s);

struct ModelConfig {
    int d_model = 0;
    int n_layers = 0;
    int n_q_heads = 0;
    int n_kv_heads = 0;
    int head_dim = 0;
    int d_ff = 0;
    int vocab_size = 0;
    double rope_theta = 10000.0;
    double norm_eps = 1e-5;
    FfnKind ffn_kind = FfnKind::gated;
    int max_context = 256;

    int group_size() const { return n_q_heads / n_kv_heads; }

    // Enforces: counts >= 1, n_q_heads divisible by n_kv_heads,
    // d_model == n_q_heads * head_dim, even head_dim (rotary pairs).
    void validate() const;

    // d_model 64, 4 layers, 8 query heads over 2 KV heads, head_dim 8,
    // d_ff 256, byte-level vocab 259.
    static ModelConfig tiny();

    bool operator==(const ModelConfig&) const = default;
};

// One transformer layer. Projections are stored input-major so activations
// multiply on the left: x (T x d_model) times wq (d_model x q_live*head_dim).
struct LayerWeights {
    Matrix wq;    // d_model x (q_live * head_dim)
    Matrix wk;    // d_model x (kv_live * head_dim)
    Matrix wv;    // d_model x (kv_live * head_dim)
    Matrix wo;    // (q_live * head_dim) x d_model
    Matrix gate;  // d_model x ff_live (holds fc1 when ffn_kind == plain)
    Matrix up;    // d_model x ff_live (unused when plain; 0x0)
    Matrix down;  // ff_live x d_model
    std::vector<float> attn_norm;  // d_model
    std::vector<float> ffn_norm;   // d_model

    // Surviving heads/nodes by ORIGINAL index, ascending. Surgery removes
    // entries here in lockstep with the matrix slices.
    std::vector<int> live_kv;
    std::vector<int> live_ff;

    int kv_live() const { return static_cast<int>(live_kv.size()); }
    int ff_live() const { return static_cast<int>(live_ff.size()); }
};

// Per-layer activation mask over ORIGINAL KV-head indices (true = active).
// Lets head-removal candidates be scored without touching the weights; the
// masked forward is arithmetically identical to forward after surgery.
struct HeadMask {
    std::vector<std::vector<uint8_t>> active;

    static HeadMask all_live(const struct ToyTransformer& model);
};

struct ToyTransformer {
    ModelConfig config;
    Matrix tok_embedding;  // vocab x d_model
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;  // d_model
    Matrix lm_head;  // d_model x vocab

    // Deletes one grouped head: head_dim columns from wk/wv, G*head_dim
    // columns from wq and rows from wo. kv_original must be live.
    void remove_kv_head(int layer, int kv_original);

    // Keeps only the listed FFN nodes (ascending ORIGINAL indices, all
    // currently live). An empty keep set empties the block (ff_live = 0).
    void remove_ffn_nodes(int layer, const std::vector<int>& keep_original);
};

// Weights drawn from the documented xorshift64* stream, uniform symmetric
// with standard deviation 1/sqrt(fan_in); norm scales start at 1. Identical
// (config, seed) pairs produce byte-identical models on any platform.
ToyTransformer init_random(const ModelConfig& config, uint64_t seed);

// Full-sequence causal forward pass: pre-RMSNorm, RoPE on Q/K, each KV head
// shared by G query heads, SwiGLU or ReLU FFN. Softmax runs in 64-bit.
// A layer with kv_live == 0 (or ff_live == 0) contributes nothing and the
// residual stream passes through.
Matrix forward(const ToyTransformer& model, const std::vector<int32_t>& tokens);

// Forward with the post-activation FFN intermediate of one layer captured
// exactly as the down projection consumes it (T x ff_live).
struct TapResult {
    Matrix logits;
    Matrix tap;
};
TapResult forward_with_tap(const ToyTransformer& model, const std::vector<int32_t>& tokens,
                           int layer);

// Tap only: runs layers 0..layer and stops after the FFN activation.
Matrix ffn_tap(const ToyTransformer& model, const std::vector<int32_t>& tokens, int layer);

// Taps for every layer from a single pass.
std::vector<Matrix> ffn_taps_all(const ToyTransformer& model, const std::vector<int32_t>& tokens);

// Forward with masked-off grouped heads skipped. Bit-compatible with
// physically removing the same heads (the masked blocks contribute exact
// zeros to the output projection).
Matrix apply_head_mask(const ToyTransformer& model, const HeadMask& mask,
                       const std::vector<int32_t>& tokens);

// Pre-softmax causal attention scores of one query head (T x T, -inf above
// the diagonal). Debug/inspection tap.
Matrix attention_scores(const ToyTransformer& model, const std::vector<int32_t>& tokens,
                        int layer, int q_head);

// Total parameter count of attention + FFN + embedding + head + norms.
int64_t total_params(const ToyTransformer& model);

}  // namespace putri
