#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "putri/eval.hpp"
#include "putri/model.hpp"
#include "putri/parallel.hpp"
#include "putri/pruning.hpp"

using namespace putri;

namespace {

void zero_all(ToyTransformer& model) {
    const auto z = [](Matrix& m) { std::fill(m.data(), m.data() + m.size(), 0.0f); };
    z(model.tok_embedding);
    z(model.lm_head);
    for (auto& lw : model.layers) {
        z(lw.wq);
        z(lw.wk);
        z(lw.wv);
        z(lw.wo);
        z(lw.gate);
        z(lw.up);
        z(lw.down);
    }
}

// 1 query head over 1 KV head, d_model 4: logits reduce to
// rmsnorm(embedding) * lm_head once all blocks are zeroed.
ModelConfig micro_config(int vocab) {
    ModelConfig c;
    c.d_model = 4;
    c.n_layers = 1;
    c.n_q_heads = 1;
    c.n_kv_heads = 1;
    c.head_dim = 4;
    c.d_ff = 4;
    c.vocab_size = vocab;
    return c;
}

}  // namespace

TEST_CASE("uniform logits give perplexity equal to the vocabulary size") {
    auto model = init_random(ModelConfig::tiny(), 1);
    zero_all(model);
    const std::vector<std::vector<int32_t>> seqs = {{1, 2, 3, 4, 5}, {250, 251, 252}};
    const PerplexityResult r = perplexity(model, seqs);
    CHECK_FALSE(r.infinite);
    CHECK(r.value == doctest::Approx(259.0).epsilon(1e-6));
    CHECK(r.token_count == 6);
}

TEST_CASE("a near-deterministic model scores perplexity one") {
    ModelConfig cfg = micro_config(4);
    cfg.norm_eps = 0.0;
    auto model = init_random(cfg, 2);
    zero_all(model);
    // Token 0 predicts 1 and vice versa, with logit margin 40.
    const float e0[4] = {1, 1, 1, 1};
    const float e1[4] = {1, -1, 1, -1};
    for (int j = 0; j < 4; ++j) {
        model.tok_embedding.at(0, j) = e0[j];
        model.tok_embedding.at(1, j) = e1[j];
        model.lm_head.at(j, 1) = 10.0f * e0[j];
        model.lm_head.at(j, 0) = 10.0f * e1[j];
    }
    // rmsnorm(e0) = e0 and rmsnorm(e1) = e1 (unit RMS rows, eps 0), so the
    // true target's logit is 40 and every other logit is 0.
    const std::vector<std::vector<int32_t>> seqs = {{0, 1, 0, 1, 0, 1}};
    const PerplexityResult r = perplexity(model, seqs);
    CHECK_FALSE(r.infinite);
    CHECK(r.value == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("hand-computed two-token sequence") {
    ModelConfig cfg = micro_config(3);
    cfg.norm_eps = 0.0;
    auto model = init_random(cfg, 3);
    zero_all(model);
    for (int j = 0; j < 4; ++j) model.tok_embedding.at(0, j) = 1.0f;
    model.lm_head.at(0, 0) = 1.0f;
    model.lm_head.at(0, 1) = 0.5f;
    model.lm_head.at(0, 2) = -0.25f;
    // Position 0 logits are exactly [1.0, 0.5, -0.25]; target token 1:
    //   nll = log(e^1 + e^0.5 + e^-0.25) - 0.5 = 1.1381816024124847
    const PerplexityResult r = perplexity(model, {{0, 1}});
    CHECK(r.token_count == 1);
    CHECK(r.nll_sum == doctest::Approx(1.1381816024124847).epsilon(1e-9));
    CHECK(r.value == doctest::Approx(3.1210878234411434).epsilon(1e-9));
}

TEST_CASE("perplexity is invariant under sequence order") {
    const auto model = init_random(ModelConfig::tiny(), 4);
    const std::vector<int32_t> s1 = {10, 20, 30, 40};
    const std::vector<int32_t> s2 = {50, 60, 70};
    const std::vector<int32_t> s3 = {80, 90, 100, 110, 120};
    const PerplexityResult fwd = perplexity(model, {s1, s2, s3});
    const PerplexityResult rev = perplexity(model, {s3, s2, s1});
    CHECK(fwd.token_count == rev.token_count);
    CHECK(fwd.value == doctest::Approx(rev.value).epsilon(1e-12));

    const PerplexityResult ab = perplexity(model, {s1, s2});
    const PerplexityResult ba = perplexity(model, {s2, s1});
    CHECK(ab.value == ba.value);  // two-term sums commute exactly
}

TEST_CASE("parallel and serial perplexity agree bit for bit") {
    const auto model = init_random(ModelConfig::tiny(), 5);
    std::vector<std::vector<int32_t>> seqs;
    for (int i = 0; i < 6; ++i) seqs.push_back({i + 1, i + 2, i + 3, i + 4, 200, 100});
    set_parallel(false);
    const PerplexityResult serial = perplexity(model, seqs);
    set_parallel(true);
    const PerplexityResult parallel = perplexity(model, seqs);
    CHECK(serial.nll_sum == parallel.nll_sum);
    CHECK(serial.value == parallel.value);
}

TEST_CASE("PAD targets are excluded") {
    auto model = init_random(ModelConfig::tiny(), 6);
    zero_all(model);  // uniform logits
    const std::vector<std::vector<int32_t>> padded = {{5, 6, tokens::PAD, tokens::PAD}};
    const PerplexityResult r = perplexity(model, padded);
    CHECK(r.token_count == 1);  // only target 6 scores
    CHECK(r.value == doctest::Approx(259.0).epsilon(1e-6));
}

TEST_CASE("degenerate inputs are rejected") {
    const auto model = init_random(ModelConfig::tiny(), 7);
    CHECK_THROWS_AS(perplexity(model, {}), Error);
    CHECK_THROWS_AS(perplexity(model, {{1}}), Error);
    CHECK_THROWS_AS(perplexity(model, {{5, tokens::PAD}}), Error);  // all targets PAD
}

TEST_CASE("overflowing logits surface as the infinity marker") {
    auto model = init_random(ModelConfig::tiny(), 8);
    for (int64_t i = 0; i < model.lm_head.size(); ++i) {
        model.lm_head.data()[i] = 3.0e38f;
    }
    const PerplexityResult r = perplexity(model, {{1, 2, 3}});
    CHECK(r.infinite);
    CHECK(std::isinf(r.value));
    CHECK_FALSE(std::isnan(r.value));
}

TEST_CASE("achieved_sparsity of identical models is zero") {
    const auto model = init_random(ModelConfig::tiny(), 9);
    CHECK(achieved_sparsity(model, model) == 0.0);
}

TEST_CASE("achieved_sparsity with F == A and half the FFN removed is 0.25") {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_layers = 1;
    cfg.n_q_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.head_dim = 8;
    cfg.d_ff = 32;
    cfg.vocab_size = 16;
    const auto before = init_random(cfg, 10);
    const auto [f, a] = count_prunable_params(before);
    REQUIRE(f == a);  // 3*32*32 == 2*32*8*(4+2)

    auto after = before;
    std::vector<int> keep;
    for (int j = 0; j < 16; ++j) keep.push_back(j);
    after.remove_ffn_nodes(0, keep);
    CHECK(achieved_sparsity(before, after) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("achieved_sparsity stays strictly below one at the p_min floor") {
    const auto before = init_random(ModelConfig::tiny(), 11);
    auto after = before;
    for (int l = 0; l < after.config.n_layers; ++l) {
        for (int k = 0; k < after.config.n_kv_heads; ++k) after.remove_kv_head(l, k);
        after.remove_ffn_nodes(l, {0});
    }
    const double s = achieved_sparsity(before, after);
    CHECK(s > 0.9);
    CHECK(s < 1.0);
}
