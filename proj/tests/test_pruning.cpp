#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "putri/data.hpp"
#include "putri/eval.hpp"
#include "putri/linalg.hpp"
#include "putri/model.hpp"
#include "putri/model_io.hpp"
#include "putri/parallel.hpp"
#include "putri/pruning.hpp"
#include "putri/rng.hpp"

using namespace putri;

namespace {

const std::string kCorpus = std::string(PUTRI_FIXTURE_DIR) + "/corpus.txt";

ModelConfig small_config() {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_q_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 4;
    c.d_ff = 16;
    c.vocab_size = 64;
    return c;
}

CalibrationSet synthetic_calib(int n_seqs, int seq_len, int vocab, uint64_t seed) {
    CalibrationSet set;
    set.seq_len = seq_len;
    set.source_digest = "synthetic";
    Rng rng(seed);
    for (int i = 0; i < n_seqs; ++i) {
        std::vector<int32_t> s(static_cast<size_t>(seq_len));
        for (auto& t : s) t = static_cast<int32_t>(rng.next_below(static_cast<uint64_t>(vocab)));
        set.sequences.push_back(std::move(s));
        set.offsets.push_back(0);
    }
    return set;
}

long long round_ref(double x) { return static_cast<long long>(std::floor(x + 0.5)); }

double max_rel_diff(const Matrix& a, const Matrix& b) {
    double scale = 1e-12;
    for (int64_t i = 0; i < a.size(); ++i) {
        scale = std::max(scale, std::abs(static_cast<double>(a.data()[i])));
    }
    double worst = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]) / scale);
    }
    return worst;
}

}  // namespace

TEST_CASE("count_prunable_params matches shape arithmetic") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.n_layers = 1;
    const auto model = init_random(cfg, 1);
    const auto [f, a] = count_prunable_params(model);
    CHECK(a == 10240);  // 64*64 + 64*16 + 64*16 + 64*64
    CHECK(f == 49152);  // 3 * 64 * 256

    auto pruned = model;
    pruned.remove_kv_head(0, 0);
    const auto [f2, a2] = count_prunable_params(pruned);
    CHECK(f2 == f);
    CHECK(a - a2 == 5120);  // 2 * 64 * 8 * (1 + 4)
    CHECK(grouped_head_params(cfg) == 5120);
    CHECK(ffn_node_params(cfg) == 192);
}

TEST_CASE("allocate: zero sparsity removes nothing") {
    const auto model = init_random(ModelConfig::tiny(), 2);
    PruneConfig pc;
    pc.target_sparsity = 0.0;
    const SparsityAllocation alloc = allocate(pc, model);
    CHECK(alloc.n_attn_layers_equiv == 0);
    CHECK(alloc.n_kv_heads_to_remove == 0);
    CHECK(alloc.keep_per_layer == model.config.d_ff);
    CHECK(alloc.predicted_achieved_sparsity == 0.0);
}

TEST_CASE("allocate_counts hand-evaluated cases") {
    // L=4, K=2, F/(alpha A) = 2, s = 0.5: N_Attn = round(4 * 0.25) = 1, heads = 2.
    const auto a = allocate_counts(4, 2, 0.5, 1.5, 300000, 100000, 256, 1, 192, 5120);
    CHECK(a.n_attn_layers_equiv == 1);
    CHECK(a.n_kv_heads_to_remove == 2);

    // Frozen literals for the budget equations (half-away-from-zero):
    //   round(4 * 0.5^2)  = 1     round(4 * 0.5^3)   = round(0.5) = 1
    //   round(32 * 0.9^3) = 23    round(8 * 0.75^1)  = 6
    //   round(2 * 0.99^4.5) = 2   round(32 * 0.95^2) = 29
    struct Case {
        long long n_layers;
        double s;
        double exponent;
        long long expect;
    };
    const Case cases[] = {{4, 0.5, 2.0, 1},  {4, 0.5, 3.0, 1},   {32, 0.9, 3.0, 23},
                          {8, 0.75, 1.0, 6}, {2, 0.99, 4.5, 2}, {32, 0.95, 2.0, 29}};
    for (const auto& c : cases) {
        // F chosen so F / (alpha A) is exactly the exponent with alpha = 1.
        const long long attn = 100000;
        const long long f = static_cast<long long>(c.exponent * static_cast<double>(attn));
        const auto got = allocate_counts(c.n_layers, 2, c.s, 1.0, f, attn, 1 << 20, 0, 3, 1);
        CHECK(got.n_attn_layers_equiv == c.expect);
        CHECK(got.n_kv_heads_to_remove == 2 * c.expect);
    }
}

TEST_CASE("allocate_counts agrees with the formula over a grid") {
    // Counts kept mutually consistent the way a real model's are:
    // F = L * d_ff * node_params and A = K * L * head_params.
    for (const long long L : {2, 4, 8, 32}) {
        for (const double s : {0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99}) {
            for (const double ratio : {1.0, 3.0, 4.5}) {
                for (const double alpha : {1.0, 1.5}) {
                    const long long d_ff = 512;
                    const long long attn = L * d_ff * 2;
                    const long long f = static_cast<long long>(ratio * static_cast<double>(attn));
                    const long long node_params = static_cast<long long>(2.0 * ratio);
                    const long long head_params = attn / (4 * L);
                    const auto got =
                        allocate_counts(L, 4, s, alpha, f, attn, d_ff, 0, node_params, head_params);
                    const double expo =
                        static_cast<double>(f) / (alpha * static_cast<double>(attn));
                    long long want = round_ref(L * std::pow(s, expo));
                    want = std::min(want, L);
                    CHECK(got.n_attn_layers_equiv == want);
                    CHECK(got.n_kv_heads_to_remove == 4 * want);
                }
            }
        }
    }
}

TEST_CASE("allocate honors the default alpha") {
    const auto model = init_random(ModelConfig::tiny(), 3);
    PruneConfig pc;
    pc.target_sparsity = 0.75;
    const auto with_default = allocate(pc, model);  // alpha 1.5
    pc.alpha = 1.0;
    const auto with_one = allocate(pc, model);
    // F/A = 4.8: exponent 3.2 vs 4.8 flips round(4 * 0.75^e) from 2 to 1.
    CHECK(with_default.n_attn_layers_equiv == 2);
    CHECK(with_one.n_attn_layers_equiv == 1);
}

TEST_CASE("allocate rejects unreachable targets with the max achievable") {
    const auto model = init_random(ModelConfig::tiny(), 4);
    PruneConfig pc;
    pc.target_sparsity = 0.999;
    try {
        allocate(pc, model);
        FAIL("expected InfeasibleTargetError");
    } catch (const InfeasibleTargetError& e) {
        CHECK(e.max_achievable == doctest::Approx(0.996767).epsilon(1e-4));
        CHECK(std::string(e.what()).find("0.996767") != std::string::npos);
    }
}

TEST_CASE("allocate requires an unpruned model") {
    auto model = init_random(ModelConfig::tiny(), 5);
    model.remove_kv_head(0, 0);
    PruneConfig pc;
    pc.target_sparsity = 0.5;
    CHECK_THROWS_AS(allocate(pc, model), Error);
}

TEST_CASE("score_ffn_nodes and select_keep basics") {
    Matrix z(2, 2, {1, 2, 2, 1});
    const auto scores = score_ffn_nodes(z);
    CHECK(scores[0] == doctest::Approx(5.0));
    CHECK(scores[1] == doctest::Approx(5.0));
    CHECK(select_keep(scores, 1) == std::vector<int>{0});  // tie keeps lower index

    CHECK(select_keep({1.0, 9.0, 3.0}, 2) == std::vector<int>{1, 2});
    CHECK(select_keep({1.0, 9.0, 3.0}, 3) == std::vector<int>{0, 1, 2});
    CHECK_THROWS_AS(select_keep({1.0}, 2), Error);
}

TEST_CASE("zero-score columns are pruned first") {
    Matrix z(3, 4);
    for (int64_t i = 0; i < 3; ++i) {
        z.at(i, 0) = 1.0f;
        z.at(i, 2) = 2.0f;
        z.at(i, 3) = 0.5f;
    }
    const auto keep = select_keep(score_ffn_nodes(z), 3);
    CHECK(keep == std::vector<int>{0, 2, 3});  // column 1 (all zero) dropped
}

TEST_CASE("keep sets are invariant under positive activation scaling") {
    Rng rng(50);
    Matrix z(30, 12);
    for (int64_t i = 0; i < z.size(); ++i) {
        z.data()[i] = static_cast<float>(rng.next_symmetric(1.0));
    }
    Matrix scaled = z;
    for (int64_t i = 0; i < scaled.size(); ++i) scaled.data()[i] *= 3.0f;
    const auto s1 = score_ffn_nodes(z);
    const auto s2 = score_ffn_nodes(scaled);
    CHECK(select_keep(s1, 5) == select_keep(s2, 5));
    for (size_t j = 0; j < s1.size(); ++j) {
        CHECK(s2[j] == doctest::Approx(9.0 * s1[j]).epsilon(1e-6));
    }
}

TEST_CASE("keep-all reconstruction leaves the model nearly unchanged") {
    const auto model = init_random(small_config(), 6);
    const auto calib = synthetic_calib(6, 24, model.config.vocab_size, 7);
    SparsityAllocation alloc;
    alloc.keep_per_layer = model.config.d_ff;
    PruneConfig pc;
    pc.target_sparsity = 0.5;  // irrelevant to the FFN stage keep count

    auto pruned = model;
    prune_ffn_sequential(pruned, calib, alloc, pc);
    const std::vector<int32_t> probe = calib.sequences[0];
    CHECK(max_rel_diff(forward(model, probe), forward(pruned, probe)) <= 1e-4);
}

TEST_CASE("no_ffn_update keeps exact slices of the original down weights") {
    const auto model = init_random(small_config(), 8);
    const auto calib = synthetic_calib(4, 16, model.config.vocab_size, 9);
    SparsityAllocation alloc;
    alloc.keep_per_layer = 6;
    PruneConfig pc;
    pc.no_ffn_update = true;

    auto pruned = model;
    const auto records = prune_ffn_sequential(pruned, calib, alloc, pc);
    for (int l = 0; l < model.config.n_layers; ++l) {
        const auto& rec = records[static_cast<size_t>(l)];
        REQUIRE(static_cast<long long>(rec.kept_ffn.size()) == 6);
        CHECK(rec.residual_after == rec.residual_before);
        const Matrix expected =
            model.layers[static_cast<size_t>(l)].down.select_rows(rec.kept_ffn);
        CHECK(pruned.layers[static_cast<size_t>(l)].down == expected);
    }
}

TEST_CASE("the least-squares update never loses to the sliced weights") {
    for (uint64_t seed = 0; seed < 5; ++seed) {
        const auto model = init_random(small_config(), 60 + seed);
        const auto calib = synthetic_calib(5, 20, model.config.vocab_size, 70 + seed);
        SparsityAllocation alloc;
        alloc.keep_per_layer = 7;
        PruneConfig pc;

        auto pruned = model;
        const auto records = prune_ffn_sequential(pruned, calib, alloc, pc);
        for (const auto& rec : records) {
            REQUIRE(rec.residuals_valid);
            CHECK(rec.residual_after <= rec.residual_before + 1e-6);
        }
    }
}

TEST_CASE("parallel_update scores against the original model's activations") {
    const auto model = init_random(small_config(), 10);
    const auto calib = synthetic_calib(4, 16, model.config.vocab_size, 11);
    SparsityAllocation alloc;
    alloc.keep_per_layer = 6;

    // Layer 0 choices agree (same input either way); deeper layers see
    // different activations, so the keep sets may diverge.
    PruneConfig sequential;
    auto seq_model = model;
    const auto seq_records = prune_ffn_sequential(seq_model, calib, alloc, sequential);

    PruneConfig parallel;
    parallel.parallel_update = true;
    auto par_model = model;
    const auto par_records = prune_ffn_sequential(par_model, calib, alloc, parallel);

    CHECK(seq_records[0].kept_ffn == par_records[0].kept_ffn);

    // The parallel variant's layer-1 keep set must equal scoring on the
    // ORIGINAL model's taps.
    Matrix stacked(static_cast<int64_t>(calib.sequences.size()) * 16, model.config.d_ff);
    int64_t r = 0;
    for (const auto& seq : calib.sequences) {
        const Matrix z = ffn_tap(model, seq, 1);
        for (int64_t i = 0; i < z.rows(); ++i, ++r) {
            std::copy(z.row_ptr(i), z.row_ptr(i) + z.cols(), stacked.row_ptr(r));
        }
    }
    const auto keep = select_keep(score_ffn_nodes(stacked), 6);
    CHECK(par_records[1].kept_ffn == keep);
}

TEST_CASE("head pruning with zero budget is the identity") {
    const auto model = init_random(small_config(), 12);
    const auto calib = synthetic_calib(2, 12, model.config.vocab_size, 13);
    SparsityAllocation alloc;  // zero heads
    PruneConfig pc;
    auto pruned = model;
    const auto removed = prune_attention_heads(pruned, calib, alloc, pc);
    CHECK(removed.empty());
    CHECK(forward(pruned, calib.sequences[0]) == forward(model, calib.sequences[0]));
}

TEST_CASE("single-head iterations match the clone-and-slice oracle") {
    for (uint64_t seed = 0; seed < 3; ++seed) {
        const auto model = init_random(small_config(), 80 + seed);
        const auto calib = synthetic_calib(2, 16, model.config.vocab_size, 90 + seed);
        PruneConfig pc;
        pc.heads_per_iteration = 1;
        pc.score_sequences = 1;
        SparsityAllocation alloc;
        alloc.n_kv_heads_to_remove = 3;

        auto pruned = model;
        const auto removed = prune_attention_heads(pruned, calib, alloc, pc);
        REQUIRE(removed.size() == 3);

        // Oracle: physically slice every candidate and re-measure.
        auto oracle_model = model;
        const std::vector<std::vector<int32_t>> scoring = {calib.sequences[0]};
        for (int step = 0; step < 3; ++step) {
            double best_ppl = std::numeric_limits<double>::infinity();
            std::pair<int, int> best{-1, -1};
            for (int l = 0; l < oracle_model.config.n_layers; ++l) {
                for (const int k : oracle_model.layers[static_cast<size_t>(l)].live_kv) {
                    auto candidate = oracle_model;
                    candidate.remove_kv_head(l, k);
                    const double ppl = perplexity(candidate, scoring).value;
                    if (ppl < best_ppl) {
                        best_ppl = ppl;
                        best = {l, k};
                    }
                }
            }
            CHECK(removed[static_cast<size_t>(step)] == best);
            oracle_model.remove_kv_head(best.first, best.second);
        }
    }
}

TEST_CASE("head accounting is exact and the budget can empty every layer") {
    const auto model = init_random(small_config(), 14);
    const auto calib = synthetic_calib(2, 12, model.config.vocab_size, 15);
    SparsityAllocation alloc;
    alloc.n_kv_heads_to_remove = 4;  // K * L
    PruneConfig pc;
    auto pruned = model;
    const auto removed = prune_attention_heads(pruned, calib, alloc, pc);
    CHECK(static_cast<long long>(removed.size()) == 4);
    long long gone = 0;
    for (const auto& lw : pruned.layers) {
        gone += pruned.config.n_kv_heads - lw.kv_live();
        CHECK(lw.kv_live() == 0);
    }
    CHECK(gone == alloc.n_kv_heads_to_remove);
    CHECK_NOTHROW(forward(pruned, calib.sequences[0]));
}

TEST_CASE("full_attention removes whole layers") {
    const auto model = init_random(small_config(), 16);
    const auto calib = synthetic_calib(2, 12, model.config.vocab_size, 17);
    SparsityAllocation alloc;
    alloc.n_attn_layers_equiv = 1;
    alloc.n_kv_heads_to_remove = 2;
    PruneConfig pc;
    pc.full_attention = true;
    auto pruned = model;
    const auto removed = prune_attention_heads(pruned, calib, alloc, pc);
    CHECK(removed.size() == 2);
    CHECK(removed[0].first == removed[1].first);  // same layer
    int emptied = 0;
    for (const auto& lw : pruned.layers) emptied += lw.kv_live() == 0 ? 1 : 0;
    CHECK(emptied == 1);
}

TEST_CASE("putri with zero sparsity is byte-identical and perplexity-exact") {
    const auto model = init_random(small_config(), 18);
    const auto calib = synthetic_calib(3, 12, model.config.vocab_size, 19);
    const auto eval_set = synthetic_calib(2, 12, model.config.vocab_size, 20);
    PruneConfig pc;
    pc.target_sparsity = 0.0;
    const PutriResult result = putri::putri(model, calib, eval_set, pc);

    save(model, "pruning_test_orig.putr");
    save(result.model, "pruning_test_zero.putr");
    CHECK(read_file_bytes("pruning_test_orig.putr") == read_file_bytes("pruning_test_zero.putr"));
    CHECK(result.report.ppl_after == result.report.ppl_before);
    CHECK(result.report.achieved_sparsity == 0.0);
}

TEST_CASE("putri hits the target within the granularity bound") {
    const auto model = init_random(ModelConfig::tiny(), 21);
    const auto calib = load_corpus(kCorpus, 64, 8, 1);
    const auto eval_set = load_corpus(kCorpus, 64, 4, 2);
    PruneConfig pc;
    pc.target_sparsity = 0.5;
    const PutriResult result = putri::putri(model, calib, eval_set, pc);

    const auto [f, a] = count_prunable_params(model);
    const double bound =
        static_cast<double>(ffn_node_params(model.config) * model.config.n_layers +
                            grouped_head_params(model.config)) /
        static_cast<double>(f + a);
    CHECK(std::abs(result.report.achieved_sparsity - 0.5) <= bound);
    CHECK(result.report.achieved_sparsity ==
          doctest::Approx(result.report.allocation.predicted_achieved_sparsity).epsilon(1e-12));
}

TEST_CASE("putri reports are deterministic and worker-count independent") {
    const auto model = init_random(small_config(), 22);
    const auto calib = synthetic_calib(4, 16, model.config.vocab_size, 23);
    const auto eval_set = synthetic_calib(2, 16, model.config.vocab_size, 24);
    PruneConfig pc;
    pc.target_sparsity = 0.6;

    const PutriResult a = putri::putri(model, calib, eval_set, pc);
    const PutriResult b = putri::putri(model, calib, eval_set, pc);
    CHECK(report_to_json(a.report) == report_to_json(b.report));

    set_parallel(false);
    const PutriResult serial = putri::putri(model, calib, eval_set, pc);
    set_parallel(true);
    CHECK(report_to_json(a.report) == report_to_json(serial.report));

    save(a.model, "pruning_test_par.putr");
    save(serial.model, "pruning_test_ser.putr");
    CHECK(read_file_bytes("pruning_test_par.putr") == read_file_bytes("pruning_test_ser.putr"));
}

TEST_CASE("report JSON is canonical and internally consistent") {
    const auto model = init_random(small_config(), 25);
    const auto calib = synthetic_calib(4, 16, model.config.vocab_size, 26);
    const auto eval_set = synthetic_calib(2, 16, model.config.vocab_size, 27);
    PruneConfig pc;
    pc.target_sparsity = 0.6;
    PutriResult result = putri::putri(model, calib, eval_set, pc);
    result.report.seeds["data_seed"] = 26;

    const std::string json_text = report_to_json(result.report);
    const auto parsed = nlohmann::json::parse(json_text);

    // Top-level keys arrive in sorted order.
    const char* ordered[] = {"achieved_sparsity", "allocation", "config", "corpus",
                             "layers",            "params",     "perplexity", "seeds", "status"};
    size_t prev = 0;
    for (const char* key : ordered) {
        const size_t pos = json_text.find("\"" + std::string(key) + "\":");
        REQUIRE(pos != std::string::npos);
        CHECK(pos >= prev);
        prev = pos;
    }
    CHECK(json_text.find("wall_clock") == std::string::npos);

    // The achieved sparsity recomputes from the removal lists.
    long long f_after = 0, a_after = 0;
    const auto& cfg = model.config;
    for (const auto& layer : parsed.at("layers")) {
        const auto kept = layer.at("kept_ffn").get<std::vector<int>>();
        const auto removed = layer.at("removed_kv").get<std::vector<int>>();
        const long long kv_live = cfg.n_kv_heads - static_cast<long long>(removed.size());
        f_after += 3ll * cfg.d_model * static_cast<long long>(kept.size());
        a_after += 2ll * cfg.d_model * cfg.head_dim * (1 + cfg.group_size()) * kv_live;
    }
    const auto [f_before, a_before] = count_prunable_params(model);
    const double recomputed =
        1.0 - static_cast<double>(f_after + a_after) / static_cast<double>(f_before + a_before);
    CHECK(format_g6(recomputed) == format_g6(parsed.at("achieved_sparsity").get<double>()));
    CHECK(parsed.at("params").at("after").get<long long>() == f_after + a_after);

    // CSV row shape.
    const std::string header = report_csv_header();
    const std::string row = report_csv_row(result.report);
    CHECK(std::count(header.begin(), header.end(), ',') ==
          std::count(row.begin(), row.end(), ','));
}

TEST_CASE("p_min zero permits full FFN block deletion") {
    const auto model = init_random(ModelConfig::tiny(), 30);
    const auto calib = load_corpus(kCorpus, 64, 4, 1);
    const auto eval_set = load_corpus(kCorpus, 64, 2, 2);
    PruneConfig pc;
    pc.target_sparsity = 0.999;
    pc.p_min = 0;
    const PutriResult result = putri::putri(model, calib, eval_set, pc);
    CHECK(result.report.allocation.keep_per_layer == 0);
    for (const auto& lw : result.model.layers) {
        CHECK(lw.ff_live() == 0);
        CHECK(lw.kv_live() == 0);
    }
    CHECK(result.report.achieved_sparsity == 1.0);  // prunable params all gone
    CHECK(result.report.ppl_after_available);
    CHECK_FALSE(std::isnan(result.report.ppl_after));
}

TEST_CASE("head scoring can use several calibration sequences") {
    const auto model = init_random(small_config(), 31);
    const auto calib = synthetic_calib(3, 12, model.config.vocab_size, 32);
    SparsityAllocation alloc;
    alloc.n_kv_heads_to_remove = 2;
    PruneConfig pc;
    pc.score_sequences = 3;
    auto pruned = model;
    const auto removed = prune_attention_heads(pruned, calib, alloc, pc);
    CHECK(removed.size() == 2);
    pc.score_sequences = 4;  // more than available
    auto again = model;
    CHECK_THROWS_AS(prune_attention_heads(again, calib, alloc, pc), Error);
}

TEST_CASE("the report echoes the resolved heads-per-iteration default") {
    const auto model = init_random(ModelConfig::tiny(), 33);
    const auto calib = synthetic_calib(2, 12, 259, 34);
    PruneConfig pc;
    pc.target_sparsity = 0.0;
    const PutriResult result = putri::putri(model, calib, calib, pc);
    CHECK(result.report.config.heads_per_iteration == model.config.n_kv_heads);
}

TEST_CASE("putri propagates infeasible targets") {
    const auto model = init_random(ModelConfig::tiny(), 28);
    const auto calib = synthetic_calib(2, 12, model.config.vocab_size, 29);
    PruneConfig pc;
    pc.target_sparsity = 0.999;
    CHECK_THROWS_AS(putri::putri(model, calib, calib, pc), InfeasibleTargetError);
}

TEST_CASE("prune config validation") {
    PruneConfig pc;
    pc.target_sparsity = 1.0;
    CHECK_THROWS_AS(pc.validate(), Error);
    pc = PruneConfig{};
    pc.alpha = 0.0;
    CHECK_THROWS_AS(pc.validate(), Error);
    pc = PruneConfig{};
    pc.score_sequences = 0;
    CHECK_THROWS_AS(pc.validate(), Error);
    pc = PruneConfig{};
    pc.ridge = -1.0;
    CHECK_THROWS_AS(pc.validate(), Error);
}
