#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "putri/common.hpp"
#include "putri/data.hpp"
#include "putri/model.hpp"
#include "putri/model_io.hpp"

using namespace putri;

namespace {

const std::string kCli = PUTRI_CLI_PATH;
const std::string kCorpus = std::string(PUTRI_FIXTURE_DIR) + "/corpus.txt";

struct RunResult {
    int exit_code;
    std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
    const std::string out_path = "cli_out.txt";
    const std::string cmd = kCli + " " + args + " > " + out_path + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream f(out_path);
    std::stringstream ss;
    ss << f.rdbuf();
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return {code, ss.str()};
}

// Small enough that CLI invocations stay fast.
const std::string kDataFlags = " --seq-len 48 --n-seqs 6 --eval-n-seqs 3";

void make_tiny(const std::string& out) {
    const RunResult r = run_cli("make-toy --config tiny --seed 7 --out " + out);
    REQUIRE(r.exit_code == 0);
}

}  // namespace

TEST_CASE("make-toy is deterministic and reports param counts") {
    const RunResult a = run_cli("make-toy --config tiny --seed 7 --out cli_toy_a.putr");
    const RunResult b = run_cli("make-toy --config tiny --seed 7 --out cli_toy_b.putr");
    REQUIRE(a.exit_code == 0);
    REQUIRE(b.exit_code == 0);
    CHECK(read_file_bytes("cli_toy_a.putr") == read_file_bytes("cli_toy_b.putr"));
    CHECK(a.output.find("F=196608") != std::string::npos);
    CHECK(a.output.find("A=40960") != std::string::npos);
}

TEST_CASE("make-toy trains when asked and logs the loss drop") {
    const RunResult r = run_cli("make-toy --config tiny --seed 7 --train-steps 30 --corpus " +
                                kCorpus + " --out cli_toy_trained.putr");
    REQUIRE(r.exit_code == 0);
    const size_t init_pos = r.output.find("initial=");
    const size_t final_pos = r.output.find("final=");
    REQUIRE(init_pos != std::string::npos);
    REQUIRE(final_pos != std::string::npos);
    const double init_loss = std::stod(r.output.substr(init_pos + 8));
    const double final_loss = std::stod(r.output.substr(final_pos + 6));
    CHECK(final_loss < init_loss);
}

TEST_CASE("make-toy rejects unknown presets with exit 1") {
    const RunResult r = run_cli("make-toy --config nosuchpreset --out cli_x.putr");
    CHECK(r.exit_code == 2);  // runtime config error
    const RunResult r2 = run_cli("make-toy --bogus-flag 1 --out cli_x.putr");
    CHECK(r2.exit_code == 1);  // parse error
}

TEST_CASE("prune at sparsity zero reproduces the input file") {
    make_tiny("cli_sz.putr");
    const RunResult r = run_cli("prune --model cli_sz.putr --calib " + kCorpus +
                                " --sparsity 0 --out cli_sz_out.putr" + kDataFlags);
    REQUIRE(r.exit_code == 0);
    CHECK(read_file_bytes("cli_sz.putr") == read_file_bytes("cli_sz_out.putr"));
}

TEST_CASE("prune writes a report whose allocation recomputes by hand") {
    make_tiny("cli_pr.putr");
    const RunResult r = run_cli("prune --model cli_pr.putr --calib " + kCorpus +
                                " --sparsity 0.5 --alpha 1.5 --out cli_pr_out.putr "
                                "--report cli_pr_report.json" +
                                kDataFlags);
    REQUIRE(r.exit_code == 0);

    std::ifstream f("cli_pr_report.json");
    const auto report = nlohmann::json::parse(f);
    // Tiny preset: F = 196608, A = 40960, exponent = F / (1.5 A) = 3.2.
    //   N_Attn = round(4 * 0.5^3.2) = round(0.4353) = 0 -> no heads removed
    //   s_ffn  = 0.5 * 237568 / 196608 = 0.604167
    //   P      = round((1 - 0.604167) * 256) = round(101.33) = 101
    CHECK(report.at("allocation").at("n_attn_layers_equiv").get<int>() == 0);
    CHECK(report.at("allocation").at("n_kv_heads_to_remove").get<int>() == 0);
    CHECK(report.at("allocation").at("keep_per_layer").get<int>() == 101);
    CHECK(report.at("allocation").at("ffn_sparsity").get<double>() ==
          doctest::Approx(0.604167).epsilon(1e-6));
    CHECK(report.at("status").get<std::string>() == "ok");
}

TEST_CASE("prune reports infeasible targets with exit 2 and a failure report") {
    make_tiny("cli_inf.putr");
    const RunResult r = run_cli("prune --model cli_inf.putr --calib " + kCorpus +
                                " --sparsity 0.999 --out cli_inf_out.putr "
                                "--report cli_inf_report.json" +
                                kDataFlags);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("maximum achievable") != std::string::npos);
    std::ifstream f("cli_inf_report.json");
    const auto report = nlohmann::json::parse(f);
    CHECK(report.at("status").get<std::string>().find("infeasible") == 0);
}

TEST_CASE("prune runs are reproducible byte for byte") {
    make_tiny("cli_det.putr");
    const std::string flags = "prune --model cli_det.putr --calib " + kCorpus +
                              " --sparsity 0.75 --data-seed 3" + kDataFlags;
    const RunResult a =
        run_cli(flags + " --out cli_det_a.putr --report cli_det_a.json");
    const RunResult b =
        run_cli(flags + " --out cli_det_b.putr --report cli_det_b.json");
    REQUIRE(a.exit_code == 0);
    REQUIRE(b.exit_code == 0);
    CHECK(read_file_bytes("cli_det_a.putr") == read_file_bytes("cli_det_b.putr"));
    CHECK(read_file_bytes("cli_det_a.json") == read_file_bytes("cli_det_b.json"));
}

TEST_CASE("eval-ppl prints identical values for identical models") {
    make_tiny("cli_ev.putr");
    const RunResult pruned = run_cli("prune --model cli_ev.putr --calib " + kCorpus +
                                     " --sparsity 0 --out cli_ev0.putr" + kDataFlags);
    REQUIRE(pruned.exit_code == 0);
    const std::string eval_flags = " --data " + kCorpus + " --seq-len 48 --n-seqs 4 --seed 5";
    const RunResult a = run_cli("eval-ppl --model cli_ev.putr" + eval_flags);
    const RunResult b = run_cli("eval-ppl --model cli_ev0.putr" + eval_flags);
    REQUIRE(a.exit_code == 0);
    const size_t pa = a.output.find("perplexity:");
    const size_t pb = b.output.find("perplexity:");
    REQUIRE(pa != std::string::npos);
    CHECK(a.output.substr(pa) == b.output.substr(pb));
}

TEST_CASE("eval-ppl prints the vocabulary size for a uniform-logit model") {
    // A zero-weight model emits uniform logits; build it through the library.
    auto model = init_random(ModelConfig::tiny(), 1);
    const auto zero = [](Matrix& m) { std::fill(m.data(), m.data() + m.size(), 0.0f); };
    zero(model.tok_embedding);
    zero(model.lm_head);
    for (auto& lw : model.layers) {
        zero(lw.wq);
        zero(lw.wk);
        zero(lw.wv);
        zero(lw.wo);
        zero(lw.gate);
        zero(lw.up);
        zero(lw.down);
    }
    save(model, "cli_uniform.putr");
    const RunResult r =
        run_cli("eval-ppl --model cli_uniform.putr --data " + kCorpus + " --n-seqs 2");
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("perplexity: 259.000") != std::string::npos);
}

TEST_CASE("eval-ppl exits 2 on a corrupted model file") {
    make_tiny("cli_corrupt.putr");
    auto bytes = read_file_bytes("cli_corrupt.putr");
    bytes.resize(bytes.size() - 512);
    std::ofstream f("cli_corrupt.putr", std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    f.close();
    const RunResult r = run_cli("eval-ppl --model cli_corrupt.putr --data " + kCorpus);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("truncated") != std::string::npos);
}

TEST_CASE("ablate emits one row per variant and a byte-exact header") {
    make_tiny("cli_ab.putr");
    const RunResult r = run_cli("ablate --model cli_ab.putr --calib " + kCorpus +
                                " --sparsities 0.5 --seeds 1 --out-csv cli_ab.csv" + kDataFlags);
    REQUIRE(r.exit_code == 0);
    std::ifstream f("cli_ab.csv");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(line);
    REQUIRE(lines.size() == 5);  // header + 4 variants
    CHECK(lines[0] == "variant,sparsity,seed,achieved,ppl");
    CHECK(lines[1].substr(0, 6) == "putri,");
    CHECK(lines[2].substr(0, 14) == "no_ffn_update,");
    CHECK(lines[3].substr(0, 16) == "parallel_update,");
    CHECK(lines[4].substr(0, 15) == "full_attention,");
}

TEST_CASE("inspect shows live counts and round-trips JSON") {
    make_tiny("cli_insp.putr");
    const RunResult r = run_cli("inspect --model cli_insp.putr");
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("kv_live") != std::string::npos);
    CHECK(r.output.find("0        2          256") != std::string::npos);

    const RunResult rj = run_cli("inspect --model cli_insp.putr --json");
    REQUIRE(rj.exit_code == 0);
    const auto j = nlohmann::json::parse(rj.output);
    CHECK(j.at("layers").size() == 4);
    CHECK(j.at("layers").at(0).at("kv_live").get<int>() == 2);
    CHECK(j.at("layers").at(0).at("ff_live").get<int>() == 256);
    CHECK(nlohmann::json::parse(j.dump()) == j);

    // After pruning, inspect reflects the reduced structure.
    const RunResult pr = run_cli("prune --model cli_insp.putr --calib " + kCorpus +
                                 " --sparsity 0.5 --out cli_insp2.putr" + kDataFlags);
    REQUIRE(pr.exit_code == 0);
    const RunResult r2 = run_cli("inspect --model cli_insp2.putr --json");
    const auto j2 = nlohmann::json::parse(r2.output);
    CHECK(j2.at("layers").at(0).at("ff_live").get<int>() < 256);
}

TEST_CASE("ablate exits 2 when every row fails") {
    make_tiny("cli_abfail.putr");
    const RunResult r = run_cli("ablate --model cli_abfail.putr --calib no_such_corpus.txt "
                                "--sparsities 0.5 --seeds 1 --out-csv cli_abfail.csv");
    CHECK(r.exit_code == 2);
    std::ifstream f("cli_abfail.csv");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(line);
    REQUIRE(lines.size() == 5);
    CHECK(lines[1] == "putri,0.5,1,nan,nan");
}

TEST_CASE("thread count does not change prune outputs") {
    make_tiny("cli_thr.putr");
    const std::string flags = "prune --model cli_thr.putr --calib " + kCorpus +
                              " --sparsity 0.75 --data-seed 2" + kDataFlags;
    REQUIRE(run_cli("--threads 1 " + flags + " --out cli_thr1.putr --report cli_thr1.json")
                .exit_code == 0);
    REQUIRE(run_cli("--threads 2 " + flags + " --out cli_thr2.putr --report cli_thr2.json")
                .exit_code == 0);
    CHECK(read_file_bytes("cli_thr1.putr") == read_file_bytes("cli_thr2.putr"));
    CHECK(read_file_bytes("cli_thr1.json") == read_file_bytes("cli_thr2.json"));
}

TEST_CASE("unknown flags and missing subcommands exit 1") {
    CHECK(run_cli("").exit_code == 1);
    CHECK(run_cli("prune --model x --calib y --sparsity 0 --nonsense").exit_code == 1);
    CHECK(run_cli("--help").exit_code == 0);
}
