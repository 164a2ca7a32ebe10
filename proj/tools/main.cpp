#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "putri/data.hpp"
#include "putri/eval.hpp"
#include "putri/model.hpp"
#include "putri/model_io.hpp"
#include "putri/parallel.hpp"
#include "putri/pruning.hpp"
#include "putri/train.hpp"

namespace {

using nlohmann::json;

constexpr uint64_t kEvalSeedOffset = 7919;  // eval windows come from a shifted seed stream

putri::ModelConfig config_from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw putri::IoError("cannot open config file: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw putri::FormatError(std::string("config parse error: ") + e.what());
    }
    putri::ModelConfig c;
    try {
        c.d_model = j.at("d_model").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.n_q_heads = j.at("n_q_heads").get<int>();
        c.n_kv_heads = j.at("n_kv_heads").get<int>();
        c.head_dim = j.at("head_dim").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        if (j.contains("rope_theta")) c.rope_theta = j.at("rope_theta").get<double>();
        if (j.contains("norm_eps")) c.norm_eps = j.at("norm_eps").get<double>();
        if (j.contains("ffn_kind")) {
            c.ffn_kind = putri::ffn_kind_from_string(j.at("ffn_kind").get<std::string>());
        }
        if (j.contains("max_context")) c.max_context = j.at("max_context").get<int>();
    } catch (const json::exception& e) {
        throw putri::FormatError(std::string("config field error: ") + e.what());
    }
    return c;
}

putri::ModelConfig resolve_config(const std::string& spec) {
    if (spec == "tiny") return putri::ModelConfig::tiny();
    if (spec.find('.') == std::string::npos && spec.find('/') == std::string::npos) {
        throw putri::Error("unknown preset: " + spec + " (presets: tiny)");
    }
    return config_from_file(spec);
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw putri::IoError("cannot open for writing: " + path);
    f << text;
    if (!f) throw putri::IoError("write failed: " + path);
}

std::string ppl_display(double v, bool available) {
    if (!available) return "nan";
    return putri::format_g6_padded(v);
}

struct DataFlags {
    std::string calib_path;
    int seq_len = 128;
    int n_seqs = 32;
    int eval_n_seqs = 16;
    long long data_seed = 1;
    long long eval_seed = -1;  // -1: data_seed + kEvalSeedOffset

    long long resolved_eval_seed() const {
        return eval_seed >= 0 ? eval_seed : data_seed + static_cast<long long>(kEvalSeedOffset);
    }
};

struct PruneVariantFlags {
    double sparsity = 0.0;
    double alpha = 1.5;
    int p_min = 1;
    int heads_per_iter = 0;
    int score_seqs = 1;
    double ridge = 0.0;
    bool no_ffn_update = false;
    bool parallel_update = false;
    bool full_attention = false;

    putri::PruneConfig to_config() const {
        putri::PruneConfig pc;
        pc.target_sparsity = sparsity;
        pc.alpha = alpha;
        pc.p_min = p_min;
        pc.heads_per_iteration = heads_per_iter;
        pc.score_sequences = score_seqs;
        pc.ridge = ridge;
        pc.no_ffn_update = no_ffn_update;
        pc.parallel_update = parallel_update;
        pc.full_attention = full_attention;
        return pc;
    }
};

int cmd_make_toy(const std::string& config_spec, uint64_t seed, int train_steps, double lr,
                 const std::string& corpus, const std::string& out) {
    const putri::ModelConfig cfg = resolve_config(config_spec);
    cfg.validate();
    std::cout << "config: preset=" << config_spec << " d_model=" << cfg.d_model
              << " n_layers=" << cfg.n_layers << " n_q_heads=" << cfg.n_q_heads
              << " n_kv_heads=" << cfg.n_kv_heads << " head_dim=" << cfg.head_dim
              << " d_ff=" << cfg.d_ff << " vocab=" << cfg.vocab_size
              << " ffn_kind=" << putri::to_string(cfg.ffn_kind) << " seed=" << seed
              << " train_steps=" << train_steps << " lr=" << putri::format_g6(lr) << "\n";

    putri::ToyTransformer model = putri::init_random(cfg, seed);
    const auto [f, a] = putri::count_prunable_params(model);
    std::cout << "params: F=" << f << " A=" << a << "\n";

    if (train_steps > 0) {
        if (corpus.empty()) throw putri::Error("--train-steps requires --corpus");
        const auto stream = putri::load_token_stream(corpus, cfg.vocab_size);
        const putri::TrainStats stats =
            putri::train_toy(model, stream, train_steps, lr, seed ^ 0x747261696eull);
        std::cout << "loss: initial=" << putri::format_g6(stats.initial_loss)
                  << " final=" << putri::format_g6(stats.final_loss) << "\n";
    }
    putri::save(model, out);
    std::cout << "wrote " << out << " (digest " << putri::file_digest(out) << ")\n";
    return 0;
}

int cmd_prune(const std::string& model_path, const DataFlags& data, const PruneVariantFlags& flags,
              const std::string& out, const std::string& report_path,
              const std::string& report_csv_path) {
    const putri::ToyTransformer model = putri::load(model_path);
    const putri::CalibrationSet calib =
        putri::load_corpus(data.calib_path, data.seq_len, data.n_seqs,
                           static_cast<uint64_t>(data.data_seed), model.config.vocab_size);
    const putri::CalibrationSet eval_set =
        putri::load_corpus(data.calib_path, data.seq_len, data.eval_n_seqs,
                           static_cast<uint64_t>(data.resolved_eval_seed()),
                           model.config.vocab_size);
    std::cout << "config: model=" << model_path << " calib=" << data.calib_path
              << " sparsity=" << putri::format_g6(flags.sparsity)
              << " alpha=" << putri::format_g6(flags.alpha) << " p_min=" << flags.p_min
              << " heads_per_iter=" << flags.heads_per_iter << " score_seqs=" << flags.score_seqs
              << " ridge=" << putri::format_g6(flags.ridge)
              << " no_ffn_update=" << flags.no_ffn_update
              << " parallel_update=" << flags.parallel_update
              << " full_attention=" << flags.full_attention << " seq_len=" << data.seq_len
              << " n_seqs=" << data.n_seqs << " eval_n_seqs=" << data.eval_n_seqs
              << " data_seed=" << data.data_seed << " eval_seed=" << data.resolved_eval_seed()
              << "\n";

    putri::PruneReport failure_report;
    failure_report.config = flags.to_config();
    failure_report.calib_digest = calib.source_digest;
    failure_report.eval_digest = eval_set.source_digest;
    failure_report.seeds["data_seed"] = data.data_seed;
    failure_report.seeds["eval_seed"] = data.resolved_eval_seed();

    try {
        putri::PutriResult result = putri::putri(model, calib, eval_set, flags.to_config());
        result.report.seeds["data_seed"] = data.data_seed;
        result.report.seeds["eval_seed"] = data.resolved_eval_seed();
        putri::save(result.model, out);
        if (!report_path.empty()) {
            write_text_file(report_path, putri::report_to_json(result.report));
        }
        if (!report_csv_path.empty()) {
            write_text_file(report_csv_path,
                            putri::report_csv_header() + putri::report_csv_row(result.report));
        }
        std::cout << "pruned: target=" << putri::format_g6(flags.sparsity)
                  << " achieved=" << putri::format_g6(result.report.achieved_sparsity) << " ppl "
                  << ppl_display(result.report.ppl_before, result.report.ppl_before_available)
                  << " -> "
                  << ppl_display(result.report.ppl_after, result.report.ppl_after_available)
                  << "\n";
        std::cout << "wall_clock_seconds: " << result.report.wall_clock_seconds << "\n";
        return 0;
    } catch (const putri::InfeasibleTargetError& e) {
        failure_report.status = std::string("infeasible: ") + e.what();
        if (!report_path.empty()) {
            write_text_file(report_path, putri::report_to_json(failure_report));
        }
        if (!report_csv_path.empty()) {
            write_text_file(report_csv_path,
                            putri::report_csv_header() + putri::report_csv_row(failure_report));
        }
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int cmd_eval_ppl(const std::string& model_path, const std::string& data_path, int seq_len,
                 int n_seqs, long long seed) {
    const putri::ToyTransformer model = putri::load(model_path);
    const putri::CalibrationSet set = putri::load_corpus(
        data_path, seq_len, n_seqs, static_cast<uint64_t>(seed), model.config.vocab_size);
    std::cout << "config: model=" << model_path << " data=" << data_path
              << " seq_len=" << seq_len << " n_seqs=" << n_seqs << " seed=" << seed << "\n";
    const putri::PerplexityResult r = putri::perplexity(model, set.sequences);
    if (r.infinite) {
        std::cout << "perplexity: inf\n";
    } else {
        std::cout << "perplexity: " << putri::format_g6_padded(r.value) << "\n";
    }
    return 0;
}

int cmd_ablate(const std::string& model_path, const DataFlags& data,
               const PruneVariantFlags& base, const std::vector<double>& sparsities,
               const std::vector<long long>& seeds, const std::string& out_csv) {
    const putri::ToyTransformer model = putri::load(model_path);
    std::cout << "config: model=" << model_path << " calib=" << data.calib_path
              << " variants=4 sparsities=" << sparsities.size() << " seeds=" << seeds.size()
              << "\n";

    static const char* kVariants[] = {"putri", "no_ffn_update", "parallel_update",
                                      "full_attention"};
    std::ostringstream csv;
    csv << "variant,sparsity,seed,achieved,ppl\n";
    int successes = 0;

    for (int v = 0; v < 4; ++v) {
        for (const double s : sparsities) {
            for (const long long seed : seeds) {
                PruneVariantFlags flags = base;
                flags.sparsity = s;
                flags.no_ffn_update = (v == 1);
                flags.parallel_update = (v == 2);
                flags.full_attention = (v == 3);
                std::string achieved = "nan";
                std::string ppl = "nan";
                try {
                    const putri::CalibrationSet calib = putri::load_corpus(
                        data.calib_path, data.seq_len, data.n_seqs, static_cast<uint64_t>(seed),
                        model.config.vocab_size);
                    const putri::CalibrationSet eval_set = putri::load_corpus(
                        data.calib_path, data.seq_len, data.eval_n_seqs,
                        static_cast<uint64_t>(seed + static_cast<long long>(kEvalSeedOffset)),
                        model.config.vocab_size);
                    const putri::PutriResult res =
                        putri::putri(model, calib, eval_set, flags.to_config());
                    achieved = putri::format_g6(res.report.achieved_sparsity);
                    ppl = res.report.ppl_after_available ? putri::format_g6(res.report.ppl_after)
                                                         : "nan";
                    ++successes;
                } catch (const putri::Error& e) {
                    std::cerr << "row failed (" << kVariants[v] << ", s=" << putri::format_g6(s)
                              << ", seed=" << seed << "): " << e.what() << "\n";
                }
                csv << kVariants[v] << "," << putri::format_g6(s) << "," << seed << ","
                    << achieved << "," << ppl << "\n";
            }
        }
    }
    write_text_file(out_csv, csv.str());
    std::cout << "wrote " << out_csv << " (" << 4 * sparsities.size() * seeds.size() << " rows, "
              << successes << " succeeded)\n";
    return successes > 0 ? 0 : 2;
}

int cmd_inspect(const std::string& model_path, bool as_json) {
    const putri::ToyTransformer model = putri::load(model_path);
    const auto [f, a] = putri::count_prunable_params(model);
    const std::string digest = putri::file_digest(model_path);
    const putri::ModelConfig& c = model.config;

    if (as_json) {
        json j;
        j["config"] = {{"d_model", c.d_model},       {"n_layers", c.n_layers},
                       {"n_q_heads", c.n_q_heads},   {"n_kv_heads", c.n_kv_heads},
                       {"head_dim", c.head_dim},     {"d_ff", c.d_ff},
                       {"vocab_size", c.vocab_size}, {"rope_theta", c.rope_theta},
                       {"norm_eps", c.norm_eps},     {"ffn_kind", putri::to_string(c.ffn_kind)},
                       {"max_context", c.max_context}};
        json layers = json::array();
        for (const auto& lw : model.layers) {
            layers.push_back({{"kv_live", lw.kv_live()}, {"ff_live", lw.ff_live()}});
        }
        j["layers"] = layers;
        j["params"] = {{"ffn", f}, {"attn", a}, {"total", putri::total_params(model)}};
        j["digest"] = digest;
        std::cout << j.dump(2) << "\n";
        return 0;
    }

    std::cout << "model: " << model_path << "\n";
    std::cout << "digest: " << digest << "\n";
    std::cout << "config: d_model=" << c.d_model << " n_layers=" << c.n_layers
              << " n_q_heads=" << c.n_q_heads << " n_kv_heads=" << c.n_kv_heads
              << " head_dim=" << c.head_dim << " d_ff=" << c.d_ff << " vocab=" << c.vocab_size
              << " ffn_kind=" << putri::to_string(c.ffn_kind) << "\n";
    std::cout << "params: F=" << f << " A=" << a << " total=" << putri::total_params(model)
              << "\n";
    std::printf("%-8s %-10s %-10s\n", "layer", "kv_live", "ff_live");
    for (size_t l = 0; l < model.layers.size(); ++l) {
        std::printf("%-8zu %-10d %-10d\n", l, model.layers[l].kv_live(),
                    model.layers[l].ff_live());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"structured pruning for a desk-scale GQA transformer"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "worker threads (0 = runtime default)");

    auto* make_toy = app.add_subcommand("make-toy", "create (and optionally train) a toy model");
    std::string mt_config = "tiny", mt_corpus, mt_out;
    uint64_t mt_seed = 7;
    int mt_steps = 0;
    double mt_lr = 0.2;
    make_toy->add_option("--config", mt_config, "preset name (tiny) or JSON config path");
    make_toy->add_option("--seed", mt_seed, "PRNG seed for init and training");
    make_toy->add_option("--train-steps", mt_steps, "SGD steps (0 = untrained)");
    make_toy->add_option("--lr", mt_lr, "SGD learning rate");
    make_toy->add_option("--corpus", mt_corpus, "training corpus (text or .tok)");
    make_toy->add_option("--out", mt_out, "output model path")->required();

    auto* prune = app.add_subcommand("prune", "run the pruning pipeline");
    std::string pr_model, pr_out = "pruned.putr", pr_report, pr_report_csv;
    DataFlags pr_data;
    PruneVariantFlags pr_flags;
    prune->add_option("--model", pr_model, "input model")->required();
    prune->add_option("--calib", pr_data.calib_path, "calibration corpus")->required();
    prune->add_option("--sparsity", pr_flags.sparsity, "target sparsity in [0,1)")->required();
    prune->add_option("--alpha", pr_flags.alpha, "attention/FFN split exponent scale");
    prune->add_option("--p-min", pr_flags.p_min, "minimum kept FFN nodes per layer");
    prune->add_option("--heads-per-iter", pr_flags.heads_per_iter,
                      "grouped heads removed per iteration (0 = n_kv_heads)");
    prune->add_option("--score-seqs", pr_flags.score_seqs,
                      "calibration sequences per head-candidate perplexity");
    prune->add_option("--ridge", pr_flags.ridge, "initial reconstruction regularizer");
    prune->add_flag("--no-ffn-update", pr_flags.no_ffn_update, "ablation: skip the down update");
    prune->add_flag("--parallel-update", pr_flags.parallel_update,
                    "ablation: taps from the original model");
    prune->add_flag("--full-attention", pr_flags.full_attention,
                    "ablation: remove whole attention sub-blocks");
    prune->add_option("--seq-len", pr_data.seq_len, "calibration sequence length");
    prune->add_option("--n-seqs", pr_data.n_seqs, "calibration sequences");
    prune->add_option("--eval-n-seqs", pr_data.eval_n_seqs, "held-out eval sequences");
    prune->add_option("--data-seed", pr_data.data_seed, "calibration window seed");
    prune->add_option("--eval-seed", pr_data.eval_seed,
                      "eval window seed (-1 = data-seed + 7919)");
    prune->add_option("--out", pr_out, "pruned model path");
    prune->add_option("--report", pr_report, "canonical JSON report path");
    prune->add_option("--report-csv", pr_report_csv, "flat CSV report path");

    auto* eval_ppl = app.add_subcommand("eval-ppl", "corpus perplexity of a model");
    std::string ev_model, ev_data;
    int ev_seq_len = 128, ev_n_seqs = 32;
    long long ev_seed = 1;
    eval_ppl->add_option("--model", ev_model, "model path")->required();
    eval_ppl->add_option("--data", ev_data, "evaluation corpus")->required();
    eval_ppl->add_option("--seq-len", ev_seq_len, "sequence length");
    eval_ppl->add_option("--n-seqs", ev_n_seqs, "sequence count");
    eval_ppl->add_option("--seed", ev_seed, "window seed");

    auto* ablate = app.add_subcommand("ablate", "sweep the four pipeline variants");
    std::string ab_model, ab_out_csv;
    DataFlags ab_data;
    PruneVariantFlags ab_flags;
    std::vector<double> ab_sparsities;
    std::vector<long long> ab_seeds;
    ablate->add_option("--model", ab_model, "input model")->required();
    ablate->add_option("--calib", ab_data.calib_path, "calibration corpus")->required();
    ablate->add_option("--sparsities", ab_sparsities, "target sparsities")
        ->required()
        ->delimiter(',');
    ablate->add_option("--seeds", ab_seeds, "data seeds")->required()->delimiter(',');
    ablate->add_option("--alpha", ab_flags.alpha, "attention/FFN split exponent scale");
    ablate->add_option("--p-min", ab_flags.p_min, "minimum kept FFN nodes per layer");
    ablate->add_option("--heads-per-iter", ab_flags.heads_per_iter,
                       "grouped heads removed per iteration (0 = n_kv_heads)");
    ablate->add_option("--score-seqs", ab_flags.score_seqs,
                       "calibration sequences per head-candidate perplexity");
    ablate->add_option("--ridge", ab_flags.ridge, "initial reconstruction regularizer");
    ablate->add_option("--seq-len", ab_data.seq_len, "calibration sequence length");
    ablate->add_option("--n-seqs", ab_data.n_seqs, "calibration sequences");
    ablate->add_option("--eval-n-seqs", ab_data.eval_n_seqs, "held-out eval sequences");
    ablate->add_option("--out-csv", ab_out_csv, "output CSV path")->required();

    auto* inspect = app.add_subcommand("inspect", "print model structure");
    std::string in_model;
    bool in_json = false;
    inspect->add_option("--model", in_model, "model path")->required();
    inspect->add_flag("--json", in_json, "JSON output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    putri::set_threads(threads);

    try {
        if (*make_toy) return cmd_make_toy(mt_config, mt_seed, mt_steps, mt_lr, mt_corpus, mt_out);
        if (*prune) return cmd_prune(pr_model, pr_data, pr_flags, pr_out, pr_report, pr_report_csv);
        if (*eval_ppl) return cmd_eval_ppl(ev_model, ev_data, ev_seq_len, ev_n_seqs, ev_seed);
        if (*ablate) {
            return cmd_ablate(ab_model, ab_data, ab_flags, ab_sparsities, ab_seeds, ab_out_csv);
        }
        if (*inspect) return cmd_inspect(in_model, in_json);
    } catch (const putri::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
