#include <cmath>
#include <sstream>

#include "putri/pruning.hpp"

namespace putri {

namespace {

// Minimal JSON writer so float formatting and key order stay fixed no
// matter which JSON library version is around.
struct JsonWriter {
    std::ostringstream out;
    bool first_in_scope = true;

    void comma() {
        if (!first_in_scope) out << ",";
        first_in_scope = false;
    }
    void open_object(const char* key = nullptr) {
        comma();
        if (key) out << '"' << key << "\":";
        out << "{";
        first_in_scope = true;
    }
    void close_object() {
        out << "}";
        first_in_scope = false;
    }
    void open_array(const char* key) {
        comma();
        out << '"' << key << "\":[";
        first_in_scope = true;
    }
    void close_array() {
        out << "]";
        first_in_scope = false;
    }
    void key(const char* k) {
        comma();
        out << '"' << k << "\":";
    }
    void number(const char* k, long long v) {
        key(k);
        out << v;
    }
    void number_f(const char* k, double v) {
        key(k);
        out << format_g6(v);
    }
    void boolean(const char* k, bool v) {
        key(k);
        out << (v ? "true" : "false");
    }
    void string(const char* k, const std::string& v) {
        key(k);
        out << '"' << v << '"';
    }
    // Perplexity slot: finite number, "inf", or null when unavailable.
    void ppl(const char* k, double v, bool available) {
        key(k);
        if (!available) {
            out << "null";
        } else if (std::isinf(v)) {
            out << "\"inf\"";
        } else {
            out << format_g6(v);
        }
    }
    void int_array(const char* k, const std::vector<int>& values) {
        open_array(k);
        for (size_t i = 0; i < values.size(); ++i) {
            if (i) out << ",";
            out << values[i];
        }
        close_array();
    }
};

}  // namespace

std::string report_to_json(const PruneReport& report) {
    JsonWriter w;
    w.open_object();
    w.number_f("achieved_sparsity", report.achieved_sparsity);

    w.open_object("allocation");
    w.number("attn_params", report.allocation.attn_params);
    w.number("ffn_params", report.allocation.ffn_params);
    w.number_f("ffn_sparsity", report.allocation.ffn_sparsity);
    w.number("keep_per_layer", report.allocation.keep_per_layer);
    w.number("n_attn_layers_equiv", report.allocation.n_attn_layers_equiv);
    w.number("n_kv_heads_to_remove", report.allocation.n_kv_heads_to_remove);
    w.number_f("predicted_achieved_sparsity", report.allocation.predicted_achieved_sparsity);
    w.close_object();

    w.open_object("config");
    w.number_f("alpha", report.config.alpha);
    w.boolean("full_attention", report.config.full_attention);
    w.number("heads_per_iteration", report.config.heads_per_iteration);
    w.boolean("no_ffn_update", report.config.no_ffn_update);
    w.number("p_min", report.config.p_min);
    w.boolean("parallel_update", report.config.parallel_update);
    w.number_f("ridge", report.config.ridge);
    w.number("score_sequences", report.config.score_sequences);
    w.number_f("target_sparsity", report.config.target_sparsity);
    w.close_object();

    w.open_object("corpus");
    w.string("calib_digest", report.calib_digest);
    w.string("eval_digest", report.eval_digest);
    w.close_object();

    w.open_array("layers");
    for (const auto& rec : report.layers) {
        w.open_object();
        w.number_f("final_ridge", rec.final_ridge);
        w.int_array("kept_ffn", rec.kept_ffn);
        w.int_array("removed_kv", rec.removed_kv);
        if (rec.residuals_valid) {
            w.number_f("residual_after", rec.residual_after);
            w.number_f("residual_before", rec.residual_before);
        } else {
            w.key("residual_after");
            w.out << "null";
            w.key("residual_before");
            w.out << "null";
        }
        w.number("ridge_escalations", rec.ridge_escalations);
        w.close_object();
    }
    w.close_array();

    w.open_object("params");
    w.number("after", report.params_after);
    w.number("before", report.params_before);
    w.close_object();

    w.open_object("perplexity");
    w.ppl("after", report.ppl_after, report.ppl_after_available);
    w.ppl("before", report.ppl_before, report.ppl_before_available);
    w.close_object();

    w.open_object("seeds");
    for (const auto& [name, value] : report.seeds) w.number(name.c_str(), value);
    w.close_object();

    w.string("status", report.status);
    w.close_object();
    w.out << "\n";
    return w.out.str();
}

std::string report_csv_header() {
    return "target_sparsity,alpha,p_min,heads_per_iteration,score_sequences,ridge,"
           "no_ffn_update,parallel_update,full_attention,n_attn_layers_equiv,"
           "n_kv_heads_to_remove,keep_per_layer,ffn_sparsity,predicted_achieved_sparsity,"
           "achieved_sparsity,params_before,params_after,ppl_before,ppl_after,status\n";
}

std::string report_csv_row(const PruneReport& r) {
    std::ostringstream out;
    const auto ppl = [](double v, bool available) {
        if (!available) return std::string("nan");
        return format_g6(v);
    };
    out << format_g6(r.config.target_sparsity) << "," << format_g6(r.config.alpha) << ","
        << r.config.p_min << "," << r.config.heads_per_iteration << ","
        << r.config.score_sequences << "," << format_g6(r.config.ridge) << ","
        << (r.config.no_ffn_update ? 1 : 0) << "," << (r.config.parallel_update ? 1 : 0) << ","
        << (r.config.full_attention ? 1 : 0) << "," << r.allocation.n_attn_layers_equiv << ","
        << r.allocation.n_kv_heads_to_remove << "," << r.allocation.keep_per_layer << ","
        << format_g6(r.allocation.ffn_sparsity) << ","
        << format_g6(r.allocation.predicted_achieved_sparsity) << ","
        << format_g6(r.achieved_sparsity) << "," << r.params_before << "," << r.params_after
        << "," << ppl(r.ppl_before, r.ppl_before_available) << ","
        << ppl(r.ppl_after, r.ppl_after_available) << "," << r.status << "\n";
    return out.str();
}

}  // namespace putri
