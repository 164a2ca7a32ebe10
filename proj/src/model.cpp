#include "putri/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "putri/linalg.hpp"
#include "putri/parallel.hpp"
#include "putri/rng.hpp"

namespace putri {

std::string to_string(FfnKind k) { return k == FfnKind::gated ? "gated" : "plain"; }

FfnKind ffn_kind_from_string(const std::string& s) {
    if (s == "gated") return FfnKind::gated;
    if (s == "plain") return FfnKind::plain;
    throw FormatError("unknown ffn_kind: " + s);
}

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v < 1) throw Error(std::string(name) + " must be >= 1");
    };
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_q_heads, "n_q_heads");
    positive(n_kv_heads, "n_kv_heads");
    positive(head_dim, "head_dim");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(max_context, "max_context");
    if (n_q_heads % n_kv_heads != 0) throw Error("n_q_heads must be divisible by n_kv_heads");
    if (d_model != n_q_heads * head_dim) throw Error("d_model must equal n_q_heads * head_dim");
    if (head_dim % 2 != 0) throw Error("head_dim must be even (rotary pairs)");
    if (!(rope_theta > 0.0)) throw Error("rope_theta must be positive");
    if (!(norm_eps >= 0.0)) throw Error("norm_eps must be >= 0");
}

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.d_model = 64;
    c.n_layers = 4;
    c.n_q_heads = 8;
    c.n_kv_heads = 2;
    c.head_dim = 8;
    c.d_ff = 256;
    c.vocab_size = 259;
    return c;
}

HeadMask HeadMask::all_live(const ToyTransformer& model) {
    HeadMask m;
    m.active.resize(model.layers.size());
    for (size_t l = 0; l < model.layers.size(); ++l) {
        m.active[l].assign(static_cast<size_t>(model.config.n_kv_heads), 0);
        for (int k : model.layers[l].live_kv) m.active[l][static_cast<size_t>(k)] = 1;
    }
    return m;
}

namespace {

void fill_uniform(Matrix& m, Rng& rng, int fan_in) {
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    for (int64_t i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<float>(rng.next_symmetric(bound));
    }
}

}  // namespace

ToyTransformer init_random(const ModelConfig& config, uint64_t seed) {
    config.validate();
    ToyTransformer model;
    model.config = config;
    Rng rng(seed);

    const int d = config.d_model;
    const int hd = config.head_dim;
    const int ffd = config.d_ff;

    model.tok_embedding = Matrix(config.vocab_size, d);
    fill_uniform(model.tok_embedding, rng, d);

    model.layers.resize(static_cast<size_t>(config.n_layers));
    for (auto& layer : model.layers) {
        layer.attn_norm.assign(static_cast<size_t>(d), 1.0f);
        layer.ffn_norm.assign(static_cast<size_t>(d), 1.0f);
        layer.wq = Matrix(d, config.n_q_heads * hd);
        layer.wk = Matrix(d, config.n_kv_heads * hd);
        layer.wv = Matrix(d, config.n_kv_heads * hd);
        layer.wo = Matrix(config.n_q_heads * hd, d);
        fill_uniform(layer.wq, rng, d);
        fill_uniform(layer.wk, rng, d);
        fill_uniform(layer.wv, rng, d);
        fill_uniform(layer.wo, rng, config.n_q_heads * hd);
        layer.gate = Matrix(d, ffd);
        fill_uniform(layer.gate, rng, d);
        if (config.ffn_kind == FfnKind::gated) {
            layer.up = Matrix(d, ffd);
            fill_uniform(layer.up, rng, d);
        }
        layer.down = Matrix(ffd, d);
        fill_uniform(layer.down, rng, ffd);
        layer.live_kv.resize(static_cast<size_t>(config.n_kv_heads));
        for (int k = 0; k < config.n_kv_heads; ++k) layer.live_kv[static_cast<size_t>(k)] = k;
        layer.live_ff.resize(static_cast<size_t>(ffd));
        for (int j = 0; j < ffd; ++j) layer.live_ff[static_cast<size_t>(j)] = j;
    }

    model.final_norm.assign(static_cast<size_t>(d), 1.0f);
    model.lm_head = Matrix(d, config.vocab_size);
    fill_uniform(model.lm_head, rng, d);
    return model;
}

namespace {

// y[t,:] = x[t,:] / sqrt(mean(x[t,:]^2) + eps) * scale, mean in 64-bit.
Matrix rmsnorm_rows(const Matrix& x, const std::vector<float>& scale, double eps) {
    Matrix out(x.rows(), x.cols());
    const int64_t d = x.cols();
    for (int64_t t = 0; t < x.rows(); ++t) {
        const float* row = x.row_ptr(t);
        double ms = 0.0;
        for (int64_t j = 0; j < d; ++j) ms += static_cast<double>(row[j]) * row[j];
        const double r = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
        float* dst = out.row_ptr(t);
        for (int64_t j = 0; j < d; ++j) {
            dst[j] = static_cast<float>(static_cast<double>(row[j]) * r *
                                        static_cast<double>(scale[static_cast<size_t>(j)]));
        }
    }
    return out;
}

struct RopeTable {
    int half = 0;
    std::vector<double> cos_t;  // T x half
    std::vector<double> sin_t;

    RopeTable(int64_t t_len, int head_dim, double theta) : half(head_dim / 2) {
        cos_t.resize(static_cast<size_t>(t_len * half));
        sin_t.resize(static_cast<size_t>(t_len * half));
        for (int64_t t = 0; t < t_len; ++t) {
            for (int d = 0; d < half; ++d) {
                const double freq =
                    std::pow(theta, -2.0 * static_cast<double>(d) / static_cast<double>(2 * half));
                const double angle = static_cast<double>(t) * freq;
                cos_t[static_cast<size_t>(t * half + d)] = std::cos(angle);
                sin_t[static_cast<size_t>(t * half + d)] = std::sin(angle);
            }
        }
    }

    // Rotate-half convention: pairs (i, i + head_dim/2) per head block.
    void apply(Matrix& m, int n_heads) const {
        for (int64_t t = 0; t < m.rows(); ++t) {
            float* row = m.row_ptr(t);
            for (int h = 0; h < n_heads; ++h) {
                float* head = row + static_cast<int64_t>(h) * 2 * half;
                for (int d = 0; d < half; ++d) {
                    const double c = cos_t[static_cast<size_t>(t * half + d)];
                    const double s = sin_t[static_cast<size_t>(t * half + d)];
                    const double a = head[d];
                    const double b = head[d + half];
                    head[d] = static_cast<float>(a * c - b * s);
                    head[d + half] = static_cast<float>(a * s + b * c);
                }
            }
        }
    }
};

struct ForwardOptions {
    int tap_layer = -1;           // capture this layer's FFN activation
    bool stop_after_tap = false;  // return once the tap is captured
    bool all_taps = false;
    const HeadMask* mask = nullptr;
};

struct ForwardState {
    Matrix logits;
    Matrix tap;
    std::vector<Matrix> taps;
};

void check_tokens(const ToyTransformer& model, const std::vector<int32_t>& tokens) {
    if (tokens.empty()) throw Error("empty token sequence");
    if (static_cast<int>(tokens.size()) > model.config.max_context) {
        throw Error("sequence length " + std::to_string(tokens.size()) + " exceeds max context " +
                    std::to_string(model.config.max_context));
    }
    for (int32_t id : tokens) {
        if (id < 0 || id >= model.config.vocab_size) {
            throw VocabError("token id " + std::to_string(id) + " out of range for vocab " +
                             std::to_string(model.config.vocab_size));
        }
    }
}

// att_cat block for one query head; probs and the weighted sum run in
// 64-bit. Rows attend causally over positions <= their own.
void attend_head(const Matrix& q, const Matrix& k, const Matrix& v, int q_head, int kv_pos,
                 int head_dim, Matrix& att_cat) {
    const int64_t t_len = q.rows();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    const int64_t q_off = static_cast<int64_t>(q_head) * head_dim;
    const int64_t kv_off = static_cast<int64_t>(kv_pos) * head_dim;
    std::vector<double> scores;
    std::vector<double> probs;
    std::vector<double> mix(static_cast<size_t>(head_dim));
    for (int64_t i = 0; i < t_len; ++i) {
        scores.assign(static_cast<size_t>(i + 1), 0.0);
        const float* qi = q.row_ptr(i) + q_off;
        for (int64_t j = 0; j <= i; ++j) {
            double acc = 0.0;
            const float* kj = k.row_ptr(j) + kv_off;
            for (int d = 0; d < head_dim; ++d) {
                acc += static_cast<double>(qi[d]) * static_cast<double>(kj[d]);
            }
            scores[static_cast<size_t>(j)] = acc * inv_sqrt;
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        probs.assign(scores.size(), 0.0);
        double denom = 0.0;
        for (size_t j = 0; j < scores.size(); ++j) {
            probs[j] = std::exp(scores[j] - mx);
            denom += probs[j];
        }
        std::fill(mix.begin(), mix.end(), 0.0);
        for (int64_t j = 0; j <= i; ++j) {
            const double w = probs[static_cast<size_t>(j)] / denom;
            const float* vj = v.row_ptr(j) + kv_off;
            for (int d = 0; d < head_dim; ++d) {
                mix[static_cast<size_t>(d)] += w * static_cast<double>(vj[d]);
            }
        }
        float* out = att_cat.row_ptr(i) + q_off;
        for (int d = 0; d < head_dim; ++d) out[d] = static_cast<float>(mix[static_cast<size_t>(d)]);
    }
}

ForwardState run_forward(const ToyTransformer& model, const std::vector<int32_t>& tokens,
                         const ForwardOptions& opts) {
    check_tokens(model, tokens);
    const ModelConfig& cfg = model.config;
    const int64_t t_len = static_cast<int64_t>(tokens.size());
    const int d = cfg.d_model;
    const int hd = cfg.head_dim;
    const int group = cfg.group_size();

    if (opts.mask) {
        if (opts.mask->active.size() != model.layers.size()) {
            throw Error("head mask layer count mismatch");
        }
        for (size_t l = 0; l < model.layers.size(); ++l) {
            const auto& layer_mask = opts.mask->active[l];
            if (static_cast<int>(layer_mask.size()) != cfg.n_kv_heads) {
                throw Error("head mask length mismatch at layer " + std::to_string(l));
            }
            for (int k = 0; k < cfg.n_kv_heads; ++k) {
                if (layer_mask[static_cast<size_t>(k)] &&
                    !std::binary_search(model.layers[l].live_kv.begin(),
                                        model.layers[l].live_kv.end(), k)) {
                    throw Error("head mask re-activates removed head " + std::to_string(k) +
                                " at layer " + std::to_string(l));
                }
            }
        }
    }

    Matrix x(t_len, d);
    for (int64_t t = 0; t < t_len; ++t) {
        const float* src = model.tok_embedding.row_ptr(tokens[static_cast<size_t>(t)]);
        std::copy(src, src + d, x.row_ptr(t));
    }

    RopeTable rope(t_len, hd, cfg.rope_theta);
    ForwardState state;
    if (opts.all_taps) state.taps.resize(model.layers.size());

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& layer = model.layers[static_cast<size_t>(l)];
        const int kv_live = layer.kv_live();
        const int q_live = kv_live * group;

        if (kv_live > 0) {
            Matrix hn = rmsnorm_rows(x, layer.attn_norm, cfg.norm_eps);
            Matrix q = matmul(hn, layer.wq);
            Matrix k = matmul(hn, layer.wk);
            Matrix v = matmul(hn, layer.wv);
            rope.apply(q, q_live);
            rope.apply(k, kv_live);

            Matrix att_cat(t_len, static_cast<int64_t>(q_live) * hd);
            const bool par = parallel_enabled() && q_live > 1;
#pragma omp parallel for schedule(static) if (par)
            for (int qh = 0; qh < q_live; ++qh) {
                const int kv_pos = qh / group;
                if (opts.mask) {
                    const int kv_orig = layer.live_kv[static_cast<size_t>(kv_pos)];
                    if (!opts.mask->active[static_cast<size_t>(l)][static_cast<size_t>(kv_orig)]) {
                        continue;  // block stays zero; contributes nothing through wo
                    }
                }
                attend_head(q, k, v, qh, kv_pos, hd, att_cat);
            }
            Matrix attn_out = matmul(att_cat, layer.wo);
            for (int64_t i = 0; i < x.size(); ++i) x.data()[i] += attn_out.data()[i];
        }

        const int ff_live = layer.ff_live();
        if (ff_live > 0) {
            Matrix fn = rmsnorm_rows(x, layer.ffn_norm, cfg.norm_eps);
            Matrix z(t_len, ff_live);
            if (cfg.ffn_kind == FfnKind::gated) {
                Matrix g = matmul(fn, layer.gate);
                Matrix u = matmul(fn, layer.up);
                for (int64_t i = 0; i < z.size(); ++i) {
                    const double gv = g.data()[i];
                    const double silu = gv / (1.0 + std::exp(-gv));
                    z.data()[i] = static_cast<float>(silu * static_cast<double>(u.data()[i]));
                }
            } else {
                Matrix g = matmul(fn, layer.gate);
                for (int64_t i = 0; i < z.size(); ++i) {
                    z.data()[i] = g.data()[i] > 0.0f ? g.data()[i] : 0.0f;
                }
            }
            if (opts.all_taps) state.taps[static_cast<size_t>(l)] = z;
            if (l == opts.tap_layer) {
                state.tap = z;
                if (opts.stop_after_tap) return state;
            }
            Matrix ffn_out = matmul(z, layer.down);
            for (int64_t i = 0; i < x.size(); ++i) x.data()[i] += ffn_out.data()[i];
        } else {
            if (opts.all_taps) state.taps[static_cast<size_t>(l)] = Matrix(t_len, 0);
            if (l == opts.tap_layer) {
                state.tap = Matrix(t_len, 0);
                if (opts.stop_after_tap) return state;
            }
        }
    }

    Matrix xn = rmsnorm_rows(x, model.final_norm, cfg.norm_eps);
    state.logits = matmul(xn, model.lm_head);
    return state;
}

}  // namespace

Matrix forward(const ToyTransformer& model, const std::vector<int32_t>& tokens) {
    return run_forward(model, tokens, {}).logits;
}

TapResult forward_with_tap(const ToyTransformer& model, const std::vector<int32_t>& tokens,
                           int layer) {
    if (layer < 0 || layer >= model.config.n_layers) {
        throw Error("tap layer out of range: " + std::to_string(layer));
    }
    ForwardOptions opts;
    opts.tap_layer = layer;
    ForwardState st = run_forward(model, tokens, opts);
    return TapResult{std::move(st.logits), std::move(st.tap)};
}

Matrix ffn_tap(const ToyTransformer& model, const std::vector<int32_t>& tokens, int layer) {
    if (layer < 0 || layer >= model.config.n_layers) {
        throw Error("tap layer out of range: " + std::to_string(layer));
    }
    ForwardOptions opts;
    opts.tap_layer = layer;
    opts.stop_after_tap = true;
    return run_forward(model, tokens, opts).tap;
}

std::vector<Matrix> ffn_taps_all(const ToyTransformer& model, const std::vector<int32_t>& tokens) {
    ForwardOptions opts;
    opts.all_taps = true;
    return run_forward(model, tokens, opts).taps;
}

Matrix apply_head_mask(const ToyTransformer& model, const HeadMask& mask,
                       const std::vector<int32_t>& tokens) {
    ForwardOptions opts;
    opts.mask = &mask;
    return run_forward(model, tokens, opts).logits;
}

Matrix attention_scores(const ToyTransformer& model, const std::vector<int32_t>& tokens, int layer,
                        int q_head) {
    check_tokens(model, tokens);
    if (layer < 0 || layer >= model.config.n_layers) throw Error("layer out of range");
    const LayerWeights& lw = model.layers[static_cast<size_t>(layer)];
    const int group = model.config.group_size();
    if (q_head < 0 || q_head >= lw.kv_live() * group) throw Error("q_head out of range");

    // Re-run the stack up to `layer`, then score one head.
    const ModelConfig& cfg = model.config;
    const int64_t t_len = static_cast<int64_t>(tokens.size());
    const int d = cfg.d_model;
    const int hd = cfg.head_dim;

    Matrix x(t_len, d);
    for (int64_t t = 0; t < t_len; ++t) {
        const float* src = model.tok_embedding.row_ptr(tokens[static_cast<size_t>(t)]);
        std::copy(src, src + d, x.row_ptr(t));
    }
    RopeTable rope(t_len, hd, cfg.rope_theta);
    for (int l = 0; l < layer; ++l) {
        const LayerWeights& lw2 = model.layers[static_cast<size_t>(l)];
        if (lw2.kv_live() > 0) {
            Matrix hn = rmsnorm_rows(x, lw2.attn_norm, cfg.norm_eps);
            Matrix q = matmul(hn, lw2.wq);
            Matrix k = matmul(hn, lw2.wk);
            Matrix v = matmul(hn, lw2.wv);
            const int q_live = lw2.kv_live() * group;
            rope.apply(q, q_live);
            rope.apply(k, lw2.kv_live());
            Matrix att_cat(t_len, static_cast<int64_t>(q_live) * hd);
            for (int qh = 0; qh < q_live; ++qh) attend_head(q, k, v, qh, qh / group, hd, att_cat);
            Matrix attn_out = matmul(att_cat, lw2.wo);
            for (int64_t i = 0; i < x.size(); ++i) x.data()[i] += attn_out.data()[i];
        }
        if (lw2.ff_live() > 0) {
            Matrix fn = rmsnorm_rows(x, lw2.ffn_norm, cfg.norm_eps);
            Matrix z(t_len, lw2.ff_live());
            if (cfg.ffn_kind == FfnKind::gated) {
                Matrix g = matmul(fn, lw2.gate);
                Matrix u = matmul(fn, lw2.up);
                for (int64_t i = 0; i < z.size(); ++i) {
                    const double gv = g.data()[i];
                    z.data()[i] = static_cast<float>(gv / (1.0 + std::exp(-gv)) *
                                                     static_cast<double>(u.data()[i]));
                }
            } else {
                Matrix g = matmul(fn, lw2.gate);
                for (int64_t i = 0; i < z.size(); ++i) {
                    z.data()[i] = g.data()[i] > 0.0f ? g.data()[i] : 0.0f;
                }
            }
            Matrix ffn_out = matmul(z, lw2.down);
            for (int64_t i = 0; i < x.size(); ++i) x.data()[i] += ffn_out.data()[i];
        }
    }

    Matrix hn = rmsnorm_rows(x, lw.attn_norm, cfg.norm_eps);
    Matrix q = matmul(hn, lw.wq);
    Matrix k = matmul(hn, lw.wk);
    rope.apply(q, lw.kv_live() * group);
    rope.apply(k, lw.kv_live());
    const int kv_pos = q_head / group;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix scores(t_len, t_len);
    const float neg_inf = -std::numeric_limits<float>::infinity();
    for (int64_t i = 0; i < t_len; ++i) {
        for (int64_t j = 0; j < t_len; ++j) {
            if (j > i) {
                scores.at(i, j) = neg_inf;
                continue;
            }
            double acc = 0.0;
            const float* qi = q.row_ptr(i) + static_cast<int64_t>(q_head) * hd;
            const float* kj = k.row_ptr(j) + static_cast<int64_t>(kv_pos) * hd;
            for (int dd = 0; dd < hd; ++dd) {
                acc += static_cast<double>(qi[dd]) * static_cast<double>(kj[dd]);
            }
            scores.at(i, j) = static_cast<float>(acc * inv_sqrt);
        }
    }
    return scores;
}

void ToyTransformer::remove_kv_head(int layer, int kv_original) {
    if (layer < 0 || layer >= config.n_layers) throw Error("layer out of range");
    if (kv_original < 0 || kv_original >= config.n_kv_heads) {
        throw Error("kv head index out of range: " + std::to_string(kv_original));
    }
    LayerWeights& lw = layers[static_cast<size_t>(layer)];
    auto it = std::lower_bound(lw.live_kv.begin(), lw.live_kv.end(), kv_original);
    if (it == lw.live_kv.end() || *it != kv_original) {
        throw Error("kv head " + std::to_string(kv_original) + " at layer " +
                    std::to_string(layer) + " already removed");
    }
    const int pos = static_cast<int>(it - lw.live_kv.begin());
    const int hd = config.head_dim;
    const int group = config.group_size();

    lw.wk = lw.wk.drop_column_range(static_cast<int64_t>(pos) * hd,
                                    static_cast<int64_t>(pos + 1) * hd);
    lw.wv = lw.wv.drop_column_range(static_cast<int64_t>(pos) * hd,
                                    static_cast<int64_t>(pos + 1) * hd);
    lw.wq = lw.wq.drop_column_range(static_cast<int64_t>(pos) * group * hd,
                                    static_cast<int64_t>(pos + 1) * group * hd);
    lw.wo = lw.wo.drop_row_range(static_cast<int64_t>(pos) * group * hd,
                                 static_cast<int64_t>(pos + 1) * group * hd);
    lw.live_kv.erase(it);
}

void ToyTransformer::remove_ffn_nodes(int layer, const std::vector<int>& keep_original) {
    if (layer < 0 || layer >= config.n_layers) throw Error("layer out of range");
    LayerWeights& lw = layers[static_cast<size_t>(layer)];

    std::vector<int> positions;
    positions.reserve(keep_original.size());
    int prev = -1;
    for (int orig : keep_original) {
        if (orig <= prev) throw Error("keep set must be strictly ascending");
        prev = orig;
        auto it = std::lower_bound(lw.live_ff.begin(), lw.live_ff.end(), orig);
        if (it == lw.live_ff.end() || *it != orig) {
            throw Error("ffn node " + std::to_string(orig) + " at layer " + std::to_string(layer) +
                        " is not live");
        }
        positions.push_back(static_cast<int>(it - lw.live_ff.begin()));
    }

    lw.gate = lw.gate.select_columns(positions);
    if (config.ffn_kind == FfnKind::gated) lw.up = lw.up.select_columns(positions);
    lw.down = lw.down.select_rows(positions);
    lw.live_ff = keep_original;
}

int64_t total_params(const ToyTransformer& model) {
    int64_t n = model.tok_embedding.size() + model.lm_head.size() +
                static_cast<int64_t>(model.final_norm.size());
    for (const auto& layer : model.layers) {
        n += layer.wq.size() + layer.wk.size() + layer.wv.size() + layer.wo.size();
        n += layer.gate.size() + layer.up.size() + layer.down.size();
        n += static_cast<int64_t>(layer.attn_norm.size() + layer.ffn_norm.size());
    }
    return n;
}

}  // namespace putri
