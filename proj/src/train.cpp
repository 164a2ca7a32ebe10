#include "putri/train.hpp"

#include <algorithm>
#include <cmath>

#include "putri/linalg.hpp"
#include "putri/rng.hpp"

namespace putri {

namespace {

constexpr int kWindow = 128;       // training window length
constexpr int kProbeWindows = 8;   // fixed windows for the loss stats

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (int64_t i = 0; i < m.rows(); ++i) {
        for (int64_t j = 0; j < m.cols(); ++j) out.at(j, i) = m.at(i, j);
    }
    return out;
}

void add_inplace(Matrix& a, const Matrix& b) {
    for (int64_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

struct RopeTable {
    int half;
    std::vector<double> cos_t, sin_t;

    RopeTable(int64_t t_len, int head_dim, double theta) : half(head_dim / 2) {
        cos_t.resize(static_cast<size_t>(t_len * half));
        sin_t.resize(static_cast<size_t>(t_len * half));
        for (int64_t t = 0; t < t_len; ++t) {
            for (int d = 0; d < half; ++d) {
                const double freq =
                    std::pow(theta, -static_cast<double>(d) / static_cast<double>(half));
                cos_t[static_cast<size_t>(t * half + d)] = std::cos(t * freq);
                sin_t[static_cast<size_t>(t * half + d)] = std::sin(t * freq);
            }
        }
    }

    void apply(Matrix& m, int n_heads, bool inverse) const {
        for (int64_t t = 0; t < m.rows(); ++t) {
            float* row = m.row_ptr(t);
            for (int h = 0; h < n_heads; ++h) {
                float* head = row + static_cast<int64_t>(h) * 2 * half;
                for (int d = 0; d < half; ++d) {
                    const double c = cos_t[static_cast<size_t>(t * half + d)];
                    const double s0 = sin_t[static_cast<size_t>(t * half + d)];
                    const double s = inverse ? -s0 : s0;
                    const double a = head[d];
                    const double b = head[d + half];
                    head[d] = static_cast<float>(a * c - b * s);
                    head[d + half] = static_cast<float>(a * s + b * c);
                }
            }
        }
    }
};

// Row-wise RMSNorm keeping the per-row reciprocal for the backward pass.
Matrix rmsnorm_fwd(const Matrix& x, const std::vector<float>& scale, double eps,
                   std::vector<double>& recip) {
    Matrix out(x.rows(), x.cols());
    recip.resize(static_cast<size_t>(x.rows()));
    const int64_t d = x.cols();
    for (int64_t t = 0; t < x.rows(); ++t) {
        const float* row = x.row_ptr(t);
        double ms = 0.0;
        for (int64_t j = 0; j < d; ++j) ms += static_cast<double>(row[j]) * row[j];
        const double r = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
        recip[static_cast<size_t>(t)] = r;
        float* dst = out.row_ptr(t);
        for (int64_t j = 0; j < d; ++j) {
            dst[j] = static_cast<float>(static_cast<double>(row[j]) * r *
                                        static_cast<double>(scale[static_cast<size_t>(j)]));
        }
    }
    return out;
}

// dx and dscale for y = x * r * scale with r = 1/sqrt(mean(x^2) + eps).
Matrix rmsnorm_bwd(const Matrix& x, const std::vector<float>& scale,
                   const std::vector<double>& recip, const Matrix& dy,
                   std::vector<double>& dscale) {
    Matrix dx(x.rows(), x.cols());
    const int64_t d = x.cols();
    for (int64_t t = 0; t < x.rows(); ++t) {
        const float* xr = x.row_ptr(t);
        const float* dyr = dy.row_ptr(t);
        float* dxr = dx.row_ptr(t);
        const double r = recip[static_cast<size_t>(t)];
        double dot = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            dot += static_cast<double>(dyr[j]) * scale[static_cast<size_t>(j)] *
                   static_cast<double>(xr[j]);
            dscale[static_cast<size_t>(j)] +=
                static_cast<double>(xr[j]) * r * static_cast<double>(dyr[j]);
        }
        const double k = r * r * r * dot / static_cast<double>(d);
        for (int64_t j = 0; j < d; ++j) {
            dxr[j] = static_cast<float>(
                static_cast<double>(dyr[j]) * scale[static_cast<size_t>(j)] * r -
                static_cast<double>(xr[j]) * k);
        }
    }
    return dx;
}

struct LayerCache {
    Matrix a_in;   // input to the layer
    std::vector<double> r_attn;
    Matrix hn;     // attn-normed input
    Matrix q, k, v;          // q/k post-rope
    std::vector<Matrix> probs;  // per query head, T x T lower-triangular
    Matrix att_cat;
    Matrix x1;     // after attention residual
    std::vector<double> r_ffn;
    Matrix fn;     // ffn-normed
    Matrix gate_pre;
    Matrix up_v;
    Matrix z;
};

struct FullCache {
    std::vector<LayerCache> layers;
    Matrix x_final;  // residual stream before the final norm
    std::vector<double> r_final;
    Matrix xn_final;
    Matrix logits;
};

FullCache forward_cached(const ToyTransformer& model, const std::vector<int32_t>& window) {
    const ModelConfig& cfg = model.config;
    const int64_t t_len = static_cast<int64_t>(window.size());
    const int d = cfg.d_model;
    const int hd = cfg.head_dim;
    const int group = cfg.group_size();
    const RopeTable rope(t_len, hd, cfg.rope_theta);

    FullCache cache;
    cache.layers.resize(static_cast<size_t>(cfg.n_layers));

    Matrix x(t_len, d);
    for (int64_t t = 0; t < t_len; ++t) {
        const float* src = model.tok_embedding.row_ptr(window[static_cast<size_t>(t)]);
        std::copy(src, src + d, x.row_ptr(t));
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = model.layers[static_cast<size_t>(l)];
        LayerCache& c = cache.layers[static_cast<size_t>(l)];
        c.a_in = x;

        const int kv_live = lw.kv_live();
        const int q_live = kv_live * group;
        if (kv_live > 0) {
            c.hn = rmsnorm_fwd(x, lw.attn_norm, cfg.norm_eps, c.r_attn);
            c.q = matmul(c.hn, lw.wq);
            c.k = matmul(c.hn, lw.wk);
            c.v = matmul(c.hn, lw.wv);
            rope.apply(c.q, q_live, false);
            rope.apply(c.k, kv_live, false);

            c.att_cat = Matrix(t_len, static_cast<int64_t>(q_live) * hd);
            c.probs.assign(static_cast<size_t>(q_live), Matrix(t_len, t_len));
            const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
            std::vector<double> row;
            std::vector<double> mix(static_cast<size_t>(hd));
            for (int qh = 0; qh < q_live; ++qh) {
                const int64_t q_off = static_cast<int64_t>(qh) * hd;
                const int64_t kv_off = static_cast<int64_t>(qh / group) * hd;
                Matrix& p = c.probs[static_cast<size_t>(qh)];
                for (int64_t i = 0; i < t_len; ++i) {
                    double mx = -1e300;
                    row.assign(static_cast<size_t>(i + 1), 0.0);
                    const float* qi = c.q.row_ptr(i) + q_off;
                    for (int64_t j = 0; j <= i; ++j) {
                        double acc = 0.0;
                        const float* kj = c.k.row_ptr(j) + kv_off;
                        for (int dd = 0; dd < hd; ++dd) {
                            acc += static_cast<double>(qi[dd]) * static_cast<double>(kj[dd]);
                        }
                        row[static_cast<size_t>(j)] = acc * inv_sqrt;
                        mx = std::max(mx, row[static_cast<size_t>(j)]);
                    }
                    double denom = 0.0;
                    for (auto& s : row) {
                        s = std::exp(s - mx);
                        denom += s;
                    }
                    float* prow = p.row_ptr(i);
                    std::fill(mix.begin(), mix.end(), 0.0);
                    for (int64_t j = 0; j <= i; ++j) {
                        const double pj = row[static_cast<size_t>(j)] / denom;
                        prow[j] = static_cast<float>(pj);
                        const float* vj = c.v.row_ptr(j) + kv_off;
                        for (int dd = 0; dd < hd; ++dd) {
                            mix[static_cast<size_t>(dd)] +=
                                static_cast<double>(prow[j]) * static_cast<double>(vj[dd]);
                        }
                    }
                    float* out = c.att_cat.row_ptr(i) + q_off;
                    for (int dd = 0; dd < hd; ++dd) {
                        out[dd] = static_cast<float>(mix[static_cast<size_t>(dd)]);
                    }
                }
            }
            Matrix attn_out = matmul(c.att_cat, lw.wo);
            add_inplace(x, attn_out);
        }
        c.x1 = x;

        if (lw.ff_live() > 0) {
            c.fn = rmsnorm_fwd(x, lw.ffn_norm, cfg.norm_eps, c.r_ffn);
            c.gate_pre = matmul(c.fn, lw.gate);
            c.z = Matrix(t_len, lw.ff_live());
            if (cfg.ffn_kind == FfnKind::gated) {
                c.up_v = matmul(c.fn, lw.up);
                for (int64_t i = 0; i < c.z.size(); ++i) {
                    const double g = c.gate_pre.data()[i];
                    c.z.data()[i] = static_cast<float>(g / (1.0 + std::exp(-g)) *
                                                       static_cast<double>(c.up_v.data()[i]));
                }
            } else {
                for (int64_t i = 0; i < c.z.size(); ++i) {
                    const float g = c.gate_pre.data()[i];
                    c.z.data()[i] = g > 0.0f ? g : 0.0f;
                }
            }
            Matrix ffn_out = matmul(c.z, lw.down);
            add_inplace(x, ffn_out);
        }
    }

    cache.x_final = x;
    cache.xn_final = rmsnorm_fwd(x, model.final_norm, cfg.norm_eps, cache.r_final);
    cache.logits = matmul(cache.xn_final, model.lm_head);
    return cache;
}

double loss_from_logits(const Matrix& logits, const std::vector<int32_t>& window,
                        const std::vector<int32_t>& targets) {
    (void)window;
    double nll = 0.0;
    const int64_t vocab = logits.cols();
    for (int64_t t = 0; t < static_cast<int64_t>(targets.size()); ++t) {
        const float* row = logits.row_ptr(t);
        double mx = row[0];
        for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int64_t j = 0; j < vocab; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        nll += std::log(denom) -
               (static_cast<double>(row[targets[static_cast<size_t>(t)]]) - mx);
    }
    return nll / static_cast<double>(targets.size());
}

void sgd_step(ToyTransformer& model, const std::vector<int32_t>& window,
              const std::vector<int32_t>& targets, double lr) {
    const ModelConfig& cfg = model.config;
    const int64_t t_len = static_cast<int64_t>(window.size());
    const int d = cfg.d_model;
    const int hd = cfg.head_dim;
    const int group = cfg.group_size();
    const RopeTable rope(t_len, hd, cfg.rope_theta);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    FullCache cache = forward_cached(model, window);

    // dLogits = (softmax - onehot) / n_targets, only for scored rows.
    const int64_t n_targets = static_cast<int64_t>(targets.size());
    Matrix dlogits(t_len, cfg.vocab_size);
    for (int64_t t = 0; t < n_targets; ++t) {
        const float* row = cache.logits.row_ptr(t);
        double mx = row[0];
        for (int64_t j = 1; j < cfg.vocab_size; ++j) {
            mx = std::max(mx, static_cast<double>(row[j]));
        }
        double denom = 0.0;
        for (int64_t j = 0; j < cfg.vocab_size; ++j) {
            denom += std::exp(static_cast<double>(row[j]) - mx);
        }
        float* drow = dlogits.row_ptr(t);
        for (int64_t j = 0; j < cfg.vocab_size; ++j) {
            const double p = std::exp(static_cast<double>(row[j]) - mx) / denom;
            drow[j] = static_cast<float>(p / static_cast<double>(n_targets));
        }
        drow[targets[static_cast<size_t>(t)]] -=
            static_cast<float>(1.0 / static_cast<double>(n_targets));
    }

    Matrix d_lm_head = matmul(transpose(cache.xn_final), dlogits);
    Matrix dxn = matmul(dlogits, transpose(model.lm_head));
    std::vector<double> d_final_norm(static_cast<size_t>(d), 0.0);
    Matrix dx = rmsnorm_bwd(cache.x_final, model.final_norm, cache.r_final, dxn, d_final_norm);

    struct LayerGrads {
        Matrix wq, wk, wv, wo, gate, up, down;
        std::vector<double> attn_norm, ffn_norm;
    };
    std::vector<LayerGrads> grads(static_cast<size_t>(cfg.n_layers));

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerWeights& lw = model.layers[static_cast<size_t>(l)];
        const LayerCache& c = cache.layers[static_cast<size_t>(l)];
        LayerGrads& g = grads[static_cast<size_t>(l)];
        g.attn_norm.assign(static_cast<size_t>(d), 0.0);
        g.ffn_norm.assign(static_cast<size_t>(d), 0.0);

        // FFN block backward: x2 = x1 + z down
        Matrix dx1 = dx;
        if (lw.ff_live() > 0) {
            Matrix dz = matmul(dx, transpose(lw.down));
            g.down = matmul(transpose(c.z), dx);
            Matrix dfn;
            if (cfg.ffn_kind == FfnKind::gated) {
                Matrix dgate(t_len, lw.ff_live());
                Matrix dup(t_len, lw.ff_live());
                for (int64_t i = 0; i < dz.size(); ++i) {
                    const double gv = c.gate_pre.data()[i];
                    const double sig = 1.0 / (1.0 + std::exp(-gv));
                    const double silu = gv * sig;
                    const double dsilu = sig * (1.0 + gv * (1.0 - sig));
                    dgate.data()[i] = static_cast<float>(static_cast<double>(dz.data()[i]) *
                                                         static_cast<double>(c.up_v.data()[i]) *
                                                         dsilu);
                    dup.data()[i] =
                        static_cast<float>(static_cast<double>(dz.data()[i]) * silu);
                }
                g.gate = matmul(transpose(c.fn), dgate);
                g.up = matmul(transpose(c.fn), dup);
                dfn = matmul(dgate, transpose(lw.gate));
                add_inplace(dfn, matmul(dup, transpose(lw.up)));
            } else {
                Matrix dgate(t_len, lw.ff_live());
                for (int64_t i = 0; i < dz.size(); ++i) {
                    dgate.data()[i] = c.gate_pre.data()[i] > 0.0f ? dz.data()[i] : 0.0f;
                }
                g.gate = matmul(transpose(c.fn), dgate);
                dfn = matmul(dgate, transpose(lw.gate));
            }
            Matrix dres = rmsnorm_bwd(c.x1, lw.ffn_norm, c.r_ffn, dfn, g.ffn_norm);
            add_inplace(dx1, dres);
        }

        // Attention block backward: x1 = a_in + att_cat wo
        dx = dx1;
        const int kv_live = lw.kv_live();
        const int q_live = kv_live * group;
        if (kv_live > 0) {
            Matrix datt = matmul(dx1, transpose(lw.wo));
            g.wo = matmul(transpose(c.att_cat), dx1);

            Matrix dq(t_len, c.q.cols());
            Matrix dk(t_len, c.k.cols());
            Matrix dv(t_len, c.v.cols());
            std::vector<double> dp;
            for (int qh = 0; qh < q_live; ++qh) {
                const Matrix& p = c.probs[static_cast<size_t>(qh)];
                const int64_t q_off = static_cast<int64_t>(qh) * hd;
                const int64_t kv_off = static_cast<int64_t>(qh / group) * hd;
                for (int64_t i = 0; i < t_len; ++i) {
                    const float* do_row = datt.row_ptr(i) + q_off;
                    const float* prow = p.row_ptr(i);
                    // dp[j] = dO . v_j ; ds = p * (dp - sum_j dp[j] p[j])
                    dp.assign(static_cast<size_t>(i + 1), 0.0);
                    double mix = 0.0;
                    for (int64_t j = 0; j <= i; ++j) {
                        double acc = 0.0;
                        const float* vj = c.v.row_ptr(j) + kv_off;
                        for (int dd = 0; dd < hd; ++dd) {
                            acc += static_cast<double>(do_row[dd]) * static_cast<double>(vj[dd]);
                        }
                        dp[static_cast<size_t>(j)] = acc;
                        mix += acc * static_cast<double>(prow[j]);
                    }
                    const float* qi = c.q.row_ptr(i) + q_off;
                    float* dqi = dq.row_ptr(i) + q_off;
                    for (int64_t j = 0; j <= i; ++j) {
                        const double pj = prow[j];
                        const double ds = pj * (dp[static_cast<size_t>(j)] - mix) * inv_sqrt;
                        // dQ_i += ds * K_j ; dK_j += ds * Q_i ; dV_j += p * dO
                        const float* kj = c.k.row_ptr(j) + kv_off;
                        float* dkj = dk.row_ptr(j) + kv_off;
                        float* dvj = dv.row_ptr(j) + kv_off;
                        for (int dd = 0; dd < hd; ++dd) {
                            dqi[dd] += static_cast<float>(ds * static_cast<double>(kj[dd]));
                            dkj[dd] += static_cast<float>(ds * static_cast<double>(qi[dd]));
                            dvj[dd] += static_cast<float>(pj * static_cast<double>(do_row[dd]));
                        }
                    }
                }
            }
            rope.apply(dq, q_live, true);
            rope.apply(dk, kv_live, true);

            g.wq = matmul(transpose(c.hn), dq);
            g.wk = matmul(transpose(c.hn), dk);
            g.wv = matmul(transpose(c.hn), dv);
            Matrix dhn = matmul(dq, transpose(lw.wq));
            add_inplace(dhn, matmul(dk, transpose(lw.wk)));
            add_inplace(dhn, matmul(dv, transpose(lw.wv)));
            Matrix dres = rmsnorm_bwd(c.a_in, lw.attn_norm, c.r_attn, dhn, g.attn_norm);
            add_inplace(dx, dres);
        }
    }

    // Apply updates.
    const auto update_matrix = [lr](Matrix& w, const Matrix& gw) {
        if (gw.size() == 0) return;
        for (int64_t i = 0; i < w.size(); ++i) {
            w.data()[i] -= static_cast<float>(lr * static_cast<double>(gw.data()[i]));
        }
    };
    const auto update_vec = [lr](std::vector<float>& w, const std::vector<double>& gw) {
        for (size_t i = 0; i < w.size(); ++i) {
            w[i] -= static_cast<float>(lr * gw[i]);
        }
    };
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerWeights& lw = model.layers[static_cast<size_t>(l)];
        LayerGrads& g = grads[static_cast<size_t>(l)];
        update_matrix(lw.wq, g.wq);
        update_matrix(lw.wk, g.wk);
        update_matrix(lw.wv, g.wv);
        update_matrix(lw.wo, g.wo);
        update_matrix(lw.gate, g.gate);
        update_matrix(lw.up, g.up);
        update_matrix(lw.down, g.down);
        update_vec(lw.attn_norm, g.attn_norm);
        update_vec(lw.ffn_norm, g.ffn_norm);
    }
    update_vec(model.final_norm, d_final_norm);
    update_matrix(model.lm_head, d_lm_head);
    // Embedding rows touched by this window.
    for (int64_t t = 0; t < t_len; ++t) {
        float* row = model.tok_embedding.row_ptr(window[static_cast<size_t>(t)]);
        const float* grad = dx.row_ptr(t);
        for (int j = 0; j < d; ++j) {
            row[j] -= static_cast<float>(lr * static_cast<double>(grad[j]));
        }
    }
}

std::vector<std::vector<int32_t>> probe_windows(const std::vector<int32_t>& stream, int window,
                                                uint64_t seed) {
    Rng rng(seed ^ 0x70726f6265ull);  // independent probe stream
    const int64_t n = static_cast<int64_t>(stream.size());
    const int64_t range = n - window - 1;
    std::vector<std::vector<int32_t>> out;
    for (int i = 0; i < kProbeWindows; ++i) {
        const int64_t off =
            range > 0 ? static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(range))) : 0;
        out.emplace_back(stream.begin() + off, stream.begin() + off + window + 1);
    }
    return out;
}

double probe_loss(const ToyTransformer& model, const std::vector<std::vector<int32_t>>& probes) {
    double total = 0.0;
    for (const auto& w : probes) {
        const std::vector<int32_t> inputs(w.begin(), w.end() - 1);
        const std::vector<int32_t> targets(w.begin() + 1, w.end());
        total += loss_from_logits(forward_cached(model, inputs).logits, inputs, targets);
    }
    return total / static_cast<double>(probes.size());
}

}  // namespace

double training_loss(const ToyTransformer& model, const std::vector<int32_t>& window) {
    if (window.size() < 2) throw Error("training window must have length >= 2");
    const std::vector<int32_t> inputs(window.begin(), window.end() - 1);
    const std::vector<int32_t> targets(window.begin() + 1, window.end());
    return loss_from_logits(forward_cached(model, inputs).logits, inputs, targets);
}

TrainStats train_toy(ToyTransformer& model, const std::vector<int32_t>& stream, int steps,
                     double lr, uint64_t seed) {
    if (steps < 0) throw Error("steps must be >= 0");
    const int window = std::min<int>(kWindow, model.config.max_context);
    if (static_cast<int64_t>(stream.size()) < window + 1) {
        throw Error("token stream too short for training windows");
    }
    for (int32_t id : stream) {
        if (id < 0 || id >= model.config.vocab_size) {
            throw VocabError("corpus token " + std::to_string(id) + " out of range");
        }
    }

    const auto probes = probe_windows(stream, window, seed);
    TrainStats stats;
    stats.initial_loss = probe_loss(model, probes);
    if (steps == 0) {
        stats.final_loss = stats.initial_loss;
        return stats;
    }

    Rng rng(seed);
    const int64_t range = static_cast<int64_t>(stream.size()) - window - 1;
    for (int step = 0; step < steps; ++step) {
        const int64_t off =
            range > 0 ? static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(range))) : 0;
        const std::vector<int32_t> inputs(stream.begin() + off, stream.begin() + off + window);
        const std::vector<int32_t> targets(stream.begin() + off + 1,
                                           stream.begin() + off + window + 1);
        sgd_step(model, inputs, targets, lr);
    }
    stats.final_loss = probe_loss(model, probes);
    return stats;
}

}  // namespace putri
