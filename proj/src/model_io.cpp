#include "putri/model_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace putri {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'P', 'U', 'T', 'R'};
constexpr uint8_t kVersion = 0x01;
constexpr int64_t kAlign = 64;

struct TensorRef {
    std::string name;
    const float* data;
    std::vector<int64_t> shape;

    int64_t count() const {
        int64_t n = 1;
        for (int64_t s : shape) n *= s;
        return n;
    }
};

// Fixed serialization order; offsets in the header follow it.
std::vector<TensorRef> tensor_list(const ToyTransformer& model) {
    std::vector<TensorRef> refs;
    const auto mat = [&](const std::string& name, const Matrix& m) {
        refs.push_back({name, m.data(), {m.rows(), m.cols()}});
    };
    const auto vec = [&](const std::string& name, const std::vector<float>& v) {
        refs.push_back({name, v.data(), {static_cast<int64_t>(v.size())}});
    };
    mat("tok_embedding", model.tok_embedding);
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const auto& lw = model.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        vec(p + "attn_norm", lw.attn_norm);
        mat(p + "wq", lw.wq);
        mat(p + "wk", lw.wk);
        mat(p + "wv", lw.wv);
        mat(p + "wo", lw.wo);
        vec(p + "ffn_norm", lw.ffn_norm);
        if (model.config.ffn_kind == FfnKind::gated) {
            mat(p + "gate", lw.gate);
            mat(p + "up", lw.up);
        } else {
            mat(p + "fc1", lw.gate);
        }
        mat(p + "down", lw.down);
    }
    refs.push_back({"final_norm", model.final_norm.data(),
                    {static_cast<int64_t>(model.final_norm.size())}});
    refs.push_back({"lm_head", model.lm_head.data(), {model.lm_head.rows(), model.lm_head.cols()}});
    return refs;
}

json config_to_json(const ModelConfig& c) {
    json j;
    j["d_model"] = c.d_model;
    j["n_layers"] = c.n_layers;
    j["n_q_heads"] = c.n_q_heads;
    j["n_kv_heads"] = c.n_kv_heads;
    j["head_dim"] = c.head_dim;
    j["d_ff"] = c.d_ff;
    j["vocab_size"] = c.vocab_size;
    j["rope_theta"] = c.rope_theta;
    j["norm_eps"] = c.norm_eps;
    j["ffn_kind"] = to_string(c.ffn_kind);
    j["max_context"] = c.max_context;
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_q_heads = j.at("n_q_heads").get<int>();
    c.n_kv_heads = j.at("n_kv_heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.rope_theta = j.at("rope_theta").get<double>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.ffn_kind = ffn_kind_from_string(j.at("ffn_kind").get<std::string>());
    c.max_context = j.at("max_context").get<int>();
    return c;
}

int64_t align_up(int64_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

}  // namespace

void save(const ToyTransformer& model, const std::string& path) {
    const auto refs = tensor_list(model);

    json header;
    header["config"] = config_to_json(model.config);
    json live_kv = json::array(), live_ff = json::array();
    for (const auto& lw : model.layers) {
        live_kv.push_back(lw.live_kv);
        live_ff.push_back(lw.live_ff);
    }
    header["live"] = {{"kv", live_kv}, {"ff", live_ff}};

    json tensors;
    int64_t offset = 0;
    for (const auto& ref : refs) {
        const int64_t bytes = ref.count() * 4;
        tensors[ref.name] = {{"dtype", "f32"},
                             {"shape", ref.shape},
                             {"offset", offset},
                             {"length", bytes}};
        offset = align_up(offset + bytes);
    }
    header["tensors"] = tensors;

    const std::string header_str = header.dump();
    if (header_str.size() > 0xFFFFFFFFull) throw IoError("header too large");

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(kMagic, 4);
    f.put(static_cast<char>(kVersion));
    const uint32_t hlen = static_cast<uint32_t>(header_str.size());
    unsigned char lenb[4] = {static_cast<unsigned char>(hlen & 0xFF),
                             static_cast<unsigned char>((hlen >> 8) & 0xFF),
                             static_cast<unsigned char>((hlen >> 16) & 0xFF),
                             static_cast<unsigned char>((hlen >> 24) & 0xFF)};
    f.write(reinterpret_cast<const char*>(lenb), 4);
    f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

    const int64_t pre = 9 + static_cast<int64_t>(header_str.size());
    const int64_t payload_start = align_up(pre);
    static const char zeros[kAlign] = {};
    f.write(zeros, payload_start - pre);

    int64_t written = 0;
    for (const auto& ref : refs) {
        const int64_t bytes = ref.count() * 4;
        f.write(reinterpret_cast<const char*>(ref.data), bytes);
        written += bytes;
        const int64_t padded = align_up(written);
        f.write(zeros, padded - written);
        written = padded;
    }
    if (!f) throw IoError("write failed: " + path);
}

ToyTransformer load(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < 9) throw FormatError("file too short for header: " + path);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic bytes: " + path);
    if (bytes[4] != kVersion) {
        throw FormatError("unsupported model version " + std::to_string(bytes[4]));
    }
    const uint32_t hlen = static_cast<uint32_t>(bytes[5]) | (static_cast<uint32_t>(bytes[6]) << 8) |
                          (static_cast<uint32_t>(bytes[7]) << 16) |
                          (static_cast<uint32_t>(bytes[8]) << 24);
    if (9ull + hlen > bytes.size()) throw FormatError("truncated header: " + path);

    json header;
    try {
        header = json::parse(bytes.begin() + 9, bytes.begin() + 9 + hlen);
    } catch (const json::exception& e) {
        throw FormatError(std::string("header parse error: ") + e.what());
    }

    ToyTransformer model;
    try {
        model.config = config_from_json(header.at("config"));
        model.config.validate();

        const int64_t payload_start = align_up(9 + static_cast<int64_t>(hlen));
        const int64_t payload_size = static_cast<int64_t>(bytes.size()) - payload_start;
        if (payload_size < 0) throw FormatError("truncated payload: " + path);

        const json& tensors = header.at("tensors");
        const auto read_tensor = [&](const std::string& name) -> std::vector<float> {
            if (!tensors.contains(name)) throw FormatError("missing tensor: " + name);
            const json& t = tensors.at(name);
            if (t.at("dtype").get<std::string>() != "f32") {
                throw FormatError("unsupported dtype for " + name);
            }
            const int64_t offset = t.at("offset").get<int64_t>();
            const int64_t length = t.at("length").get<int64_t>();
            int64_t count = 1;
            for (const auto& s : t.at("shape")) count *= s.get<int64_t>();
            if (length != count * 4) throw FormatError("shape/length mismatch for " + name);
            if (offset < 0 || offset % kAlign != 0 || offset + length > payload_size) {
                throw FormatError("truncated payload at tensor " + name);
            }
            std::vector<float> out(static_cast<size_t>(count));
            std::memcpy(out.data(), bytes.data() + payload_start + offset,
                        static_cast<size_t>(length));
            return out;
        };
        const auto shape_of = [&](const std::string& name) {
            std::vector<int64_t> shape;
            for (const auto& s : tensors.at(name).at("shape")) shape.push_back(s.get<int64_t>());
            return shape;
        };
        const auto read_matrix = [&](const std::string& name, int64_t rows,
                                     int64_t cols) -> Matrix {
            auto shape = shape_of(name);
            if (shape.size() != 2 || shape[0] != rows || shape[1] != cols) {
                throw FormatError("shape mismatch for " + name + ": expected " +
                                  std::to_string(rows) + "x" + std::to_string(cols));
            }
            Matrix m(rows, cols, read_tensor(name));
            m.require_finite(name.c_str());
            return m;
        };
        const auto read_vec = [&](const std::string& name, int64_t n) -> std::vector<float> {
            auto shape = shape_of(name);
            if (shape.size() != 1 || shape[0] != n) {
                throw FormatError("shape mismatch for " + name);
            }
            auto v = read_tensor(name);
            for (float x : v) {
                if (!std::isfinite(x)) throw FormatError("non-finite entries in " + name);
            }
            return v;
        };

        const ModelConfig& cfg = model.config;
        const json& live = header.at("live");
        const auto& live_kv = live.at("kv");
        const auto& live_ff = live.at("ff");
        if (static_cast<int>(live_kv.size()) != cfg.n_layers ||
            static_cast<int>(live_ff.size()) != cfg.n_layers) {
            throw FormatError("live index layer count mismatch");
        }

        const size_t expected_tensors =
            2ull + 1ull +
            static_cast<size_t>(cfg.n_layers) * (cfg.ffn_kind == FfnKind::gated ? 9ull : 8ull);
        if (tensors.size() != expected_tensors) {
            throw FormatError("header tensor count mismatch with payload layout");
        }

        model.tok_embedding = read_matrix("tok_embedding", cfg.vocab_size, cfg.d_model);
        model.layers.resize(static_cast<size_t>(cfg.n_layers));
        for (int l = 0; l < cfg.n_layers; ++l) {
            LayerWeights& lw = model.layers[static_cast<size_t>(l)];
            lw.live_kv = live_kv.at(l).get<std::vector<int>>();
            lw.live_ff = live_ff.at(l).get<std::vector<int>>();
            for (size_t i = 0; i < lw.live_kv.size(); ++i) {
                const int k = lw.live_kv[i];
                if (k < 0 || k >= cfg.n_kv_heads || (i > 0 && k <= lw.live_kv[i - 1])) {
                    throw FormatError("invalid live kv indices at layer " + std::to_string(l));
                }
            }
            for (size_t i = 0; i < lw.live_ff.size(); ++i) {
                const int k = lw.live_ff[i];
                if (k < 0 || k >= cfg.d_ff || (i > 0 && k <= lw.live_ff[i - 1])) {
                    throw FormatError("invalid live ff indices at layer " + std::to_string(l));
                }
            }
            const int kv = lw.kv_live();
            const int q_cols = kv * cfg.group_size() * cfg.head_dim;
            const std::string p = "layers." + std::to_string(l) + ".";
            lw.attn_norm = read_vec(p + "attn_norm", cfg.d_model);
            lw.wq = read_matrix(p + "wq", cfg.d_model, q_cols);
            lw.wk = read_matrix(p + "wk", cfg.d_model, static_cast<int64_t>(kv) * cfg.head_dim);
            lw.wv = read_matrix(p + "wv", cfg.d_model, static_cast<int64_t>(kv) * cfg.head_dim);
            lw.wo = read_matrix(p + "wo", q_cols, cfg.d_model);
            lw.ffn_norm = read_vec(p + "ffn_norm", cfg.d_model);
            const int ff = lw.ff_live();
            if (cfg.ffn_kind == FfnKind::gated) {
                lw.gate = read_matrix(p + "gate", cfg.d_model, ff);
                lw.up = read_matrix(p + "up", cfg.d_model, ff);
            } else {
                lw.gate = read_matrix(p + "fc1", cfg.d_model, ff);
            }
            lw.down = read_matrix(p + "down", ff, cfg.d_model);
        }
        model.final_norm = read_vec("final_norm", cfg.d_model);
        model.lm_head = read_matrix("lm_head", cfg.d_model, cfg.vocab_size);
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed header: ") + e.what());
    }
    return model;
}

}  // namespace putri
