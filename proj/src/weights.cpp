#include "neglab/weights.hpp"

#include <cstring>

#include "neglab/errors.hpp"
#include "neglab/rng.hpp"

namespace neglab {

const Tensor& Weights::get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("missing tensor: " + name);
    return it->second;
}

const Tensor* Weights::maybe(const std::string& name) const {
    auto it = tensors.find(name);
    return it == tensors.end() ? nullptr : &it->second;
}

namespace {

std::string layer_prefix(int i) { return "layers." + std::to_string(i) + "."; }

void expect_shape(const Weights& w, const std::string& name, std::vector<size_t> shape) {
    const Tensor& t = w.get(name);
    if (t.shape != shape) {
        Tensor want(shape);
        throw DataError("tensor " + name + " has shape " + t.shape_str() + ", expected " +
                        want.shape_str());
    }
}

void validate_weights(const Weights& w, const ModelConfig& c) {
    const auto d = static_cast<size_t>(c.d_model);
    const auto v = static_cast<size_t>(c.vocab_size);
    const auto qdim = static_cast<size_t>(c.n_heads * c.d_head);
    const auto kvdim = static_cast<size_t>(c.n_kv_heads * c.d_head);
    const auto hidden = static_cast<size_t>(c.mlp_hidden);

    expect_shape(w, "embed.weight", {v, d});
    if (c.positional_kind == PositionalKind::LearnedAbsolute) {
        const Tensor& pos = w.get("pos_embed.weight");
        if (pos.rank() != 2 || pos.shape[1] != d || pos.shape[0] < 1) {
            throw DataError("pos_embed.weight has shape " + pos.shape_str() +
                            ", expected [max_seq x d_model]");
        }
    }
    const bool ln = c.norm_kind == NormKind::LayerNorm;
    for (int i = 0; i < c.n_layers; ++i) {
        const std::string p = layer_prefix(i);
        expect_shape(w, p + "attn_norm.gamma", {d});
        expect_shape(w, p + "mlp_norm.gamma", {d});
        if (ln) {
            expect_shape(w, p + "attn_norm.beta", {d});
            expect_shape(w, p + "mlp_norm.beta", {d});
        }
        expect_shape(w, p + "attn.q.weight", {d, qdim});
        expect_shape(w, p + "attn.k.weight", {d, kvdim});
        expect_shape(w, p + "attn.v.weight", {d, kvdim});
        expect_shape(w, p + "attn.o.weight", {qdim, d});
        if (c.attn_bias) {
            expect_shape(w, p + "attn.q.bias", {qdim});
            expect_shape(w, p + "attn.k.bias", {kvdim});
            expect_shape(w, p + "attn.v.bias", {kvdim});
            expect_shape(w, p + "attn.o.bias", {d});
        }
        expect_shape(w, p + "mlp.fc_in.weight", {d, hidden});
        expect_shape(w, p + "mlp.fc_out.weight", {hidden, d});
        if (c.mlp_bias) {
            expect_shape(w, p + "mlp.fc_in.bias", {hidden});
            expect_shape(w, p + "mlp.fc_out.bias", {d});
        }
    }
    expect_shape(w, "final_norm.gamma", {d});
    if (ln) expect_shape(w, "final_norm.beta", {d});
    expect_shape(w, "unembed.weight", {v, d});
    if (c.unembed_bias) expect_shape(w, "unembed.bias", {v});
}

bool looks_like_gpt2(const TensorFile& f) {
    return f.has("wte.weight") && f.has("h.0.ln_1.weight");
}

Tensor split_columns(const Tensor& t, size_t col_begin, size_t col_end) {
    const size_t rows = t.shape[0];
    const size_t cols = t.shape[1];
    Tensor out({rows, col_end - col_begin});
    for (size_t r = 0; r < rows; ++r) {
        std::memcpy(out.data.data() + r * out.shape[1], t.data.data() + r * cols + col_begin,
                    (col_end - col_begin) * sizeof(float));
    }
    return out;
}

Tensor slice_vector(const Tensor& t, size_t begin, size_t end) {
    Tensor out({end - begin});
    std::memcpy(out.data.data(), t.data.data() + begin, (end - begin) * sizeof(float));
    return out;
}

// HF GPT-2 checkpoints use Conv1D layers, which already store weights
// [in x out]; only names and the fused QKV block need translation.
Weights remap_gpt2(const TensorFile& f, const ModelConfig& c) {
    Weights w;
    auto move_in = [&](const std::string& dst, const std::string& src) {
        w.tensors[dst] = f.get(src);
    };
    move_in("embed.weight", "wte.weight");
    move_in("pos_embed.weight", "wpe.weight");
    const auto d = static_cast<size_t>(c.d_model);
    for (int i = 0; i < c.n_layers; ++i) {
        const std::string hp = "h." + std::to_string(i) + ".";
        const std::string p = layer_prefix(i);
        move_in(p + "attn_norm.gamma", hp + "ln_1.weight");
        move_in(p + "attn_norm.beta", hp + "ln_1.bias");
        const Tensor& qkv = f.get(hp + "attn.c_attn.weight");
        if (qkv.rank() != 2 || qkv.shape[1] != 3 * d) {
            throw DataError("fused QKV tensor " + hp + "attn.c_attn.weight has shape " +
                            qkv.shape_str());
        }
        w.tensors[p + "attn.q.weight"] = split_columns(qkv, 0, d);
        w.tensors[p + "attn.k.weight"] = split_columns(qkv, d, 2 * d);
        w.tensors[p + "attn.v.weight"] = split_columns(qkv, 2 * d, 3 * d);
        const Tensor& qkv_b = f.get(hp + "attn.c_attn.bias");
        w.tensors[p + "attn.q.bias"] = slice_vector(qkv_b, 0, d);
        w.tensors[p + "attn.k.bias"] = slice_vector(qkv_b, d, 2 * d);
        w.tensors[p + "attn.v.bias"] = slice_vector(qkv_b, 2 * d, 3 * d);
        move_in(p + "attn.o.weight", hp + "attn.c_proj.weight");
        move_in(p + "attn.o.bias", hp + "attn.c_proj.bias");
        move_in(p + "mlp_norm.gamma", hp + "ln_2.weight");
        move_in(p + "mlp_norm.beta", hp + "ln_2.bias");
        move_in(p + "mlp.fc_in.weight", hp + "mlp.c_fc.weight");
        move_in(p + "mlp.fc_in.bias", hp + "mlp.c_fc.bias");
        move_in(p + "mlp.fc_out.weight", hp + "mlp.c_proj.weight");
        move_in(p + "mlp.fc_out.bias", hp + "mlp.c_proj.bias");
    }
    move_in("final_norm.gamma", "ln_f.weight");
    move_in("final_norm.beta", "ln_f.bias");
    w.tensors["unembed.weight"] = f.get("wte.weight");
    return w;
}

}  // namespace

Weights weights_from_file(const TensorFile& file, const ModelConfig& config) {
    Weights w;
    if (looks_like_gpt2(file)) {
        w = remap_gpt2(file, config);
    } else {
        w.tensors = file.tensors;
        if (config.tie_embeddings) {
            auto it = w.tensors.find("unembed.weight");
            if (it == w.tensors.end()) {
                w.tensors["unembed.weight"] = w.get("embed.weight");
            } else if (it->second.data != w.get("embed.weight").data) {
                throw DataError("tie_embeddings set but unembed.weight differs from embed.weight");
            }
        }
    }
    validate_weights(w, config);
    return w;
}

Weights load_weights(const std::string& path, const ModelConfig& config) {
    return weights_from_file(load_tensor_file(path), config);
}

void save_weights(const std::string& path, const Weights& weights, const ModelConfig& config) {
    TensorFile f;
    f.tensors = weights.tensors;
    if (config.tie_embeddings) f.tensors.erase("unembed.weight");
    f.metadata["model_config"] = config.to_json_text();
    save_tensor_file(path, f);
}

Weights seeded_init(const ModelConfig& config, uint64_t seed, int max_positions) {
    config.validate();
    Rng rng(seed);
    const auto d = static_cast<size_t>(config.d_model);
    const auto v = static_cast<size_t>(config.vocab_size);
    const auto qdim = static_cast<size_t>(config.n_heads * config.d_head);
    const auto kvdim = static_cast<size_t>(config.n_kv_heads * config.d_head);
    const auto hidden = static_cast<size_t>(config.mlp_hidden);
    const float sigma = 0.02f;

    Weights w;
    auto gauss = [&](const std::string& name, std::vector<size_t> shape) {
        Tensor t(shape);
        t.data = rng.gaussian_vector(t.numel(), 0.0f, sigma);
        w.tensors[name] = std::move(t);
    };
    auto fill = [&](const std::string& name, std::vector<size_t> shape, float value) {
        Tensor t(shape);
        std::fill(t.data.begin(), t.data.end(), value);
        w.tensors[name] = std::move(t);
    };

    gauss("embed.weight", {v, d});
    if (config.positional_kind == PositionalKind::LearnedAbsolute) {
        gauss("pos_embed.weight", {static_cast<size_t>(max_positions), d});
    }
    const bool ln = config.norm_kind == NormKind::LayerNorm;
    for (int i = 0; i < config.n_layers; ++i) {
        const std::string p = layer_prefix(i);
        fill(p + "attn_norm.gamma", {d}, 1.0f);
        fill(p + "mlp_norm.gamma", {d}, 1.0f);
        if (ln) {
            fill(p + "attn_norm.beta", {d}, 0.0f);
            fill(p + "mlp_norm.beta", {d}, 0.0f);
        }
        gauss(p + "attn.q.weight", {d, qdim});
        gauss(p + "attn.k.weight", {d, kvdim});
        gauss(p + "attn.v.weight", {d, kvdim});
        gauss(p + "attn.o.weight", {qdim, d});
        if (config.attn_bias) {
            fill(p + "attn.q.bias", {qdim}, 0.0f);
            fill(p + "attn.k.bias", {kvdim}, 0.0f);
            fill(p + "attn.v.bias", {kvdim}, 0.0f);
            fill(p + "attn.o.bias", {d}, 0.0f);
        }
        gauss(p + "mlp.fc_in.weight", {d, hidden});
        gauss(p + "mlp.fc_out.weight", {hidden, d});
        if (config.mlp_bias) {
            fill(p + "mlp.fc_in.bias", {hidden}, 0.0f);
            fill(p + "mlp.fc_out.bias", {d}, 0.0f);
        }
    }
    fill("final_norm.gamma", {d}, 1.0f);
    if (ln) fill("final_norm.beta", {d}, 0.0f);
    if (config.tie_embeddings) {
        w.tensors["unembed.weight"] = w.get("embed.weight");
    } else {
        gauss("unembed.weight", {v, d});
    }
    if (config.unembed_bias) fill("unembed.bias", {v}, 0.0f);
    return w;
}

}  // namespace neglab
