#include "neglab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "neglab/errors.hpp"

namespace neglab {

TraceRequest TraceRequest::everything(int n_layers) {
    TraceRequest r;
    for (int i = 0; i < n_layers; ++i) {
        r.record_ao.insert(i);
        r.record_mo.insert(i);
        r.record_ap.insert(i);
        r.snapshots.insert({i, SnapPoint::Pre});
        r.snapshots.insert({i, SnapPoint::Mid});
        r.snapshots.insert({i, SnapPoint::Post});
    }
    return r;
}

void TraceRequest::validate(int n_layers, int seq_len) const {
    auto check = [&](int layer) {
        if (layer < 0 || layer >= n_layers) {
            throw ConfigError("trace request layer " + std::to_string(layer + 1) +
                              " out of range (model has " + std::to_string(n_layers) + " layers)");
        }
    };
    for (int l : record_ao) check(l);
    for (int l : record_mo) check(l);
    for (int l : record_ap) check(l);
    for (const auto& [l, p] : snapshots) check(l);
    if (positions) {
        for (int p : *positions) {
            if (p < 0 || p >= seq_len) {
                throw ConfigError("trace request position " + std::to_string(p) +
                                  " out of range for sequence length " + std::to_string(seq_len));
            }
        }
    }
}

namespace {

template <typename MapT>
const std::vector<float>& lookup_layer_pos(const MapT& m, int layer, int position,
                                           const char* what) {
    auto it = m.find(layer);
    if (it == m.end()) {
        throw DataError(std::string("trace record has no ") + what + " for layer " +
                        std::to_string(layer + 1));
    }
    auto jt = it->second.find(position);
    if (jt == it->second.end()) {
        throw DataError(std::string("trace record has no ") + what + " at position " +
                        std::to_string(position));
    }
    return jt->second;
}

}  // namespace

const std::vector<float>& TraceRecord::ao(int layer, int position) const {
    return lookup_layer_pos(attn_out, layer, position, "attention output");
}

const std::vector<float>& TraceRecord::mo(int layer, int position) const {
    return lookup_layer_pos(mlp_out, layer, position, "MLP output");
}

const std::vector<float>& TraceRecord::emb(int position) const {
    auto it = embedding.find(position);
    if (it == embedding.end()) {
        throw DataError("trace record has no embedding at position " + std::to_string(position));
    }
    return it->second;
}

const std::vector<float>& TraceRecord::snapshot(int layer, SnapPoint point, int position) const {
    auto it = snapshots.find({layer, static_cast<int>(point)});
    if (it == snapshots.end()) {
        throw DataError("trace record has no snapshot for layer " + std::to_string(layer + 1));
    }
    auto jt = it->second.find(position);
    if (jt == it->second.end()) {
        throw DataError("trace record snapshot missing position " + std::to_string(position));
    }
    return jt->second;
}

Model::Model(ModelConfig config, Weights weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
    config_.validate();
}

namespace {

// Resolved per-forward view of the plan.
struct PlanIndex {
    struct SinkSpec {
        const std::set<int>* heads = nullptr;  // nullptr = all
        bool all_positions = true;
    };
    std::map<int, SinkSpec> sinks;                                // layer ->
    std::map<int, std::vector<AttentionKnockout>> knockouts;      // layer ->
    std::map<int, const Tensor*> freeze;                          // layer -> [H x T x T]
    std::map<int, std::map<int, const std::vector<float>*>> patch_ao;  // layer -> pos -> vec
    std::map<int, std::set<int>> zero_ao;                         // layer -> positions
    std::map<int, std::set<int>> zero_mo;

    static PlanIndex build(const InterventionPlan& plan, int seq_len, int d_model) {
        PlanIndex idx;
        auto resolve = [&](int pos) { return pos == kLastPosition ? seq_len - 1 : pos; };
        for (const auto& d : plan.directives()) {
            std::visit(
                [&](const auto& dir) {
                    using T = std::decay_t<decltype(dir)>;
                    if constexpr (std::is_same_v<T, AttentionSink>) {
                        SinkSpec spec;
                        spec.heads = dir.heads ? &*dir.heads : nullptr;
                        spec.all_positions = dir.positions == SinkPositions::All;
                        for (int l : dir.layers) idx.sinks[l] = spec;
                    } else if constexpr (std::is_same_v<T, AttentionKnockout>) {
                        AttentionKnockout resolved = dir;
                        resolved.query_pos = resolve(dir.query_pos);
                        for (int l : dir.layers) idx.knockouts[l].push_back(resolved);
                    } else if constexpr (std::is_same_v<T, FreezeAP>) {
                        for (int l : dir.layers) idx.freeze[l] = &dir.patterns.at(l);
                    } else if constexpr (std::is_same_v<T, PatchAO>) {
                        for (int l : dir.layers) {
                            const auto& vec = dir.vectors.at(l);
                            if (vec.size() != static_cast<size_t>(d_model)) {
                                throw ConfigError("patch vector at layer " + std::to_string(l + 1) +
                                                  " has dimension " + std::to_string(vec.size()) +
                                                  ", expected d_model");
                            }
                            idx.patch_ao[l][resolve(dir.position)] = &vec;
                        }
                    } else if constexpr (std::is_same_v<T, ZeroAO>) {
                        for (int l : dir.layers) idx.zero_ao[l].insert(resolve(dir.position));
                    } else {
                        for (int l : dir.layers) idx.zero_mo[l].insert(resolve(dir.position));
                    }
                },
                d);
        }
        return idx;
    }
};

void add_bias(float* out, const Tensor* bias, size_t t, size_t n) {
    if (!bias) return;
    for (size_t i = 0; i < t; ++i) {
        float* row = out + i * n;
        for (size_t j = 0; j < n; ++j) row[j] += bias->data[j];
    }
}

}  // namespace

TraceRecord Model::forward(const std::vector<int>& tokens, const TraceRequest& request,
                           const InterventionPlan& plan) const {
    if (tokens.empty()) throw DataError("forward on empty token sequence");
    const size_t t_len = tokens.size();
    const auto d = static_cast<size_t>(config_.d_model);
    const auto n_heads = static_cast<size_t>(config_.n_heads);
    const auto n_kv = static_cast<size_t>(config_.n_kv_heads);
    const auto dh = static_cast<size_t>(config_.d_head);
    const auto qdim = n_heads * dh;
    const auto kvdim = n_kv * dh;
    const size_t group = n_heads / n_kv;
    const auto vocab = static_cast<size_t>(config_.vocab_size);

    request.validate(config_.n_layers, static_cast<int>(t_len));
    plan.validate(config_.n_layers, config_.n_heads, static_cast<int>(t_len));
    const PlanIndex px = PlanIndex::build(plan, static_cast<int>(t_len), config_.d_model);

    for (int tok : tokens) {
        if (tok < 0 || tok >= config_.vocab_size) {
            throw DataError("token id " + std::to_string(tok) + " outside vocabulary");
        }
    }

    TraceRecord trace;
    trace.seq_len = t_len;
    trace.readout_pos = static_cast<int>(t_len) - 1;

    const bool trace_all_pos = !request.positions.has_value();
    auto traced_pos = [&](size_t pos) {
        return trace_all_pos || request.positions->count(static_cast<int>(pos)) > 0;
    };

    // embeddings
    const Tensor& embed = weights_.get("embed.weight");
    Tensor resid({t_len, d});
    for (size_t i = 0; i < t_len; ++i) {
        std::memcpy(resid.row(i).data(), embed.row(static_cast<size_t>(tokens[i])).data(),
                    d * sizeof(float));
    }
    if (config_.positional_kind == PositionalKind::LearnedAbsolute) {
        const Tensor& pos_embed = weights_.get("pos_embed.weight");
        if (t_len > pos_embed.shape[0]) {
            throw DataError("sequence length " + std::to_string(t_len) +
                            " exceeds learned position table of " +
                            std::to_string(pos_embed.shape[0]));
        }
        for (size_t i = 0; i < t_len; ++i) {
            auto row = resid.row(i);
            auto prow = pos_embed.row(i);
            for (size_t j = 0; j < d; ++j) row[j] += prow[j];
        }
    }
    for (size_t i = 0; i < t_len; ++i) {
        if (traced_pos(i)) {
            trace.embedding[static_cast<int>(i)] =
                std::vector<float>(resid.row(i).begin(), resid.row(i).end());
        }
    }

    const bool use_ln = config_.norm_kind == NormKind::LayerNorm;
    const float eps = config_.eps;
    std::vector<float> normed(t_len * d);
    std::vector<float> q(t_len * qdim), k(t_len * kvdim), v(t_len * kvdim);
    std::vector<float> ctx(t_len * qdim);
    std::vector<float> attn_out(t_len * d);
    std::vector<float> hidden(t_len * static_cast<size_t>(config_.mlp_hidden));
    std::vector<float> mlp_out(t_len * d);

    auto record_snapshot = [&](int layer, SnapPoint point) {
        if (!request.snapshots.count({layer, point})) return;
        auto& slot = trace.snapshots[{layer, static_cast<int>(point)}];
        for (size_t i = 0; i < t_len; ++i) {
            if (traced_pos(i)) {
                slot[static_cast<int>(i)] =
                    std::vector<float>(resid.row(i).begin(), resid.row(i).end());
            }
        }
    };

    auto apply_norm = [&](const std::string& gamma_name, const std::string& beta_name) {
        const Tensor& gamma = weights_.get(gamma_name);
        const Tensor* beta = use_ln ? &weights_.get(beta_name) : nullptr;
        for (size_t i = 0; i < t_len; ++i) {
            if (use_ln) {
                ops::layer_norm_f32(resid.row(i).data(), gamma.data.data(), beta->data.data(),
                                    normed.data() + i * d, d, eps);
            } else {
                ops::rms_norm_f32(resid.row(i).data(), gamma.data.data(), normed.data() + i * d, d,
                                  eps);
            }
        }
    };

    for (int layer = 0; layer < config_.n_layers; ++layer) {
        const std::string p = "layers." + std::to_string(layer) + ".";
        record_snapshot(layer, SnapPoint::Pre);

        // attention
        apply_norm(p + "attn_norm.gamma", p + "attn_norm.beta");
        ops::matmul_f32(normed.data(), weights_.get(p + "attn.q.weight").data.data(), q.data(),
                        t_len, d, qdim);
        ops::matmul_f32(normed.data(), weights_.get(p + "attn.k.weight").data.data(), k.data(),
                        t_len, d, kvdim);
        ops::matmul_f32(normed.data(), weights_.get(p + "attn.v.weight").data.data(), v.data(),
                        t_len, d, kvdim);
        if (config_.attn_bias) {
            add_bias(q.data(), weights_.maybe(p + "attn.q.bias"), t_len, qdim);
            add_bias(k.data(), weights_.maybe(p + "attn.k.bias"), t_len, kvdim);
            add_bias(v.data(), weights_.maybe(p + "attn.v.bias"), t_len, kvdim);
        }
        if (config_.positional_kind == PositionalKind::Rotary) {
            // rotate each head's block; strides differ from the [T x dh]
            // kernel layout, so rotate row by row
            for (size_t pos = 0; pos < t_len; ++pos) {
                for (size_t h = 0; h < n_heads; ++h) {
                    ops::rotary_apply_f32(q.data() + pos * qdim + h * dh, 1, dh, config_.rope_base,
                                          pos);
                }
                for (size_t g = 0; g < n_kv; ++g) {
                    ops::rotary_apply_f32(k.data() + pos * kvdim + g * dh, 1, dh, config_.rope_base,
                                          pos);
                }
            }
        }

        const auto sink_it = px.sinks.find(layer);
        const auto knock_it = px.knockouts.find(layer);
        const auto freeze_it = px.freeze.find(layer);
        const bool record_ap = request.record_ap.count(layer) > 0;
        Tensor* ap_store = nullptr;
        if (record_ap) {
            ap_store = &trace.attn_pattern[layer];
            *ap_store = Tensor({n_heads, t_len, t_len});
        }

        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
        std::vector<float> scores(t_len);
        for (size_t h = 0; h < n_heads; ++h) {
            const size_t kvh = h / group;
            const bool head_sunk =
                sink_it != px.sinks.end() &&
                (!sink_it->second.heads || sink_it->second.heads->count(static_cast<int>(h)) > 0);
            for (size_t qpos = 0; qpos < t_len; ++qpos) {
                const size_t allowed = qpos + 1;
                const float* qrow = q.data() + qpos * qdim + h * dh;
                for (size_t kpos = 0; kpos < allowed; ++kpos) {
                    const float* krow = k.data() + kpos * kvdim + kvh * dh;
                    float dot = 0.0f;
                    for (size_t j = 0; j < dh; ++j) dot += qrow[j] * krow[j];
                    scores[kpos] = dot * scale;
                }
                if (knock_it != px.knockouts.end()) {
                    for (const auto& ko : knock_it->second) {
                        if (ko.query_pos == static_cast<int>(qpos)) {
                            const size_t hi = std::min<size_t>(ko.key_end, allowed);
                            for (size_t kpos = ko.key_begin; kpos < hi; ++kpos) {
                                scores[kpos] = ops::kMaskedScore;
                            }
                        }
                    }
                }
                if (head_sunk &&
                    (sink_it->second.all_positions || qpos == t_len - 1)) {
                    apply_sink_to_scores(std::span<float>(scores.data(), allowed), qpos);
                }
                ops::softmax_row(std::span<float>(scores.data(), t_len), allowed);

                const float* weights_row = scores.data();
                if (freeze_it != px.freeze.end()) {
                    weights_row = freeze_it->second->data.data() + (h * t_len + qpos) * t_len;
                }
                if (ap_store) {
                    std::memcpy(ap_store->data.data() + (h * t_len + qpos) * t_len, weights_row,
                                t_len * sizeof(float));
                }
                float* crow = ctx.data() + qpos * qdim + h * dh;
                std::memset(crow, 0, dh * sizeof(float));
                for (size_t kpos = 0; kpos < allowed; ++kpos) {
                    const float w = weights_row[kpos];
                    if (w == 0.0f) continue;
                    const float* vrow = v.data() + kpos * kvdim + kvh * dh;
                    for (size_t j = 0; j < dh; ++j) crow[j] += w * vrow[j];
                }
            }
        }

        ops::matmul_f32(ctx.data(), weights_.get(p + "attn.o.weight").data.data(), attn_out.data(),
                        t_len, qdim, d);
        if (config_.attn_bias) {
            add_bias(attn_out.data(), weights_.maybe(p + "attn.o.bias"), t_len, d);
        }

        const auto patch_it = px.patch_ao.find(layer);
        if (patch_it != px.patch_ao.end()) {
            for (const auto& [pos, vec] : patch_it->second) {
                std::memcpy(attn_out.data() + static_cast<size_t>(pos) * d, vec->data(),
                            d * sizeof(float));
            }
        }
        const auto zao_it = px.zero_ao.find(layer);
        if (zao_it != px.zero_ao.end()) {
            for (int pos : zao_it->second) {
                std::memset(attn_out.data() + static_cast<size_t>(pos) * d, 0, d * sizeof(float));
            }
        }
        ops::check_finite(std::span<const float>(attn_out.data(), t_len * d), "attention output");

        const bool record_ao = request.record_ao.count(layer) > 0;
        for (size_t i = 0; i < t_len; ++i) {
            auto row = resid.row(i);
            const float* ao_row = attn_out.data() + i * d;
            if (record_ao && traced_pos(i)) {
                trace.attn_out[layer][static_cast<int>(i)] =
                    std::vector<float>(ao_row, ao_row + d);
            }
            for (size_t j = 0; j < d; ++j) row[j] += ao_row[j];
        }
        record_snapshot(layer, SnapPoint::Mid);

        // MLP
        apply_norm(p + "mlp_norm.gamma", p + "mlp_norm.beta");
        const auto hdim = static_cast<size_t>(config_.mlp_hidden);
        ops::matmul_f32(normed.data(), weights_.get(p + "mlp.fc_in.weight").data.data(),
                        hidden.data(), t_len, d, hdim);
        if (config_.mlp_bias) {
            add_bias(hidden.data(), weights_.maybe(p + "mlp.fc_in.bias"), t_len, hdim);
        }
        if (config_.activation == ActivationKind::Gelu) {
            for (auto& x : hidden) x = ops::gelu(x);
        } else {
            for (auto& x : hidden) x = ops::silu(x);
        }
        ops::matmul_f32(hidden.data(), weights_.get(p + "mlp.fc_out.weight").data.data(),
                        mlp_out.data(), t_len, hdim, d);
        if (config_.mlp_bias) {
            add_bias(mlp_out.data(), weights_.maybe(p + "mlp.fc_out.bias"), t_len, d);
        }
        const auto zmo_it = px.zero_mo.find(layer);
        if (zmo_it != px.zero_mo.end()) {
            for (int pos : zmo_it->second) {
                std::memset(mlp_out.data() + static_cast<size_t>(pos) * d, 0, d * sizeof(float));
            }
        }
        ops::check_finite(std::span<const float>(mlp_out.data(), t_len * d), "MLP output");

        const bool record_mo = request.record_mo.count(layer) > 0;
        for (size_t i = 0; i < t_len; ++i) {
            auto row = resid.row(i);
            const float* mo_row = mlp_out.data() + i * d;
            if (record_mo && traced_pos(i)) {
                trace.mlp_out[layer][static_cast<int>(i)] = std::vector<float>(mo_row, mo_row + d);
            }
            for (size_t j = 0; j < d; ++j) row[j] += mo_row[j];
        }
        record_snapshot(layer, SnapPoint::Post);
    }

    trace.final_hidden = resid;

    // final norm + unembedding
    const Tensor& fgamma = weights_.get("final_norm.gamma");
    const Tensor* fbeta = use_ln ? &weights_.get("final_norm.beta") : nullptr;
    trace.final_norm_scale.resize(t_len);
    for (size_t i = 0; i < t_len; ++i) {
        const float* row = resid.row(i).data();
        trace.final_norm_scale[i] =
            use_ln ? ops::layer_norm_scale(row, d, eps) : ops::rms_scale(row, d, eps);
        if (use_ln) {
            ops::layer_norm_f32(row, fgamma.data.data(), fbeta->data.data(), normed.data() + i * d,
                                d, eps);
        } else {
            ops::rms_norm_f32(row, fgamma.data.data(), normed.data() + i * d, d, eps);
        }
    }

    const Tensor& unembed = weights_.get("unembed.weight");
    trace.logits = Tensor({t_len, vocab});
    for (size_t i = 0; i < t_len; ++i) {
        const float* nrow = normed.data() + i * d;
        float* lrow = trace.logits.row(i).data();
        for (size_t tok = 0; tok < vocab; ++tok) {
            const float* urow = unembed.data.data() + tok * d;
            float dot = 0.0f;
            for (size_t j = 0; j < d; ++j) dot += nrow[j] * urow[j];
            lrow[tok] = dot;
        }
    }
    if (config_.unembed_bias) {
        if (const Tensor* ub = weights_.maybe("unembed.bias")) {
            for (size_t i = 0; i < t_len; ++i) {
                float* lrow = trace.logits.row(i).data();
                for (size_t tok = 0; tok < vocab; ++tok) lrow[tok] += ub->data[tok];
            }
        }
    }
    ops::check_finite(trace.logits, "logits");
    return trace;
}

int first_divergence_position(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.empty() || b.empty()) {
        throw DataError("answer tokenizes to an empty sequence");
    }
    const size_t n = std::min(a.size(), b.size());
    for (size_t i = 0; i < n; ++i) {
        if (a[i] != b[i]) return static_cast<int>(i);
    }
    if (a.size() == b.size()) {
        throw DataError("identical answers: token sequences do not diverge");
    }
    return static_cast<int>(n);
}

int first_divergence_position(const Tokenizer& tok, const std::string& y_plus,
                              const std::string& y_minus) {
    return first_divergence_position(tok.encode(y_plus), tok.encode(y_minus));
}

std::vector<int> encode_prompt(const Tokenizer& tok, const ModelConfig& config,
                               const std::string& text) {
    std::vector<int> ids;
    if (config.bos_token) {
        auto bos = tok.token_id(*config.bos_token);
        if (!bos) {
            throw ConfigError("configured bos_token '" + *config.bos_token +
                              "' is not in the vocabulary");
        }
        ids.push_back(*bos);
    }
    const std::vector<int> body = tok.encode(text);
    ids.insert(ids.end(), body.begin(), body.end());
    return ids;
}

}  // namespace neglab
