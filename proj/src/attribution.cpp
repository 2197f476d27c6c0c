#include "neglab/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "neglab/errors.hpp"

namespace neglab {

ContrastDirection contrast_direction(const Weights& weights, int id_minus, int id_plus) {
    const Tensor& unembed = weights.get("unembed.weight");
    const auto vocab = static_cast<int>(unembed.shape[0]);
    if (id_minus < 0 || id_minus >= vocab || id_plus < 0 || id_plus >= vocab) {
        throw DataError("contrast direction: answer id outside vocabulary");
    }
    ContrastDirection dir;
    dir.id_minus = id_minus;
    dir.id_plus = id_plus;
    const size_t d = unembed.shape[1];
    dir.d.resize(d);
    const float* rm = unembed.data.data() + static_cast<size_t>(id_minus) * d;
    const float* rp = unembed.data.data() + static_cast<size_t>(id_plus) * d;
    for (size_t i = 0; i < d; ++i) dir.d[i] = rm[i] - rp[i];
    return dir;
}

float component_contribution(std::span<const float> x, const ContrastDirection& dir, float sigma,
                             const Weights& weights, const ModelConfig& config) {
    if (sigma <= 0.0f) throw DataError("component contribution requires a positive sigma");
    const size_t d = dir.d.size();
    if (x.size() != d) {
        throw ShapeError("component contribution: dimension mismatch");
    }
    const Tensor& gamma = weights.get("final_norm.gamma");
    const float inv = 1.0f / sigma;
    double c = 0.0;
    if (config.norm_kind == NormKind::LayerNorm) {
        float mean = 0.0f;
        for (size_t i = 0; i < d; ++i) mean += x[i];
        mean /= static_cast<float>(d);
        for (size_t i = 0; i < d; ++i) {
            c += static_cast<double>((x[i] - mean) * inv * gamma.data[i]) * dir.d[i];
        }
    } else {
        for (size_t i = 0; i < d; ++i) {
            c += static_cast<double>(x[i] * inv * gamma.data[i]) * dir.d[i];
        }
    }
    return static_cast<float>(c);
}

float ContributionLedger::component_sum() const {
    float s = embedding;
    for (float v : attn) s += v;
    for (float v : mlp) s += v;
    return s;
}

namespace {

float constant_terms_along(const ContrastDirection& dir, const Weights& weights,
                           const ModelConfig& config) {
    double c = 0.0;
    if (config.norm_kind == NormKind::LayerNorm) {
        const Tensor& beta = weights.get("final_norm.beta");
        for (size_t i = 0; i < dir.d.size(); ++i) {
            c += static_cast<double>(beta.data[i]) * dir.d[i];
        }
    }
    if (config.unembed_bias) {
        if (const Tensor* ub = weights.maybe("unembed.bias")) {
            c += static_cast<double>(ub->data[static_cast<size_t>(dir.id_minus)]) -
                 static_cast<double>(ub->data[static_cast<size_t>(dir.id_plus)]);
        }
    }
    return static_cast<float>(c);
}

}  // namespace

float logit_diff_from(const TraceRecord& trace, const ContrastDirection& dir) {
    const auto logits = trace.readout_logits();
    return logits[static_cast<size_t>(dir.id_minus)] - logits[static_cast<size_t>(dir.id_plus)];
}

ContributionLedger build_ledger(const TraceRecord& trace, const ContrastDirection& dir,
                                const Weights& weights, const ModelConfig& config) {
    ContributionLedger ledger;
    const int pos = trace.readout_pos;
    ledger.sigma = trace.final_norm_scale.at(static_cast<size_t>(pos));
    const auto C = [&](const std::vector<float>& x) {
        return component_contribution(std::span<const float>(x.data(), x.size()), dir,
                                      ledger.sigma, weights, config);
    };
    ledger.embedding = C(trace.emb(pos));
    ledger.attn.resize(static_cast<size_t>(config.n_layers));
    ledger.mlp.resize(static_cast<size_t>(config.n_layers));
    for (int l = 0; l < config.n_layers; ++l) {
        ledger.attn[static_cast<size_t>(l)] = C(trace.ao(l, pos));
        ledger.mlp[static_cast<size_t>(l)] = C(trace.mo(l, pos));
    }
    ledger.bias_term = constant_terms_along(dir, weights, config);
    ledger.total_delta = logit_diff_from(trace, dir);
    ledger.residual_discrepancy =
        ledger.total_delta - (ledger.component_sum() + ledger.bias_term);
    return ledger;
}

ContrastiveScores contrastive_scores(const TraceRecord& trace_a, const TraceRecord& trace_b,
                                     const ContrastDirection& dir, const Weights& weights,
                                     const ModelConfig& config) {
    const ContributionLedger la = build_ledger(trace_a, dir, weights, config);
    const ContributionLedger lb = build_ledger(trace_b, dir, weights, config);
    ContrastiveScores s;
    s.embedding = la.embedding - lb.embedding;
    s.attn.resize(la.attn.size());
    s.mlp.resize(la.mlp.size());
    for (size_t i = 0; i < la.attn.size(); ++i) s.attn[i] = la.attn[i] - lb.attn[i];
    for (size_t i = 0; i < la.mlp.size(); ++i) s.mlp[i] = la.mlp[i] - lb.mlp[i];
    s.delta_a = la.total_delta;
    s.delta_b = lb.total_delta;
    return s;
}

std::set<int> select_critical_mlps(const std::vector<float>& scores_a,
                                   const std::vector<float>& scores_b, int top_n) {
    if (scores_a.size() != scores_b.size() || scores_a.empty()) {
        throw DataError("select_critical_mlps: score maps must cover the same layers");
    }
    auto top_set = [&](const std::vector<float>& scores) {
        std::vector<int> idx(scores.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](int a, int b) { return scores[static_cast<size_t>(a)] >
                                                    scores[static_cast<size_t>(b)]; });
        const size_t n = std::min<size_t>(static_cast<size_t>(top_n), idx.size());
        return std::set<int>(idx.begin(), idx.begin() + static_cast<long>(n));
    };
    const std::set<int> sa = top_set(scores_a);
    const std::set<int> sb = top_set(scores_b);
    std::set<int> out;
    for (int l : sa) {
        if (sb.count(l)) out.insert(l);
    }
    return out;
}

void SAEModel::validate(int d_model) const {
    const auto d = static_cast<size_t>(d_model);
    if (enc_weight.rank() != 2 || enc_weight.shape[1] != d) {
        throw ShapeError("SAE encoder weight must be [D x d_model], got " +
                         enc_weight.shape_str());
    }
    const size_t D = enc_weight.shape[0];
    if (enc_bias.shape != std::vector<size_t>{D}) {
        throw ShapeError("SAE encoder bias must be [D]");
    }
    if (dec_weight.shape != std::vector<size_t>{D, d}) {
        throw ShapeError("SAE decoder weight must be [D x d_model], got " +
                         dec_weight.shape_str());
    }
    if (dec_bias.shape != std::vector<size_t>{d}) {
        throw ShapeError("SAE decoder bias must be [d_model]");
    }
    if (topk && (k < 1 || static_cast<size_t>(k) > D)) {
        throw ConfigError("SAE top-k must be in 1..D");
    }
}

SAEModel load_sae(const std::string& path) {
    const TensorFile f = load_tensor_file(path);
    SAEModel sae;
    sae.enc_weight = f.get("W_enc");
    sae.enc_bias = f.get("b_enc");
    sae.dec_weight = f.get("W_dec");
    sae.dec_bias = f.get("b_dec");
    auto meta = f.metadata.find("activation");
    if (meta != f.metadata.end() && meta->second.rfind("topk:", 0) == 0) {
        sae.topk = true;
        sae.k = std::stoi(meta->second.substr(5));
    }
    return sae;
}

void save_sae(const std::string& path, const SAEModel& sae) {
    TensorFile f;
    f.tensors["W_enc"] = sae.enc_weight;
    f.tensors["b_enc"] = sae.enc_bias;
    f.tensors["W_dec"] = sae.dec_weight;
    f.tensors["b_dec"] = sae.dec_bias;
    f.metadata["activation"] = sae.topk ? "topk:" + std::to_string(sae.k) : "relu";
    save_tensor_file(path, f);
}

std::vector<float> sae_encode(const SAEModel& sae, std::span<const float> x) {
    const size_t D = sae.latent_count();
    const size_t d = sae.input_dim();
    if (x.size() != d) throw ShapeError("sae_encode: input dimension mismatch");
    std::vector<float> pre(D);
    for (size_t j = 0; j < D; ++j) {
        const float* row = sae.enc_weight.data.data() + j * d;
        float s = sae.enc_bias.data[j];
        for (size_t i = 0; i < d; ++i) s += row[i] * x[i];
        pre[j] = s;
    }
    if (!sae.topk) {
        for (auto& v : pre) v = std::max(0.0f, v);
        return pre;
    }
    const auto top = ops::topk(std::span<const float>(pre.data(), pre.size()),
                               static_cast<size_t>(sae.k));
    std::vector<float> alpha(D, 0.0f);
    for (size_t i = 0; i < top.indices.size(); ++i) {
        alpha[top.indices[i]] = std::max(0.0f, top.values[i]);
    }
    return alpha;
}

std::vector<float> sae_decode(const SAEModel& sae, std::span<const float> alpha) {
    const size_t D = sae.latent_count();
    const size_t d = sae.input_dim();
    if (alpha.size() != D) throw ShapeError("sae_decode: latent dimension mismatch");
    std::vector<float> out(sae.dec_bias.data.begin(), sae.dec_bias.data.end());
    for (size_t j = 0; j < D; ++j) {
        const float a = alpha[j];
        if (a == 0.0f) continue;
        const float* row = sae.dec_weight.data.data() + j * d;
        for (size_t i = 0; i < d; ++i) out[i] += a * row[i];
    }
    return out;
}

LatentAttribution latent_attribution(std::span<const float> mlp_output, const SAEModel& sae,
                                     const ContrastDirection& dir, float sigma,
                                     const Weights& weights, const ModelConfig& config) {
    sae.validate(static_cast<int>(mlp_output.size()));
    if (mlp_output.size() != dir.d.size()) {
        throw ShapeError("latent_attribution: dimension mismatch");
    }
    LatentAttribution out;
    out.alpha = sae_encode(sae, mlp_output);
    out.total = component_contribution(mlp_output, dir, sigma, weights, config);

    const size_t d = sae.input_dim();
    std::vector<std::pair<int, float>> scored;
    std::vector<float> latent_sum(d, 0.0f);
    for (size_t j = 0; j < out.alpha.size(); ++j) {
        const float a = out.alpha[j];
        if (a == 0.0f) continue;
        std::vector<float> term(d);
        const float* row = sae.dec_weight.data.data() + j * d;
        for (size_t i = 0; i < d; ++i) {
            term[i] = a * row[i];
            latent_sum[i] += term[i];
        }
        scored.emplace_back(static_cast<int>(j),
                            component_contribution(std::span<const float>(term.data(), d), dir,
                                                   sigma, weights, config));
    }
    // error term: everything the latents do not explain, including the
    // decoder bias (input-independent, so it carries no per-latent signal)
    std::vector<float> error(d);
    for (size_t i = 0; i < d; ++i) error[i] = mlp_output[i] - latent_sum[i];
    out.error_term = component_contribution(std::span<const float>(error.data(), d), dir, sigma,
                                            weights, config);

    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        return std::fabs(a.second) > std::fabs(b.second);
    });
    out.ranked = std::move(scored);
    return out;
}

}  // namespace neglab
