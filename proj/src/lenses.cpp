#include "neglab/lenses.hpp"

#include "json.hpp"
#include "neglab/errors.hpp"

namespace neglab {

using ordered_json = nlohmann::ordered_json;

std::vector<float> logit_lens(std::span<const float> x, const Weights& weights,
                              const ModelConfig& config, LensNormMode mode, float frozen_sigma) {
    const auto d = static_cast<size_t>(config.d_model);
    if (x.size() != d) {
        throw ShapeError("logit_lens input has dimension " + std::to_string(x.size()) +
                         ", expected d_model=" + std::to_string(d));
    }
    const Tensor& gamma = weights.get("final_norm.gamma");
    const bool use_ln = config.norm_kind == NormKind::LayerNorm;

    std::vector<float> normed(d);
    if (mode == LensNormMode::SelfNorm) {
        if (use_ln) {
            ops::layer_norm_f32(x.data(), gamma.data.data(),
                                weights.get("final_norm.beta").data.data(), normed.data(), d,
                                config.eps);
        } else {
            ops::rms_norm_f32(x.data(), gamma.data.data(), normed.data(), d, config.eps);
        }
    } else {
        if (frozen_sigma <= 0.0f) {
            throw DataError("frozen-sigma lens requires a positive scale");
        }
        const float inv = 1.0f / frozen_sigma;
        if (use_ln) {
            // keep the mean subtraction (linear in x); gain applied, shift
            // terms dropped so the map stays linear
            float mean = 0.0f;
            for (size_t i = 0; i < d; ++i) mean += x[i];
            mean /= static_cast<float>(d);
            for (size_t i = 0; i < d; ++i) normed[i] = (x[i] - mean) * inv * gamma.data[i];
        } else {
            for (size_t i = 0; i < d; ++i) normed[i] = x[i] * inv * gamma.data[i];
        }
    }

    const Tensor& unembed = weights.get("unembed.weight");
    const size_t vocab = unembed.shape[0];
    std::vector<float> logits(vocab);
    for (size_t t = 0; t < vocab; ++t) {
        const float* urow = unembed.data.data() + t * d;
        float dot = 0.0f;
        for (size_t j = 0; j < d; ++j) dot += normed[j] * urow[j];
        logits[t] = dot;
    }
    if (mode == LensNormMode::SelfNorm && config.unembed_bias) {
        if (const Tensor* ub = weights.maybe("unembed.bias")) {
            for (size_t t = 0; t < vocab; ++t) logits[t] += ub->data[t];
        }
    }
    ops::check_finite(std::span<const float>(logits.data(), logits.size()), "logit_lens");
    return logits;
}

LensReadout readout(std::span<const float> x, const Weights& weights, const ModelConfig& config,
                    size_t k, LensNormMode mode, float frozen_sigma) {
    const std::vector<float> logits = logit_lens(x, weights, config, mode, frozen_sigma);
    if (k > logits.size()) {
        throw DataError("readout k=" + std::to_string(k) + " exceeds vocabulary size " +
                        std::to_string(logits.size()));
    }
    LensReadout r;
    r.norm_mode = mode == LensNormMode::SelfNorm ? "self-norm" : "frozen-sigma";
    const auto top = ops::topk(std::span<const float>(logits.data(), logits.size()), k);
    const auto bot = ops::bottomk(std::span<const float>(logits.data(), logits.size()), k);
    for (size_t i = 0; i < k; ++i) {
        r.promoted.emplace_back(static_cast<int>(top.indices[i]), top.values[i]);
        r.demoted.emplace_back(static_cast<int>(bot.indices[i]), bot.values[i]);
    }
    return r;
}

std::vector<LensReadout> lens_scan(const Model& model, const std::vector<int>& tokens,
                                   int layer_begin, int layer_end, const std::string& signal,
                                   size_t k, LensNormMode mode) {
    if (layer_begin > layer_end) return {};
    if (layer_begin < 0 || layer_end >= model.config().n_layers) {
        throw ConfigError("lens scan layer range " + std::to_string(layer_begin + 1) + ".." +
                          std::to_string(layer_end + 1) + " out of bounds");
    }
    if (signal != "AO" && signal != "MO") {
        throw ConfigError("lens scan signal must be AO or MO, got " + signal);
    }
    TraceRequest req;
    const int last = static_cast<int>(tokens.size()) - 1;
    req.positions = std::set<int>{last};
    for (int l = layer_begin; l <= layer_end; ++l) {
        if (signal == "AO") req.record_ao.insert(l);
        else req.record_mo.insert(l);
    }
    const TraceRecord trace = model.forward(tokens, req);
    const float sigma = trace.final_norm_scale[static_cast<size_t>(last)];

    std::vector<LensReadout> out;
    for (int l = layer_begin; l <= layer_end; ++l) {
        const std::vector<float>& vec = signal == "AO" ? trace.ao(l, last) : trace.mo(l, last);
        LensReadout r = readout(std::span<const float>(vec.data(), vec.size()), model.weights(),
                                model.config(), k, mode, sigma);
        r.layer = l;
        r.signal = signal;
        r.position = last;
        r.source = "layer " + std::to_string(l + 1) + " " + signal + " @ last";
        out.push_back(std::move(r));
    }
    return out;
}

static ordered_json readout_json(const LensReadout& r, const Tokenizer& tok) {
    ordered_json j;
    j["layer"] = r.layer + 1;
    j["signal"] = r.signal;
    j["position"] = r.position;
    j["norm_mode"] = r.norm_mode;
    auto pairs = [&](const std::vector<std::pair<int, float>>& list) {
        ordered_json arr = ordered_json::array();
        for (const auto& [id, logit] : list) {
            arr.push_back({tok.token_string(id), logit});
        }
        return arr;
    };
    j["promoted"] = pairs(r.promoted);
    j["demoted"] = pairs(r.demoted);
    return j;
}

std::string readout_to_json(const LensReadout& r, const Tokenizer& tok) {
    return readout_json(r, tok).dump(2);
}

std::string readouts_to_json(const std::vector<LensReadout>& rs, const Tokenizer& tok) {
    ordered_json arr = ordered_json::array();
    for (const auto& r : rs) arr.push_back(readout_json(r, tok));
    return arr.dump(2);
}

}  // namespace neglab
