#include "neglab/interventions.hpp"

#include <algorithm>

#include "json.hpp"
#include "neglab/errors.hpp"
#include "neglab/model.hpp"

namespace neglab {

using ordered_json = nlohmann::ordered_json;

void apply_sink_to_scores(std::span<float> score_row, size_t query_pos) {
    for (size_t k = 0; k < score_row.size(); ++k) {
        if (k != 0 && k != query_pos) score_row[k] = ops::kMaskedScore;
    }
}

namespace {

struct DirectiveKey {
    int kind;
    int layer;
    int position;  // kLastPosition, explicit index, or -2 for whole-layer scope
    auto operator<=>(const DirectiveKey&) const = default;
};

std::vector<DirectiveKey> keys_of(const Directive& d, int kind_tag) {
    std::vector<DirectiveKey> keys;
    std::visit(
        [&](const auto& dir) {
            using T = std::decay_t<decltype(dir)>;
            for (int layer : dir.layers) {
                if constexpr (std::is_same_v<T, AttentionSink> || std::is_same_v<T, FreezeAP>) {
                    keys.push_back({kind_tag, layer, -2});
                } else if constexpr (std::is_same_v<T, AttentionKnockout>) {
                    keys.push_back({kind_tag, layer, dir.query_pos});
                } else {
                    keys.push_back({kind_tag, layer, dir.position});
                }
            }
        },
        d);
    return keys;
}

bool payload_equal(const Directive& a, const Directive& b) {
    if (a.index() != b.index()) return false;
    return std::visit(
        [&](const auto& da) {
            const auto& db = std::get<std::decay_t<decltype(da)>>(b);
            using T = std::decay_t<decltype(da)>;
            if constexpr (std::is_same_v<T, AttentionSink>) {
                return da.heads == db.heads && da.positions == db.positions;
            } else if constexpr (std::is_same_v<T, AttentionKnockout>) {
                return da.key_begin == db.key_begin && da.key_end == db.key_end;
            } else if constexpr (std::is_same_v<T, FreezeAP>) {
                for (int l : da.layers) {
                    auto ia = da.patterns.find(l);
                    auto ib = db.patterns.find(l);
                    if (ib == db.patterns.end()) continue;
                    if (ia->second.shape != ib->second.shape || ia->second.data != ib->second.data)
                        return false;
                }
                return true;
            } else if constexpr (std::is_same_v<T, PatchAO>) {
                return da.vectors == db.vectors;
            } else {
                return true;
            }
        },
        a);
}

}  // namespace

InterventionPlan InterventionPlan::build(std::vector<Directive> directives) {
    InterventionPlan plan;
    std::map<DirectiveKey, size_t> seen;  // key -> index into accepted list
    for (auto& d : directives) {
        const int kind = static_cast<int>(d.index());
        bool duplicate = false;
        for (const auto& key : keys_of(d, kind)) {
            auto it = seen.find(key);
            if (it != seen.end()) {
                if (!payload_equal(plan.directives_[it->second], d)) {
                    throw ConfigError("conflicting intervention directives at layer " +
                                      std::to_string(key.layer));
                }
                duplicate = true;
            }
        }
        if (duplicate) continue;
        const size_t idx = plan.directives_.size();
        for (const auto& key : keys_of(d, kind)) seen[key] = idx;
        plan.directives_.push_back(std::move(d));
    }
    return plan;
}

void InterventionPlan::validate(int n_layers, int n_heads, int seq_len) const {
    auto check_layer = [&](int layer) {
        if (layer < 0 || layer >= n_layers) {
            throw ConfigError("intervention layer " + std::to_string(layer + 1) +
                              " out of range (model has " + std::to_string(n_layers) + " layers)");
        }
    };
    auto check_pos = [&](int pos) {
        if (pos == kLastPosition) return;
        if (pos < 0 || pos >= seq_len) {
            throw ConfigError("intervention position " + std::to_string(pos) +
                              " out of range for sequence length " + std::to_string(seq_len));
        }
    };
    for (const auto& d : directives_) {
        std::visit(
            [&](const auto& dir) {
                using T = std::decay_t<decltype(dir)>;
                for (int layer : dir.layers) check_layer(layer);
                if constexpr (std::is_same_v<T, AttentionSink>) {
                    if (dir.heads) {
                        for (int h : *dir.heads) {
                            if (h < 0 || h >= n_heads) {
                                throw ConfigError("intervention head " + std::to_string(h) +
                                                  " out of range");
                            }
                        }
                    }
                } else if constexpr (std::is_same_v<T, AttentionKnockout>) {
                    check_pos(dir.query_pos);
                    if (dir.key_begin < 0 || dir.key_end < dir.key_begin ||
                        dir.key_end > seq_len) {
                        throw ConfigError("knockout key span out of range");
                    }
                } else if constexpr (std::is_same_v<T, FreezeAP>) {
                    for (int layer : dir.layers) {
                        auto it = dir.patterns.find(layer);
                        if (it == dir.patterns.end()) {
                            throw ConfigError("freeze pattern missing for layer " +
                                              std::to_string(layer + 1));
                        }
                        const Tensor& pat = it->second;
                        if (pat.rank() != 3 || pat.shape[0] != static_cast<size_t>(n_heads) ||
                            pat.shape[1] != static_cast<size_t>(seq_len) ||
                            pat.shape[2] != static_cast<size_t>(seq_len)) {
                            throw ConfigError("freeze pattern shape " + pat.shape_str() +
                                              " does not match (H, T)");
                        }
                    }
                } else if constexpr (std::is_same_v<T, PatchAO>) {
                    check_pos(dir.position);
                    for (int layer : dir.layers) {
                        if (dir.vectors.find(layer) == dir.vectors.end()) {
                            throw ConfigError("patch vector missing for layer " +
                                              std::to_string(layer + 1));
                        }
                    }
                } else {
                    check_pos(dir.position);
                }
            },
            d);
    }
}

InterventionPlan cumulative_sink_plan(int from_layer, int n_layers) {
    if (from_layer < 1 || from_layer > n_layers) {
        throw ConfigError("cumulative sink start layer " + std::to_string(from_layer) +
                          " out of range 1.." + std::to_string(n_layers));
    }
    AttentionSink sink;
    for (int l = from_layer; l <= n_layers; ++l) sink.layers.insert(l - 1);
    sink.positions = SinkPositions::All;
    return InterventionPlan::build({sink});
}

InterventionPlan windowed_sink_plan(int center, int width, int n_layers, SinkPositions positions) {
    if (width < 1) throw ConfigError("sink window width must be >= 1");
    AttentionSink sink;
    const int lo = std::max(1, center - width / 2);
    const int hi = std::min(n_layers, center + width / 2);
    for (int l = lo; l <= hi; ++l) sink.layers.insert(l - 1);
    if (sink.layers.empty()) {
        throw ConfigError("sink window [" + std::to_string(center - width / 2) + ", " +
                          std::to_string(center + width / 2) + "] misses all layers");
    }
    sink.positions = positions;
    return InterventionPlan::build({sink});
}

InterventionPlan build_path_patch_plan(const TraceRecord& trace_donor,
                                       const TraceRecord& trace_base,
                                       const std::set<int>& target_layers) {
    std::vector<Directive> directives;
    if (!target_layers.empty()) {
        PatchAO patch;
        patch.position = kLastPosition;
        for (int layer : target_layers) {
            patch.layers.insert(layer);
            patch.vectors[layer] = trace_donor.ao(layer, trace_donor.readout_pos);
        }
        directives.push_back(std::move(patch));
    }
    FreezeAP freeze;
    for (const auto& [layer, pattern] : trace_base.attn_pattern) {
        if (target_layers.count(layer)) continue;
        freeze.layers.insert(layer);
        freeze.patterns[layer] = pattern;
    }
    if (freeze.layers.empty() && target_layers.empty()) {
        throw DataError("path patch plan needs recorded attention patterns");
    }
    if (!freeze.layers.empty()) directives.push_back(std::move(freeze));
    return InterventionPlan::build(std::move(directives));
}

namespace {

ordered_json layers_to_json(const std::set<int>& layers) {
    ordered_json arr = ordered_json::array();
    for (int l : layers) arr.push_back(l + 1);  // 1-based on the wire
    return arr;
}

std::set<int> layers_from_json(const ordered_json& arr) {
    std::set<int> out;
    for (const auto& v : arr) out.insert(v.get<int>() - 1);
    return out;
}

ordered_json position_to_json(int pos) {
    if (pos == kLastPosition) return "last";
    return pos;
}

int position_from_json(const ordered_json& j) {
    if (j.is_string()) {
        if (j.get<std::string>() == "last") return kLastPosition;
        throw ConfigError("unknown position selector: " + j.get<std::string>());
    }
    return j.get<int>();
}

}  // namespace

std::string InterventionPlan::to_json_text() const {
    ordered_json out;
    ordered_json arr = ordered_json::array();
    for (const auto& d : directives_) {
        ordered_json jd;
        std::visit(
            [&](const auto& dir) {
                using T = std::decay_t<decltype(dir)>;
                if constexpr (std::is_same_v<T, AttentionSink>) {
                    jd["kind"] = "attention_sink";
                    jd["layers"] = layers_to_json(dir.layers);
                    if (dir.heads) {
                        ordered_json hs = ordered_json::array();
                        for (int h : *dir.heads) hs.push_back(h);
                        jd["heads"] = hs;
                    } else {
                        jd["heads"] = "all";
                    }
                    jd["positions"] = dir.positions == SinkPositions::All ? "all" : "last";
                } else if constexpr (std::is_same_v<T, AttentionKnockout>) {
                    jd["kind"] = "attention_knockout";
                    jd["layers"] = layers_to_json(dir.layers);
                    jd["query"] = position_to_json(dir.query_pos);
                    jd["keys"] = {dir.key_begin, dir.key_end};
                } else if constexpr (std::is_same_v<T, FreezeAP>) {
                    jd["kind"] = "freeze_ap";
                    jd["layers"] = layers_to_json(dir.layers);
                    ordered_json pats = ordered_json::object();
                    for (const auto& [layer, pat] : dir.patterns) {
                        pats[std::to_string(layer + 1)] = {{"shape", pat.shape},
                                                           {"data", pat.data}};
                    }
                    jd["patterns"] = pats;
                } else if constexpr (std::is_same_v<T, PatchAO>) {
                    jd["kind"] = "patch_ao";
                    jd["layers"] = layers_to_json(dir.layers);
                    jd["position"] = position_to_json(dir.position);
                    ordered_json vecs = ordered_json::object();
                    for (const auto& [layer, vec] : dir.vectors) {
                        vecs[std::to_string(layer + 1)] = vec;
                    }
                    jd["vectors"] = vecs;
                } else if constexpr (std::is_same_v<T, ZeroAO>) {
                    jd["kind"] = "zero_ao";
                    jd["layers"] = layers_to_json(dir.layers);
                    jd["position"] = position_to_json(dir.position);
                } else {
                    jd["kind"] = "zero_mo";
                    jd["layers"] = layers_to_json(dir.layers);
                    jd["position"] = position_to_json(dir.position);
                }
            },
            d);
        arr.push_back(jd);
    }
    out["directives"] = arr;
    return out.dump(2);
}

InterventionPlan InterventionPlan::from_json_text(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError("malformed plan JSON: " + std::string(e.what()));
    }
    std::vector<Directive> directives;
    for (const auto& jd : j.at("directives")) {
        const std::string kind = jd.at("kind").get<std::string>();
        if (kind == "attention_sink") {
            AttentionSink d;
            d.layers = layers_from_json(jd.at("layers"));
            if (jd.at("heads").is_string()) {
                d.heads = std::nullopt;
            } else {
                std::set<int> hs;
                for (const auto& h : jd.at("heads")) hs.insert(h.get<int>());
                d.heads = hs;
            }
            d.positions = jd.at("positions").get<std::string>() == "all" ? SinkPositions::All
                                                                         : SinkPositions::LastOnly;
            directives.push_back(d);
        } else if (kind == "attention_knockout") {
            AttentionKnockout d;
            d.layers = layers_from_json(jd.at("layers"));
            d.query_pos = position_from_json(jd.at("query"));
            d.key_begin = jd.at("keys")[0].get<int>();
            d.key_end = jd.at("keys")[1].get<int>();
            directives.push_back(d);
        } else if (kind == "freeze_ap") {
            FreezeAP d;
            d.layers = layers_from_json(jd.at("layers"));
            for (const auto& [key, val] : jd.at("patterns").items()) {
                Tensor pat(val.at("shape").get<std::vector<size_t>>(),
                           val.at("data").get<std::vector<float>>());
                d.patterns[std::stoi(key) - 1] = std::move(pat);
            }
            directives.push_back(std::move(d));
        } else if (kind == "patch_ao") {
            PatchAO d;
            d.layers = layers_from_json(jd.at("layers"));
            d.position = position_from_json(jd.at("position"));
            for (const auto& [key, val] : jd.at("vectors").items()) {
                d.vectors[std::stoi(key) - 1] = val.get<std::vector<float>>();
            }
            directives.push_back(std::move(d));
        } else if (kind == "zero_ao") {
            ZeroAO d;
            d.layers = layers_from_json(jd.at("layers"));
            d.position = position_from_json(jd.at("position"));
            directives.push_back(d);
        } else if (kind == "zero_mo") {
            ZeroMO d;
            d.layers = layers_from_json(jd.at("layers"));
            d.position = position_from_json(jd.at("position"));
            directives.push_back(d);
        } else {
            throw ConfigError("unknown directive kind: " + kind);
        }
    }
    return InterventionPlan::build(std::move(directives));
}

}  // namespace neglab
