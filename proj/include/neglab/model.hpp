#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "neglab/config.hpp"
#include "neglab/interventions.hpp"
#include "neglab/tensor.hpp"
#include "neglab/tokenizer.hpp"
#include "neglab/weights.hpp"

namespace neglab {

// Residual-stream snapshot points within a layer: pre = layer input,
// mid = after the attention add, post = after the MLP add.
enum class SnapPoint { Pre, Mid, Post };

struct TraceRequest {
    std::set<int> record_ao;  // 0-based layers
    std::set<int> record_mo;
    std::set<int> record_ap;
    std::set<std::pair<int, SnapPoint>> snapshots;
    std::optional<std::set<int>> positions;  // nullopt = all positions

    static TraceRequest none() { return {}; }
    static TraceRequest everything(int n_layers);
    void validate(int n_layers, int seq_len) const;
};

struct TraceRecord {
    size_t seq_len = 0;
    int readout_pos = 0;

    std::map<int, std::vector<float>> embedding;                   // position -> d_model
    std::map<int, std::map<int, std::vector<float>>> attn_out;     // layer -> position -> vec
    std::map<int, std::map<int, std::vector<float>>> mlp_out;      // layer -> position -> vec
    std::map<int, Tensor> attn_pattern;                            // layer -> [H x T x T]
    std::map<std::pair<int, int>, std::map<int, std::vector<float>>> snapshots;
                                                                   // (layer, point) -> position -> vec

    Tensor final_hidden;              // [T x d_model], h_{L+1}
    Tensor logits;                    // [T x vocab]
    std::vector<float> final_norm_scale;  // per-position sigma of the final norm

    const std::vector<float>& ao(int layer, int position) const;
    const std::vector<float>& mo(int layer, int position) const;
    const std::vector<float>& emb(int position) const;
    const std::vector<float>& snapshot(int layer, SnapPoint point, int position) const;
    std::span<const float> readout_logits() const { return logits.row(readout_pos); }
};

class Model {
  public:
    Model(ModelConfig config, Weights weights);

    const ModelConfig& config() const { return config_; }
    const Weights& weights() const { return weights_; }

    // Instrumented forward pass. Records the requested signals and applies
    // the plan's directives in place. With an empty plan the result is the
    // unmodified forward pass.
    TraceRecord forward(const std::vector<int>& tokens,
                        const TraceRequest& request = TraceRequest::none(),
                        const InterventionPlan& plan = InterventionPlan()) const;

  private:
    ModelConfig config_;
    Weights weights_;
};

// Index of the first position where the two token sequences differ; if one
// is a prefix of the other, the prefix length. Identical sequences are an
// error (degenerate answer pair).
int first_divergence_position(const std::vector<int>& a, const std::vector<int>& b);
int first_divergence_position(const Tokenizer& tok, const std::string& y_plus,
                              const std::string& y_minus);

// Tokenizes prompt text, prepending the configured BOS token when the
// tokenizer defines one.
std::vector<int> encode_prompt(const Tokenizer& tok, const ModelConfig& config,
                               const std::string& text);

}  // namespace neglab
