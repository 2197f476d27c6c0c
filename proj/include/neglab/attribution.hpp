#pragma once

#include <set>
#include <string>
#include <vector>

#include "neglab/lenses.hpp"
#include "neglab/model.hpp"

namespace neglab {

// d = W_U(y-) - W_U(y+): the residual-space direction separating the two
// answers' unembedding rows.
struct ContrastDirection {
    std::vector<float> d;
    int id_minus = 0;
    int id_plus = 0;
};

ContrastDirection contrast_direction(const Weights& weights, int id_minus, int id_plus);

// Per-component contributions along a contrast direction under one run's
// frozen final-norm scale. component(0) is the embedding, then AO_1, MO_1,
// ..., AO_L, MO_L.
struct ContributionLedger {
    float sigma = 0.0f;
    float embedding = 0.0f;
    std::vector<float> attn;  // per layer
    std::vector<float> mlp;   // per layer
    float bias_term = 0.0f;   // final-norm beta and unembedding bias along d
    float total_delta = 0.0f; // logit_diff at the readout
    float residual_discrepancy = 0.0f;  // total - (sum of parts + bias_term)

    float component_sum() const;
};

struct SAEModel {
    Tensor enc_weight;  // [D x d_model]
    Tensor enc_bias;    // [D]
    Tensor dec_weight;  // [D x d_model], row j is latent direction f_j
    Tensor dec_bias;    // [d_model]
    bool topk = false;
    int k = 0;  // active latents when topk

    size_t latent_count() const { return enc_weight.shape[0]; }
    size_t input_dim() const { return enc_weight.shape[1]; }
    void validate(int d_model) const;
};

SAEModel load_sae(const std::string& path);
void save_sae(const std::string& path, const SAEModel& sae);

std::vector<float> sae_encode(const SAEModel& sae, std::span<const float> x);
std::vector<float> sae_decode(const SAEModel& sae, std::span<const float> alpha);

struct LatentAttribution {
    std::vector<std::pair<int, float>> ranked;  // (latent, contribution) by |value| desc
    float error_term = 0.0f;                    // reconstruction error + decoder bias
    float total = 0.0f;                         // contribution of the raw component
    std::vector<float> alpha;                   // encoder activations
};

// Linear contribution of x along d under a frozen scale: the frozen-sigma
// lens logit difference. C(h_{L+1}) equals the model's logit difference when
// sigma is the run's own final-norm scale (rmsnorm; layernorm adds the
// constant bias term, reported separately in the ledger).
float component_contribution(std::span<const float> x, const ContrastDirection& dir, float sigma,
                             const Weights& weights, const ModelConfig& config);

// logit_diff(readout; y-, y+) straight off a trace.
float logit_diff_from(const TraceRecord& trace, const ContrastDirection& dir);

// Requires a trace with E, AO_i, MO_i recorded at the readout position.
ContributionLedger build_ledger(const TraceRecord& trace, const ContrastDirection& dir,
                                const Weights& weights, const ModelConfig& config);

// C(x, run_a) - C(x, run_b) per component, each run under its own sigma.
struct ContrastiveScores {
    float embedding = 0.0f;
    std::vector<float> attn;
    std::vector<float> mlp;
    float delta_a = 0.0f;
    float delta_b = 0.0f;
};

ContrastiveScores contrastive_scores(const TraceRecord& trace_a, const TraceRecord& trace_b,
                                     const ContrastDirection& dir, const Weights& weights,
                                     const ModelConfig& config);

// Intersection of the two top-n MLP layer sets (rank-based, ties to the
// lower layer). Empty intersections are legitimate results.
std::set<int> select_critical_mlps(const std::vector<float>& scores_a,
                                   const std::vector<float>& scores_b, int top_n = 10);

// Splits C(MO_i) across SAE latents; the reconstruction error and decoder
// bias take the remainder so the ledger closes exactly.
LatentAttribution latent_attribution(std::span<const float> mlp_output, const SAEModel& sae,
                                     const ContrastDirection& dir, float sigma,
                                     const Weights& weights, const ModelConfig& config);

}  // namespace neglab
