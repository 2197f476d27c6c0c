#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "neglab/corpus.hpp"
#include "neglab/interventions.hpp"
#include "neglab/model.hpp"

namespace neglab {

struct EntryEval {
    std::string id;
    float delta_plus = 0.0f;   // logit_diff(P+; y+, y-)
    float delta_minus = 0.0f;  // logit_diff(P-; y-, y+)
    bool acc_plus = false;
    bool acc_minus = false;
    bool sensitive = false;
};

struct EvalResult {
    std::vector<EntryEval> entries;
    double acc_plus = 0.0;
    double acc_minus = 0.0;
    double sensitivity = 0.0;
    size_t count = 0;
};

struct EvalOptions {
    const InterventionPlan* plan = nullptr;  // applied to every forward
    int threads = 1;
};

struct AttentionMassStat {
    double mean_mass = 0.0;              // over layers, heads, prompts
    std::vector<double> per_layer_mass;  // over heads, prompts
    size_t prompt_count = 0;
};

struct FlipRateResult {
    std::vector<double> rates;  // one per target-layer set
    size_t eligible = 0;        // entries with delta(P-; y-, y+) > 0 unpatched
};

float logit_diff(std::span<const float> logits, int a, int b);

// Acc+ = mean I[delta(P+; y+, y-) > 0], Acc- = mean I[delta(P-; y-, y+) > 0],
// sensitivity = mean I[delta(P-; y-, y+) > delta(P+; y-, y+)]. Ties count as
// failures (strict >). Multi-token answers are read out at their first
// diverging token position.
EvalResult evaluate(const std::vector<DatasetEntry>& entries, const Model& model,
                    const Tokenizer& tok, const EvalOptions& opts = {});

// Same indicators with each answer logit replaced by the arithmetic mean
// over the entry's candidate answer set. Entries whose sets are singletons
// (or absent) reduce to evaluate() exactly.
EvalResult surrogate_evaluate(const std::vector<DatasetEntry>& entries, const Model& model,
                              const Tokenizer& tok, const EvalOptions& opts = {});

// Permutation null: X = mean over entries of [delta(P-; y-, y+) -
// delta(P+; y-, y+)]; each resample redraws two distinct pool tokens per
// entry. p = (1 + #{X* >= X}) / (1 + R), so p is never zero.
struct PermutationInput {
    std::vector<std::vector<float>> logits_minus;  // per entry, readout logits
    std::vector<std::vector<float>> logits_plus;
    std::vector<std::pair<int, int>> true_pairs;   // (y_minus id, y_plus id)
    std::vector<int> pool;                         // candidate answer ids
};

double permutation_p_value(const PermutationInput& input, int n_resamples, uint64_t seed);

double permutation_sanity_check(const std::vector<DatasetEntry>& entries, const Model& model,
                                const Tokenizer& tok, int n_resamples, uint64_t seed,
                                int threads = 1);

// Mean post-softmax attention mass on keys {0, last} with the last token as
// query, averaged over heads, layers and prompts (both polarities).
AttentionMassStat attention_sink_mass(const std::vector<DatasetEntry>& entries, const Model& model,
                                      const Tokenizer& tok, int threads = 1);
AttentionMassStat attention_sink_mass_for_prompts(const std::vector<std::vector<int>>& prompts,
                                                  const Model& model, int threads = 1);

// One EvalResult per weight file, order preserved. All files must load under
// the same model config.
std::vector<EvalResult> accuracy_over_checkpoints(const std::vector<std::string>& weight_paths,
                                                  const ModelConfig& config,
                                                  const std::vector<DatasetEntry>& entries,
                                                  const Tokenizer& tok, int threads = 1);

// Path-patch flip rate: among entries whose unpatched run prefers y- on P-,
// the fraction whose patched run prefers y+. One rate per target-layer set.
FlipRateResult flip_rate(const std::vector<DatasetEntry>& entries, const Model& model,
                         const Tokenizer& tok, const std::vector<std::set<int>>& target_sweep,
                         bool surrogate = false, int threads = 1);

}  // namespace neglab
