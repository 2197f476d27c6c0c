#include "neglab/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "neglab/errors.hpp"
#include "neglab/parallel.hpp"
#include "neglab/rng.hpp"

namespace neglab {

float logit_diff(std::span<const float> logits, int a, int b) {
    if (a < 0 || b < 0 || static_cast<size_t>(a) >= logits.size() ||
        static_cast<size_t>(b) >= logits.size()) {
        throw DataError("logit_diff: token id outside vocabulary");
    }
    return logits[static_cast<size_t>(a)] - logits[static_cast<size_t>(b)];
}

namespace {

// Canonical pair resolved against the tokenizer: the shared prefix extends
// the prompt, and the two diverging ids are compared at the new last
// position.
struct ResolvedPair {
    std::vector<int> shared_prefix;
    int id_plus = 0;
    int id_minus = 0;
};

ResolvedPair resolve_pair(const Tokenizer& tok, const std::string& y_plus,
                          const std::string& y_minus) {
    const std::vector<int> ta = tok.encode(y_plus);
    const std::vector<int> tb = tok.encode(y_minus);
    const int j = first_divergence_position(ta, tb);
    if (static_cast<size_t>(j) >= ta.size() || static_cast<size_t>(j) >= tb.size()) {
        throw DataError("degenerate answer pair: '" + y_plus + "' / '" + y_minus +
                        "' (one tokenization is a prefix of the other)");
    }
    ResolvedPair r;
    r.shared_prefix.assign(ta.begin(), ta.begin() + j);
    r.id_plus = ta[static_cast<size_t>(j)];
    r.id_minus = tb[static_cast<size_t>(j)];
    return r;
}

int first_answer_token(const Tokenizer& tok, const std::string& answer) {
    const std::vector<int> ids = tok.encode(answer);
    if (ids.empty()) throw DataError("answer tokenizes to nothing: '" + answer + "'");
    return ids[0];
}

std::vector<float> readout_for(const Model& model, const std::vector<int>& tokens,
                               const InterventionPlan* plan) {
    const TraceRecord trace =
        model.forward(tokens, TraceRequest::none(), plan ? *plan : InterventionPlan());
    auto row = trace.readout_logits();
    return {row.begin(), row.end()};
}

EntryEval eval_entry_exact(const DatasetEntry& entry, const Model& model, const Tokenizer& tok,
                           const InterventionPlan* plan) {
    const ResolvedPair pair = resolve_pair(tok, entry.y_plus, entry.y_minus);

    auto run = [&](Polarity pol) {
        std::vector<int> tokens = encode_prompt(tok, model.config(), entry.prompt(pol));
        tokens.insert(tokens.end(), pair.shared_prefix.begin(), pair.shared_prefix.end());
        return readout_for(model, tokens, plan);
    };
    const std::vector<float> logits_plus = run(Polarity::Positive);
    const std::vector<float> logits_minus = run(Polarity::Negative);

    EntryEval e;
    e.id = entry.id;
    e.delta_plus = logit_diff(logits_plus, pair.id_plus, pair.id_minus);
    e.delta_minus = logit_diff(logits_minus, pair.id_minus, pair.id_plus);
    e.acc_plus = e.delta_plus > 0.0f;
    e.acc_minus = e.delta_minus > 0.0f;
    // delta(P-; y-, y+) > delta(P+; y-, y+)
    e.sensitive = e.delta_minus > -e.delta_plus;
    return e;
}

float mean_logit(std::span<const float> logits, const std::vector<int>& ids) {
    if (ids.empty()) throw DataError("empty candidate answer set");
    float sum = 0.0f;
    for (int id : ids) {
        if (id < 0 || static_cast<size_t>(id) >= logits.size()) {
            throw DataError("candidate answer id outside vocabulary");
        }
        sum += logits[static_cast<size_t>(id)];
    }
    return sum / static_cast<float>(ids.size());
}

std::vector<int> set_first_tokens(const Tokenizer& tok, const std::vector<std::string>& answers,
                                  const std::string& fallback) {
    std::vector<int> ids;
    if (answers.empty()) {
        ids.push_back(first_answer_token(tok, fallback));
        return ids;
    }
    ids.reserve(answers.size());
    for (const auto& a : answers) ids.push_back(first_answer_token(tok, a));
    return ids;
}

EntryEval eval_entry_surrogate(const DatasetEntry& entry, const Model& model, const Tokenizer& tok,
                               const InterventionPlan* plan) {
    if (entry.y_plus_set.size() <= 1 && entry.y_minus_set.size() <= 1) {
        DatasetEntry canon = entry;
        if (!entry.y_plus_set.empty()) canon.y_plus = entry.y_plus_set[0];
        if (!entry.y_minus_set.empty()) canon.y_minus = entry.y_minus_set[0];
        return eval_entry_exact(canon, model, tok, plan);
    }
    const std::vector<int> plus_ids = set_first_tokens(tok, entry.y_plus_set, entry.y_plus);
    const std::vector<int> minus_ids = set_first_tokens(tok, entry.y_minus_set, entry.y_minus);

    auto run = [&](Polarity pol) {
        return readout_for(model, encode_prompt(tok, model.config(), entry.prompt(pol)), plan);
    };
    const std::vector<float> logits_plus = run(Polarity::Positive);
    const std::vector<float> logits_minus = run(Polarity::Negative);

    EntryEval e;
    e.id = entry.id;
    e.delta_plus = mean_logit(std::span<const float>(logits_plus.data(), logits_plus.size()), plus_ids) -
                   mean_logit(std::span<const float>(logits_plus.data(), logits_plus.size()), minus_ids);
    e.delta_minus = mean_logit(std::span<const float>(logits_minus.data(), logits_minus.size()), minus_ids) -
                    mean_logit(std::span<const float>(logits_minus.data(), logits_minus.size()), plus_ids);
    e.acc_plus = e.delta_plus > 0.0f;
    e.acc_minus = e.delta_minus > 0.0f;
    e.sensitive = e.delta_minus > -e.delta_plus;
    return e;
}

EvalResult reduce_entries(std::vector<EntryEval> evals) {
    EvalResult r;
    r.count = evals.size();
    size_t ap = 0, am = 0, s = 0;
    for (const auto& e : evals) {
        ap += e.acc_plus ? 1 : 0;
        am += e.acc_minus ? 1 : 0;
        s += e.sensitive ? 1 : 0;
    }
    if (r.count > 0) {
        r.acc_plus = static_cast<double>(ap) / static_cast<double>(r.count);
        r.acc_minus = static_cast<double>(am) / static_cast<double>(r.count);
        r.sensitivity = static_cast<double>(s) / static_cast<double>(r.count);
    }
    r.entries = std::move(evals);
    return r;
}

}  // namespace

EvalResult evaluate(const std::vector<DatasetEntry>& entries, const Model& model,
                    const Tokenizer& tok, const EvalOptions& opts) {
    if (entries.empty()) throw DataError("evaluate: empty dataset");
    std::vector<EntryEval> evals(entries.size());
    parallel_for(entries.size(), opts.threads, [&](size_t i) {
        evals[i] = eval_entry_exact(entries[i], model, tok, opts.plan);
    });
    return reduce_entries(std::move(evals));
}

EvalResult surrogate_evaluate(const std::vector<DatasetEntry>& entries, const Model& model,
                              const Tokenizer& tok, const EvalOptions& opts) {
    if (entries.empty()) throw DataError("surrogate_evaluate: empty dataset");
    std::vector<EntryEval> evals(entries.size());
    parallel_for(entries.size(), opts.threads, [&](size_t i) {
        evals[i] = eval_entry_surrogate(entries[i], model, tok, opts.plan);
    });
    return reduce_entries(std::move(evals));
}

double permutation_p_value(const PermutationInput& input, int n_resamples, uint64_t seed) {
    const size_t n = input.true_pairs.size();
    if (n == 0 || input.logits_minus.size() != n || input.logits_plus.size() != n) {
        throw DataError("permutation test: inconsistent input sizes");
    }
    if (input.pool.size() < 2) {
        throw DataError("permutation test: answer pool needs at least 2 tokens");
    }
    auto statistic = [&](const std::vector<std::pair<int, int>>& pairs) {
        double sum = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const auto& [a, b] = pairs[i];  // (minus-side, plus-side)
            const auto lm = std::span<const float>(input.logits_minus[i].data(),
                                                   input.logits_minus[i].size());
            const auto lp = std::span<const float>(input.logits_plus[i].data(),
                                                   input.logits_plus[i].size());
            sum += static_cast<double>(logit_diff(lm, a, b)) -
                   static_cast<double>(logit_diff(lp, a, b));
        }
        return sum / static_cast<double>(n);
    };

    const double x_true = statistic(input.true_pairs);
    Rng rng(seed);
    const auto pool_n = static_cast<uint32_t>(input.pool.size());
    int at_least = 0;
    std::vector<std::pair<int, int>> drawn(n);
    for (int r = 0; r < n_resamples; ++r) {
        for (size_t i = 0; i < n; ++i) {
            const uint32_t ai = rng.below(pool_n);
            uint32_t bi = rng.below(pool_n - 1);
            if (bi >= ai) ++bi;  // without replacement
            drawn[i] = {input.pool[ai], input.pool[bi]};
        }
        if (statistic(drawn) >= x_true) ++at_least;
    }
    return (1.0 + at_least) / (1.0 + n_resamples);
}

double permutation_sanity_check(const std::vector<DatasetEntry>& entries, const Model& model,
                                const Tokenizer& tok, int n_resamples, uint64_t seed,
                                int threads) {
    if (entries.empty()) throw DataError("permutation test: empty dataset");
    PermutationInput input;
    input.logits_minus.resize(entries.size());
    input.logits_plus.resize(entries.size());
    input.true_pairs.resize(entries.size());
    std::set<int> pool;
    for (const auto& e : entries) {
        pool.insert(first_answer_token(tok, e.y_plus));
        pool.insert(first_answer_token(tok, e.y_minus));
        for (const auto& a : e.y_plus_set) pool.insert(first_answer_token(tok, a));
        for (const auto& a : e.y_minus_set) pool.insert(first_answer_token(tok, a));
    }
    input.pool.assign(pool.begin(), pool.end());

    parallel_for(entries.size(), threads, [&](size_t i) {
        const DatasetEntry& e = entries[i];
        input.logits_plus[i] =
            readout_for(model, encode_prompt(tok, model.config(), e.prompt_plus), nullptr);
        input.logits_minus[i] =
            readout_for(model, encode_prompt(tok, model.config(), e.prompt_minus), nullptr);
        input.true_pairs[i] = {first_answer_token(tok, e.y_minus),
                               first_answer_token(tok, e.y_plus)};
    });
    return permutation_p_value(input, n_resamples, seed);
}

AttentionMassStat attention_sink_mass_for_prompts(const std::vector<std::vector<int>>& prompts,
                                                  const Model& model, int threads) {
    const int n_layers = model.config().n_layers;
    const auto n_heads = static_cast<size_t>(model.config().n_heads);
    TraceRequest req;
    for (int l = 0; l < n_layers; ++l) req.record_ap.insert(l);

    std::vector<std::vector<double>> per_prompt_layer(prompts.size());
    parallel_for(prompts.size(), threads, [&](size_t i) {
        const TraceRecord trace = model.forward(prompts[i], req);
        const size_t t_len = trace.seq_len;
        const size_t last = t_len - 1;
        std::vector<double> layer_mass(static_cast<size_t>(n_layers), 0.0);
        for (int l = 0; l < n_layers; ++l) {
            const Tensor& ap = trace.attn_pattern.at(l);
            double sum = 0.0;
            for (size_t h = 0; h < n_heads; ++h) {
                const float* row = ap.data.data() + (h * t_len + last) * t_len;
                sum += row[0];
                if (last != 0) sum += row[last];
            }
            layer_mass[static_cast<size_t>(l)] = sum / static_cast<double>(n_heads);
        }
        per_prompt_layer[i] = std::move(layer_mass);
    });

    AttentionMassStat stat;
    stat.prompt_count = prompts.size();
    stat.per_layer_mass.assign(static_cast<size_t>(n_layers), 0.0);
    for (const auto& layer_mass : per_prompt_layer) {
        for (size_t l = 0; l < layer_mass.size(); ++l) stat.per_layer_mass[l] += layer_mass[l];
    }
    double total = 0.0;
    for (auto& m : stat.per_layer_mass) {
        m /= static_cast<double>(prompts.size());
        total += m;
    }
    stat.mean_mass = total / static_cast<double>(n_layers);
    return stat;
}

AttentionMassStat attention_sink_mass(const std::vector<DatasetEntry>& entries, const Model& model,
                                      const Tokenizer& tok, int threads) {
    std::vector<std::vector<int>> prompts;
    prompts.reserve(entries.size() * 2);
    for (const auto& e : entries) {
        prompts.push_back(encode_prompt(tok, model.config(), e.prompt_plus));
        prompts.push_back(encode_prompt(tok, model.config(), e.prompt_minus));
    }
    return attention_sink_mass_for_prompts(prompts, model, threads);
}

std::vector<EvalResult> accuracy_over_checkpoints(const std::vector<std::string>& weight_paths,
                                                  const ModelConfig& config,
                                                  const std::vector<DatasetEntry>& entries,
                                                  const Tokenizer& tok, int threads) {
    std::vector<EvalResult> out;
    out.reserve(weight_paths.size());
    for (const auto& path : weight_paths) {
        const TensorFile file = load_tensor_file(path);
        auto meta = file.metadata.find("model_config");
        if (meta != file.metadata.end()) {
            const ModelConfig embedded = ModelConfig::from_json_text(meta->second);
            if (embedded.to_json_text() != config.to_json_text()) {
                throw DataError("checkpoint " + path + " embeds a different model config");
            }
        }
        Model model(config, weights_from_file(file, config));
        EvalOptions opts;
        opts.threads = threads;
        out.push_back(evaluate(entries, model, tok, opts));
    }
    return out;
}

FlipRateResult flip_rate(const std::vector<DatasetEntry>& entries, const Model& model,
                         const Tokenizer& tok, const std::vector<std::set<int>>& target_sweep,
                         bool surrogate, int threads) {
    const int n_layers = model.config().n_layers;

    struct EntryState {
        bool eligible = false;
        std::vector<bool> flipped;  // per sweep point
    };
    std::vector<EntryState> states(entries.size());

    parallel_for(entries.size(), threads, [&](size_t i) {
        const DatasetEntry& entry = entries[i];
        EntryState st;
        st.flipped.assign(target_sweep.size(), false);

        const bool use_sets = surrogate && (entry.y_plus_set.size() > 1 ||
                                            entry.y_minus_set.size() > 1);
        ResolvedPair pair;
        std::vector<int> plus_ids, minus_ids;
        if (use_sets) {
            plus_ids = set_first_tokens(tok, entry.y_plus_set, entry.y_plus);
            minus_ids = set_first_tokens(tok, entry.y_minus_set, entry.y_minus);
        } else {
            pair = resolve_pair(tok, entry.y_plus, entry.y_minus);
        }

        std::vector<int> tokens_minus = encode_prompt(tok, model.config(), entry.prompt_minus);
        std::vector<int> tokens_plus = encode_prompt(tok, model.config(), entry.prompt_plus);
        if (!use_sets) {
            tokens_minus.insert(tokens_minus.end(), pair.shared_prefix.begin(),
                                pair.shared_prefix.end());
            tokens_plus.insert(tokens_plus.end(), pair.shared_prefix.begin(),
                               pair.shared_prefix.end());
        }

        auto delta_minus_of = [&](std::span<const float> logits) {
            if (use_sets) return mean_logit(logits, minus_ids) - mean_logit(logits, plus_ids);
            return logit_diff(logits, pair.id_minus, pair.id_plus);
        };

        TraceRequest base_req;
        for (int l = 0; l < n_layers; ++l) base_req.record_ap.insert(l);
        const TraceRecord trace_base = model.forward(tokens_minus, base_req);
        st.eligible = delta_minus_of(trace_base.readout_logits()) > 0.0f;
        if (st.eligible) {
            TraceRequest donor_req;
            donor_req.positions =
                std::set<int>{static_cast<int>(tokens_plus.size()) - 1};
            for (int l = 0; l < n_layers; ++l) donor_req.record_ao.insert(l);
            const TraceRecord trace_donor = model.forward(tokens_plus, donor_req);

            for (size_t s = 0; s < target_sweep.size(); ++s) {
                const InterventionPlan plan =
                    build_path_patch_plan(trace_donor, trace_base, target_sweep[s]);
                const TraceRecord patched = model.forward(tokens_minus, TraceRequest::none(), plan);
                // flipped: delta(P-pp; y+, y-) > 0
                st.flipped[s] = delta_minus_of(patched.readout_logits()) < 0.0f;
            }
        }
        states[i] = std::move(st);
    });

    FlipRateResult result;
    result.rates.assign(target_sweep.size(), 0.0);
    for (const auto& st : states) {
        if (!st.eligible) continue;
        ++result.eligible;
        for (size_t s = 0; s < target_sweep.size(); ++s) {
            if (st.flipped[s]) result.rates[s] += 1.0;
        }
    }
    if (result.eligible > 0) {
        for (auto& r : result.rates) r /= static_cast<double>(result.eligible);
    }
    return result;
}

}  // namespace neglab
