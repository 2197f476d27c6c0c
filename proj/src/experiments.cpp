#include "neglab/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "neglab/annotate.hpp"
#include "neglab/attribution.hpp"
#include "neglab/errors.hpp"
#include "neglab/geometry.hpp"
#include "neglab/interventions.hpp"
#include "neglab/lenses.hpp"
#include "neglab/metrics.hpp"
#include "neglab/parallel.hpp"
#include "neglab/rng.hpp"

namespace neglab {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string format_float(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 9);
    if (ec != std::errc()) return "nan";
    return std::string(buf, ptr);
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    ExperimentConfig cfg;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    cfg.merge_json_text(text, path);
    return cfg;
}

void ExperimentConfig::merge_json_text(const std::string& text, const std::string& origin) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(origin + ": malformed config JSON: " + e.what());
    }
    try {
        if (j.contains("weights")) weights = j["weights"].get<std::string>();
        if (j.contains("checkpoints")) checkpoints = j["checkpoints"].get<std::vector<std::string>>();
        if (j.contains("tokenizer_vocab")) tokenizer_vocab = j["tokenizer_vocab"].get<std::string>();
        if (j.contains("tokenizer_merges")) tokenizer_merges = j["tokenizer_merges"].get<std::string>();
        if (j.contains("model_config")) model_config = j["model_config"].get<std::string>();
        if (j.contains("corpus")) corpus = j["corpus"].get<std::string>();
        if (j.contains("out_dir")) out_dir = j["out_dir"].get<std::string>();
        if (j.contains("seed")) seed = j["seed"].get<uint64_t>();
        if (j.contains("threads")) threads = j["threads"].get<int>();
        if (j.contains("window_width")) window_width = j["window_width"].get<int>();
        if (j.contains("positions")) positions = j["positions"].get<std::string>();
        if (j.contains("k")) k = j["k"].get<int>();
        if (j.contains("folds")) folds = j["folds"].get<int>();
        if (j.contains("layer_begin")) layer_begin = j["layer_begin"].get<int>();
        if (j.contains("layer_end")) layer_end = j["layer_end"].get<int>();
        if (j.contains("fixtures")) fixtures = j["fixtures"].get<std::string>();
        if (j.contains("record_fixtures")) record_fixtures = j["record_fixtures"].get<bool>();
        if (j.contains("plan")) plan_file = j["plan"].get<std::string>();
        if (j.contains("n_resamples")) n_resamples = j["n_resamples"].get<int>();
        if (j.contains("top_n")) top_n = j["top_n"].get<int>();
        if (j.contains("sink_start")) sink_start = j["sink_start"].get<int>();
        if (j.contains("max_entries")) max_entries = j["max_entries"].get<int>();
        if (j.contains("sae_paths")) {
            for (const auto& [key, val] : j["sae_paths"].items()) {
                sae_paths[std::stoi(key)] = val.get<std::string>();
            }
        }
        if (j.contains("annotate_mode")) annotate_mode = j["annotate_mode"].get<std::string>();
        if (j.contains("lens_signal")) lens_signal = j["lens_signal"].get<std::string>();
        if (j.contains("norm_mode")) norm_mode = j["norm_mode"].get<std::string>();
        if (j.contains("api_base")) api_base = j["api_base"].get<std::string>();
        if (j.contains("api_model")) api_model = j["api_model"].get<std::string>();
        if (j.contains("api_key_env")) api_key_env = j["api_key_env"].get<std::string>();
    } catch (const std::exception& e) {
        throw ConfigError(origin + ": config field error: " + e.what());
    }
}

std::string ExperimentConfig::canonical_json() const {
    ordered_json j;
    j["weights"] = weights;
    j["checkpoints"] = checkpoints;
    j["tokenizer_vocab"] = tokenizer_vocab;
    j["tokenizer_merges"] = tokenizer_merges;
    j["model_config"] = model_config;
    j["corpus"] = corpus;
    j["seed"] = seed;
    j["window_width"] = window_width;
    j["positions"] = positions;
    j["k"] = k;
    j["folds"] = folds;
    j["layer_begin"] = layer_begin;
    j["layer_end"] = layer_end;
    j["fixtures"] = fixtures;
    j["plan"] = plan_file;
    j["n_resamples"] = n_resamples;
    j["top_n"] = top_n;
    j["sink_start"] = sink_start;
    j["max_entries"] = max_entries;
    ordered_json saes = ordered_json::object();
    for (const auto& [layer, path] : sae_paths) saes[std::to_string(layer)] = path;
    j["sae_paths"] = saes;
    j["annotate_mode"] = annotate_mode;
    j["lens_signal"] = lens_signal;
    j["norm_mode"] = norm_mode;
    j["api_model"] = api_model;
    return j.dump();
}

std::string ExperimentConfig::config_hash() const { return hex64(fnv1a64(canonical_json())); }

namespace {

std::string derive_merges_path(const std::string& vocab_path) {
    fs::path p(vocab_path);
    p.replace_filename("merges.txt");
    return p.string();
}

std::vector<DatasetEntry> maybe_truncate(std::vector<DatasetEntry> entries, int max_entries) {
    if (max_entries > 0 && entries.size() > static_cast<size_t>(max_entries)) {
        entries.resize(static_cast<size_t>(max_entries));
    }
    return entries;
}

struct CsvWriter {
    explicit CsvWriter(const std::string& path, const std::string& config_hash) : out(path) {
        if (!out) throw DataError("cannot write output file: " + path);
        out << "# config_hash=" << config_hash << "\n";
    }
    template <typename... Args>
    void row(Args&&... fields) {
        bool first = true;
        ((out << (first ? "" : ","), first = false, out << fields), ...);
        out << "\n";
    }
    std::ofstream out;
};

void write_json_file(const std::string& path, ordered_json j, const std::string& config_hash) {
    j["config_hash"] = config_hash;
    std::ofstream out(path);
    if (!out) throw DataError("cannot write output file: " + path);
    out << j.dump(2) << "\n";
}

void ensure_out_dir(const ExperimentConfig& cfg) {
    if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);
}

std::string out_path(const ExperimentConfig& cfg, const std::string& name) {
    return (fs::path(cfg.out_dir) / name).string();
}

SinkPositions positions_of(const ExperimentConfig& cfg) {
    if (cfg.positions == "all") return SinkPositions::All;
    if (cfg.positions == "last") return SinkPositions::LastOnly;
    throw ConfigError("positions must be 'all' or 'last', got " + cfg.positions);
}

// 1-based inclusive layer range; default covers the middle third of the
// model the way a 32-layer model maps to layers 10..18 style scans.
std::pair<int, int> resolve_layer_range(const ExperimentConfig& cfg, int n_layers) {
    int begin = cfg.layer_begin;
    int end = cfg.layer_end;
    if (begin == 0 && end == 0) {
        begin = n_layers / 3 + 1;
        end = std::max(begin, (2 * n_layers) / 3);
    }
    if (begin < 1 || end > n_layers || begin > end) {
        throw ConfigError("layer range " + std::to_string(begin) + ".." + std::to_string(end) +
                          " invalid for a " + std::to_string(n_layers) + "-layer model");
    }
    return {begin, end};
}

ordered_json summary_json(const EvalResult& r) {
    ordered_json j;
    j["entries"] = r.count;
    j["acc_plus"] = r.acc_plus;
    j["acc_minus"] = r.acc_minus;
    j["sensitivity"] = r.sensitivity;
    return j;
}

bool corpus_has_answer_sets(const std::vector<DatasetEntry>& entries) {
    for (const auto& e : entries) {
        if (e.y_plus_set.size() > 1 || e.y_minus_set.size() > 1) return true;
    }
    return false;
}

}  // namespace

LoadedLab load_lab(const ExperimentConfig& cfg, bool need_weights) {
    LoadedLab lab;
    if (cfg.tokenizer_vocab.empty()) throw ConfigError("missing tokenizer path");
    const std::string merges =
        cfg.tokenizer_merges.empty() ? derive_merges_path(cfg.tokenizer_vocab) : cfg.tokenizer_merges;
    lab.tokenizer = std::make_unique<Tokenizer>(Tokenizer::load(cfg.tokenizer_vocab, merges));

    if (need_weights) {
        if (cfg.weights.empty()) throw ConfigError("missing weights path");
        const TensorFile file = load_tensor_file(cfg.weights);
        if (!cfg.model_config.empty()) {
            lab.config = ModelConfig::from_json_file(cfg.model_config);
        } else {
            auto meta = file.metadata.find("model_config");
            if (meta == file.metadata.end()) {
                throw ConfigError(
                    "weights container embeds no model_config; pass --model-config");
            }
            lab.config = ModelConfig::from_json_text(meta->second);
        }
        lab.model = std::make_unique<Model>(lab.config, weights_from_file(file, lab.config));
    } else if (!cfg.model_config.empty()) {
        lab.config = ModelConfig::from_json_file(cfg.model_config);
    }

    if (!cfg.corpus.empty()) {
        lab.corpus = maybe_truncate(load_corpus(cfg.corpus), cfg.max_entries);
    }
    return lab;
}

void write_svg_plot(const std::string& path, const std::string& title, const std::string& x_label,
                    const std::string& y_label, const std::vector<PlotSeries>& series,
                    const std::string& config_hash) {
    const double width = 640, height = 420;
    const double ml = 64, mr = 16, mt = 36, mb = 48;
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool any = false;
    for (const auto& s : series) {
        for (const auto& [x, y] : s.points) {
            if (!any) {
                xmin = xmax = x;
                ymin = ymax = y;
                any = true;
            }
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr); };
    auto sy = [&](double y) { return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb); };

    static const char* colors[] = {"#1f6fb2", "#c23b3b", "#3c9b51", "#8f5bb2", "#c98a2b"};
    std::ofstream out(path);
    if (!out) throw DataError("cannot write output file: " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    out << "<!-- config_hash=" << config_hash << " -->\n";
    out << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    out << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
        << title << "</text>\n";
    // axes
    out << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr
        << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << height - mb << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << (ml + width - mr) / 2 << "\" y=\"" << height - 12
        << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
    out << "<text x=\"16\" y=\"" << (mt + height - mb) / 2
        << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
        << (mt + height - mb) / 2 << ")\">" << y_label << "</text>\n";
    out << "<text x=\"" << ml << "\" y=\"" << height - mb + 16
        << "\" text-anchor=\"middle\" font-size=\"10\">" << format_float(xmin) << "</text>\n";
    out << "<text x=\"" << width - mr << "\" y=\"" << height - mb + 16
        << "\" text-anchor=\"middle\" font-size=\"10\">" << format_float(xmax) << "</text>\n";
    out << "<text x=\"" << ml - 6 << "\" y=\"" << height - mb
        << "\" text-anchor=\"end\" font-size=\"10\">" << format_float(ymin) << "</text>\n";
    out << "<text x=\"" << ml - 6 << "\" y=\"" << mt + 4
        << "\" text-anchor=\"end\" font-size=\"10\">" << format_float(ymax) << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const char* color = colors[si % 5];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : series[si].points) {
            out << format_float(sx(x)) << "," << format_float(sy(y)) << " ";
        }
        out << "\"/>\n";
        out << "<text x=\"" << width - mr - 4 << "\" y=\"" << mt + 14 + 14 * si
            << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << color << "\">"
            << series[si].name << "</text>\n";
    }
    out << "</svg>\n";
}

void cmd_eval(const ExperimentConfig& cfg) {
    LoadedLab lab = load_lab(cfg);
    if (lab.corpus.empty()) throw ConfigError("eval needs a corpus");
    ensure_out_dir(cfg);
    const std::string hash = cfg.config_hash();

    InterventionPlan plan;
    if (!cfg.plan_file.empty()) {
        std::ifstream in(cfg.plan_file);
        if (!in) throw ConfigError("cannot open plan file: " + cfg.plan_file);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        plan = InterventionPlan::from_json_text(text);
    }
    EvalOptions opts;
    opts.threads = cfg.threads;
    if (!plan.empty()) opts.plan = &plan;
    const EvalResult result = evaluate(lab.corpus, *lab.model, *lab.tokenizer, opts);

    CsvWriter csv(out_path(cfg, "eval_entries.csv"), hash);
    csv.row("id", "delta_plus", "delta_minus", "acc_plus", "acc_minus", "sensitive");
    for (const auto& e : result.entries) {
        csv.row(e.id, format_float(e.delta_plus), format_float(e.delta_minus),
                e.acc_plus ? 1 : 0, e.acc_minus ? 1 : 0, e.sensitive ? 1 : 0);
    }

    ordered_json j = summary_json(result);
    if (corpus_has_answer_sets(lab.corpus)) {
        j["surrogate"] = summary_json(surrogate_evaluate(lab.corpus, *lab.model, *lab.tokenizer, opts));
    }
    write_json_file(out_path(cfg, "eval_summary.json"), j, hash);
}

void cmd_sink_sweep(const ExperimentConfig& cfg) {
    LoadedLab lab = load_lab(cfg);
    if (lab.corpus.empty()) throw ConfigError("sink-sweep needs a corpus");
    ensure_out_dir(cfg);
    const std::string hash = cfg.config_hash();
    const int n_layers = lab.config.n_layers;

    EvalOptions opts;
    opts.threads = cfg.threads;
    const EvalResult vanilla = evaluate(lab.corpus, *lab.model, *lab.tokenizer, opts);

    std::vector<EvalResult> swept(static_cast<size_t>(n_layers));
    for (int start = 1; start <= n_layers; ++start) {
        const InterventionPlan plan = cumulative_sink_plan(start, n_layers);
        EvalOptions sink_opts;
        sink_opts.threads = cfg.threads;
        sink_opts.plan = &plan;
        swept[static_cast<size_t>(start - 1)] = evaluate(lab.corpus, *lab.model, *lab.tokenizer, sink_opts);
    }

    int best_layer = 1;
    for (int start = 2; start <= n_layers; ++start) {
        if (swept[static_cast<size_t>(start - 1)].acc_minus >
            swept[static_cast<size_t>(best_layer - 1)].acc_minus) {
            best_layer = start;
        }
    }

    CsvWriter csv(out_path(cfg, "sink_sweep.csv"), hash);
    csv.row("sink_from_layer", "acc_plus", "acc_minus", "sensitivity");
    csv.row(0, format_float(vanilla.acc_plus), format_float(vanilla.acc_minus),
            format_float(vanilla.sensitivity));  // 0 = vanilla, no sink
    for (int start = 1; start <= n_layers; ++start) {
        const auto& r = swept[static_cast<size_t>(start - 1)];
        csv.row(start, format_float(r.acc_plus), format_float(r.acc_minus),
                format_float(r.sensitivity));
    }

    ordered_json j;
    j["vanilla"] = summary_json(vanilla);
    j["best_sink_layer"] = best_layer;
    j["best_acc_minus"] = swept[static_cast<size_t>(best_layer - 1)].acc_minus;
    write_json_file(out_path(cfg, "sink_sweep.json"), j, hash);

    PlotSeries plus{"acc_plus", {}}, minus{"acc_minus", {}}, base{"vanilla acc_minus", {}};
    for (int start = 1; start <= n_layers; ++start) {
        const auto& r = swept[static_cast<size_t>(start - 1)];
        plus.points.push_back({start, r.acc_plus});
        minus.points.push_back({start, r.acc_minus});
        base.points.push_back({start, vanilla.acc_minus});
    }
    write_svg_plot(out_path(cfg, "sink_sweep.svg"), "cumulative attention sink sweep",
                   "sink from layer", "accuracy", {plus, minus, base}, hash);
}

namespace {

// Per-entry exact-answer readout machinery shared by the lens-accuracy and
// windowed experiments.
struct PreparedEntry {
    std::vector<int> tokens_plus;
    std::vector<int> tokens_minus;
    int id_plus = 0;   // diverging answer ids
    int id_minus = 0;
};

PreparedEntry prepare_entry(const DatasetEntry& e, const Model& model, const Tokenizer& tok) {
    PreparedEntry p;
    const std::vector<int> ta = tok.encode(e.y_plus);
    const std::vector<int> tb = tok.encode(e.y_minus);
    const int j = first_divergence_position(ta, tb);
    if (static_cast<size_t>(j) >= ta.size() || static_cast<size_t>(j) >= tb.size()) {
        throw DataError("entry " + e.id + ": degenerate answer pair");
    }
    p.id_plus = ta[static_cast<size_t>(j)];
    p.id_minus = tb[static_cast<size_t>(j)];
    p.tokens_plus = encode_prompt(tok, model.config(), e.prompt_plus);
    p.tokens_minus = encode_prompt(tok, model.config(), e.prompt_minus);
    p.tokens_plus.insert(p.tokens_plus.end(), ta.begin(), ta.begin() + j);
    p.tokens_minus.insert(p.tokens_minus.end(), tb.begin(), tb.begin() + j);
    return p;
}

// delta(P-; y-, y+) evaluator covering both the canonical pair (divergence
// position, extended prompt) and the candidate-set mean form.
struct DeltaProbe {
    std::vector<int> tokens_minus;
    bool use_sets = false;
    int id_plus = 0;
    int id_minus = 0;
    std::vector<int> plus_ids;
    std::vector<int> minus_ids;

    DeltaProbe(const DatasetEntry& e, const Model& model, const Tokenizer& tok, bool surrogate) {
        use_sets = surrogate && (e.y_plus_set.size() > 1 || e.y_minus_set.size() > 1);
        if (use_sets) {
            tokens_minus = encode_prompt(tok, model.config(), e.prompt_minus);
            auto first_ids = [&](const std::vector<std::string>& answers,
                                 const std::string& fallback) {
                std::vector<int> ids;
                if (answers.empty()) {
                    ids.push_back(tok.encode(fallback).at(0));
                    return ids;
                }
                for (const auto& a : answers) ids.push_back(tok.encode(a).at(0));
                return ids;
            };
            plus_ids = first_ids(e.y_plus_set, e.y_plus);
            minus_ids = first_ids(e.y_minus_set, e.y_minus);
        } else {
            const PreparedEntry p = prepare_entry(e, model, tok);
            tokens_minus = p.tokens_minus;
            id_plus = p.id_plus;
            id_minus = p.id_minus;
        }
    }

    float delta_minus(std::span<const float> logits) const {
        if (!use_sets) return logit_diff(logits, id_minus, id_plus);
        auto mean = [&](const std::vector<int>& ids) {
            float s = 0.0f;
            for (int id : ids) s += logits[static_cast<size_t>(id)];
            return s / static_cast<float>(ids.size());
        };
        return mean(minus_ids) - mean(plus_ids);
    }
};

}  // namespace

void cmd_logitlens_eval(const ExperimentConfig& cfg) {
    LoadedLab lab = load_lab(cfg);
    if (lab.corpus.empty()) throw ConfigError("logitlens-eval needs a corpus");
    ensure_out_dir(cfg);
    const std::string hash = cfg.config_hash();
    const int n_layers = lab.config.n_layers;
    const LensNormMode mode =
        cfg.norm_mode == "frozen-sigma" ? LensNormMode::FrozenSigma : LensNormMode::SelfNorm;

    // per layer: skip everything after the layer's MLP by projecting the
    // post snapshot straight through the final norm
    struct Counts {
        std::vector<int> plus, minus;
    };
    std::vector<Counts> counts(lab.corpus.size());
    parallel_for(lab.corpus.size(), cfg.threads, [&](size_t i) {
        const PreparedEntry p = prepare_entry(lab.corpus[i], *lab.model, *lab.tokenizer);
        Counts c;
        c.plus.assign(static_cast<size_t>(n_layers), 0);
        c.minus.assign(static_cast<size_t>(n_layers), 0);
        for (Polarity pol : {Polarity::Positive, Polarity::Negative}) {
            const auto& tokens = pol == Polarity::Positive ? p.tokens_plus : p.tokens_minus;
            TraceRequest req;
            const int last = static_cast<int>(tokens.size()) - 1;
            req.positions = std::set<int>{last};
            for (int l = 0; l < n_layers; ++l) req.snapshots.insert({l, SnapPoint::Post});
            const TraceRecord trace = lab.model->forward(tokens, req);
            const float sigma = trace.final_norm_scale[static_cast<size_t>(last)];
            for (int l = 0; l < n_layers; ++l) {
                const auto& h = trace.snapshot(l, SnapPoint::Post, last);
                const std::vector<float> logits =
                    logit_lens(std::span<const float>(h.data(), h.size()), lab.model->weights(),
                               lab.config, mode, sigma);
                const float delta =
                    pol == Polarity::Positive
                        ? logit_diff(std::span<const float>(logits.data(), logits.size()),
                                     p.id_plus, p.id_minus)
                        : logit_diff(std::span<const float>(logits.data(), logits.size()),
                                     p.id_minus, p.id_plus);
                auto& slot = pol == Polarity::Positive ? c.plus : c.minus;
                if (delta > 0.0f) slot[static_cast<size_t>(l)] = 1;
            }
        }
        counts[i] = std::move(c);
    });

    std::vector<double> acc_plus(static_cast<size_t>(n_layers), 0.0);
    std::vector<double> acc_minus(static_cast<size_t>(n_layers), 0.0);
    for (const auto& c : counts) {
        for (int l = 0; l < n_layers; ++l) {
            acc_plus[static_cast<size_t>(l)] += c.plus[static_cast<size_t>(l)];
            acc_minus[static_cast<size_t>(l)] += c.minus[static_cast<size_t>(l)];
        }
    }
    for (int l = 0; l < n_layers; ++l) {
        acc_plus[static_cast<size_t>(l)] /= static_cast<double>(lab.corpus.size());
        acc_minus[static_cast<size_t>(l)] /= static_cast<double>(lab.corpus.size());
    }
    int best_layer = 1;
    for (int l = 2; l <= n_layers; ++l) {
        if (acc_minus[static_cast<size_t>(l - 1)] > acc_minus[static_cast<size_t>(best_layer - 1)]) {
            best_layer = l;
        }
    }

    CsvWriter csv(out_path(cfg, "logitlens_eval.csv"), hash);
    csv.row("layer", "acc_plus", "acc_minus");
    for (int l = 1; l <= n_layers; ++l) {
        csv.row(l, format_float(acc_plus[static_cast<size_t>(l - 1)]),
                format_float(acc_minus[static_cast<size_t>(l - 1)]));
    }
    ordered_json j;
    j["norm_mode"] = cfg.norm_mode;
    j["best_layer"] = best_layer;
    j["best_acc_minus"] = acc_minus[static_cast<size_t>(best_layer - 1)];
    write_json_file(out_path(cfg, "logitlens_eval.json"), j, hash);

    PlotSeries sp{"acc_plus", {}}, sm{"acc_minus", {}};
    for (int l = 1; l <= n_layers; ++l) {
        sp.points.push_back({l, acc_plus[static_cast<size_t>(l - 1)]});
        sm.points.push_back({l, acc_minus[static_cast<size_t>(l - 1)]});
    }
    write_svg_plot(out_path(cfg, "logitlens_eval.svg"), "intermediate-layer lens accuracy",
                   "layer", "accuracy", {sp, sm}, hash);
}

void cmd_windowed(const ExperimentConfig& cfg) {
    LoadedLab lab = load_lab(cfg);
    if (lab.corpus.empty()) throw ConfigError("windowed needs a corpus");
    ensure_out_dir(cfg);
    const std::string hash = cfg.config_hash();
    const int n_layers = lab.config.n_layers;
    const SinkPositions positions = positions_of(cfg);
    const bool surrogate = corpus_has_answer_sets(lab.corpus);

    EvalOptions vopts;
    vopts.threads = cfg.threads;
    const EvalResult vanilla =
        surrogate ? surrogate_evaluate(lab.corpus, *lab.model, *lab.tokenizer, vopts)
                  : evaluate(lab.corpus, *lab.model, *lab.tokenizer, vopts);

    // sink a window of layers at the readout position, attention patterns
    // frozen to their clean values at every other layer
    std::vector<std::vector<int>> correct(static_cast<size_t>(n_layers));
    for (auto& c : correct) c.assign(lab.corpus.size(), 0);

    parallel_for(lab.corpus.size(), cfg.threads, [&](size_t i) {
        const DeltaProbe probe(lab.corpus[i], *lab.model, *lab.tokenizer, surrogate);
        TraceRequest req;
        for (int l = 0; l < n_layers; ++l) req.record_ap.insert(l);
        const TraceRecord clean = lab.model->forward(probe.tokens_minus, req);

        for (int center = 1; center <= n_layers; ++center) {
            const InterventionPlan sink =
                windowed_sink_plan(center, cfg.window_width, n_layers, positions);
            std::set<int> window;
            for (const auto& d : sink.directives()) {
                window = std::get<AttentionSink>(d).layers;
            }
            std::vector<Directive> directives(sink.directives().begin(), sink.directives().end());
            FreezeAP freeze;
            for (int l = 0; l < n_layers; ++l) {
                if (window.count(l)) continue;
                freeze.layers.insert(l);
                freeze.patterns[l] = clean.attn_pattern.at(l);
            }
            if (!freeze.layers.empty()) directives.push_back(std::move(freeze));
            const InterventionPlan plan = InterventionPlan::build(std::move(directives));
            const TraceRecord sunk =
                lab.model->forward(probe.tokens_minus, TraceRequest::none(), plan);
            if (probe.delta_minus(sunk.readout_logits()) > 0.0f) {
                correct[static_cast<size_t>(center - 1)][i] = 1;
            }
        }
    });

    CsvWriter csv(out_path(cfg, "windowed_sink.csv"), hash);
    csv.row("center_layer", "acc_minus");
    PlotSeries sm{"acc_minus", {}}, base{"vanilla acc_minus", {}};
    for (int center = 1; center <= n_layers; ++center) {
        double acc = 0.0;
        for (int v : correct[static_cast<size_t>(center - 1)]) acc += v;
        acc /= static_cast<double>(lab.corpus.size());
        csv.row(center, format_float(acc));
        sm.points.push_back({center, acc});
        base.points.push_back({center, vanilla.acc_minus});
    }
    ordered_json j;
    j["window_width"] = cfg.window_width;
    j["positions"] = cfg.positions;
    j["surrogate"] = surrogate;
    j["vanilla_acc_minus"] = vanilla.acc_minus;
    write_json_file(out_path(cfg, "windowed_sink.json"), j, hash);
    write_svg_plot(out_path(cfg, "windowed_sink.svg"), "windowed attention sink", "window center",
                   "negative accuracy", {sm, base}, hash);
}

void cmd_path_patch(const ExperimentConfig& cfg) {
    LoadedLab lab = load_lab(cfg);
    if (lab.corpus.empty()) throw ConfigError("path-patch needs a corpus");
    ensure_out_dir(cfg);
    const std::string hash = cfg.config_hash();
    const int n_layers = lab.config.n_layers;

    std::vector<std::set<int>> sweep;
    for (int center = 1; center <= n_layers; ++center) {
        std::set<int> window;
        const int lo = std::max(1, center - cfg.window_width / 2);
        const int hi = std::min(n_layers, center + cfg.window_width / 2);
        for (int l = lo; l <= hi; ++l) window.insert(l - 1);
        sweep.push_back(std::move(window));
    }
    const bool surrogate = corpus_has_answer_sets(lab.corpus);
    const FlipRateResult result =
        flip_rate(lab.corpus, *lab.model, *lab.tokenizer, sweep, surrogate, cfg.threads);

    CsvWriter csv(out_path(cfg, "path_patch.csv"), hash);
    csv.row("center_layer", "flip_rate");
    PlotSeries fr{"flip_rate", {}};
    for (int center = 1; center <= n_layers; ++center) {
        csv.row(center, format_float(result.rates[static_cast<size_t>(center - 1)]));
        fr.points.push_back({center, result.rates[static_cast<size_t>(center - 1)]});
    }
    ordered_json j;
    j["window_width"] = cfg.window_width;
    j["eligible_entries"] = result.eligible;
    j["surrogate"] = surrogate;
    if (result.eligible == 0) j["note"] = "no entries with delta(P-; y-, y+) > 0 unpatched";
    write_json_file(out_path(cfg, "path_patch.json"), j, hash);
    write_svg_plot(out_path(cfg, "path_patch.svg"), "attention-output path patching",
                   "window center", "flip rate", {fr}, hash);
}

void cmd_lens_scan(const ExperimentConfig& cfg) {
    LoadedLab lab = load_lab(cfg);
    if (lab.corpus.empty()) throw ConfigError("lens-scan needs a corpus");
    ensure_out_dir(cfg);
    const std::string hash = cfg.config_hash();
    const auto [begin, end] = resolve_layer_range(cfg, lab.config.n_layers);
    const LensNormMode mode =
        cfg.norm_mode == "frozen-sigma" ? LensNormMode::FrozenSigma : LensNormMode::SelfNorm;

    ordered_json samples = ordered_json::array();
    for (const auto& entry : lab.corpus) {
        const std::vector<int> tokens =
            encode_prompt(*lab.tokenizer, lab.config, entry.prompt_minus);
        const auto readouts = lens_scan(*lab.model, tokens, begin - 1, end - 1, cfg.lens_signal,
                                        static_cast<size_t>(cfg.k), mode);
        ordered_json sj;
        sj["id"] = entry.id;
        sj["prompt"] = entry.prompt_minus;
        sj["readouts"] = ordered_json::parse(readouts_to_json(readouts, *lab.tokenizer));
        samples.push_back(std::move(sj));
    }
    ordered_json j;
    j["signal"] = cfg.lens_signal;
    j["layer_begin"] = begin;
    j["layer_end"] = end;
    j["k"] = cfg.k;
    j["samples"] = samples;
    write_json_file(out_path(cfg, "lens_scan.json"), j, hash);
}

void cmd_decode_not(const ExperimentConfig& cfg) {
    LoadedLab lab = load_lab(cfg);
    if (lab.corpus.empty()) throw ConfigError("decode-not needs a corpus");
    ensure_out_dir(cfg);
    const std::string hash = cfg.config_hash();

    const CVReport report =
        decode_not_pipeline(lab.corpus, *lab.model, *lab.tokenizer, cfg.folds, cfg.seed,
                            cfg.threads);

    CsvWriter csv(out_path(cfg, "decode_not.csv"), hash);
    csv.row("layer", "point", "mean_accuracy");
    std::map<std::string, PlotSeries> series;
    for (const auto& cell : report.cells) {
        csv.row(cell.layer + 1, snap_point_name(cell.point), format_float(cell.mean_accuracy));
        auto& s = series[snap_point_name(cell.point)];
        s.name = snap_point_name(cell.point);
        s.points.push_back({cell.layer + 1, cell.mean_accuracy});
    }
    ordered_json j;
    j["folds"] = report.folds;
    j["best_layer"] = report.best_layer + 1;
    j["best_point"] = snap_point_name(report.best_point);
    write_json_file(out_path(cfg, "decode_not.json"), j, hash);

    std::vector<PlotSeries> plot;
    for (auto& [name, s] : series) plot.push_back(std::move(s));
    write_svg_plot(out_path(cfg, "decode_not.svg"), "linear decodability of the negation signal",
                   "layer", "cross-validated accuracy", plot, hash);
}

void cmd_attribute(const ExperimentConfig& cfg) {
    LoadedLab lab = load_lab(cfg);
    if (lab.corpus.empty()) throw ConfigError("attribute needs a corpus");
    ensure_out_dir(cfg);
    const std::string hash = cfg.config_hash();
    const int n_layers = lab.config.n_layers;
    const int sink_start = cfg.sink_start > 0 ? cfg.sink_start : n_layers / 2 + 1;
    if (sink_start < 1 || sink_start > n_layers) {
        throw ConfigError("sink_start out of range");
    }
    const InterventionPlan sink_plan = cumulative_sink_plan(sink_start, n_layers);

    struct EntryScores {
        ContrastiveScores vs_plus;
        ContrastiveScores vs_sink;
    };
    std::vector<EntryScores> all(lab.corpus.size());

    TraceRequest req;  // E + AO + MO everywhere; readout positions resolved per prompt
    for (int l = 0; l < n_layers; ++l) {
        req.record_ao.insert(l);
        req.record_mo.insert(l);
    }

    parallel_for(lab.corpus.size(), cfg.threads, [&](size_t i) {
        const PreparedEntry p = prepare_entry(lab.corpus[i], *lab.model, *lab.tokenizer);
        const ContrastDirection dir =
            contrast_direction(lab.model->weights(), p.id_minus, p.id_plus);
        const TraceRecord trace_minus = lab.model->forward(p.tokens_minus, req);
        const TraceRecord trace_plus = lab.model->forward(p.tokens_plus, req);
        const TraceRecord trace_sink = lab.model->forward(p.tokens_minus, req, sink_plan);
        EntryScores es;
        es.vs_plus = contrastive_scores(trace_minus, trace_plus, dir, lab.model->weights(),
                                        lab.config);
        es.vs_sink = contrastive_scores(trace_minus, trace_sink, dir, lab.model->weights(),
                                        lab.config);
        all[i] = std::move(es);
    });

    auto mean_scores = [&](auto pick) {
        ContrastiveScores mean;
        mean.attn.assign(static_cast<size_t>(n_layers), 0.0f);
        mean.mlp.assign(static_cast<size_t>(n_layers), 0.0f);
        for (const auto& es : all) {
            const ContrastiveScores& s = pick(es);
            mean.embedding += s.embedding;
            for (int l = 0; l < n_layers; ++l) {
                mean.attn[static_cast<size_t>(l)] += s.attn[static_cast<size_t>(l)];
                mean.mlp[static_cast<size_t>(l)] += s.mlp[static_cast<size_t>(l)];
            }
        }
        const auto n = static_cast<float>(all.size());
        mean.embedding /= n;
        for (auto& v : mean.attn) v /= n;
        for (auto& v : mean.mlp) v /= n;
        return mean;
    };
    const ContrastiveScores mean_plus = mean_scores([](const EntryScores& e) -> const ContrastiveScores& { return e.vs_plus; });
    const ContrastiveScores mean_sink = mean_scores([](const EntryScores& e) -> const ContrastiveScores& { return e.vs_sink; });

    const std::set<int> critical = select_critical_mlps(mean_plus.mlp, mean_sink.mlp, cfg.top_n);

    CsvWriter csv(out_path(cfg, "attribute_components.csv"), hash);
    csv.row("component", "score_vs_plus", "score_vs_sink");
    csv.row("E", format_float(mean_plus.embedding), format_float(mean_sink.embedding));
    for (int l = 0; l < n_layers; ++l) {
        csv.row("AO_" + std::to_string(l + 1), format_float(mean_plus.attn[static_cast<size_t>(l)]),
                format_float(mean_sink.attn[static_cast<size_t>(l)]));
        csv.row("MO_" + std::to_string(l + 1), format_float(mean_plus.mlp[static_cast<size_t>(l)]),
                format_float(mean_sink.mlp[static_cast<size_t>(l)]));
    }

    ordered_json j;
    j["sink_start"] = sink_start;
    j["top_n"] = cfg.top_n;
    ordered_json crit = ordered_json::array();
    for (int l : critical) crit.push_back(l + 1);
    j["critical_mlps"] = crit;

    // latent decomposition for critical MLPs with an SAE on file
    ordered_json latents_json = ordered_json::array();
    std::unique_ptr<CsvWriter> latent_csv;
    for (int layer : critical) {
        auto it = cfg.sae_paths.find(layer + 1);
        if (it == cfg.sae_paths.end()) continue;
        const SAEModel sae = load_sae(it->second);
        sae.validate(lab.config.d_model);

        std::map<int, double> latent_mean;
        double error_mean = 0.0;
        for (size_t i = 0; i < lab.corpus.size(); ++i) {
            const PreparedEntry p = prepare_entry(lab.corpus[i], *lab.model, *lab.tokenizer);
            const ContrastDirection dir =
                contrast_direction(lab.model->weights(), p.id_minus, p.id_plus);
            TraceRequest mo_req;
            mo_req.record_mo.insert(layer);
            const TraceRecord tm = lab.model->forward(p.tokens_minus, mo_req);
            const TraceRecord tp = lab.model->forward(p.tokens_plus, mo_req);
            const auto la = latent_attribution(
                std::span<const float>(tm.mo(layer, tm.readout_pos).data(),
                                       static_cast<size_t>(lab.config.d_model)),
                sae, dir, tm.final_norm_scale[static_cast<size_t>(tm.readout_pos)],
                lab.model->weights(), lab.config);
            const auto lb = latent_attribution(
                std::span<const float>(tp.mo(layer, tp.readout_pos).data(),
                                       static_cast<size_t>(lab.config.d_model)),
                sae, dir, tp.final_norm_scale[static_cast<size_t>(tp.readout_pos)],
                lab.model->weights(), lab.config);
            std::map<int, double> contrib;
            for (const auto& [idx, c] : la.ranked) contrib[idx] += c;
            for (const auto& [idx, c] : lb.ranked) contrib[idx] -= c;
            for (const auto& [idx, c] : contrib) latent_mean[idx] += c;
            error_mean += la.error_term - lb.error_term;
        }
        const auto n = static_cast<double>(lab.corpus.size());
        error_mean /= n;

        std::vector<std::pair<int, double>> ranked(latent_mean.begin(), latent_mean.end());
        for (auto& [idx, c] : ranked) c /= n;
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            return std::fabs(a.second) > std::fabs(b.second);
        });
        if (ranked.size() > static_cast<size_t>(cfg.top_n)) {
            ranked.resize(static_cast<size_t>(cfg.top_n));
        }

        if (!latent_csv) {
            latent_csv = std::make_unique<CsvWriter>(out_path(cfg, "attribute_latents.csv"), hash);
            latent_csv->row("layer", "latent", "mean_contrastive_score", "top_tokens");
        }
        ordered_json layer_json;
        layer_json["layer"] = layer + 1;
        ordered_json latent_list = ordered_json::array();
        for (const auto& [idx, score] : ranked) {
            // explain the latent by projecting its decoder row
            const float* row = sae.dec_weight.data.data() +
                               static_cast<size_t>(idx) * static_cast<size_t>(lab.config.d_model);
            const LensReadout r =
                readout(std::span<const float>(row, static_cast<size_t>(lab.config.d_model)),
                        lab.model->weights(), lab.config, 5, LensNormMode::FrozenSigma, 1.0f);
            std::string tokens;
            ordered_json token_arr = ordered_json::array();
            for (const auto& [tid, logit] : r.promoted) {
                if (!tokens.empty()) tokens += "|";
                tokens += lab.tokenizer->token_string(tid);
                token_arr.push_back(lab.tokenizer->token_string(tid));
            }
            latent_csv->row(layer + 1, idx, format_float(score), tokens);
            ordered_json lj;
            lj["latent"] = idx;
            lj["score"] = score;
            lj["top_tokens"] = token_arr;
            latent_list.push_back(std::move(lj));
        }
        layer_json["latents"] = latent_list;
        layer_json["error_term_mean"] = error_mean;
        latents_json.push_back(std::move(layer_json));
    }
    j["latent_attribution"] = latents_json;
    write_json_file(out_path(cfg, "attribute.json"), j, hash);
}

void cmd_annotate(const ExperimentConfig& cfg) {
    LoadedLab lab = load_lab(cfg);
    if (lab.corpus.empty()) throw ConfigError("annotate needs a corpus");
    ensure_out_dir(cfg);
    const std::string hash = cfg.config_hash();
    const auto [begin, end] = resolve_layer_range(cfg, lab.config.n_layers);
    const EvidenceMode mode = cfg.annotate_mode == "demoted" ? EvidenceMode::DemotedMatchesY
                                                             : EvidenceMode::PromotedMatchesNotY;

    ChatEndpoint endpoint;
    endpoint.base_url = cfg.api_base;
    endpoint.model = cfg.api_model;
    endpoint.api_key_env = cfg.api_key_env;
    if (!cfg.fixtures.empty()) {
        if (cfg.record_fixtures) {
            endpoint.record_path = cfg.fixtures;  // live calls, recorded
        } else {
            endpoint.fixtures_path = cfg.fixtures;  // offline replay
        }
    }

    // bounded in-flight requests; each reply lands in its sample's slot so
    // aggregation stays order-independent. Recording appends to one file, so
    // it runs serially.
    const int inflight = cfg.record_fixtures ? 1 : 4;
    std::vector<std::vector<EvidenceItem>> per_sample(lab.corpus.size());
    parallel_for(lab.corpus.size(), inflight, [&](size_t i) {
        const DatasetEntry& entry = lab.corpus[i];
        const std::vector<int> tokens =
            encode_prompt(*lab.tokenizer, lab.config, entry.prompt_minus);
        const auto readouts = lens_scan(*lab.model, tokens, begin - 1, end - 1, cfg.lens_signal,
                                        static_cast<size_t>(cfg.k));
        const std::string request =
            build_annotation_prompt(entry, readouts, *lab.tokenizer, mode);
        per_sample[i] = parse_evidence(call_chat(request, endpoint));
    });
    ordered_json samples = ordered_json::array();
    for (size_t i = 0; i < lab.corpus.size(); ++i) {
        ordered_json sj;
        sj["id"] = lab.corpus[i].id;
        sj["evidence_count"] = per_sample[i].size();
        samples.push_back(std::move(sj));
    }

    const EvidenceCurve curve = evidence_curve(per_sample, begin, end, mode);

    CsvWriter csv(out_path(cfg, "annotate_curve.csv"), hash);
    csv.row("layer", "fraction");
    PlotSeries s{cfg.annotate_mode, {}};
    for (int l = begin; l <= end; ++l) {
        const double f = curve.fraction[static_cast<size_t>(l - begin)];
        csv.row(l, format_float(f));
        s.points.push_back({l, f});
    }
    ordered_json j;
    j["mode"] = cfg.annotate_mode;
    j["layer_begin"] = begin;
    j["layer_end"] = end;
    j["samples"] = samples;
    j["any_layer_fraction"] = curve.any_layer_fraction;
    write_json_file(out_path(cfg, "annotate.json"), j, hash);
    write_svg_plot(out_path(cfg, "annotate_curve.svg"), "normalized evidence count", "layer",
                   "fraction of samples", {s}, hash);
}

void cmd_checkpoints(const ExperimentConfig& cfg) {
    if (cfg.checkpoints.empty()) throw ConfigError("checkpoints needs a weight-file list");
    LoadedLab lab = load_lab(cfg, /*need_weights=*/false);
    if (lab.corpus.empty()) throw ConfigError("checkpoints needs a corpus");
    ensure_out_dir(cfg);
    const std::string hash = cfg.config_hash();

    ModelConfig config;
    if (!cfg.model_config.empty()) {
        config = ModelConfig::from_json_file(cfg.model_config);
    } else {
        const TensorFile first = load_tensor_file(cfg.checkpoints.front());
        auto meta = first.metadata.find("model_config");
        if (meta == first.metadata.end()) {
            throw ConfigError("first checkpoint embeds no model_config; pass --model-config");
        }
        config = ModelConfig::from_json_text(meta->second);
    }

    const std::vector<EvalResult> series =
        accuracy_over_checkpoints(cfg.checkpoints, config, lab.corpus, *lab.tokenizer, cfg.threads);

    CsvWriter csv(out_path(cfg, "checkpoints.csv"), hash);
    csv.row("index", "weights", "acc_plus", "acc_minus", "sensitivity");
    PlotSeries sp{"acc_plus", {}}, sm{"acc_minus", {}};
    for (size_t i = 0; i < series.size(); ++i) {
        csv.row(i, cfg.checkpoints[i], format_float(series[i].acc_plus),
                format_float(series[i].acc_minus), format_float(series[i].sensitivity));
        sp.points.push_back({static_cast<double>(i), series[i].acc_plus});
        sm.points.push_back({static_cast<double>(i), series[i].acc_minus});
    }
    ordered_json j;
    ordered_json arr = ordered_json::array();
    for (size_t i = 0; i < series.size(); ++i) {
        ordered_json cj = summary_json(series[i]);
        cj["weights"] = cfg.checkpoints[i];
        arr.push_back(std::move(cj));
    }
    j["checkpoints"] = arr;
    write_json_file(out_path(cfg, "checkpoints.json"), j, hash);
    write_svg_plot(out_path(cfg, "checkpoints.svg"), "accuracy across checkpoints", "checkpoint",
                   "accuracy", {sp, sm}, hash);
}

}  // namespace neglab
