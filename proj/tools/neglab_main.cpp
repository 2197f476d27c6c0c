#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "neglab/errors.hpp"
#include "neglab/experiments.hpp"

using namespace neglab;

namespace {

struct CliOverrides {
    std::string config_path;
    std::string weights;
    std::string checkpoints_csv;
    std::string tokenizer;
    std::string merges;
    std::string model_config;
    std::string corpus;
    std::string out;
    std::string positions;
    std::string layers;
    std::string fixtures;
    std::string plan;
    std::string sae_csv;
    std::string mode;
    std::string signal;
    std::string norm_mode;
    std::string api_base;
    std::string api_model;
    long long seed = -1;
    int threads = 0;
    int window_width = 0;
    int k = 0;
    int folds = 0;
    int resamples = 0;
    int top_n = 0;
    int sink_start = 0;
    int max_entries = -1;
    bool record = false;
};

void add_common_flags(CLI::App* cmd, CliOverrides& o) {
    cmd->add_option("--config", o.config_path, "experiment config JSON");
    cmd->add_option("--weights", o.weights, "weight container path");
    cmd->add_option("--checkpoints", o.checkpoints_csv, "comma-separated weight containers");
    cmd->add_option("--tokenizer", o.tokenizer, "vocabulary JSON (merges.txt beside it)");
    cmd->add_option("--merges", o.merges, "merges file (overrides the derived path)");
    cmd->add_option("--model-config", o.model_config, "model config JSON");
    cmd->add_option("--corpus", o.corpus, "prompt-pair corpus (JSONL)");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--seed", o.seed, "RNG seed");
    cmd->add_option("--threads", o.threads, "worker threads");
    cmd->add_option("--window-width", o.window_width, "sink/patch window width");
    cmd->add_option("--positions", o.positions, "sink positions: all|last");
    cmd->add_option("--k", o.k, "readout depth");
    cmd->add_option("--folds", o.folds, "cross-validation folds");
    cmd->add_option("--layers", o.layers, "1-based layer range A..B");
    cmd->add_option("--fixtures", o.fixtures, "recorded chat fixtures (JSONL)");
    cmd->add_option("--plan", o.plan, "intervention plan JSON applied by eval");
    cmd->add_option("--resamples", o.resamples, "permutation resamples");
    cmd->add_option("--top-n", o.top_n, "top-n for critical component selection");
    cmd->add_option("--sink-start", o.sink_start, "cumulative sink start layer (1-based)");
    cmd->add_option("--max-entries", o.max_entries, "use only the first N corpus entries");
    cmd->add_option("--sae", o.sae_csv, "SAE files as layer=path[,layer=path...]");
    cmd->add_option("--mode", o.mode, "annotation mode: promoted|demoted");
    cmd->add_option("--signal", o.signal, "lens signal: AO|MO");
    cmd->add_option("--norm-mode", o.norm_mode, "lens norm: self-norm|frozen-sigma");
    cmd->add_option("--api-base", o.api_base, "chat endpoint base URL");
    cmd->add_option("--api-model", o.api_model, "chat endpoint model name");
    cmd->add_flag("--record", o.record, "record live chat replies into --fixtures");
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= s.size()) {
        const size_t comma = s.find(',', start);
        const std::string piece = s.substr(start, comma == std::string::npos ? std::string::npos
                                                                             : comma - start);
        if (!piece.empty()) out.push_back(piece);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

ExperimentConfig resolve(const CliOverrides& o) {
    ExperimentConfig cfg;
    if (!o.config_path.empty()) cfg = ExperimentConfig::from_json_file(o.config_path);
    if (!o.weights.empty()) cfg.weights = o.weights;
    if (!o.checkpoints_csv.empty()) cfg.checkpoints = split_csv(o.checkpoints_csv);
    if (!o.tokenizer.empty()) cfg.tokenizer_vocab = o.tokenizer;
    if (!o.merges.empty()) cfg.tokenizer_merges = o.merges;
    if (!o.model_config.empty()) cfg.model_config = o.model_config;
    if (!o.corpus.empty()) cfg.corpus = o.corpus;
    if (!o.out.empty()) cfg.out_dir = o.out;
    if (o.seed >= 0) cfg.seed = static_cast<uint64_t>(o.seed);
    if (o.threads > 0) cfg.threads = o.threads;
    if (o.window_width > 0) cfg.window_width = o.window_width;
    if (!o.positions.empty()) cfg.positions = o.positions;
    if (o.k > 0) cfg.k = o.k;
    if (o.folds > 0) cfg.folds = o.folds;
    if (!o.layers.empty()) {
        const size_t sep = o.layers.find("..");
        if (sep == std::string::npos) {
            throw ConfigError("--layers expects A..B, got " + o.layers);
        }
        cfg.layer_begin = std::stoi(o.layers.substr(0, sep));
        cfg.layer_end = std::stoi(o.layers.substr(sep + 2));
    }
    if (!o.fixtures.empty()) cfg.fixtures = o.fixtures;
    if (!o.plan.empty()) cfg.plan_file = o.plan;
    if (o.record) cfg.record_fixtures = true;
    if (o.resamples > 0) cfg.n_resamples = o.resamples;
    if (o.top_n > 0) cfg.top_n = o.top_n;
    if (o.sink_start > 0) cfg.sink_start = o.sink_start;
    if (o.max_entries >= 0) cfg.max_entries = o.max_entries;
    if (!o.sae_csv.empty()) {
        for (const auto& piece : split_csv(o.sae_csv)) {
            const size_t eq = piece.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("--sae expects layer=path, got " + piece);
            }
            cfg.sae_paths[std::stoi(piece.substr(0, eq))] = piece.substr(eq + 1);
        }
    }
    if (!o.mode.empty()) cfg.annotate_mode = o.mode;
    if (!o.signal.empty()) cfg.lens_signal = o.signal;
    if (!o.norm_mode.empty()) cfg.norm_mode = o.norm_mode;
    if (!o.api_base.empty()) cfg.api_base = o.api_base;
    if (!o.api_model.empty()) cfg.api_model = o.api_model;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"neglab: instrumented transformer experiments for negation processing"};
    app.require_subcommand(1);

    struct Sub {
        const char* name;
        const char* help;
        void (*run)(const ExperimentConfig&);
    };
    const Sub subs[] = {
        {"eval", "accuracy and sensitivity over the corpus", cmd_eval},
        {"sink-sweep", "cumulative attention-sink layer sweep", cmd_sink_sweep},
        {"logitlens-eval", "per-layer lens accuracy (skip later layers)", cmd_logitlens_eval},
        {"windowed", "windowed attention sink at the readout position", cmd_windowed},
        {"path-patch", "attention-output path patching sweep", cmd_path_patch},
        {"lens-scan", "per-layer vocabulary readouts of attention outputs", cmd_lens_scan},
        {"decode-not", "PCA+LDA decoding of the negation signal", cmd_decode_not},
        {"attribute", "contrastive attribution and SAE latents", cmd_attribute},
        {"annotate", "LLM evidence annotation over lens readouts", cmd_annotate},
        {"checkpoints", "accuracy across a checkpoint series", cmd_checkpoints},
    };

    std::vector<CliOverrides> overrides(std::size(subs));
    std::vector<CLI::App*> cmds;
    for (size_t i = 0; i < std::size(subs); ++i) {
        CLI::App* cmd = app.add_subcommand(subs[i].name, subs[i].help);
        add_common_flags(cmd, overrides[i]);
        cmds.push_back(cmd);
    }

    CLI11_PARSE(app, argc, argv);

    for (size_t i = 0; i < std::size(subs); ++i) {
        if (!cmds[i]->parsed()) continue;
        try {
            subs[i].run(resolve(overrides[i]));
            return 0;
        } catch (const ConfigError& e) {
            std::fprintf(stderr, "config error: %s\n", e.what());
            return 2;
        } catch (const NetworkError& e) {
            std::fprintf(stderr, "network error: %s\n", e.what());
            return 4;
        } catch (const DataError& e) {
            std::fprintf(stderr, "data error: %s\n", e.what());
            return 3;
        } catch (const std::exception& e) {
            std::fprintf(stderr, "error: %s\n", e.what());
            return 1;
        }
    }
    return 2;
}
