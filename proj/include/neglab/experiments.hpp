#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "neglab/corpus.hpp"
#include "neglab/model.hpp"

namespace neglab {

// Resolved configuration for one experiment run. Flags override config-file
// fields; the canonical JSON form is hashed into every output file so reruns
// are verifiable.
struct ExperimentConfig {
    std::string weights;
    std::vector<std::string> checkpoints;
    std::string tokenizer_vocab;
    std::string tokenizer_merges;
    std::string model_config;  // optional; container metadata used otherwise
    std::string corpus;
    std::string out_dir = ".";
    uint64_t seed = 0;
    int threads = 1;
    int window_width = 3;
    std::string positions = "last";  // all | last
    int k = 10;
    int folds = 10;
    int layer_begin = 0;  // 1-based; 0 = auto
    int layer_end = 0;
    std::string fixtures;
    bool record_fixtures = false;
    std::string plan_file;  // serialized intervention plan applied by eval
    int n_resamples = 500;
    int top_n = 10;
    int sink_start = 0;  // 1-based; 0 = auto (floor(L/2)+1)
    int max_entries = 0;  // 0 = whole corpus
    std::map<int, std::string> sae_paths;  // 1-based layer -> container path
    std::string annotate_mode = "promoted";  // promoted | demoted
    std::string lens_signal = "AO";
    std::string norm_mode = "self-norm";  // self-norm | frozen-sigma
    std::string api_base;
    std::string api_model;
    std::string api_key_env = "NEGLAB_API_KEY";

    static ExperimentConfig from_json_file(const std::string& path);
    void merge_json_text(const std::string& text, const std::string& origin);
    std::string canonical_json() const;
    std::string config_hash() const;
};

struct LoadedLab {
    ModelConfig config;
    std::unique_ptr<Model> model;
    std::unique_ptr<Tokenizer> tokenizer;
    std::vector<DatasetEntry> corpus;
};

// Loads weights (+embedded or explicit model config), tokenizer and corpus.
LoadedLab load_lab(const ExperimentConfig& cfg, bool need_weights = true);

void cmd_eval(const ExperimentConfig& cfg);
void cmd_sink_sweep(const ExperimentConfig& cfg);
void cmd_logitlens_eval(const ExperimentConfig& cfg);
void cmd_windowed(const ExperimentConfig& cfg);
void cmd_path_patch(const ExperimentConfig& cfg);
void cmd_lens_scan(const ExperimentConfig& cfg);
void cmd_decode_not(const ExperimentConfig& cfg);
void cmd_attribute(const ExperimentConfig& cfg);
void cmd_annotate(const ExperimentConfig& cfg);
void cmd_checkpoints(const ExperimentConfig& cfg);

// Minimal SVG polyline plot; CSV is the canonical output, this is the
// companion visual.
struct PlotSeries {
    std::string name;
    std::vector<std::pair<double, double>> points;
};
void write_svg_plot(const std::string& path, const std::string& title,
                    const std::string& x_label, const std::string& y_label,
                    const std::vector<PlotSeries>& series, const std::string& config_hash);

std::string format_float(double v);

}  // namespace neglab
