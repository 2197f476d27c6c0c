#pragma once

#include <string>
#include <vector>

#include "neglab/model.hpp"
#include "neglab/tensor.hpp"
#include "neglab/tokenizer.hpp"

namespace neglab {

// Vocabulary projection of an internal vector. SelfNorm applies the final
// norm's full nonlinear form; FrozenSigma divides by a fixed scale and
// multiplies by the final-norm gain, which makes the projection linear in x
// (contributions add exactly).
enum class LensNormMode { SelfNorm, FrozenSigma };

struct LensReadout {
    std::string source;  // e.g. "layer 14 AO @ last"
    int layer = 0;       // 0-based
    std::string signal;  // "AO" | "MO"
    int position = 0;
    std::string norm_mode;
    std::vector<std::pair<int, float>> promoted;  // (token id, logit), descending
    std::vector<std::pair<int, float>> demoted;   // ascending
};

std::vector<float> logit_lens(std::span<const float> x, const Weights& weights,
                              const ModelConfig& config, LensNormMode mode,
                              float frozen_sigma = 0.0f);

LensReadout readout(std::span<const float> x, const Weights& weights, const ModelConfig& config,
                    size_t k, LensNormMode mode, float frozen_sigma = 0.0f);

// Per-layer readouts of a traced signal at the last token position,
// layers given 0-based inclusive.
std::vector<LensReadout> lens_scan(const Model& model, const std::vector<int>& tokens,
                                   int layer_begin, int layer_end, const std::string& signal = "AO",
                                   size_t k = 10, LensNormMode mode = LensNormMode::SelfNorm);

std::string readout_to_json(const LensReadout& r, const Tokenizer& tok);
std::string readouts_to_json(const std::vector<LensReadout>& rs, const Tokenizer& tok);

}  // namespace neglab
