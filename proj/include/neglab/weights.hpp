#pragma once

#include <map>
#include <string>

#include "neglab/config.hpp"
#include "neglab/container.hpp"
#include "neglab/tensor.hpp"

namespace neglab {

// Named, shape-validated parameter set. Projection matrices are stored
// [in x out] so activations multiply on the left. unembed.weight is
// [vocab x d_model]: row t is token t's unembedding vector.
struct Weights {
    std::map<std::string, Tensor> tensors;

    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return tensors.count(name) > 0; }
    const Tensor* maybe(const std::string& name) const;
};

// Validates every tensor required by `config` and rejects shape mismatches.
// Containers using GPT-2 style names (wte.weight, h.0.attn.c_attn.weight,
// fused QKV) are detected and remapped to the native layout.
Weights load_weights(const std::string& path, const ModelConfig& config);
Weights weights_from_file(const TensorFile& file, const ModelConfig& config);

void save_weights(const std::string& path, const Weights& weights, const ModelConfig& config);

// Deterministic Gaussian init (sigma 0.02) for toy checkpoints; norm gains 1,
// biases 0. Same seed, same bytes, on any platform.
Weights seeded_init(const ModelConfig& config, uint64_t seed, int max_positions = 256);

}  // namespace neglab
