#pragma once

#include <map>
#include <string>

#include "neglab/tensor.hpp"

namespace neglab {

// Tensor container: 8-byte little-endian header length, JSON header mapping
// tensor name -> {dtype, shape, data_offsets}, then raw little-endian fp32
// row-major bytes. Layout-compatible with the safetensors format; only F32
// payloads are accepted.
struct TensorFile {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;

    bool has(const std::string& name) const { return tensors.count(name) > 0; }
    const Tensor& get(const std::string& name) const;
};

TensorFile load_tensor_file(const std::string& path);
void save_tensor_file(const std::string& path, const TensorFile& file);

}  // namespace neglab
