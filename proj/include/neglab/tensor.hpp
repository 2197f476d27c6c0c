#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace neglab {

// Row-major fp32 tensor. All kernels accumulate in fp32 with a fixed loop
// order so identical inputs give bit-identical outputs on every run.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> s);
    Tensor(std::vector<size_t> s, std::vector<float> d);

    size_t numel() const;
    size_t rank() const { return shape.size(); }
    size_t dim(size_t i) const { return shape.at(i); }

    float& at(size_t i) { return data[i]; }
    float at(size_t i) const { return data[i]; }
    float& at(size_t i, size_t j) { return data[i * shape[1] + j]; }
    float at(size_t i, size_t j) const { return data[i * shape[1] + j]; }

    std::span<float> row(size_t i) { return {data.data() + i * shape[1], shape[1]}; }
    std::span<const float> row(size_t i) const { return {data.data() + i * shape[1], shape[1]}; }

    std::string shape_str() const;
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

namespace ops {

// Mask sentinel used before softmax; exp() of it underflows to exactly 0.
inline constexpr float kMaskedScore = -1e30f;

Tensor matmul(const Tensor& a, const Tensor& b);

// Raw kernel: c[m x n] += / = a[m x k] * b[k x n], fixed i,k,j loop order.
void matmul_f32(const float* a, const float* b, float* c, size_t m, size_t k, size_t n);

// Softmax over each row of a square score matrix under a causal mask:
// row t may attend to keys 0..t. Masked entries come out exactly 0.
Tensor masked_softmax_rows(const Tensor& scores);

// In-place row softmax over the first `allowed` entries; the rest are set
// to exactly 0. Max-subtraction applied. Entries already at or below
// kMaskedScore inside the allowed range stay exactly 0 after the pass.
void softmax_row(std::span<float> row, size_t allowed);

Tensor rms_norm(const Tensor& x, const Tensor& gamma, float eps);
void rms_norm_f32(const float* x, const float* gamma, float* out, size_t d, float eps);
// Scale actually used by rms_norm on x: sqrt(mean(x^2) + eps).
float rms_scale(const float* x, size_t d, float eps);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);
void layer_norm_f32(const float* x, const float* gamma, const float* beta, float* out, size_t d,
                    float eps);
float layer_norm_scale(const float* x, size_t d, float eps);

float gelu(float x);
float silu(float x);
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);

// Rotary position embedding over a [T x d_head] block, pairwise (even, odd)
// rotation, angle = pos * base^(-2i/d_head). Position 0 is the identity.
Tensor rotary_apply(const Tensor& x, float base);
void rotary_apply_f32(float* x, size_t t, size_t d_head, float base, size_t pos_offset = 0);

struct TopK {
    std::vector<size_t> indices;
    std::vector<float> values;
};

// Largest k values, descending; ties broken by lower index. Errors if k > n.
TopK topk(std::span<const float> v, size_t k);
// Smallest k values, ascending; ties broken by lower index.
TopK bottomk(std::span<const float> v, size_t k);

void check_finite(const Tensor& t, const char* what);
void check_finite(std::span<const float> v, const char* what);

}  // namespace ops
}  // namespace neglab
