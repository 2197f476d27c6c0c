#include "neglab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "neglab/errors.hpp"

namespace neglab {

static size_t product(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<size_t> s) : shape(std::move(s)), data(product(shape), 0.0f) {}

Tensor::Tensor(std::vector<size_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (product(shape) != data.size()) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str());
    }
}

size_t Tensor::numel() const { return product(shape); }

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace ops {

void check_finite(std::span<const float> v, const char* what) {
    for (float x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string("non-finite value produced by ") + what);
        }
    }
}

void check_finite(const Tensor& t, const char* what) {
    check_finite(std::span<const float>(t.data.data(), t.data.size()), what);
}

void matmul_f32(const float* a, const float* b, float* c, size_t m, size_t k, size_t n) {
    std::memset(c, 0, m * n * sizeof(float));
    for (size_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        float* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            const float av = arow[p];
            const float* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul expects rank-2 tensors, got " + a.shape_str() + " and " +
                         b.shape_str());
    }
    if (a.shape[1] != b.shape[0]) {
        throw ShapeError("matmul inner dimensions differ: " + a.shape_str() + " vs " +
                         b.shape_str());
    }
    Tensor c({a.shape[0], b.shape[1]});
    matmul_f32(a.data.data(), b.data.data(), c.data.data(), a.shape[0], a.shape[1], b.shape[1]);
    check_finite(c, "matmul");
    return c;
}

void softmax_row(std::span<float> row, size_t allowed) {
    float maxv = kMaskedScore;
    for (size_t j = 0; j < allowed; ++j) maxv = std::max(maxv, row[j]);
    float sum = 0.0f;
    for (size_t j = 0; j < allowed; ++j) {
        if (row[j] <= kMaskedScore) {
            row[j] = 0.0f;
        } else {
            row[j] = std::exp(row[j] - maxv);
            sum += row[j];
        }
    }
    // The causal diagonal is always allowed, so sum > 0 whenever the caller
    // keeps at least one live entry; guard anyway against all-masked rows.
    if (sum <= 0.0f) {
        throw NumericError("softmax row with no unmasked entries");
    }
    const float inv = 1.0f / sum;
    for (size_t j = 0; j < allowed; ++j) row[j] *= inv;
    for (size_t j = allowed; j < row.size(); ++j) row[j] = 0.0f;
}

Tensor masked_softmax_rows(const Tensor& scores) {
    if (scores.rank() != 2 || scores.shape[0] != scores.shape[1]) {
        throw ShapeError("masked_softmax_rows expects a square matrix, got " + scores.shape_str());
    }
    Tensor out = scores;
    const size_t t = out.shape[0];
    for (size_t q = 0; q < t; ++q) {
        softmax_row(out.row(q), q + 1);
    }
    check_finite(out, "masked_softmax_rows");
    return out;
}

float rms_scale(const float* x, size_t d, float eps) {
    float ss = 0.0f;
    for (size_t i = 0; i < d; ++i) ss += x[i] * x[i];
    return std::sqrt(ss / static_cast<float>(d) + eps);
}

void rms_norm_f32(const float* x, const float* gamma, float* out, size_t d, float eps) {
    const float inv = 1.0f / rms_scale(x, d, eps);
    for (size_t i = 0; i < d; ++i) out[i] = x[i] * inv * gamma[i];
}

Tensor rms_norm(const Tensor& x, const Tensor& gamma, float eps) {
    if (x.numel() == 0) throw ShapeError("rms_norm on empty tensor");
    if (x.numel() != gamma.numel()) {
        throw ShapeError("rms_norm gamma shape " + gamma.shape_str() + " does not match x " +
                         x.shape_str());
    }
    Tensor out(x.shape);
    rms_norm_f32(x.data.data(), gamma.data.data(), out.data.data(), x.numel(), eps);
    check_finite(out, "rms_norm");
    return out;
}

float layer_norm_scale(const float* x, size_t d, float eps) {
    float mean = 0.0f;
    for (size_t i = 0; i < d; ++i) mean += x[i];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (size_t i = 0; i < d; ++i) {
        const float c = x[i] - mean;
        var += c * c;
    }
    var /= static_cast<float>(d);
    return std::sqrt(var + eps);
}

void layer_norm_f32(const float* x, const float* gamma, const float* beta, float* out, size_t d,
                    float eps) {
    float mean = 0.0f;
    for (size_t i = 0; i < d; ++i) mean += x[i];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (size_t i = 0; i < d; ++i) {
        const float c = x[i] - mean;
        var += c * c;
    }
    var /= static_cast<float>(d);
    const float inv = 1.0f / std::sqrt(var + eps);
    for (size_t i = 0; i < d; ++i) {
        out[i] = (x[i] - mean) * inv * gamma[i] + (beta ? beta[i] : 0.0f);
    }
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    if (x.numel() != gamma.numel() || x.numel() != beta.numel()) {
        throw ShapeError("layer_norm parameter shapes do not match input " + x.shape_str());
    }
    Tensor out(x.shape);
    layer_norm_f32(x.data.data(), gamma.data.data(), beta.data.data(), out.data.data(), x.numel(),
                   eps);
    check_finite(out, "layer_norm");
    return out;
}

float gelu(float x) {
    // tanh form, the convention small decoder checkpoints are trained with
    const float c = 0.7978845608028654f;  // sqrt(2/pi)
    return 0.5f * x * (1.0f + std::tanh(c * (x + 0.044715f * x * x * x)));
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

Tensor gelu(const Tensor& x) {
    Tensor out = x;
    for (auto& v : out.data) v = gelu(v);
    check_finite(out, "gelu");
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = x;
    for (auto& v : out.data) v = silu(v);
    check_finite(out, "silu");
    return out;
}

void rotary_apply_f32(float* x, size_t t, size_t d_head, float base, size_t pos_offset) {
    const size_t half = d_head / 2;
    for (size_t pos = 0; pos < t; ++pos) {
        float* row = x + pos * d_head;
        const float p = static_cast<float>(pos + pos_offset);
        for (size_t i = 0; i < half; ++i) {
            const float theta =
                p * std::pow(base, -2.0f * static_cast<float>(i) / static_cast<float>(d_head));
            const float c = std::cos(theta);
            const float s = std::sin(theta);
            const float a = row[2 * i];
            const float b = row[2 * i + 1];
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
}

Tensor rotary_apply(const Tensor& x, float base) {
    if (x.rank() != 2) throw ShapeError("rotary_apply expects [T x d_head], got " + x.shape_str());
    if (x.shape[1] % 2 != 0) throw ShapeError("rotary_apply needs an even head dimension");
    Tensor out = x;
    rotary_apply_f32(out.data.data(), out.shape[0], out.shape[1], base);
    check_finite(out, "rotary_apply");
    return out;
}

TopK topk(std::span<const float> v, size_t k) {
    if (k > v.size()) {
        throw ShapeError("topk: k=" + std::to_string(k) + " exceeds n=" + std::to_string(v.size()));
    }
    std::vector<size_t> idx(v.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] > v[b]; });
    TopK out;
    out.indices.assign(idx.begin(), idx.begin() + static_cast<long>(k));
    out.values.reserve(k);
    for (size_t i = 0; i < k; ++i) out.values.push_back(v[out.indices[i]]);
    return out;
}

TopK bottomk(std::span<const float> v, size_t k) {
    if (k > v.size()) {
        throw ShapeError("bottomk: k=" + std::to_string(k) +
                         " exceeds n=" + std::to_string(v.size()));
    }
    std::vector<size_t> idx(v.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    TopK out;
    out.indices.assign(idx.begin(), idx.begin() + static_cast<long>(k));
    out.values.reserve(k);
    for (size_t i = 0; i < k; ++i) out.values.push_back(v[out.indices[i]]);
    return out;
}

}  // namespace ops
}  // namespace neglab
