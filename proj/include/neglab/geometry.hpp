#pragma once

#include <string>
#include <vector>

#include "neglab/corpus.hpp"
#include "neglab/model.hpp"

namespace neglab {

// Paired residual-stream states: row n of `plus` and `minus` come from
// dataset entry n, taken at the last token of the entry's Y phrase.
struct PairedStates {
    int layer = 0;  // 0-based
    SnapPoint point = SnapPoint::Mid;
    std::vector<std::vector<float>> plus;
    std::vector<std::vector<float>> minus;
};

// Two-class linear decoder in a 2-D PCA plane.
struct DirectionModel {
    std::vector<float> mean;                  // centering mean (d_model)
    std::vector<std::vector<float>> basis;    // k orthonormal d_model vectors
    std::vector<float> lda_direction;         // unit vector, PCA coordinates
    float threshold = 0.0f;                   // midpoint of projected class means
    float train_accuracy = 0.0f;
    int layer = 0;
    SnapPoint point = SnapPoint::Mid;

    // Unit d_model-space direction: basis composed with the LDA direction.
    std::vector<float> direction_in_model_space() const;
};

struct CVReport {
    struct Cell {
        int layer = 0;
        SnapPoint point = SnapPoint::Mid;
        double mean_accuracy = 0.0;
    };
    std::vector<Cell> cells;   // layer-major, point order pre/mid/post
    int best_layer = 0;        // modal best-train-direction layer over folds
    SnapPoint best_point = SnapPoint::Mid;
    int folds = 0;
};

// Centered PCA basis via covariance power iteration with deflation;
// deterministic start vectors, orthonormal output.
std::vector<std::vector<float>> pca_fit(const std::vector<std::vector<float>>& rows, int k = 2);

// Fisher LDA on low-dimensional points: w ~ Sw^-1 (mu1 - mu0) with the
// within-class scatter ridge-regularized; threshold at the midpoint of the
// projected class means, oriented so class 1 projects above it.
struct LdaModel {
    std::vector<float> w;  // unit length
    float threshold = 0.0f;
};
LdaModel lda_fit(const std::vector<std::vector<float>>& points, const std::vector<int>& labels,
                 float ridge_fraction = 1e-4f);

// Hidden states for every (layer, snapshot point) at the Y-phrase position.
std::vector<PairedStates> collect_pair_states(const std::vector<DatasetEntry>& entries,
                                              const Model& model, const Tokenizer& tok,
                                              int threads = 1);

// 10-fold CV: per fold, fit PCA(2)+LDA per (layer, point) on train, pick the
// globally best train-accuracy direction, project every cell's states onto
// it, fit a per-cell 1-D threshold on train, score on test.
CVReport decode_from_states(const std::vector<PairedStates>& states, int folds, uint64_t seed);

CVReport decode_not_pipeline(const std::vector<DatasetEntry>& entries, const Model& model,
                             const Tokenizer& tok, int folds = 10, uint64_t seed = 0,
                             int threads = 1);

const char* snap_point_name(SnapPoint p);

}  // namespace neglab
