#include "neglab/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>

#include "neglab/errors.hpp"
#include "neglab/parallel.hpp"
#include "neglab/rng.hpp"

namespace neglab {

const char* snap_point_name(SnapPoint p) {
    switch (p) {
        case SnapPoint::Pre: return "pre";
        case SnapPoint::Mid: return "mid";
        default: return "post";
    }
}

namespace {

double dot(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

double norm(const std::vector<float>& a) { return std::sqrt(dot(a, a)); }

void normalize(std::vector<float>& a) {
    const double n = norm(a);
    if (n <= 0.0) throw NumericError("cannot normalize a zero vector");
    for (auto& v : a) v = static_cast<float>(v / n);
}

// Deterministic orientation: largest-magnitude coordinate made positive.
void canonical_sign(std::vector<float>& v) {
    size_t arg = 0;
    for (size_t i = 1; i < v.size(); ++i) {
        if (std::fabs(v[i]) > std::fabs(v[arg])) arg = i;
    }
    if (v[arg] < 0.0f) {
        for (auto& x : v) x = -x;
    }
}

}  // namespace

std::vector<std::vector<float>> pca_fit(const std::vector<std::vector<float>>& rows, int k) {
    if (rows.empty()) throw DataError("pca_fit: no samples");
    const size_t n = rows.size();
    const size_t d = rows[0].size();
    if (k < 1 || static_cast<size_t>(k) > d) throw DataError("pca_fit: bad component count");

    std::vector<float> mean(d, 0.0f);
    for (const auto& r : rows) {
        for (size_t j = 0; j < d; ++j) mean[j] += r[j];
    }
    for (auto& m : mean) m /= static_cast<float>(n);

    std::vector<std::vector<float>> centered(n, std::vector<float>(d));
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < d; ++j) centered[i][j] = rows[i][j] - mean[j];
    }

    // cov * v without forming the covariance matrix
    auto cov_apply = [&](const std::vector<float>& v) {
        std::vector<float> out(d, 0.0f);
        for (size_t i = 0; i < n; ++i) {
            const double c = dot(centered[i], v);
            for (size_t j = 0; j < d; ++j) {
                out[j] += static_cast<float>(c * centered[i][j]);
            }
        }
        for (auto& x : out) x /= static_cast<float>(n);
        return out;
    };

    std::vector<std::vector<float>> basis;
    Rng rng(0x9e3779b9u);
    for (int comp = 0; comp < k; ++comp) {
        std::vector<float> v(d);
        for (auto& x : v) x = rng.gaussian();
        for (const auto& b : basis) {
            const double c = dot(v, b);
            for (size_t j = 0; j < d; ++j) v[j] -= static_cast<float>(c * b[j]);
        }
        normalize(v);

        bool degenerate = false;
        for (int iter = 0; iter < 512; ++iter) {
            std::vector<float> next = cov_apply(v);
            for (const auto& b : basis) {
                const double c = dot(next, b);
                for (size_t j = 0; j < d; ++j) next[j] -= static_cast<float>(c * b[j]);
            }
            const double len = norm(next);
            if (len < 1e-12) {
                degenerate = true;
                break;
            }
            for (auto& x : next) x = static_cast<float>(x / len);
            double diff = 0.0;
            for (size_t j = 0; j < d; ++j) {
                const double e = next[j] - v[j];
                diff += e * e;
            }
            v = std::move(next);
            if (diff < 1e-18) break;
        }
        if (degenerate) {
            // residual variance exhausted: pick a deterministic axis vector
            // orthogonal to the basis so the output stays orthonormal
            bool found = false;
            for (size_t axis = 0; axis < d && !found; ++axis) {
                std::vector<float> e(d, 0.0f);
                e[axis] = 1.0f;
                for (const auto& b : basis) {
                    const double c = dot(e, b);
                    for (size_t j = 0; j < d; ++j) e[j] -= static_cast<float>(c * b[j]);
                }
                if (norm(e) > 1e-6) {
                    normalize(e);
                    v = std::move(e);
                    found = true;
                }
            }
            if (!found) throw NumericError("pca_fit: cannot complete an orthonormal basis");
        }
        canonical_sign(v);
        basis.push_back(std::move(v));
    }
    return basis;
}

LdaModel lda_fit(const std::vector<std::vector<float>>& points, const std::vector<int>& labels,
                 float ridge_fraction) {
    if (points.size() != labels.size() || points.empty()) {
        throw DataError("lda_fit: inconsistent inputs");
    }
    const size_t k = points[0].size();
    size_t n0 = 0, n1 = 0;
    std::vector<double> mu0(k, 0.0), mu1(k, 0.0);
    for (size_t i = 0; i < points.size(); ++i) {
        if (labels[i] == 0) {
            ++n0;
            for (size_t j = 0; j < k; ++j) mu0[j] += points[i][j];
        } else {
            ++n1;
            for (size_t j = 0; j < k; ++j) mu1[j] += points[i][j];
        }
    }
    if (n0 < 2 || n1 < 2) throw DataError("lda_fit: need at least 2 samples per class");
    for (auto& m : mu0) m /= static_cast<double>(n0);
    for (auto& m : mu1) m /= static_cast<double>(n1);

    // shared within-class scatter
    std::vector<double> sw(k * k, 0.0);
    for (size_t i = 0; i < points.size(); ++i) {
        const auto& mu = labels[i] == 0 ? mu0 : mu1;
        for (size_t a = 0; a < k; ++a) {
            const double da = points[i][a] - mu[a];
            for (size_t b = 0; b < k; ++b) {
                sw[a * k + b] += da * (points[i][b] - mu[b]);
            }
        }
    }
    double trace = 0.0;
    for (size_t a = 0; a < k; ++a) trace += sw[a * k + a];
    const double ridge =
        trace > 0.0 ? ridge_fraction * trace / static_cast<double>(k) : ridge_fraction;
    for (size_t a = 0; a < k; ++a) sw[a * k + a] += ridge;

    // solve sw * w = mu1 - mu0 (tiny k, plain Gaussian elimination with
    // partial pivoting)
    std::vector<double> rhs(k);
    for (size_t j = 0; j < k; ++j) rhs[j] = mu1[j] - mu0[j];
    std::vector<double> m = sw;
    for (size_t col = 0; col < k; ++col) {
        size_t pivot = col;
        for (size_t r = col + 1; r < k; ++r) {
            if (std::fabs(m[r * k + col]) > std::fabs(m[pivot * k + col])) pivot = r;
        }
        if (std::fabs(m[pivot * k + col]) < 1e-30) {
            throw NumericError("lda_fit: singular scatter matrix despite ridge");
        }
        if (pivot != col) {
            for (size_t c = 0; c < k; ++c) std::swap(m[pivot * k + c], m[col * k + c]);
            std::swap(rhs[pivot], rhs[col]);
        }
        for (size_t r = col + 1; r < k; ++r) {
            const double f = m[r * k + col] / m[col * k + col];
            for (size_t c = col; c < k; ++c) m[r * k + c] -= f * m[col * k + c];
            rhs[r] -= f * rhs[col];
        }
    }
    std::vector<double> w(k);
    for (size_t col = k; col-- > 0;) {
        double s = rhs[col];
        for (size_t c = col + 1; c < k; ++c) s -= m[col * k + c] * w[c];
        w[col] = s / m[col * k + col];
    }

    LdaModel out;
    out.w.assign(w.begin(), w.end());
    double wn = 0.0;
    for (double v : w) wn += v * v;
    if (wn < 1e-40) {
        // identical class means: no separating direction exists; fall back
        // to a fixed axis so the classifier degrades to chance instead of
        // failing
        out.w.assign(k, 0.0f);
        out.w[0] = 1.0f;
    }
    normalize(out.w);
    // orient toward class 1
    double sep = 0.0;
    for (size_t j = 0; j < k; ++j) sep += out.w[j] * (mu1[j] - mu0[j]);
    if (sep < 0.0) {
        for (auto& x : out.w) x = -x;
    }
    double p0 = 0.0, p1 = 0.0;
    for (size_t j = 0; j < k; ++j) {
        p0 += out.w[j] * mu0[j];
        p1 += out.w[j] * mu1[j];
    }
    out.threshold = static_cast<float>(0.5 * (p0 + p1));
    return out;
}

std::vector<float> DirectionModel::direction_in_model_space() const {
    if (basis.empty()) throw DataError("direction model has no PCA basis");
    std::vector<float> dir(basis[0].size(), 0.0f);
    for (size_t j = 0; j < basis.size(); ++j) {
        for (size_t i = 0; i < dir.size(); ++i) dir[i] += lda_direction[j] * basis[j][i];
    }
    normalize(dir);
    return dir;
}

std::vector<PairedStates> collect_pair_states(const std::vector<DatasetEntry>& entries,
                                              const Model& model, const Tokenizer& tok,
                                              int threads) {
    if (entries.empty()) throw DataError("collect_pair_states: empty dataset");
    const int n_layers = model.config().n_layers;
    const std::array<SnapPoint, 3> points = {SnapPoint::Pre, SnapPoint::Mid, SnapPoint::Post};

    std::vector<PairedStates> cells;
    for (int l = 0; l < n_layers; ++l) {
        for (SnapPoint p : points) {
            PairedStates ps;
            ps.layer = l;
            ps.point = p;
            ps.plus.resize(entries.size());
            ps.minus.resize(entries.size());
            cells.push_back(std::move(ps));
        }
    }
    auto cell_index = [&](int layer, size_t point_idx) {
        return static_cast<size_t>(layer) * 3 + point_idx;
    };

    parallel_for(entries.size(), threads, [&](size_t i) {
        const DatasetEntry& entry = entries[i];
        for (Polarity pol : {Polarity::Positive, Polarity::Negative}) {
            const int y_pos = locate_y_span(entry, tok, model.config(), pol);
            TraceRequest req;
            req.positions = std::set<int>{y_pos};
            for (int l = 0; l < n_layers; ++l) {
                for (SnapPoint p : points) req.snapshots.insert({l, p});
            }
            const TraceRecord trace =
                model.forward(encode_prompt(tok, model.config(), entry.prompt(pol)), req);
            for (int l = 0; l < n_layers; ++l) {
                for (size_t pi = 0; pi < points.size(); ++pi) {
                    const auto& vec = trace.snapshot(l, points[pi], y_pos);
                    auto& cell = cells[cell_index(l, pi)];
                    (pol == Polarity::Positive ? cell.plus : cell.minus)[i] = vec;
                }
            }
        }
    });
    return cells;
}

namespace {

struct FoldSplit {
    std::vector<size_t> train;
    std::vector<size_t> test;
};

std::vector<FoldSplit> make_folds(size_t n, int folds, uint64_t seed) {
    Rng rng(seed);
    const std::vector<size_t> perm = rng.permutation(n);
    std::vector<FoldSplit> out(static_cast<size_t>(folds));
    for (int f = 0; f < folds; ++f) {
        const size_t lo = n * static_cast<size_t>(f) / static_cast<size_t>(folds);
        const size_t hi = n * static_cast<size_t>(f + 1) / static_cast<size_t>(folds);
        auto& split = out[static_cast<size_t>(f)];
        for (size_t i = 0; i < n; ++i) {
            if (i >= lo && i < hi) split.test.push_back(perm[i]);
            else split.train.push_back(perm[i]);
        }
    }
    return out;
}

}  // namespace

CVReport decode_from_states(const std::vector<PairedStates>& states, int folds, uint64_t seed) {
    if (states.empty()) throw DataError("decode_from_states: no state cells");
    const size_t n = states[0].plus.size();
    for (const auto& cell : states) {
        if (cell.plus.size() != n || cell.minus.size() != n) {
            throw DataError("decode_from_states: ragged state cells");
        }
    }
    if (folds < 2) throw DataError("decode_from_states: folds must be >= 2");
    if (n < static_cast<size_t>(folds)) {
        throw DataError("decode_from_states: fewer samples (" + std::to_string(n) +
                        ") than folds (" + std::to_string(folds) + ")");
    }

    const std::vector<FoldSplit> splits = make_folds(n, folds, seed);
    std::vector<double> cell_acc(states.size(), 0.0);
    std::map<std::pair<int, int>, int> best_votes;

    for (const auto& split : splits) {
        // stage 1: per-cell PCA + 2-D LDA on train, track best train accuracy
        double best_train = -1.0;
        std::vector<float> best_dir;
        std::pair<int, int> best_key{0, 0};
        for (const auto& cell : states) {
            std::vector<std::vector<float>> X;
            std::vector<int> labels;
            X.reserve(split.train.size() * 2);
            for (size_t idx : split.train) {
                X.push_back(cell.plus[idx]);
                labels.push_back(0);
                X.push_back(cell.minus[idx]);
                labels.push_back(1);
            }
            const auto basis = pca_fit(X, 2);
            std::vector<std::vector<float>> Z(X.size(), std::vector<float>(2));
            // projection of the raw states; centering shifts land in the
            // threshold
            for (size_t i = 0; i < X.size(); ++i) {
                for (size_t c = 0; c < basis.size(); ++c) {
                    Z[i][c] = static_cast<float>(dot(X[i], basis[c]));
                }
            }
            const LdaModel lda = lda_fit(Z, labels);
            size_t correct = 0;
            for (size_t i = 0; i < Z.size(); ++i) {
                double proj = 0.0;
                for (size_t c = 0; c < lda.w.size(); ++c) proj += lda.w[c] * Z[i][c];
                const int pred = proj > lda.threshold ? 1 : 0;
                if (pred == labels[i]) ++correct;
            }
            const double train_acc = static_cast<double>(correct) / static_cast<double>(Z.size());
            if (train_acc > best_train) {
                best_train = train_acc;
                best_key = {cell.layer, static_cast<int>(cell.point)};
                std::vector<float> dir(cell.plus[0].size(), 0.0f);
                for (size_t c = 0; c < basis.size(); ++c) {
                    for (size_t j = 0; j < dir.size(); ++j) dir[j] += lda.w[c] * basis[c][j];
                }
                normalize(dir);
                best_dir = std::move(dir);
            }
        }
        ++best_votes[best_key];

        // stage 2: project every cell onto the winning direction, fit a 1-D
        // threshold on train, score on test
        for (size_t ci = 0; ci < states.size(); ++ci) {
            const auto& cell = states[ci];
            std::vector<std::vector<float>> ztrain;
            std::vector<int> labels;
            for (size_t idx : split.train) {
                ztrain.push_back({static_cast<float>(dot(cell.plus[idx], best_dir))});
                labels.push_back(0);
                ztrain.push_back({static_cast<float>(dot(cell.minus[idx], best_dir))});
                labels.push_back(1);
            }
            const LdaModel lda1 = lda_fit(ztrain, labels);
            size_t correct = 0;
            for (size_t idx : split.test) {
                const double pp = lda1.w[0] * dot(cell.plus[idx], best_dir);
                const double pm = lda1.w[0] * dot(cell.minus[idx], best_dir);
                if (!(pp > lda1.threshold)) ++correct;  // positive = class 0
                if (pm > lda1.threshold) ++correct;     // negative = class 1
            }
            cell_acc[ci] +=
                static_cast<double>(correct) / static_cast<double>(split.test.size() * 2);
        }
    }

    CVReport report;
    report.folds = folds;
    for (size_t ci = 0; ci < states.size(); ++ci) {
        CVReport::Cell cell;
        cell.layer = states[ci].layer;
        cell.point = states[ci].point;
        cell.mean_accuracy = cell_acc[ci] / static_cast<double>(folds);
        report.cells.push_back(cell);
    }
    int top_votes = -1;
    for (const auto& [key, votes] : best_votes) {
        if (votes > top_votes) {
            top_votes = votes;
            report.best_layer = key.first;
            report.best_point = static_cast<SnapPoint>(key.second);
        }
    }
    return report;
}

CVReport decode_not_pipeline(const std::vector<DatasetEntry>& entries, const Model& model,
                             const Tokenizer& tok, int folds, uint64_t seed, int threads) {
    return decode_from_states(collect_pair_states(entries, model, tok, threads), folds, seed);
}

}  // namespace neglab
