// Temporal self-similarity matrices and the diagnostics built on them:
// autocorrelation, 1-D PCA projection and cycle features.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "cyclecl/core.hpp"
#include "cyclecl/simhead.hpp"

namespace cyclecl {

struct SimilarityMatrix {
    Matrix values;
    std::size_t frame_offset = 0;
    bool renormalized = false;  // inputs were not unit norm and were normalised first

    std::size_t size() const { return values.rows; }
    double operator()(std::size_t i, std::size_t j) const { return values(i, j); }
};

// Rows of `embeddings` scaled to unit length; `changed` reports whether any
// row was more than 1e-6 away from unit norm.
inline Matrix unit_rows(const Matrix& embeddings, bool* changed = nullptr) {
    Matrix out = embeddings;
    bool any = false;
    for (std::size_t i = 0; i < out.rows; ++i) {
        const double n = norm2(out.row(i));
        if (std::abs(n - 1.0) <= 1e-6) continue;
        any = true;
        auto r = out.row(i);
        if (n > kNormFloor) {
            for (auto& v : r) v /= n;
        } else {
            std::fill(r.begin(), r.end(), 0.0);
        }
    }
    if (changed) *changed = any;
    return out;
}

inline SimilarityMatrix compute_tsm(const Matrix& embeddings, std::size_t frame_offset = 0) {
    if (embeddings.rows == 0) throw DimensionError("compute_tsm: empty sequence");
    bool renorm = false;
    const Matrix e = unit_rows(embeddings, &renorm);
    const std::size_t N = e.rows;
    SimilarityMatrix S{Matrix(N, N), frame_offset, renorm};
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = i; j < N; ++j) {
            const double v = dot(e.row(i), e.row(j));
            S.values(i, j) = v;
            S.values(j, i) = v;
        }
    return S;
}

inline SimilarityMatrix compute_tsm(const EmbeddingSequence& emb) {
    return compute_tsm(emb.embeddings, emb.clip_offset);
}

// r(lag) = mean over t of e_t . e_{t+lag}, for lag in [0, max_lag].
inline std::vector<double> autocorrelation(const Matrix& embeddings, std::size_t max_lag) {
    const std::size_t N = embeddings.rows;
    if (max_lag >= N) throw DimensionError("autocorrelation: max_lag must be < sequence length");
    std::vector<double> r(max_lag + 1, 0.0);
    for (std::size_t lag = 0; lag <= max_lag; ++lag) {
        double s = 0.0;
        for (std::size_t t = 0; t + lag < N; ++t) s += dot(embeddings.row(t), embeddings.row(t + lag));
        r[lag] = s / static_cast<double>(N - lag);
    }
    return r;
}

// Same quantity read off the superdiagonals of a TSM.
inline std::vector<double> autocorrelation(const SimilarityMatrix& S, std::size_t max_lag) {
    const std::size_t N = S.size();
    if (max_lag >= N) throw DimensionError("autocorrelation: max_lag must be < sequence length");
    std::vector<double> r(max_lag + 1, 0.0);
    for (std::size_t lag = 0; lag <= max_lag; ++lag) {
        double s = 0.0;
        for (std::size_t t = 0; t + lag < N; ++t) s += S(t, t + lag);
        r[lag] = s / static_cast<double>(N - lag);
    }
    return r;
}

// Lag in [lo, hi] with the highest autocorrelation; ties go to the smaller lag.
inline std::size_t dominant_lag(std::span<const double> r, std::size_t lo, std::size_t hi) {
    hi = std::min(hi, r.size() - 1);
    std::size_t best = lo;
    for (std::size_t lag = lo + 1; lag <= hi; ++lag)
        if (r[lag] > r[best]) best = lag;
    return best;
}

// ---------------------------------------------------------------------------
// First principal component by power iteration
// ---------------------------------------------------------------------------
struct PcaOptions {
    std::size_t max_iterations = 1000;
    double eigenvalue_tol = 1e-10;  // relative change between iterations
    double vector_tol = 1e-12;      // max-abs change of the unit eigenvector
    std::uint64_t seed = 0x70636131ULL;
};

struct PcaProjection {
    std::vector<double> projection;  // one scalar per input vector
    std::vector<double> component;   // unit eigenvector, first nonzero entry positive
    double eigenvalue = 0.0;         // of the (1/n) covariance
    std::size_t iterations = 0;
    bool degenerate = false;
};

inline PcaProjection pca_project_1d(const Matrix& X, const PcaOptions& opt = {}) {
    const std::size_t n = X.rows, D = X.cols;
    if (n < 2) throw DimensionError("pca_project_1d: need at least two vectors");
    std::vector<double> mean(D, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < D; ++d) mean[d] += X(i, d);
    for (auto& m : mean) m /= static_cast<double>(n);
    Matrix cov(D, D);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < D; ++a) {
            const double xa = X(i, a) - mean[a];
            for (std::size_t b = a; b < D; ++b) cov(a, b) += xa * (X(i, b) - mean[b]);
        }
    for (std::size_t a = 0; a < D; ++a)
        for (std::size_t b = a; b < D; ++b) {
            cov(a, b) /= static_cast<double>(n);
            cov(b, a) = cov(a, b);
        }

    PcaProjection out;
    out.projection.assign(n, 0.0);
    out.component.assign(D, 0.0);
    double trace = 0.0;
    for (std::size_t d = 0; d < D; ++d) trace += cov(d, d);
    if (!(trace > 1e-24)) {
        out.degenerate = true;
        return out;
    }

    auto multiply = [&](const std::vector<double>& v) {
        std::vector<double> w(D, 0.0);
        for (std::size_t a = 0; a < D; ++a) w[a] = dot(cov.row(a), v);
        return w;
    };
    std::vector<double> v(D);
    Rng rng(opt.seed);
    for (auto& x : v) x = rng.normal();
    double vn = norm2(v);
    for (auto& x : v) x /= vn;

    double lambda = 0.0;
    for (std::size_t it = 0; it < opt.max_iterations; ++it) {
        std::vector<double> w = multiply(v);
        const double wn = norm2(w);
        if (!(wn > 1e-300)) {
            // start vector in the null space: restart on the largest-variance axis
            std::fill(v.begin(), v.end(), 0.0);
            std::size_t best = 0;
            for (std::size_t d = 1; d < D; ++d)
                if (cov(d, d) > cov(best, best)) best = d;
            v[best] = 1.0;
            continue;
        }
        for (auto& x : w) x /= wn;
        const double next_lambda = dot(w, multiply(w));
        double change = 0.0;
        for (std::size_t d = 0; d < D; ++d) change = std::max(change, std::abs(w[d] - v[d]));
        const bool converged = std::abs(next_lambda - lambda) <= opt.eigenvalue_tol * std::abs(next_lambda) &&
                               change <= opt.vector_tol;
        v = std::move(w);
        lambda = next_lambda;
        out.iterations = it + 1;
        if (converged) break;
    }
    for (std::size_t d = 0; d < D; ++d)
        if (std::abs(v[d]) > 1e-12) {
            if (v[d] < 0.0)
                for (auto& x : v) x = -x;
            break;
        }
    out.component = v;
    out.eigenvalue = lambda;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t d = 0; d < D; ++d) s += (X(i, d) - mean[d]) * v[d];
        out.projection[i] = s;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cycle features: each frame's similarities to the frames of its window
// ---------------------------------------------------------------------------
inline constexpr std::size_t kDefaultCycleWindow = 64;

// Row i is the cycle feature of frame i. Windows tile the sequence in
// non-overlapping blocks of W; the last block is padded by repeating the final frame.
inline Matrix cycle_features(const Matrix& embeddings, std::size_t window = kDefaultCycleWindow) {
    if (window < 2) throw ConfigError("cycle_features: window must be >= 2");
    const std::size_t N = embeddings.rows;
    if (N < window) throw ConfigError("cycle_features: sequence shorter than the window");
    const Matrix e = unit_rows(embeddings);
    Matrix out(N, window);
    for (std::size_t i = 0; i < N; ++i) {
        const std::size_t block = (i / window) * window;
        for (std::size_t m = 0; m < window; ++m) {
            const std::size_t j = std::min(block + m, N - 1);
            out(i, m) = dot(e.row(i), e.row(j));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV dumps
// ---------------------------------------------------------------------------
inline void write_matrix_csv(const std::filesystem::path& path, const Matrix& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    char buf[32];
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) {
            std::snprintf(buf, sizeof buf, "%.9g", m(i, j));
            if (j) f << ',';
            f << buf;
        }
        f << '\n';
    }
}

inline void write_trace_csv(const std::filesystem::path& path, std::span<const double> values,
                            const std::string& header = "index,value") {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << header << '\n';
    char buf[32];
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.9g", values[i]);
        f << i << ',' << buf << '\n';
    }
}

}  // namespace cyclecl
