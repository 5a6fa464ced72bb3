// Small builders shared by the unit tests.
#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "cyclecl/cyclecl.hpp"

namespace cyclecl::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double sigma = 1.0) {
    Matrix m(rows, cols);
    for (auto& v : m.data) v = rng.normal(0.0, sigma);
    return m;
}

inline Matrix random_unit_rows(std::size_t rows, std::size_t cols, Rng& rng) {
    return unit_rows(random_matrix(rows, cols, rng));
}

// e_t = (cos 2*pi*t/P, sin 2*pi*t/P)
inline Matrix circle(std::size_t n, double period, double phase = 0.0) {
    Matrix m(n, 2);
    for (std::size_t t = 0; t < n; ++t) {
        const double a = 2.0 * std::numbers::pi * static_cast<double>(t) / period + phase;
        m(t, 0) = std::cos(a);
        m(t, 1) = std::sin(a);
    }
    return m;
}

inline SimilarityMatrix similarity_from(const Matrix& values) { return SimilarityMatrix{values, 0, false}; }

inline Clip random_clip(std::size_t T, std::size_t S, std::size_t C, Rng& rng) {
    Clip c(T, S, C);
    for (auto& v : c.data) v = rng.normal();
    return c;
}

inline std::vector<FrameLabel> labels_from(const std::vector<int>& bits) {
    std::vector<FrameLabel> out;
    for (int b : bits) out.push_back(b ? FrameLabel::non_periodic : FrameLabel::periodic);
    return out;
}

}  // namespace cyclecl::testing
