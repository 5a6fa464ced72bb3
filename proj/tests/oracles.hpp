// Slow reference implementations written straight from the definitions.
// Shared by the unit tests and the acceptance run.
#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>
#include <vector>

#include "cyclecl/cyclecl.hpp"

namespace cyclecl::testing {

using TripletKey = std::tuple<std::size_t, std::size_t, std::size_t>;

inline std::set<TripletKey> keys(const TripletSet& ts) {
    std::set<TripletKey> out;
    for (const auto& t : ts) out.emplace(t.anchor, t.positive, t.negative);
    return out;
}

inline std::set<TripletKey> brute_mean_threshold(const SimilarityMatrix& S, double beta) {
    const std::size_t N = S.size();
    std::set<TripletKey> out;
    for (std::size_t a = 0; a < N; ++a) {
        double mu = 0;
        for (std::size_t j = 0; j < N; ++j)
            if (j != a) mu += S(a, j) / double(N - 1);
        for (std::size_t p = 0; p < N; ++p)
            for (std::size_t n = 0; n < N; ++n)
                if (p != a && n != a && p != n && S(a, p) >= mu + beta && S(a, n) <= mu - beta) out.emplace(a, p, n);
    }
    return out;
}

// Rank of j among anchor a's other frames (0 = most similar), ties by index.
inline std::size_t rank_of(const SimilarityMatrix& S, std::size_t a, std::size_t j) {
    std::size_t r = 0;
    for (std::size_t x = 0; x < S.size(); ++x)
        if (x != a && x != j && (S(a, x) > S(a, j) || (S(a, x) == S(a, j) && x < j))) ++r;
    return r;
}

inline std::set<TripletKey> brute_topk(const SimilarityMatrix& S, std::size_t k) {
    const std::size_t N = S.size();
    std::set<TripletKey> out;
    for (std::size_t a = 0; a < N; ++a)
        for (std::size_t p = 0; p < N; ++p)
            for (std::size_t n = 0; n < N; ++n) {
                if (p == a || n == a || p == n) continue;
                std::size_t below = 0;  // frames less similar than n, ties by index
                for (std::size_t x = 0; x < N; ++x)
                    if (x != a && x != n && (S(a, x) < S(a, n) || (S(a, x) == S(a, n) && x < n))) ++below;
                if (rank_of(S, a, p) < k && below < k) out.emplace(a, p, n);
            }
    return out;
}

inline bool adjacent_matches(const SimilarityMatrix& S, const TripletSet& ts) {
    if (ts.size() != S.size()) return false;
    for (const auto& t : ts)
        if (rank_of(S, t.anchor, t.positive) != 0 || rank_of(S, t.anchor, t.negative) != 1) return false;
    return true;
}

// Mean precision at the rank of each positive; ties keep input order.
inline double brute_ap(const std::vector<double>& s, const std::vector<FrameLabel>& l) {
    double sum = 0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!is_anomalous(l[i])) continue;
        ++pos;
        std::size_t rank = 0, hits = 0;
        for (std::size_t j = 0; j < s.size(); ++j)
            if (s[j] > s[i] || (s[j] == s[i] && j <= i)) {
                ++rank;
                hits += is_anomalous(l[j]);
            }
        sum += double(hits) / double(rank);
    }
    return sum / double(pos);
}

inline double brute_oracle_f1(const std::vector<double>& s, const std::vector<FrameLabel>& l) {
    std::set<double> thresholds(s.begin(), s.end());
    double best = 0;
    for (double th : thresholds) {
        std::vector<FrameLabel> p;
        for (double v : s) p.push_back(v >= th ? FrameLabel::non_periodic : FrameLabel::periodic);
        best = std::max(best, f1_score(p, l));
    }
    return best;
}

// The k nearest references outside the query's video by a full sort.
inline std::vector<std::size_t> brute_knn(const EmbeddingPool& pool, std::size_t q, std::size_t k) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < pool.size(); ++i)
        if (pool.video[i] != pool.video[q])
            all.emplace_back(squared_distance(pool.vectors.row(q), pool.vectors.row(i)), i);
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < k && j < all.size(); ++j) out.push_back(all[j].second);
    return out;
}

inline std::vector<double> brute_lof(const Matrix& X, std::size_t k) {
    const std::size_t n = X.rows;
    auto dist = [&](std::size_t a, std::size_t b) { return std::sqrt(squared_distance(X.row(a), X.row(b))); };
    std::vector<double> kd(n);
    std::vector<std::vector<std::size_t>> nk(n);
    for (std::size_t p = 0; p < n; ++p) {
        std::vector<double> d;
        for (std::size_t o = 0; o < n; ++o)
            if (o != p) d.push_back(dist(p, o));
        std::sort(d.begin(), d.end());
        kd[p] = d[k - 1];
        for (std::size_t o = 0; o < n; ++o)
            if (o != p && dist(p, o) <= kd[p]) nk[p].push_back(o);
    }
    std::vector<double> lrd(n);
    for (std::size_t p = 0; p < n; ++p) {
        double s = 0;
        for (auto o : nk[p]) s += std::max(kd[o], dist(p, o));
        lrd[p] = double(nk[p].size()) / s;
    }
    std::vector<double> lof(n);
    for (std::size_t p = 0; p < n; ++p) {
        double s = 0;
        for (auto o : nk[p]) s += lrd[o] / lrd[p];
        lof[p] = s / double(nk[p].size());
    }
    return lof;
}

}  // namespace cyclecl::testing
