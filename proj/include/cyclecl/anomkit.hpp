// Unsupervised frame anomaly scores: distance to the nearest normal reference
// frames, and the Local Outlier Factor, on raw embeddings or cycle features.
#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cyclecl/core.hpp"
#include "cyclecl/evalkit.hpp"
#include "cyclecl/simhead.hpp"
#include "cyclecl/tsmkit.hpp"

namespace cyclecl {

enum class FeatureKind { raw, cycle };
enum class Scorer { nn_distance, lof };

inline std::string_view to_string(FeatureKind f) { return f == FeatureKind::raw ? "raw" : "cycle"; }
inline std::string_view to_string(Scorer s) { return s == Scorer::nn_distance ? "nn_distance" : "lof"; }

inline FeatureKind feature_kind_from_string(std::string_view s) {
    if (s == "raw") return FeatureKind::raw;
    if (s == "cycle") return FeatureKind::cycle;
    throw ConfigError("anomaly.feature_kind: unknown kind '" + std::string(s) + "'");
}

inline Scorer scorer_from_string(std::string_view s) {
    if (s == "nn_distance") return Scorer::nn_distance;
    if (s == "lof") return Scorer::lof;
    throw ConfigError("anomaly.scorer: unknown scorer '" + std::string(s) + "'");
}

struct AnomalyConfig {
    FeatureKind feature_kind = FeatureKind::cycle;
    Scorer scorer = Scorer::nn_distance;
    std::size_t k_score = 5;
    std::size_t cycle_window = kDefaultCycleWindow;
};

inline void validate(const AnomalyConfig& cfg) {
    if (cfg.k_score < 1) throw ConfigError("anomaly.k_score must be >= 1");
    if (cfg.cycle_window < 2) throw ConfigError("anomaly.cycle_window must be >= 2");
}

// Mean Euclidean distance from each query row to its k nearest reference rows.
inline std::vector<double> nn_distance_score(const Matrix& query, const Matrix& reference, std::size_t k) {
    if (reference.rows == 0) throw ProtocolError("nn_distance_score: empty reference");
    if (k < 1) throw ConfigError("nn_distance_score: k must be >= 1");
    if (query.cols != reference.cols) throw DimensionError("nn_distance_score: feature sizes differ");
    const std::size_t kk = std::min(k, reference.rows);
    std::vector<double> scores(query.rows);
    std::vector<double> d(reference.rows);
    for (std::size_t i = 0; i < query.rows; ++i) {
        for (std::size_t j = 0; j < reference.rows; ++j) d[j] = squared_distance(query.row(i), reference.row(j));
        std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(kk), d.end());
        double s = 0.0;
        for (std::size_t j = 0; j < kk; ++j) s += std::sqrt(d[j]);
        scores[i] = s / static_cast<double>(kk);
    }
    return scores;
}

inline constexpr double kLofReachFloor = 1e-12;

// Local Outlier Factor. The k-distance neighbourhood keeps every point tied
// with the k-th nearest; mean reachability is floored so duplicates stay finite.
inline std::vector<double> lof_scores(const Matrix& X, std::size_t k) {
    const std::size_t n = X.rows;
    if (k < 1) throw ConfigError("lof_scores: k must be >= 1");
    if (n <= k) throw ProtocolError("lof_scores: need more points than k");

    std::vector<double> kdist(n);
    std::vector<std::vector<std::pair<std::size_t, double>>> hood(n);
    std::vector<double> d(n), sorted;
    for (std::size_t p = 0; p < n; ++p) {
        sorted.clear();
        for (std::size_t o = 0; o < n; ++o) {
            d[o] = o == p ? 0.0 : std::sqrt(squared_distance(X.row(p), X.row(o)));
            if (o != p) sorted.push_back(d[o]);
        }
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end());
        kdist[p] = sorted[k - 1];
        for (std::size_t o = 0; o < n; ++o)
            if (o != p && d[o] <= kdist[p]) hood[p].emplace_back(o, d[o]);
    }
    std::vector<double> lrd(n);
    for (std::size_t p = 0; p < n; ++p) {
        double reach = 0.0;
        for (auto [o, dist] : hood[p]) reach += std::max(kdist[o], dist);
        reach /= static_cast<double>(hood[p].size());
        lrd[p] = 1.0 / std::max(reach, kLofReachFloor);
    }
    std::vector<double> lof(n);
    for (std::size_t p = 0; p < n; ++p) {
        double s = 0.0;
        for (auto [o, dist] : hood[p]) s += lrd[o];
        lof[p] = s / static_cast<double>(hood[p].size()) / lrd[p];
    }
    return lof;
}

inline Matrix anomaly_features(const EmbeddingSequence& seq, const AnomalyConfig& cfg) {
    return cfg.feature_kind == FeatureKind::raw ? seq.embeddings : cycle_features(seq.embeddings, cfg.cycle_window);
}

struct AnomalyRun {
    MetricsReport metrics;
    bool reference_fallback = false;  // no normal reference videos; used all other videos
};

namespace detail {

inline Matrix stack_rows(const std::vector<const Matrix*>& parts) {
    std::size_t rows = 0, cols = 0;
    for (auto* m : parts) {
        rows += m->rows;
        cols = m->cols;
    }
    Matrix out(rows, cols);
    std::size_t r = 0;
    for (auto* m : parts) {
        std::copy(m->data.begin(), m->data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(r * cols));
        r += m->rows;
    }
    return out;
}

}  // namespace detail

// Scores every frame, then ranks them against the labels. Labels are used for
// the metrics only. For nn_distance each video is compared with the frames of
// `reference_ids` (known-normal videos) other than itself.
inline AnomalyRun run_anomaly_pipeline(const std::vector<EmbeddingSequence>& videos, const AnomalyConfig& cfg,
                                       const std::vector<std::string>& reference_ids) {
    validate(cfg);
    if (videos.empty()) throw ProtocolError("run_anomaly_pipeline: no videos");
    std::vector<Matrix> features;
    features.reserve(videos.size());
    for (const auto& v : videos) features.push_back(anomaly_features(v, cfg));

    AnomalyRun run;
    MetricsReport& r = run.metrics;
    r.k = cfg.k_score;
    for (std::size_t v = 0; v < videos.size(); ++v) {
        r.video_ids.push_back(videos[v].video_id);
        for (std::size_t t = 0; t < videos[v].size(); ++t) {
            r.labels.push_back(videos[v].labels[t]);
            r.video.push_back(v);
            r.frame.push_back(videos[v].clip_offset + t);
        }
    }

    if (cfg.scorer == Scorer::nn_distance) {
        const std::set<std::string> refs(reference_ids.begin(), reference_ids.end());
        for (std::size_t v = 0; v < videos.size(); ++v) {
            std::vector<const Matrix*> parts;
            for (std::size_t u = 0; u < videos.size(); ++u)
                if (u != v && refs.count(videos[u].video_id)) parts.push_back(&features[u]);
            if (parts.empty()) {
                run.reference_fallback = true;
                for (std::size_t u = 0; u < videos.size(); ++u)
                    if (u != v) parts.push_back(&features[u]);
            }
            if (parts.empty()) throw ProtocolError("run_anomaly_pipeline: nn_distance needs at least two videos");
            const auto s = nn_distance_score(features[v], detail::stack_rows(parts), cfg.k_score);
            r.scores.insert(r.scores.end(), s.begin(), s.end());
        }
    } else {
        std::vector<const Matrix*> parts;
        for (const auto& f : features) parts.push_back(&f);
        r.scores = lof_scores(detail::stack_rows(parts), cfg.k_score);
    }

    r.ap = average_precision(r.scores, r.labels);
    r.oracle_f1 = oracle_f1(r.scores, r.labels);
    fill_per_video(r);
    return run;
}

}  // namespace cyclecl
