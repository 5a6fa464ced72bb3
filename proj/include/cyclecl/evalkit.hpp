// Weighted k-NN periodicity classification with leave-one-video-out
// neighbours, and the ranking metrics shared with anomaly detection.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cyclecl/core.hpp"
#include "cyclecl/simhead.hpp"

namespace cyclecl {

// ---------------------------------------------------------------------------
// Metrics (positive class = non_periodic)
// ---------------------------------------------------------------------------
namespace detail {

// Indices by descending score; equal scores keep their original order.
inline std::vector<std::size_t> rank_descending(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

inline std::size_t count_positives(std::span<const FrameLabel> labels) {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), FrameLabel::non_periodic));
}

inline double f1_from_counts(std::size_t tp, std::size_t predicted, std::size_t actual) {
    const std::size_t denom = predicted + actual;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

}  // namespace detail

inline double average_precision(std::span<const double> scores, std::span<const FrameLabel> labels) {
    if (scores.size() != labels.size()) throw DimensionError("average_precision: scores and labels differ in length");
    const std::size_t positives = detail::count_positives(labels);
    if (positives == 0) throw ProtocolError("average_precision: undefined without positive labels");
    const auto order = detail::rank_descending(scores);
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < order.size(); ++r)
        if (is_anomalous(labels[order[r]])) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(r + 1);
        }
    return sum / static_cast<double>(positives);
}

inline double f1_score(std::span<const FrameLabel> predictions, std::span<const FrameLabel> labels) {
    if (predictions.size() != labels.size()) throw DimensionError("f1_score: predictions and labels differ in length");
    std::size_t tp = 0, predicted = 0, actual = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool p = is_anomalous(predictions[i]), l = is_anomalous(labels[i]);
        tp += p && l;
        predicted += p;
        actual += l;
    }
    return detail::f1_from_counts(tp, predicted, actual);
}

// Best F1 over every threshold between consecutive distinct scores (and +-inf),
// predicting positive for scores at or above the threshold.
inline double oracle_f1(std::span<const double> scores, std::span<const FrameLabel> labels) {
    if (scores.size() != labels.size()) throw DimensionError("oracle_f1: scores and labels differ in length");
    const std::size_t actual = detail::count_positives(labels);
    const auto order = detail::rank_descending(scores);
    double best = 0.0;  // threshold above every score
    std::size_t tp = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
        tp += is_anomalous(labels[order[r]]);
        const bool group_end = r + 1 == order.size() || scores[order[r + 1]] != scores[order[r]];
        if (group_end) best = std::max(best, detail::f1_from_counts(tp, r + 1, actual));
    }
    return best;
}

struct PRPoint {
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

// One point per distinct score, thresholds ascending.
inline std::vector<PRPoint> pr_curve(std::span<const double> scores, std::span<const FrameLabel> labels) {
    if (scores.size() != labels.size()) throw DimensionError("pr_curve: scores and labels differ in length");
    const std::size_t actual = detail::count_positives(labels);
    const auto order = detail::rank_descending(scores);
    std::vector<PRPoint> points;
    std::size_t tp = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
        tp += is_anomalous(labels[order[r]]);
        const bool group_end = r + 1 == order.size() || scores[order[r + 1]] != scores[order[r]];
        if (!group_end) continue;
        const double precision = static_cast<double>(tp) / static_cast<double>(r + 1);
        const double recall = actual == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(actual);
        points.push_back({scores[order[r]], precision, recall});
    }
    std::reverse(points.begin(), points.end());
    return points;
}

inline void write_pr_curve_csv(const std::filesystem::path& path, const std::vector<PRPoint>& curve) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << "threshold,precision,recall\n";
    char buf[96];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g", p.threshold, p.precision, p.recall);
        f << buf << '\n';
    }
}

// ---------------------------------------------------------------------------
// Weighted k-NN
// ---------------------------------------------------------------------------

// Frames of many videos stacked into one matrix.
struct EmbeddingPool {
    Matrix vectors;
    std::vector<FrameLabel> labels;
    std::vector<std::size_t> video;  // index into video_ids
    std::vector<std::size_t> frame;
    std::vector<std::string> video_ids;

    std::size_t size() const { return vectors.rows; }
};

inline EmbeddingPool make_pool(const std::vector<EmbeddingSequence>& sequences) {
    EmbeddingPool pool;
    std::size_t total = 0, dim = 0;
    for (const auto& s : sequences) {
        if (s.labels.size() != s.size()) throw DimensionError("make_pool: label count differs from frame count");
        if (total > 0 && s.embeddings.cols != dim) throw DimensionError("make_pool: embedding sizes differ");
        dim = s.embeddings.cols;
        total += s.size();
    }
    pool.vectors = Matrix(total, dim);
    std::size_t row = 0;
    for (std::size_t v = 0; v < sequences.size(); ++v) {
        const auto& s = sequences[v];
        pool.video_ids.push_back(s.video_id);
        std::copy(s.embeddings.data.begin(), s.embeddings.data.end(),
                  pool.vectors.data.begin() + static_cast<std::ptrdiff_t>(row * dim));
        for (std::size_t t = 0; t < s.size(); ++t) {
            pool.labels.push_back(s.labels[t]);
            pool.video.push_back(v);
            pool.frame.push_back(s.clip_offset + t);
        }
        row += s.size();
    }
    return pool;
}

struct Neighbor {
    std::size_t index = 0;
    double squared_distance = 0.0;
};

struct KnnDecision {
    FrameLabel label = FrameLabel::periodic;
    double score = 0.0;  // non-periodic share of the vote weight
    double weight_periodic = 0.0;
    double weight_non_periodic = 0.0;
    std::vector<Neighbor> neighbors;
};

// Votes of the k nearest references outside the query's video, each weighted
// by 1 / (d^2 + eps). Equal distances are ordered by reference index.
inline KnnDecision knn_classify(std::span<const double> query, std::size_t query_video, const EmbeddingPool& ref,
                                std::size_t k, double eps) {
    if (k < 1) throw ConfigError("knn_classify: k must be >= 1");
    if (query.size() != ref.vectors.cols) throw DimensionError("knn_classify: query dimension differs from references");
    auto closer = [](const Neighbor& a, const Neighbor& b) {
        return a.squared_distance < b.squared_distance ||
               (a.squared_distance == b.squared_distance && a.index < b.index);
    };
    // Sorted k best so far; a distance sum is abandoned once it exceeds the
    // current k-th distance (partial sums only grow, so this is exact).
    std::vector<Neighbor> candidates;
    candidates.reserve(k + 1);
    std::size_t available = 0;
    double bound = std::numeric_limits<double>::infinity();
    const std::size_t dim = query.size();
    for (std::size_t i = 0; i < ref.size(); ++i) {
        if (ref.video[i] == query_video) continue;
        ++available;
        const double* r = ref.vectors.data.data() + i * dim;
        double d = 0.0;
        for (std::size_t j = 0; j < dim && d <= bound; ++j) {
            const double diff = query[j] - r[j];
            d += diff * diff;
        }
        if (d > bound) continue;
        const Neighbor n{i, d};
        if (candidates.size() == k && !closer(n, candidates.back())) continue;
        candidates.insert(std::upper_bound(candidates.begin(), candidates.end(), n, closer), n);
        if (candidates.size() > k) candidates.pop_back();
        if (candidates.size() == k) bound = candidates.back().squared_distance;
    }
    if (available < k) throw ProtocolError("knn_classify: fewer than k references from other videos");

    KnnDecision out;
    for (const auto& n : candidates) {
        const double w = 1.0 / (n.squared_distance + eps);
        if (is_anomalous(ref.labels[n.index])) out.weight_non_periodic += w;
        else out.weight_periodic += w;
    }
    out.label = out.weight_non_periodic > out.weight_periodic ? FrameLabel::non_periodic : FrameLabel::periodic;
    out.score = out.weight_non_periodic / (out.weight_periodic + out.weight_non_periodic);
    out.neighbors = std::move(candidates);
    return out;
}

struct VideoMetrics {
    std::size_t frames = 0;
    std::size_t positives = 0;
    double f1 = 0.0;
    std::optional<double> ap;
};

struct MetricsReport {
    double ap = 0.0;
    std::optional<double> f1;
    double oracle_f1 = 0.0;
    std::size_t k = 0;
    double eps = 0.0;
    std::map<std::string, VideoMetrics> per_video;
    std::vector<double> scores;              // per frame, pool order
    std::vector<FrameLabel> labels;
    std::vector<FrameLabel> predictions;     // empty when no decision rule applies
    std::vector<std::size_t> video;
    std::vector<std::size_t> frame;
    std::vector<std::string> video_ids;
};

inline void fill_per_video(MetricsReport& r) {
    for (std::size_t v = 0; v < r.video_ids.size(); ++v) {
        std::vector<double> s;
        std::vector<FrameLabel> l, p;
        for (std::size_t i = 0; i < r.scores.size(); ++i)
            if (r.video[i] == v) {
                s.push_back(r.scores[i]);
                l.push_back(r.labels[i]);
                if (!r.predictions.empty()) p.push_back(r.predictions[i]);
            }
        VideoMetrics m;
        m.frames = s.size();
        m.positives = detail::count_positives(l);
        m.f1 = p.empty() ? oracle_f1(s, l) : f1_score(p, l);
        if (m.positives > 0) m.ap = average_precision(s, l);
        r.per_video[r.video_ids[v]] = m;
    }
}

// Leave-one-video-out weighted k-NN over every frame of every video.
inline MetricsReport evaluate_knn(const std::vector<EmbeddingSequence>& videos, std::size_t k = 10, double eps = 1e-8) {
    if (videos.size() < 2) throw ProtocolError("evaluate_knn: need at least two videos");
    const EmbeddingPool pool = make_pool(videos);
    MetricsReport r;
    r.k = k;
    r.eps = eps;
    r.labels = pool.labels;
    r.video = pool.video;
    r.frame = pool.frame;
    r.video_ids = pool.video_ids;
    r.scores.resize(pool.size());
    r.predictions.resize(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const KnnDecision d = knn_classify(pool.vectors.row(i), pool.video[i], pool, k, eps);
        r.scores[i] = d.score;
        r.predictions[i] = d.label;
    }
    r.ap = average_precision(r.scores, r.labels);
    r.f1 = f1_score(r.predictions, r.labels);
    r.oracle_f1 = oracle_f1(r.scores, r.labels);
    fill_per_video(r);
    return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["ap"] = r.ap;
    j["f1"] = r.f1 ? nlohmann::json(*r.f1) : nlohmann::json(nullptr);
    j["oracle_f1"] = r.oracle_f1;
    j["k"] = r.k;
    j["eps"] = r.eps;
    nlohmann::json pv = nlohmann::json::object();
    for (const auto& [id, m] : r.per_video)
        pv[id] = {{"frames", m.frames},
                  {"positives", m.positives},
                  {"f1", m.f1},
                  {"ap", m.ap ? nlohmann::json(*m.ap) : nlohmann::json(nullptr)}};
    j["per_video"] = std::move(pv);
    return j;
}

// video_id,frame,score,label
inline void write_score_trace_csv(const std::filesystem::path& path, const MetricsReport& r) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << "video_id,frame,score,label\n";
    char buf[32];
    for (std::size_t i = 0; i < r.scores.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.9g", r.scores[i]);
        f << r.video_ids[r.video[i]] << ',' << r.frame[i] << ',' << buf << ',' << (is_anomalous(r.labels[i]) ? 1 : 0)
          << '\n';
    }
}

}  // namespace cyclecl
