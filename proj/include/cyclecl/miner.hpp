// Triplet mining from a clip's self-similarity matrix, plus the feature-space
// augmentations applied to selected triplet roles at loss time.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "cyclecl/core.hpp"
#include "cyclecl/simhead.hpp"
#include "cyclecl/tsmkit.hpp"

namespace cyclecl {

enum class MiningStrategy { mean_threshold, topk, adjacent };

inline std::string_view to_string(MiningStrategy s) {
    switch (s) {
        case MiningStrategy::mean_threshold: return "mean_threshold";
        case MiningStrategy::topk: return "topk";
        case MiningStrategy::adjacent: return "adjacent";
    }
    return "?";
}

inline MiningStrategy mining_strategy_from_string(std::string_view s) {
    if (s == "mean_threshold") return MiningStrategy::mean_threshold;
    if (s == "topk") return MiningStrategy::topk;
    if (s == "adjacent") return MiningStrategy::adjacent;
    throw ConfigError("miner.strategy: unknown strategy '" + std::string(s) + "'");
}

struct Triplet {
    std::size_t anchor = 0;
    std::size_t positive = 0;
    std::size_t negative = 0;

    auto operator<=>(const Triplet&) const = default;
};

using TripletSet = std::vector<Triplet>;

struct MinerConfig {
    MiningStrategy strategy = MiningStrategy::mean_threshold;
    double beta = 0.3;
    std::size_t k = 4;
    std::size_t max_triplets_per_anchor = 16;  // 0 keeps the full cross product
    std::uint64_t rng_seed = 0;
};

inline void validate(const MinerConfig& cfg) {
    if (cfg.strategy == MiningStrategy::mean_threshold && !(cfg.beta > 0.0))
        throw ConfigError("miner.beta must be > 0");
    if (cfg.strategy == MiningStrategy::topk && cfg.k < 1) throw ConfigError("miner.k must be >= 1");
}

namespace detail {

// Appends the cross product positives x negatives for one anchor, keeping a
// uniform random subset of `cap` pairs when it is larger. Pairs whose positive
// and negative coincide are dropped.
inline void emit_cross_product(TripletSet& out, std::size_t anchor, const std::vector<std::size_t>& pos,
                               const std::vector<std::size_t>& neg, std::size_t cap, std::uint64_t seed) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    pairs.reserve(pos.size() * neg.size());
    for (auto p : pos)
        for (auto n : neg)
            if (p != n) pairs.emplace_back(p, n);
    if (cap == 0 || pairs.size() <= cap) {
        for (auto [p, n] : pairs) out.push_back({anchor, p, n});
        return;
    }
    // Floyd's sampling of `cap` distinct indices
    Rng rng(mix_seed(seed, anchor));
    std::vector<std::size_t> chosen;
    chosen.reserve(cap);
    const std::size_t total = pairs.size();
    for (std::size_t j = total - cap; j < total; ++j) {
        const std::size_t r = rng.index(j + 1);
        if (std::find(chosen.begin(), chosen.end(), r) == chosen.end()) chosen.push_back(r);
        else chosen.push_back(j);
    }
    std::sort(chosen.begin(), chosen.end());
    for (auto idx : chosen) out.push_back({anchor, pairs[idx].first, pairs[idx].second});
}

}  // namespace detail

// Positives are frames at least `beta` above the anchor's mean similarity to
// the other frames, negatives at least `beta` below it.
inline TripletSet mine_mean_threshold(const SimilarityMatrix& S, double beta, std::size_t max_per_anchor = 16,
                                      std::uint64_t seed = 0) {
    if (!(beta > 0.0)) throw ConfigError("mine_mean_threshold: beta must be > 0");
    const std::size_t N = S.size();
    TripletSet out;
    if (N < 3) return out;
    std::vector<std::size_t> pos, neg;
    for (std::size_t a = 0; a < N; ++a) {
        double mu = 0.0;
        for (std::size_t j = 0; j < N; ++j)
            if (j != a) mu += S(a, j);
        mu /= static_cast<double>(N - 1);
        pos.clear();
        neg.clear();
        for (std::size_t j = 0; j < N; ++j) {
            if (j == a) continue;
            if (S(a, j) >= mu + beta) pos.push_back(j);
            else if (S(a, j) <= mu - beta) neg.push_back(j);
        }
        if (!pos.empty() && !neg.empty()) detail::emit_cross_product(out, a, pos, neg, max_per_anchor, seed);
    }
    return out;
}

// The k most and k least similar frames per anchor, ties to the lower index.
inline TripletSet mine_topk(const SimilarityMatrix& S, std::size_t k, std::size_t max_per_anchor = 16,
                            std::uint64_t seed = 0) {
    const std::size_t N = S.size();
    if (k < 1) throw ConfigError("mine_topk: k must be >= 1");
    if (k >= N) throw ConfigError("mine_topk: k must be smaller than the clip length");
    TripletSet out;
    std::vector<std::size_t> order;
    for (std::size_t a = 0; a < N; ++a) {
        order.clear();
        for (std::size_t j = 0; j < N; ++j)
            if (j != a) order.push_back(j);
        auto desc = [&](std::size_t x, std::size_t y) { return S(a, x) > S(a, y) || (S(a, x) == S(a, y) && x < y); };
        auto asc = [&](std::size_t x, std::size_t y) { return S(a, x) < S(a, y) || (S(a, x) == S(a, y) && x < y); };
        std::vector<std::size_t> pos(order), neg(order);
        std::partial_sort(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k), pos.end(), desc);
        std::partial_sort(neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(k), neg.end(), asc);
        pos.resize(k);
        neg.resize(k);
        std::sort(pos.begin(), pos.end());
        std::sort(neg.begin(), neg.end());
        detail::emit_cross_product(out, a, pos, neg, max_per_anchor, seed);
    }
    return out;
}

// Nearest frame as positive, second nearest as negative.
inline TripletSet mine_adjacent(const SimilarityMatrix& S) {
    const std::size_t N = S.size();
    if (N < 3) throw DimensionError("mine_adjacent: need at least 3 frames");
    TripletSet out;
    out.reserve(N);
    for (std::size_t a = 0; a < N; ++a) {
        std::size_t first = N, second = N;
        for (std::size_t j = 0; j < N; ++j) {
            if (j == a) continue;
            if (first == N || S(a, j) > S(a, first)) {
                second = first;
                first = j;
            } else if (second == N || S(a, j) > S(a, second)) {
                second = j;
            }
        }
        out.push_back({a, first, second});
    }
    return out;
}

inline TripletSet mine(const SimilarityMatrix& S, const MinerConfig& cfg) {
    validate(cfg);
    switch (cfg.strategy) {
        case MiningStrategy::mean_threshold:
            return mine_mean_threshold(S, cfg.beta, cfg.max_triplets_per_anchor, cfg.rng_seed);
        case MiningStrategy::topk: return mine_topk(S, cfg.k, cfg.max_triplets_per_anchor, cfg.rng_seed);
        case MiningStrategy::adjacent: return mine_adjacent(S);
    }
    return {};
}

// Debug dump: clip_id,anchor,positive,negative,s_ap,s_an
inline void write_triplets_csv(std::ostream& os, std::string_view clip_id, const TripletSet& triplets,
                               const SimilarityMatrix& S) {
    char buf[64];
    for (const auto& t : triplets) {
        std::snprintf(buf, sizeof buf, "%.9g,%.9g", S(t.anchor, t.positive), S(t.anchor, t.negative));
        os << clip_id << ',' << t.anchor << ',' << t.positive << ',' << t.negative << ',' << buf << '\n';
    }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------
enum class AugmentMode { positives_only, all, none };
enum class TripletRole { anchor, positive, negative };

inline std::string_view to_string(AugmentMode m) {
    switch (m) {
        case AugmentMode::positives_only: return "positives_only";
        case AugmentMode::all: return "all";
        case AugmentMode::none: return "none";
    }
    return "?";
}

inline AugmentMode augment_mode_from_string(std::string_view s) {
    if (s == "positives_only") return AugmentMode::positives_only;
    if (s == "all") return AugmentMode::all;
    if (s == "none") return AugmentMode::none;
    throw ConfigError("augment.mode: unknown mode '" + std::string(s) + "'");
}

// Feature-space stand-ins for image augmentations: additive noise
// (brightness), global scale (contrast), per-channel offsets (colour jitter),
// temporal moving average (blur) and whole-region zeroing (crop).
struct AugmentConfig {
    AugmentMode mode = AugmentMode::positives_only;
    double noise_sigma = 0.05;
    double scale_lo = 0.8;
    double scale_hi = 1.2;
    double channel_jitter_sigma = 0.05;
    std::size_t smooth_window = 3;
    double region_mask_prob = 0.2;
    std::uint64_t rng_seed = 0;
};

inline void validate(const AugmentConfig& cfg) {
    if (!(cfg.noise_sigma >= 0.0)) throw ConfigError("augment.noise_sigma must be >= 0");
    if (!(cfg.scale_lo > 0.0 && cfg.scale_lo <= cfg.scale_hi)) throw ConfigError("augment.scale_range must satisfy 0 < lo <= hi");
    if (!(cfg.channel_jitter_sigma >= 0.0)) throw ConfigError("augment.channel_jitter_sigma must be >= 0");
    if (cfg.smooth_window < 1) throw ConfigError("augment.smooth_window must be >= 1");
    if (!(cfg.region_mask_prob >= 0.0 && cfg.region_mask_prob <= 1.0))
        throw ConfigError("augment.region_mask_prob must be in [0, 1]");
}

inline bool augments_role(AugmentMode mode, TripletRole role) {
    switch (mode) {
        case AugmentMode::none: return false;
        case AugmentMode::all: return true;
        case AugmentMode::positives_only: return role == TripletRole::positive;
    }
    return false;
}

inline Clip augment(const Clip& clip, const AugmentConfig& cfg, TripletRole role, std::uint64_t call_index) {
    if (!augments_role(cfg.mode, role)) return clip;
    validate(cfg);
    const std::size_t T = clip.d0, S = clip.d1, C = clip.d2;
    Rng rng(mix_seed(cfg.rng_seed, call_index));
    Clip out = clip;

    if (cfg.noise_sigma > 0.0)
        for (auto& v : out.data) v += rng.normal(0.0, cfg.noise_sigma);

    const double scale = cfg.scale_lo == cfg.scale_hi ? cfg.scale_lo : rng.uniform(cfg.scale_lo, cfg.scale_hi);
    if (scale != 1.0)
        for (auto& v : out.data) v *= scale;

    if (cfg.channel_jitter_sigma > 0.0) {
        std::vector<double> offset(C);
        for (auto& o : offset) o = rng.normal(0.0, cfg.channel_jitter_sigma);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t c = 0; c < C; ++c) out(t, s, c) += offset[c];
    }

    if (cfg.smooth_window > 1) {
        const Clip src = out;
        const std::size_t half = cfg.smooth_window / 2;
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t lo = t >= half ? t - half : 0;
            const std::size_t hi = std::min(T - 1, t + (cfg.smooth_window - 1 - half));
            const double inv = 1.0 / static_cast<double>(hi - lo + 1);
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (std::size_t u = lo; u <= hi; ++u) acc += src(u, s, c);
                    out(t, s, c) = acc * inv;
                }
        }
    }

    if (cfg.region_mask_prob > 0.0)
        for (std::size_t s = 0; s < S; ++s)
            if (rng.uniform() < cfg.region_mask_prob)
                for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t c = 0; c < C; ++c) out(t, s, c) = 0.0;
    return out;
}

}  // namespace cyclecl
