#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "oracles.hpp"
#include "support.hpp"

using namespace cyclecl;
using namespace cyclecl::testing;

namespace {

std::vector<FrameLabel> random_labels(std::size_t n, Rng& rng, double share = 0.4) {
    std::vector<FrameLabel> l(n);
    for (auto& x : l) x = rng.uniform() < share ? FrameLabel::non_periodic : FrameLabel::periodic;
    l[0] = FrameLabel::non_periodic;
    return l;
}

EmbeddingSequence sequence(std::string id, const Matrix& e, std::vector<FrameLabel> l) {
    return EmbeddingSequence{std::move(id), e, 0, std::move(l)};
}

}  // namespace

TEST(AveragePrecision, Examples) {
    const auto l = labels_from({1, 0, 1, 0});
    EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{4, 3, 2, 1}, l), (1.0 + 2.0 / 3) / 2);
    EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{4, 1, 3, 2}, l), 1.0);
    EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{1, 4, 2, 3}, l), (1.0 / 3 + 2.0 / 4) / 2);
    EXPECT_THROW(average_precision(std::vector<double>{1, 2}, labels_from({0, 0})), ProtocolError);
    EXPECT_THROW(average_precision(std::vector<double>{1}, l), DimensionError);
}

TEST(AveragePrecision, MatchesDefinition) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.index(40);
        std::vector<double> s(n);
        for (auto& v : s) v = std::round(rng.normal() * 3);  // plenty of ties
        const auto l = random_labels(n, rng);
        EXPECT_NEAR(average_precision(s, l), brute_ap(s, l), 1e-12);
    }
}

TEST(AveragePrecision, RandomRankingExpectation) {
    // exact mean over all 8! orderings against the hypergeometric closed form
    const std::size_t N = 8, R = 3;
    const auto l = labels_from({1, 1, 1, 0, 0, 0, 0, 0});
    std::vector<double> ranks(N);
    std::iota(ranks.begin(), ranks.end(), 0.0);
    double sum = 0;
    std::size_t count = 0;
    do {
        sum += average_precision(ranks, l);
        ++count;
    } while (std::next_permutation(ranks.begin(), ranks.end()));
    double H = 0;
    for (std::size_t i = 1; i <= N; ++i) H += 1.0 / double(i);
    const double expected = double(R - 1) / double(N - 1) + H * double(N - R) / double(N * (N - 1));
    EXPECT_NEAR(sum / double(count), expected, 1e-12);
}

TEST(F1, Examples) {
    EXPECT_DOUBLE_EQ(f1_score(labels_from({1, 1, 0, 0}), labels_from({1, 0, 1, 0})), 0.5);
    EXPECT_DOUBLE_EQ(f1_score(labels_from({0, 0}), labels_from({0, 0})), 0.0);
    EXPECT_DOUBLE_EQ(f1_score(labels_from({1, 0}), labels_from({1, 0})), 1.0);
}

TEST(OracleF1, MatchesExhaustiveThresholds) {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.index(30);
        std::vector<double> s(n);
        for (auto& v : s) v = std::round(rng.normal() * 2);
        const auto l = random_labels(n, rng);
        EXPECT_NEAR(oracle_f1(s, l), brute_oracle_f1(s, l), 1e-12);
    }
}

TEST(OracleF1, AtLeastTheF1OfAnyThreshold) {
    const std::vector<double> s{0.9, 0.8, 0.7, 0.2};
    const auto l = labels_from({1, 0, 1, 0});
    EXPECT_DOUBLE_EQ(oracle_f1(s, l), 0.8);  // threshold 0.7: tp 2, predicted 3
}

TEST(PrCurve, PointsPerDistinctScore) {
    const std::vector<double> s{0.9, 0.5, 0.5, 0.1};
    const auto c = pr_curve(s, labels_from({1, 0, 1, 0}));
    ASSERT_EQ(c.size(), 3u);
    EXPECT_EQ(c[0].threshold, 0.1);
    EXPECT_DOUBLE_EQ(c[0].precision, 0.5);
    EXPECT_DOUBLE_EQ(c[1].precision, 2.0 / 3);
    EXPECT_DOUBLE_EQ(c[1].recall, 1.0);
    EXPECT_DOUBLE_EQ(c[2].recall, 0.5);
}

TEST(Knn, MatchesFullSortBruteForce) {
    Rng rng(3);
    std::vector<EmbeddingSequence> videos;
    for (int v = 0; v < 5; ++v)
        videos.push_back(sequence("v" + std::to_string(v), random_unit_rows(30, 4, rng), random_labels(30, rng)));
    const auto pool = make_pool(videos);
    for (std::size_t k : {1, 3, 10}) {
        for (std::size_t q = 0; q < pool.size(); q += 7) {
            const auto d = knn_classify(pool.vectors.row(q), pool.video[q], pool, k, 1e-8);
            std::vector<std::pair<double, std::size_t>> all;
            for (std::size_t i = 0; i < pool.size(); ++i)
                if (pool.video[i] != pool.video[q]) all.emplace_back(squared_distance(pool.vectors.row(q), pool.vectors.row(i)), i);
            std::sort(all.begin(), all.end());
            double wp = 0, wn = 0;
            ASSERT_EQ(d.neighbors.size(), k);
            for (std::size_t j = 0; j < k; ++j) {
                EXPECT_EQ(d.neighbors[j].index, all[j].second);
                const double w = 1.0 / (all[j].first + 1e-8);
                (is_anomalous(pool.labels[all[j].second]) ? wn : wp) += w;
            }
            EXPECT_NEAR(d.score, wn / (wn + wp), 1e-12);
            EXPECT_EQ(d.label, wn > wp ? FrameLabel::non_periodic : FrameLabel::periodic);
        }
    }
}

TEST(Knn, NeverUsesTheQueryVideo) {
    // the query's own video holds exact copies with the opposite label
    Matrix e(2, 2);
    e(0, 0) = 1;
    e(1, 1) = 1;
    std::vector<EmbeddingSequence> videos{sequence("a", e, labels_from({1, 1})), sequence("b", e, labels_from({0, 0}))};
    const auto r = evaluate_knn(videos, 1);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NE(r.predictions[i], r.labels[i]);
    const auto pool = make_pool(videos);
    const auto d = knn_classify(pool.vectors.row(0), 0, pool, 2, 1e-8);
    for (const auto& n : d.neighbors) EXPECT_EQ(pool.video[n.index], 1u);
}

TEST(Knn, WeightedVoteExample) {
    // one close non-periodic neighbour outweighs two far periodic ones
    Matrix ref(3, 1);
    ref(0, 0) = 0.1;
    ref(1, 0) = 1.0;
    ref(2, 0) = -1.0;
    EmbeddingPool pool;
    pool.vectors = ref;
    pool.labels = labels_from({1, 0, 0});
    pool.video = {1, 1, 1};
    pool.frame = {0, 1, 2};
    pool.video_ids = {"q", "r"};
    const std::vector<double> q{0.0};
    const auto d = knn_classify(q, 0, pool, 3, 1e-8);
    const double wn = 1 / (0.01 + 1e-8), wp = 2 / (1.0 + 1e-8);
    EXPECT_EQ(d.label, FrameLabel::non_periodic);
    EXPECT_NEAR(d.score, wn / (wn + wp), 1e-12);
    EXPECT_THROW(knn_classify(q, 0, pool, 4, 1e-8), ProtocolError);
}

TEST(Knn, PerfectClustersScorePerfectly) {
    Rng rng(4);
    std::vector<EmbeddingSequence> videos;
    for (int v = 0; v < 4; ++v) {
        Matrix e(20, 2);
        std::vector<FrameLabel> l(20);
        for (std::size_t t = 0; t < 20; ++t) {
            const bool anomalous = t >= 15;
            e(t, 0) = anomalous ? 5 + rng.normal(0, 0.1) : rng.normal(0, 0.1);
            e(t, 1) = rng.normal(0, 0.1);
            l[t] = anomalous ? FrameLabel::non_periodic : FrameLabel::periodic;
        }
        videos.push_back(sequence("v" + std::to_string(v), e, l));
    }
    const auto r = evaluate_knn(videos, 5);
    EXPECT_DOUBLE_EQ(r.ap, 1.0);
    ASSERT_TRUE(r.f1.has_value());
    EXPECT_DOUBLE_EQ(*r.f1, 1.0);
    EXPECT_EQ(r.per_video.size(), 4u);
    EXPECT_EQ(r.per_video.at("v2").positives, 5u);
}

TEST(Knn, SingleVideoIsAProtocolError) {
    Rng rng(5);
    std::vector<EmbeddingSequence> one{sequence("a", random_unit_rows(5, 2, rng), labels_from({1, 0, 0, 0, 0}))};
    EXPECT_THROW(evaluate_knn(one), ProtocolError);
}
