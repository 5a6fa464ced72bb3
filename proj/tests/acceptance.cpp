// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Optional arguments select criteria by number.
//
// Criteria 4-11 train the head on the standard synthetic benchmark for every
// seed and ablation value, which takes a while on one core.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cyclecl;
using namespace cyclecl::testing;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds.
constexpr double kGradTimeLimitSeconds = 30.0;
constexpr std::size_t kGradInstances = 10;
constexpr double kLofTol = 1e-9;
constexpr double kPcaTol = 1e-6;
constexpr double kExactTol = 1e-12;
constexpr double kUnitNormTol = 1e-6;
constexpr double kLearningGainF1 = 0.10;
constexpr double kSeedTimeLimitSeconds = 300.0;
constexpr double kSamplingGapF1 = 0.05;
constexpr double kPeriodRecoveryShare = 0.80;

struct Verdict {
    bool pass = true;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Training runs, shared between criteria
// ---------------------------------------------------------------------------
struct SeedRun {
    RunOutcome outcome;
    MetricsReport baseline;
    PreparedData data;
    double seconds = 0.0;
};

class Runs {
public:
    Runs() : base_() {}

    const ExperimentConfig& base() const { return base_; }

    const SeedRun& default_run(std::uint64_t seed) {
        auto it = defaults_.find(seed);
        if (it != defaults_.end()) return it->second;
        SeedRun r;
        const auto t0 = std::chrono::steady_clock::now();
        r.data = prepare_data(base_, seed);
        r.outcome = run_seed(base_, seed, r.data);
        r.seconds = seconds_since(t0);
        r.baseline = baseline_knn(base_, r.data);
        std::fprintf(stderr, "  default seed %llu: F1 %.4f AP %.4f (baseline F1 %.4f) in %.0f s, %s\n",
                     static_cast<unsigned long long>(seed), r.outcome.knn.f1.value_or(0), r.outcome.knn.ap,
                     r.baseline.f1.value_or(0), r.seconds, std::string(to_string(r.outcome.trained.report.stop_reason)).c_str());
        return defaults_.emplace(seed, std::move(r)).first->second;
    }

    // Median k-NN F1 over the seeds for one ablation value. The default value
    // of an axis reuses the default runs.
    double median_f1(AblationAxis axis, const std::string& value) {
        std::vector<double> f1;
        const ExperimentConfig cfg = apply_ablation(base_, axis, value);
        const bool is_default = to_json(cfg) == to_json(base_);
        for (auto seed : base_.seeds) {
            if (is_default) {
                f1.push_back(default_run(seed).outcome.knn.f1.value_or(0.0));
                continue;
            }
            const auto key = std::string(to_string(axis)) + "=" + value + "/" + std::to_string(seed);
            auto it = cells_.find(key);
            if (it == cells_.end()) {
                const auto t0 = std::chrono::steady_clock::now();
                const double v = run_seed(cfg, seed).knn.f1.value_or(0.0);
                std::fprintf(stderr, "  %s: F1 %.4f in %.0f s\n", key.c_str(), v, seconds_since(t0));
                it = cells_.emplace(key, v).first;
            }
            f1.push_back(it->second);
        }
        return median(f1);
    }

private:
    ExperimentConfig base_;
    std::map<std::uint64_t, SeedRun> defaults_;
    std::map<std::string, double> cells_;
};

// ---------------------------------------------------------------------------
// 1. Gradient correctness
// ---------------------------------------------------------------------------
Verdict check_gradients(Runs&) {
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::uint64_t seed = 1000;
    for (bool bn : {false, true})
        for (Pooling pool : {Pooling::max, Pooling::mean})
            for (bool l2 : {false, true}) {
                const auto s = sweep_gradients(tiny_head(bn, pool, l2), kGradInstances, seed++);
                worst = std::max(worst, s.max_rel_error);
                if (s.usable < kGradInstances || !(s.max_rel_error < kGradRelTol)) {
                    v.pass = false;
                    v.detail += fmt("[bn=%d pool=%s l2=%d: %zu instances, rel err %.2e] ", bn,
                                    std::string(to_string(pool)).c_str(), l2, s.usable, s.max_rel_error);
                }
            }
    const double secs = seconds_since(t0);
    if (secs >= kGradTimeLimitSeconds) v.pass = false;
    v.detail += fmt("8 configs x %zu instances, max rel err %.2e (tol %.0e), %.1f s", kGradInstances, worst,
                    kGradRelTol, secs);
    return v;
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalences
// ---------------------------------------------------------------------------
Verdict check_oracles(Runs&) {
    Verdict v;
    Rng rng(2024);
    std::size_t miner_cases = 0, mismatches = 0;
    for (std::size_t N = 3; N <= 20; ++N) {
        const auto S = compute_tsm(random_matrix(N, 3, rng));
        mismatches += keys(mine_mean_threshold(S, 0.3, 0)) != brute_mean_threshold(S, 0.3);
        for (std::size_t k : {std::size_t{1}, std::size_t{3}})
            if (k < N) mismatches += keys(mine_topk(S, k, 0)) != brute_topk(S, k);
        mismatches += !adjacent_matches(S, mine_adjacent(S));
        miner_cases += 4;
    }
    if (mismatches) v.pass = false;
    v.detail += fmt("miners %zu/%zu; ", miner_cases - mismatches, miner_cases);

    // weighted k-NN on 500 frames
    std::vector<EmbeddingSequence> videos;
    for (int i = 0; i < 10; ++i) {
        std::vector<FrameLabel> l(50);
        for (auto& x : l) x = rng.uniform() < 0.2 ? FrameLabel::non_periodic : FrameLabel::periodic;
        videos.push_back({"v" + std::to_string(i), random_unit_rows(50, 8, rng), 0, l});
    }
    const auto pool = make_pool(videos);
    std::size_t knn_bad = 0;
    for (std::size_t q = 0; q < pool.size(); ++q) {
        const auto d = knn_classify(pool.vectors.row(q), pool.video[q], pool, 10, 1e-8);
        const auto ref = brute_knn(pool, q, 10);
        for (std::size_t j = 0; j < 10; ++j) knn_bad += d.neighbors[j].index != ref[j];
    }
    if (knn_bad) v.pass = false;
    v.detail += fmt("k-NN %zu frames, %zu neighbour mismatches; ", pool.size(), knn_bad);

    // AP and oracle F1 on 200 items with ties
    double metric_err = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> s(200);
        std::vector<FrameLabel> l(200);
        for (std::size_t i = 0; i < 200; ++i) {
            s[i] = std::round(rng.normal() * 4);
            l[i] = rng.uniform() < 0.3 ? FrameLabel::non_periodic : FrameLabel::periodic;
        }
        l[0] = FrameLabel::non_periodic;
        metric_err = std::max(metric_err, std::abs(average_precision(s, l) - brute_ap(s, l)));
        metric_err = std::max(metric_err, std::abs(oracle_f1(s, l) - brute_oracle_f1(s, l)));
    }
    if (!(metric_err <= kExactTol)) v.pass = false;
    v.detail += fmt("AP/oracle-F1 err %.1e; ", metric_err);

    // LOF on 200 points
    const Matrix X = random_matrix(200, 4, rng);
    const auto a = lof_scores(X, 10), b = brute_lof(X, 10);
    double lof_err = 0.0;
    for (std::size_t i = 0; i < 200; ++i) lof_err = std::max(lof_err, std::abs(a[i] - b[i]));
    if (!(lof_err <= kLofTol)) v.pass = false;
    v.detail += fmt("LOF err %.1e; ", lof_err);

    // PCA against a dense eigensolver
    double pca_err = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        Matrix P = random_matrix(100, 6, rng);
        for (std::size_t t = 0; t < 100; ++t) P(t, std::size_t(trial) % 6) *= 2.5;
        const auto p = pca_project_1d(P);
        Eigen::MatrixXd M(100, 6);
        for (std::size_t t = 0; t < 100; ++t)
            for (std::size_t d = 0; d < 6; ++d) M(Eigen::Index(t), Eigen::Index(d)) = P(t, d);
        const Eigen::MatrixXd C = M.rowwise() - M.colwise().mean();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C.transpose() * C / 100.0);
        Eigen::VectorXd e = es.eigenvectors().col(5);
        for (int d = 0; d < 6; ++d)
            if (std::abs(e(d)) > 1e-12) {
                if (e(d) < 0) e = -e;
                break;
            }
        for (int d = 0; d < 6; ++d) pca_err = std::max(pca_err, std::abs(p.component[std::size_t(d)] - e(d)));
        pca_err = std::max(pca_err, std::abs(p.eigenvalue - es.eigenvalues()(5)) / es.eigenvalues()(5));
    }
    if (!(pca_err <= kPcaTol)) v.pass = false;
    v.detail += fmt("PCA err %.1e", pca_err);
    return v;
}

// ---------------------------------------------------------------------------
// 3. Structural invariants
// ---------------------------------------------------------------------------
Verdict check_invariants(Runs& runs) {
    Verdict v;
    Rng rng(33);
    // TSM symmetry and unit diagonal
    double tsm_err = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const auto S = compute_tsm(random_matrix(40, 5, rng));
        for (std::size_t i = 0; i < 40; ++i) {
            tsm_err = std::max(tsm_err, std::abs(S(i, i) - 1.0));
            for (std::size_t j = 0; j < 40; ++j) tsm_err = std::max(tsm_err, std::abs(S(i, j) - S(j, i)));
        }
    }
    if (!(tsm_err <= kExactTol)) v.pass = false;

    // trained embeddings are unit norm
    const auto& run = runs.default_run(runs.base().seeds.front());
    double norm_err = 0.0;
    for (const auto& e : run.outcome.test_embeddings)
        for (std::size_t t = 0; t < e.size(); ++t) norm_err = std::max(norm_err, std::abs(norm2(e.embeddings.row(t)) - 1.0));
    if (!(norm_err <= kUnitNormTol)) v.pass = false;

    // mean-threshold triplets on trained-embedding TSMs keep a 2*beta gap
    const double beta = runs.base().train.miner.beta;
    double min_gap = 1e300;
    std::size_t triplets = 0;
    for (const auto& e : run.outcome.test_embeddings) {
        Matrix clip(100, e.embeddings.cols);
        std::copy(e.embeddings.data.begin(), e.embeddings.data.begin() + std::ptrdiff_t(100 * clip.cols), clip.data.begin());
        const auto S = compute_tsm(clip);
        for (const auto& t : mine_mean_threshold(S, beta, 0)) {
            min_gap = std::min(min_gap, S(t.anchor, t.positive) - S(t.anchor, t.negative));
            ++triplets;
        }
    }
    if (triplets == 0 || min_gap < 2 * beta - kExactTol) v.pass = false;

    // leave-one-video-out
    const auto pool = make_pool(run.outcome.test_embeddings);
    std::size_t same_video = 0;
    for (std::size_t q = 0; q < pool.size(); q += 13)
        for (const auto& n : knn_classify(pool.vectors.row(q), pool.video[q], pool, 10, 1e-8).neighbors)
            same_video += pool.video[n.index] == pool.video[q];
    if (same_video) v.pass = false;

    // loss >= 0, and 0 exactly when every triplet satisfies the margin
    std::size_t loss_bad = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const Matrix E = random_unit_rows(12, 4, rng);
        TripletBatch batch;
        batch.triplets.push_back({});
        batch.roles.push_back({0, 0, 0});
        bool all_ok = true;
        for (int i = 0; i < 1 + trial % 5; ++i) {
            const Triplet t{rng.index(12), rng.index(12), rng.index(12)};
            batch.triplets[0].push_back(t);
            all_ok &= squared_distance(E.row(t.anchor), E.row(t.positive)) + 0.5 <=
                      squared_distance(E.row(t.anchor), E.row(t.negative));
        }
        const auto l = batch_triplet_loss(std::vector<Matrix>{E}, batch, 0.5);
        loss_bad += l.loss < 0.0 || (l.loss == 0.0) != all_ok;
    }
    if (loss_bad) v.pass = false;

    v.detail = fmt("TSM err %.1e, unit-norm err %.1e, min triplet gap %.4f over %zu (2*beta %.2f), "
                   "same-video neighbours %zu, loss violations %zu",
                   tsm_err, norm_err, min_gap, triplets, 2 * beta, same_video, loss_bad);
    return v;
}

// ---------------------------------------------------------------------------
// 4-10. Learning and ablation directions
// ---------------------------------------------------------------------------
Verdict check_learning_gain(Runs& runs) {
    std::vector<double> trained, baseline;
    double slowest = 0.0;
    for (auto seed : runs.base().seeds) {
        const auto& r = runs.default_run(seed);
        trained.push_back(r.outcome.knn.f1.value_or(0.0));
        baseline.push_back(r.baseline.f1.value_or(0.0));
        slowest = std::max(slowest, r.seconds);
    }
    const double t = median(trained), b = median(baseline);
    return {t >= b + kLearningGainF1 && slowest < kSeedTimeLimitSeconds,
            fmt("median F1 trained %.4f vs frozen encoder %.4f (need +%.2f); slowest seed %.0f s (limit %.0f)", t, b,
                kLearningGainF1, slowest, kSeedTimeLimitSeconds)};
}

Verdict check_sampling(Runs& runs) {
    const double mean = runs.median_f1(AblationAxis::sampling_strategy, "mean_threshold");
    const double topk = runs.median_f1(AblationAxis::sampling_strategy, "topk");
    const double adj = runs.median_f1(AblationAxis::sampling_strategy, "adjacent");
    return {mean >= adj + kSamplingGapF1 && mean >= topk,
            fmt("median F1 mean_threshold %.4f, topk %.4f, adjacent %.4f", mean, topk, adj)};
}

Verdict check_augmentation(Runs& runs) {
    const double pos = runs.median_f1(AblationAxis::augment_mode, "positives_only");
    const double none = runs.median_f1(AblationAxis::augment_mode, "none");
    const double all = runs.median_f1(AblationAxis::augment_mode, "all");
    return {pos >= none && pos >= all,
            fmt("median F1 positives_only %.4f, none %.4f, all %.4f", pos, none, all)};
}

Verdict check_l2norm(Runs& runs) {
    const double on = runs.median_f1(AblationAxis::l2norm, "on");
    const double off = runs.median_f1(AblationAxis::l2norm, "off");
    return {on >= off, fmt("median F1 L2 on %.4f, off %.4f", on, off)};
}

Verdict check_head(Runs& runs) {
    const double k3 = runs.median_f1(AblationAxis::head_variant, "k3_max");
    const double k1 = runs.median_f1(AblationAxis::head_variant, "k1_mean");
    const auto& g = runs.base().dataset.generator;
    return {k3 >= k1 && g.num_periodic_regions < g.num_regions,
            fmt("median F1 k3_max %.4f, k1_mean %.4f (%zu of %zu regions are background)", k3, k1,
                g.num_regions - g.num_periodic_regions, g.num_regions)};
}

Verdict check_anomaly_features(Runs& runs) {
    std::vector<double> cycle, raw;
    for (auto seed : runs.base().seeds) {
        const auto& r = runs.default_run(seed);
        AnomalyConfig c = runs.base().anomaly;
        c.feature_kind = FeatureKind::cycle;
        c.scorer = Scorer::nn_distance;
        cycle.push_back(run_anomaly(r.outcome.test_embeddings, c).metrics.ap);
        c.feature_kind = FeatureKind::raw;
        c.scorer = Scorer::lof;
        raw.push_back(run_anomaly(r.outcome.test_embeddings, c).metrics.ap);
    }
    const double c = median(cycle), r = median(raw);
    return {c >= r, fmt("median AP cycle features + nn_distance %.4f vs raw embeddings + LOF %.4f", c, r)};
}

Verdict check_period_recovery(Runs& runs) {
    Verdict v;
    for (auto seed : runs.base().seeds) {
        const auto& r = runs.default_run(seed);
        std::size_t normal = 0, lag_ok = 0, bin_ok = 0, both = 0;
        for (std::size_t i = 0; i < r.data.test.size(); ++i) {
            if (has_anomaly(r.data.test[i].labels)) continue;
            ++normal;
            const auto e = estimate_period(r.outcome.test_embeddings[i].embeddings, r.data.test[i].period);
            lag_ok += e.lag_ok;
            bin_ok += e.bin_ok;
            both += e.lag_ok && e.bin_ok;
        }
        const double share = normal ? double(both) / double(normal) : 0.0;
        if (!(share >= kPeriodRecoveryShare)) v.pass = false;
        v.detail += fmt("seed %llu: %zu/%zu (lag %zu, PCA bin %zu); ", static_cast<unsigned long long>(seed), both,
                        normal, lag_ok, bin_ok);
    }
    v.detail += fmt("need >= %.0f%% per seed", 100 * kPeriodRecoveryShare);
    return v;
}

// ---------------------------------------------------------------------------
// 11. Determinism
// ---------------------------------------------------------------------------
std::string metrics_bytes(const MetricsReport& r) { return to_json(r).dump(2) + "\n"; }

Verdict check_determinism(Runs& runs) {
    const auto seed = runs.base().seeds.front();
    const std::string first = metrics_bytes(runs.default_run(seed).outcome.knn);
    const std::string second = metrics_bytes(run_seed(runs.base(), seed).knn);
    const fs::path dir = fs::temp_directory_path() / "cyclecl_acceptance";
    fs::create_directories(dir);
    std::ofstream(dir / "metrics_a.json", std::ios::binary) << first;
    std::ofstream(dir / "metrics_b.json", std::ios::binary) << second;
    auto slurp = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    const bool same = slurp(dir / "metrics_a.json") == slurp(dir / "metrics_b.json");
    return {same, fmt("seed %llu run twice, metrics.json %zu bytes, %s", static_cast<unsigned long long>(seed),
                      first.size(), same ? "identical" : "different")};
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        const char* name;
        Verdict (*check)(Runs&);
    };
    const std::vector<Criterion> criteria{
        {"gradient correctness", check_gradients},
        {"oracle equivalences", check_oracles},
        {"structural invariants", check_invariants},
        {"learning gain over frozen encoder", check_learning_gain},
        {"sampling ablation direction", check_sampling},
        {"augmentation ablation direction", check_augmentation},
        {"L2-norm ablation direction", check_l2norm},
        {"head ablation direction", check_head},
        {"anomaly feature direction", check_anomaly_features},
        {"period recovery", check_period_recovery},
        {"determinism", check_determinism},
    };
    std::set<std::size_t> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

    Runs runs;
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const std::size_t id = i + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        Verdict v;
        try {
            v = criteria[i].check(runs);
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        failures += !v.pass;
        std::printf("%s %zu %s: %s\n", v.pass ? "PASS" : "FAIL", id, criteria[i].name, v.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
