// Experiment plumbing shared by the command-line tool and the acceptance
// suite: one JSON config, the standard synthetic benchmark, per-seed runs and
// ablation grids.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "cyclecl/anomkit.hpp"
#include "cyclecl/checkpoint.hpp"
#include "cyclecl/core.hpp"
#include "cyclecl/evalkit.hpp"
#include "cyclecl/miner.hpp"
#include "cyclecl/seqdata.hpp"
#include "cyclecl/simhead.hpp"
#include "cyclecl/trainer.hpp"
#include "cyclecl/tsmkit.hpp"

namespace cyclecl {

inline constexpr const char* kVersion = "0.1.0";

struct DatasetConfig {
    GeneratorConfig generator;  // anomalies and seeds are filled per sequence
    std::size_t train_count = 40;
    std::size_t test_count = 20;
    double anomalous_fraction = 0.5;  // of the videos in each split
    std::size_t anomaly_min_length = 60;
    std::size_t anomaly_max_length = 100;
    std::vector<AnomalyKind> anomaly_kinds{AnomalyKind::freeze, AnomalyKind::phase_jump, AnomalyKind::amplitude_drop,
                                           AnomalyKind::period_change};
    double phase_jump_radians = std::numbers::pi / 2.0;
    double amplitude_drop_factor = 0.3;
    double period_change_factor = 0.6;  // new period = factor * period
    std::size_t feature_channels = 12;
    std::uint64_t encoder_seed = 1234;
    double data_fraction = 1.0;  // share of training videos used
};

struct EvalConfig {
    std::size_t k = 10;
    double eps = 1e-8;
};

struct ExperimentConfig {
    DatasetConfig dataset;
    TrainConfig train;
    EvalConfig eval;
    AnomalyConfig anomaly;
    std::size_t embed_stride = 1;
    std::string output_dir = "runs";
    std::vector<std::uint64_t> seeds{1, 2, 3};
};

// ---------------------------------------------------------------------------
// JSON config
// ---------------------------------------------------------------------------
inline nlohmann::json to_json(const ExperimentConfig& c) {
    using nlohmann::json;
    const auto& d = c.dataset;
    const auto& g = d.generator;
    json kinds = json::array();
    for (auto k : d.anomaly_kinds) kinds.push_back(std::string(to_string(k)));
    const auto& t = c.train;
    json j;
    j["dataset"] = {{"num_frames", g.num_frames},
                    {"period", g.period},
                    {"num_regions", g.num_regions},
                    {"raw_channels", g.raw_channels},
                    {"num_periodic_regions", g.num_periodic_regions},
                    {"harmonics", g.harmonics},
                    {"noise_sigma", g.noise_sigma},
                    {"train_count", d.train_count},
                    {"test_count", d.test_count},
                    {"anomalous_fraction", d.anomalous_fraction},
                    {"anomaly_min_length", d.anomaly_min_length},
                    {"anomaly_max_length", d.anomaly_max_length},
                    {"anomaly_kinds", kinds},
                    {"phase_jump_radians", d.phase_jump_radians},
                    {"amplitude_drop_factor", d.amplitude_drop_factor},
                    {"period_change_factor", d.period_change_factor},
                    {"feature_channels", d.feature_channels},
                    {"encoder_seed", d.encoder_seed},
                    {"data_fraction", d.data_fraction}};
    j["train"] = {{"margin", t.margin},
                  {"clip_length", t.clip_length},
                  {"temporal_stride", t.temporal_stride},
                  {"batch_clips", t.batch_clips},
                  {"epochs_max", t.epochs_max},
                  {"zero_loss_patience", t.zero_loss_patience},
                  {"loss_tol", t.loss_tol},
                  {"lr", t.lr},
                  {"weight_decay", t.weight_decay},
                  {"embed_chunk", t.embed_chunk},
                  {"miner",
                   {{"strategy", std::string(to_string(t.miner.strategy))},
                    {"beta", t.miner.beta},
                    {"k", t.miner.k},
                    {"max_triplets_per_anchor", t.miner.max_triplets_per_anchor}}},
                  {"augment",
                   {{"mode", std::string(to_string(t.augment.mode))},
                    {"noise_sigma", t.augment.noise_sigma},
                    {"scale_range", {t.augment.scale_lo, t.augment.scale_hi}},
                    {"channel_jitter_sigma", t.augment.channel_jitter_sigma},
                    {"smooth_window", t.augment.smooth_window},
                    {"region_mask_prob", t.augment.region_mask_prob}}},
                  {"head", to_json(t.head)}};
    j["train"]["head"].erase("in_channels");  // follows dataset.feature_channels
    j["train"]["head"].erase("padding");
    j["eval"] = {{"k", c.eval.k}, {"eps", c.eval.eps}, {"embed_stride", c.embed_stride}};
    j["anomaly"] = {{"feature_kind", std::string(to_string(c.anomaly.feature_kind))},
                    {"scorer", std::string(to_string(c.anomaly.scorer))},
                    {"k_score", c.anomaly.k_score},
                    {"cycle_window", c.anomaly.cycle_window}};
    j["output_dir"] = c.output_dir;
    j["seeds"] = c.seeds;
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    try {
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            auto& g = c.dataset.generator;
            g.num_frames = d.value("num_frames", g.num_frames);
            g.period = d.value("period", g.period);
            g.num_regions = d.value("num_regions", g.num_regions);
            g.raw_channels = d.value("raw_channels", g.raw_channels);
            g.num_periodic_regions = d.value("num_periodic_regions", g.num_periodic_regions);
            g.harmonics = d.value("harmonics", g.harmonics);
            g.noise_sigma = d.value("noise_sigma", g.noise_sigma);
            auto& ds = c.dataset;
            ds.train_count = d.value("train_count", ds.train_count);
            ds.test_count = d.value("test_count", ds.test_count);
            ds.anomalous_fraction = d.value("anomalous_fraction", ds.anomalous_fraction);
            ds.anomaly_min_length = d.value("anomaly_min_length", ds.anomaly_min_length);
            ds.anomaly_max_length = d.value("anomaly_max_length", ds.anomaly_max_length);
            if (d.contains("anomaly_kinds")) {
                ds.anomaly_kinds.clear();
                for (const auto& k : d.at("anomaly_kinds")) ds.anomaly_kinds.push_back(anomaly_kind_from_string(k.get<std::string>()));
            }
            ds.phase_jump_radians = d.value("phase_jump_radians", ds.phase_jump_radians);
            ds.amplitude_drop_factor = d.value("amplitude_drop_factor", ds.amplitude_drop_factor);
            ds.period_change_factor = d.value("period_change_factor", ds.period_change_factor);
            ds.feature_channels = d.value("feature_channels", ds.feature_channels);
            ds.encoder_seed = d.value("encoder_seed", ds.encoder_seed);
            ds.data_fraction = d.value("data_fraction", ds.data_fraction);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            auto& tc = c.train;
            tc.margin = t.value("margin", tc.margin);
            tc.clip_length = t.value("clip_length", tc.clip_length);
            tc.temporal_stride = t.value("temporal_stride", tc.temporal_stride);
            tc.batch_clips = t.value("batch_clips", tc.batch_clips);
            tc.epochs_max = t.value("epochs_max", tc.epochs_max);
            tc.zero_loss_patience = t.value("zero_loss_patience", tc.zero_loss_patience);
            tc.loss_tol = t.value("loss_tol", tc.loss_tol);
            tc.lr = t.value("lr", tc.lr);
            tc.weight_decay = t.value("weight_decay", tc.weight_decay);
            tc.embed_chunk = t.value("embed_chunk", tc.embed_chunk);
            if (t.contains("miner")) {
                const auto& m = t.at("miner");
                if (m.contains("strategy")) tc.miner.strategy = mining_strategy_from_string(m.at("strategy").get<std::string>());
                tc.miner.beta = m.value("beta", tc.miner.beta);
                tc.miner.k = m.value("k", tc.miner.k);
                tc.miner.max_triplets_per_anchor = m.value("max_triplets_per_anchor", tc.miner.max_triplets_per_anchor);
            }
            if (t.contains("augment")) {
                const auto& a = t.at("augment");
                if (a.contains("mode")) tc.augment.mode = augment_mode_from_string(a.at("mode").get<std::string>());
                tc.augment.noise_sigma = a.value("noise_sigma", tc.augment.noise_sigma);
                if (a.contains("scale_range")) {
                    const auto r = a.at("scale_range").get<std::vector<double>>();
                    if (r.size() != 2) throw ConfigError("train.augment.scale_range must have two entries");
                    tc.augment.scale_lo = r[0];
                    tc.augment.scale_hi = r[1];
                }
                tc.augment.channel_jitter_sigma = a.value("channel_jitter_sigma", tc.augment.channel_jitter_sigma);
                tc.augment.smooth_window = a.value("smooth_window", tc.augment.smooth_window);
                tc.augment.region_mask_prob = a.value("region_mask_prob", tc.augment.region_mask_prob);
            }
            if (t.contains("head")) {
                nlohmann::json h = t.at("head");
                h["in_channels"] = c.dataset.feature_channels;
                tc.head = head_config_from_json(h);
            }
        }
        c.train.head.in_channels = c.dataset.feature_channels;
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            c.eval.k = e.value("k", c.eval.k);
            c.eval.eps = e.value("eps", c.eval.eps);
            c.embed_stride = e.value("embed_stride", c.embed_stride);
        }
        if (j.contains("anomaly")) {
            const auto& a = j.at("anomaly");
            if (a.contains("feature_kind")) c.anomaly.feature_kind = feature_kind_from_string(a.at("feature_kind").get<std::string>());
            if (a.contains("scorer")) c.anomaly.scorer = scorer_from_string(a.at("scorer").get<std::string>());
            c.anomaly.k_score = a.value("k_score", c.anomaly.k_score);
            c.anomaly.cycle_window = a.value("cycle_window", c.anomaly.cycle_window);
        }
        c.output_dir = j.value("output_dir", c.output_dir);
        if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

inline void validate(const ExperimentConfig& c) {
    if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
    if (c.dataset.train_count < 1) throw ConfigError("dataset.train_count must be >= 1");
    if (c.dataset.test_count < 2) throw ConfigError("dataset.test_count must be >= 2");
    if (!(c.dataset.anomalous_fraction >= 0.0 && c.dataset.anomalous_fraction <= 1.0))
        throw ConfigError("dataset.anomalous_fraction must be in [0, 1]");
    if (!(c.dataset.data_fraction > 0.0 && c.dataset.data_fraction <= 1.0))
        throw ConfigError("dataset.data_fraction must be in (0, 1]");
    if (c.dataset.anomaly_min_length < 1 || c.dataset.anomaly_min_length > c.dataset.anomaly_max_length ||
        c.dataset.anomaly_max_length > c.dataset.generator.num_frames)
        throw ConfigError("dataset.anomaly_min_length/anomaly_max_length must satisfy 1 <= min <= max <= num_frames");
    if (c.dataset.anomaly_kinds.empty() && c.dataset.anomalous_fraction > 0.0)
        throw ConfigError("dataset.anomaly_kinds must not be empty");
    if (c.embed_stride < 1) throw ConfigError("eval.embed_stride must be >= 1");
    if (c.eval.k < 1) throw ConfigError("eval.k must be >= 1");
    if (!(c.eval.eps > 0.0)) throw ConfigError("eval.eps must be > 0");
    GeneratorConfig g = c.dataset.generator;
    g.anomalies.clear();
    try {
        validate(g);
    } catch (const ConfigError& e) {
        // report the config path the user wrote
        std::string msg = e.what();
        if (msg.rfind("generator.", 0) == 0) msg.replace(0, 10, "dataset.");
        throw ConfigError(msg);
    }
    validate(c.train);
    validate(c.anomaly);
}

// Parses `value` as JSON when possible, otherwise as a string, and stores it
// at the dotted path (e.g. "train.miner.strategy").
inline void apply_override(nlohmann::json& j, const std::string& dotted, const std::string& value) {
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
        parsed = value;
    }
    nlohmann::json* node = &j;
    std::stringstream ss(dotted);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    if (parts.empty()) throw ConfigError("empty override key");
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object()) throw ConfigError("override '" + dotted + "' descends into a non-object");
        node = &(*node)[parts[i]];
    }
    (*node)[parts.back()] = parsed;
}

inline std::string config_hash(const ExperimentConfig& c) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(c).dump())));
    return buf;
}

// ---------------------------------------------------------------------------
// Standard synthetic benchmark
// ---------------------------------------------------------------------------
struct Benchmark {
    std::vector<FrameSequence> train;
    std::vector<FrameSequence> test;
};

// Both splits show the same process (shared shape seed). A fixed share of the
// videos in each split carries one anomaly of a kind chosen round-robin.
inline Benchmark make_benchmark(const DatasetConfig& d, std::uint64_t seed) {
    Benchmark out;
    const std::uint64_t process = mix_seed(seed, 0x50524f43ULL);
    auto make_split = [&](std::size_t count, std::uint64_t split_tag, const std::string& prefix) {
        std::vector<FrameSequence> seqs;
        Rng rng(mix_seed(seed, split_tag));
        const auto anomalous = static_cast<std::size_t>(std::llround(d.anomalous_fraction * static_cast<double>(count)));
        std::size_t kind_cursor = static_cast<std::size_t>(split_tag);
        for (std::size_t i = 0; i < count; ++i) {
            GeneratorConfig g = d.generator;
            g.process_seed = process;
            g.seed = mix_seed(seed, split_tag * 100003ULL + i);
            g.anomalies.clear();
            // anomalous videos are spread evenly over the split
            const bool has_anomaly = anomalous > 0 && (i * anomalous) / count != ((i + 1) * anomalous) / count;
            if (has_anomaly) {
                AnomalySpec a;
                a.kind = d.anomaly_kinds[kind_cursor++ % d.anomaly_kinds.size()];
                a.length = d.anomaly_min_length + rng.index(d.anomaly_max_length - d.anomaly_min_length + 1);
                a.start = rng.index(g.num_frames - a.length + 1);
                switch (a.kind) {
                    case AnomalyKind::freeze: a.magnitude = 0.0; break;
                    case AnomalyKind::phase_jump: a.magnitude = d.phase_jump_radians; break;
                    case AnomalyKind::amplitude_drop: a.magnitude = d.amplitude_drop_factor; break;
                    case AnomalyKind::period_change: a.magnitude = std::max(2.0, d.period_change_factor * g.period); break;
                }
                g.anomalies.push_back(a);
            }
            char id[32];
            std::snprintf(id, sizeof id, "%s_%03zu", prefix.c_str(), i);
            seqs.push_back(generate_sequence(g, id));
        }
        return seqs;
    };
    out.train = make_split(d.train_count, 1, "train");
    out.test = make_split(d.test_count, 2, "test");
    return out;
}

inline EncoderParams make_encoder(const DatasetConfig& d) {
    return EncoderParams::from_seed(d.generator.raw_channels, d.feature_channels, d.encoder_seed);
}

inline std::vector<FeatureSequence> encode_all(const std::vector<FrameSequence>& seqs, const EncoderParams& enc) {
    std::vector<FeatureSequence> out;
    out.reserve(seqs.size());
    for (const auto& s : seqs) out.push_back(encode(s, enc));
    return out;
}

// First ceil(fraction * n) training videos.
template <typename T>
std::vector<T> take_fraction(const std::vector<T>& v, double fraction) {
    const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(v.size()) - 1e-9));
    return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(n, 1, v.size()))};
}

inline std::vector<std::string> normal_video_ids(const std::vector<EmbeddingSequence>& videos) {
    std::vector<std::string> ids;
    for (const auto& v : videos)
        if (!has_anomaly(v.labels)) ids.push_back(v.video_id);
    return ids;
}

// Frozen-encoder features per frame: all regions flattened, L2-normalised.
inline EmbeddingSequence encoder_embeddings(const FeatureSequence& seq) {
    const std::size_t N = seq.num_frames(), W = seq.features.d1 * seq.features.d2;
    EmbeddingSequence out{seq.video_id, Matrix(N, W), 0, seq.labels};
    for (std::size_t t = 0; t < N; ++t) {
        const auto n = l2_normalize(seq.features.slab(t));
        std::copy(n.values.begin(), n.values.end(), out.embeddings.row(t).begin());
    }
    return out;
}

// Random unit vectors, one per frame.
inline EmbeddingSequence random_embeddings(const FeatureSequence& seq, std::size_t dim, std::uint64_t seed) {
    Rng rng(mix_seed(seed, fnv1a64(seq.video_id)));
    EmbeddingSequence out{seq.video_id, Matrix(seq.num_frames(), dim), 0, seq.labels};
    for (std::size_t t = 0; t < seq.num_frames(); ++t) {
        std::vector<double> v(dim);
        for (auto& x : v) x = rng.normal();
        const auto n = l2_normalize(v);
        std::copy(n.values.begin(), n.values.end(), out.embeddings.row(t).begin());
    }
    return out;
}

// ---------------------------------------------------------------------------
// One full run for one seed
// ---------------------------------------------------------------------------
struct PreparedData {
    std::vector<FeatureSequence> train;
    std::vector<FeatureSequence> test;
};

inline PreparedData prepare_data(const ExperimentConfig& cfg, std::uint64_t seed) {
    const Benchmark bench = make_benchmark(cfg.dataset, seed);
    const EncoderParams enc = make_encoder(cfg.dataset);
    return {encode_all(take_fraction(bench.train, cfg.dataset.data_fraction), enc), encode_all(bench.test, enc)};
}

inline TrainConfig train_config_for_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    TrainConfig t = cfg.train;
    t.head.in_channels = cfg.dataset.feature_channels;
    t.seed = mix_seed(seed, 0x747261696eULL);
    return t;
}

struct RunOutcome {
    TrainResult trained;
    std::vector<EmbeddingSequence> test_embeddings;
    MetricsReport knn;
};

inline RunOutcome run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const PreparedData& data) {
    const TrainConfig tc = train_config_for_seed(cfg, seed);
    RunOutcome out{train(data.train, tc), {}, {}};
    out.test_embeddings = embed_dataset(data.test, out.trained.params, tc.head, tc.embed_chunk, cfg.embed_stride);
    out.knn = evaluate_knn(out.test_embeddings, cfg.eval.k, cfg.eval.eps);
    return out;
}

inline RunOutcome run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    return run_seed(cfg, seed, prepare_data(cfg, seed));
}

inline MetricsReport baseline_knn(const ExperimentConfig& cfg, const PreparedData& data) {
    std::vector<EmbeddingSequence> e;
    for (const auto& s : data.test) e.push_back(encoder_embeddings(s));
    return evaluate_knn(e, cfg.eval.k, cfg.eval.eps);
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------
enum class AblationAxis { sampling_strategy, augment_mode, sequence_length, output_dim, head_variant, l2norm, data_fraction };

inline std::string_view to_string(AblationAxis a) {
    switch (a) {
        case AblationAxis::sampling_strategy: return "sampling_strategy";
        case AblationAxis::augment_mode: return "augment_mode";
        case AblationAxis::sequence_length: return "sequence_length";
        case AblationAxis::output_dim: return "output_dim";
        case AblationAxis::head_variant: return "head_variant";
        case AblationAxis::l2norm: return "l2norm";
        case AblationAxis::data_fraction: return "data_fraction";
    }
    return "?";
}

inline AblationAxis ablation_axis_from_string(std::string_view s) {
    for (auto a : {AblationAxis::sampling_strategy, AblationAxis::augment_mode, AblationAxis::sequence_length,
                   AblationAxis::output_dim, AblationAxis::head_variant, AblationAxis::l2norm, AblationAxis::data_fraction})
        if (to_string(a) == s) return a;
    throw ConfigError("unknown ablation axis '" + std::string(s) + "'");
}

struct AblationGrid {
    AblationAxis axis = AblationAxis::sampling_strategy;
    std::vector<std::string> values;
};

inline std::vector<std::string> default_values(AblationAxis a) {
    switch (a) {
        case AblationAxis::sampling_strategy: return {"mean_threshold", "topk", "adjacent"};
        case AblationAxis::augment_mode: return {"all", "positives_only", "none"};
        case AblationAxis::sequence_length: return {"10", "25", "50", "100", "200"};
        case AblationAxis::output_dim: return {"8", "16", "32"};
        case AblationAxis::head_variant: return {"k1_mean", "k1_max", "k3_mean", "k3_max"};
        case AblationAxis::l2norm: return {"on", "off"};
        case AblationAxis::data_fraction: return {"0.1", "0.5", "1.0"};
    }
    return {};
}

// The experiment config with one axis set to `value`.
inline ExperimentConfig apply_ablation(ExperimentConfig cfg, AblationAxis axis, const std::string& value) {
    auto as_size = [&](const std::string& v) {
        std::size_t pos = 0;
        const unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size()) throw ConfigError("ablation value '" + v + "' is not an integer");
        return static_cast<std::size_t>(x);
    };
    try {
        switch (axis) {
            case AblationAxis::sampling_strategy: cfg.train.miner.strategy = mining_strategy_from_string(value); break;
            case AblationAxis::augment_mode: cfg.train.augment.mode = augment_mode_from_string(value); break;
            case AblationAxis::sequence_length: {
                // clip length and batch size trade off at a fixed frame budget
                const std::size_t budget = cfg.train.clip_length * cfg.train.batch_clips;
                cfg.train.clip_length = as_size(value);
                cfg.train.batch_clips = std::max<std::size_t>(1, budget / std::max<std::size_t>(1, cfg.train.clip_length));
                break;
            }
            case AblationAxis::output_dim: cfg.train.head.out_dim = as_size(value); break;
            case AblationAxis::head_variant: {
                if (value.size() < 4 || value[0] != 'k') throw ConfigError("head_variant must look like k3_max");
                const auto sep = value.find('_');
                if (sep == std::string::npos) throw ConfigError("head_variant must look like k3_max");
                cfg.train.head.kernel_size = as_size(value.substr(1, sep - 1));
                cfg.train.head.pooling = pooling_from_string(value.substr(sep + 1));
                break;
            }
            case AblationAxis::l2norm:
                if (value != "on" && value != "off") throw ConfigError("l2norm must be on or off");
                cfg.train.head.use_l2norm = value == "on";
                break;
            case AblationAxis::data_fraction: cfg.dataset.data_fraction = std::stod(value); break;
        }
    } catch (const std::invalid_argument&) {
        throw ConfigError("ablation value '" + value + "' is not valid for " + std::string(to_string(axis)));
    }
    validate(cfg);
    return cfg;
}

struct AblationCell {
    std::string value;
    std::uint64_t seed = 0;
    double ap = 0.0;
    double f1 = 0.0;
    double oracle_f1 = 0.0;
    std::string status = "ok";
};

// Runs `fn(i)` for i in [0, n) on a small worker pool; each index is handled
// by exactly one worker and results are written to caller-owned slots.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t workers = 0) {
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    for (auto& t : pool) t.join();
}

// Runs every (value, seed) cell. When `cell_root` is set each cell writes its
// metrics to <cell_root>/<value>/seed_<seed>/metrics.json; a failing cell is
// recorded and the grid continues.
inline std::vector<AblationCell> run_ablation(const ExperimentConfig& base, const AblationGrid& grid,
                                              std::size_t workers = 0,
                                              const std::optional<std::filesystem::path>& cell_root = std::nullopt) {
    std::vector<AblationCell> cells;
    for (const auto& v : grid.values)
        for (auto s : base.seeds) cells.push_back({v, s});
    parallel_for(
        cells.size(),
        [&](std::size_t i) {
            AblationCell& cell = cells[i];
            try {
                const ExperimentConfig cfg = apply_ablation(base, grid.axis, cell.value);
                const RunOutcome r = run_seed(cfg, cell.seed);
                cell.ap = r.knn.ap;
                cell.f1 = r.knn.f1.value_or(0.0);
                cell.oracle_f1 = r.knn.oracle_f1;
                if (cell_root) {
                    const auto dir = *cell_root / cell.value / ("seed_" + std::to_string(cell.seed));
                    std::filesystem::create_directories(dir);
                    std::ofstream(dir / "metrics.json", std::ios::binary) << to_json(r.knn).dump(2) << '\n';
                }
            } catch (const std::exception& e) {
                cell.status = std::string("error: ") + e.what();
            }
        },
        workers);
    return cells;
}

inline void write_ablation_csv(const std::filesystem::path& path, AblationAxis axis, const std::vector<AblationCell>& cells) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << "axis,value,seed,ap,f1,oracle_f1,status\n";
    char buf[96];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f", c.ap, c.f1, c.oracle_f1);
        std::string status = c.status;
        std::replace(status.begin(), status.end(), ',', ';');
        f << to_string(axis) << ',' << c.value << ',' << c.seed << ',' << buf << ',' << status << '\n';
    }
}

inline double median(std::vector<double> v) {
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// ---------------------------------------------------------------------------
// Embedding files: video_id,frame,label,e0,...,e{D-1}
// ---------------------------------------------------------------------------
inline void save_embeddings_csv(const std::filesystem::path& path, const std::vector<EmbeddingSequence>& seqs) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    char buf[40];
    for (const auto& s : seqs)
        for (std::size_t t = 0; t < s.size(); ++t) {
            f << s.video_id << ',' << s.clip_offset + t << ',' << (is_anomalous(s.labels[t]) ? 1 : 0);
            for (double v : s.embeddings.row(t)) {
                std::snprintf(buf, sizeof buf, "%.17g", v);
                f << ',' << buf;
            }
            f << '\n';
        }
}

inline std::vector<EmbeddingSequence> load_embeddings_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw MissingArtifact("embeddings not found: " + path.string());
    std::vector<EmbeddingSequence> out;
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineno = 0;
    auto flush = [&] {
        if (out.empty() || rows.empty()) return;
        Matrix m(rows.size(), rows[0].size());
        for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
        out.back().embeddings = std::move(m);
        rows.clear();
    };
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string id, frame, label, cell;
        if (!std::getline(ss, id, ',') || !std::getline(ss, frame, ',') || !std::getline(ss, label, ','))
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
        if (out.empty() || out.back().video_id != id) {
            flush();
            out.push_back({id, {}, 0, {}});
        }
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        if (!rows.empty() && row.size() != rows[0].size())
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": inconsistent embedding width");
        rows.push_back(std::move(row));
        out.back().labels.push_back(label == "1" ? FrameLabel::non_periodic : FrameLabel::periodic);
    }
    flush();
    return out;
}

struct AblationSummary {
    std::string value;
    std::size_t runs = 0;
    double f1_median = 0.0, f1_min = 0.0, f1_max = 0.0;
    double ap_median = 0.0, ap_min = 0.0, ap_max = 0.0;
};

// Median and range over seeds per value; failed cells are left out.
inline std::vector<AblationSummary> summarize(const std::vector<AblationCell>& cells) {
    std::vector<AblationSummary> out;
    for (const auto& c : cells) {
        if (std::none_of(out.begin(), out.end(), [&](const auto& s) { return s.value == c.value; }))
            out.push_back({c.value});
    }
    for (auto& s : out) {
        std::vector<double> f1, ap;
        for (const auto& c : cells)
            if (c.value == s.value && c.status == "ok") {
                f1.push_back(c.f1);
                ap.push_back(c.ap);
            }
        s.runs = f1.size();
        if (f1.empty()) continue;
        s.f1_median = median(f1);
        s.ap_median = median(ap);
        s.f1_min = *std::min_element(f1.begin(), f1.end());
        s.f1_max = *std::max_element(f1.begin(), f1.end());
        s.ap_min = *std::min_element(ap.begin(), ap.end());
        s.ap_max = *std::max_element(ap.begin(), ap.end());
    }
    return out;
}

inline void write_ablation_summary_csv(const std::filesystem::path& path, AblationAxis axis,
                                       const std::vector<AblationSummary>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << "axis,value,runs,f1_median,f1_min,f1_max,ap_median,ap_min,ap_max\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", r.runs, r.f1_median, r.f1_min, r.f1_max,
                      r.ap_median, r.ap_min, r.ap_max);
        f << to_string(axis) << ',' << r.value << ',' << buf << '\n';
    }
}

// ---------------------------------------------------------------------------
// Period recovery
// ---------------------------------------------------------------------------

// Index of the largest-magnitude DFT bin in [1, n/2] (mean removed); ties go
// to the lower bin.
inline std::size_t dominant_dft_bin(std::span<const double> x) {
    const std::size_t n = x.size();
    if (n < 4) throw DimensionError("dominant_dft_bin: need at least 4 samples");
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    std::size_t best = 1;
    double best_mag = -1.0;
    for (std::size_t k = 1; k <= n / 2; ++k) {
        double re = 0.0, im = 0.0;
        for (std::size_t t = 0; t < n; ++t) {
            const double a = 2.0 * std::numbers::pi * static_cast<double>((k * t) % n) / static_cast<double>(n);
            re += (x[t] - mean) * std::cos(a);
            im -= (x[t] - mean) * std::sin(a);
        }
        const double mag = re * re + im * im;
        if (mag > best_mag) {
            best_mag = mag;
            best = k;
        }
    }
    return best;
}

struct PeriodEstimate {
    std::size_t autocorr_lag = 0;
    std::size_t pca_bin = 0;
    bool lag_ok = false;
    bool bin_ok = false;
};

// Autocorrelation argmax over lags [P/2, 3P/2] should land within one frame
// of P, and the 1-D PCA trace's strongest frequency within one bin of N/P.
inline PeriodEstimate estimate_period(const Matrix& embeddings, double period, const PcaOptions& opt = {}) {
    const std::size_t N = embeddings.rows;
    const auto lo = static_cast<std::size_t>(std::floor(period / 2.0));
    const auto hi = static_cast<std::size_t>(std::ceil(1.5 * period));
    if (hi >= N) throw DimensionError("estimate_period: sequence shorter than 1.5 periods");
    PeriodEstimate e;
    const Matrix unit = unit_rows(embeddings);
    const auto r = autocorrelation(unit, hi);
    e.autocorr_lag = dominant_lag(r, lo, hi);
    e.lag_ok = std::abs(static_cast<double>(e.autocorr_lag) - period) <= 1.0;
    const auto pca = pca_project_1d(embeddings, opt);
    e.pca_bin = dominant_dft_bin(pca.projection);
    e.bin_ok = std::abs(static_cast<double>(e.pca_bin) - static_cast<double>(N) / period) <= 1.0;
    return e;
}

// ---------------------------------------------------------------------------
// Anomaly runs on a test split
// ---------------------------------------------------------------------------

// Reference videos for nn_distance are the anomaly-free test videos.
inline AnomalyRun run_anomaly(const std::vector<EmbeddingSequence>& test, const AnomalyConfig& cfg) {
    return run_anomaly_pipeline(test, cfg, normal_video_ids(test));
}

}  // namespace cyclecl
