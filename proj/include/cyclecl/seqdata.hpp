// Synthetic periodic sequences, the frozen feature encoder and the on-disk
// dataset format.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cyclecl/core.hpp"

namespace cyclecl {

enum class AnomalyKind { freeze, phase_jump, amplitude_drop, period_change };

inline std::string_view to_string(AnomalyKind k) {
    switch (k) {
        case AnomalyKind::freeze: return "freeze";
        case AnomalyKind::phase_jump: return "phase_jump";
        case AnomalyKind::amplitude_drop: return "amplitude_drop";
        case AnomalyKind::period_change: return "period_change";
    }
    return "?";
}

inline AnomalyKind anomaly_kind_from_string(std::string_view s) {
    if (s == "freeze") return AnomalyKind::freeze;
    if (s == "phase_jump") return AnomalyKind::phase_jump;
    if (s == "amplitude_drop") return AnomalyKind::amplitude_drop;
    if (s == "period_change") return AnomalyKind::period_change;
    throw ConfigError("unknown anomaly kind '" + std::string(s) + "'");
}

// magnitude meaning per kind:
//   freeze          unused
//   phase_jump      maximum per-frame phase excursion in radians, (0, 2pi]
//   amplitude_drop  remaining amplitude factor in [0, 1]
//   period_change   period in frames during the interval, >= 2
struct AnomalySpec {
    AnomalyKind kind = AnomalyKind::freeze;
    std::size_t start = 0;
    std::size_t length = 0;
    double magnitude = 0.0;

    bool contains(std::size_t t) const { return t >= start && t < start + length; }
    bool operator==(const AnomalySpec&) const = default;
};

struct GeneratorConfig {
    std::size_t num_frames = 400;
    double period = 20.0;
    std::size_t num_regions = 8;
    std::size_t raw_channels = 6;
    std::size_t num_periodic_regions = 5;
    std::size_t harmonics = 3;
    double noise_sigma = 0.05;
    std::vector<AnomalySpec> anomalies;
    // Per-video randomness: phase offset, observation noise, phase jitter.
    std::uint64_t seed = 0;
    // Shape of the observed process (harmonic coefficients and background
    // levels). Sequences sharing it show the same machine.
    std::uint64_t process_seed = 0;
};

inline void validate(const GeneratorConfig& cfg) {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError("generator." + field + ": " + why);
    };
    if (cfg.num_frames < 1) fail("num_frames", "must be >= 1");
    if (!(cfg.period >= 2.0) || !std::isfinite(cfg.period)) fail("period", "must be >= 2");
    if (cfg.num_regions < 1) fail("num_regions", "must be >= 1");
    if (cfg.raw_channels < 1) fail("raw_channels", "must be >= 1");
    if (cfg.num_periodic_regions < 1 || cfg.num_periodic_regions > cfg.num_regions)
        fail("num_periodic_regions", "must be in [1, num_regions]");
    if (cfg.harmonics < 1) fail("harmonics", "must be >= 1");
    if (!(cfg.noise_sigma >= 0.0) || !std::isfinite(cfg.noise_sigma)) fail("noise_sigma", "must be >= 0");

    std::vector<const AnomalySpec*> sorted;
    for (const auto& a : cfg.anomalies) {
        if (a.length < 1) fail("anomalies", "length must be >= 1");
        if (a.start + a.length > cfg.num_frames) fail("anomalies", "interval exceeds num_frames");
        if (!std::isfinite(a.magnitude)) fail("anomalies", "magnitude must be finite");
        switch (a.kind) {
            case AnomalyKind::freeze: break;
            case AnomalyKind::phase_jump:
                if (!(a.magnitude > 0.0 && a.magnitude <= 2.0 * std::numbers::pi))
                    fail("anomalies", "phase_jump magnitude must be in (0, 2pi]");
                break;
            case AnomalyKind::amplitude_drop:
                if (!(a.magnitude >= 0.0 && a.magnitude <= 1.0))
                    fail("anomalies", "amplitude_drop magnitude must be in [0, 1]");
                break;
            case AnomalyKind::period_change:
                if (!(a.magnitude >= 2.0)) fail("anomalies", "period_change magnitude must be >= 2");
                break;
        }
        sorted.push_back(&a);
    }
    std::sort(sorted.begin(), sorted.end(), [](auto* x, auto* y) { return x->start < y->start; });
    for (std::size_t i = 1; i < sorted.size(); ++i)
        if (sorted[i]->start < sorted[i - 1]->start + sorted[i - 1]->length)
            fail("anomalies", "intervals overlap");
}

// One "video": frames (time x region x raw channel) plus per-frame labels.
struct FrameSequence {
    std::string video_id;
    Tensor3<float> frames;
    std::vector<FrameLabel> labels;
    double period = 0.0;
    std::uint64_t seed = 0;

    std::size_t num_frames() const { return frames.d0; }
    std::size_t num_regions() const { return frames.d1; }
    std::size_t raw_channels() const { return frames.d2; }
    bool operator==(const FrameSequence&) const = default;
};

inline bool has_anomaly(const std::vector<FrameLabel>& labels) {
    return std::any_of(labels.begin(), labels.end(), is_anomalous);
}

namespace detail {

struct ProcessShape {
    // coef[((s * harmonics + k) * channels + c) * 2 + {0: cos, 1: sin}]
    std::vector<double> coef;
    std::vector<double> level;  // region x channel
};

inline ProcessShape make_process(const GeneratorConfig& cfg) {
    Rng rng(mix_seed(cfg.process_seed, 0x70726f63ULL));
    ProcessShape shape;
    const std::size_t S = cfg.num_regions, C = cfg.raw_channels, K = cfg.harmonics;
    shape.coef.resize(S * K * C * 2);
    shape.level.resize(S * C);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t c = 0; c < C; ++c)
                for (int q = 0; q < 2; ++q)
                    shape.coef[((s * K + k) * C + c) * 2 + q] = rng.normal() / static_cast<double>(k + 1);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t c = 0; c < C; ++c)
            shape.level[s * C + c] = s < cfg.num_periodic_regions ? rng.normal(0.0, 0.3) : rng.uniform(-1.0, 1.0);
    return shape;
}

}  // namespace detail

// Periodic regions follow a fixed K-harmonic function of the phase; the
// remaining regions are constant background. All regions receive i.i.d.
// Gaussian noise. Values are stored in single precision.
inline FrameSequence generate_sequence(const GeneratorConfig& cfg, std::string video_id = {}) {
    validate(cfg);
    const std::size_t N = cfg.num_frames, S = cfg.num_regions, C = cfg.raw_channels, K = cfg.harmonics;
    const detail::ProcessShape shape = detail::make_process(cfg);
    Rng rng(mix_seed(cfg.seed, 0x76696465ULL));

    const double phase0 = rng.uniform();  // in cycles
    const double two_pi = 2.0 * std::numbers::pi;

    auto find_anomaly = [&](std::size_t t, AnomalyKind kind) -> const AnomalySpec* {
        for (const auto& a : cfg.anomalies)
            if (a.kind == kind && a.contains(t)) return &a;
        return nullptr;
    };

    FrameSequence seq;
    seq.video_id = video_id.empty() ? "seq_" + std::to_string(cfg.seed) : std::move(video_id);
    seq.frames = Tensor3<float>(N, S, C);
    seq.labels.assign(N, FrameLabel::periodic);
    seq.period = cfg.period;
    seq.seed = cfg.seed;

    // The process clock counts frames of normal progress; it stays
    // integer-valued outside period changes so zero-noise frames repeat exactly.
    double clock = 0.0;
    std::vector<double> cos_k(K), sin_k(K);
    for (std::size_t t = 0; t < N; ++t) {
        if (t > 0) {
            double advance = 1.0;
            if (const auto* a = find_anomaly(t, AnomalyKind::freeze); a && t > a->start) advance = 0.0;
            if (const auto* a = find_anomaly(t, AnomalyKind::period_change); a && t > a->start)
                advance = cfg.period / a->magnitude;
            clock += advance;
        }
        double phase = two_pi * (phase0 + std::fmod(clock, cfg.period) / cfg.period);
        if (const auto* a = find_anomaly(t, AnomalyKind::phase_jump)) phase += rng.uniform(-a->magnitude, a->magnitude);
        double amplitude = 1.0;
        if (const auto* a = find_anomaly(t, AnomalyKind::amplitude_drop)) amplitude = a->magnitude;

        for (std::size_t k = 0; k < K; ++k) {
            cos_k[k] = std::cos(static_cast<double>(k + 1) * phase);
            sin_k[k] = std::sin(static_cast<double>(k + 1) * phase);
        }
        for (std::size_t s = 0; s < S; ++s) {
            const bool periodic = s < cfg.num_periodic_regions;
            for (std::size_t c = 0; c < C; ++c) {
                double v = shape.level[s * C + c];
                if (periodic) {
                    double wave = 0.0;
                    for (std::size_t k = 0; k < K; ++k) {
                        const double* ab = &shape.coef[((s * K + k) * C + c) * 2];
                        wave += ab[0] * cos_k[k] + ab[1] * sin_k[k];
                    }
                    v += amplitude * wave;
                }
                if (cfg.noise_sigma > 0.0) v += rng.normal(0.0, cfg.noise_sigma);
                seq.frames(t, s, c) = static_cast<float>(v);
            }
        }
    }
    for (const auto& a : cfg.anomalies)
        for (std::size_t t = a.start; t < a.start + a.length; ++t) seq.labels[t] = FrameLabel::non_periodic;
    return seq;
}

// ---------------------------------------------------------------------------
// Frozen encoder: per region, tanh(values . projection + bias)
// ---------------------------------------------------------------------------
class EncoderParams {
public:
    EncoderParams(Matrix projection, std::vector<double> bias, std::uint64_t seed = 0)
        : projection_(std::move(projection)), bias_(std::move(bias)), seed_(seed) {
        if (bias_.size() != projection_.cols)
            throw DimensionError("encoder bias length must equal projection columns");
    }

    static EncoderParams from_seed(std::size_t raw_channels, std::size_t channels, std::uint64_t seed) {
        Rng rng(mix_seed(seed, 0x656e63ULL));
        Matrix w(raw_channels, channels);
        const double scale = 1.0 / std::sqrt(static_cast<double>(raw_channels));
        for (auto& v : w.data) v = rng.normal(0.0, scale);
        std::vector<double> b(channels);
        for (auto& v : b) v = rng.normal(0.0, 0.1);
        return EncoderParams(std::move(w), std::move(b), seed);
    }

    const Matrix& projection() const { return projection_; }
    const std::vector<double>& bias() const { return bias_; }
    std::uint64_t seed() const { return seed_; }
    std::size_t in_channels() const { return projection_.rows; }
    std::size_t out_channels() const { return projection_.cols; }

private:
    Matrix projection_;
    std::vector<double> bias_;
    std::uint64_t seed_;
};

struct FeatureSequence {
    std::string video_id;
    Tensor3<double> features;  // time x region x channel
    std::vector<FrameLabel> labels;
    double period = 0.0;
    std::uint64_t seed = 0;

    std::size_t num_frames() const { return features.d0; }
    bool operator==(const FeatureSequence&) const = default;
};

inline FeatureSequence encode(const FrameSequence& seq, const EncoderParams& enc) {
    if (seq.raw_channels() != enc.in_channels())
        throw DimensionError("encode: frame has " + std::to_string(seq.raw_channels()) +
                             " channels, encoder expects " + std::to_string(enc.in_channels()));
    const std::size_t N = seq.num_frames(), S = seq.num_regions(), Cin = enc.in_channels(),
                      Cout = enc.out_channels();
    FeatureSequence out{seq.video_id, Tensor3<double>(N, S, Cout), seq.labels, seq.period, seq.seed};
    const Matrix& w = enc.projection();
    for (std::size_t t = 0; t < N; ++t)
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t o = 0; o < Cout; ++o) {
                double z = enc.bias()[o];
                for (std::size_t i = 0; i < Cin; ++i) z += static_cast<double>(seq.frames(t, s, i)) * w(i, o);
                out.features(t, s, o) = std::tanh(z);
            }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json + <id>.frames.csv + <id>.labels.csv
// ---------------------------------------------------------------------------
inline constexpr int kDatasetVersion = 1;

inline void save_dataset(const std::vector<FrameSequence>& sequences, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["version"] = kDatasetVersion;
    manifest["sequences"] = nlohmann::json::array();
    char buf[32];
    for (const auto& seq : sequences) {
        const std::string frames_file = seq.video_id + ".frames.csv";
        const std::string labels_file = seq.video_id + ".labels.csv";
        {
            std::ofstream f(dir / frames_file, std::ios::binary);
            if (!f) throw Error("cannot write " + (dir / frames_file).string());
            const std::size_t width = seq.num_regions() * seq.raw_channels();
            for (std::size_t t = 0; t < seq.num_frames(); ++t) {
                auto slab = seq.frames.slab(t);
                for (std::size_t i = 0; i < width; ++i) {
                    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(slab[i]));
                    if (i) f << ',';
                    f << buf;
                }
                f << '\n';
            }
        }
        {
            std::ofstream f(dir / labels_file, std::ios::binary);
            if (!f) throw Error("cannot write " + (dir / labels_file).string());
            for (auto l : seq.labels) f << (is_anomalous(l) ? '1' : '0') << '\n';
        }
        manifest["sequences"].push_back({{"video_id", seq.video_id},
                                         {"frames_file", frames_file},
                                         {"labels_file", labels_file},
                                         {"num_frames", seq.num_frames()},
                                         {"num_regions", seq.num_regions()},
                                         {"raw_channels", seq.raw_channels()},
                                         {"period", seq.period},
                                         {"seed", seq.seed}});
    }
    std::ofstream m(dir / "manifest.json", std::ios::binary);
    m << manifest.dump(2) << '\n';
}

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw ParseError(p.string() + ": cannot open file");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
    }
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    return lines;
}

}  // namespace detail

inline std::vector<FrameSequence> load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw ParseError(dir.string() + ": dataset directory does not exist");
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) {
        if (fs::is_empty(dir)) {
            std::cerr << "warning: " << dir.string() << " is empty; loading an empty dataset\n";
            return {};
        }
        throw ParseError(manifest_path.string() + ": missing manifest");
    }

    nlohmann::json manifest;
    try {
        std::ifstream f(manifest_path);
        manifest = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(manifest_path.string() + ": " + e.what());
    }

    std::vector<FrameSequence> out;
    try {
        for (const auto& entry : manifest.at("sequences")) {
            FrameSequence seq;
            seq.video_id = entry.at("video_id").get<std::string>();
            seq.period = entry.at("period").get<double>();
            seq.seed = entry.at("seed").get<std::uint64_t>();
            const auto N = entry.at("num_frames").get<std::size_t>();
            const auto S = entry.at("num_regions").get<std::size_t>();
            const auto C = entry.at("raw_channels").get<std::size_t>();
            const fs::path frames_path = dir / entry.at("frames_file").get<std::string>();
            const fs::path labels_path = dir / entry.at("labels_file").get<std::string>();
            if (!fs::exists(frames_path)) throw ParseError(frames_path.string() + ": listed in manifest but missing");
            if (!fs::exists(labels_path)) throw ParseError(labels_path.string() + ": listed in manifest but missing");

            const auto frame_lines = detail::read_lines(frames_path);
            if (frame_lines.size() != N)
                throw ParseError(frames_path.string() + ": expected " + std::to_string(N) + " rows, found " +
                                 std::to_string(frame_lines.size()));
            seq.frames = Tensor3<float>(N, S, C);
            for (std::size_t t = 0; t < N; ++t) {
                const std::string& line = frame_lines[t];
                const std::string where = frames_path.string() + ":" + std::to_string(t + 1);
                auto slab = seq.frames.slab(t);
                const char* p = line.data();
                const char* end = line.data() + line.size();
                for (std::size_t i = 0; i < S * C; ++i) {
                    if (i) {
                        if (p == end || *p != ',') throw ParseError(where + ": expected " + std::to_string(S * C) + " columns");
                        ++p;
                    }
                    float v = 0.0f;
                    auto [next, ec] = std::from_chars(p, end, v);
                    if (ec != std::errc{}) throw ParseError(where + ": malformed value in column " + std::to_string(i + 1));
                    if (!std::isfinite(v)) throw ParseError(where + ": non-finite value");
                    slab[i] = v;
                    p = next;
                }
                if (p != end) throw ParseError(where + ": trailing data");
            }

            const auto label_lines = detail::read_lines(labels_path);
            if (label_lines.size() != N)
                throw ParseError(labels_path.string() + ": label count " + std::to_string(label_lines.size()) +
                                 " does not match frame count " + std::to_string(N));
            seq.labels.reserve(N);
            for (std::size_t t = 0; t < N; ++t) {
                if (label_lines[t] == "0") seq.labels.push_back(FrameLabel::periodic);
                else if (label_lines[t] == "1") seq.labels.push_back(FrameLabel::non_periodic);
                else throw ParseError(labels_path.string() + ":" + std::to_string(t + 1) + ": label must be 0 or 1");
            }
            out.push_back(std::move(seq));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(manifest_path.string() + ": " + e.what());
    }
    return out;
}

}  // namespace cyclecl
