// Projection head: temporal convolution -> batch norm -> leaky ReLU -> region
// pooling -> linear -> L2 normalisation, with hand-derived gradients and Adam.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cyclecl/core.hpp"

namespace cyclecl {

enum class Pooling { max, mean };
enum class Mode { train, eval };

inline std::string_view to_string(Pooling p) { return p == Pooling::max ? "max" : "mean"; }

inline Pooling pooling_from_string(std::string_view s) {
    if (s == "max") return Pooling::max;
    if (s == "mean") return Pooling::mean;
    throw ConfigError("head.pooling: unknown pooling '" + std::string(s) + "'");
}

struct HeadConfig {
    std::size_t in_channels = 12;
    std::size_t hidden_channels = 32;
    std::size_t out_dim = 16;
    std::size_t kernel_size = 3;  // temporal; 1 disables temporal context
    Pooling pooling = Pooling::mean;
    double leaky_slope = 0.1;
    bool use_batchnorm = true;
    bool use_l2norm = true;
    double bn_momentum = 0.9;  // fraction of the old running statistic kept
    double bn_eps = 1e-5;

    // Zero padding that keeps the temporal length unchanged.
    std::size_t padding() const { return (kernel_size - 1) / 2; }
};

inline void validate(const HeadConfig& cfg) {
    if (cfg.in_channels < 1) throw ConfigError("head.in_channels must be >= 1");
    if (cfg.hidden_channels < 1) throw ConfigError("head.hidden_channels must be >= 1");
    if (cfg.out_dim < 2) throw ConfigError("head.out_dim must be >= 2");
    if (cfg.kernel_size < 1 || cfg.kernel_size % 2 == 0) throw ConfigError("head.kernel_size must be odd");
    if (!(cfg.leaky_slope >= 0.0)) throw ConfigError("head.leaky_slope must be >= 0");
    if (!(cfg.bn_momentum >= 0.0 && cfg.bn_momentum < 1.0)) throw ConfigError("head.bn_momentum must be in [0, 1)");
    if (!(cfg.bn_eps > 0.0)) throw ConfigError("head.bn_eps must be > 0");
}

// Trainable tensors. Also used for gradients and Adam moments.
struct ParamSet {
    std::vector<double> conv_w;  // kernel x in_channels x hidden
    std::vector<double> conv_b;  // hidden
    std::vector<double> bn_gamma;
    std::vector<double> bn_beta;
    std::vector<double> fc_w;  // hidden x out_dim
    std::vector<double> fc_b;  // out_dim

    static ParamSet zeros(const HeadConfig& cfg) {
        const std::size_t K = cfg.kernel_size, C = cfg.in_channels, H = cfg.hidden_channels, D = cfg.out_dim;
        return ParamSet{std::vector<double>(K * C * H), std::vector<double>(H), std::vector<double>(H),
                        std::vector<double>(H),         std::vector<double>(H * D), std::vector<double>(D)};
    }

    bool operator==(const ParamSet&) const = default;
};

using HeadGrads = ParamSet;

struct ParamTensorInfo {
    std::string_view name;
    std::vector<double> ParamSet::*member;
};

inline constexpr std::array<ParamTensorInfo, 6> kParamTensors{{
    {"conv_w", &ParamSet::conv_w},
    {"conv_b", &ParamSet::conv_b},
    {"bn_gamma", &ParamSet::bn_gamma},
    {"bn_beta", &ParamSet::bn_beta},
    {"fc_w", &ParamSet::fc_w},
    {"fc_b", &ParamSet::fc_b},
}};

inline std::vector<std::size_t> param_shape(std::string_view name, const HeadConfig& cfg) {
    if (name == "conv_w") return {cfg.kernel_size, cfg.in_channels, cfg.hidden_channels};
    if (name == "fc_w") return {cfg.hidden_channels, cfg.out_dim};
    if (name == "fc_b") return {cfg.out_dim};
    return {cfg.hidden_channels};
}

struct HeadParams {
    ParamSet weights;
    std::vector<double> bn_running_mean;
    std::vector<double> bn_running_var;

    static HeadParams init(const HeadConfig& cfg, std::uint64_t seed) {
        validate(cfg);
        HeadParams p{ParamSet::zeros(cfg), std::vector<double>(cfg.hidden_channels, 0.0),
                     std::vector<double>(cfg.hidden_channels, 1.0)};
        Rng rng(mix_seed(seed, 0x68656164ULL));
        const double conv_scale = std::sqrt(2.0 / static_cast<double>(cfg.kernel_size * cfg.in_channels));
        for (auto& w : p.weights.conv_w) w = rng.normal(0.0, conv_scale);
        const double fc_scale = std::sqrt(1.0 / static_cast<double>(cfg.hidden_channels));
        for (auto& w : p.weights.fc_w) w = rng.normal(0.0, fc_scale);
        // Pooled activations share a large positive offset (leaky ReLU, then
        // pooling over regions). Zero-sum fc columns keep that common mode from
        // becoming one shared embedding direction at initialisation.
        const std::size_t H = cfg.hidden_channels, D = cfg.out_dim;
        for (std::size_t d = 0; d < D; ++d) {
            double mean = 0.0;
            for (std::size_t h = 0; h < H; ++h) mean += p.weights.fc_w[h * D + d];
            mean /= static_cast<double>(H);
            for (std::size_t h = 0; h < H; ++h) p.weights.fc_w[h * D + d] -= mean;
        }
        std::fill(p.weights.bn_gamma.begin(), p.weights.bn_gamma.end(), 1.0);
        return p;
    }

    bool operator==(const HeadParams&) const = default;
};

inline void check_shapes(const HeadParams& p, const HeadConfig& cfg) {
    const ParamSet ref = ParamSet::zeros(cfg);
    for (const auto& info : kParamTensors)
        if ((p.weights.*info.member).size() != (ref.*info.member).size())
            throw ContractError("head parameter '" + std::string(info.name) + "' does not match the head config");
    if (p.bn_running_mean.size() != cfg.hidden_channels || p.bn_running_var.size() != cfg.hidden_channels)
        throw ContractError("head running statistics do not match the head config");
}

// Per-frame embeddings of one sequence (or clip). Labels travel along so the
// evaluation code never has to re-join them.
struct EmbeddingSequence {
    std::string video_id;
    Matrix embeddings;  // frames x out_dim
    std::size_t clip_offset = 0;
    std::vector<FrameLabel> labels;

    std::size_t size() const { return embeddings.rows; }
    bool operator==(const EmbeddingSequence&) const = default;
};

// ---------------------------------------------------------------------------
// L2 normalisation
// ---------------------------------------------------------------------------
inline constexpr double kNormFloor = 1e-12;

struct NormalizedVector {
    std::vector<double> values;
    bool degenerate = false;
};

inline NormalizedVector l2_normalize(std::span<const double> x) {
    const double n = norm2(x);
    NormalizedVector out{std::vector<double>(x.size(), 0.0), false};
    if (!(n > kNormFloor)) {
        out.degenerate = true;
        return out;
    }
    for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x[i] / n;
    return out;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------
using Clip = Tensor3<double>;  // time x region x channel

// Every intermediate of one forward pass over a batch of clips. Positions are
// (clip, time, region) flattened in that order; frames are (clip, time).
struct ForwardCache {
    Mode mode = Mode::eval;
    std::size_t regions = 0;
    std::vector<std::size_t> lengths;
    std::vector<std::size_t> frame_offsets;
    std::vector<Clip> inputs;

    std::vector<double> conv_out;   // positions x H
    std::vector<double> normed;     // positions x H (x-hat, or conv_out when BN is off)
    std::vector<double> pre_act;    // positions x H
    std::vector<double> pooled;     // frames x H
    std::vector<std::uint32_t> argmax_region;  // frames x H
    std::vector<double> fc_out;     // frames x D
    std::vector<double> norms;      // frames
    std::vector<double> embeddings; // frames x D
    std::vector<char> degenerate;   // frames

    std::vector<double> batch_mean;
    std::vector<double> batch_var;  // biased
    std::vector<double> inv_std;

    std::size_t num_frames() const { return norms.size(); }
    std::size_t num_positions() const { return num_frames() * regions; }
};

struct ForwardResult {
    std::vector<Matrix> embeddings;  // one (time x out_dim) matrix per clip
    std::vector<std::vector<char>> degenerate;
    ForwardCache cache;
};

inline ForwardResult head_forward(std::span<const Clip> clips, const HeadParams& params, const HeadConfig& cfg,
                                  Mode mode) {
    validate(cfg);
    check_shapes(params, cfg);
    if (clips.empty()) throw DimensionError("head_forward: empty batch");
    const std::size_t S = clips[0].d1, C = cfg.in_channels, H = cfg.hidden_channels, D = cfg.out_dim,
                      K = cfg.kernel_size, pad = cfg.padding();

    ForwardCache cache;
    cache.mode = mode;
    cache.regions = S;
    std::size_t frames = 0;
    for (const auto& clip : clips) {
        if (clip.d0 == 0) throw DimensionError("head_forward: clip with zero frames");
        if (clip.d1 != S || clip.d2 != C)
            throw DimensionError("head_forward: clip shape does not match (regions, in_channels)");
        if (!all_finite(clip.data)) throw NumericError("head_forward: non-finite input");
        cache.frame_offsets.push_back(frames);
        cache.lengths.push_back(clip.d0);
        frames += clip.d0;
    }
    cache.inputs.assign(clips.begin(), clips.end());
    const std::size_t P = frames * S;
    const ParamSet& w = params.weights;

    // temporal convolution, shared across regions
    cache.conv_out.assign(P * H, 0.0);
    for (std::size_t b = 0; b < clips.size(); ++b) {
        const Clip& x = clips[b];
        const std::size_t T = x.d0;
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t s = 0; s < S; ++s) {
                double* z = &cache.conv_out[((cache.frame_offsets[b] + t) * S + s) * H];
                for (std::size_t h = 0; h < H; ++h) z[h] = w.conv_b[h];
                for (std::size_t k = 0; k < K; ++k) {
                    const std::ptrdiff_t tt = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(pad);
                    if (tt < 0 || tt >= static_cast<std::ptrdiff_t>(T)) continue;
                    const double* xin = &x(static_cast<std::size_t>(tt), s, 0);
                    const double* wk = &w.conv_w[k * C * H];
                    for (std::size_t c = 0; c < C; ++c) {
                        const double xv = xin[c];
                        const double* wc = wk + c * H;
                        for (std::size_t h = 0; h < H; ++h) z[h] += xv * wc[h];
                    }
                }
            }
    }

    // batch norm
    cache.normed.resize(P * H);
    cache.pre_act.resize(P * H);
    if (cfg.use_batchnorm) {
        cache.batch_mean.assign(H, 0.0);
        cache.batch_var.assign(H, 0.0);
        cache.inv_std.assign(H, 0.0);
        if (mode == Mode::train) {
            for (std::size_t i = 0; i < P; ++i)
                for (std::size_t h = 0; h < H; ++h) cache.batch_mean[h] += cache.conv_out[i * H + h];
            for (auto& m : cache.batch_mean) m /= static_cast<double>(P);
            for (std::size_t i = 0; i < P; ++i)
                for (std::size_t h = 0; h < H; ++h) {
                    const double d = cache.conv_out[i * H + h] - cache.batch_mean[h];
                    cache.batch_var[h] += d * d;
                }
            for (auto& v : cache.batch_var) v /= static_cast<double>(P);
        } else {
            cache.batch_mean = params.bn_running_mean;
            cache.batch_var = params.bn_running_var;
        }
        for (std::size_t h = 0; h < H; ++h) cache.inv_std[h] = 1.0 / std::sqrt(cache.batch_var[h] + cfg.bn_eps);
        for (std::size_t i = 0; i < P; ++i)
            for (std::size_t h = 0; h < H; ++h) {
                const double xh = (cache.conv_out[i * H + h] - cache.batch_mean[h]) * cache.inv_std[h];
                cache.normed[i * H + h] = xh;
                cache.pre_act[i * H + h] = w.bn_gamma[h] * xh + w.bn_beta[h];
            }
    } else {
        cache.normed = cache.conv_out;
        cache.pre_act = cache.conv_out;
    }

    // leaky ReLU + pooling over regions (activations are recomputed in backward)
    cache.pooled.assign(frames * H, 0.0);
    cache.argmax_region.assign(frames * H, 0);
    const double slope = cfg.leaky_slope;
    for (std::size_t f = 0; f < frames; ++f) {
        double* out = &cache.pooled[f * H];
        for (std::size_t s = 0; s < S; ++s) {
            const double* y = &cache.pre_act[(f * S + s) * H];
            for (std::size_t h = 0; h < H; ++h) {
                const double a = y[h] > 0.0 ? y[h] : slope * y[h];
                if (cfg.pooling == Pooling::mean) {
                    out[h] += a;
                } else if (s == 0 || a > out[h]) {
                    out[h] = a;
                    cache.argmax_region[f * H + h] = static_cast<std::uint32_t>(s);
                }
            }
        }
        if (cfg.pooling == Pooling::mean)
            for (std::size_t h = 0; h < H; ++h) out[h] /= static_cast<double>(S);
    }

    // linear + L2
    cache.fc_out.assign(frames * D, 0.0);
    cache.norms.assign(frames, 0.0);
    cache.embeddings.assign(frames * D, 0.0);
    cache.degenerate.assign(frames, 0);
    for (std::size_t f = 0; f < frames; ++f) {
        double* o = &cache.fc_out[f * D];
        for (std::size_t d = 0; d < D; ++d) o[d] = w.fc_b[d];
        const double* p = &cache.pooled[f * H];
        for (std::size_t h = 0; h < H; ++h) {
            const double ph = p[h];
            const double* wr = &w.fc_w[h * D];
            for (std::size_t d = 0; d < D; ++d) o[d] += ph * wr[d];
        }
        double* e = &cache.embeddings[f * D];
        if (cfg.use_l2norm) {
            const double n = norm2({o, D});
            cache.norms[f] = n;
            if (n > kNormFloor) {
                for (std::size_t d = 0; d < D; ++d) e[d] = o[d] / n;
            } else {
                cache.degenerate[f] = 1;
            }
        } else {
            cache.norms[f] = 1.0;
            for (std::size_t d = 0; d < D; ++d) e[d] = o[d];
        }
    }

    ForwardResult result;
    for (std::size_t b = 0; b < clips.size(); ++b) {
        const std::size_t T = cache.lengths[b], off = cache.frame_offsets[b];
        Matrix m(T, D);
        std::copy(cache.embeddings.begin() + static_cast<std::ptrdiff_t>(off * D),
                  cache.embeddings.begin() + static_cast<std::ptrdiff_t>((off + T) * D), m.data.begin());
        result.embeddings.push_back(std::move(m));
        result.degenerate.emplace_back(cache.degenerate.begin() + static_cast<std::ptrdiff_t>(off),
                                       cache.degenerate.begin() + static_cast<std::ptrdiff_t>(off + T));
    }
    result.cache = std::move(cache);
    return result;
}

// Gradients of a scalar loss with respect to every trainable tensor, given the
// loss gradient with respect to each clip's output embeddings.
inline HeadGrads head_backward(std::span<const Matrix> grad_embeddings, const ForwardCache& cache,
                               const HeadParams& params, const HeadConfig& cfg) {
    check_shapes(params, cfg);
    if (cache.mode != Mode::train) throw ContractError("head_backward: cache must come from a train-mode forward");
    if (grad_embeddings.size() != cache.lengths.size())
        throw ContractError("head_backward: gradient count does not match the cached batch");
    const std::size_t S = cache.regions, C = cfg.in_channels, H = cfg.hidden_channels, D = cfg.out_dim,
                      K = cfg.kernel_size, pad = cfg.padding();
    const std::size_t F = cache.num_frames(), P = F * S;
    if (cache.pooled.size() != F * H || cache.fc_out.size() != F * D)
        throw ContractError("head_backward: cache was produced with a different head config");
    for (std::size_t b = 0; b < grad_embeddings.size(); ++b)
        if (grad_embeddings[b].rows != cache.lengths[b] || grad_embeddings[b].cols != D)
            throw ContractError("head_backward: gradient shape does not match clip " + std::to_string(b));

    const ParamSet& w = params.weights;
    HeadGrads g = ParamSet::zeros(cfg);

    // through L2 normalisation: (I - e e^T) / |o|
    std::vector<double> g_out(F * D, 0.0);
    for (std::size_t b = 0; b < grad_embeddings.size(); ++b)
        for (std::size_t t = 0; t < cache.lengths[b]; ++t) {
            const std::size_t f = cache.frame_offsets[b] + t;
            auto ge = grad_embeddings[b].row(t);
            double* go = &g_out[f * D];
            if (!cfg.use_l2norm) {
                for (std::size_t d = 0; d < D; ++d) go[d] = ge[d];
                continue;
            }
            if (cache.degenerate[f]) continue;
            const double* e = &cache.embeddings[f * D];
            const double proj = dot({e, D}, ge);
            const double inv_n = 1.0 / cache.norms[f];
            for (std::size_t d = 0; d < D; ++d) go[d] = (ge[d] - e[d] * proj) * inv_n;
        }

    // linear layer
    std::vector<double> g_pooled(F * H, 0.0);
    for (std::size_t f = 0; f < F; ++f) {
        const double* go = &g_out[f * D];
        const double* p = &cache.pooled[f * H];
        for (std::size_t d = 0; d < D; ++d) g.fc_b[d] += go[d];
        for (std::size_t h = 0; h < H; ++h) {
            const double* wr = &w.fc_w[h * D];
            double* gw = &g.fc_w[h * D];
            double acc = 0.0;
            for (std::size_t d = 0; d < D; ++d) {
                gw[d] += p[h] * go[d];
                acc += wr[d] * go[d];
            }
            g_pooled[f * H + h] = acc;
        }
    }

    // pooling and leaky ReLU, straight to the pre-activation gradient
    std::vector<double> g_pre(P * H, 0.0);
    const double inv_S = 1.0 / static_cast<double>(S);
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t h = 0; h < H; ++h) {
            const double gp = g_pooled[f * H + h];
            if (cfg.pooling == Pooling::max) {
                const std::size_t s = cache.argmax_region[f * H + h];
                const std::size_t i = (f * S + s) * H + h;
                g_pre[i] = gp * (cache.pre_act[i] > 0.0 ? 1.0 : cfg.leaky_slope);
            } else {
                for (std::size_t s = 0; s < S; ++s) {
                    const std::size_t i = (f * S + s) * H + h;
                    g_pre[i] = gp * inv_S * (cache.pre_act[i] > 0.0 ? 1.0 : cfg.leaky_slope);
                }
            }
        }

    // batch norm (train-mode batch statistics)
    std::vector<double> g_conv;
    if (cfg.use_batchnorm) {
        std::vector<double> sum_g(H, 0.0), sum_gx(H, 0.0);
        for (std::size_t i = 0; i < P; ++i)
            for (std::size_t h = 0; h < H; ++h) {
                const double gy = g_pre[i * H + h];
                g.bn_beta[h] += gy;
                g.bn_gamma[h] += gy * cache.normed[i * H + h];
            }
        // d x-hat = gy * gamma; sums over positions follow from the beta/gamma sums
        for (std::size_t h = 0; h < H; ++h) {
            sum_g[h] = g.bn_beta[h] * w.bn_gamma[h];
            sum_gx[h] = g.bn_gamma[h] * w.bn_gamma[h];
        }
        g_conv.resize(P * H);
        const double M = static_cast<double>(P);
        for (std::size_t i = 0; i < P; ++i)
            for (std::size_t h = 0; h < H; ++h) {
                const double gx = g_pre[i * H + h] * w.bn_gamma[h];
                g_conv[i * H + h] =
                    cache.inv_std[h] / M * (M * gx - sum_g[h] - cache.normed[i * H + h] * sum_gx[h]);
            }
    } else {
        g_conv = std::move(g_pre);
    }

    // temporal convolution
    for (std::size_t b = 0; b < cache.inputs.size(); ++b) {
        const Clip& x = cache.inputs[b];
        const std::size_t T = x.d0;
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t s = 0; s < S; ++s) {
                const double* gz = &g_conv[((cache.frame_offsets[b] + t) * S + s) * H];
                for (std::size_t h = 0; h < H; ++h) g.conv_b[h] += gz[h];
                for (std::size_t k = 0; k < K; ++k) {
                    const std::ptrdiff_t tt = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(pad);
                    if (tt < 0 || tt >= static_cast<std::ptrdiff_t>(T)) continue;
                    const double* xin = &x(static_cast<std::size_t>(tt), s, 0);
                    double* gk = &g.conv_w[k * C * H];
                    for (std::size_t c = 0; c < C; ++c) {
                        const double xv = xin[c];
                        double* gc = gk + c * H;
                        for (std::size_t h = 0; h < H; ++h) gc[h] += xv * gz[h];
                    }
                }
            }
    }
    return g;
}

// Folds a train-mode batch's statistics into the running estimates. `keep`
// overrides the momentum; 0 replaces the estimates outright.
inline void update_running_stats(HeadParams& params, const ForwardCache& cache, const HeadConfig& cfg,
                                 std::optional<double> keep = std::nullopt) {
    if (!cfg.use_batchnorm || cache.mode != Mode::train) return;
    const double M = static_cast<double>(cache.num_positions());
    const double unbias = M > 1.0 ? M / (M - 1.0) : 1.0;
    const double m = keep.value_or(cfg.bn_momentum);
    for (std::size_t h = 0; h < cfg.hidden_channels; ++h) {
        params.bn_running_mean[h] = m * params.bn_running_mean[h] + (1.0 - m) * cache.batch_mean[h];
        params.bn_running_var[h] = m * params.bn_running_var[h] + (1.0 - m) * cache.batch_var[h] * unbias;
    }
}

// ---------------------------------------------------------------------------
// Adam with L2 weight decay folded into the gradient
// ---------------------------------------------------------------------------
struct AdamState {
    ParamSet m;
    ParamSet v;
    std::uint64_t t = 0;
    double lr = 1e-4;
    double weight_decay = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState for_config(const HeadConfig& cfg, double lr = 1e-4, double weight_decay = 1e-3) {
        AdamState s;
        s.m = ParamSet::zeros(cfg);
        s.v = ParamSet::zeros(cfg);
        s.lr = lr;
        s.weight_decay = weight_decay;
        return s;
    }

    bool operator==(const AdamState&) const = default;
};

inline void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state) {
    for (const auto& info : kParamTensors) {
        const auto& p = params.*info.member;
        if (p.size() != (grads.*info.member).size() || p.size() != (state.m.*info.member).size() ||
            p.size() != (state.v.*info.member).size())
            throw DimensionError("adam_step: shape mismatch in '" + std::string(info.name) + "'");
    }
    state.t += 1;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (const auto& info : kParamTensors) {
        auto& p = params.*info.member;
        const auto& g = grads.*info.member;
        auto& m = state.m.*info.member;
        auto& v = state.v.*info.member;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i] + state.weight_decay * p[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            p[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

}  // namespace cyclecl
