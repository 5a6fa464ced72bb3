// Triplet loss and the self-supervised training loop: sample clips, embed them,
// mine triplets on the similarity matrix, augment, and step the head.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "cyclecl/core.hpp"
#include "cyclecl/miner.hpp"
#include "cyclecl/seqdata.hpp"
#include "cyclecl/simhead.hpp"
#include "cyclecl/tsmkit.hpp"

namespace cyclecl {

// ---------------------------------------------------------------------------
// Triplet loss: max(0, |a - p|^2 - |a - n|^2 + margin)
// ---------------------------------------------------------------------------
struct TripletLossValue {
    double loss = 0.0;
    std::vector<double> grad_anchor;
    std::vector<double> grad_positive;
    std::vector<double> grad_negative;
};

inline TripletLossValue triplet_loss(std::span<const double> a, std::span<const double> p,
                                     std::span<const double> n, double margin) {
    const std::size_t D = a.size();
    if (p.size() != D || n.size() != D) throw DimensionError("triplet_loss: embedding sizes differ");
    TripletLossValue out{0.0, std::vector<double>(D, 0.0), std::vector<double>(D, 0.0), std::vector<double>(D, 0.0)};
    const double value = squared_distance(a, p) - squared_distance(a, n) + margin;
    if (!(value > 0.0)) return out;  // inactive, and subgradient 0 at the hinge
    out.loss = value;
    for (std::size_t d = 0; d < D; ++d) {
        out.grad_anchor[d] = 2.0 * (n[d] - p[d]);
        out.grad_positive[d] = -2.0 * (a[d] - p[d]);
        out.grad_negative[d] = 2.0 * (a[d] - n[d]);
    }
    return out;
}

// Triplets of a batch of clips. Each triplet role reads from its own version
// of the clip (original or augmented): roles[b] holds the embedding index used
// for anchor, positive and negative of clip b.
struct TripletBatch {
    std::vector<TripletSet> triplets;
    std::vector<std::array<std::size_t, 3>> roles;

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& t : triplets) n += t.size();
        return n;
    }
};

struct BatchLoss {
    double loss = 0.0;
    std::size_t triplets = 0;
    std::size_t active = 0;
    std::vector<Matrix> grads;  // same shapes as the embeddings
};

// Mean triplet loss over every triplet of the batch and its gradient with
// respect to each embedding matrix.
inline BatchLoss batch_triplet_loss(std::span<const Matrix> embeddings, const TripletBatch& batch, double margin) {
    BatchLoss out;
    for (const auto& e : embeddings) out.grads.emplace_back(e.rows, e.cols, 0.0);
    out.triplets = batch.count();
    if (out.triplets == 0) return out;
    const double inv = 1.0 / static_cast<double>(out.triplets);
    double total = 0.0;
    for (std::size_t b = 0; b < batch.triplets.size(); ++b) {
        const auto [ia, ip, in] = batch.roles[b];
        const Matrix& A = embeddings[ia];
        const Matrix& P = embeddings[ip];
        const Matrix& N = embeddings[in];
        for (const auto& t : batch.triplets[b]) {
            auto a = A.row(t.anchor), p = P.row(t.positive), n = N.row(t.negative);
            const double value = squared_distance(a, p) - squared_distance(a, n) + margin;
            if (!(value > 0.0)) continue;
            total += value;
            ++out.active;
            auto ga = out.grads[ia].row(t.anchor);
            auto gp = out.grads[ip].row(t.positive);
            auto gn = out.grads[in].row(t.negative);
            for (std::size_t d = 0; d < a.size(); ++d) {
                ga[d] += inv * 2.0 * (n[d] - p[d]);
                gp[d] += inv * -2.0 * (a[d] - p[d]);
                gn[d] += inv * 2.0 * (a[d] - n[d]);
            }
        }
    }
    out.loss = total * inv;
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------
struct TrainConfig {
    double margin = 0.5;
    std::size_t clip_length = 100;
    std::size_t temporal_stride = 2;
    std::size_t batch_clips = 4;
    std::size_t epochs_max = 100;
    std::size_t zero_loss_patience = 20;
    double loss_tol = 1e-6;
    MinerConfig miner;
    AugmentConfig augment;
    HeadConfig head;
    double lr = 1e-4;
    double weight_decay = 1e-3;
    std::uint64_t seed = 0;
    std::size_t embed_chunk = 64;
};

inline void validate(const TrainConfig& cfg) {
    if (!(cfg.margin > 0.0)) throw ConfigError("train.margin must be > 0");
    if (cfg.temporal_stride < 1) throw ConfigError("train.temporal_stride must be >= 1");
    if (cfg.batch_clips < 1) throw ConfigError("train.batch_clips must be >= 1");
    if (cfg.clip_length < std::max<std::size_t>(cfg.head.kernel_size, 3))
        throw ConfigError("train.clip_length must be >= max(kernel_size, 3)");
    if (cfg.embed_chunk < 1) throw ConfigError("train.embed_chunk must be >= 1");
    if (!(cfg.lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (!(cfg.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    validate(cfg.head);
    validate(cfg.miner);
    validate(cfg.augment);
}

enum class StopReason { converged, max_epochs };

inline std::string_view to_string(StopReason r) { return r == StopReason::converged ? "converged" : "max_epochs"; }

struct IterationRecord {
    std::size_t iteration = 0;
    std::size_t epoch = 0;
    double loss = 0.0;
    std::size_t triplets = 0;
    bool skipped = false;
};

struct TrainReport {
    std::vector<double> loss_history;  // skipped iterations record 0
    std::vector<IterationRecord> log;
    std::size_t epochs_run = 0;
    std::size_t iterations = 0;
    std::size_t skipped_iterations = 0;
    StopReason stop_reason = StopReason::max_epochs;
};

struct TrainResult {
    HeadParams params;
    AdamState adam;
    TrainReport report;
};

// Frames start, start + stride, ... of a feature sequence as a clip.
inline Clip extract_clip(const FeatureSequence& seq, std::size_t start, std::size_t length, std::size_t stride) {
    const auto& f = seq.features;
    Clip clip(length, f.d1, f.d2);
    for (std::size_t t = 0; t < length; ++t) {
        auto src = f.slab(start + t * stride);
        std::copy(src.begin(), src.end(), clip.slab(t).begin());
    }
    return clip;
}

inline std::size_t iterations_per_epoch(const std::vector<FeatureSequence>& data, const TrainConfig& cfg) {
    std::size_t total = 0;
    for (const auto& s : data) total += s.num_frames();
    const std::size_t per_iter = cfg.batch_clips * cfg.clip_length;
    return std::max<std::size_t>(1, (total + per_iter - 1) / per_iter);
}

inline TrainResult train(const std::vector<FeatureSequence>& data, const TrainConfig& cfg, bool verbose = false) {
    validate(cfg);
    if (data.empty()) throw ConfigError("train: empty dataset");
    const std::size_t span = (cfg.clip_length - 1) * cfg.temporal_stride + 1;
    for (const auto& s : data) {
        if (s.num_frames() < span)
            throw ConfigError("train: sequence '" + s.video_id + "' has " + std::to_string(s.num_frames()) +
                              " frames, a clip spans " + std::to_string(span));
        if (s.features.d2 != cfg.head.in_channels)
            throw DimensionError("train: feature channels do not match head.in_channels");
    }

    TrainResult result{HeadParams::init(cfg.head, mix_seed(cfg.seed, 2)),
                       AdamState::for_config(cfg.head, cfg.lr, cfg.weight_decay), {}};
    HeadParams& params = result.params;
    TrainReport& report = result.report;
    Rng sampler(mix_seed(cfg.seed, 1));
    const std::size_t per_epoch = iterations_per_epoch(data, cfg);
    const std::size_t B = cfg.batch_clips;
    const AugmentMode mode = cfg.augment.mode;

    // The running statistics start from one batch's statistics rather than
    // (0, 1); otherwise the first eval-mode embeddings are dominated by the
    // per-channel offsets and nearly identical, and mining finds nothing.
    if (cfg.head.use_batchnorm) {
        Rng calib(mix_seed(cfg.seed, 3));
        std::vector<Clip> clips;
        for (std::size_t b = 0; b < B; ++b) {
            const FeatureSequence& seq = data[calib.index(data.size())];
            clips.push_back(extract_clip(seq, calib.index(seq.num_frames() - span + 1), cfg.clip_length,
                                         cfg.temporal_stride));
        }
        update_running_stats(params, head_forward(clips, params, cfg.head, Mode::train).cache, cfg.head, 0.0);
    }

    std::size_t streak = 0;
    std::size_t iteration = 0;
    bool converged = false;
    for (std::size_t epoch = 0; epoch < cfg.epochs_max && !converged; ++epoch) {
        report.epochs_run = epoch + 1;
        for (std::size_t it = 0; it < per_epoch && !converged; ++it, ++iteration) {
            std::vector<Clip> clips;
            clips.reserve(B);
            for (std::size_t b = 0; b < B; ++b) {
                const FeatureSequence& seq = data[sampler.index(data.size())];
                const std::size_t start = sampler.index(seq.num_frames() - span + 1);
                clips.push_back(extract_clip(seq, start, cfg.clip_length, cfg.temporal_stride));
            }

            // mine on un-augmented clips with the current head in eval mode
            const ForwardResult mined = head_forward(clips, params, cfg.head, Mode::eval);
            TripletBatch batch;
            for (std::size_t b = 0; b < B; ++b) {
                MinerConfig mc = cfg.miner;
                mc.rng_seed = mix_seed(cfg.miner.rng_seed ^ cfg.seed, iteration * B + b);
                batch.triplets.push_back(mine(compute_tsm(mined.embeddings[b]), mc));
            }

            IterationRecord rec{iteration, epoch, 0.0, batch.count(), false};
            if (rec.triplets == 0) {
                rec.skipped = true;
                ++report.skipped_iterations;
                report.loss_history.push_back(0.0);
                report.log.push_back(rec);
                continue;
            }

            // loss-time inputs: one version of the batch per augmented role
            std::vector<Clip> versions;
            auto add_version = [&](TripletRole role, std::size_t tag) {
                for (std::size_t b = 0; b < B; ++b) {
                    AugmentConfig ac = cfg.augment;
                    ac.rng_seed = mix_seed(cfg.augment.rng_seed ^ cfg.seed, 0x617567ULL + tag);
                    versions.push_back(augment(clips[b], ac, role, (iteration * B + b) * 3 + tag));
                }
            };
            std::array<std::size_t, 3> base{0, 0, 0};  // version block per role
            switch (mode) {
                case AugmentMode::none:
                    versions = clips;
                    break;
                case AugmentMode::positives_only:
                    versions = clips;
                    add_version(TripletRole::positive, 1);
                    base = {0, 1, 0};
                    break;
                case AugmentMode::all:
                    add_version(TripletRole::anchor, 0);
                    add_version(TripletRole::positive, 1);
                    add_version(TripletRole::negative, 2);
                    base = {0, 1, 2};
                    break;
            }
            for (std::size_t b = 0; b < B; ++b) batch.roles.push_back({base[0] * B + b, base[1] * B + b, base[2] * B + b});

            const ForwardResult fwd = head_forward(versions, params, cfg.head, Mode::train);
            const BatchLoss loss = batch_triplet_loss(fwd.embeddings, batch, cfg.margin);
            if (!std::isfinite(loss.loss)) throw NumericError("train: non-finite loss at iteration " + std::to_string(iteration));
            const HeadGrads grads = head_backward(loss.grads, fwd.cache, params, cfg.head);
            adam_step(params.weights, grads, result.adam);
            update_running_stats(params, fwd.cache, cfg.head);

            rec.loss = loss.loss;
            report.loss_history.push_back(loss.loss);
            report.log.push_back(rec);
            streak = loss.loss < cfg.loss_tol ? streak + 1 : 0;
            if (streak >= cfg.zero_loss_patience) converged = true;
            if (verbose && iteration % 100 == 0)
                std::fprintf(stderr, "iter %zu epoch %zu loss %.6f triplets %zu\n", iteration, epoch, loss.loss,
                             rec.triplets);
        }
    }
    report.iterations = iteration;
    report.stop_reason = converged ? StopReason::converged : StopReason::max_epochs;
    if (report.skipped_iterations > 0)
        std::cerr << "warning: " << report.skipped_iterations << " of " << report.iterations
                  << " training iterations mined no triplets and were skipped\n";
    return result;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

// Eval-mode embeddings for every frame. Frames are read at `stride`: each
// residue class t mod stride forms its own subsequence, cut into
// non-overlapping chunks of `chunk` frames (the last one shorter).
inline EmbeddingSequence embed_sequence(const FeatureSequence& seq, const HeadParams& params, const HeadConfig& head,
                                        std::size_t chunk = 64, std::size_t stride = 1) {
    if (chunk < 1 || stride < 1) throw ConfigError("embed: chunk and stride must be >= 1");
    const std::size_t N = seq.num_frames();
    EmbeddingSequence out{seq.video_id, Matrix(N, head.out_dim), 0, seq.labels};
    std::vector<Clip> clips;
    std::vector<std::vector<std::size_t>> frame_index;
    for (std::size_t r = 0; r < std::min(stride, N); ++r) {
        std::vector<std::size_t> frames;
        for (std::size_t t = r; t < N; t += stride) frames.push_back(t);
        for (std::size_t lo = 0; lo < frames.size(); lo += chunk) {
            const std::size_t len = std::min(chunk, frames.size() - lo);
            Clip clip(len, seq.features.d1, seq.features.d2);
            std::vector<std::size_t> idx(frames.begin() + static_cast<std::ptrdiff_t>(lo),
                                         frames.begin() + static_cast<std::ptrdiff_t>(lo + len));
            for (std::size_t i = 0; i < len; ++i) {
                auto src = seq.features.slab(idx[i]);
                std::copy(src.begin(), src.end(), clip.slab(i).begin());
            }
            clips.push_back(std::move(clip));
            frame_index.push_back(std::move(idx));
        }
    }
    const ForwardResult fwd = head_forward(clips, params, head, Mode::eval);
    for (std::size_t c = 0; c < clips.size(); ++c)
        for (std::size_t i = 0; i < frame_index[c].size(); ++i) {
            auto src = fwd.embeddings[c].row(i);
            std::copy(src.begin(), src.end(), out.embeddings.row(frame_index[c][i]).begin());
        }
    return out;
}

inline std::vector<EmbeddingSequence> embed_dataset(const std::vector<FeatureSequence>& data, const HeadParams& params,
                                                    const HeadConfig& head, std::size_t chunk = 64,
                                                    std::size_t stride = 1) {
    std::vector<EmbeddingSequence> out;
    out.reserve(data.size());
    for (const auto& s : data) out.push_back(embed_sequence(s, params, head, chunk, stride));
    return out;
}

// iter,epoch,loss,triplet_count,skipped_flag
inline void write_train_log(const std::filesystem::path& path, const TrainReport& report) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << "iter,epoch,loss,triplet_count,skipped_flag\n";
    char buf[32];
    for (const auto& r : report.log) {
        std::snprintf(buf, sizeof buf, "%.9g", r.loss);
        f << r.iteration << ',' << r.epoch << ',' << buf << ',' << r.triplets << ',' << (r.skipped ? 1 : 0) << '\n';
    }
}

}  // namespace cyclecl
