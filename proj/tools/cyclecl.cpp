// cyclecl: generate the synthetic benchmark, train the projection head,
// embed, evaluate, score anomalies, run ablations and dump diagnostics.
//
// Every command works on <output_dir>/seed_<seed>/ and reads what the
// previous stage left there:
//   gen -> dataset/{train,test}
//   train -> checkpoint.json, train_log.csv
//   embed -> embeddings/test.csv
//   eval -> metrics.json (metrics_baseline.json / metrics_random.json)
//   anomaly -> anomaly/<feature>_<scorer>.json
//   diag -> diag/*.csv
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cyclecl/cyclecl.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cyclecl;

namespace {

enum Exit { ok = 0, config_error = 1, missing_artifact = 2, numeric_failure = 3 };

struct Context {
    ExperimentConfig cfg;
    std::uint64_t seed = 0;
    fs::path run_dir;
};

void write_json(const fs::path& path, const json& j) {
    fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << j.dump(2) << '\n';
}

// Records the command in run_manifest.json, keeping entries of other commands.
void record_manifest(const fs::path& dir, const Context& ctx, const std::string& command,
                     const std::vector<std::string>& outputs) {
    const fs::path path = dir / "run_manifest.json";
    json m = json::object();
    if (fs::exists(path)) {
        try {
            std::ifstream f(path);
            m = json::parse(f);
        } catch (const json::exception&) {
            m = json::object();
        }
    }
    m["tool"] = "cyclecl";
    m["version"] = kVersion;
    m["config_hash"] = config_hash(ctx.cfg);
    m["seed"] = ctx.seed;
    m["config"] = to_json(ctx.cfg);
    m["commands"][command] = {{"config_hash", config_hash(ctx.cfg)}, {"outputs", outputs}};
    write_json(path, m);
}

void require(const fs::path& p, const std::string& producer) {
    if (!fs::exists(p)) throw MissingArtifact(p.string() + " not found; run `cyclecl " + producer + "` first");
}

std::vector<FeatureSequence> load_split(const Context& ctx, const std::string& split) {
    const fs::path dir = ctx.run_dir / "dataset" / split;
    require(dir / "manifest.json", "gen");
    return encode_all(load_dataset(dir), make_encoder(ctx.cfg.dataset));
}

Checkpoint load_trained(const Context& ctx) {
    require(ctx.run_dir / "checkpoint.json", "train");
    Checkpoint ck = load_checkpoint(ctx.run_dir / "checkpoint.json");
    return ck;
}

std::vector<EmbeddingSequence> load_test_embeddings(const Context& ctx) {
    const fs::path p = ctx.run_dir / "embeddings" / "test.csv";
    require(p, "embed");
    auto emb = load_embeddings_csv(p);
    return emb;
}

int cmd_gen(const Context& ctx) {
    const Benchmark b = make_benchmark(ctx.cfg.dataset, ctx.seed);
    save_dataset(b.train, ctx.run_dir / "dataset" / "train");
    save_dataset(b.test, ctx.run_dir / "dataset" / "test");
    record_manifest(ctx.run_dir, ctx, "gen", {"dataset/train", "dataset/test"});
    std::printf("wrote %zu train and %zu test sequences to %s\n", b.train.size(), b.test.size(),
                (ctx.run_dir / "dataset").string().c_str());
    return ok;
}

int cmd_train(const Context& ctx, bool verbose) {
    const auto train_set = take_fraction(load_split(ctx, "train"), ctx.cfg.dataset.data_fraction);
    const TrainConfig tc = train_config_for_seed(ctx.cfg, ctx.seed);
    const TrainResult r = train(train_set, tc, verbose);
    save_checkpoint({tc.head, r.params, r.adam, tc.seed}, ctx.run_dir / "checkpoint.json");
    write_train_log(ctx.run_dir / "train_log.csv", r.report);
    record_manifest(ctx.run_dir, ctx, "train", {"checkpoint.json", "train_log.csv"});
    std::printf("trained %zu iterations (%zu epochs, %zu skipped), stop: %s, final loss %.6g\n", r.report.iterations,
                r.report.epochs_run, r.report.skipped_iterations, std::string(to_string(r.report.stop_reason)).c_str(),
                r.report.loss_history.empty() ? 0.0 : r.report.loss_history.back());
    return ok;
}

int cmd_embed(const Context& ctx, bool include_train) {
    const Checkpoint ck = load_trained(ctx);
    std::vector<std::string> outputs;
    for (const std::string split : {"test", "train"}) {
        if (split == "train" && !include_train) continue;
        const auto data = load_split(ctx, split);
        const auto emb = embed_dataset(data, ck.params, ck.config, ctx.cfg.train.embed_chunk, ctx.cfg.embed_stride);
        fs::create_directories(ctx.run_dir / "embeddings");
        save_embeddings_csv(ctx.run_dir / "embeddings" / (split + ".csv"), emb);
        outputs.push_back("embeddings/" + split + ".csv");
    }
    record_manifest(ctx.run_dir, ctx, "embed", outputs);
    std::printf("wrote %s\n", (ctx.run_dir / "embeddings").string().c_str());
    return ok;
}

void print_metrics(const char* what, const MetricsReport& r) {
    std::printf("%-9s AP %.4f  F1 %s  oracle F1 %.4f\n", what, r.ap,
                r.f1 ? std::to_string(*r.f1).c_str() : "n/a", r.oracle_f1);
}

int cmd_eval(const Context& ctx, bool baseline, bool random) {
    std::vector<EmbeddingSequence> emb;
    std::string name = "metrics";
    if (baseline || random) {
        const auto test = load_split(ctx, "test");
        for (const auto& s : test)
            emb.push_back(random ? random_embeddings(s, ctx.cfg.train.head.out_dim, mix_seed(ctx.seed, 0x726e64ULL))
                                 : encoder_embeddings(s));
        name = random ? "metrics_random" : "metrics_baseline";
    } else {
        emb = load_test_embeddings(ctx);
    }
    const MetricsReport r = evaluate_knn(emb, ctx.cfg.eval.k, ctx.cfg.eval.eps);
    write_json(ctx.run_dir / (name + ".json"), to_json(r));
    write_score_trace_csv(ctx.run_dir / (name + "_scores.csv"), r);
    write_pr_curve_csv(ctx.run_dir / (name + "_pr_curve.csv"), pr_curve(r.scores, r.labels));
    record_manifest(ctx.run_dir, ctx, baseline ? "eval --baseline" : random ? "eval --random" : "eval",
                    {name + ".json", name + "_scores.csv", name + "_pr_curve.csv"});
    print_metrics(baseline ? "baseline" : random ? "random" : "cyclecl", r);
    return ok;
}

int cmd_anomaly(const Context& ctx) {
    const auto emb = load_test_embeddings(ctx);
    const AnomalyConfig& ac = ctx.cfg.anomaly;
    const AnomalyRun run = run_anomaly(emb, ac);
    if (run.reference_fallback)
        std::cerr << "warning: no anomaly-free reference videos; scored against all other videos\n";
    const std::string stem = std::string(to_string(ac.feature_kind)) + "_" + std::string(to_string(ac.scorer));
    json j = to_json(run.metrics);
    j["feature_kind"] = to_string(ac.feature_kind);
    j["scorer"] = to_string(ac.scorer);
    j["reference_fallback"] = run.reference_fallback;
    write_json(ctx.run_dir / "anomaly" / (stem + ".json"), j);
    write_score_trace_csv(ctx.run_dir / "anomaly" / (stem + "_scores.csv"), run.metrics);
    record_manifest(ctx.run_dir, ctx, "anomaly " + stem, {"anomaly/" + stem + ".json", "anomaly/" + stem + "_scores.csv"});
    print_metrics(stem.c_str(), run.metrics);
    return ok;
}

int cmd_diag(const Context& ctx, std::vector<std::string> videos) {
    const Checkpoint ck = load_trained(ctx);
    const auto test = load_split(ctx, "test");
    const auto emb = embed_dataset(test, ck.params, ck.config, ctx.cfg.train.embed_chunk, ctx.cfg.embed_stride);
    if (videos.empty()) {
        // first anomaly-free and first anomalous test video
        for (bool anomalous : {false, true})
            for (const auto& e : emb)
                if (has_anomaly(e.labels) == anomalous) {
                    videos.push_back(e.video_id);
                    break;
                }
    }
    const fs::path dir = ctx.run_dir / "diag";
    fs::create_directories(dir);
    std::vector<std::string> outputs;
    const auto refs = normal_video_ids(emb);
    for (const auto& id : videos) {
        const auto it = std::find_if(emb.begin(), emb.end(), [&](const auto& e) { return e.video_id == id; });
        if (it == emb.end()) throw ConfigError("diag: unknown video '" + id + "'");
        const std::size_t N = it->size();
        write_matrix_csv(dir / (id + "_tsm.csv"), compute_tsm(*it).values);
        write_trace_csv(dir / (id + "_autocorr.csv"), autocorrelation(unit_rows(it->embeddings), N / 2), "lag,value");
        write_trace_csv(dir / (id + "_pca.csv"), pca_project_1d(it->embeddings).projection, "frame,value");
        std::vector<const Matrix*> parts;
        for (const auto& e : emb)
            if (e.video_id != id && std::find(refs.begin(), refs.end(), e.video_id) != refs.end())
                parts.push_back(&e.embeddings);
        if (!parts.empty())
            write_trace_csv(dir / (id + "_nn_distance.csv"),
                            nn_distance_score(it->embeddings, detail::stack_rows(parts), 1), "frame,value");
        for (const char* suffix : {"_tsm", "_autocorr", "_pca", "_nn_distance"})
            outputs.push_back("diag/" + id + suffix + ".csv");
    }

    // period recovery over every anomaly-free test video
    std::ofstream f(dir / "period_recovery.csv", std::ios::binary);
    f << "video_id,period,autocorr_lag,lag_ok,pca_bin,expected_bin,bin_ok\n";
    std::size_t total = 0, good = 0;
    for (std::size_t v = 0; v < emb.size(); ++v) {
        if (has_anomaly(emb[v].labels)) continue;
        const double P = test[v].period;
        const PeriodEstimate e = estimate_period(emb[v].embeddings, P);
        ++total;
        good += e.lag_ok && e.bin_ok;
        char buf[128];
        std::snprintf(buf, sizeof buf, "%g,%zu,%d,%zu,%g,%d", P, e.autocorr_lag, e.lag_ok ? 1 : 0, e.pca_bin,
                      static_cast<double>(emb[v].size()) / P, e.bin_ok ? 1 : 0);
        f << emb[v].video_id << ',' << buf << '\n';
    }
    outputs.push_back("diag/period_recovery.csv");
    record_manifest(ctx.run_dir, ctx, "diag", outputs);
    std::printf("diagnostics in %s; period recovered on %zu of %zu anomaly-free videos\n", dir.string().c_str(), good,
                total);
    return ok;
}

int cmd_ablate(const Context& ctx, const std::string& axis_name, std::vector<std::string> values, std::size_t workers) {
    const AblationAxis axis = ablation_axis_from_string(axis_name);
    if (values.empty()) values = default_values(axis);
    for (const auto& v : values) apply_ablation(ctx.cfg, axis, v);  // reject bad values before any run
    const fs::path dir = fs::path(ctx.cfg.output_dir) / "ablate" / axis_name;
    fs::create_directories(dir);
    const auto cells = run_ablation(ctx.cfg, {axis, values}, workers, dir);
    write_ablation_csv(dir / "ablation.csv", axis, cells);
    const auto summary = summarize(cells);
    write_ablation_summary_csv(dir / "ablation_summary.csv", axis, summary);
    Context c = ctx;
    c.seed = 0;
    record_manifest(dir, c, "ablate " + axis_name, {"ablation.csv", "ablation_summary.csv"});
    for (const auto& cell : cells)
        if (cell.status != "ok") std::cerr << "cell " << cell.value << " seed " << cell.seed << ": " << cell.status << '\n';
    std::printf("%-16s %5s %9s %9s %9s\n", axis_name.c_str(), "runs", "F1 med", "F1 min", "F1 max");
    for (const auto& s : summary)
        std::printf("%-16s %5zu %9.4f %9.4f %9.4f\n", s.value.c_str(), s.runs, s.f1_median, s.f1_min, s.f1_max);
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CycleCL: self-supervised embeddings for cyclic processes, on a synthetic benchmark"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    app.add_option("-c,--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
    app.add_option("-s,--set", overrides, "override a config entry, e.g. --set train.miner.strategy=topk");
    app.add_option("--seed", seed, "seed to run (default: first entry of `seeds`)");
    app.add_option("-o,--out", out_dir, "output directory (overrides output_dir)");

    auto* gen = app.add_subcommand("gen", "generate the train/test datasets");
    bool verbose = false;
    auto* trn = app.add_subcommand("train", "train the projection head");
    trn->add_flag("-v,--verbose", verbose, "log progress every 100 iterations");
    bool embed_train = false;
    auto* emb = app.add_subcommand("embed", "embed the test split with the trained head");
    emb->add_flag("--train-split", embed_train, "also embed the training split");
    bool baseline = false, random = false;
    auto* evl = app.add_subcommand("eval", "leave-one-video-out weighted k-NN evaluation");
    auto* baseline_flag = evl->add_flag("--baseline", baseline, "evaluate frozen-encoder features instead");
    evl->add_flag("--random", random, "evaluate random embeddings instead")->excludes(baseline_flag);
    auto* anom = app.add_subcommand("anomaly", "unsupervised anomaly scoring of the test split");
    std::vector<std::string> diag_videos;
    auto* diag = app.add_subcommand("diag", "dump TSM, autocorrelation, PCA and NN-distance traces");
    diag->add_option("--videos", diag_videos, "test video ids (default: one normal, one anomalous)")->delimiter(',');
    std::string axis;
    std::vector<std::string> values;
    std::size_t workers = 0;
    auto* abl = app.add_subcommand("ablate", "run one ablation axis over all seeds");
    abl->add_option("--axis", axis, "sampling_strategy, augment_mode, sequence_length, output_dim, head_variant, "
                                    "l2norm or data_fraction")
        ->required();
    abl->add_option("--values", values, "values to try (default: the standard grid)")->delimiter(',');
    abl->add_option("--workers", workers, "parallel cells (default: hardware threads)");
    auto* run = app.add_subcommand("run", "gen, train, embed, eval (with baselines) and anomaly in one go");
    auto* show = app.add_subcommand("config", "print the effective config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_error;
    }

    try {
        json j = to_json(ExperimentConfig{});
        if (!config_path.empty()) {
            std::ifstream f(config_path);
            json user;
            try {
                user = json::parse(f);
            } catch (const json::exception& e) {
                throw ConfigError(config_path + ": " + e.what());
            }
            j.merge_patch(user);
        }
        for (const auto& o : overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + o + "'");
            apply_override(j, o.substr(0, eq), o.substr(eq + 1));
        }
        if (out_dir) j["output_dir"] = *out_dir;

        Context ctx;
        ctx.cfg = config_from_json(j);
        validate(ctx.cfg);
        ctx.seed = seed.value_or(ctx.cfg.seeds.front());
        ctx.run_dir = fs::path(ctx.cfg.output_dir) / ("seed_" + std::to_string(ctx.seed));

        if (*show) {
            std::cout << to_json(ctx.cfg).dump(2) << '\n';
            return ok;
        }
        if (*gen) return cmd_gen(ctx);
        if (*trn) return cmd_train(ctx, verbose);
        if (*emb) return cmd_embed(ctx, embed_train);
        if (*evl) return cmd_eval(ctx, baseline, random);
        if (*anom) return cmd_anomaly(ctx);
        if (*diag) return cmd_diag(ctx, diag_videos);
        if (*abl) return cmd_ablate(ctx, axis, values, workers);
        if (*run) {
            cmd_gen(ctx);
            cmd_train(ctx, verbose);
            cmd_embed(ctx, false);
            cmd_eval(ctx, false, false);
            cmd_eval(ctx, true, false);
            cmd_eval(ctx, false, true);
            Context raw = ctx;
            raw.cfg.anomaly.feature_kind = FeatureKind::raw;
            raw.cfg.anomaly.scorer = Scorer::lof;
            Context cyc = ctx;
            cyc.cfg.anomaly.feature_kind = FeatureKind::cycle;
            cyc.cfg.anomaly.scorer = Scorer::nn_distance;
            cmd_anomaly(cyc);
            cmd_anomaly(raw);
            return cmd_diag(ctx, {});
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return config_error;
    } catch (const MissingArtifact& e) {
        std::cerr << "missing artifact: " << e.what() << '\n';
        return missing_artifact;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return numeric_failure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return config_error;
    }
    return ok;
}
