// JSON checkpoint for the projection head: config, parameters (row-major with
// declared shapes), running statistics, optimiser state and the global seed.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"

#include "cyclecl/core.hpp"
#include "cyclecl/simhead.hpp"

namespace cyclecl {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    HeadConfig config;
    HeadParams params;
    std::optional<AdamState> adam;
    std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const HeadConfig& c) {
    return {{"in_channels", c.in_channels},   {"hidden_channels", c.hidden_channels},
            {"out_dim", c.out_dim},           {"kernel_size", c.kernel_size},
            {"padding", c.padding()},         {"pooling", std::string(to_string(c.pooling))},
            {"leaky_slope", c.leaky_slope},   {"use_batchnorm", c.use_batchnorm},
            {"use_l2norm", c.use_l2norm},     {"bn_momentum", c.bn_momentum},
            {"bn_eps", c.bn_eps}};
}

inline HeadConfig head_config_from_json(const nlohmann::json& j) {
    HeadConfig c;
    c.in_channels = j.value("in_channels", c.in_channels);
    c.hidden_channels = j.value("hidden_channels", c.hidden_channels);
    c.out_dim = j.value("out_dim", c.out_dim);
    c.kernel_size = j.value("kernel_size", c.kernel_size);
    if (j.contains("pooling")) c.pooling = pooling_from_string(j.at("pooling").get<std::string>());
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    c.use_batchnorm = j.value("use_batchnorm", c.use_batchnorm);
    c.use_l2norm = j.value("use_l2norm", c.use_l2norm);
    c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
    c.bn_eps = j.value("bn_eps", c.bn_eps);
    validate(c);
    return c;
}

namespace detail {

inline nlohmann::json tensor_json(const std::vector<double>& data, std::vector<std::size_t> shape) {
    return {{"shape", std::move(shape)}, {"data", data}};
}

inline nlohmann::json param_set_json(const ParamSet& p, const HeadConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& info : kParamTensors)
        j[std::string(info.name)] = tensor_json(p.*info.member, param_shape(info.name, cfg));
    return j;
}

inline std::vector<double> read_tensor(const nlohmann::json& j, const std::vector<std::size_t>& shape,
                                       const std::string& name) {
    const auto declared = j.at("shape").get<std::vector<std::size_t>>();
    if (declared != shape) throw ParseError("checkpoint tensor '" + name + "' has an unexpected shape");
    auto data = j.at("data").get<std::vector<double>>();
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    if (data.size() != n) throw ParseError("checkpoint tensor '" + name + "' has the wrong element count");
    return data;
}

inline ParamSet param_set_from_json(const nlohmann::json& j, const HeadConfig& cfg) {
    ParamSet p;
    for (const auto& info : kParamTensors)
        p.*info.member = read_tensor(j.at(std::string(info.name)), param_shape(info.name, cfg), std::string(info.name));
    return p;
}

}  // namespace detail

inline nlohmann::json to_json(const Checkpoint& ck) {
    nlohmann::json j;
    j["version"] = kCheckpointVersion;
    j["seed"] = ck.seed;
    j["config"] = to_json(ck.config);
    j["params"] = detail::param_set_json(ck.params.weights, ck.config);
    j["bn_running_mean"] = detail::tensor_json(ck.params.bn_running_mean, {ck.config.hidden_channels});
    j["bn_running_var"] = detail::tensor_json(ck.params.bn_running_var, {ck.config.hidden_channels});
    if (ck.adam) {
        const AdamState& a = *ck.adam;
        j["adam"] = {{"t", a.t},
                     {"lr", a.lr},
                     {"weight_decay", a.weight_decay},
                     {"beta1", a.beta1},
                     {"beta2", a.beta2},
                     {"eps", a.eps},
                     {"m", detail::param_set_json(a.m, ck.config)},
                     {"v", detail::param_set_json(a.v, ck.config)}};
    } else {
        j["adam"] = nullptr;
    }
    return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    try {
        const int version = j.at("version").get<int>();
        if (version != kCheckpointVersion)
            throw ParseError("checkpoint version " + std::to_string(version) + " is not supported");
        Checkpoint ck;
        ck.seed = j.at("seed").get<std::uint64_t>();
        ck.config = head_config_from_json(j.at("config"));
        const HeadConfig& cfg = ck.config;
        ck.params.weights = detail::param_set_from_json(j.at("params"), cfg);
        ck.params.bn_running_mean = detail::read_tensor(j.at("bn_running_mean"), {cfg.hidden_channels}, "bn_running_mean");
        ck.params.bn_running_var = detail::read_tensor(j.at("bn_running_var"), {cfg.hidden_channels}, "bn_running_var");
        for (double v : ck.params.bn_running_var)
            if (!(v > 0.0)) throw ParseError("checkpoint bn_running_var must be positive");
        if (!j.at("adam").is_null()) {
            const auto& a = j.at("adam");
            AdamState s;
            s.t = a.at("t").get<std::uint64_t>();
            s.lr = a.at("lr").get<double>();
            s.weight_decay = a.at("weight_decay").get<double>();
            s.beta1 = a.at("beta1").get<double>();
            s.beta2 = a.at("beta2").get<double>();
            s.eps = a.at("eps").get<double>();
            s.m = detail::param_set_from_json(a.at("m"), cfg);
            s.v = detail::param_set_from_json(a.at("v"), cfg);
            ck.adam = std::move(s);
        }
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write checkpoint " + path.string());
    f << to_json(ck).dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw MissingArtifact("checkpoint not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return checkpoint_from_json(j);
}

}  // namespace cyclecl
