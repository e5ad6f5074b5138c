#pragma once

// Run configuration: a flat JSON document with one nested "strategy" object.
// Parsing is strict (unknown keys are errors) and serialize(parse(s)) is a
// fixed-point, so configs can be echoed into run directories and compared
// byte-for-byte.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qrlab/datagen.hpp"
#include "qrlab/decoder.hpp"
#include "qrlab/errors.hpp"
#include "qrlab/recollection.hpp"

namespace qrlab {

struct RunConfig {
    // model
    int stages = 6;
    int queries = 20;
    int dim = 64;
    int ffn_hidden = 128;
    int classes = 4;
    int grid_h = 16;
    int grid_w = 16;
    bool shared_stage = false; // one parameter set reused by every stage
    // data
    int train_size = kDefaultTrainSize;
    int val_size = kDefaultValSize;
    double noise_sigma = 0.25;
    std::uint64_t data_seed = 1;
    // strategy
    StrategyConfig strategy;
    // optimization
    double lr = 1e-3;
    double weight_decay = 1e-4;
    int epochs = 20;
    int batch_size = 8;
    std::uint64_t train_seed = 1;
    // output
    std::string out_dir = "run";

    DecoderConfig decoder_config() const {
        DecoderConfig d;
        d.stages = stages;
        d.queries = queries;
        d.dim = dim;
        d.ffn_hidden = ffn_hidden;
        d.classes = classes;
        d.grid_h = grid_h;
        d.grid_w = grid_w;
        d.shared_stage = shared_stage;
        return d;
    }

    DatagenConfig datagen_config() const {
        DatagenConfig d;
        d.grid_h = grid_h;
        d.grid_w = grid_w;
        d.classes = classes;
        d.noise_sigma = noise_sigma;
        return d;
    }
};

namespace detail {

using ojson = nlohmann::ordered_json;

inline void reject_unknown(const ojson& j, const std::vector<std::string>& allowed,
                           const std::string& scope) {
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const auto& k : allowed)
            if (item.key() == k) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError("unknown config key: " + scope + item.key());
    }
}

template <typename T>
void read_into(const ojson& j, const char* key, T& out, const std::string& scope) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("bad value for config key " + scope + key + ": " + e.what());
    }
}

} // namespace detail

inline std::string strategy_kind_name(StrategyKind k) { return strategy_name(k); }

inline StrategyKind strategy_kind_from_name(const std::string& name) {
    for (StrategyKind k : {StrategyKind::Baseline, StrategyKind::DQR, StrategyKind::SQR,
                           StrategyKind::GroupDesign, StrategyKind::Reweight, StrategyKind::StochDepth,
                           StrategyKind::DQRR})
        if (strategy_name(k) == name) return k;
    throw ConfigError("unknown strategy kind: " + name);
}

/// Per-stage removal probabilities by preset name: "constant" = 0.1
/// everywhere, "increasing" = 0 to 0.5, "decreasing" = 0.5 to 0.
inline std::vector<double> stochdepth_preset(const std::string& name, int stages) {
    if (stages < 2) throw ConfigError("stochastic depth presets need at least 2 stages");
    std::vector<double> probs(static_cast<std::size_t>(stages), 0.0);
    for (int s = 0; s < stages; ++s) {
        const double t = static_cast<double>(s) / (stages - 1);
        if (name == "constant")
            probs[static_cast<std::size_t>(s)] = 0.1;
        else if (name == "increasing")
            probs[static_cast<std::size_t>(s)] = 0.5 * t;
        else if (name == "decreasing")
            probs[static_cast<std::size_t>(s)] = 0.5 * (1.0 - t);
        else
            throw ConfigError("unknown stochastic depth preset: " + name);
    }
    return probs;
}

inline RunConfig parse_run_config(const std::string& text) {
    detail::ojson j;
    try {
        j = detail::ojson::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    detail::reject_unknown(j,
                           {"stages", "queries", "dim", "ffn_hidden", "classes", "grid_h", "grid_w",
                            "shared_stage", "train_size", "val_size", "noise_sigma", "data_seed",
                            "strategy", "lr", "weight_decay", "epochs", "batch_size", "train_seed",
                            "out_dir"},
                           "");
    RunConfig rc;
    detail::read_into(j, "stages", rc.stages, "");
    detail::read_into(j, "queries", rc.queries, "");
    detail::read_into(j, "dim", rc.dim, "");
    detail::read_into(j, "ffn_hidden", rc.ffn_hidden, "");
    detail::read_into(j, "classes", rc.classes, "");
    detail::read_into(j, "grid_h", rc.grid_h, "");
    detail::read_into(j, "grid_w", rc.grid_w, "");
    detail::read_into(j, "shared_stage", rc.shared_stage, "");
    detail::read_into(j, "train_size", rc.train_size, "");
    detail::read_into(j, "val_size", rc.val_size, "");
    detail::read_into(j, "noise_sigma", rc.noise_sigma, "");
    detail::read_into(j, "data_seed", rc.data_seed, "");
    detail::read_into(j, "lr", rc.lr, "");
    detail::read_into(j, "weight_decay", rc.weight_decay, "");
    detail::read_into(j, "epochs", rc.epochs, "");
    detail::read_into(j, "batch_size", rc.batch_size, "");
    detail::read_into(j, "train_seed", rc.train_seed, "");
    detail::read_into(j, "out_dir", rc.out_dir, "");
    if (j.contains("strategy")) {
        const auto& s = j.at("strategy");
        if (!s.is_object()) throw ConfigError("config key strategy must be an object");
        detail::reject_unknown(
            s, {"kind", "sqr_start", "design", "stage_weights", "removal_probs", "collection_cap"},
            "strategy.");
        std::string kind = strategy_name(rc.strategy.kind);
        detail::read_into(s, "kind", kind, "strategy.");
        rc.strategy.kind = strategy_kind_from_name(kind);
        detail::read_into(s, "sqr_start", rc.strategy.sqr_start, "strategy.");
        detail::read_into(s, "design", rc.strategy.design, "strategy.");
        detail::read_into(s, "stage_weights", rc.strategy.stage_weights, "strategy.");
        detail::read_into(s, "removal_probs", rc.strategy.removal_probs, "strategy.");
        detail::read_into(s, "collection_cap", rc.strategy.collection_cap, "strategy.");
    }
    return rc;
}

inline std::string serialize_run_config(const RunConfig& rc) {
    detail::ojson j;
    j["stages"] = rc.stages;
    j["queries"] = rc.queries;
    j["dim"] = rc.dim;
    j["ffn_hidden"] = rc.ffn_hidden;
    j["classes"] = rc.classes;
    j["grid_h"] = rc.grid_h;
    j["grid_w"] = rc.grid_w;
    j["shared_stage"] = rc.shared_stage;
    j["train_size"] = rc.train_size;
    j["val_size"] = rc.val_size;
    j["noise_sigma"] = rc.noise_sigma;
    j["data_seed"] = rc.data_seed;
    detail::ojson s;
    s["kind"] = strategy_name(rc.strategy.kind);
    s["sqr_start"] = rc.strategy.sqr_start;
    s["design"] = rc.strategy.design;
    s["stage_weights"] = rc.strategy.stage_weights;
    s["removal_probs"] = rc.strategy.removal_probs;
    s["collection_cap"] = rc.strategy.collection_cap;
    j["strategy"] = std::move(s);
    j["lr"] = rc.lr;
    j["weight_decay"] = rc.weight_decay;
    j["epochs"] = rc.epochs;
    j["batch_size"] = rc.batch_size;
    j["train_seed"] = rc.train_seed;
    j["out_dir"] = rc.out_dir;
    return j.dump(2) + "\n";
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_run_config(buf.str());
}

/// Full validation before any compute.
inline void validate_run_config(const RunConfig& rc) {
    if (rc.stages < 1) throw ConfigError("stages must be positive");
    if (rc.queries < 1) throw ConfigError("queries must be positive");
    if (rc.queries < rc.datagen_config().max_objects)
        throw ConfigError("queries must cover the maximum scene object count (" +
                          std::to_string(rc.datagen_config().max_objects) + ")");
    if (rc.dim < 1 || rc.ffn_hidden < 1) throw ConfigError("model dims must be positive");
    if (rc.classes < 1) throw ConfigError("classes must be positive");
    if (rc.grid_h < 1 || rc.grid_w < 1) throw ConfigError("grid dims must be positive");
    if (rc.train_size < 1 || rc.val_size < 1) throw ConfigError("dataset sizes must be positive");
    if (rc.noise_sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
    if (rc.lr <= 0.0) throw ConfigError("lr must be positive");
    if (rc.weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (rc.epochs < 1) throw ConfigError("epochs must be positive");
    if (rc.batch_size < 1) throw ConfigError("batch size must be positive");
    if (rc.out_dir.empty()) throw ConfigError("out_dir must not be empty");
    validate_strategy(rc.strategy, rc.stages);
}

} // namespace qrlab
