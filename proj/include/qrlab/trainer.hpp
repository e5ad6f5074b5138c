#pragma once

// Deterministic training and evaluation driver. One run = one directory
// holding the echoed config, per-step metrics, and an end-of-epoch
// checkpoint. Everything except wall-clock fields is a pure function of
// (config, seeds).

#include <chrono>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "qrlab/checkpoint.hpp"
#include "qrlab/config.hpp"
#include "qrlab/datagen.hpp"
#include "qrlab/decoder.hpp"
#include "qrlab/diagnostics.hpp"
#include "qrlab/dump.hpp"
#include "qrlab/loss.hpp"
#include "qrlab/metrics.hpp"
#include "qrlab/recollection.hpp"

namespace qrlab {

struct TrainResult {
    std::string run_dir;
    std::string checkpoint_path;
    std::string metrics_path;
    std::string config_path;
    long steps = 0;
    double wall_seconds = 0.0;
};

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ConfigError("cannot write file: " + path);
    os << text;
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

} // namespace detail

/// Builds the model parameters for a config, including extra query-set
/// embeddings when the strategy trains parallel groups.
inline ParamStore create_run_params(const RunConfig& rc) {
    ParamStore ps;
    Rng rng(derive_seed(rc.train_seed, 0x1417ULL));
    const DecoderConfig dc = rc.decoder_config();
    create_decoder_params(ps, dc, rng);
    if (rc.strategy.kind == StrategyKind::GroupDesign)
        create_group_embeddings(ps, dc, group_count(rc.strategy.design), rng);
    return ps;
}

inline TrainResult train_run(const RunConfig& rc, const std::string& run_dir) {
    validate_run_config(rc);
    std::filesystem::create_directories(run_dir);
    const auto start = std::chrono::steady_clock::now();

    TrainResult result;
    result.run_dir = run_dir;
    result.config_path = run_dir + "/config.json";
    result.metrics_path = run_dir + "/metrics.jsonl";
    result.checkpoint_path = run_dir + "/checkpoint.bin";
    detail::write_text(result.config_path, serialize_run_config(rc));

    const DecoderConfig dc = rc.decoder_config();
    const auto train = dataset(rc.datagen_config(), Split::Train, rc.train_size, rc.data_seed);

    ParamStore ps = create_run_params(rc);
    OptimState opt;
    opt.lr = rc.lr;
    opt.weight_decay = rc.weight_decay;
    MetricsWriter metrics(result.metrics_path);
    const auto schedule = supervision_schedule(rc.strategy, rc.stages);
    const LossWeights weights;

    std::vector<int> order(static_cast<std::size_t>(rc.train_size));
    for (int i = 0; i < rc.train_size; ++i) order[static_cast<std::size_t>(i)] = i;

    long step = 0;
    for (int epoch = 0; epoch < rc.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(rc.train_seed, 0x5a0fULL, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        for (int begin = 0; begin < rc.train_size; begin += rc.batch_size) {
            const int end = std::min(begin + rc.batch_size, rc.train_size);
            const int bn = end - begin;
            ++step;
            // One skip mask per mini-batch.
            Rng step_rng(derive_seed(rc.train_seed, 0x5de9ULL, static_cast<std::uint64_t>(step)));
            std::vector<char> mask;
            if (rc.strategy.kind == StrategyKind::StochDepth)
                mask = stochdepth_mask(rc.strategy.removal_probs, step_rng);

            std::vector<double> stage_loss(static_cast<std::size_t>(rc.stages), 0.0);
            double total = 0.0;
            for (int k = begin; k < end; ++k) {
                const RenderedSample& sample = train[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
                const auto dump_state = [&](const std::string& reason) {
                    save_checkpoint(run_dir + "/diverged_checkpoint.bin", rc, ps, opt);
                    detail::ojson state;
                    state["step"] = step;
                    state["epoch"] = epoch;
                    state["sample_index"] = order[static_cast<std::size_t>(k)];
                    state["reason"] = reason;
                    detail::write_text(run_dir + "/diverged_state.json", state.dump(2) + "\n");
                };
                Graph g;
                DecodePass pass(g, ps, dc, sample.features);
                LossBreakdown lb;
                try {
                    SupervisedBatch batch = rc.strategy.kind == StrategyKind::StochDepth
                                                ? stochdepth_forward(pass, pass.init_queries(), mask).batch
                                                : run_strategy(pass, rc.strategy, step_rng);
                    lb = compute_losses(pass, batch, sample.gt, weights, rc.strategy);
                } catch (const DivergenceError& e) {
                    dump_state(e.what());
                    throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step) +
                                          "; state dumped to " + run_dir);
                }
                if (!std::isfinite(lb.grand_total)) {
                    dump_state(std::isnan(lb.grand_total) ? "nan loss" : "inf loss");
                    throw DivergenceError("non-finite loss at step " + std::to_string(step) +
                                          "; state dumped to " + run_dir);
                }
                backward(scale(lb.tape_total, 1.0 / bn), ps);
                for (int s = 0; s < rc.stages; ++s)
                    stage_loss[static_cast<std::size_t>(s)] += lb.stage_total[static_cast<std::size_t>(s)] / bn;
                total += lb.grand_total / bn;
            }
            opt_step(ps, opt);

            MetricsRecord rec;
            rec.step = step;
            rec.per_stage_loss = stage_loss;
            rec.total_loss = total;
            rec.lr = opt.lr;
            rec.supervision_counts = schedule;
            rec.wall_seconds = detail::seconds_since(start);
            metrics.write(rec);
        }
        save_checkpoint(result.checkpoint_path, rc, ps, opt);
    }
    result.steps = step;
    result.wall_seconds = detail::seconds_since(start);
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation: basic-pathway chains (or recurrent chains for DQRR) plus the
// per-stage AP table.

struct EvalResult {
    std::vector<ImageEval> images;
    std::vector<double> thresholds;
    std::vector<std::vector<double>> ap; // ap[row][threshold index]; rows = chain length
    bool recurrent = false;

    int rows() const { return static_cast<int>(ap.size()); }
};

/// Decodes the split and collects every stage's predictions per image. For
/// DQRR-configured runs the chain is the shared stage applied recurrently
/// (depth = configured stage count); everything else uses the plain
/// sequential pathway.
inline EvalResult eval_params(const RunConfig& rc, ParamStore& ps, Split split, int size,
                              const std::vector<double>& thresholds = {0.5, 0.75}) {
    const DecoderConfig dc = rc.decoder_config();
    const auto samples = dataset(rc.datagen_config(), split, size, rc.data_seed);
    EvalResult result;
    result.thresholds = thresholds;
    result.recurrent = rc.strategy.kind == StrategyKind::DQRR;
    const int chain_len = rc.stages;

    for (const auto& sample : samples) {
        Graph g;
        DecodePass pass(g, ps, dc, sample.features);
        ImageEval img;
        img.gt = sample.gt;
        if (result.recurrent) {
            const auto sets = dqrr_infer(pass, pass.init_queries(), chain_len);
            for (const auto& q : sets) img.preds.per_stage.push_back(pass.predict(q));
        } else {
            QuerySet q = pass.init_queries();
            for (int s = 1; s <= rc.stages; ++s) {
                q = pass.decode_stage(s, q);
                img.preds.per_stage.push_back(pass.predict(q));
            }
        }
        result.images.push_back(std::move(img));
    }

    for (int row = 1; row <= chain_len; ++row) {
        std::vector<double> aps;
        for (double t : thresholds) aps.push_back(stage_average_precision(result.images, row, t));
        result.ap.push_back(std::move(aps));
    }
    return result;
}

inline EvalResult eval_checkpoint(Checkpoint& ck, Split split, int size = -1,
                                  const std::vector<double>& thresholds = {0.5, 0.75}) {
    if (size < 0) size = split == Split::Val ? ck.config.val_size : ck.config.train_size;
    return eval_params(ck.config, ck.params, split, size, thresholds);
}

} // namespace qrlab
