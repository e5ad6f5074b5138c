// Command-line surface for the query-recollection training laboratory:
// train / eval / diagnose / compare / gradcheck / datagen.
//
// Exit codes: 0 success, 1 configuration error, 2 training divergence,
// 3 schema mismatch in a versioned file.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qrlab/gradcheck.hpp"
#include "qrlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace qrlab;

namespace {

// Relative output paths land under $QRLAB_OUT when it is set.
std::string resolve_out(const std::string& dir) {
    if (dir.empty() || fs::path(dir).is_absolute()) return dir;
    const char* root = std::getenv("QRLAB_OUT");
    if (!root || !*root) return dir;
    return (fs::path(root) / dir).string();
}

std::string rate_str(const RateResult& r) {
    char buf[64];
    if (auto rate = r.rate())
        std::snprintf(buf, sizeof(buf), "%d/%d = %.4f", r.triggered, r.total, *rate);
    else
        std::snprintf(buf, sizeof(buf), "%d/%d (n/a)", r.triggered, r.total);
    return buf;
}

void print_report(const DiagnosticsReport& report) {
    for (const auto& sec : report.sections) {
        std::printf("== IoU > %.2f ==\n", sec.iou_thresh);
        std::printf("  stage AP:");
        for (std::size_t s = 0; s < sec.per_stage_ap.size(); ++s)
            std::printf(" %zu:%.4f", s + 1, sec.per_stage_ap[s]);
        std::printf("\n");
        std::printf("  TP fading:        %s\n", rate_str(sec.fading).c_str());
        std::printf("  FP exacerbation:  %s\n", rate_str(sec.exacerbation).c_str());
        std::printf("  attribution (searched stages -> fading | exacerbation):\n");
        for (const auto& row : sec.attribution) {
            std::string stages;
            for (std::size_t i = 0; i < row.stages.size(); ++i)
                stages += (i ? "," : "") + std::to_string(row.stages[i]);
            std::printf("    {%s}: %s | %s\n", stages.c_str(), rate_str(row.fading).c_str(),
                        rate_str(row.exacerbation).c_str());
        }
        std::printf("  final AP: %.4f   oracle-replacement AP: %.4f\n", sec.final_ap, sec.oracle_ap);
    }
}

void write_ap_csv(const std::string& path, const EvalResult& ev) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ConfigError("cannot write AP table: " + path);
    os << (ev.recurrent ? "depth" : "stage");
    for (double t : ev.thresholds) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), ",ap%g", t * 100.0);
        os << buf;
    }
    os << "\n";
    for (int row = 0; row < ev.rows(); ++row) {
        os << (row + 1);
        for (double ap : ev.ap[static_cast<std::size_t>(row)]) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), ",%.6f", ap);
            os << buf;
        }
        os << "\n";
    }
}

struct TrainArgs {
    std::string config_file;
    std::optional<std::string> out;
    std::optional<std::string> strategy;
    std::optional<int> sqr_start, design, stages, queries, dim, ffn_hidden, classes;
    std::optional<int> grid_h, grid_w, epochs, batch_size, train_size, val_size;
    std::optional<bool> shared_stage;
    std::optional<double> lr, weight_decay, noise_sigma;
    std::optional<std::uint64_t> seed, data_seed;
    std::optional<std::string> sd_preset;
};

RunConfig effective_config(const TrainArgs& a) {
    RunConfig rc = a.config_file.empty() ? RunConfig{} : load_run_config(a.config_file);
    if (a.out) rc.out_dir = *a.out;
    if (a.strategy) rc.strategy.kind = strategy_kind_from_name(*a.strategy);
    if (a.sqr_start) rc.strategy.sqr_start = *a.sqr_start;
    if (a.design) rc.strategy.design = *a.design;
    if (a.stages) rc.stages = *a.stages;
    if (a.queries) rc.queries = *a.queries;
    if (a.dim) rc.dim = *a.dim;
    if (a.ffn_hidden) rc.ffn_hidden = *a.ffn_hidden;
    if (a.classes) rc.classes = *a.classes;
    if (a.grid_h) rc.grid_h = *a.grid_h;
    if (a.grid_w) rc.grid_w = *a.grid_w;
    if (a.shared_stage) rc.shared_stage = *a.shared_stage;
    if (a.epochs) rc.epochs = *a.epochs;
    if (a.batch_size) rc.batch_size = *a.batch_size;
    if (a.train_size) rc.train_size = *a.train_size;
    if (a.val_size) rc.val_size = *a.val_size;
    if (a.lr) rc.lr = *a.lr;
    if (a.weight_decay) rc.weight_decay = *a.weight_decay;
    if (a.noise_sigma) rc.noise_sigma = *a.noise_sigma;
    if (a.seed) rc.train_seed = *a.seed;
    if (a.data_seed) rc.data_seed = *a.data_seed;
    if (a.sd_preset) rc.strategy.removal_probs = stochdepth_preset(*a.sd_preset, rc.stages);
    validate_run_config(rc);
    return rc;
}

int cmd_train(const TrainArgs& args) {
    const RunConfig rc = effective_config(args);
    const std::string run_dir = resolve_out(rc.out_dir);
    std::printf("training strategy=%s stages=%d queries=%d epochs=%d -> %s\n",
                strategy_name(rc.strategy.kind), rc.stages, rc.queries, rc.epochs,
                run_dir.c_str());
    const TrainResult tr = train_run(rc, run_dir);
    std::printf("done: %ld steps in %.1f s\n", tr.steps, tr.wall_seconds);
    std::printf("checkpoint: %s\nmetrics: %s\n", tr.checkpoint_path.c_str(), tr.metrics_path.c_str());
    return 0;
}

void check_stage_parameters(const Checkpoint& ck) {
    const DecoderConfig dc = ck.config.decoder_config();
    for (int s = 1; s <= dc.stages; ++s) {
        const std::string prefix = stage_params(dc, s).prefix + "/";
        bool found = false;
        for (const auto& [name, e] : ck.params)
            if (name.rfind(prefix, 0) == 0) {
                found = true;
                break;
            }
        if (!found)
            throw ConfigError("checkpoint has no parameters for stage " + std::to_string(s) +
                              "; stage count in the embedded config does not match the stored model");
    }
}

int cmd_eval(const std::string& ck_path, const std::string& split_name, int size,
             std::string out_dir) {
    Checkpoint ck = load_checkpoint(ck_path);
    validate_run_config(ck.config);
    check_stage_parameters(ck);
    const Split split = split_name == "train" ? Split::Train : Split::Val;
    if (out_dir.empty()) out_dir = fs::path(ck_path).parent_path().string();
    if (out_dir.empty()) out_dir = ".";
    const EvalResult ev = eval_checkpoint(ck, split, size);

    std::printf("%s-pathway AP over %zu %s images:\n", ev.recurrent ? "recurrent" : "basic",
                ev.images.size(), split_name.c_str());
    std::printf("%s", ev.recurrent ? "depth" : "stage");
    for (double t : ev.thresholds) std::printf("  AP@%.2f", t);
    std::printf("\n");
    for (int row = 0; row < ev.rows(); ++row) {
        std::printf("%5d", row + 1);
        for (double ap : ev.ap[static_cast<std::size_t>(row)]) std::printf("  %.4f", ap);
        std::printf("\n");
    }

    const std::string dump_path = out_dir + "/eval_" + split_name + ".dump.jsonl";
    write_dump(dump_path, ev.images, static_cast<int>(ev.ap.size()), ck.config.classes);
    const std::string csv_path = out_dir + "/ap_" + split_name + ".csv";
    write_ap_csv(csv_path, ev);
    std::printf("dump: %s\nap table: %s\n", dump_path.c_str(), csv_path.c_str());
    return 0;
}

int cmd_diagnose(const std::string& dump_path, std::vector<double> thresholds,
                 std::string out_dir) {
    if (thresholds.empty()) thresholds = {0.5, 0.75};
    const auto images = load_dump(dump_path);
    const DiagnosticsReport report = diagnose(images, thresholds);
    print_report(report);
    if (out_dir.empty()) out_dir = fs::path(dump_path).parent_path().string();
    if (out_dir.empty()) out_dir = ".";
    const std::string report_path = out_dir + "/diagnostics.json";
    std::ofstream os(report_path, std::ios::trunc);
    if (!os) throw ConfigError("cannot write report: " + report_path);
    os << report_json(report).dump(2) << "\n";
    std::printf("report: %s\n", report_path.c_str());
    return 0;
}

struct RunSummary {
    std::string dir;
    std::string strategy;
    double ap50 = 0.0, ap75 = 0.0;
    RateResult fading, exacerbation;
    double wall = -1.0;
};

int cmd_compare(const std::vector<std::string>& dirs) {
    if (dirs.size() < 2) throw ConfigError("compare needs at least two run directories");
    std::vector<RunSummary> rows;
    for (const auto& dir : dirs) {
        const std::string resolved = resolve_out(dir);
        const std::string ck_path = resolved + "/checkpoint.bin";
        if (!fs::exists(ck_path)) {
            std::fprintf(stderr, "warning: skipping incomplete run %s (no checkpoint)\n",
                         resolved.c_str());
            continue;
        }
        Checkpoint ck = load_checkpoint(ck_path);
        EvalResult ev = eval_checkpoint(ck, Split::Val);
        RunSummary r;
        r.dir = dir;
        r.strategy = strategy_name(ck.config.strategy.kind);
        r.ap50 = ev.ap.back()[0];
        r.ap75 = ev.ap.back()[1];
        auto [fade, exac] = stage_attribution(ev.images, 0.5, all_earlier_stages(ev.images));
        r.fading = fade;
        r.exacerbation = exac;
        const std::string metrics_path = resolved + "/metrics.jsonl";
        if (fs::exists(metrics_path)) {
            const auto records = load_metrics(metrics_path);
            if (!records.empty()) r.wall = records.back().wall_seconds;
        } else {
            std::fprintf(stderr, "warning: %s has no metrics file; wall time unavailable\n",
                         resolved.c_str());
        }
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw ConfigError("no completed runs to compare");

    std::printf("%-24s %-12s %8s %8s %16s %16s %10s %8s\n", "run", "strategy", "AP@0.50",
                "AP@0.75", "TP fading", "FP exacerb.", "wall [s]", "ratio");
    const double base_wall = rows.front().wall;
    for (const auto& r : rows) {
        std::string wall = "n/a", ratio = "n/a";
        char buf[32];
        if (r.wall >= 0.0) {
            std::snprintf(buf, sizeof(buf), "%.1f", r.wall);
            wall = buf;
            if (base_wall > 0.0) {
                std::snprintf(buf, sizeof(buf), "%.2fx", r.wall / base_wall);
                ratio = buf;
            }
        }
        std::printf("%-24s %-12s %8.4f %8.4f %16s %16s %10s %8s\n", r.dir.c_str(),
                    r.strategy.c_str(), r.ap50, r.ap75, rate_str(r.fading).c_str(),
                    rate_str(r.exacerbation).c_str(), wall.c_str(), ratio.c_str());
    }
    return 0;
}

int cmd_gradcheck() {
    DecoderConfig dc;
    dc.stages = 2;
    dc.queries = 3;
    dc.dim = 6;
    dc.ffn_hidden = 8;
    dc.classes = 2;
    dc.grid_h = 2;
    dc.grid_w = 2;

    ParamStore ps;
    Rng rng(derive_seed(2024, 7));
    create_decoder_params(ps, dc, rng);
    FeatureMap feat;
    feat.h = dc.grid_h;
    feat.w = dc.grid_w;
    feat.channels = dc.feat_channels();
    for (int i = 0; i < feat.cell_count() * feat.channels; ++i)
        feat.cells.push_back(rng.normal() * 0.5);

    GroundTruth gt;
    gt.boxes = {{0.35, 0.4, 0.3, 0.25}, {0.7, 0.6, 0.2, 0.3}};
    gt.labels = {0, 1};
    const LossWeights w;

    // The discrete assignment is computed once and held fixed while
    // differentiating.
    std::vector<Assignment> frozen;
    {
        Graph g;
        DecodePass pass(g, ps, dc, feat);
        QuerySet q = pass.init_queries();
        for (int s = 1; s <= dc.stages; ++s) {
            q = pass.decode_stage(s, q);
            frozen.push_back(hungarian(build_cost_matrix(materialize_predictions(pass.predict_heads(q)), gt, w)));
        }
    }
    const auto build_loss = [&](Graph& g, ParamStore& params) {
        DecodePass pass(g, params, dc, feat);
        QuerySet q = pass.init_queries();
        Tensor total;
        for (int s = 1; s <= dc.stages; ++s) {
            q = pass.decode_stage(s, q);
            const Tensor t = set_loss(pass.predict_heads(q), gt, frozen[static_cast<std::size_t>(s - 1)], w).total;
            total = s == 1 ? t : add(total, t);
        }
        return total;
    };
    const GradCheckReport report = grad_check(build_loss, ps, 1e-4);
    std::printf("gradient check over %zu parameter tensors: max relative error %.3e (tolerance 1e-4)\n",
                report.entries.size(), report.max_rel_err);
    for (const auto& e : report.entries)
        if (e.max_rel_err > 1e-4)
            std::printf("  FAIL %s: analytic %.6e vs numeric %.6e\n", e.name.c_str(),
                        e.analytic_at_worst, e.numeric_at_worst);
    std::printf(report.ok ? "PASS\n" : "FAIL\n");
    return report.ok ? 0 : 1;
}

int cmd_datagen(const std::string& out, const std::string& split_name, int size,
                std::uint64_t seed, const DatagenConfig& cfg) {
    const Split split = split_name == "train" ? Split::Train : Split::Val;
    const auto samples = dataset(cfg, split, size, seed);
    const std::string path = resolve_out(out);
    if (const auto parent = fs::path(path).parent_path(); !parent.empty())
        fs::create_directories(parent);
    save_archive(path, cfg, samples);
    std::printf("wrote %zu %s samples (%dx%d grid, %d channels) to %s\n", samples.size(),
                split_name.c_str(), cfg.grid_h, cfg.grid_w, cfg.feat_channels(), path.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"training laboratory for query-based detection decoders"};
    app.require_subcommand(1);

    TrainArgs targs;
    auto* train = app.add_subcommand("train", "train a model with a recollection strategy");
    train->add_option("--config", targs.config_file, "JSON config file");
    train->add_option("--out", targs.out, "run directory (relative paths land under $QRLAB_OUT)");
    train->add_option("--strategy", targs.strategy,
                      "baseline|dqr|sqr|group_design|reweight|stochdepth|dqrr");
    train->add_option("--sqr-start", targs.sqr_start, "first recollecting stage for sqr");
    train->add_option("--design", targs.design, "grouped-pathway design number (1-6)");
    train->add_option("--sd-preset", targs.sd_preset,
                      "stochastic-depth preset: constant|increasing|decreasing");
    train->add_option("--stages", targs.stages);
    train->add_option("--queries", targs.queries);
    train->add_option("--dim", targs.dim);
    train->add_option("--ffn-hidden", targs.ffn_hidden);
    train->add_option("--classes", targs.classes);
    train->add_option("--grid-h", targs.grid_h);
    train->add_option("--grid-w", targs.grid_w);
    train->add_flag_callback("--shared-stage", [&targs] { targs.shared_stage = true; },
                             "share one stage parameter set across all stages");
    train->add_option("--epochs", targs.epochs);
    train->add_option("--batch-size", targs.batch_size);
    train->add_option("--train-size", targs.train_size);
    train->add_option("--val-size", targs.val_size);
    train->add_option("--lr", targs.lr);
    train->add_option("--weight-decay", targs.weight_decay);
    train->add_option("--noise-sigma", targs.noise_sigma);
    train->add_option("--seed", targs.seed, "training seed");
    train->add_option("--data-seed", targs.data_seed, "dataset seed");

    std::string eval_ck, eval_split = "val", eval_out;
    int eval_size = -1;
    auto* eval = app.add_subcommand("eval", "per-stage AP table and prediction dump");
    eval->add_option("--checkpoint", eval_ck)->required();
    eval->add_option("--split", eval_split)->check(CLI::IsMember({"train", "val"}));
    eval->add_option("--size", eval_size, "number of images (default: full split)");
    eval->add_option("--out", eval_out, "output directory (default: checkpoint's)");

    std::string diag_dump, diag_out;
    std::vector<double> diag_thresholds;
    auto* diag = app.add_subcommand("diagnose", "stage-wise rates, attribution, oracle AP");
    diag->add_option("--dump", diag_dump)->required();
    diag->add_option("--thresholds", diag_thresholds, "IoU thresholds (default 0.5 0.75)");
    diag->add_option("--out", diag_out, "output directory (default: dump's)");

    std::vector<std::string> compare_dirs;
    auto* comp = app.add_subcommand("compare", "side-by-side summary of completed runs");
    comp->add_option("dirs", compare_dirs, "run directories")->expected(-1);

    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the full model");

    std::string dg_out, dg_split = "train";
    int dg_size = kDefaultTrainSize;
    std::uint64_t dg_seed = 1;
    DatagenConfig dg_cfg;
    auto* dgen = app.add_subcommand("datagen", "write a sample archive");
    dgen->add_option("--out", dg_out)->required();
    dgen->add_option("--split", dg_split)->check(CLI::IsMember({"train", "val"}));
    dgen->add_option("--size", dg_size);
    dgen->add_option("--seed", dg_seed);
    dgen->add_option("--grid-h", dg_cfg.grid_h);
    dgen->add_option("--grid-w", dg_cfg.grid_w);
    dgen->add_option("--classes", dg_cfg.classes);
    dgen->add_option("--noise-sigma", dg_cfg.noise_sigma);

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train(targs);
        if (eval->parsed()) return cmd_eval(eval_ck, eval_split, eval_size, eval_out);
        if (diag->parsed()) return cmd_diagnose(diag_dump, diag_thresholds, diag_out);
        if (comp->parsed()) return cmd_compare(compare_dirs);
        if (grad->parsed()) return cmd_gradcheck();
        if (dgen->parsed()) return cmd_datagen(dg_out, dg_split, dg_size, dg_seed, dg_cfg);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "divergence: %s\n", e.what());
        return 2;
    } catch (const SchemaError& e) {
        std::fprintf(stderr, "schema error: %s\n", e.what());
        return 3;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
