// End-to-end checks of the command-line binary: exit codes, artifact
// production, and the train -> eval -> diagnose -> compare pipeline.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>
#include <sys/wait.h>

#include "qrlab/datagen.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = QRLAB_CLI_PATH;

int run_cli(const std::string& args, const std::string& stdout_file = "") {
    std::string cmd = kCli + " " + args;
    if (!stdout_file.empty())
        cmd += " > " + stdout_file + " 2>&1";
    else
        cmd += " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("qrlab_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Flags for a model tiny enough that training finishes in well under a second.
std::string tiny_flags() {
    return "--stages 2 --queries 8 --dim 6 --ffn-hidden 8 --classes 2 --grid-h 4 --grid-w 4 "
           "--train-size 8 --val-size 4 --epochs 2 --batch-size 4 --noise-sigma 0.1";
}

} // namespace

TEST(Cli, HelpSucceedsAndMissingSubcommandFails) {
    EXPECT_EQ(run_cli("--help"), 0);
    EXPECT_EQ(run_cli(""), 1);
    EXPECT_EQ(run_cli("no_such_subcommand"), 1);
}

TEST(Cli, TrainEvalDiagnoseRoundTrip) {
    const fs::path dir = fresh_dir("pipeline");
    const std::string run = (dir / "run").string();

    ASSERT_EQ(run_cli("train --out " + run + " --strategy sqr " + tiny_flags()), 0);
    EXPECT_TRUE(fs::exists(run + "/checkpoint.bin"));
    EXPECT_TRUE(fs::exists(run + "/config.json"));
    EXPECT_TRUE(fs::exists(run + "/metrics.jsonl"));

    ASSERT_EQ(run_cli("eval --checkpoint " + run + "/checkpoint.bin"), 0);
    EXPECT_TRUE(fs::exists(run + "/eval_val.dump.jsonl"));
    const std::string csv = slurp(run + "/ap_val.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "stage,ap50,ap75");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3); // header + one row per stage

    ASSERT_EQ(run_cli("diagnose --dump " + run + "/eval_val.dump.jsonl"), 0);
    const auto report = nlohmann::json::parse(slurp(run + "/diagnostics.json"));
    EXPECT_EQ(report.at("schema"), "qrlab.diagnostics");
    ASSERT_EQ(report.at("sections").size(), 2u);
    EXPECT_DOUBLE_EQ(report.at("sections")[0].at("iou_thresh").get<double>(), 0.5);
}

TEST(Cli, ExitCodesDistinguishFailureClasses) {
    const fs::path dir = fresh_dir("exitcodes");

    std::ofstream(dir / "bad.json") << "{\"bogus_key\": 1}\n";
    EXPECT_EQ(run_cli("train --config " + (dir / "bad.json").string()), 1);

    std::ofstream(dir / "trash.bin") << "not a checkpoint";
    EXPECT_EQ(run_cli("eval --checkpoint " + (dir / "trash.bin").string()), 3);
    EXPECT_EQ(run_cli("diagnose --dump " + (dir / "trash.bin").string()), 3);

    const std::string run = (dir / "diverged").string();
    EXPECT_EQ(run_cli("train --out " + run + " --lr 1e200 " + tiny_flags()), 2);
    EXPECT_TRUE(fs::exists(run + "/diverged_state.json"));
    EXPECT_TRUE(fs::exists(run + "/diverged_checkpoint.bin"));
}

TEST(Cli, OutputRootPrefixesRelativePaths) {
    const fs::path root = fresh_dir("outroot");
    setenv("QRLAB_OUT", root.c_str(), 1);
    const int code = run_cli("train --out nested/run " + tiny_flags());
    unsetenv("QRLAB_OUT");
    ASSERT_EQ(code, 0);
    EXPECT_TRUE(fs::exists(root / "nested/run/checkpoint.bin"));
}

TEST(Cli, CompareSkipsIncompleteRuns) {
    const fs::path dir = fresh_dir("compare");
    const std::string a = (dir / "a").string(), b = (dir / "b").string();
    ASSERT_EQ(run_cli("train --out " + a + " --strategy baseline " + tiny_flags()), 0);
    ASSERT_EQ(run_cli("train --out " + b + " --strategy dqr " + tiny_flags()), 0);

    const std::string table = (dir / "table.txt").string();
    ASSERT_EQ(run_cli("compare " + a + " " + b + " " + (dir / "missing").string(), table), 0);
    const std::string out = slurp(table);
    EXPECT_NE(out.find("baseline"), std::string::npos);
    EXPECT_NE(out.find("dqr"), std::string::npos);
    EXPECT_NE(out.find("skipping incomplete run"), std::string::npos);

    EXPECT_EQ(run_cli("compare " + a), 1); // one directory is not a comparison
}

TEST(Cli, DatagenWritesLoadableArchive) {
    const fs::path dir = fresh_dir("datagen");
    const std::string path = (dir / "val.bin").string();
    ASSERT_EQ(run_cli("datagen --out " + path + " --split val --size 6 --seed 11 --grid-h 8 "
                      "--grid-w 8 --classes 3"),
              0);
    qrlab::ArchiveHeader header;
    const auto samples = qrlab::load_archive(path, &header);
    EXPECT_EQ(samples.size(), 6u);
    EXPECT_EQ(header.grid_h, 8);
    EXPECT_EQ(header.classes, 3);
    qrlab::DatagenConfig cfg;
    cfg.grid_h = cfg.grid_w = 8;
    cfg.classes = 3;
    const auto again = qrlab::dataset(cfg, qrlab::Split::Val, 6, 11);
    ASSERT_EQ(again.size(), samples.size());
    EXPECT_EQ(again[0].features.cells, samples[0].features.cells);
}

TEST(Cli, GradcheckPasses) { EXPECT_EQ(run_cli("gradcheck"), 0); }
