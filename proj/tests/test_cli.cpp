// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "test_util.hpp"

namespace fs = std::filesystem;
using mvad::testing::TempDir;

namespace {

struct CliResult {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

CliResult mvad_run(const std::string& args, const fs::path& scratch) {
    const fs::path out = scratch / "stdout.txt", err = scratch / "stderr.txt";
    const std::string cmd = std::string("\"") + MVAD_CLI_PATH + "\" " + args + " > \"" + out.string() + "\" 2> \"" +
                            err.string() + "\"";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
    return files;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

const char* kSmallSynth = "--train-clips 2 --test-clips 2 --frames 8 --height 16 --width 16 --radius 3 --sprites 1 "
                          "--anomaly-start 3 --anomaly-end 6";

// Shared small pipeline: synth -> train, built once for the suite.
class CliPipeline : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir("cli_pipeline");
        const fs::path d = dir_->path;
        ASSERT_EQ(mvad_run("synth --out " + q(d / "data") + " --seed 3 " + kSmallSynth, d).code, 0);
        const CliResult r = mvad_run("train --data " + q(d / "data") + " --out " + q(d / "run") +
                                   " --epochs 2 --warmup-epochs 1 --lr 1e-3 --T 2 --quiet",
                               d);
        ASSERT_EQ(r.code, 0) << r.err;
    }
    static void TearDownTestSuite() {
        delete dir_;
        dir_ = nullptr;
    }
    static fs::path root() { return dir_->path; }
    static fs::path ckpt() { return dir_->path / "run" / "model_final.mvad"; }
    static fs::path data() { return dir_->path / "data"; }

    static TempDir* dir_;
};

TempDir* CliPipeline::dir_ = nullptr;

}  // namespace

TEST(CliUsage, MissingOutIsUsageError) {
    TempDir d("cli_usage");
    EXPECT_EQ(mvad_run("synth --seed 1", d.path).code, 2);
    EXPECT_EQ(mvad_run("", d.path).code, 2);
    EXPECT_EQ(mvad_run("bogus", d.path).code, 2);
}

TEST(CliUsage, HelpListsDefaults) {
    TempDir d("cli_help");
    const CliResult r = mvad_run("train --help", d.path);
    EXPECT_EQ(r.code, 0);
    for (const char* s : {"--lr", "0.0001", "--weight-decay", "0.05", "--warmup-epochs", "10", "--mask-ratio", "0.75",
                          "--lambda-cst", "0.3"})
        EXPECT_NE(r.out.find(s), std::string::npos) << s;
}

TEST(CliSynth, DeterministicTrees) {
    TempDir d("cli_synth");
    ASSERT_EQ(mvad_run("synth --seed 7 --out " + q(d.path / "d1") + " " + kSmallSynth, d.path).code, 0);
    ASSERT_EQ(mvad_run("synth --seed 7 --out " + q(d.path / "d2") + " " + kSmallSynth, d.path).code, 0);
    const auto a = tree(d.path / "d1"), b = tree(d.path / "d2");
    EXPECT_EQ(a, b);
    EXPECT_TRUE(a.count("spec.json"));
    EXPECT_TRUE(a.count("resolved_config.json"));
}

TEST(CliSynth, NonEmptyOutNeedsForce) {
    TempDir d("cli_force");
    const std::string cmd = "synth --seed 1 --out " + q(d.path / "d") + " " + kSmallSynth;
    ASSERT_EQ(mvad_run(cmd, d.path).code, 0);
    const auto before = tree(d.path / "d");
    const CliResult again = mvad_run(cmd, d.path);
    EXPECT_EQ(again.code, 2);
    EXPECT_NE(again.err.find("--force"), std::string::npos);
    ASSERT_EQ(mvad_run(cmd + " --force", d.path).code, 0);
    EXPECT_EQ(tree(d.path / "d"), before);
}

TEST(CliSynth, OddShapeLabelsFollowSpan) {
    TempDir d("cli_odd");
    ASSERT_EQ(mvad_run("synth --anomaly-kind odd_shape --out " + q(d.path / "d") + " " + kSmallSynth, d.path).code, 0);
    int ones = 0;
    for (const auto& clip : fs::directory_iterator(d.path / "d" / "test")) {
        std::ifstream in(clip.path() / "labels.txt");
        int k = 0;
        for (std::string l; std::getline(in, l); ++k) {
            if (l == "1") {
                ++ones;
                EXPECT_TRUE(k >= 3 && k < 6) << k;
            }
        }
        EXPECT_EQ(k, 8);
    }
    EXPECT_EQ(ones, 3);
    EXPECT_EQ(mvad_run("synth --anomaly-kind sideways --out " + q(d.path / "e"), d.path).code, 2);
}

TEST(CliTrain, ValidationErrors) {
    TempDir d("cli_train_bad");
    ASSERT_EQ(mvad_run("synth --out " + q(d.path / "data") + " " + kSmallSynth, d.path).code, 0);
    const std::string base = "train --data " + q(d.path / "data") + " --out " + q(d.path / "run") + " --T 2 ";
    EXPECT_EQ(mvad_run(base + "--mask-ratio 1.5", d.path).code, 2);
    const CliResult unknown = mvad_run(base + "--set learning_rate=0.1", d.path);
    EXPECT_EQ(unknown.code, 2);
    EXPECT_NE(unknown.err.find("learning_rate"), std::string::npos);
    {
        std::ofstream(d.path / "bad.json") << R"({"epochs": 2, "momentum": 0.9})";
    }
    const CliResult bad_file = mvad_run(base + "--config " + q(d.path / "bad.json"), d.path);
    EXPECT_EQ(bad_file.code, 2);
    EXPECT_NE(bad_file.err.find("momentum"), std::string::npos);
    EXPECT_EQ(mvad_run(base + "--patch-size 5", d.path).code, 2);
    EXPECT_EQ(mvad_run("train --data " + q(d.path / "nowhere") + " --out " + q(d.path / "r2"), d.path).code, 4);
}

TEST(CliTrain, FlagsOverrideConfigFile) {
    TempDir d("cli_resolve");
    ASSERT_EQ(mvad_run("synth --out " + q(d.path / "data") + " " + kSmallSynth, d.path).code, 0);
    {
        std::ofstream(d.path / "cfg.json") << R"({"epochs": 1, "lr": 0.5, "warmup_epochs": 0, "mode": "baseline"})";
    }
    const CliResult r = mvad_run("train --quiet --data " + q(d.path / "data") + " --out " + q(d.path / "run") + " --config " +
                               q(d.path / "cfg.json") + " --lr 0.002 --T 2 --set weights.lambda_cst=0.5",
                           d.path);
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream in(d.path / "run" / "resolved_config.json");
    const auto j = nlohmann::json::parse(in);
    EXPECT_EQ(j.at("train").at("lr").get<double>(), 0.002);
    EXPECT_EQ(j.at("train").at("epochs").get<int>(), 1);
    EXPECT_EQ(j.at("train").at("mode").get<std::string>(), "baseline");
    EXPECT_EQ(j.at("train").at("weights").at("lambda_cst").get<double>(), 0.5);
    EXPECT_EQ(j.at("train").at("weight_decay").get<double>(), 0.05);
    EXPECT_EQ(j.at("model").at("num_frames").get<int>(), 2);
}

TEST_F(CliPipeline, TrainOutputs) {
    EXPECT_TRUE(fs::exists(ckpt()));
    EXPECT_TRUE(fs::exists(root() / "run" / "metrics.jsonl"));
    EXPECT_TRUE(fs::exists(root() / "run" / "resolved_config.json"));
    EXPECT_TRUE(fs::exists(root() / "run" / "ckpt_epoch_0002.mvad"));
}

TEST_F(CliPipeline, ScoreRowsPerClip) {
    const fs::path out = root() / "scores";
    const CliResult r = mvad_run("score --force --checkpoint " + q(ckpt()) + " --data " + q(data()) + " --out " + q(out), root());
    ASSERT_EQ(r.code, 0) << r.err;
    int csvs = 0;
    for (const auto& e : fs::directory_iterator(out)) {
        if (e.path().extension() != ".csv") continue;
        ++csvs;
        std::ifstream in(e.path());
        int lines = 0;
        for (std::string l; std::getline(in, l);) ++lines;
        EXPECT_EQ(lines - 1, 8 - 2) << e.path();
    }
    EXPECT_EQ(csvs, 2);
}

TEST_F(CliPipeline, EvalFromCheckpointAndFromScores) {
    const CliResult direct = mvad_run("eval --force --checkpoint " + q(ckpt()) + " --data " + q(data()) + " --out " +
                                    q(root() / "eval_direct"),
                                root());
    ASSERT_EQ(direct.code, 0) << direct.err;
    std::ifstream in(root() / "eval_direct" / "eval.json");
    const auto rep = nlohmann::json::parse(in);
    for (const char* k : {"auroc", "num_frames", "num_positive", "per_clip_auroc"}) EXPECT_TRUE(rep.contains(k)) << k;
    EXPECT_EQ(rep.at("num_frames").get<int>(), 12);
    EXPECT_EQ(rep.at("num_positive").get<int>(), 3);

    ASSERT_EQ(mvad_run("score --force --checkpoint " + q(ckpt()) + " --data " + q(data()) + " --out " +
                           q(root() / "s2"),
                       root())
                  .code,
              0);
    ASSERT_EQ(mvad_run("eval --force --scores-dir " + q(root() / "s2") + " --out " + q(root() / "eval_csv"), root()).code, 0);
    std::ifstream in2(root() / "eval_csv" / "eval.json");
    const auto rep2 = nlohmann::json::parse(in2);
    EXPECT_NEAR(rep2.at("auroc").get<double>(), rep.at("auroc").get<double>(), 1e-9);

    EXPECT_EQ(mvad_run("eval --force --out " + q(root() / "eval_none"), root()).code, 2);
}

TEST_F(CliPipeline, DiffmapSelfCheckIsNeutral) {
    const fs::path out = root() / "diff";
    const CliResult r = mvad_run("diffmap --force --self-check --frame 4 --checkpoint " + q(ckpt()) + " --data " + q(data()) +
                               " --out " + q(out),
                           root());
    ASSERT_EQ(r.code, 0) << r.err;
    int triplets = 0;
    for (const auto& e : fs::directory_iterator(out)) {
        const std::string name = e.path().filename().string();
        if (!name.ends_with("_000004_diff.png")) continue;
        ++triplets;
        const auto img = mvad::read_png(e.path(), 1);
        for (float v : img.data) EXPECT_EQ(v, 128.0f / 255.0f);
        const std::string stem = name.substr(0, name.size() - std::string("_diff.png").size());
        EXPECT_TRUE(fs::exists(out / (stem + "_target.png")));
        EXPECT_TRUE(fs::exists(out / (stem + "_pred.png")));
    }
    EXPECT_EQ(triplets, 1);

    const CliResult all = mvad_run("diffmap --force --checkpoint " + q(ckpt()) + " --data " + q(data()) + " --out " + q(out), root());
    ASSERT_EQ(all.code, 0) << all.err;
    int diffs = 0;
    for (const auto& e : fs::directory_iterator(out)) diffs += e.path().filename().string().ends_with("_diff.png");
    EXPECT_EQ(diffs, 6);
}

TEST_F(CliPipeline, GeometryMismatchNamesBothShapes) {
    const fs::path other = root() / "data32";
    ASSERT_EQ(mvad_run("synth --force --out " + q(other) +
                           " --train-clips 1 --test-clips 2 --frames 8 --height 32 --width 32 --radius 3 "
                           "--anomaly-start 3 --anomaly-end 6",
                       root())
                  .code,
              0);
    const CliResult r = mvad_run("score --force --checkpoint " + q(ckpt()) + " --data " + q(other) + " --out " +
                               q(root() / "mismatch"),
                           root());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("32x32x1"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("16x16x1"), std::string::npos) << r.err;
}

TEST(CliEval, PerfectScoresAndUndefinedMetric) {
    TempDir d("cli_eval");
    fs::create_directories(d.path / "perfect");
    {
        std::ofstream a(d.path / "perfect" / "a.csv");
        a << "frame_index,psnr,regular,anomaly,label\n4,30,1,0,0\n5,20,0,1,1\n6,29,0.9,0.1,0\n";
    }
    const CliResult ok = mvad_run("eval --scores-dir " + q(d.path / "perfect") + " --out " + q(d.path / "r1"), d.path);
    ASSERT_EQ(ok.code, 0) << ok.err;
    std::ifstream in(d.path / "r1" / "eval.json");
    EXPECT_EQ(nlohmann::json::parse(in).at("auroc").get<double>(), 1.0);

    fs::create_directories(d.path / "normal");
    {
        std::ofstream a(d.path / "normal" / "a.csv");
        a << "frame_index,psnr,regular,anomaly,label\n4,30,1,0,0\n5,20,0,1,0\n";
    }
    EXPECT_EQ(mvad_run("eval --scores-dir " + q(d.path / "normal") + " --out " + q(d.path / "r2"), d.path).code, 3);
    EXPECT_EQ(mvad_run("eval --scores-dir " + q(d.path / "missing") + " --out " + q(d.path / "r3"), d.path).code, 4);
}
