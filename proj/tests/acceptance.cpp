// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "test_util.hpp"

using namespace mvad;
namespace fs = std::filesystem;
using mvad::testing::TempDir;

namespace {

// Pinned tolerances and thresholds.
constexpr double kOracleTol = 1e-9;
constexpr double kGradTol = 1e-4;
constexpr double kGradEps = 1e-4;
constexpr double kAurocTol = 1e-9;
constexpr double kOverfitFraction = 0.5;
constexpr int kOverfitSteps = 200;
constexpr double kDetectAuroc = 0.80;
constexpr int kDetectSeeds = 5;
constexpr int kDetectMinPass = 4;
constexpr double kAblationMargin = 0.02;

// Desk-scale training budget shared by criteria 6, 7 and 8.
constexpr int kEpochs = 40;
constexpr int kWarmup = 4;
constexpr double kLr = 1e-3;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << std::fixed << v;
    return os.str();
}

std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

Image<double> grid2x2(double a, double b, double c, double d) {
    Image<double> img(2, 2, 1);
    img.at(0, 0, 0) = a;
    img.at(0, 1, 0) = b;
    img.at(1, 0, 0) = c;
    img.at(1, 1, 0) = d;
    return img;
}

Outcome loss_oracles() {
    std::vector<std::pair<std::string, double>> errs;
    const auto target = grid2x2(0.1, 0.2, 0.3, 0.4);
    const auto shifted = grid2x2(1.1, 1.2, 1.3, 1.4);
    errs.emplace_back("intensity mean", std::abs(intensity_loss(shifted, target) - 1.0));
    errs.emplace_back("intensity sum", std::abs(intensity_loss(shifted, target, Reduction::sum) - 4.0));

    const auto flat = grid2x2(0.5, 0.5, 0.5, 0.5);
    const auto checker = grid2x2(0, 1, 1, 0);
    errs.emplace_back("gradient sum", std::abs(gradient_loss(checker, flat, Reduction::sum) - 4.0));
    errs.emplace_back("gradient mean", std::abs(gradient_loss(checker, flat) - 1.0));

    Mat<double> a(1, 2), b(1, 2);
    a << 0.0, 0.0;
    b << 0.0, std::log(3.0);
    const double kl = 0.5 * (0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75) + 0.25 * std::log(0.25 / 0.5) +
                             0.75 * std::log(0.75 / 0.5));
    errs.emplace_back("consistency", std::abs(consistency_loss(a, b) - kl));

    Image<double> zero(10, 10, 1);
    auto one = zero;
    one.at(3, 4, 0) = 1.0;
    errs.emplace_back("psnr 20dB", std::abs(psnr(zero, one).db - 20.0));
    auto two = one;
    two.at(7, 1, 0) = 1.0;
    errs.emplace_back("psnr doubling", std::abs(psnr(zero, one).db - psnr(zero, two).db - 10.0 * std::log10(2.0)));

    const auto n = normalize_scores({10, 20, 30});
    errs.emplace_back("normalize", std::max({std::abs(n[0]), std::abs(n[1] - 0.5), std::abs(n[2] - 1.0)}));

    auto worst = *std::max_element(errs.begin(), errs.end(),
                                   [](const auto& x, const auto& y) { return x.second < y.second; });
    return {worst.second < kOracleTol, "max abs error " + sci(worst.second) + " (" + worst.first + ")"};
}

Outcome gradient_correctness() {
    auto cfg = ModelConfig::preset("tiny");
    cfg.embed_dim = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.image_height = cfg.image_width = 8;
    cfg.patch_size = 4;
    std::mt19937_64 rng(9);
    const auto clip = mvad::testing::random_clip(rng, cfg.num_frames + 2, 8, 8, cfg.channels);
    const auto windows = clip_windows(clip, cfg.num_frames, 0);
    auto params = init_params<double>(cfg, 4);
    params.for_each([](const std::string&, Mat<double>& t) { t *= 10.0; });
    std::vector<BatchItem> batch{{&windows[0], 0}, {&windows[1], 1}};
    double worst = 0;
    std::string where;
    for (auto mode : {TrainMode::baseline, TrainMode::pasrm, TrainMode::pasrm_nct}) {
        TrainConfig tc;
        tc.mode = mode;
        tc.mask_ratio = 0.5;
        tc.pseudo_probability = 0.5;
        for (const auto& [name, err] : mvad::testing::gradient_check(params, batch, tc, kGradEps))
            if (err > worst) {
                worst = err;
                where = to_string(mode) + " " + name;
            }
    }
    return {worst < kGradTol, "max relative error " + sci(worst) + " (" + where + ")"};
}

Outcome masking_invariants() {
    std::mt19937_64 rng(42);
    int bad_count = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int rows = 1 + static_cast<int>(rng() % 16), cols = 1 + static_cast<int>(rng() % 16);
        const std::int64_t n = rows * cols;
        const std::int64_t k = static_cast<std::int64_t>(rng() % 1025);
        const auto m = generate_mask(PatchGrid{4, rows, cols}, static_cast<double>(k) / 1024.0, rng());
        bad_count += m.count() != static_cast<int>((2 * k * n + 1024) / 2048);
    }

    const auto cfg = ModelConfig::preset("tiny");
    const auto params = init_params<double>(cfg, 3);
    const auto clip = mvad::testing::random_clip(rng, cfg.num_frames + 1, cfg.image_height, cfg.image_width, cfg.channels);
    const auto windows = clip_windows(clip, cfg.num_frames, 0);
    const auto grid = PatchGrid::for_frame(cfg.image_height, cfg.image_width, cfg.patch_size);
    const auto empty = generate_mask(grid, 0.0, 17);
    const bool collapse = encode(params, windows[0], &empty).tokens == encode(params, windows[0], nullptr).tokens;

    bool deterministic = true;
    for (std::uint64_t s = 0; s < 100; ++s)
        deterministic = deterministic && generate_mask(grid, 0.75, s) == generate_mask(grid, 0.75, s);

    return {bad_count == 0 && collapse && deterministic,
            std::to_string(bad_count) + "/1000 count mismatches, empty-mask encode " + (collapse ? "exact" : "differs") +
                ", seeded masks " + (deterministic ? "repeat" : "vary")};
}

Outcome auroc_oracle_match() {
    std::mt19937_64 rng(2024);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng() % 199;
        const int levels = 1 + static_cast<int>(rng() % 20);
        std::vector<double> s(n);
        std::vector<int> l(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng() % static_cast<unsigned>(levels)) / levels;
            l[i] = static_cast<int>(rng() % 2);
        }
        l[0] = 0;
        l[1] = 1;
        worst = std::max(worst, std::abs(auroc(s, l) - auroc_oracle(s, l)));
    }
    return {worst < kAurocTol, "max |fast - oracle| " + sci(worst) + " over 1000 instances"};
}

Outcome overfit_sanity() {
    SyntheticSpec spec;
    spec.num_train_clips = 1;
    spec.num_test_clips = 0;
    spec.seed = 1;
    const auto ds = generate_synthetic(spec);
    const auto mc = ModelConfig::preset("tiny");
    TrainConfig tc;
    tc.lr = kLr;
    tc.warmup_epochs = kWarmup;
    const int windows = spec.frames_per_clip - tc.T;
    const int steps_per_epoch = (windows + tc.batch_size - 1) / tc.batch_size;
    tc.epochs = kOverfitSteps / steps_per_epoch;
    const auto r = run_training<double>(ds.train, mc, tc);
    const double first = r.metrics.front().loss.l_N, last = r.metrics.back().loss.l_N;
    return {static_cast<int>(r.metrics.size()) == kOverfitSteps && last < kOverfitFraction * first,
            std::to_string(r.metrics.size()) + " steps, l_N " + fmt(first, 5) + " -> " + fmt(last, 5) + " (ratio " +
                fmt(last / first, 3) + ")"};
}

TrainConfig desk_config(TrainMode mode, std::uint64_t seed) {
    TrainConfig tc;
    tc.mode = mode;
    tc.epochs = kEpochs;
    tc.warmup_epochs = kWarmup;
    tc.lr = kLr;
    tc.mask_ratio = 0.75;
    tc.seed = seed;
    return tc;
}

double desk_auroc(TrainMode mode, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.seed = seed;
    const auto ds = generate_synthetic(spec);
    const auto tc = desk_config(mode, seed);
    const auto r = run_training<double>(ds.train, ModelConfig::preset("tiny"), tc);
    return evaluate_dataset(score_dataset(r.state.params, ds.test, tc.T)).auroc;
}

std::map<TrainMode, std::vector<double>> g_auroc;

std::string join(const std::vector<double>& v) {
    std::string out;
    for (double x : v) out += (out.empty() ? "" : " ") + fmt(x);
    return out;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

Outcome desk_detection() {
    const auto& v = g_auroc.at(TrainMode::pasrm_nct);
    const auto hits = std::count_if(v.begin(), v.end(), [](double a) { return a >= kDetectAuroc; });
    return {hits >= kDetectMinPass, std::to_string(hits) + "/" + std::to_string(v.size()) + " seeds >= " +
                                        fmt(kDetectAuroc, 2) + " (pasrm_nct AUROC " + join(v) + ")"};
}

Outcome ablation_ordering() {
    const double b = median(g_auroc.at(TrainMode::baseline));
    const double p = median(g_auroc.at(TrainMode::pasrm));
    const double n = median(g_auroc.at(TrainMode::pasrm_nct));
    const bool ok = b <= p && p <= n && n - b >= kAblationMargin;
    const auto& vb = g_auroc.at(TrainMode::baseline);
    const auto& vn = g_auroc.at(TrainMode::pasrm_nct);
    int wins = 0;
    for (std::size_t i = 0; i < vb.size(); ++i) wins += vn[i] > vb[i];
    return {ok, "pasrm_nct beats baseline on " + std::to_string(wins) + "/" + std::to_string(vb.size()) +
                    " seeds; median baseline " + fmt(b) + ", pasrm " + fmt(p) + ", pasrm_nct " + fmt(n) + "; baseline [" +
                    join(g_auroc.at(TrainMode::baseline)) + "], pasrm [" + join(g_auroc.at(TrainMode::pasrm)) + "]"};
}

int shell(const std::string& cmd) {
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

Outcome cli_determinism() {
    TempDir dir("acceptance_det");
    const std::string cli = std::string("\"") + MVAD_CLI_PATH + "\"";
    std::string err;
    for (const char* run : {"a", "b"}) {
        const fs::path root = dir.path / run;
        const std::string q = "\"" + root.string() + "\"";
        const std::string quiet = " > /dev/null 2>&1";
        int rc = shell(cli + " synth --seed 1 --out " + q + "/data" + quiet);
        if (rc == 0)
            rc = shell(cli + " train --quiet --seed 1 --mode pasrm_nct --epochs " + std::to_string(kEpochs) +
                       " --warmup-epochs " + std::to_string(kWarmup) + " --lr " + fmt(kLr, 6) + " --data " + q +
                       "/data --out " + q + "/run" + quiet);
        if (rc == 0)
            rc = shell(cli + " eval --checkpoint " + q + "/run/model_final.mvad --data " + q + "/data --out " + q +
                       "/eval" + quiet);
        if (rc != 0) return {false, std::string("run ") + run + " exited with " + std::to_string(rc)};
    }
    const auto metrics_a = slurp(dir.path / "a/run/metrics.jsonl"), metrics_b = slurp(dir.path / "b/run/metrics.jsonl");
    const auto eval_a = slurp(dir.path / "a/eval/eval.json"), eval_b = slurp(dir.path / "b/eval/eval.json");
    const bool same = !metrics_a.empty() && !eval_a.empty() && metrics_a == metrics_b && eval_a == eval_b;
    const auto auroc = nlohmann::json::parse(eval_a).at("auroc").get<double>();
    return {same, std::string("metrics.jsonl ") + (metrics_a == metrics_b ? "identical" : "differ") + ", eval.json " +
                      (eval_a == eval_b ? "identical" : "differ") + " (AUROC " + fmt(auroc) + ")"};
}

Outcome occ_contract() {
    SyntheticSpec spec;
    spec.num_train_clips = 0;
    spec.num_test_clips = 2;
    spec.frames_per_clip = 12;
    spec.anomaly_span = {4, 8};
    spec.seed = 5;
    const auto labeled = generate_synthetic(spec).test;
    auto stripped = labeled;
    for (auto& v : stripped.videos) v.labels.reset();
    auto flipped = labeled;
    for (auto& v : flipped.videos)
        for (int& l : *v.labels) l = 1 - l;

    TempDir dir("acceptance_occ");
    std::vector<std::string> finals;
    for (const auto& [tag, ds] : {std::pair<std::string, const VideoDataset*>{"labeled", &labeled},
                                  {"stripped", &stripped},
                                  {"flipped", &flipped}}) {
        TrainConfig tc;
        tc.epochs = 3;
        tc.warmup_epochs = 1;
        tc.lr = kLr;
        TrainOptions opts;
        opts.out_dir = dir.path / tag;
        run_training<double>(*ds, ModelConfig::preset("tiny"), tc, opts);
        finals.push_back(slurp(opts.out_dir / "model_final.mvad"));
    }
    const bool same = !finals[0].empty() && finals[0] == finals[1] && finals[0] == finals[2];
    return {same, std::string("labeled, label-stripped and label-flipped checkpoints ") +
                      (same ? "bit-identical" : "differ") + " (" + std::to_string(finals[0].size()) + " bytes)"};
}

}  // namespace

int main() {
    using clock = std::chrono::steady_clock;
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"loss oracles", loss_oracles},
        {"gradient correctness", gradient_correctness},
        {"masking invariants", masking_invariants},
        {"AUROC oracle", auroc_oracle_match},
        {"overfit sanity", overfit_sanity},
        {"desk-scale detection",
         [] {
             for (int s = 1; s <= kDetectSeeds; ++s)
                 g_auroc[TrainMode::pasrm_nct].push_back(desk_auroc(TrainMode::pasrm_nct, static_cast<std::uint64_t>(s)));
             return desk_detection();
         }},
        {"ablation ordering",
         [] {
             for (auto mode : {TrainMode::baseline, TrainMode::pasrm})
                 for (int s = 1; s <= kDetectSeeds; ++s)
                     g_auroc[mode].push_back(desk_auroc(mode, static_cast<std::uint64_t>(s)));
             return ablation_ordering();
         }},
        {"determinism", cli_determinism},
        {"OCC contract", occ_contract},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto t0 = clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(clock::now() - t0).count();
        failed += !o.pass;
        std::cout << "criterion " << (i + 1) << " [" << criteria[i].first << "]: " << (o.pass ? "PASS" : "FAIL") << " "
                  << o.detail << " (" << fmt(secs, 1) << " s)" << std::endl;
    }
    std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed"
              << std::endl;
    return failed == 0 ? 0 : 1;
}
