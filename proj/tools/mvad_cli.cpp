// SPDX-License-Identifier: Apache-2.0
// mvad: synth | train | score | eval | diffmap
#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvad/mvad.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mvad;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

constexpr const char* kResolvedConfig = "resolved_config.json";

void prepare_out_dir(const fs::path& dir, bool force, bool keep_existing = false) {
    std::error_code ec;
    if (fs::exists(dir, ec) && !fs::is_directory(dir, ec)) throw ConfigError(dir.string() + " exists and is not a directory");
    if (!keep_existing && fs::is_directory(dir, ec) && !fs::is_empty(dir, ec)) {
        if (!force) throw ConfigError("output directory " + dir.string() + " is not empty (pass --force to overwrite)");
        for (const auto& e : fs::directory_iterator(dir)) fs::remove_all(e.path());
    }
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse " + path.string() + ": " + e.what());
    }
}

/// `key=value` overrides; dotted keys address nested objects, values parse as
/// JSON when possible and fall back to plain strings.
json overrides_to_json(const std::vector<std::string>& sets) {
    json out = json::object();
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
        const std::string key = s.substr(0, eq), raw = s.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::exception&) {
            value = raw;
        }
        json* node = &out;
        std::size_t start = 0;
        for (std::size_t dot; (dot = key.find('.', start)) != std::string::npos; start = dot + 1) {
            json& child = (*node)[key.substr(start, dot - start)];
            if (child.is_null()) child = json::object();
            node = &child;
        }
        (*node)[key.substr(start)] = value;
    }
    return out;
}

/// Native frame size of a split: the first frame of the first clip.
std::pair<int, int> probe_geometry(const fs::path& root, Split split) {
    const fs::path dir = root / to_string(split);
    if (!fs::is_directory(dir)) throw IngestionError("missing split directory " + dir.string());
    std::vector<fs::path> clips;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) clips.push_back(e.path());
    std::sort(clips.begin(), clips.end());
    for (const auto& c : clips) {
        std::vector<fs::path> frames;
        for (const auto& e : fs::directory_iterator(c))
            if (e.is_regular_file() && e.path().extension() == ".png") frames.push_back(e.path());
        if (frames.empty()) continue;
        std::sort(frames.begin(), frames.end());
        const Frame f = read_png(frames.front(), 1);
        return {f.height, f.width};
    }
    throw IngestionError("no frames found under " + dir.string());
}

VideoDataset load_for_model(const fs::path& root, Split split, const ModelConfig& mc) {
    const auto [h, w] = probe_geometry(root, split);
    if (h != mc.image_height || w != mc.image_width)
        throw ShapeError("dataset frames are " + shape_string(h, w, mc.channels) + " but the checkpoint model expects " +
                         shape_string(mc.image_height, mc.image_width, mc.channels));
    return load_dataset(root, split, {h, w}, mc.channels, mc.patch_size);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    fs::path out;
    fs::path config;
    bool force = false;
    SyntheticSpec spec;
    std::string anomaly_kind = "fast_motion";
    int span_start = 8, span_end = 16;
};

int cmd_synth(const SynthArgs& a, const CLI::App& sub) {
    SyntheticSpec spec;
    if (!a.config.empty()) spec = read_json(a.config).get<SyntheticSpec>();
    auto given = [&](const char* name) { return sub.get_option(name)->count() > 0; };
    if (given("--seed")) spec.seed = a.spec.seed;
    if (given("--train-clips")) spec.num_train_clips = a.spec.num_train_clips;
    if (given("--test-clips")) spec.num_test_clips = a.spec.num_test_clips;
    if (given("--frames")) spec.frames_per_clip = a.spec.frames_per_clip;
    if (given("--height")) spec.frame_height = a.spec.frame_height;
    if (given("--width")) spec.frame_width = a.spec.frame_width;
    if (given("--channels")) spec.channels = a.spec.channels;
    if (given("--sprites")) spec.sprites_per_clip = a.spec.sprites_per_clip;
    if (given("--radius")) spec.sprite_radius = a.spec.sprite_radius;
    if (given("--speed")) spec.sprite_speed_normal = a.spec.sprite_speed_normal;
    if (given("--anomaly-factor")) spec.anomaly_speed_factor = a.spec.anomaly_speed_factor;
    if (given("--anomaly-kind")) spec.anomaly_kind = parse_anomaly_kind(a.anomaly_kind);
    if (given("--anomaly-start")) spec.anomaly_span.first = a.span_start;
    if (given("--anomaly-end")) spec.anomaly_span.second = a.span_end;
    spec.validate();

    prepare_out_dir(a.out, a.force);
    write_json(a.out / kResolvedConfig, json{{"synth", spec}});
    const auto ds = generate_synthetic(spec);
    write_synthetic(spec, ds, a.out);
    std::cout << "wrote " << ds.train.videos.size() << " train and " << ds.test.videos.size() << " test clips to "
              << a.out.string() << '\n';
    return kExitOk;
}

struct TrainArgs {
    fs::path data, out, config, resume, pretrained;
    bool force = false, quiet = false, stop_grad = false;
    std::vector<std::string> sets;
    TrainConfig tc;
    std::string mode = "pasrm_nct";
    std::string preset = "tiny";
    int patch_size = 8, height = 0, width = 0, channels = 1, keep_last = 3;
};

int cmd_train(const TrainArgs& a, const CLI::App& sub) {
    TrainConfig tc;
    if (!a.config.empty()) apply_json(tc, read_json(a.config));
    apply_json(tc, overrides_to_json(a.sets));
    auto given = [&](const char* name) { return sub.get_option(name)->count() > 0; };
    if (given("--mode")) tc.mode = parse_train_mode(a.mode);
    if (given("--epochs")) tc.epochs = a.tc.epochs;
    if (given("--batch-size")) tc.batch_size = a.tc.batch_size;
    if (given("--lr")) tc.lr = a.tc.lr;
    if (given("--weight-decay")) tc.weight_decay = a.tc.weight_decay;
    if (given("--warmup-epochs")) tc.warmup_epochs = a.tc.warmup_epochs;
    if (given("--mask-ratio")) tc.mask_ratio = a.tc.mask_ratio;
    if (given("--pseudo-probability")) tc.pseudo_probability = a.tc.pseudo_probability;
    if (given("--lambda-n")) tc.weights.lambda_N = a.tc.weights.lambda_N;
    if (given("--lambda-p")) tc.weights.lambda_P = a.tc.weights.lambda_P;
    if (given("--lambda-cst")) tc.weights.lambda_cst = a.tc.weights.lambda_cst;
    if (given("--stop-grad-normal")) tc.stop_grad_normal = a.stop_grad;
    if (given("--seed")) tc.seed = a.tc.seed;
    if (given("--T")) tc.T = a.tc.T;
    tc.validate();

    const auto native = probe_geometry(a.data, Split::train);
    ModelConfig mc = ModelConfig::preset(a.preset);
    mc.image_height = a.height > 0 ? a.height : native.first;
    mc.image_width = a.width > 0 ? a.width : native.second;
    mc.channels = a.channels;
    mc.patch_size = a.patch_size;
    mc.num_frames = tc.T;
    mc.validate();

    const bool resuming = !a.resume.empty();
    prepare_out_dir(a.out, a.force, resuming);
    json resolved{{"train", tc},
                  {"model", mc},
                  {"data", {{"root", a.data.string()}, {"native_height", native.first}, {"native_width", native.second}}}};
    if (resuming) resolved["resume_from"] = a.resume.string();
    if (!a.pretrained.empty()) resolved["pretrained"] = a.pretrained.string();
    write_json(a.out / kResolvedConfig, resolved);

    const VideoDataset train = load_dataset(a.data, Split::train, {mc.image_height, mc.image_width}, mc.channels, mc.patch_size);
    const WindowSet ws = sample_windows(train, tc.T);
    for (const auto& w : ws.warnings) std::cerr << "warning: " << w << '\n';

    TrainOptions opts;
    opts.out_dir = a.out;
    opts.keep_last = a.keep_last;
    if (resuming) opts.resume_from = a.resume;
    if (!a.pretrained.empty()) opts.pretrained = a.pretrained;
    if (!a.quiet)
        opts.on_epoch = [&](std::int64_t epoch, double loss) {
            std::fprintf(stderr, "epoch %lld/%d  loss %.6f\n", static_cast<long long>(epoch + 1), tc.epochs, loss);
        };
    const auto res = run_training<double>(train, mc, tc, opts);
    std::cout << "trained " << res.state.step << " steps; final checkpoint " << res.final_checkpoint.string() << '\n';
    return kExitOk;
}

struct ScoreArgs {
    fs::path checkpoint, data, out, scores_dir;
    std::string split = "test", normalization = "per_clip";
    bool fixed_peak = false, force = false, self_check = false;
    std::string clip;
    std::vector<int> frames;
};

NormalizationScope parse_scope(const std::string& s) {
    if (s == "per_clip") return NormalizationScope::per_clip;
    if (s == "per_dataset") return NormalizationScope::per_dataset;
    throw ConfigError("unknown normalization '" + s + "' (expected per_clip|per_dataset)");
}

std::vector<ScoreSeries> score_from_checkpoint(const ScoreArgs& a, json& resolved) {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const auto params = params_from_checkpoint<double>(ck);
    const VideoDataset ds = load_for_model(a.data, parse_split(a.split), ck.config);
    resolved["model"] = ck.config;
    return score_dataset(params, ds, ck.config.num_frames, parse_scope(a.normalization), PsnrOptions{a.fixed_peak});
}

json score_resolved(const ScoreArgs& a) {
    return json{{"checkpoint", a.checkpoint.string()},
                {"data", a.data.string()},
                {"split", a.split},
                {"normalization", a.normalization},
                {"fixed_peak", a.fixed_peak}};
}

int cmd_score(const ScoreArgs& a) {
    parse_scope(a.normalization);
    prepare_out_dir(a.out, a.force);
    json resolved{{"score", score_resolved(a)}};
    write_json(a.out / kResolvedConfig, resolved);
    const auto series = score_from_checkpoint(a, resolved);
    for (const auto& s : series) write_score_csv(s, a.out / (s.clip_id + ".csv"));
    std::cout << "scored " << series.size() << " clips into " << a.out.string() << '\n';
    return kExitOk;
}

int cmd_eval(const ScoreArgs& a) {
    const bool from_csv = !a.scores_dir.empty();
    if (from_csv == (!a.checkpoint.empty() || !a.data.empty()))
        throw ConfigError("eval needs either --scores-dir or both --checkpoint and --data");
    if (!from_csv && (a.checkpoint.empty() || a.data.empty()))
        throw ConfigError("eval needs both --checkpoint and --data");
    parse_scope(a.normalization);
    prepare_out_dir(a.out, a.force);
    json resolved{{"eval", from_csv ? json{{"scores_dir", a.scores_dir.string()}} : score_resolved(a)}};
    write_json(a.out / kResolvedConfig, resolved);

    std::vector<ScoreSeries> series;
    if (from_csv) {
        if (!fs::is_directory(a.scores_dir)) throw IoError("missing scores directory " + a.scores_dir.string());
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(a.scores_dir))
            if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) series.push_back(read_score_csv(f));
        if (series.empty()) throw IoError("no score CSVs in " + a.scores_dir.string());
    } else {
        series = score_from_checkpoint(a, resolved);
    }
    const json report = evaluate_dataset(series);
    write_json(a.out / "eval.json", report);
    std::cout << report.dump(2) << '\n';
    return kExitOk;
}

std::string frame_tag(const std::string& clip, int t) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d", t);
    return clip + "_" + buf;
}

int cmd_diffmap(const ScoreArgs& a) {
    prepare_out_dir(a.out, a.force);
    json resolved{{"diffmap", score_resolved(a)}};
    resolved["diffmap"]["clip"] = a.clip;
    resolved["diffmap"]["frames"] = a.frames;
    resolved["diffmap"]["self_check"] = a.self_check;
    write_json(a.out / kResolvedConfig, resolved);

    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const auto params = params_from_checkpoint<double>(ck);
    const VideoDataset ds = load_for_model(a.data, parse_split(a.split), ck.config);
    if (ds.videos.empty()) throw IngestionError("split " + a.split + " has no clips");
    const VideoClip* clip = &ds.videos.front();
    if (!a.clip.empty()) {
        auto it = std::find_if(ds.videos.begin(), ds.videos.end(), [&](const VideoClip& c) { return c.clip_id == a.clip; });
        if (it == ds.videos.end()) throw ConfigError("no clip named '" + a.clip + "' in split " + a.split);
        clip = &*it;
    }
    const int T = ck.config.num_frames;
    const auto windows = clip_windows(*clip, T);
    if (windows.empty()) throw ConfigError("clip '" + clip->clip_id + "' is too short for T=" + std::to_string(T));
    std::vector<int> frames = a.frames;
    if (frames.empty())
        for (const auto& w : windows) frames.push_back(w.target_index);
    for (int t : frames) {
        if (t < T || t >= clip->size())
            throw ConfigError("frame " + std::to_string(t) + " has no prediction window (valid range " + std::to_string(T) +
                              ".." + std::to_string(clip->size() - 1) + ")");
        const FrameWindow& w = windows[static_cast<std::size_t>(t - T)];
        const Image<double> target = w.target->cast<double>();
        Image<double> pred = a.self_check ? target : forward(params, w).frame;
        for (auto& v : pred.data) v = std::clamp(v, 0.0, 1.0);
        const std::string tag = frame_tag(clip->clip_id, t);
        write_png(a.out / (tag + "_target.png"), target);
        write_png(a.out / (tag + "_pred.png"), pred);
        write_png(a.out / (tag + "_diff.png"), diff_map(target, pred));
    }
    std::cout << "wrote " << frames.size() << " diff maps to " << a.out.string() << '\n';
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked-autoencoder video anomaly detection"};
    app.require_subcommand(1);
    app.get_formatter()->column_width(34);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic moving-sprite dataset");
    synth->add_option("--out", sa.out, "Output dataset root")->required();
    synth->add_option("--config", sa.config, "JSON file with synthetic spec fields");
    synth->add_flag("--force", sa.force, "Overwrite a non-empty output directory");
    synth->add_option("--seed", sa.spec.seed, "Generator seed")->capture_default_str();
    synth->add_option("--train-clips", sa.spec.num_train_clips, "Number of training clips")->capture_default_str();
    synth->add_option("--test-clips", sa.spec.num_test_clips, "Number of test clips")->capture_default_str();
    synth->add_option("--frames", sa.spec.frames_per_clip, "Frames per clip")->capture_default_str();
    synth->add_option("--height", sa.spec.frame_height, "Frame height")->capture_default_str();
    synth->add_option("--width", sa.spec.frame_width, "Frame width")->capture_default_str();
    synth->add_option("--channels", sa.spec.channels, "1 (gray) or 3 (RGB)")->capture_default_str();
    synth->add_option("--sprites", sa.spec.sprites_per_clip, "Sprites per clip")->capture_default_str();
    synth->add_option("--radius", sa.spec.sprite_radius, "Sprite radius in pixels")->capture_default_str();
    synth->add_option("--speed", sa.spec.sprite_speed_normal, "Normal sprite speed, pixels/frame")->capture_default_str();
    synth->add_option("--anomaly-kind", sa.anomaly_kind, "fast_motion | odd_shape")->capture_default_str();
    synth->add_option("--anomaly-factor", sa.spec.anomaly_speed_factor, "Speed multiplier for fast_motion (>= 3)")
        ->capture_default_str();
    synth->add_option("--anomaly-start", sa.span_start, "First anomalous frame")->capture_default_str();
    synth->add_option("--anomaly-end", sa.span_end, "One past the last anomalous frame")->capture_default_str();

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train a model on the normal-only train split");
    train->add_option("--data", ta.data, "Dataset root")->required();
    train->add_option("--out", ta.out, "Run directory (checkpoints, metrics.jsonl)")->required();
    train->add_option("--config", ta.config, "JSON file with training config fields");
    train->add_option("--set", ta.sets, "Config override key=value (repeatable, e.g. weights.lambda_cst=0.3)");
    train->add_flag("--force", ta.force, "Overwrite a non-empty run directory");
    train->add_flag("--quiet", ta.quiet, "No per-epoch progress on stderr");
    train->add_option("--resume", ta.resume, "Continue from a checkpoint written by an earlier run");
    train->add_option("--pretrained", ta.pretrained, "Initial weights archive (names and shapes must match)");
    train->add_option("--mode", ta.mode, "baseline | pasrm | pasrm_nct")->capture_default_str();
    train->add_option("--epochs", ta.tc.epochs, "Training epochs")->capture_default_str();
    train->add_option("--batch-size", ta.tc.batch_size, "Windows per step")->capture_default_str();
    train->add_option("--lr", ta.tc.lr, "Peak learning rate")->capture_default_str();
    train->add_option("--weight-decay", ta.tc.weight_decay, "AdamW weight decay")->capture_default_str();
    train->add_option("--warmup-epochs", ta.tc.warmup_epochs, "Linear warmup epochs")->capture_default_str();
    train->add_option("--mask-ratio", ta.tc.mask_ratio, "Fraction of patches masked")->capture_default_str();
    train->add_option("--pseudo-probability", ta.tc.pseudo_probability, "Pseudo-input probability (pasrm mode)")
        ->capture_default_str();
    train->add_option("--lambda-n", ta.tc.weights.lambda_N, "Normal-branch loss weight")->capture_default_str();
    train->add_option("--lambda-p", ta.tc.weights.lambda_P, "Pseudo-branch loss weight")->capture_default_str();
    train->add_option("--lambda-cst", ta.tc.weights.lambda_cst, "Consistency loss weight")->capture_default_str();
    train->add_flag("--stop-grad-normal", ta.stop_grad, "Detach normal-branch features in the consistency loss");
    train->add_option("--seed", ta.tc.seed, "Run seed")->capture_default_str();
    train->add_option("--T", ta.tc.T, "Input frames per window")->capture_default_str();
    train->add_option("--preset", ta.preset, "Model preset: tiny | vit-b")->capture_default_str();
    train->add_option("--patch-size", ta.patch_size, "Patch size in pixels")->capture_default_str();
    train->add_option("--height", ta.height, "Resize frames to this height (default: native)");
    train->add_option("--width", ta.width, "Resize frames to this width (default: native)");
    train->add_option("--channels", ta.channels, "Model channels, 1 or 3")->capture_default_str();
    train->add_option("--keep-last", ta.keep_last, "Epoch checkpoints to retain besides the best")->capture_default_str();

    ScoreArgs sc;
    auto add_model_inputs = [&](CLI::App* sub, bool required) {
        auto* ck = sub->add_option("--checkpoint", sc.checkpoint, "Model checkpoint");
        auto* data = sub->add_option("--data", sc.data, "Dataset root");
        if (required) {
            ck->required();
            data->required();
        }
        sub->add_option("--out", sc.out, "Output directory")->required();
        sub->add_option("--split", sc.split, "Split to read")->capture_default_str();
        sub->add_flag("--force", sc.force, "Overwrite a non-empty output directory");
    };
    auto* score = app.add_subcommand("score", "Write per-clip score CSVs");
    add_model_inputs(score, true);
    score->add_option("--normalization", sc.normalization, "per_clip | per_dataset")->capture_default_str();
    score->add_flag("--fixed-peak", sc.fixed_peak, "PSNR with a fixed peak of 1.0");

    auto* eval = app.add_subcommand("eval", "Frame-level AUROC report (eval.json)");
    add_model_inputs(eval, false);
    eval->add_option("--scores-dir", sc.scores_dir, "Directory of score CSVs (instead of --checkpoint/--data)");
    eval->add_option("--normalization", sc.normalization, "per_clip | per_dataset")->capture_default_str();
    eval->add_flag("--fixed-peak", sc.fixed_peak, "PSNR with a fixed peak of 1.0");

    auto* diff = app.add_subcommand("diffmap", "Target / prediction / difference-map PNG triplets");
    add_model_inputs(diff, true);
    diff->add_option("--clip", sc.clip, "Clip id (default: first clip)");
    diff->add_option("--frame", sc.frames, "Target frame index (repeatable; default: every frame)");
    diff->add_flag("--self-check", sc.self_check, "Compare each target with itself");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*synth) return cmd_synth(sa, *synth);
        if (*train) return cmd_train(ta, *train);
        if (*score) return cmd_score(sc);
        if (*eval) return cmd_eval(sc);
        if (*diff) return cmd_diffmap(sc);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const UndefinedMetricError& e) {
        std::cerr << "undefined metric: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const IngestionError& e) {
        std::cerr << "ingestion error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}
