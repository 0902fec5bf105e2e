// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvad/checkpoint.hpp"
#include "mvad/core.hpp"
#include "mvad/data.hpp"
#include "mvad/losses.hpp"
#include "mvad/masking.hpp"
#include "mvad/model.hpp"

namespace mvad {

enum class TrainMode { baseline, pasrm, pasrm_nct };

inline std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::baseline: return "baseline";
        case TrainMode::pasrm: return "pasrm";
        case TrainMode::pasrm_nct: return "pasrm_nct";
    }
    return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
    if (s == "baseline") return TrainMode::baseline;
    if (s == "pasrm") return TrainMode::pasrm;
    if (s == "pasrm_nct") return TrainMode::pasrm_nct;
    throw ConfigError("unknown mode '" + s + "' (expected baseline|pasrm|pasrm_nct)");
}

struct TrainConfig {
    TrainMode mode = TrainMode::pasrm_nct;
    int epochs = 60;
    int batch_size = 4;
    double lr = 1e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int warmup_epochs = 10;
    double mask_ratio = 0.75;
    double pseudo_probability = 0.2;
    LossWeights weights;
    bool stop_grad_normal = false;  // detach f_O inside the consistency term
    std::uint64_t seed = 0;
    int T = 4;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
        if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0,1)");
        if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
        if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("warmup_epochs must lie in [0, epochs]");
        if (!(mask_ratio >= 0 && mask_ratio <= 1)) throw ConfigError("mask_ratio must lie in [0,1]");
        if (!(pseudo_probability >= 0 && pseudo_probability <= 1))
            throw ConfigError("pseudo_probability must lie in [0,1]");
        if (T < 1) throw ConfigError("T must be >= 1");
        weights.validate();
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"mode", to_string(c.mode)},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"lr", c.lr},
                       {"weight_decay", c.weight_decay},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"adam_eps", c.adam_eps},
                       {"warmup_epochs", c.warmup_epochs},
                       {"mask_ratio", c.mask_ratio},
                       {"pseudo_probability", c.pseudo_probability},
                       {"weights",
                        {{"lambda_N", c.weights.lambda_N},
                         {"lambda_P", c.weights.lambda_P},
                         {"lambda_cst", c.weights.lambda_cst}}},
                       {"stop_grad_normal", c.stop_grad_normal},
                       {"seed", c.seed},
                       {"T", c.T}};
}

/// Strict parse: keys absent from `j` keep their current value; any key that
/// is not a TrainConfig field is an error.
inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    try {
        for (const auto& [key, val] : j.items()) {
            if (key == "mode") c.mode = parse_train_mode(val.get<std::string>());
            else if (key == "epochs") c.epochs = val.get<int>();
            else if (key == "batch_size") c.batch_size = val.get<int>();
            else if (key == "lr") c.lr = val.get<double>();
            else if (key == "weight_decay") c.weight_decay = val.get<double>();
            else if (key == "beta1") c.beta1 = val.get<double>();
            else if (key == "beta2") c.beta2 = val.get<double>();
            else if (key == "adam_eps") c.adam_eps = val.get<double>();
            else if (key == "warmup_epochs") c.warmup_epochs = val.get<int>();
            else if (key == "mask_ratio") c.mask_ratio = val.get<double>();
            else if (key == "pseudo_probability") c.pseudo_probability = val.get<double>();
            else if (key == "stop_grad_normal") c.stop_grad_normal = val.get<bool>();
            else if (key == "seed") c.seed = val.get<std::uint64_t>();
            else if (key == "T") c.T = val.get<int>();
            else if (key == "weights") {
                if (!val.is_object()) throw ConfigError("weights must be an object");
                for (const auto& [wk, wv] : val.items()) {
                    if (wk == "lambda_N") c.weights.lambda_N = wv.get<double>();
                    else if (wk == "lambda_P") c.weights.lambda_P = wv.get<double>();
                    else if (wk == "lambda_cst") c.weights.lambda_cst = wv.get<double>();
                    else throw ConfigError("unknown config key 'weights." + wk + "'");
                }
            } else {
                throw ConfigError("unknown config key '" + key + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    apply_json(c, j);
}

// ---------------------------------------------------------------------------
// Learning-rate schedule: linear warmup 0 -> lr, then cosine lr -> 0.

struct Schedule {
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 1;

    static Schedule of(const TrainConfig& cfg, std::int64_t steps_per_epoch) {
        return {static_cast<std::int64_t>(cfg.warmup_epochs) * steps_per_epoch,
                static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch};
    }
};

inline double lr_at(std::int64_t step, double base_lr, const Schedule& s) {
    if (step < 0) throw ConfigError("lr_at: negative step");
    if (step < s.warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const std::int64_t decay = s.total_steps - s.warmup_steps;
    if (decay <= 0) return base_lr;
    const double t = std::min(1.0, static_cast<double>(step - s.warmup_steps) / static_cast<double>(decay));
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

inline double lr_at(std::int64_t step, const TrainConfig& cfg, std::int64_t steps_per_epoch) {
    return lr_at(step, cfg.lr, Schedule::of(cfg, steps_per_epoch));
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay on linear weight matrices only (biases,
// norms, positional embedding and mask token are not decayed).

inline bool is_decayed(const std::string& name) {
    const bool weight = name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
    return weight && name.find("norm") == std::string::npos;
}

template <typename S>
struct TrainState {
    ModelParams<S> params;
    ModelParams<S> m;
    ModelParams<S> v;
    std::int64_t step = 0;   // completed optimizer updates
    std::int64_t epoch = 0;  // completed epochs

    static TrainState fresh(ModelParams<S> p) {
        TrainState s;
        s.m = ModelParams<S>::zeros(p.config);
        s.v = ModelParams<S>::zeros(p.config);
        s.params = std::move(p);
        return s;
    }
};

template <typename S>
void adamw_update(TrainState<S>& st, const ModelParams<S>& grads, double lr, const TrainConfig& cfg) {
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    auto p = st.params.tensors();
    auto m = st.m.tensors();
    auto v = st.v.tensors();
    auto g = const_cast<ModelParams<S>&>(grads).tensors();
    const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
    for (std::size_t i = 0; i < p.size(); ++i) {
        Mat<S>& P = *p[i].second;
        Mat<S>& M = *m[i].second;
        Mat<S>& V = *v[i].second;
        const Mat<S>& G = *g[i].second;
        M = b1 * M + (S(1) - b1) * G;
        V = b2 * V + (S(1) - b2) * G.cwiseProduct(G);
        const S step_size = static_cast<S>(lr / bc1);
        const S denom_scale = static_cast<S>(1.0 / std::sqrt(bc2));
        if (is_decayed(p[i].first)) P *= static_cast<S>(1.0 - lr * cfg.weight_decay);
        P.array() -= step_size * M.array() / (V.array().sqrt() * denom_scale + static_cast<S>(cfg.adam_eps));
    }
}

// ---------------------------------------------------------------------------
// Per-batch gradients.

struct BatchItem {
    const FrameWindow* window = nullptr;
    std::uint64_t index = 0;  // position in the training window list (seed key)
};

/// Whether window `index` feeds the pseudo branch in pasrm mode this epoch.
inline bool draws_pseudo(std::uint64_t run_seed, std::uint64_t epoch, std::uint64_t index, double p) {
    std::mt19937_64 rng(derive_seed(run_seed, kTagPseudo, epoch, index));
    return uniform01(rng) < p;
}

template <typename S>
struct BatchGradients {
    LossBreakdown loss;
    ModelParams<S> grads;
    int pseudo_samples = 0;
};

namespace detail {

template <typename S>
void check_finite_loss(const LossBreakdown& b, const FrameWindow& w) {
    if (!std::isfinite(b.total))
        throw NumericError("non-finite loss on clip '" + w.clip_id + "' target frame " + std::to_string(w.target_index));
}

}  // namespace detail

/// Mean loss and mean parameter gradient over `batch` for the configured mode.
/// Masks and pseudo draws are keyed by (cfg.seed, epoch, item.index).
template <typename S>
BatchGradients<S> compute_batch_gradients(const ModelParams<S>& params, std::span<const BatchItem> batch,
                                          const TrainConfig& cfg, std::uint64_t epoch) {
    if (batch.empty()) throw ConfigError("empty batch");
    const ModelConfig& mc = params.config;
    const PatchGrid grid = mc.grid();
    BatchGradients<S> out{LossBreakdown{}, ModelParams<S>::zeros(mc), 0};
    const LossWeights& w = cfg.weights;
    int normal_n = 0, pseudo_n = 0;
    double sum_int_O = 0, sum_gd_O = 0, sum_int_P = 0, sum_gd_P = 0, sum_cst = 0, sum_total = 0;

    for (const BatchItem& item : batch) {
        const FrameWindow& win = *item.window;
        const Mat<S> patches = patchify<S>(win, mc);
        const Image<S> target = win.target->template cast<S>();

        if (cfg.mode == TrainMode::pasrm_nct) {
            const PatchMask mask = generate_mask(grid, cfg.mask_ratio, window_mask_seed(cfg.seed, epoch, item.index));
            ForwardCache<S> cache_O, cache_P;
            const Prediction<S> O = forward_train(params, patches, nullptr, cache_O);
            const Prediction<S> P = forward_train(params, patches, &mask, cache_P);
            const LossBreakdown b = total_loss(O, P, target, w);
            detail::check_finite_loss<S>(b, win);
            const LossGradients<S> g = total_loss_grad(O.frame, P.frame, target, O.features.tokens, P.features.tokens, w,
                                                       cfg.stop_grad_normal);
            backward(params, cache_O, g.d_pred_O, &g.d_f_O, out.grads);
            backward(params, cache_P, g.d_pred_P, &g.d_f_P, out.grads);
            ++normal_n;
            ++pseudo_n;
            sum_int_O += b.l_int_O;
            sum_gd_O += b.l_gd_O;
            sum_int_P += b.l_int_P;
            sum_gd_P += b.l_gd_P;
            sum_cst += b.l_cst;
            sum_total += b.total;
            continue;
        }

        const bool pseudo = cfg.mode == TrainMode::pasrm && draws_pseudo(cfg.seed, epoch, item.index, cfg.pseudo_probability);
        std::optional<PatchMask> mask;
        if (pseudo) mask = generate_mask(grid, cfg.mask_ratio, window_mask_seed(cfg.seed, epoch, item.index));
        ForwardCache<S> cache;
        const Prediction<S> pr = forward_train(params, patches, mask ? &*mask : nullptr, cache);
        const double l_int = static_cast<double>(intensity_loss(pr.frame, target));
        const double l_gd = static_cast<double>(gradient_loss(pr.frame, target));
        const double lambda = pseudo ? w.lambda_P : w.lambda_N;
        const double total = lambda * (l_int + l_gd);
        if (!std::isfinite(total))
            throw NumericError("non-finite loss on clip '" + win.clip_id + "' target frame " +
                               std::to_string(win.target_index));
        backward(params, cache, prediction_loss_grad(pr.frame, target, lambda), nullptr, out.grads);
        if (pseudo) {
            ++pseudo_n;
            sum_int_P += l_int;
            sum_gd_P += l_gd;
        } else {
            ++normal_n;
            sum_int_O += l_int;
            sum_gd_O += l_gd;
        }
        sum_total += total;
    }

    const double n = static_cast<double>(batch.size());
    const S inv = static_cast<S>(1.0 / n);
    out.grads.for_each([&](const std::string&, Mat<S>& t) { t *= inv; });
    LossBreakdown& b = out.loss;
    if (normal_n) {
        b.l_int_O = sum_int_O / normal_n;
        b.l_gd_O = sum_gd_O / normal_n;
    }
    if (pseudo_n) {
        b.l_int_P = sum_int_P / pseudo_n;
        b.l_gd_P = sum_gd_P / pseudo_n;
    }
    b.l_N = b.l_int_O + b.l_gd_O;
    b.l_P = b.l_int_P + b.l_gd_P;
    b.l_cst = cfg.mode == TrainMode::pasrm_nct ? sum_cst / n : 0.0;
    b.total = sum_total / n;
    out.pseudo_samples = pseudo_n;
    return out;
}

struct StepRecord {
    std::int64_t step = 0;
    std::int64_t epoch = 0;
    double lr = 0;
    LossBreakdown loss;
};

inline nlohmann::json to_metrics_json(const StepRecord& r) {
    return nlohmann::json{{"step", r.step},      {"epoch", r.epoch},       {"lr", r.lr},          {"l_N", r.loss.l_N},
                          {"l_P", r.loss.l_P},   {"l_cst", r.loss.l_cst},  {"total", r.loss.total}};
}

/// One optimizer update at lr_at(step + 1). Works for every mode; the named
/// wrappers below enforce the mode they stand for.
template <typename S>
LossBreakdown train_step(TrainState<S>& st, std::span<const BatchItem> batch, const TrainConfig& cfg,
                         std::int64_t steps_per_epoch, double* lr_used = nullptr) {
    const BatchGradients<S> bg = compute_batch_gradients(st.params, batch, cfg, static_cast<std::uint64_t>(st.epoch));
    const double lr = lr_at(st.step + 1, cfg, steps_per_epoch);
    adamw_update(st, bg.grads, lr, cfg);
    if (!st.params.all_finite()) throw NumericError("non-finite parameters after step " + std::to_string(st.step));
    if (lr_used) *lr_used = lr;
    return bg.loss;
}

template <typename S>
LossBreakdown train_step_nct(TrainState<S>& st, std::span<const BatchItem> batch, const TrainConfig& cfg,
                             std::int64_t steps_per_epoch) {
    if (cfg.mode != TrainMode::pasrm_nct) throw ConfigError("train_step_nct requires mode pasrm_nct");
    return train_step(st, batch, cfg, steps_per_epoch);
}

template <typename S>
LossBreakdown train_step_pasrm(TrainState<S>& st, std::span<const BatchItem> batch, const TrainConfig& cfg,
                               std::int64_t steps_per_epoch) {
    if (cfg.mode != TrainMode::pasrm) throw ConfigError("train_step_pasrm requires mode pasrm");
    return train_step(st, batch, cfg, steps_per_epoch);
}

// ---------------------------------------------------------------------------
// Training loop.

/// Window visiting order for one epoch, a pure function of (seed, epoch).
inline std::vector<std::uint64_t> epoch_order(std::uint64_t run_seed, std::uint64_t epoch, std::size_t n) {
    std::vector<std::uint64_t> order(n);
    std::iota(order.begin(), order.end(), std::uint64_t{0});
    std::mt19937_64 rng(derive_seed(run_seed, 18, epoch));
    portable_shuffle(order.begin(), order.end(), rng);
    return order;
}

inline std::int64_t steps_per_epoch(std::size_t num_windows, int batch_size) {
    return static_cast<std::int64_t>((num_windows + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

template <typename S>
Checkpoint make_train_checkpoint(const TrainState<S>& st, const TrainConfig& cfg) {
    Checkpoint ck = make_checkpoint(st.params, st.step, st.epoch);
    append_tensors(ck.tensors, st.m, "optimizer.m.");
    append_tensors(ck.tensors, st.v, "optimizer.v.");
    ck.extra["train_config"] = cfg;
    return ck;
}

template <typename S>
TrainState<S> restore_train_state(const Checkpoint& ck) {
    TrainState<S> st = TrainState<S>::fresh(params_from_checkpoint<S>(ck));
    assign_tensors(st.m, ck, "optimizer.m.");
    assign_tensors(st.v, ck, "optimizer.v.");
    st.step = ck.step;
    st.epoch = ck.epoch;
    return st;
}

struct TrainOptions {
    std::filesystem::path out_dir;                     // empty: keep everything in memory
    std::optional<std::filesystem::path> resume_from;  // checkpoint written by a previous run
    std::optional<std::filesystem::path> pretrained;   // initial weights (ignored when resuming)
    int keep_last = 3;
    std::function<void(const StepRecord&)> on_step;
    std::function<void(std::int64_t epoch, double mean_loss)> on_epoch;
};

template <typename S>
struct TrainResult {
    TrainState<S> state;
    std::vector<StepRecord> metrics;
    std::vector<double> epoch_loss;
    std::filesystem::path final_checkpoint;
    std::filesystem::path best_checkpoint;
};

inline std::string epoch_checkpoint_name(std::int64_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_epoch_%04lld.mvad", static_cast<long long>(epoch));
    return buf;
}

/// Trains on every window of `train`. Labels, if any, are never consulted.
template <typename S>
TrainResult<S> run_training(const VideoDataset& train, const ModelConfig& model_cfg, const TrainConfig& cfg,
                            const TrainOptions& opts = {}) {
    namespace fs = std::filesystem;
    cfg.validate();
    model_cfg.validate();
    if (model_cfg.num_frames != cfg.T) throw ConfigError("model num_frames must equal T");
    if (train.frame_height != model_cfg.image_height || train.frame_width != model_cfg.image_width ||
        train.channels != model_cfg.channels)
        throw ConfigError("dataset geometry " + shape_string(train.frame_height, train.frame_width, train.channels) +
                          " does not match model " +
                          shape_string(model_cfg.image_height, model_cfg.image_width, model_cfg.channels));

    const WindowSet ws = sample_windows(train, cfg.T);
    if (ws.windows.empty()) throw ConfigError("training split yields no windows for T=" + std::to_string(cfg.T));
    const std::int64_t spe = steps_per_epoch(ws.windows.size(), cfg.batch_size);

    TrainResult<S> res;
    if (opts.resume_from) {
        const Checkpoint ck = load_checkpoint(*opts.resume_from);
        if (!(ck.config == model_cfg)) throw ConfigError("resume checkpoint model config differs from the requested one");
        res.state = restore_train_state<S>(ck);
    } else {
        res.state = TrainState<S>::fresh(init_params<S>(model_cfg, cfg.seed, opts.pretrained));
    }

    const bool to_disk = !opts.out_dir.empty();
    std::ofstream metrics_out;
    if (to_disk) {
        std::error_code ec;
        fs::create_directories(opts.out_dir, ec);
        if (ec) throw IoError("cannot create " + opts.out_dir.string() + ": " + ec.message());
        const fs::path mpath = opts.out_dir / "metrics.jsonl";
        std::vector<std::string> kept;
        if (opts.resume_from && fs::exists(mpath)) {
            std::ifstream in(mpath);
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                if (nlohmann::json::parse(line).at("step").get<std::int64_t>() <= res.state.step) kept.push_back(line);
            }
        }
        metrics_out.open(mpath, std::ios::binary | std::ios::trunc);
        if (!metrics_out) throw IoError("cannot write " + mpath.string());
        for (const auto& l : kept) metrics_out << l << '\n';
    }

    std::vector<std::pair<std::int64_t, fs::path>> saved;
    double best_loss = std::numeric_limits<double>::infinity();
    for (std::int64_t epoch = res.state.epoch; epoch < cfg.epochs; ++epoch) {
        const auto order = epoch_order(cfg.seed, static_cast<std::uint64_t>(epoch), ws.windows.size());
        double epoch_sum = 0;
        std::int64_t epoch_steps = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<BatchItem> batch;
            for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++k)
                batch.push_back(BatchItem{&ws.windows[order[k]], order[k]});
            double lr = 0;
            LossBreakdown b;
            try {
                b = train_step(res.state, std::span<const BatchItem>(batch), cfg, spe, &lr);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(res.state.step) + ")");
            }
            StepRecord rec{res.state.step, epoch, lr, b};
            res.metrics.push_back(rec);
            if (to_disk) metrics_out << to_metrics_json(rec).dump() << '\n';
            if (opts.on_step) opts.on_step(rec);
            epoch_sum += b.total;
            ++epoch_steps;
        }
        res.state.epoch = epoch + 1;
        const double mean_loss = epoch_sum / static_cast<double>(epoch_steps);
        res.epoch_loss.push_back(mean_loss);
        if (opts.on_epoch) opts.on_epoch(epoch, mean_loss);
        if (to_disk) {
            metrics_out.flush();
            if (!metrics_out) throw IoError("metrics write failed");
            const fs::path p = opts.out_dir / epoch_checkpoint_name(res.state.epoch);
            save_checkpoint(p, make_train_checkpoint(res.state, cfg));
            saved.emplace_back(res.state.epoch, p);
            if (mean_loss < best_loss) {
                best_loss = mean_loss;
                const fs::path prev = res.best_checkpoint;
                res.best_checkpoint = p;
                const bool prev_retained = std::any_of(saved.begin(), saved.end(), [&](const auto& e) { return e.second == prev; });
                if (!prev.empty() && !prev_retained) fs::remove(prev);
            }
            // Retain the last `keep_last` epochs plus the best one.
            while (static_cast<int>(saved.size()) > opts.keep_last) {
                const fs::path old = saved.front().second;
                saved.erase(saved.begin());
                if (old != res.best_checkpoint) fs::remove(old);
            }
        }
    }
    if (to_disk) {
        res.final_checkpoint = opts.out_dir / "model_final.mvad";
        save_checkpoint(res.final_checkpoint, make_train_checkpoint(res.state, cfg));
    }
    return res;
}

}  // namespace mvad
