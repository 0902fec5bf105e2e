// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mvad/core.hpp"
#include "mvad/data.hpp"
#include "mvad/model.hpp"

namespace mvad {

struct PsnrOptions {
    /// Use a fixed peak of 1.0 instead of the prediction's maximum.
    bool fixed_peak = false;
};

struct PsnrResult {
    double db = 0;
    bool zero_peak = false;  // prediction was all zero; numerator floored
};

inline constexpr double kMseFloor = 1e-10;

/// 10 log10(peak^2 / MSE) with peak = max of the clamped prediction.
template <typename A, typename B>
PsnrResult psnr(const Image<A>& target, const Image<B>& pred, PsnrOptions opts = {}) {
    require_same_shape(target, pred, "psnr");
    if (pred.size() == 0) throw ShapeError("psnr: empty frame");
    double peak = 0, se = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double p = std::clamp(static_cast<double>(pred.data[i]), 0.0, 1.0);
        peak = std::max(peak, p);
        const double e = static_cast<double>(target.data[i]) - p;
        se += e * e;
    }
    if (opts.fixed_peak) peak = 1.0;
    PsnrResult r;
    double num = peak * peak;
    if (num <= 0) {
        num = kMseFloor;
        r.zero_peak = true;
    }
    const double mse = std::max(se / static_cast<double>(pred.size()), kMseFloor);
    r.db = 10.0 * std::log10(num / mse);
    return r;
}

/// Min-max normalization; a constant series maps to 0.5 everywhere.
inline std::vector<double> normalize_scores(const std::vector<double>& series) {
    if (series.empty()) throw ShapeError("normalize_scores: empty series");
    const auto [lo, hi] = std::minmax_element(series.begin(), series.end());
    const double mn = *lo, mx = *hi;
    std::vector<double> out(series.size(), 0.5);
    if (mx > mn)
        for (std::size_t i = 0; i < series.size(); ++i) out[i] = (series[i] - mn) / (mx - mn);
    return out;
}

struct ScoreSeries {
    std::string clip_id;
    std::vector<int> frame_index;
    std::vector<double> psnr;
    std::vector<double> regular;
    std::vector<double> anomaly;
    std::vector<int> labels;  // empty when the clip is unlabeled
    int zero_peak_frames = 0;

    std::size_t size() const { return psnr.size(); }

    void set_regular(std::vector<double> s) {
        regular = std::move(s);
        anomaly.resize(regular.size());
        for (std::size_t i = 0; i < regular.size(); ++i) anomaly[i] = 1.0 - regular[i];
    }
};

enum class NormalizationScope { per_clip, per_dataset };

/// Scores every window of one clip (no mask). Labels are attached only after
/// the scores are final.
template <typename S>
ScoreSeries score_clip(const ModelParams<S>& params, const VideoClip& clip, int T, PsnrOptions opts = {}) {
    if (clip.size() <= T)
        throw ConfigError("clip '" + clip.clip_id + "' has " + std::to_string(clip.size()) +
                          " frames; scoring needs more than T=" + std::to_string(T));
    ScoreSeries s;
    s.clip_id = clip.clip_id;
    for (const FrameWindow& w : clip_windows(clip, T)) {
        const Prediction<S> pred = forward(params, w);
        const PsnrResult r = psnr(*w.target, pred.frame, opts);
        s.frame_index.push_back(w.target_index);
        s.psnr.push_back(r.db);
        s.zero_peak_frames += r.zero_peak ? 1 : 0;
    }
    s.set_regular(normalize_scores(s.psnr));
    if (clip.labels)
        for (int t : s.frame_index) s.labels.push_back((*clip.labels)[static_cast<std::size_t>(t)]);
    return s;
}

template <typename S>
std::vector<ScoreSeries> score_dataset(const ModelParams<S>& params, const VideoDataset& ds, int T,
                                       NormalizationScope scope = NormalizationScope::per_clip, PsnrOptions opts = {}) {
    std::vector<ScoreSeries> out;
    for (const auto& clip : ds.videos) out.push_back(score_clip(params, clip, T, opts));
    if (scope == NormalizationScope::per_dataset && !out.empty()) {
        std::vector<double> all;
        for (const auto& s : out) all.insert(all.end(), s.psnr.begin(), s.psnr.end());
        const auto norm = normalize_scores(all);
        std::size_t k = 0;
        for (auto& s : out) {
            std::vector<double> part(norm.begin() + static_cast<std::ptrdiff_t>(k),
                                     norm.begin() + static_cast<std::ptrdiff_t>(k + s.size()));
            k += s.size();
            s.set_regular(std::move(part));
        }
    }
    return out;
}

inline void write_score_csv(const ScoreSeries& s, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "frame_index,psnr,regular,anomaly,label\n";
    char buf[160];
    for (std::size_t i = 0; i < s.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%d,%.10f,%.10f,%.10f,", s.frame_index[i], s.psnr[i], s.regular[i], s.anomaly[i]);
        out << buf;
        if (!s.labels.empty()) out << s.labels[i];
        out << '\n';
    }
}

/// Reads a score CSV back; an empty label column yields an unlabeled series.
inline ScoreSeries read_score_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    ScoreSeries s;
    s.clip_id = path.stem().string();
    std::string line;
    std::getline(in, line);
    if (line.rfind("frame_index,psnr,regular,anomaly,label", 0) != 0) throw IoError("bad score CSV header in " + path.string());
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        int idx = 0;
        double p = 0, r = 0, a = 0;
        char label[8] = {0};
        const int n = std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%7s", &idx, &p, &r, &a, label);
        if (n < 4) throw IoError("bad score CSV row in " + path.string() + ": " + line);
        s.frame_index.push_back(idx);
        s.psnr.push_back(p);
        s.regular.push_back(r);
        s.anomaly.push_back(a);
        if (n == 5) s.labels.push_back(std::atoi(label));
    }
    if (!s.labels.empty() && s.labels.size() != s.psnr.size()) throw IoError("partially labeled score CSV " + path.string());
    return s;
}

/// Per-pixel squared error summed over channels, min-max normalized over the
/// frame (constant error maps to 0.5).
template <typename A, typename B>
Image<double> diff_map(const Image<A>& target, const Image<B>& pred) {
    require_same_shape(target, pred, "diff_map");
    Image<double> err(target.height, target.width, 1);
    for (int y = 0; y < target.height; ++y)
        for (int x = 0; x < target.width; ++x) {
            double e = 0;
            for (int c = 0; c < target.channels; ++c) {
                const double d = static_cast<double>(target.at(y, x, c)) - static_cast<double>(pred.at(y, x, c));
                e += d * d;
            }
            err.at(y, x, 0) = e;
        }
    if (err.size() == 0) return err;
    err.data = normalize_scores(err.data);
    return err;
}

}  // namespace mvad
