// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvad/core.hpp"
#include "mvad/scoring.hpp"

namespace mvad {

namespace detail {

inline void check_auroc_inputs(std::span<const double> scores, std::span<const int> labels, std::size_t& pos,
                               std::size_t& neg) {
    if (scores.size() != labels.size())
        throw ShapeError("auroc: " + std::to_string(scores.size()) + " scores for " + std::to_string(labels.size()) +
                         " labels");
    pos = neg = 0;
    for (int l : labels) {
        if (l == 1)
            ++pos;
        else if (l == 0)
            ++neg;
        else
            throw ConfigError("auroc: labels must be 0 or 1");
    }
    if (pos == 0 || neg == 0) throw UndefinedMetricError("auroc is undefined unless both classes are present");
}

}  // namespace detail

/// Rank-based AUROC (Mann-Whitney U with mid-ranks for ties).
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
    std::size_t pos, neg;
    detail::check_auroc_inputs(scores, labels, pos, neg);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0;  // sum of 1-based mid-ranks of positives
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] == 1) rank_sum += mid;
        i = j;
    }
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    return (rank_sum - p * (p + 1) / 2) / (p * n);
}

/// O(n^2) reference: mean over (positive, negative) pairs of 1 / 0.5 / 0.
inline double auroc_oracle(std::span<const double> scores, std::span<const int> labels) {
    std::size_t pos, neg;
    detail::check_auroc_inputs(scores, labels, pos, neg);
    double wins = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

struct EvalReport {
    double auroc = 0;
    std::size_t num_frames = 0;
    std::size_t num_positive = 0;
    std::map<std::string, double> per_clip_auroc;
    std::optional<double> macro_auroc;  // mean of per_clip_auroc, when any clip has both classes
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
    j = nlohmann::json{{"auroc", r.auroc},
                       {"num_frames", r.num_frames},
                       {"num_positive", r.num_positive},
                       {"per_clip_auroc", r.per_clip_auroc}};
    if (r.macro_auroc) j["macro_auroc"] = *r.macro_auroc;
}

/// Micro AUROC over the concatenated anomaly scores of every clip.
inline EvalReport evaluate_dataset(const std::vector<ScoreSeries>& series) {
    if (series.empty()) throw ConfigError("evaluate_dataset: no score series");
    std::vector<double> scores;
    std::vector<int> labels;
    EvalReport rep;
    double macro_sum = 0;
    int macro_n = 0;
    for (const auto& s : series) {
        if (s.labels.size() != s.anomaly.size())
            throw ConfigError("evaluate_dataset: clip '" + s.clip_id + "' has no frame-aligned labels");
        scores.insert(scores.end(), s.anomaly.begin(), s.anomaly.end());
        labels.insert(labels.end(), s.labels.begin(), s.labels.end());
        const auto npos = std::count(s.labels.begin(), s.labels.end(), 1);
        if (npos > 0 && static_cast<std::size_t>(npos) < s.labels.size()) {
            const double a = auroc(s.anomaly, s.labels);
            rep.per_clip_auroc[s.clip_id] = a;
            macro_sum += a;
            ++macro_n;
        }
    }
    rep.num_frames = scores.size();
    rep.num_positive = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    if (rep.num_positive == 0) throw UndefinedMetricError("test set contains no anomalous frames");
    rep.auroc = auroc(scores, labels);
    if (macro_n > 0) rep.macro_auroc = macro_sum / macro_n;
    return rep;
}

}  // namespace mvad
