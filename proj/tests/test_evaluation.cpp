// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "mvad/evaluation.hpp"

using namespace mvad;

namespace {

ScoreSeries series(const std::string& id, std::vector<double> anomaly, std::vector<int> labels) {
    ScoreSeries s;
    s.clip_id = id;
    for (std::size_t i = 0; i < anomaly.size(); ++i) {
        s.frame_index.push_back(static_cast<int>(i));
        s.psnr.push_back(-anomaly[i]);
        s.regular.push_back(1.0 - anomaly[i]);
    }
    s.anomaly = std::move(anomaly);
    s.labels = std::move(labels);
    return s;
}

}  // namespace

TEST(Auroc, HandComputedWithTie) {
    const std::vector<double> s{0.9, 0.4, 0.4, 0.1};
    const std::vector<int> l{1, 1, 0, 0};
    // Pairs: (0.9,0.4)=1, (0.9,0.1)=1, (0.4,0.4)=0.5, (0.4,0.1)=1.
    EXPECT_NEAR(auroc(s, l), (1 + 1 + 0.5 + 1) / 4.0, 1e-9);
    EXPECT_NEAR(auroc_oracle(s, l), 0.875, 1e-9);
}

TEST(Auroc, PerfectReversedAndAllTied) {
    const std::vector<int> l{0, 0, 1, 1};
    EXPECT_EQ(auroc(std::vector<double>{1, 2, 3, 4}, l), 1.0);
    EXPECT_EQ(auroc(std::vector<double>{4, 3, 2, 1}, l), 0.0);
    EXPECT_EQ(auroc(std::vector<double>{7, 7, 7, 7}, l), 0.5);
    EXPECT_EQ(auroc_oracle(std::vector<double>{7, 7, 7, 7}, l), 0.5);
    EXPECT_EQ(auroc_oracle(std::vector<double>{0.1, 0.2, 0.9, 0.3}, std::vector<int>{0, 0, 1, 0}), 1.0);
}

TEST(Auroc, Errors) {
    EXPECT_THROW(auroc(std::vector<double>{1, 2}, std::vector<int>{1, 1}), UndefinedMetricError);
    EXPECT_THROW(auroc(std::vector<double>{1, 2}, std::vector<int>{0, 0}), UndefinedMetricError);
    EXPECT_THROW(auroc(std::vector<double>{1, 2, 3}, std::vector<int>{0, 1}), ShapeError);
    EXPECT_THROW(auroc(std::vector<double>{1, 2}, std::vector<int>{0, 2}), ConfigError);
    EXPECT_THROW(auroc_oracle(std::vector<double>{1}, std::vector<int>{1}), UndefinedMetricError);
}

TEST(Auroc, MatchesOracleOnRandomInstancesWithTies) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng() % 199;
        // Few distinct levels force ties and duplicates.
        const int levels = 1 + static_cast<int>(rng() % 20);
        std::vector<double> s(n);
        std::vector<int> l(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng() % static_cast<unsigned>(levels)) / levels;
            l[i] = static_cast<int>(rng() % 2);
        }
        l[0] = 0;
        l[1] = 1;
        ASSERT_NEAR(auroc(s, l), auroc_oracle(s, l), 1e-9) << "trial " << trial;
    }
}

TEST(Auroc, ComplementAndMonotoneInvariance) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 10 + rng() % 50;
        std::vector<double> s(n), neg(n), warped(n);
        std::vector<int> l(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = nd(rng);
            neg[i] = -s[i];
            warped[i] = std::exp(3 * s[i]) + 2;
            l[i] = static_cast<int>(i % 3 == 0);
        }
        EXPECT_NEAR(auroc(s, l) + auroc(neg, l), 1.0, 1e-12);
        EXPECT_EQ(auroc(s, l), auroc(warped, l));
    }
}

TEST(EvaluateDataset, SingleClipMatchesHandValue) {
    const auto rep = evaluate_dataset({series("c", {0.9, 0.4, 0.4, 0.1}, {1, 1, 0, 0})});
    EXPECT_NEAR(rep.auroc, 0.875, 1e-9);
    EXPECT_EQ(rep.num_frames, 4u);
    EXPECT_EQ(rep.num_positive, 2u);
    ASSERT_TRUE(rep.macro_auroc.has_value());
    EXPECT_NEAR(*rep.macro_auroc, 0.875, 1e-9);
    EXPECT_NEAR(rep.per_clip_auroc.at("c"), 0.875, 1e-9);
}

TEST(EvaluateDataset, DuplicatedClipKeepsAuroc) {
    const auto one = evaluate_dataset({series("a", {0.9, 0.4, 0.4, 0.1, 0.7}, {1, 1, 0, 0, 0})});
    const auto two = evaluate_dataset({series("a", {0.9, 0.4, 0.4, 0.1, 0.7}, {1, 1, 0, 0, 0}),
                                       series("b", {0.9, 0.4, 0.4, 0.1, 0.7}, {1, 1, 0, 0, 0})});
    EXPECT_NEAR(one.auroc, two.auroc, 1e-12);
    EXPECT_EQ(two.num_frames, 10u);
}

TEST(EvaluateDataset, MicroDiffersFromMacro) {
    // Each clip separates perfectly, but the scales disagree across clips.
    const auto rep = evaluate_dataset({series("a", {0.1, 0.2}, {0, 1}), series("b", {0.8, 0.9}, {0, 1}),
                                       series("n", {0.5, 0.6}, {0, 0})});
    EXPECT_EQ(*rep.macro_auroc, 1.0);
    EXPECT_EQ(rep.per_clip_auroc.size(), 2u);
    EXPECT_NEAR(rep.auroc, auroc_oracle(std::vector<double>{0.1, 0.2, 0.8, 0.9, 0.5, 0.6},
                                        std::vector<int>{0, 1, 0, 1, 0, 0}),
                1e-12);
    EXPECT_LT(rep.auroc, 1.0);
}

TEST(EvaluateDataset, Errors) {
    EXPECT_THROW(evaluate_dataset({series("a", {0.1, 0.2}, {0, 0})}), UndefinedMetricError);
    EXPECT_THROW(evaluate_dataset({}), ConfigError);
    auto unlabeled = series("u", {0.1, 0.2}, {});
    EXPECT_THROW(evaluate_dataset({unlabeled}), ConfigError);
}

TEST(EvaluateDataset, JsonReport) {
    const nlohmann::json j = evaluate_dataset({series("c", {0.9, 0.4, 0.4, 0.1}, {1, 1, 0, 0})});
    EXPECT_NEAR(j.at("auroc").get<double>(), 0.875, 1e-12);
    EXPECT_EQ(j.at("num_frames").get<int>(), 4);
    EXPECT_EQ(j.at("num_positive").get<int>(), 2);
    EXPECT_TRUE(j.at("per_clip_auroc").contains("c"));
}
