// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <utility>

#include <nlohmann/json.hpp>

#include "mvad/core.hpp"
#include "mvad/model.hpp"

namespace mvad {

enum class Reduction { mean, sum };

struct LossWeights {
    double lambda_N = 1.0;
    double lambda_P = 1.0;
    double lambda_cst = 0.3;

    void validate() const {
        for (double v : {lambda_N, lambda_P, lambda_cst})
            if (!std::isfinite(v) || v < 0) throw ConfigError("loss weights must be finite and >= 0");
    }
    bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
    double l_int_O = 0, l_gd_O = 0, l_N = 0;
    double l_int_P = 0, l_gd_P = 0, l_P = 0;
    double l_cst = 0;
    double total = 0;
};

inline void to_json(nlohmann::json& j, const LossBreakdown& b) {
    j = nlohmann::json{{"l_int_O", b.l_int_O}, {"l_gd_O", b.l_gd_O}, {"l_N", b.l_N},     {"l_int_P", b.l_int_P},
                       {"l_gd_P", b.l_gd_P},   {"l_P", b.l_P},       {"l_cst", b.l_cst}, {"total", b.total}};
}

// ---------------------------------------------------------------------------
// Intensity: squared l2 distance; mean divides by the element count.

template <typename S>
S intensity_loss(const Image<S>& pred, const Image<S>& target, Reduction r = Reduction::mean) {
    require_same_shape(pred, target, "intensity_loss");
    S sum = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const S e = pred.data[i] - target.data[i];
        sum += e * e;
    }
    return r == Reduction::sum ? sum : sum / static_cast<S>(pred.size());
}

/// d(mean intensity) / d(pred).
template <typename S>
Image<S> intensity_loss_grad(const Image<S>& pred, const Image<S>& target) {
    require_same_shape(pred, target, "intensity_loss");
    Image<S> g(pred.height, pred.width, pred.channels);
    const S k = S(2) / static_cast<S>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) g.data[i] = k * (pred.data[i] - target.data[i]);
    return g;
}

// ---------------------------------------------------------------------------
// Gradient difference: for every pixel with a valid upper (resp. left)
// neighbour, | |dp| - |dt| |. No padding; mean divides by the number of
// terms, (H-1)*W*C + H*(W-1)*C.

namespace detail {

template <typename S>
S sgn(S v) {
    return static_cast<S>((v > S(0)) - (v < S(0)));
}

template <typename S, typename F>
void for_each_gradient_term(const Image<S>& pred, const Image<S>& target, F&& f) {
    for (int y = 0; y < pred.height; ++y)
        for (int x = 0; x < pred.width; ++x)
            for (int c = 0; c < pred.channels; ++c) {
                if (y > 0) {
                    const S dp = pred.at(y, x, c) - pred.at(y - 1, x, c);
                    const S dt = target.at(y, x, c) - target.at(y - 1, x, c);
                    f(y, x, c, y - 1, x, dp, dt);
                }
                if (x > 0) {
                    const S dp = pred.at(y, x, c) - pred.at(y, x - 1, c);
                    const S dt = target.at(y, x, c) - target.at(y, x - 1, c);
                    f(y, x, c, y, x - 1, dp, dt);
                }
            }
}

template <typename S>
void check_gradient_shapes(const Image<S>& pred, const Image<S>& target) {
    require_same_shape(pred, target, "gradient_loss");
    if (pred.height < 2 || pred.width < 2)
        throw ShapeError("gradient_loss needs H, W >= 2, got " + shape_string(pred));
}

template <typename S>
S gradient_term_count(const Image<S>& img) {
    return static_cast<S>((static_cast<std::size_t>(img.height - 1) * img.width +
                           static_cast<std::size_t>(img.height) * (img.width - 1)) *
                          img.channels);
}

}  // namespace detail

template <typename S>
S gradient_loss(const Image<S>& pred, const Image<S>& target, Reduction r = Reduction::mean) {
    detail::check_gradient_shapes(pred, target);
    S sum = 0;
    detail::for_each_gradient_term(pred, target,
                                   [&](int, int, int, int, int, S dp, S dt) { sum += std::abs(std::abs(dp) - std::abs(dt)); });
    return r == Reduction::sum ? sum : sum / detail::gradient_term_count(pred);
}

/// d(mean gradient loss) / d(pred); the subgradient at kinks is 0.
template <typename S>
Image<S> gradient_loss_grad(const Image<S>& pred, const Image<S>& target) {
    detail::check_gradient_shapes(pred, target);
    Image<S> g(pred.height, pred.width, pred.channels);
    const S k = S(1) / detail::gradient_term_count(pred);
    detail::for_each_gradient_term(pred, target, [&](int y, int x, int c, int y0, int x0, S dp, S dt) {
        const S s = k * detail::sgn(std::abs(dp) - std::abs(dt)) * detail::sgn(dp);
        g.at(y, x, c) += s;
        g.at(y0, x0, c) -= s;
    });
    return g;
}

// ---------------------------------------------------------------------------
// Consistency: per-token softmax over the feature dimension, symmetric KL
// averaged over tokens. Log terms are floored at log(1e-12).

namespace detail {

constexpr double kLogFloor = -27.631021115928547;  // log(1e-12)

template <typename S>
void softmax_and_log(const Mat<S>& logits, Mat<S>& prob, Mat<S>& logp, Mat<std::uint8_t>* floored = nullptr) {
    prob.resize(logits.rows(), logits.cols());
    logp.resize(logits.rows(), logits.cols());
    if (floored) floored->resize(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const S m = logits.row(i).maxCoeff();
        const S lse = m + std::log((logits.row(i).array() - m).exp().sum());
        for (Eigen::Index k = 0; k < logits.cols(); ++k) {
            const S lp = logits(i, k) - lse;
            prob(i, k) = std::exp(lp);
            const bool fl = lp < static_cast<S>(kLogFloor);
            logp(i, k) = fl ? static_cast<S>(kLogFloor) : lp;
            if (floored) (*floored)(i, k) = fl ? 1 : 0;
        }
    }
}

template <typename S>
void check_consistency_inputs(const Mat<S>& a, const Mat<S>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("consistency_loss: feature shapes " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    if (a.rows() == 0) throw ShapeError("consistency_loss: no tokens");
    if (!a.allFinite() || !b.allFinite()) throw NumericError("consistency_loss: non-finite features");
}

}  // namespace detail

template <typename S>
S consistency_loss(const Mat<S>& f_O, const Mat<S>& f_P) {
    detail::check_consistency_inputs(f_O, f_P);
    Mat<S> p, lp, q, lq;
    detail::softmax_and_log(f_O, p, lp);
    detail::softmax_and_log(f_P, q, lq);
    // 1/2 (KL(p||q) + KL(q||p)) = 1/2 sum (p - q)(log p - log q)
    const S total = ((p - q).array() * (lp - lq).array()).sum();
    return S(0.5) * total / static_cast<S>(f_O.rows());
}

template <typename S>
S consistency_loss(const EncodedFeatures<S>& f_O, const EncodedFeatures<S>& f_P) {
    return consistency_loss(f_O.tokens, f_P.tokens);
}

/// Gradients of consistency_loss with respect to both feature matrices.
template <typename S>
std::pair<Mat<S>, Mat<S>> consistency_loss_grad(const Mat<S>& f_O, const Mat<S>& f_P) {
    detail::check_consistency_inputs(f_O, f_P);
    Mat<S> p, lp, q, lq;
    Mat<std::uint8_t> fp, fq;
    detail::softmax_and_log(f_O, p, lp, &fp);
    detail::softmax_and_log(f_P, q, lq, &fq);
    const S k = S(0.5) / static_cast<S>(f_O.rows());
    // J = k * sum (p - q)(Lp - Lq). With u = dJ/dp and v = dJ/dLp (zero where
    // floored): dJ/da = p * (u - <p,u>) + (v - p * sum v).
    auto side = [&](const Mat<S>& pa, const Mat<S>& la, const Mat<std::uint8_t>& fa, const Mat<S>& pb,
                    const Mat<S>& lb) {
        Mat<S> g(pa.rows(), pa.cols());
        for (Eigen::Index i = 0; i < pa.rows(); ++i) {
            const auto u = (k * (la.row(i) - lb.row(i)).array()).eval();
            auto v = (k * (pa.row(i) - pb.row(i)).array()).eval();
            for (Eigen::Index j = 0; j < v.size(); ++j)
                if (fa(i, j)) v(j) = 0;
            const S pu = (pa.row(i).array() * u).sum();
            const S sv = v.sum();
            g.row(i) = (pa.row(i).array() * (u - pu) + v - pa.row(i).array() * sv).matrix();
        }
        return g;
    };
    return {side(p, lp, fp, q, lq), side(q, lq, fq, p, lp)};
}

// ---------------------------------------------------------------------------
// Weighted objective.

template <typename S>
LossBreakdown total_loss(const Image<S>& pred_O, const Image<S>& pred_P, const Image<S>& target, const Mat<S>& f_O,
                         const Mat<S>& f_P, const LossWeights& w) {
    LossBreakdown b;
    b.l_int_O = static_cast<double>(intensity_loss(pred_O, target));
    b.l_gd_O = static_cast<double>(gradient_loss(pred_O, target));
    b.l_N = b.l_int_O + b.l_gd_O;
    b.l_int_P = static_cast<double>(intensity_loss(pred_P, target));
    b.l_gd_P = static_cast<double>(gradient_loss(pred_P, target));
    b.l_P = b.l_int_P + b.l_gd_P;
    b.l_cst = static_cast<double>(consistency_loss(f_O, f_P));
    b.total = w.lambda_N * b.l_N + w.lambda_P * b.l_P + w.lambda_cst * b.l_cst;
    return b;
}

template <typename S>
LossBreakdown total_loss(const Prediction<S>& normal, const Prediction<S>& pseudo, const Image<S>& target,
                         const LossWeights& w) {
    return total_loss(normal.frame, pseudo.frame, target, normal.features.tokens, pseudo.features.tokens, w);
}

template <typename S>
struct LossGradients {
    Image<S> d_pred_O, d_pred_P;
    Mat<S> d_f_O, d_f_P;
};

/// Gradient of the weighted total with respect to both predictions and both
/// feature sets. `stop_grad_normal` detaches f_O inside the consistency term.
template <typename S>
LossGradients<S> total_loss_grad(const Image<S>& pred_O, const Image<S>& pred_P, const Image<S>& target,
                                 const Mat<S>& f_O, const Mat<S>& f_P, const LossWeights& w,
                                 bool stop_grad_normal = false) {
    LossGradients<S> g;
    const S lN = static_cast<S>(w.lambda_N), lP = static_cast<S>(w.lambda_P), lC = static_cast<S>(w.lambda_cst);
    g.d_pred_O = intensity_loss_grad(pred_O, target);
    {
        const auto gd = gradient_loss_grad(pred_O, target);
        for (std::size_t i = 0; i < gd.size(); ++i) g.d_pred_O.data[i] = lN * (g.d_pred_O.data[i] + gd.data[i]);
    }
    g.d_pred_P = intensity_loss_grad(pred_P, target);
    {
        const auto gd = gradient_loss_grad(pred_P, target);
        for (std::size_t i = 0; i < gd.size(); ++i) g.d_pred_P.data[i] = lP * (g.d_pred_P.data[i] + gd.data[i]);
    }
    if (lC != S(0)) {
        auto [a, b] = consistency_loss_grad(f_O, f_P);
        g.d_f_O = stop_grad_normal ? Mat<S>::Zero(f_O.rows(), f_O.cols()).eval() : (lC * a).eval();
        g.d_f_P = lC * b;
    } else {
        g.d_f_O = Mat<S>::Zero(f_O.rows(), f_O.cols());
        g.d_f_P = Mat<S>::Zero(f_P.rows(), f_P.cols());
    }
    return g;
}

/// Gradient of lambda * (L_int + L_gd) for a single branch.
template <typename S>
Image<S> prediction_loss_grad(const Image<S>& pred, const Image<S>& target, double lambda) {
    Image<S> g = intensity_loss_grad(pred, target);
    const auto gd = gradient_loss_grad(pred, target);
    const S l = static_cast<S>(lambda);
    for (std::size_t i = 0; i < gd.size(); ++i) g.data[i] = l * (g.data[i] + gd.data[i]);
    return g;
}

}  // namespace mvad
