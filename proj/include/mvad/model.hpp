// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "mvad/core.hpp"
#include "mvad/data.hpp"
#include "mvad/masking.hpp"

namespace mvad {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct ModelConfig {
    int image_height = 64;
    int image_width = 64;
    int patch_size = 8;
    int num_frames = 4;  // T
    int channels = 1;    // C; the encoder sees T*C input channels
    int embed_dim = 64;
    int depth = 2;
    int heads = 4;
    int mlp_ratio = 4;
    double ln_eps = 1e-6;

    int in_channels() const { return num_frames * channels; }
    int out_channels() const { return channels; }
    int hidden_dim() const { return embed_dim * mlp_ratio; }
    PatchGrid grid() const { return PatchGrid::for_frame(image_height, image_width, patch_size); }
    int num_tokens() const { return grid().num_tokens(); }
    int patch_in_dim() const { return patch_size * patch_size * in_channels(); }
    int patch_out_dim() const { return patch_size * patch_size * out_channels(); }

    void validate() const {
        check_patch_divisible(image_height, image_width, patch_size);
        if (num_frames < 1) throw ConfigError("num_frames (T) must be >= 1");
        if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
        if (embed_dim < 1 || depth < 0 || heads < 1 || mlp_ratio < 1) throw ConfigError("invalid transformer dims");
        if (embed_dim % heads != 0)
            throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " + std::to_string(heads));
    }

    /// Closed-form parameter count.
    std::size_t num_parameters() const {
        const std::size_t d = static_cast<std::size_t>(embed_dim);
        const std::size_t hid = static_cast<std::size_t>(hidden_dim());
        const std::size_t per_block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * hid + hid) + (hid * d + d);
        return static_cast<std::size_t>(patch_in_dim()) * d + d + static_cast<std::size_t>(num_tokens()) * d + d +
               static_cast<std::size_t>(depth) * per_block + 2 * d +
               d * static_cast<std::size_t>(patch_out_dim()) + static_cast<std::size_t>(patch_out_dim());
    }

    bool operator==(const ModelConfig&) const = default;

    static ModelConfig preset(const std::string& name) {
        ModelConfig c;
        if (name == "tiny") {
            c.embed_dim = 64;
            c.depth = 2;
            c.heads = 4;
        } else if (name == "vit-b") {
            c.embed_dim = 768;
            c.depth = 12;
            c.heads = 12;
        } else {
            throw ConfigError("unknown model preset '" + name + "' (expected tiny|vit-b)");
        }
        return c;
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"image_height", c.image_height}, {"image_width", c.image_width}, {"patch_size", c.patch_size},
                       {"num_frames", c.num_frames},     {"channels", c.channels},       {"embed_dim", c.embed_dim},
                       {"depth", c.depth},               {"heads", c.heads},             {"mlp_ratio", c.mlp_ratio},
                       {"ln_eps", c.ln_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.image_height = j.at("image_height").get<int>();
    c.image_width = j.at("image_width").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.num_frames = j.at("num_frames").get<int>();
    c.channels = j.at("channels").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.depth = j.at("depth").get<int>();
    c.heads = j.at("heads").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.ln_eps = j.at("ln_eps").get<double>();
}

// ---------------------------------------------------------------------------
// Parameters. Every tensor is a row-major matrix (vectors are 1 x n).
// Linear weights are stored (in x out): y = x * W + b.

template <typename S>
struct BlockParams {
    Mat<S> norm1_w, norm1_b;
    Mat<S> qkv_w, qkv_b;
    Mat<S> proj_w, proj_b;
    Mat<S> norm2_w, norm2_b;
    Mat<S> fc1_w, fc1_b;
    Mat<S> fc2_w, fc2_b;
};

template <typename S>
struct ModelParams {
    ModelConfig config;
    Mat<S> patch_w, patch_b;
    Mat<S> pos_embed;   // tokens x d
    Mat<S> mask_token;  // 1 x d
    std::vector<BlockParams<S>> blocks;
    Mat<S> norm_w, norm_b;
    Mat<S> dec_w, dec_b;

    /// All tensors zero-filled with the shapes implied by `cfg`.
    static ModelParams zeros(const ModelConfig& cfg) {
        cfg.validate();
        const int d = cfg.embed_dim, hid = cfg.hidden_dim();
        ModelParams p;
        p.config = cfg;
        p.patch_w = Mat<S>::Zero(cfg.patch_in_dim(), d);
        p.patch_b = Mat<S>::Zero(1, d);
        p.pos_embed = Mat<S>::Zero(cfg.num_tokens(), d);
        p.mask_token = Mat<S>::Zero(1, d);
        p.blocks.resize(static_cast<std::size_t>(cfg.depth));
        for (auto& b : p.blocks) {
            b.norm1_w = Mat<S>::Zero(1, d);
            b.norm1_b = Mat<S>::Zero(1, d);
            b.qkv_w = Mat<S>::Zero(d, 3 * d);
            b.qkv_b = Mat<S>::Zero(1, 3 * d);
            b.proj_w = Mat<S>::Zero(d, d);
            b.proj_b = Mat<S>::Zero(1, d);
            b.norm2_w = Mat<S>::Zero(1, d);
            b.norm2_b = Mat<S>::Zero(1, d);
            b.fc1_w = Mat<S>::Zero(d, hid);
            b.fc1_b = Mat<S>::Zero(1, hid);
            b.fc2_w = Mat<S>::Zero(hid, d);
            b.fc2_b = Mat<S>::Zero(1, d);
        }
        p.norm_w = Mat<S>::Zero(1, d);
        p.norm_b = Mat<S>::Zero(1, d);
        p.dec_w = Mat<S>::Zero(d, cfg.patch_out_dim());
        p.dec_b = Mat<S>::Zero(1, cfg.patch_out_dim());
        return p;
    }

    /// Visits (dotted name, tensor) in a fixed order.
    template <typename F>
    void for_each(F&& f) {
        f(std::string("patch_embed.weight"), patch_w);
        f(std::string("patch_embed.bias"), patch_b);
        f(std::string("pos_embed"), pos_embed);
        f(std::string("mask_token"), mask_token);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string pre = "blocks." + std::to_string(i) + ".";
            auto& b = blocks[i];
            f(pre + "norm1.weight", b.norm1_w);
            f(pre + "norm1.bias", b.norm1_b);
            f(pre + "attn.qkv.weight", b.qkv_w);
            f(pre + "attn.qkv.bias", b.qkv_b);
            f(pre + "attn.proj.weight", b.proj_w);
            f(pre + "attn.proj.bias", b.proj_b);
            f(pre + "norm2.weight", b.norm2_w);
            f(pre + "norm2.bias", b.norm2_b);
            f(pre + "mlp.fc1.weight", b.fc1_w);
            f(pre + "mlp.fc1.bias", b.fc1_b);
            f(pre + "mlp.fc2.weight", b.fc2_w);
            f(pre + "mlp.fc2.bias", b.fc2_b);
        }
        f(std::string("norm.weight"), norm_w);
        f(std::string("norm.bias"), norm_b);
        f(std::string("decoder.weight"), dec_w);
        f(std::string("decoder.bias"), dec_b);
    }

    template <typename F>
    void for_each(F&& f) const {
        const_cast<ModelParams*>(this)->for_each([&](const std::string& n, Mat<S>& t) { f(n, static_cast<const Mat<S>&>(t)); });
    }

    std::vector<std::pair<std::string, Mat<S>*>> tensors() {
        std::vector<std::pair<std::string, Mat<S>*>> out;
        for_each([&](const std::string& n, Mat<S>& t) { out.emplace_back(n, &t); });
        return out;
    }

    std::size_t num_parameters() const {
        std::size_t n = 0;
        for_each([&](const std::string&, const Mat<S>& t) { n += static_cast<std::size_t>(t.size()); });
        return n;
    }

    bool all_finite() const {
        bool ok = true;
        for_each([&](const std::string&, const Mat<S>& t) { ok = ok && t.allFinite(); });
        return ok;
    }

    void set_zero() {
        for_each([](const std::string&, Mat<S>& t) { t.setZero(); });
    }

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out = ModelParams<U>::zeros(config);
        auto dst = out.tensors();
        std::size_t i = 0;
        for_each([&](const std::string&, const Mat<S>& t) { *dst[i++].second = t.template cast<U>(); });
        return out;
    }

    bool operator==(const ModelParams& o) const {
        if (!(config == o.config)) return false;
        auto a = const_cast<ModelParams*>(this)->tensors();
        auto b = const_cast<ModelParams&>(o).tensors();
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i].second->rows() != b[i].second->rows() || a[i].second->cols() != b[i].second->cols() ||
                *a[i].second != *b[i].second)
                return false;
        return true;
    }
};

constexpr std::uint32_t kTagInit = 32;

/// Random initialization: truncated normal (std 0.02) for every weight
/// matrix, the positional embedding and the mask token; zero biases; unit
/// LayerNorm scales.
template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    ModelParams<S> p = ModelParams<S>::zeros(cfg);
    std::mt19937_64 rng(derive_seed(seed, kTagInit, 0));
    p.for_each([&](const std::string& name, Mat<S>& t) {
        const bool is_norm = name.find("norm") != std::string::npos;
        const bool is_bias = name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
        if (is_norm && !is_bias) {
            t.setOnes();
        } else if (is_bias) {
            t.setZero();
        } else {
            for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(truncated_normal(rng, 0.02));
        }
    });
    return p;
}

// ---------------------------------------------------------------------------
// Tokenization.

/// Input tokens (N x p*p*T*C), feature order (dy, dx, t, c).
template <typename S>
Mat<S> patchify(const FrameWindow& w, const ModelConfig& cfg) {
    if (w.num_inputs() != cfg.num_frames)
        throw ShapeError("window has " + std::to_string(w.num_inputs()) + " input frames, model expects " +
                         std::to_string(cfg.num_frames));
    for (const Frame& f : w.inputs)
        if (f.height != cfg.image_height || f.width != cfg.image_width || f.channels != cfg.channels)
            throw ShapeError("frame shape " + shape_string(f) + " does not match model input " +
                             shape_string(cfg.image_height, cfg.image_width, cfg.channels));
    const PatchGrid g = cfg.grid();
    const int p = cfg.patch_size, T = cfg.num_frames, C = cfg.channels;
    Mat<S> X(g.num_tokens(), cfg.patch_in_dim());
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) {
            S* row = X.row(r * g.cols + c).data();
            int k = 0;
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    for (int t = 0; t < T; ++t)
                        for (int ch = 0; ch < C; ++ch)
                            row[k++] = static_cast<S>(w.inputs[static_cast<std::size_t>(t)].at(r * p + dy, c * p + dx, ch));
        }
    return X;
}

/// Inverse of the decoder's token layout: (N x p*p*C) -> H x W x C.
template <typename S>
Image<S> fold(const Mat<S>& tokens, const ModelConfig& cfg) {
    const PatchGrid g = cfg.grid();
    const int p = cfg.patch_size, C = cfg.channels;
    if (tokens.rows() != g.num_tokens() || tokens.cols() != cfg.patch_out_dim())
        throw ShapeError("fold: token matrix " + std::to_string(tokens.rows()) + "x" + std::to_string(tokens.cols()) +
                         " does not match grid");
    Image<S> out(cfg.image_height, cfg.image_width, C);
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) {
            const S* row = tokens.row(r * g.cols + c).data();
            int k = 0;
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    for (int ch = 0; ch < C; ++ch) out.at(r * p + dy, c * p + dx, ch) = row[k++];
        }
    return out;
}

template <typename S>
Mat<S> unfold(const Image<S>& img, const ModelConfig& cfg) {
    if (img.height != cfg.image_height || img.width != cfg.image_width || img.channels != cfg.channels)
        throw ShapeError("unfold: image " + shape_string(img) + " does not match model output " +
                         shape_string(cfg.image_height, cfg.image_width, cfg.channels));
    const PatchGrid g = cfg.grid();
    const int p = cfg.patch_size, C = cfg.channels;
    Mat<S> tokens(g.num_tokens(), cfg.patch_out_dim());
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) {
            S* row = tokens.row(r * g.cols + c).data();
            int k = 0;
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    for (int ch = 0; ch < C; ++ch) row[k++] = img.at(r * p + dy, c * p + dx, ch);
        }
    return tokens;
}

// ---------------------------------------------------------------------------
// Layers.

namespace detail {

template <typename S>
struct LnCache {
    Mat<S> xhat;
    Vec<S> rstd;
};

template <typename S>
Mat<S> layer_norm(const Mat<S>& x, const Mat<S>& gamma, const Mat<S>& beta, double eps, LnCache<S>* cache) {
    const Eigen::Index n = x.rows(), d = x.cols();
    Mat<S> xhat(n, d);
    Vec<S> rstd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const S mu = x.row(i).mean();
        const auto centered = (x.row(i).array() - mu).eval();
        const S var = centered.square().mean();
        rstd(i) = S(1) / std::sqrt(var + static_cast<S>(eps));
        xhat.row(i) = centered * rstd(i);
    }
    Mat<S> y = (xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

template <typename S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const LnCache<S>& c, const Mat<S>& gamma, Mat<S>& dgamma, Mat<S>& dbeta) {
    dgamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    dbeta += dy.colwise().sum();
    const Mat<S> dxhat = dy.array().rowwise() * gamma.row(0).array();
    Mat<S> dx(dy.rows(), dy.cols());
    const S inv_d = S(1) / static_cast<S>(dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const S m1 = dxhat.row(i).sum() * inv_d;
        const S m2 = dxhat.row(i).dot(c.xhat.row(i)) * inv_d;
        dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
    }
    return dx;
}

template <typename S>
S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x * S(0.70710678118654752440)));
}

template <typename S>
S gelu_grad(S x) {
    const S cdf = S(0.5) * (S(1) + std::erf(x * S(0.70710678118654752440)));
    const S pdf = std::exp(S(-0.5) * x * x) * S(0.39894228040143267794);
    return cdf + x * pdf;
}

template <typename S>
void softmax_rows_inplace(Mat<S>& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        auto row = m.row(i).array();
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
    }
}

template <typename S>
void add_bias(Mat<S>& y, const Mat<S>& b) {
    y.rowwise() += b.row(0);
}

}  // namespace detail

template <typename S>
struct EncodedFeatures {
    Mat<S> tokens;  // tokens x d, post final LayerNorm
};

template <typename S>
struct BlockCache {
    Mat<S> x_in;
    detail::LnCache<S> ln1;
    Mat<S> a;    // norm1 output
    Mat<S> qkv;  // N x 3d
    std::vector<Mat<S>> attn;  // per-head softmax probabilities
    Mat<S> o;    // concatenated head outputs
    Mat<S> x_mid;
    detail::LnCache<S> ln2;
    Mat<S> b;    // norm2 output
    Mat<S> h;    // fc1 pre-activation
    Mat<S> g;    // gelu(h)
};

template <typename S>
struct ForwardCache {
    Mat<S> patches;
    std::vector<std::uint8_t> masked;  // empty when no mask was applied
    std::vector<BlockCache<S>> blocks;
    detail::LnCache<S> norm;
    Mat<S> features;
};

template <typename S>
struct Prediction {
    Image<S> frame;
    EncodedFeatures<S> features;
};

namespace detail {

template <typename S>
Mat<S> block_forward(const BlockParams<S>& bp, const ModelConfig& cfg, const Mat<S>& x, BlockCache<S>* cache) {
    const int d = cfg.embed_dim, H = cfg.heads, dh = d / H;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    const Eigen::Index n = x.rows();

    LnCache<S> ln1;
    Mat<S> a = layer_norm(x, bp.norm1_w, bp.norm1_b, cfg.ln_eps, cache ? &ln1 : nullptr);
    Mat<S> qkv = a * bp.qkv_w;
    add_bias(qkv, bp.qkv_b);

    Mat<S> o(n, d);
    std::vector<Mat<S>> attn;
    if (cache) attn.reserve(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
        Mat<S> s = (qkv.middleCols(h * dh, dh) * qkv.middleCols(d + h * dh, dh).transpose()) * scale;
        softmax_rows_inplace(s);
        o.middleCols(h * dh, dh).noalias() = s * qkv.middleCols(2 * d + h * dh, dh);
        if (cache) attn.push_back(std::move(s));
    }
    Mat<S> x_mid = x + o * bp.proj_w;
    add_bias(x_mid, bp.proj_b);

    LnCache<S> ln2;
    Mat<S> b = layer_norm(x_mid, bp.norm2_w, bp.norm2_b, cfg.ln_eps, cache ? &ln2 : nullptr);
    Mat<S> hpre = b * bp.fc1_w;
    add_bias(hpre, bp.fc1_b);
    Mat<S> g = hpre.unaryExpr([](S v) { return gelu(v); });
    Mat<S> out = x_mid + g * bp.fc2_w;
    add_bias(out, bp.fc2_b);

    if (cache) {
        cache->x_in = x;
        cache->ln1 = std::move(ln1);
        cache->a = std::move(a);
        cache->qkv = std::move(qkv);
        cache->attn = std::move(attn);
        cache->o = std::move(o);
        cache->x_mid = std::move(x_mid);
        cache->ln2 = std::move(ln2);
        cache->b = std::move(b);
        cache->h = std::move(hpre);
        cache->g = std::move(g);
    }
    return out;
}

template <typename S>
Mat<S> block_backward(const BlockParams<S>& bp, const ModelConfig& cfg, const BlockCache<S>& c, const Mat<S>& dout,
                      BlockParams<S>& gp) {
    const int d = cfg.embed_dim, H = cfg.heads, dh = d / H;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    const Eigen::Index n = dout.rows();

    // MLP branch.
    gp.fc2_w.noalias() += c.g.transpose() * dout;
    gp.fc2_b += dout.colwise().sum();
    Mat<S> dh_pre = dout * bp.fc2_w.transpose();
    for (Eigen::Index i = 0; i < dh_pre.size(); ++i) dh_pre.data()[i] *= gelu_grad(c.h.data()[i]);
    gp.fc1_w.noalias() += c.b.transpose() * dh_pre;
    gp.fc1_b += dh_pre.colwise().sum();
    const Mat<S> db = dh_pre * bp.fc1_w.transpose();
    Mat<S> dx_mid = dout + layer_norm_backward(db, c.ln2, bp.norm2_w, gp.norm2_w, gp.norm2_b);

    // Attention branch.
    gp.proj_w.noalias() += c.o.transpose() * dx_mid;
    gp.proj_b += dx_mid.colwise().sum();
    const Mat<S> d_o = dx_mid * bp.proj_w.transpose();
    Mat<S> dqkv(n, 3 * d);
    for (int h = 0; h < H; ++h) {
        const Mat<S>& P = c.attn[static_cast<std::size_t>(h)];
        const auto dO_h = d_o.middleCols(h * dh, dh);
        Mat<S> dP = dO_h * c.qkv.middleCols(2 * d + h * dh, dh).transpose();
        dqkv.middleCols(2 * d + h * dh, dh).noalias() = P.transpose() * dO_h;
        for (Eigen::Index i = 0; i < n; ++i) {
            const S dot = dP.row(i).dot(P.row(i));
            dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
        }
        dqkv.middleCols(h * dh, dh).noalias() = (dP * c.qkv.middleCols(d + h * dh, dh)) * scale;
        dqkv.middleCols(d + h * dh, dh).noalias() = (dP.transpose() * c.qkv.middleCols(h * dh, dh)) * scale;
    }
    gp.qkv_w.noalias() += c.a.transpose() * dqkv;
    gp.qkv_b += dqkv.colwise().sum();
    const Mat<S> da = dqkv * bp.qkv_w.transpose();
    return dx_mid + layer_norm_backward(da, c.ln1, bp.norm1_w, gp.norm1_w, gp.norm1_b);
}

template <typename S>
Mat<S> encode_tokens(const ModelParams<S>& params, Mat<S> patches, const PatchMask* mask,
                     std::type_identity_t<ForwardCache<S>*> cache) {
    const ModelConfig& cfg = params.config;
    if (mask && !(mask->grid == cfg.grid()))
        throw ShapeError("mask grid " + std::to_string(mask->grid.rows) + "x" + std::to_string(mask->grid.cols) +
                         " does not match model grid " + std::to_string(cfg.grid().rows) + "x" +
                         std::to_string(cfg.grid().cols));
    Mat<S> z = patches * params.patch_w;
    add_bias(z, params.patch_b);
    if (mask) apply_mask_inplace(z, *mask, params.mask_token);
    z += params.pos_embed;
    if (cache) cache->blocks.resize(params.blocks.size());
    for (std::size_t i = 0; i < params.blocks.size(); ++i) {
        z = block_forward(params.blocks[i], cfg, z, cache ? &cache->blocks[i] : nullptr);
        if (!z.allFinite()) throw NumericError("non-finite activations after transformer block " + std::to_string(i));
    }
    Mat<S> f = layer_norm(z, params.norm_w, params.norm_b, cfg.ln_eps, cache ? &cache->norm : nullptr);
    if (!f.allFinite()) throw NumericError("non-finite activations after final norm");
    if (cache) {
        cache->patches = std::move(patches);
        cache->masked = mask ? mask->masked : std::vector<std::uint8_t>{};
        cache->features = f;
    }
    return f;
}

}  // namespace detail

/// Encoder: patchify, embed, optional mask-token substitution, positional
/// embedding, transformer blocks, final LayerNorm.
template <typename S>
EncodedFeatures<S> encode(const ModelParams<S>& params, const FrameWindow& window, const PatchMask* mask = nullptr) {
    return {detail::encode_tokens(params, patchify<S>(window, params.config), mask, nullptr)};
}

/// One-layer linear decoder, folded back to H x W x C.
template <typename S>
Image<S> decode(const ModelParams<S>& params, const EncodedFeatures<S>& feats) {
    const ModelConfig& cfg = params.config;
    if (feats.tokens.rows() != cfg.num_tokens() || feats.tokens.cols() != cfg.embed_dim)
        throw ShapeError("decode: features " + std::to_string(feats.tokens.rows()) + "x" +
                         std::to_string(feats.tokens.cols()) + " do not match " + std::to_string(cfg.num_tokens()) +
                         "x" + std::to_string(cfg.embed_dim));
    Mat<S> out = feats.tokens * params.dec_w;
    detail::add_bias(out, params.dec_b);
    return fold(out, cfg);
}

template <typename S>
Prediction<S> forward(const ModelParams<S>& params, const FrameWindow& window, const PatchMask* mask = nullptr) {
    EncodedFeatures<S> f = encode(params, window, mask);
    Image<S> y = decode(params, f);
    return {std::move(y), std::move(f)};
}

/// Forward pass that records what backward() needs.
template <typename S>
Prediction<S> forward_train(const ModelParams<S>& params, const Mat<S>& patches, const PatchMask* mask,
                            ForwardCache<S>& cache) {
    EncodedFeatures<S> f{detail::encode_tokens(params, patches, mask, &cache)};
    Image<S> y = decode(params, f);
    return {std::move(y), std::move(f)};
}

/// Accumulates parameter gradients into `grads` given the loss gradient with
/// respect to the predicted frame and, optionally, the encoder features.
template <typename S>
void backward(const ModelParams<S>& params, const ForwardCache<S>& cache, const Image<S>& d_pred,
              std::type_identity_t<const Mat<S>*> d_features, ModelParams<S>& grads) {
    const ModelConfig& cfg = params.config;
    const Mat<S> d_out = unfold(d_pred, cfg);
    grads.dec_w.noalias() += cache.features.transpose() * d_out;
    grads.dec_b += d_out.colwise().sum();
    Mat<S> df = d_out * params.dec_w.transpose();
    if (d_features) df += *d_features;
    Mat<S> dz = detail::layer_norm_backward(df, cache.norm, params.norm_w, grads.norm_w, grads.norm_b);
    for (std::size_t i = params.blocks.size(); i-- > 0;)
        dz = detail::block_backward(params.blocks[i], cfg, cache.blocks[i], dz, grads.blocks[i]);
    grads.pos_embed += dz;
    if (!cache.masked.empty()) {
        for (Eigen::Index r = 0; r < dz.rows(); ++r)
            if (cache.masked[static_cast<std::size_t>(r)]) {
                grads.mask_token += dz.row(r);
                dz.row(r).setZero();
            }
    }
    grads.patch_w.noalias() += cache.patches.transpose() * dz;
    grads.patch_b += dz.colwise().sum();
}

}  // namespace mvad
