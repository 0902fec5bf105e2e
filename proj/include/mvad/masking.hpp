// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mvad/core.hpp"

namespace mvad {

/// Square-patch tokenizer grid over an H x W frame.
struct PatchGrid {
    int patch_size = 0;
    int rows = 0;
    int cols = 0;

    static PatchGrid for_frame(int height, int width, int patch_size) {
        if (patch_size <= 0 || height <= 0 || width <= 0 || height % patch_size != 0 || width % patch_size != 0)
            throw ConfigError("frame " + std::to_string(height) + "x" + std::to_string(width) +
                              " is not divisible by patch size " + std::to_string(patch_size));
        return PatchGrid{patch_size, height / patch_size, width / patch_size};
    }

    int num_tokens() const { return rows * cols; }
    bool operator==(const PatchGrid&) const = default;
};

struct PatchMask {
    PatchGrid grid;
    std::vector<std::uint8_t> masked;  // row-major over the grid, 1 = replaced by the mask token
    double ratio = 0.0;
    std::uint64_t seed = 0;

    int count() const {
        int n = 0;
        for (auto m : masked) n += m;
        return n;
    }
    bool operator==(const PatchMask&) const = default;
};

/// Number of masked patches: round-half-up of ratio * n.
inline int masked_count(double ratio, int n) { return static_cast<int>(std::floor(ratio * n + 0.5)); }

/// Uniformly random subset of exactly masked_count(ratio, N) patches.
inline PatchMask generate_mask(const PatchGrid& grid, double ratio, std::uint64_t seed) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mask ratio must lie in [0,1], got " + std::to_string(ratio));
    const int n = grid.num_tokens();
    const int k = masked_count(ratio, n);
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 rng(seed);
    // Partial Fisher-Yates: the first k slots end up a uniform k-subset.
    for (int i = 0; i < k; ++i) {
        const auto j = i + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(n - i)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    PatchMask mask{grid, std::vector<std::uint8_t>(static_cast<std::size_t>(n), 0), ratio, seed};
    for (int i = 0; i < k; ++i) mask.masked[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
    return mask;
}

/// Replaces the rows of `tokens` flagged in `mask` by `mask_token`; other rows
/// are left untouched.
template <typename Derived, typename RowDerived>
void apply_mask_inplace(Eigen::MatrixBase<Derived>& tokens, const PatchMask& mask,
                        const Eigen::MatrixBase<RowDerived>& mask_token) {
    if (tokens.rows() != mask.grid.num_tokens())
        throw ShapeError("apply_mask: " + std::to_string(tokens.rows()) + " tokens for a grid of " +
                         std::to_string(mask.grid.num_tokens()));
    if (mask_token.size() != tokens.cols())
        throw ShapeError("apply_mask: mask token has dimension " + std::to_string(mask_token.size()) +
                         ", embeddings have " + std::to_string(tokens.cols()));
    for (Eigen::Index i = 0; i < tokens.rows(); ++i)
        if (mask.masked[static_cast<std::size_t>(i)]) tokens.row(i) = mask_token.reshaped(1, tokens.cols());
}

template <typename Derived, typename RowDerived>
typename Derived::PlainObject apply_mask(const Eigen::MatrixBase<Derived>& tokens, const PatchMask& mask,
                                         const Eigen::MatrixBase<RowDerived>& mask_token) {
    typename Derived::PlainObject out = tokens;
    apply_mask_inplace(out, mask, mask_token);
    return out;
}

constexpr std::uint32_t kTagMask = 16;
constexpr std::uint32_t kTagPseudo = 17;

/// Stateless per-window mask seed; collision-free over (epoch, window) within a run.
inline std::uint64_t window_mask_seed(std::uint64_t run_seed, std::uint64_t epoch, std::uint64_t window_index) {
    return derive_seed(run_seed, kTagMask, epoch, window_index);
}

}  // namespace mvad
