#pragma once

// Per-layer 4D cosine-similarity correlation maps and their assembly into
// a multi-channel correlation tensor.

#include <utility>
#include <vector>

#include "tfm/tensor.hpp"

namespace tfm {

struct FeatureMap {
    Tensor values;  // (H_l, W_l, D_l)
    int layer_id = 0;
    std::pair<int, int> source_size{0, 0};  // image (width, height) in pixels

    std::size_t height() const { return values.dim(0); }
    std::size_t width() const { return values.dim(1); }
    std::size_t depth() const { return values.dim(2); }
};

struct Correlation4D {
    Tensor values;  // (H, W, H, W)
    std::pair<std::size_t, std::size_t> grid_size{0, 0};
};

struct MultiChannelCorrelation {
    Tensor values;  // (L, H, W, H, W)
    std::size_t channel_count = 0;
};

// C_{x,x̂} = ReLU(<F_x, F̂_x̂> / (|F_x||F̂_x̂|)), with zero-norm feature
// vectors yielding correlation 0. Differentiable w.r.t. both feature maps.
inline Correlation4D cosine_correlation(const FeatureMap& f, const FeatureMap& f_hat) {
    if (f.depth() != f_hat.depth())
        throw TensorError("cosine_correlation: channel depth mismatch " +
                          std::to_string(f.depth()) + " vs " + std::to_string(f_hat.depth()));
    if (f.height() != f_hat.height() || f.width() != f_hat.width())
        throw TensorError("cosine_correlation: spatial sizes must match; resize in assemble");
    const std::size_t H = f.height(), W = f.width(), D = f.depth();
    const double eps = 1e-12;  // zero-norm guard

    auto normalize_rows = [&](const Tensor& fm) {
        Tensor flat = reshape(fm, {H * W, D});
        Tensor sq = mul(flat, flat);
        Tensor ones = Tensor::full({D, 1}, 1.0);
        Tensor n2 = matmul(sq, ones);                 // (HW, 1)
        Tensor rnorm = rsqrt_eps(n2, eps);            // 1/sqrt(|F|^2 + eps)
        return mul(flat, rnorm);                      // broadcast (HW,D)*(HW,1)
    };

    Tensor a = normalize_rows(f.values);
    Tensor b = normalize_rows(f_hat.values);
    Tensor c = relu(matmul(a, transpose(b)));  // (HW, HW)
    Correlation4D out;
    out.values = reshape(c, {H, W, H, W});
    out.grid_size = {H, W};
    return out;
}

// 4D-bilinearly resizes every layer map to the target grid and stacks them
// as channels, preserving list order.
inline MultiChannelCorrelation assemble_multichannel(
    const std::vector<Correlation4D>& correlations,
    std::pair<std::size_t, std::size_t> target_grid) {
    if (correlations.empty()) throw TensorError("assemble_multichannel: empty list");
    const std::size_t H = target_grid.first, W = target_grid.second;
    if (H == 0 || W == 0) throw TensorError("assemble_multichannel: non-positive target grid");
    std::vector<Tensor> channels;
    channels.reserve(correlations.size());
    for (const auto& c : correlations) {
        Tensor r = bilinear_resize(c.values, {0, 1, 2, 3}, {H, W, H, W});
        channels.push_back(reshape(r, {1, H, W, H, W}));
    }
    MultiChannelCorrelation out;
    out.values = concat(channels, 0);
    out.channel_count = correlations.size();
    return out;
}

}  // namespace tfm
