#pragma once

// Kernel soft-argmax normalization, dense flow fields, soft-sampled
// keypoint transfer and the matching objective.
//
// Coordinate convention: grid coordinates with x = column, y = row,
// origin 0, stride 1. Pixel <-> grid conversion happens at module
// boundaries (see datasets).

#include <cmath>
#include <utility>
#include <vector>

#include "tfm/correlation.hpp"
#include "tfm/tensor.hpp"

namespace tfm {

struct NormalizedCorrelation {
    Tensor values;  // (Hb, Wb, Hb, Wb); every (i,j) slice is a simplex
    double kernel_sigma = 5.0;
    double softmax_temperature = 0.02;
};

struct FlowField {
    Tensor source_grid;  // (Hb, Wb, 2), (x, y) regular grid coordinates
    Tensor predicted;    // (Hb, Wb, 2), expected target coordinates
};

struct SoftSamplerWeights {
    Tensor values;  // (Hb, Wb), non-negative, sums to 1
    std::pair<double, double> keypoint{0.0, 0.0};
    double tau_dist = 1.5;
    bool fallback_used = false;  // keypoint had no grid point within tau_dist
};

// Softmax normalization of the raw correlation modulated by a Gaussian
// centered on the per-slice argmax (ties: lowest flattened index):
//   out[i,j,k,l] = exp(G^p[k,l]*c[i,j,k,l]/temp) / sum_{k',l'} exp(...)
inline NormalizedCorrelation kernel_softargmax(const Correlation4D& c_out, double sigma,
                                               double temperature) {
    if (sigma <= 0.0) throw TensorError("kernel_softargmax: sigma must be positive");
    if (temperature <= 0.0) throw TensorError("kernel_softargmax: temperature must be positive");
    const Shape& s = c_out.values.shape();
    if (s.size() != 4 || s[0] != s[2] || s[1] != s[3])
        throw TensorError("kernel_softargmax expects (H,W,H,W), got " + shape_str(s));
    std::size_t H = s[0], W = s[1], S = H * W;
    // Gaussian gains are constants w.r.t. the tape: the argmax is treated
    // as locally constant.
    std::vector<double> gain(S * S);
    const auto& cv = c_out.values.data();
    for (std::size_t src = 0; src < S; ++src) {
        std::size_t best = 0;
        double bv = cv[src * S];
        for (std::size_t t = 1; t < S; ++t)
            if (cv[src * S + t] > bv) {
                bv = cv[src * S + t];
                best = t;
            }
        double pk = (double)(best / W), pl = (double)(best % W);
        for (std::size_t k = 0; k < H; ++k)
            for (std::size_t l = 0; l < W; ++l) {
                double dk = (double)k - pk, dl = (double)l - pl;
                gain[src * S + k * W + l] =
                    std::exp(-(dk * dk + dl * dl) / (2.0 * sigma * sigma));
            }
    }
    Tensor gain_t({S, S}, std::move(gain));
    Tensor flat = reshape(c_out.values, {S, S});
    Tensor logits = scale(mul(flat, gain_t), 1.0 / temperature);
    Tensor norm = softmax(logits, 1);
    NormalizedCorrelation out;
    out.values = reshape(norm, {H, W, H, W});
    out.kernel_sigma = sigma;
    out.softmax_temperature = temperature;
    return out;
}

// Regular (x, y) coordinate grid as an (Hb*Wb, 2) constant tensor.
inline Tensor coordinate_grid(std::size_t H, std::size_t W) {
    std::vector<double> g(H * W * 2);
    for (std::size_t k = 0; k < H; ++k)
        for (std::size_t l = 0; l < W; ++l) {
            g[(k * W + l) * 2 + 0] = (double)l;  // x = column
            g[(k * W + l) * 2 + 1] = (double)k;  // y = row
        }
    return Tensor({H * W, 2}, std::move(g));
}

// P̂'[i,j] = sum_{k,l} C^norm[i,j,k,l] * P[k,l]: the expectation of grid
// coordinates under each slice distribution.
inline FlowField flow_from_correlation(const NormalizedCorrelation& c_norm) {
    const Shape& s = c_norm.values.shape();
    std::size_t H = s[0], W = s[1], S = H * W;
    const auto& cv = c_norm.values.data();
    for (std::size_t src = 0; src < S; ++src) {
        double sum = 0.0;
        for (std::size_t t = 0; t < S; ++t) sum += cv[src * S + t];
        if (std::abs(sum - 1.0) > 1e-6)
            throw TensorError("flow_from_correlation: slice " + std::to_string(src) +
                              " is not a probability simplex (sum=" + std::to_string(sum) +
                              "); upstream normalization is broken");
    }
    Tensor grid = coordinate_grid(H, W);
    Tensor flat = reshape(c_norm.values, {S, S});
    FlowField out;
    out.predicted = reshape(matmul(flat, grid), {H, W, 2});
    out.source_grid = reshape(grid, {H, W, 2});
    return out;
}

// W_ij = max(0, tau - dist(keypoint, (j, i))), normalized to sum 1.
// Fallback: with no grid point inside the tau disk, the nearest grid point
// gets weight 1 and the record is flagged.
inline SoftSamplerWeights soft_sampler(std::pair<double, double> keypoint,
                                       std::pair<std::size_t, std::size_t> grid,
                                       double tau_dist) {
    if (tau_dist <= 0.0) throw TensorError("soft_sampler: tau_dist must be positive");
    std::size_t H = grid.first, W = grid.second;
    std::vector<double> w(H * W, 0.0);
    double total = 0.0;
    double best_d = std::numeric_limits<double>::infinity();
    std::size_t best = 0;
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
            double dx = keypoint.first - (double)j, dy = keypoint.second - (double)i;
            double d = std::sqrt(dx * dx + dy * dy);
            if (d < best_d) {
                best_d = d;
                best = i * W + j;
            }
            double v = std::max(0.0, tau_dist - d);
            w[i * W + j] = v;
            total += v;
        }
    SoftSamplerWeights out;
    out.keypoint = keypoint;
    out.tau_dist = tau_dist;
    if (total > 0.0) {
        for (auto& v : w) v /= total;
    } else {
        w.assign(H * W, 0.0);
        w[best] = 1.0;
        out.fallback_used = true;
    }
    out.values = Tensor({H, W}, std::move(w));
    return out;
}

struct KeypointTransfer {
    std::vector<Tensor> predicted;  // one (1,2) tensor per keypoint, on the tape
    std::vector<bool> fallback_used;
};

// k̂' = sum_{ij} P̂'_{ij} W^(k)_{ij}; differentiable w.r.t. the flow field.
inline KeypointTransfer transfer_keypoints(const FlowField& flow,
                                           const std::vector<std::pair<double, double>>& keypoints,
                                           double tau_dist) {
    const Shape& s = flow.predicted.shape();
    std::size_t H = s[0], W = s[1], S = H * W;
    Tensor flat = reshape(flow.predicted, {S, 2});
    KeypointTransfer out;
    for (const auto& kp : keypoints) {
        SoftSamplerWeights ws = soft_sampler(kp, {H, W}, tau_dist);
        Tensor wcol = reshape(ws.values, {1, S});
        out.predicted.push_back(matmul(wcol, flat));  // (1,2)
        out.fallback_used.push_back(ws.fallback_used);
    }
    return out;
}

enum class LossNorm { squared, euclidean };

// L = (1/M) * sum_m ||k̂_m - k̂'_m||^2 (or the non-squared Euclidean
// distance when configured).
inline Tensor matching_loss(const std::vector<Tensor>& predicted,
                            const std::vector<std::pair<double, double>>& ground_truth,
                            LossNorm norm = LossNorm::squared) {
    if (predicted.empty()) throw TensorError("matching_loss: no keypoints");
    if (predicted.size() != ground_truth.size())
        throw TensorError("matching_loss: length mismatch " + std::to_string(predicted.size()) +
                          " vs " + std::to_string(ground_truth.size()));
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t m = 0; m < predicted.size(); ++m) {
        Tensor gt({1, 2}, {ground_truth[m].first, ground_truth[m].second});
        Tensor d = sub(predicted[m], gt);
        Tensor sq = sum_all(mul(d, d));
        if (norm == LossNorm::euclidean) sq = sqrt_eps(sq, 1e-12);
        total = add(total, sq);
    }
    return scale(total, 1.0 / (double)predicted.size());
}

}  // namespace tfm
