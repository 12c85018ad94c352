#pragma once

// Nonlocality analysis: pairwise attention reconstruction for additive
// attention, the nonlocality metric over 4D offsets, the conv-as-attention
// analytic baseline and difficulty binning.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tfm/m2m.hpp"
#include "tfm/tensor.hpp"

namespace tfm {

struct NonlocalityReport {
    std::vector<double> per_layer;  // Φ^l
    double total = 0.0;             // Φ = Σ_l Φ^l
    std::size_t n_heads = 0;
    std::pair<std::size_t, std::size_t> grid{0, 0};
};

struct ConvSpec {
    std::size_t kernel_size = 3;  // K, odd
    std::size_t dims = 2;         // d
};

// Pairwise query-key interaction A = σ(Q̂ K^T) with
// Q̂_i = Q_i * σ(τ w_q Q^T)_i. Analysis-only; materializes (T, T).
inline Tensor pairwise_attention(const Tensor& q_proj, const Tensor& k_proj, const Tensor& w_q,
                                 double tau, std::size_t t_ceiling = 4096) {
    NoGrad ng;
    std::size_t T = q_proj.dim(0), Dh = q_proj.dim(1);
    if (T > t_ceiling)
        throw TensorError("pairwise_attention: T=" + std::to_string(T) +
                          " exceeds the ceiling " + std::to_string(t_ceiling));
    if (k_proj.dim(0) != T || k_proj.dim(1) != Dh || w_q.size() != Dh)
        throw TensorError("pairwise_attention: shape mismatch");
    Tensor alpha = softmax(scale(matmul(q_proj, reshape(w_q, {Dh, 1})), tau), 0);  // (T,1)
    Tensor q_hat = mul(q_proj, alpha);
    return softmax(matmul(q_hat, transpose(k_proj)), 1);
}

// Φ^l = (1/Z) Σ_h Σ_{q,k} A^(h)_{q,k} ||pos(q) - pos(k)||², Z = N_h * T,
// with pos decoding the 4D coordinates from the flattened index.
inline double nonlocality_attention(const std::vector<Tensor>& per_head_attention,
                                    std::pair<std::size_t, std::size_t> grid) {
    if (per_head_attention.empty()) throw TensorError("nonlocality_attention: no heads");
    std::size_t H = grid.first, W = grid.second;
    std::size_t T = H * W * H * W;
    auto positions = grid_positions(H, W);
    double acc = 0.0;
    for (const auto& a : per_head_attention) {
        if (a.rank() != 2 || a.dim(0) != T || a.dim(1) != T)
            throw TensorError("nonlocality_attention: attention must be (T,T) with T=HWHW");
        const auto& av = a.data();
        for (std::size_t q = 0; q < T; ++q) {
            double row = 0.0;
            for (std::size_t k = 0; k < T; ++k) row += av[q * T + k];
            if (std::abs(row - 1.0) > 1e-6)
                throw TensorError("nonlocality_attention: row " + std::to_string(q) +
                                  " is not a simplex");
            for (std::size_t k = 0; k < T; ++k) {
                double d2 = 0.0;
                for (int c = 0; c < 4; ++c) {
                    double d = positions[q][c] - positions[k][c];
                    d2 += d * d;
                }
                acc += av[q * T + k] * d2;
            }
        }
    }
    return acc / ((double)per_head_attention.size() * (double)T);
}

// Conv layer as an MHSA with K^d heads, each putting attention mass 1 at a
// fixed offset in Δ_K: Φ reduces to the mean of ||Δ||² over the offset set.
// Computed by explicit enumeration; the closed form is d*m(m+1)/3.
inline double nonlocality_conv(const ConvSpec& spec) {
    if (spec.kernel_size % 2 == 0)
        throw TensorError("nonlocality_conv: kernel size must be odd");
    if (spec.dims == 0) throw TensorError("nonlocality_conv: dims must be positive");
    long m = (long)(spec.kernel_size - 1) / 2;
    std::size_t K = spec.kernel_size;
    std::size_t count = 1;
    for (std::size_t i = 0; i < spec.dims; ++i) count *= K;
    double sum = 0.0;
    std::vector<long> offset(spec.dims, -m);
    for (std::size_t n = 0; n < count; ++n) {
        double d2 = 0.0;
        for (long o : offset) d2 += (double)(o * o);
        sum += d2;
        for (std::size_t d = spec.dims; d-- > 0;) {
            if (++offset[d] <= m) break;
            offset[d] = -m;
        }
    }
    return sum / (double)count;
}

inline double nonlocality_conv_closed_form(const ConvSpec& spec) {
    double m = (double)((spec.kernel_size - 1) / 2);
    return (double)spec.dims * m * (m + 1.0) / 3.0;
}

struct DifficultySample {
    double phi = 0.0;
    // label per difficulty type, e.g. {"viewpoint","easy"}
    std::map<std::string, std::string> labels;
};

struct DifficultyBin {
    std::size_t count = 0;
    // type -> level -> proportion within the bin
    std::map<std::string, std::map<std::string, double>> proportions;
};

// Sorts samples by Φ into n_bins equal-count groups (remainder to early
// bins) and tabulates per-bin label proportions per difficulty type.
inline std::vector<DifficultyBin> difficulty_binning(std::vector<DifficultySample> samples,
                                                     std::size_t n_bins) {
    if (samples.empty()) throw TensorError("difficulty_binning: no samples");
    if (n_bins == 0) throw TensorError("difficulty_binning: n_bins must be >= 1");
    std::stable_sort(samples.begin(), samples.end(),
                     [](const auto& a, const auto& b) { return a.phi < b.phi; });
    n_bins = std::min(n_bins, samples.size());
    std::size_t base = samples.size() / n_bins, rem = samples.size() % n_bins;
    std::vector<DifficultyBin> bins;
    std::size_t idx = 0;
    for (std::size_t b = 0; b < n_bins; ++b) {
        std::size_t sz = base + (b < rem ? 1 : 0);
        DifficultyBin bin;
        bin.count = sz;
        std::map<std::string, std::map<std::string, std::size_t>> counts;
        for (std::size_t i = 0; i < sz; ++i, ++idx)
            for (const auto& [type, level] : samples[idx].labels) counts[type][level]++;
        for (const auto& [type, levels] : counts)
            for (const auto& [level, c] : levels)
                bin.proportions[type][level] = (double)c / (double)sz;
        bins.push_back(std::move(bin));
    }
    return bins;
}

}  // namespace tfm
