#pragma once

// Match-to-match attention stack: flattening, channel embedding, rotary
// positional embedding, additive attention heads, multi-head aggregation,
// pre-LN residual blocks and the single-channel output projection, plus a
// vanilla quadratic attention baseline.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tfm/correlation.hpp"
#include "tfm/io.hpp"
#include "tfm/tensor.hpp"

namespace tfm {

// Flattened correlation as an attention input sequence. Flattening order
// is fixed: index t = ((i*W + j)*H + k)*W + l for source position (i,j)
// and target position (k,l).
struct MatchEmbedding {
    Tensor values;  // (T, D)
    std::pair<std::size_t, std::size_t> grid_size{0, 0};
};

enum class RopeMode { none, absolute_learned, rotary };

// How head dimensions are assigned to the four coordinate axes.
//   paired:   one group of rotation planes follows the flattened source
//             index i*W + j, the other the flattened target index k*W + l.
//             Requires D_h even.
//   per_axis: one group of planes per coordinate (i, j, k, l).
//             Requires D_h divisible by 8.
enum class RopePartition { paired, per_axis };

struct RopeConfig {
    RopeMode mode = RopeMode::rotary;
    double base_frequency = 10000.0;
    RopePartition axis_partition = RopePartition::paired;
};

struct StackConfig {
    std::size_t depth = 4;       // number of attention blocks N
    std::size_t n_heads = 8;     // N_h
    std::size_t head_dim = 4;    // D_h == D_v
    std::size_t d_in = 32;       // == n_heads * head_dim
    std::size_t mlp_hidden = 128;
    double tau_attn = 0.5;       // 1/sqrt(D_h) for the default head_dim

    void validate() const {
        if (depth > 64) throw TensorError("StackConfig: unreasonable depth");
        if (n_heads == 0 || head_dim == 0 || d_in == 0 || mlp_hidden == 0)
            throw TensorError("StackConfig: all dimensions must be positive");
        if (d_in != n_heads * head_dim)
            throw TensorError("StackConfig: d_in must equal n_heads*head_dim");
        if (tau_attn <= 0.0) throw TensorError("StackConfig: tau_attn must be positive");
    }
};

// --- positions and rotary embedding ----------------------------------------

using Position4 = std::array<double, 4>;  // (i, j, k, l)

inline std::vector<Position4> grid_positions(std::size_t H, std::size_t W) {
    std::vector<Position4> pos;
    pos.reserve(H * W * H * W);
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
            for (std::size_t k = 0; k < H; ++k)
                for (std::size_t l = 0; l < W; ++l)
                    pos.push_back({(double)i, (double)j, (double)k, (double)l});
    return pos;
}

namespace detail {

// Rotation angle per (row, plane) for the configured axis partition.
inline std::vector<double> rope_angles(const std::vector<Position4>& positions,
                                       std::size_t head_dim, std::size_t grid_w,
                                       const RopeConfig& cfg) {
    if (head_dim % 2 != 0) throw TensorError("rope: head_dim must be even");
    std::size_t n_pairs = head_dim / 2;
    std::size_t n_groups;
    if (cfg.axis_partition == RopePartition::paired) {
        // A single rotation plane degenerates to the flattened source index.
        n_groups = n_pairs >= 2 ? 2 : 1;
    } else {
        if (head_dim % 8 != 0)
            throw TensorError("rope: per-axis partition needs head_dim divisible by 8");
        n_groups = 4;
    }
    std::size_t per_group = n_pairs / n_groups;
    if (per_group == 0 || n_pairs % n_groups != 0)
        throw TensorError("rope: axis partition inconsistent with head_dim");
    // theta for pair p' within a group of d_a = 2*per_group dims:
    // base^(-2p'/d_a), the standard multi-frequency scheme.
    std::vector<double> theta(n_pairs);
    std::vector<int> group_of(n_pairs);
    for (std::size_t p = 0; p < n_pairs; ++p) {
        std::size_t g = p / per_group, pp = p % per_group;
        group_of[p] = (int)g;
        theta[p] = std::pow(cfg.base_frequency, -((double)(2 * pp) / (double)(2 * per_group)));
    }
    std::vector<double> angles(positions.size() * n_pairs);
    for (std::size_t t = 0; t < positions.size(); ++t) {
        const Position4& q = positions[t];
        double coord[4];
        if (n_groups <= 2) {
            coord[0] = q[0] * (double)grid_w + q[1];  // flattened source index
            coord[1] = q[2] * (double)grid_w + q[3];  // flattened target index
        } else {
            coord[0] = q[0];
            coord[1] = q[1];
            coord[2] = q[2];
            coord[3] = q[3];
        }
        for (std::size_t p = 0; p < n_pairs; ++p)
            angles[t * n_pairs + p] = theta[p] * coord[group_of[p]];
    }
    return angles;
}

}  // namespace detail

// Rotates each row of m by block-diagonal 2D rotations whose angles encode
// the 4D grid position. Row norms are preserved exactly.
inline Tensor rope_rotate(const Tensor& m, const std::vector<Position4>& positions,
                          const RopeConfig& cfg, std::size_t grid_w) {
    if (m.rank() != 2) throw TensorError("rope_rotate expects (T, D_h)");
    std::size_t T = m.dim(0), Dh = m.dim(1);
    if (positions.size() != T) throw TensorError("rope_rotate: positions length mismatch");
    auto angles = detail::rope_angles(positions, Dh, grid_w, cfg);
    std::size_t n_pairs = Dh / 2;
    std::vector<double> cs(T * n_pairs), sn(T * n_pairs);
    for (std::size_t i = 0; i < cs.size(); ++i) {
        cs[i] = std::cos(angles[i]);
        sn[i] = std::sin(angles[i]);
    }
    Tensor out = Tensor::zeros({T, Dh});
    const auto& x = m.data();
    auto& y = out.data();
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t p = 0; p < n_pairs; ++p) {
            double c = cs[t * n_pairs + p], s = sn[t * n_pairs + p];
            double x0 = x[t * Dh + 2 * p], x1 = x[t * Dh + 2 * p + 1];
            y[t * Dh + 2 * p] = c * x0 - s * x1;
            y[t * Dh + 2 * p + 1] = s * x0 + c * x1;
        }
    if (detail::should_record({&m})) {
        Tape::active()->record(out, [m, out, cs, sn, T, Dh, n_pairs]() {
            const auto& g = out.grad();
            auto& gm = m.ensure_grad();
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t p = 0; p < n_pairs; ++p) {
                    double c = cs[t * n_pairs + p], s = sn[t * n_pairs + p];
                    double g0 = g[t * Dh + 2 * p], g1 = g[t * Dh + 2 * p + 1];
                    gm[t * Dh + 2 * p] += c * g0 + s * g1;
                    gm[t * Dh + 2 * p + 1] += -s * g0 + c * g1;
                }
        });
    }
    return out;
}

// --- parameters -------------------------------------------------------------

struct HeadParams {
    Tensor w_query, w_key, w_value;  // (D_in, D_h)
    Tensor g_query, g_key;           // (D_h), the w_q / w_k global projections
};

struct BlockParams {
    std::vector<HeadParams> heads;
    Tensor w_out;  // (N_h*D_h, D_in)
    Tensor b_out;  // (D_in)
    Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // (D_in)
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ModelParams {
    Tensor w_in;     // (L, D_in)
    Tensor abs_pos;  // (T, D_in) learned table, only for absolute_learned mode
    std::vector<BlockParams> blocks;
    Tensor w_proj;   // (D_in, 1) final single-channel projection
    Tensor b_proj;   // (1)
};

inline ModelParams init_model(const StackConfig& cfg, std::size_t layers, Rng& rng,
                              const RopeConfig& rope = {}, std::size_t seq_len = 0) {
    cfg.validate();
    auto proj = [&](std::size_t fan_in, std::size_t fan_out) {
        return rng.normal_tensor({fan_in, fan_out}, 1.0 / std::sqrt((double)fan_in), true);
    };
    ModelParams p;
    p.w_in = proj(layers, cfg.d_in);
    if (rope.mode == RopeMode::absolute_learned) {
        if (seq_len == 0)
            throw TensorError("init_model: absolute positional mode needs the sequence length");
        p.abs_pos = rng.normal_tensor({seq_len, cfg.d_in}, 0.02, true);
    }
    for (std::size_t b = 0; b < cfg.depth; ++b) {
        BlockParams blk;
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            HeadParams hp;
            hp.w_query = proj(cfg.d_in, cfg.head_dim);
            hp.w_key = proj(cfg.d_in, cfg.head_dim);
            hp.w_value = proj(cfg.d_in, cfg.head_dim);
            hp.g_query = rng.normal_tensor({cfg.head_dim}, 1.0, true);
            hp.g_key = rng.normal_tensor({cfg.head_dim}, 1.0, true);
            blk.heads.push_back(std::move(hp));
        }
        blk.w_out = proj(cfg.n_heads * cfg.head_dim, cfg.d_in);
        blk.b_out = Tensor::zeros({cfg.d_in}, true);
        blk.ln1_gamma = Tensor::full({cfg.d_in}, 1.0, true);
        blk.ln1_beta = Tensor::zeros({cfg.d_in}, true);
        blk.ln2_gamma = Tensor::full({cfg.d_in}, 1.0, true);
        blk.ln2_beta = Tensor::zeros({cfg.d_in}, true);
        blk.mlp_w1 = proj(cfg.d_in, cfg.mlp_hidden);
        blk.mlp_b1 = Tensor::zeros({cfg.mlp_hidden}, true);
        blk.mlp_w2 = proj(cfg.mlp_hidden, cfg.d_in);
        blk.mlp_b2 = Tensor::zeros({cfg.d_in}, true);
        p.blocks.push_back(std::move(blk));
    }
    // Uniform channel averaging keeps the untrained stack's output close to
    // the mean input correlation.
    p.w_proj = Tensor::full({cfg.d_in, 1}, 1.0 / (double)cfg.d_in, true);
    p.b_proj = Tensor::zeros({1}, true);
    return p;
}

template <typename Fn>
inline void visit_params(ModelParams& p, Fn&& fn) {
    fn("w_in", p.w_in);
    if (p.abs_pos.size() > 0) fn("abs_pos", p.abs_pos);
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        auto& blk = p.blocks[b];
        std::string bp = "block" + std::to_string(b) + ".";
        for (std::size_t h = 0; h < blk.heads.size(); ++h) {
            std::string hp = bp + "head" + std::to_string(h) + ".";
            fn(hp + "w_query", blk.heads[h].w_query);
            fn(hp + "w_key", blk.heads[h].w_key);
            fn(hp + "w_value", blk.heads[h].w_value);
            fn(hp + "g_query", blk.heads[h].g_query);
            fn(hp + "g_key", blk.heads[h].g_key);
        }
        fn(bp + "w_out", blk.w_out);
        fn(bp + "b_out", blk.b_out);
        fn(bp + "ln1_gamma", blk.ln1_gamma);
        fn(bp + "ln1_beta", blk.ln1_beta);
        fn(bp + "ln2_gamma", blk.ln2_gamma);
        fn(bp + "ln2_beta", blk.ln2_beta);
        fn(bp + "mlp_w1", blk.mlp_w1);
        fn(bp + "mlp_b1", blk.mlp_b1);
        fn(bp + "mlp_w2", blk.mlp_w2);
        fn(bp + "mlp_b2", blk.mlp_b2);
    }
    fn("w_proj", p.w_proj);
    fn("b_proj", p.b_proj);
}

// --- operations -------------------------------------------------------------

// Bijective reshape (L,H,W,H,W) -> (T, L), T = H*W*H*W, using the
// documented flattening order.
inline MatchEmbedding flatten_correlation(const MultiChannelCorrelation& c) {
    const Shape& s = c.values.shape();
    if (s.size() != 5) throw TensorError("flatten_correlation expects (L,H,W,H,W)");
    std::size_t L = s[0], H = s[1], W = s[2];
    if (s[3] != H || s[4] != W)
        throw TensorError("flatten_correlation: source/target grids must match");
    std::size_t T = H * W * H * W;
    MatchEmbedding me;
    me.values = transpose(reshape(c.values, {L, T}));
    me.grid_size = {H, W};
    return me;
}

inline MatchEmbedding embed_channels(const MatchEmbedding& x, const Tensor& w_in) {
    if (w_in.rank() != 2 || x.values.dim(1) != w_in.dim(0))
        throw TensorError("embed_channels: weight shape " + shape_str(w_in.shape()) +
                          " does not match input " + shape_str(x.values.shape()));
    MatchEmbedding out;
    out.values = matmul(x.values, w_in);
    out.grid_size = x.grid_size;
    return out;
}

// Additive attention head (linear time and memory in T):
//   g   = sum_j Q_j * softmax(tau * w_q Q^T)_j
//   H_i = K_i ⊙ g
//   h   = sum_j H_j * softmax(tau * w_k H^T)_j
//   out_i = V_i ⊙ h
inline Tensor additive_attention_head(const MatchEmbedding& x, const HeadParams& hp,
                                      double tau, const RopeConfig& rope,
                                      const std::vector<Position4>* positions = nullptr) {
    std::size_t Dh = hp.w_query.dim(1);
    Tensor q = matmul(x.values, hp.w_query);
    Tensor k = matmul(x.values, hp.w_key);
    Tensor v = matmul(x.values, hp.w_value);
    if (rope.mode == RopeMode::rotary) {
        std::vector<Position4> local;
        if (!positions) {
            local = grid_positions(x.grid_size.first, x.grid_size.second);
            positions = &local;
        }
        q = rope_rotate(q, *positions, rope, x.grid_size.second);
        k = rope_rotate(k, *positions, rope, x.grid_size.second);
    }
    Tensor alpha = softmax(scale(matmul(q, reshape(hp.g_query, {Dh, 1})), tau), 0);  // (T,1)
    Tensor g = matmul(transpose(alpha), q);                                          // (1,Dh)
    Tensor hmat = mul(k, g);
    Tensor beta = softmax(scale(matmul(hmat, reshape(hp.g_key, {Dh, 1})), tau), 0);
    Tensor h = matmul(transpose(beta), hmat);
    return mul(v, h);
}

// Quadratic-memory baseline, sigma(tau*QK^T)V; benchmarking and analysis only.
inline Tensor vanilla_attention_head(const MatchEmbedding& x, const HeadParams& hp,
                                     double tau, std::size_t t_ceiling = 4096) {
    std::size_t T = x.values.dim(0);
    if (T > t_ceiling)
        throw TensorError("vanilla_attention_head: T=" + std::to_string(T) +
                          " exceeds the configured ceiling " + std::to_string(t_ceiling));
    Tensor q = matmul(x.values, hp.w_query);
    Tensor k = matmul(x.values, hp.w_key);
    Tensor v = matmul(x.values, hp.w_value);
    Tensor att = softmax(scale(matmul(q, transpose(k)), tau), 1);
    return matmul(att, v);
}

inline Tensor mhsa_tm(const MatchEmbedding& x, const BlockParams& blk, double tau,
                      const RopeConfig& rope,
                      const std::vector<Position4>* positions = nullptr) {
    std::vector<Tensor> outs;
    outs.reserve(blk.heads.size());
    for (const auto& hp : blk.heads)
        outs.push_back(additive_attention_head(x, hp, tau, rope, positions));
    Tensor cat = concat(outs, 1);
    return add(matmul(cat, blk.w_out), blk.b_out);
}

// Pre-LN residual block: y = x + MHSA(LN(x)); z = y + MLP(LN(y)).
inline MatchEmbedding attention_block(const MatchEmbedding& x, const BlockParams& blk,
                                      double tau, const RopeConfig& rope,
                                      const std::vector<Position4>* positions = nullptr) {
    MatchEmbedding ln1{layer_norm(x.values, blk.ln1_gamma, blk.ln1_beta), x.grid_size};
    Tensor y = add(x.values, mhsa_tm(ln1, blk, tau, rope, positions));
    Tensor ln2 = layer_norm(y, blk.ln2_gamma, blk.ln2_beta);
    Tensor hidden = gelu(add(matmul(ln2, blk.mlp_w1), blk.mlp_b1));
    Tensor mlp_out = add(matmul(hidden, blk.mlp_w2), blk.mlp_b2);
    return MatchEmbedding{add(y, mlp_out), x.grid_size};
}

// Full refinement: flatten -> embed -> N blocks -> single-channel
// projection -> reshape -> 4D bilinear upsample x2.
inline Correlation4D refine(const MultiChannelCorrelation& c, const ModelParams& params,
                            const StackConfig& cfg, const RopeConfig& rope) {
    cfg.validate();
    MatchEmbedding seq = flatten_correlation(c);
    std::size_t H = seq.grid_size.first, W = seq.grid_size.second;
    MatchEmbedding x = embed_channels(seq, params.w_in);
    if (rope.mode == RopeMode::absolute_learned) {
        if (params.abs_pos.size() == 0)
            throw TensorError("refine: absolute positional table missing from parameters");
        x.values = add(x.values, params.abs_pos);
    }
    auto positions = grid_positions(H, W);
    for (const auto& blk : params.blocks)
        x = attention_block(x, blk, cfg.tau_attn, rope, &positions);
    Tensor projected = add(matmul(x.values, params.w_proj), params.b_proj);  // (T,1)
    Tensor map4 = reshape(projected, {H, W, H, W});
    Correlation4D out;
    out.values = bilinear_resize(map4, {0, 1, 2, 3}, {2 * H, 2 * W, 2 * H, 2 * W});
    out.grid_size = {2 * H, 2 * W};
    return out;
}

// --- checkpoints ------------------------------------------------------------

inline nlohmann::json stack_config_json(const StackConfig& c) {
    return {{"depth", c.depth},           {"n_heads", c.n_heads},
            {"head_dim", c.head_dim},     {"d_in", c.d_in},
            {"mlp_hidden", c.mlp_hidden}, {"tau_attn", c.tau_attn}};
}

inline StackConfig stack_config_from_json(const nlohmann::json& j) {
    StackConfig c;
    c.depth = j.at("depth").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.head_dim = j.at("head_dim").get<std::size_t>();
    c.d_in = j.at("d_in").get<std::size_t>();
    c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
    c.tau_attn = j.at("tau_attn").get<double>();
    c.validate();
    return c;
}

inline nlohmann::json rope_config_json(const RopeConfig& c) {
    const char* mode = c.mode == RopeMode::none ? "none"
                       : c.mode == RopeMode::absolute_learned ? "absolute_learned"
                                                              : "rotary";
    return {{"mode", mode},
            {"base_frequency", c.base_frequency},
            {"axis_partition", c.axis_partition == RopePartition::paired ? "paired" : "per_axis"}};
}

inline RopeConfig rope_config_from_json(const nlohmann::json& j) {
    RopeConfig c;
    std::string mode = j.at("mode").get<std::string>();
    if (mode == "none")
        c.mode = RopeMode::none;
    else if (mode == "absolute_learned")
        c.mode = RopeMode::absolute_learned;
    else if (mode == "rotary")
        c.mode = RopeMode::rotary;
    else
        throw TensorError("unknown rope mode '" + mode + "'");
    c.base_frequency = j.at("base_frequency").get<double>();
    if (c.base_frequency <= 0.0) throw TensorError("rope base_frequency must be positive");
    std::string part = j.at("axis_partition").get<std::string>();
    if (part == "paired")
        c.axis_partition = RopePartition::paired;
    else if (part == "per_axis")
        c.axis_partition = RopePartition::per_axis;
    else
        throw TensorError("unknown rope axis_partition '" + part + "'");
    return c;
}

// Checkpoint directory: manifest.json naming every parameter tensor and its
// file, plus the stack/rope configs; loading validates every shape.
inline void save_checkpoint(const std::filesystem::path& dir, ModelParams& params,
                            const StackConfig& cfg, const RopeConfig& rope,
                            std::size_t layers) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["layers"] = layers;
    manifest["stack_config"] = stack_config_json(cfg);
    manifest["rope_config"] = rope_config_json(rope);
    nlohmann::json plist = nlohmann::json::array();
    visit_params(params, [&](const std::string& name, Tensor& t) {
        std::string file = name + ".tfmf";
        io::save_tensor_file(dir / file, t);
        plist.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
    });
    manifest["params"] = plist;
    io::write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

struct Checkpoint {
    ModelParams params;
    StackConfig stack;
    RopeConfig rope;
    std::size_t layers = 0;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    nlohmann::json manifest = nlohmann::json::parse(io::read_text_file(dir / "manifest.json"));
    Checkpoint ck;
    ck.stack = stack_config_from_json(manifest.at("stack_config"));
    ck.rope = rope_config_from_json(manifest.at("rope_config"));
    ck.layers = manifest.at("layers").get<std::size_t>();
    std::map<std::string, nlohmann::json> entries;
    for (const auto& e : manifest.at("params")) entries[e.at("name").get<std::string>()] = e;
    Rng dummy(0);
    std::size_t seq_len = 0;
    if (ck.rope.mode == RopeMode::absolute_learned)
        seq_len = entries.at("abs_pos").at("shape")[0].get<std::size_t>();
    ck.params = init_model(ck.stack, ck.layers, dummy, ck.rope, seq_len);
    visit_params(ck.params, [&](const std::string& name, Tensor& t) {
        auto it = entries.find(name);
        if (it == entries.end())
            throw io::IoError("checkpoint missing parameter '" + name + "'");
        Tensor loaded = io::load_tensor_file(dir / it->second.at("file").get<std::string>());
        if (loaded.shape() != t.shape())
            throw io::IoError("checkpoint parameter '" + name + "' has shape " +
                              shape_str(loaded.shape()) + ", expected " + shape_str(t.shape()));
        t.data() = loaded.data();
        entries.erase(it);
    });
    if (!entries.empty())
        throw io::IoError("checkpoint has unexpected parameter '" + entries.begin()->first + "'");
    return ck;
}

}  // namespace tfm
