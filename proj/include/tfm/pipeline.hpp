#pragma once

// End-to-end wiring: run configuration, the matching forward pass, toy
// training with Adam, evaluation, attention benchmarking and nonlocality
// analysis. The CLI is a thin shell over this header.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tfm/analysis.hpp"
#include "tfm/correlation.hpp"
#include "tfm/datasets.hpp"
#include "tfm/evaluation.hpp"
#include "tfm/flow.hpp"
#include "tfm/io.hpp"
#include "tfm/m2m.hpp"
#include "tfm/optim.hpp"
#include "tfm/tensor.hpp"

namespace tfm {

struct FlowParams {
    double sigma = 5.0;
    double temperature = 0.02;
    double tau_dist = 1.5;
    LossNorm loss_norm = LossNorm::squared;
};

struct OptimConfig {
    double lr = 1e-3;
    double encoder_lr = 1e-5;
    std::size_t steps = 200;
    std::size_t batch = 4;
    std::uint64_t seed = 0;
};

struct RunConfig {
    StackConfig stack;
    RopeConfig rope;
    std::pair<std::size_t, std::size_t> grid{8, 8};  // correlation grid (H, W)
    FlowParams flow;
    OptimConfig optim;
    FeatureProviderConfig provider;
    double translation_jitter = 2.0;  // per-pair warp jitter for synthetic training
    std::string out_dir = "out";

    void validate() const {
        stack.validate();
        if (grid.first == 0 || grid.second == 0)
            throw TensorError("RunConfig: grid sizes must be positive");
        if (flow.sigma <= 0 || flow.temperature <= 0 || flow.tau_dist <= 0)
            throw TensorError("RunConfig: flow parameters must be positive");
        if (optim.lr <= 0 || optim.encoder_lr <= 0)
            throw TensorError("RunConfig: learning rates must be positive");
        if (optim.batch == 0) throw TensorError("RunConfig: batch must be positive");
    }
};

// Full-size preset: 8 heads, head dimension 4, lr 1e-3, encoder lr 1e-5,
// 15x15 correlation grid. The desk preset trades grid size for fast
// gradient checks.
inline RunConfig preset_config(const std::string& name) {
    RunConfig c;
    c.stack = StackConfig{};  // N_h=8, D_h=4, d_in=32
    c.rope = RopeConfig{};
    if (name == "paper") {
        c.grid = {15, 15};
        c.provider.grid = {15, 15};
    } else if (name == "desk") {
        c.grid = {8, 8};
        c.provider.grid = {8, 8};
    } else {
        throw TensorError("unknown preset '" + name + "' (expected desk or paper)");
    }
    c.optim.lr = 1e-3;
    c.optim.encoder_lr = 1e-5;
    c.provider.warp = WarpSpec::translation(2.0, 1.0, 0.05);
    return c;
}

inline nlohmann::json run_config_json(const RunConfig& c) {
    nlohmann::json j;
    j["stack"] = stack_config_json(c.stack);
    j["rope"] = rope_config_json(c.rope);
    j["grid"] = {c.grid.first, c.grid.second};
    j["flow"] = {{"sigma", c.flow.sigma},
                 {"temperature", c.flow.temperature},
                 {"tau_dist", c.flow.tau_dist},
                 {"loss_norm", c.flow.loss_norm == LossNorm::squared ? "squared" : "euclidean"}};
    j["optim"] = {{"lr", c.optim.lr},
                  {"encoder_lr", c.optim.encoder_lr},
                  {"steps", c.optim.steps},
                  {"batch", c.optim.batch},
                  {"seed", c.optim.seed}};
    const char* kind = c.provider.kind == FeatureProviderConfig::Kind::file ? "file"
                       : c.provider.kind == FeatureProviderConfig::Kind::encoder ? "encoder"
                                                                                 : "synthetic";
    nlohmann::json prov;
    prov["kind"] = kind;
    prov["seed"] = c.provider.seed;
    prov["grid"] = {c.provider.grid.first, c.provider.grid.second};
    prov["depth"] = c.provider.depth;
    prov["layers"] = c.provider.layers;
    prov["n_keypoints"] = c.provider.n_keypoints;
    prov["warp"] = {{"kind", "translation"},
                    {"linear", c.provider.warp.linear},
                    {"offset", c.provider.warp.offset},
                    {"sigma_feat", c.provider.warp.sigma_feat}};
    if (!c.provider.encoder.widths.empty()) prov["encoder_widths"] = c.provider.encoder.widths;
    j["provider"] = prov;
    j["translation_jitter"] = c.translation_jitter;
    j["out_dir"] = c.out_dir;
    return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    if (j.contains("stack")) c.stack = stack_config_from_json(j.at("stack"));
    if (j.contains("rope")) c.rope = rope_config_from_json(j.at("rope"));
    if (j.contains("grid"))
        c.grid = {j.at("grid").at(0).get<std::size_t>(), j.at("grid").at(1).get<std::size_t>()};
    if (j.contains("flow")) {
        const auto& f = j.at("flow");
        if (f.contains("sigma")) c.flow.sigma = f.at("sigma").get<double>();
        if (f.contains("temperature")) c.flow.temperature = f.at("temperature").get<double>();
        if (f.contains("tau_dist")) c.flow.tau_dist = f.at("tau_dist").get<double>();
        if (f.contains("loss_norm")) {
            std::string n = f.at("loss_norm").get<std::string>();
            if (n == "squared")
                c.flow.loss_norm = LossNorm::squared;
            else if (n == "euclidean")
                c.flow.loss_norm = LossNorm::euclidean;
            else
                throw TensorError("unknown loss_norm '" + n + "'");
        }
    }
    if (j.contains("optim")) {
        const auto& o = j.at("optim");
        if (o.contains("lr")) c.optim.lr = o.at("lr").get<double>();
        if (o.contains("encoder_lr")) c.optim.encoder_lr = o.at("encoder_lr").get<double>();
        if (o.contains("steps")) c.optim.steps = o.at("steps").get<std::size_t>();
        if (o.contains("batch")) c.optim.batch = o.at("batch").get<std::size_t>();
        if (o.contains("seed")) c.optim.seed = o.at("seed").get<std::uint64_t>();
    }
    if (j.contains("provider")) {
        const auto& p = j.at("provider");
        if (p.contains("kind")) {
            std::string k = p.at("kind").get<std::string>();
            if (k == "file")
                c.provider.kind = FeatureProviderConfig::Kind::file;
            else if (k == "synthetic")
                c.provider.kind = FeatureProviderConfig::Kind::synthetic;
            else if (k == "encoder")
                c.provider.kind = FeatureProviderConfig::Kind::encoder;
            else
                throw TensorError("unknown provider kind '" + k + "'");
        }
        if (p.contains("seed")) c.provider.seed = p.at("seed").get<std::uint64_t>();
        if (p.contains("grid"))
            c.provider.grid = {p.at("grid").at(0).get<std::size_t>(),
                               p.at("grid").at(1).get<std::size_t>()};
        if (p.contains("depth")) c.provider.depth = p.at("depth").get<std::size_t>();
        if (p.contains("layers")) c.provider.layers = p.at("layers").get<std::size_t>();
        if (p.contains("n_keypoints"))
            c.provider.n_keypoints = p.at("n_keypoints").get<std::size_t>();
        if (p.contains("warp")) {
            const auto& w = p.at("warp");
            c.provider.warp.kind = WarpKind::affine;
            if (w.contains("linear"))
                for (int i = 0; i < 4; ++i)
                    c.provider.warp.linear[i] = w.at("linear").at(i).get<double>();
            if (w.contains("offset"))
                for (int i = 0; i < 2; ++i)
                    c.provider.warp.offset[i] = w.at("offset").at(i).get<double>();
            if (w.contains("sigma_feat"))
                c.provider.warp.sigma_feat = w.at("sigma_feat").get<double>();
            c.provider.warp.validate();
        }
        if (p.contains("encoder_widths"))
            c.provider.encoder.widths = p.at("encoder_widths").get<std::vector<std::size_t>>();
    }
    if (j.contains("translation_jitter"))
        c.translation_jitter = j.at("translation_jitter").get<double>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    c.validate();
    return c;
}

// --- model state ------------------------------------------------------------

struct ModelState {
    ModelParams model;
    std::optional<EncoderParams> encoder;
};

inline ModelState init_state(const RunConfig& cfg, Rng& rng) {
    ModelState st;
    std::size_t T = cfg.grid.first * cfg.grid.second * cfg.grid.first * cfg.grid.second;
    st.model = init_model(cfg.stack, cfg.provider.layers, rng, cfg.rope, T);
    if (cfg.provider.kind == FeatureProviderConfig::Kind::encoder)
        st.encoder = init_encoder(cfg.provider.depth, cfg.provider.encoder, rng);
    return st;
}

// --- forward pass -----------------------------------------------------------

struct MatchResult {
    Correlation4D refined;
    NormalizedCorrelation normalized;
    FlowField flow;
};

inline MatchResult match_features(const FeatureStack& source, const FeatureStack& target,
                                  const ModelState& st, const RunConfig& cfg) {
    if (source.size() != target.size() || source.empty())
        throw TensorError("match_features: feature stacks must be non-empty and equal length");
    FeatureStack src = source, tgt = target;
    if (st.encoder) {
        src = encoder_forward_stack(src, *st.encoder);
        tgt = encoder_forward_stack(tgt, *st.encoder);
    }
    std::vector<Correlation4D> corrs;
    corrs.reserve(src.size());
    for (std::size_t l = 0; l < src.size(); ++l)
        corrs.push_back(cosine_correlation(src[l], tgt[l]));
    MultiChannelCorrelation mc = assemble_multichannel(corrs, cfg.grid);
    MatchResult res;
    res.refined = refine(mc, st.model, cfg.stack, cfg.rope);
    res.normalized = kernel_softargmax(res.refined, cfg.flow.sigma, cfg.flow.temperature);
    res.flow = flow_from_correlation(res.normalized);
    return res;
}

// Transfers annotated source keypoints through the flow and reports
// predictions in target-image pixel coordinates.
inline std::vector<Point> predict_keypoints(const MatchResult& res, const KeypointPairSet& pair,
                                            const RunConfig& cfg) {
    std::size_t Hb = res.flow.predicted.dim(0), Wb = res.flow.predicted.dim(1);
    std::vector<Point> grid_kps;
    for (const auto& k : pair.src_kps)
        grid_kps.push_back(pixel_to_grid(k, pair.src_img_size, {Hb, Wb}));
    KeypointTransfer tr = transfer_keypoints(res.flow, grid_kps, cfg.flow.tau_dist);
    std::vector<Point> out;
    for (const auto& p : tr.predicted)
        out.push_back(grid_to_pixel({p.at(0), p.at(1)}, pair.tgt_img_size, {Hb, Wb}));
    return out;
}

// --- synthetic pair stream --------------------------------------------------

inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t x = base ^ (0x9e3779b97f4a7c15ULL * (index + 1));
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdULL;
    x ^= x >> 33;
    return x;
}

// The (possibly jittered) warp used for pair `index` of the stream.
inline WarpSpec provider_warp(const FeatureProviderConfig& prov, double jitter,
                              std::uint64_t index) {
    std::uint64_t seed = mix_seed(prov.seed, index);
    WarpSpec warp = prov.warp;
    if (warp.kind == WarpKind::translation && jitter > 0.0) {
        Rng jrng(mix_seed(seed, 0xbeef));
        warp.offset[0] += jrng.uniform(-jitter, jitter);
        warp.offset[1] += jrng.uniform(-jitter, jitter);
    }
    return warp;
}

// Pair `index` of the deterministic synthetic stream; translation warps
// get a per-pair jitter so training sees a distribution of offsets.
inline SyntheticPair provider_pair(const FeatureProviderConfig& prov, double jitter,
                                   std::uint64_t index) {
    std::uint64_t seed = mix_seed(prov.seed, index);
    WarpSpec warp = provider_warp(prov, jitter, index);
    return synth_pair(seed, prov.grid, prov.depth, prov.layers, warp, prov.n_keypoints);
}

// --- training ---------------------------------------------------------------

struct RunRecord {
    std::vector<double> loss_curve;
    double final_loss = 0.0;
    double wall_seconds = 0.0;
    std::string checkpoint_path;
};

inline Tensor pair_loss(const SyntheticPair& sp, const ModelState& st, const RunConfig& cfg) {
    MatchResult res = match_features(sp.source, sp.target, st, cfg);
    std::size_t Hb = res.flow.predicted.dim(0), Wb = res.flow.predicted.dim(1);
    std::vector<Point> src_grid, tgt_grid;
    for (const auto& k : sp.keypoints.src_kps)
        src_grid.push_back(pixel_to_grid(k, sp.keypoints.src_img_size, {Hb, Wb}));
    for (const auto& k : sp.keypoints.tgt_kps)
        tgt_grid.push_back(pixel_to_grid(k, sp.keypoints.tgt_img_size, {Hb, Wb}));
    KeypointTransfer tr = transfer_keypoints(res.flow, src_grid, cfg.flow.tau_dist);
    return matching_loss(tr.predicted, tgt_grid, cfg.flow.loss_norm);
}

inline RunRecord train(const RunConfig& cfg, ModelState& st,
                       const std::filesystem::path& out_dir) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();
    Adam opt(cfg.optim.lr);
    visit_params(st.model, [&](const std::string& name, Tensor& t) { opt.add_param(name, t); });
    if (st.encoder)
        visit_encoder_params(*st.encoder, [&](const std::string& name, Tensor& t) {
            opt.add_param(name, t, cfg.optim.encoder_lr / cfg.optim.lr);
        });
    RunRecord rec;
    for (std::size_t step = 0; step < cfg.optim.steps; ++step) {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor total = Tensor::scalar(0.0);
        for (std::size_t b = 0; b < cfg.optim.batch; ++b) {
            SyntheticPair sp =
                provider_pair(cfg.provider, cfg.translation_jitter, step * cfg.optim.batch + b);
            total = add(total, pair_loss(sp, st, cfg));
        }
        Tensor loss = scale(total, 1.0 / (double)cfg.optim.batch);
        double lv = loss.item();
        if (!std::isfinite(lv))
            throw TensorError("train: non-finite loss at step " + std::to_string(step));
        rec.loss_curve.push_back(lv);
        opt.zero_grad();
        tape.backward(loss);
        opt.step();
    }
    rec.final_loss = rec.loss_curve.empty() ? 0.0 : rec.loss_curve.back();

    std::filesystem::create_directories(out_dir);
    std::filesystem::path ckpt = out_dir / "checkpoint";
    save_checkpoint(ckpt, st.model, cfg.stack, cfg.rope, cfg.provider.layers);
    if (st.encoder) {
        std::filesystem::create_directories(ckpt / "encoder");
        nlohmann::json em;
        em["input_depth"] = cfg.provider.depth;
        em["widths"] = cfg.provider.encoder.widths;
        visit_encoder_params(*st.encoder, [&](const std::string& name, Tensor& t) {
            io::save_tensor_file(ckpt / "encoder" / (name + ".tfmf"), t);
        });
        io::write_text_file(ckpt / "encoder" / "manifest.json", em.dump(2) + "\n");
    }
    rec.checkpoint_path = ckpt.string();
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    nlohmann::json rj;
    rj["format_version"] = 1;
    rj["config"] = run_config_json(cfg);
    rj["loss_curve"] = rec.loss_curve;
    rj["final_loss"] = rec.final_loss;
    rj["wall_seconds"] = rec.wall_seconds;
    rj["checkpoint"] = rec.checkpoint_path;
    io::write_text_file(out_dir / "run_record.json", rj.dump(2) + "\n");
    return rec;
}

inline ModelState load_state(const std::filesystem::path& ckpt_dir, const RunConfig& cfg) {
    Checkpoint ck = load_checkpoint(ckpt_dir);
    ModelState st;
    st.model = std::move(ck.params);
    if (std::filesystem::exists(ckpt_dir / "encoder" / "manifest.json")) {
        nlohmann::json em =
            nlohmann::json::parse(io::read_text_file(ckpt_dir / "encoder" / "manifest.json"));
        EncoderConfig ec;
        ec.widths = em.at("widths").get<std::vector<std::size_t>>();
        Rng dummy(0);
        EncoderParams ep = init_encoder(em.at("input_depth").get<std::size_t>(), ec, dummy);
        visit_encoder_params(ep, [&](const std::string& name, Tensor& t) {
            Tensor loaded = io::load_tensor_file(ckpt_dir / "encoder" / (name + ".tfmf"));
            if (loaded.shape() != t.shape())
                throw io::IoError("encoder parameter '" + name + "' shape mismatch");
            t.data() = loaded.data();
        });
        st.encoder = std::move(ep);
    }
    (void)cfg;
    return st;
}

// Held-out PCK of a model state over `n_pairs` fresh synthetic pairs.
inline double held_out_pck(const ModelState& st, const RunConfig& cfg, std::size_t n_pairs,
                           std::uint64_t eval_seed_base, double alpha,
                           ThresholdMode mode = ThresholdMode::img) {
    NoGrad ng;
    std::size_t correct = 0, total = 0;
    for (std::size_t i = 0; i < n_pairs; ++i) {
        FeatureProviderConfig prov = cfg.provider;
        prov.seed = eval_seed_base;
        SyntheticPair sp = provider_pair(prov, cfg.translation_jitter, 1000000 + i);
        MatchResult res = match_features(sp.source, sp.target, st, cfg);
        std::vector<Point> pred = predict_keypoints(res, sp.keypoints, cfg);
        auto ref = resolve_reference_size(mode, sp.keypoints.tgt_img_size,
                                          BBox{sp.keypoints.tgt_bbox[0], sp.keypoints.tgt_bbox[1],
                                               sp.keypoints.tgt_bbox[2], sp.keypoints.tgt_bbox[3]},
                                          sp.keypoints.tgt_kps);
        double thr = alpha * std::max(ref.first, ref.second);
        for (std::size_t m = 0; m < pred.size(); ++m) {
            double dx = pred[m].first - sp.keypoints.tgt_kps[m].first;
            double dy = pred[m].second - sp.keypoints.tgt_kps[m].second;
            if (std::sqrt(dx * dx + dy * dy) <= thr) ++correct;
            ++total;
        }
    }
    return (double)correct / (double)total;
}

// --- attention scaling benchmark --------------------------------------------

struct BenchRow {
    std::string kind;
    std::size_t T = 0;
    double median_seconds = 0.0;
};

struct BenchResult {
    std::vector<BenchRow> rows;
    double additive_slope = 0.0;
    double vanilla_slope = 0.0;
};

namespace detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

inline double loglog_slope(const std::vector<std::pair<double, double>>& pts) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& [x, y] : pts) {
        double lx = std::log(x), ly = std::log(y);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    double n = (double)pts.size();
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace detail

inline BenchResult bench_attention(const std::vector<std::size_t>& t_values, std::size_t head_dim,
                                   std::size_t trials, std::size_t vanilla_ceiling = 4096) {
    for (std::size_t i = 1; i < t_values.size(); ++i)
        if (t_values[i] <= t_values[i - 1])
            throw TensorError("bench_attention: T values must be ascending");
    NoGrad ng;
    std::size_t d_in = 32;
    Rng rng(7);
    HeadParams hp;
    hp.w_query = rng.normal_tensor({d_in, head_dim}, 0.3);
    hp.w_key = rng.normal_tensor({d_in, head_dim}, 0.3);
    hp.w_value = rng.normal_tensor({d_in, head_dim}, 0.3);
    hp.g_query = rng.normal_tensor({head_dim});
    hp.g_key = rng.normal_tensor({head_dim});
    double tau = 1.0 / std::sqrt((double)head_dim);
    RopeConfig no_rope;
    no_rope.mode = RopeMode::none;

    BenchResult out;
    std::vector<std::pair<double, double>> add_pts, van_pts;
    for (std::size_t T : t_values) {
        MatchEmbedding x{rng.normal_tensor({T, d_in}), {1, 1}};
        auto time_kind = [&](auto&& fn) {
            // aggregate repetitions so each sample is long enough to trust
            auto once = [&]() {
                auto s = std::chrono::steady_clock::now();
                fn();
                return std::chrono::duration<double>(std::chrono::steady_clock::now() - s)
                    .count();
            };
            double est = once();
            std::size_t reps = est > 0 ? std::max<std::size_t>(1, (std::size_t)(2e-3 / est)) : 64;
            std::vector<double> samples;
            for (std::size_t t = 0; t < trials; ++t) {
                auto s = std::chrono::steady_clock::now();
                for (std::size_t r = 0; r < reps; ++r) fn();
                samples.push_back(
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - s).count() /
                    (double)reps);
            }
            return detail::median(samples);
        };
        double ta = time_kind([&] { additive_attention_head(x, hp, tau, no_rope); });
        out.rows.push_back({"additive", T, ta});
        add_pts.push_back({(double)T, ta});
        if (T <= vanilla_ceiling) {
            double tv = time_kind([&] { vanilla_attention_head(x, hp, tau, vanilla_ceiling); });
            out.rows.push_back({"vanilla", T, tv});
            van_pts.push_back({(double)T, tv});
        }
    }
    out.additive_slope = detail::loglog_slope(add_pts);
    if (van_pts.size() >= 2) out.vanilla_slope = detail::loglog_slope(van_pts);
    return out;
}

inline std::string bench_csv(const BenchResult& b) {
    std::ostringstream oss;
    oss << "kind,T,median_seconds\n";
    for (const auto& r : b.rows)
        oss << r.kind << "," << r.T << "," << r.median_seconds << "\n";
    oss << "slope,additive," << b.additive_slope << "\n";
    oss << "slope,vanilla," << b.vanilla_slope << "\n";
    return oss.str();
}

// --- nonlocality driver -----------------------------------------------------

// Per-block Φ of the model on one multi-channel correlation input, using
// pairwise attention reconstruction on each block's normalized input.
inline NonlocalityReport analyze_nonlocality(const MultiChannelCorrelation& mc,
                                             const ModelState& st, const RunConfig& cfg,
                                             std::size_t t_ceiling = 4096) {
    NoGrad ng;
    MatchEmbedding seq = flatten_correlation(mc);
    std::size_t H = seq.grid_size.first, W = seq.grid_size.second;
    std::size_t T = H * W * H * W;
    if (T > t_ceiling)
        throw TensorError("analyze_nonlocality: T=" + std::to_string(T) +
                          " exceeds the pairwise reconstruction ceiling " +
                          std::to_string(t_ceiling));
    MatchEmbedding x = embed_channels(seq, st.model.w_in);
    if (cfg.rope.mode == RopeMode::absolute_learned)
        x.values = add(x.values, st.model.abs_pos);
    auto positions = grid_positions(H, W);
    NonlocalityReport rep;
    rep.n_heads = cfg.stack.n_heads;
    rep.grid = {H, W};
    for (const auto& blk : st.model.blocks) {
        Tensor ln = layer_norm(x.values, blk.ln1_gamma, blk.ln1_beta);
        std::vector<Tensor> heads;
        for (const auto& hp : blk.heads) {
            Tensor q = matmul(ln, hp.w_query);
            Tensor k = matmul(ln, hp.w_key);
            if (cfg.rope.mode == RopeMode::rotary) {
                q = rope_rotate(q, positions, cfg.rope, W);
                k = rope_rotate(k, positions, cfg.rope, W);
            }
            heads.push_back(pairwise_attention(q, k, hp.g_query, cfg.stack.tau_attn, t_ceiling));
        }
        rep.per_layer.push_back(nonlocality_attention(heads, {H, W}));
        x = attention_block(x, blk, cfg.stack.tau_attn, cfg.rope, &positions);
    }
    for (double v : rep.per_layer) rep.total += v;
    return rep;
}

}  // namespace tfm
