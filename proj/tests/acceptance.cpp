// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Each check pins its tolerances and budgets explicitly.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tfm/pipeline.hpp"

using namespace tfm;
namespace fs = std::filesystem;

namespace {

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

struct Failure {
    std::string why;
};

void expect(bool ok, const std::string& why) {
    if (!ok) throw Failure{why};
}

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("tfm_accept_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// ---- criterion 1: additive attention vs the literal-loop oracle ------------

std::vector<double> additive_oracle(const std::vector<double>& x, std::size_t T, std::size_t D,
                                    const HeadParams& hp, double tau) {
    std::size_t Dh = hp.w_query.dim(1);
    auto project = [&](const Tensor& w) {
        std::vector<double> out(T * Dh, 0.0);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t d = 0; d < Dh; ++d)
                for (std::size_t c = 0; c < D; ++c)
                    out[t * Dh + d] += x[t * D + c] * w.data()[c * Dh + d];
        return out;
    };
    auto q = project(hp.w_query), k = project(hp.w_key), v = project(hp.w_value);
    auto pooled = [&](const std::vector<double>& m, const Tensor& g) {
        std::vector<double> logits(T, 0.0);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t d = 0; d < Dh; ++d) logits[t] += tau * m[t * Dh + d] * g.data()[d];
        double mx = logits[0];
        for (double l : logits) mx = std::max(mx, l);
        double z = 0.0;
        std::vector<double> a(T);
        for (std::size_t t = 0; t < T; ++t) {
            a[t] = std::exp(logits[t] - mx);
            z += a[t];
        }
        std::vector<double> out(Dh, 0.0);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t d = 0; d < Dh; ++d) out[d] += (a[t] / z) * m[t * Dh + d];
        return out;
    };
    auto g = pooled(q, hp.g_query);
    std::vector<double> hmat(T * Dh);
    for (std::size_t i = 0; i < T * Dh; ++i) hmat[i] = k[i] * g[i % Dh];
    auto h = pooled(hmat, hp.g_key);
    std::vector<double> out(T * Dh);
    for (std::size_t i = 0; i < T * Dh; ++i) out[i] = v[i] * h[i % Dh];
    return out;
}

void criterion_additive_oracle() {
    double t0 = now_s();
    Rng rng(1001);
    RopeConfig none;
    none.mode = RopeMode::none;
    std::size_t instances = 0;
    double worst = 0.0;
    while (instances < 200) {
        std::size_t T = 1 + rng.uniform_index(64);
        std::size_t Dh = 1 + rng.uniform_index(8);
        std::size_t D = 1 + rng.uniform_index(12);
        double tau = rng.uniform(0.1, 1.5);
        HeadParams hp;
        hp.w_query = rng.normal_tensor({D, Dh}, 0.6);
        hp.w_key = rng.normal_tensor({D, Dh}, 0.6);
        hp.w_value = rng.normal_tensor({D, Dh}, 0.6);
        hp.g_query = rng.normal_tensor({Dh});
        hp.g_key = rng.normal_tensor({Dh});
        MatchEmbedding x{rng.normal_tensor({T, D}), {1, 1}};
        Tensor out = additive_attention_head(x, hp, tau, none);
        auto oracle = additive_oracle(x.values.data(), T, D, hp, tau);
        for (std::size_t i = 0; i < oracle.size(); ++i)
            worst = std::max(worst, std::abs(out.data()[i] - oracle[i]));
        ++instances;
    }
    expect(worst <= 1e-10, "max deviation " + std::to_string(worst) + " exceeds 1e-10");
    expect(now_s() - t0 < 10.0, "exceeded the 10 second budget");
}

// ---- criterion 2: kernel soft-argmax and flow vs loop oracles --------------

void criterion_flow_oracle() {
    Rng rng(1002);
    double worst = 0.0, worst_flow = 0.0, worst_sum = 0.0;
    for (int inst = 0; inst < 100; ++inst) {
        std::size_t H = 4, W = 4, S = 16;
        Correlation4D c{rng.normal_tensor({H, W, H, W}), {H, W}};
        for (auto& v : c.values.data()) v = std::abs(v);
        double sigma = rng.uniform(0.5, 6.0), temp = rng.uniform(0.02, 1.0);
        NormalizedCorrelation n = kernel_softargmax(c, sigma, temp);
        FlowField f = flow_from_correlation(n);
        const auto& cv = c.values.data();
        for (std::size_t src = 0; src < S; ++src) {
            std::size_t best = 0;
            for (std::size_t t = 1; t < S; ++t)
                if (cv[src * S + t] > cv[src * S + best]) best = t;
            double pk = (double)(best / W), pl = (double)(best % W);
            std::vector<double> p(S);
            double z = 0.0;
            for (std::size_t k = 0; k < H; ++k)
                for (std::size_t l = 0; l < W; ++l) {
                    double dk = (double)k - pk, dl = (double)l - pl;
                    double g = std::exp(-(dk * dk + dl * dl) / (2 * sigma * sigma));
                    p[k * W + l] = std::exp(g * cv[src * S + k * W + l] / temp);
                    z += p[k * W + l];
                }
            double sum = 0.0, ex = 0.0, ey = 0.0;
            for (std::size_t t = 0; t < S; ++t) {
                p[t] /= z;
                worst = std::max(worst, std::abs(n.values.data()[src * S + t] - p[t]));
                sum += n.values.data()[src * S + t];
                ex += p[t] * (double)(t % W);
                ey += p[t] * (double)(t / W);
            }
            worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
            worst_flow = std::max(worst_flow,
                                  std::abs(f.predicted.data()[src * 2 + 0] - ex));
            worst_flow = std::max(worst_flow,
                                  std::abs(f.predicted.data()[src * 2 + 1] - ey));
        }
    }
    expect(worst <= 1e-10, "normalization deviates by " + std::to_string(worst));
    expect(worst_flow <= 1e-10, "flow deviates by " + std::to_string(worst_flow));
    expect(worst_sum <= 1e-6, "slice sums deviate by " + std::to_string(worst_sum));
}

// ---- criterion 3: end-to-end gradient vs central finite differences --------

void criterion_end_to_end_gradient() {
    double t0 = now_s();
    RunConfig cfg = preset_config("desk");
    cfg.grid = {3, 3};
    cfg.provider.grid = {3, 3};
    cfg.provider.depth = 4;
    cfg.provider.layers = 2;
    cfg.provider.n_keypoints = 3;
    cfg.stack.depth = 1;
    cfg.stack.n_heads = 2;
    cfg.stack.head_dim = 4;
    cfg.stack.d_in = 8;
    cfg.stack.mlp_hidden = 16;
    cfg.flow.temperature = 1.0;  // keeps the softmax away from saturation
    // small warp so keypoints stay inside the 3x3 grid
    cfg.provider.warp = WarpSpec::translation(0.5, 0.5, 0.0);
    Rng rng(1003);
    ModelState st = init_state(cfg, rng);
    SyntheticPair sp = provider_pair(cfg.provider, 0.25, 0);

    auto forward = [&]() { return pair_loss(sp, st, cfg); };
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(forward());
    }
    const double h = 1e-5;
    double worst = 0.0;
    std::size_t n_params = 0;
    std::string worst_name;
    visit_params(st.model, [&](const std::string& name, Tensor& t) {
        expect(t.grad().size() == t.size(), "no gradient for " + name);
        for (std::size_t i = 0; i < t.size(); ++i) {
            double orig = t.data()[i];
            t.data()[i] = orig + h;
            double up = forward().item();
            t.data()[i] = orig - h;
            double dn = forward().item();
            t.data()[i] = orig;
            double fd = (up - dn) / (2 * h);
            double rel = std::abs(t.grad()[i] - fd) /
                         std::max({std::abs(t.grad()[i]), std::abs(fd), 1e-3});
            if (rel > worst) {
                worst = rel;
                worst_name = name;
            }
            ++n_params;
        }
    });
    expect(worst <= 1e-4, "worst relative error " + std::to_string(worst) + " at " +
                              worst_name + " over " + std::to_string(n_params) + " params");
    expect(now_s() - t0 < 60.0, "exceeded the 60 second budget");
}

// ---- criterion 4: rotary embedding identities ------------------------------

void criterion_rope() {
    Rng rng(1004);
    RopeConfig cfg;
    // zero-position identity
    for (int trial = 0; trial < 50; ++trial) {
        // head dims whose rotation pairs split evenly into the two index groups
        const std::size_t dims[] = {2, 4, 8, 16};
        std::size_t Dh = dims[rng.uniform_index(4)];
        Tensor m = rng.normal_tensor({4, Dh});
        std::vector<Position4> zeros(4, Position4{0, 0, 0, 0});
        Tensor out = rope_rotate(m, zeros, cfg, 8);
        for (std::size_t i = 0; i < m.size(); ++i)
            expect(std::abs(out.data()[i] - m.data()[i]) <= 1e-12,
                   "zero-position rotation moved a value");
    }
    // relative-offset invariance of q.k over random tuples
    std::size_t tuples = 0;
    double worst = 0.0;
    std::size_t W = 9;
    while (tuples < 1000) {
        Tensor qk = rng.normal_tensor({2, 8});
        double i1 = (double)rng.uniform_index(4), j1 = (double)rng.uniform_index(4);
        double i2 = (double)rng.uniform_index(4), j2 = (double)rng.uniform_index(4);
        double k1 = (double)rng.uniform_index(4), l1 = (double)rng.uniform_index(4);
        double k2 = (double)rng.uniform_index(4), l2 = (double)rng.uniform_index(4);
        double dj = (double)rng.uniform_index(4), dl = (double)rng.uniform_index(4);
        std::vector<Position4> base{{i1, j1, k1, l1}, {i2, j2, k2, l2}};
        std::vector<Position4> shifted{{i1, j1 + dj, k1, l1 + dl}, {i2, j2 + dj, k2, l2 + dl}};
        auto dot = [&](const Tensor& t) {
            double s = 0;
            for (std::size_t d = 0; d < 8; ++d) s += t.data()[d] * t.data()[8 + d];
            return s;
        };
        worst = std::max(worst, std::abs(dot(rope_rotate(qk, base, cfg, W)) -
                                         dot(rope_rotate(qk, shifted, cfg, W))));
        ++tuples;
    }
    expect(worst <= 1e-9, "relative invariance broken by " + std::to_string(worst));
}

// ---- criterion 5: scaling behaviour ----------------------------------------

void criterion_scaling() {
    double t0 = now_s();
    BenchResult res = bench_attention({1024, 2048, 4096, 8192}, 4, 9);
    expect(res.additive_slope >= 0.8 && res.additive_slope <= 1.3,
           "additive slope " + std::to_string(res.additive_slope) + " outside [0.8, 1.3]");
    expect(res.vanilla_slope >= 1.7 && res.vanilla_slope <= 2.3,
           "vanilla slope " + std::to_string(res.vanilla_slope) + " outside [1.7, 2.3]");

    // forward at T = 225^2 = 50625 must fit in 8 GB
    AllocStats::reset();
    {
        NoGrad ng;
        Rng rng(1005);
        std::size_t T = 50625, d_in = 32, Dh = 4;
        HeadParams hp;
        hp.w_query = rng.normal_tensor({d_in, Dh}, 0.3);
        hp.w_key = rng.normal_tensor({d_in, Dh}, 0.3);
        hp.w_value = rng.normal_tensor({d_in, Dh}, 0.3);
        hp.g_query = rng.normal_tensor({Dh});
        hp.g_key = rng.normal_tensor({Dh});
        RopeConfig none;
        none.mode = RopeMode::none;
        MatchEmbedding x{rng.normal_tensor({T, d_in}), {1, 1}};
        Tensor out = additive_attention_head(x, hp, 0.5, none);
        expect(out.all_finite(), "large-T forward produced non-finite values");
    }
    double peak_gb = (double)AllocStats::max_elems() * 8.0 / 1e9;
    expect(peak_gb < 8.0, "peak single buffer " + std::to_string(peak_gb) + " GB");
    expect(now_s() - t0 < 300.0, "exceeded the 5 minute budget");
}

// ---- criterion 6: toy convergence ------------------------------------------

RunConfig toy_config() {
    RunConfig cfg = preset_config("desk");  // 8x8 grid
    cfg.provider.layers = 2;
    cfg.provider.depth = 8;
    cfg.provider.n_keypoints = 8;
    cfg.provider.warp = WarpSpec::translation(1.0, 0.5, 0.0);
    cfg.translation_jitter = 0.5;
    cfg.stack.depth = 1;
    cfg.optim.steps = 800;
    cfg.optim.batch = 2;
    cfg.optim.seed = 7;
    cfg.provider.seed = 7;
    return cfg;
}

std::optional<ModelState> g_trained;  // shared with the nonlocality criterion
RunConfig g_toy_cfg;

void criterion_toy_convergence() {
    double t0 = now_s();
    RunConfig cfg = toy_config();
    Rng rng(cfg.optim.seed);
    ModelState st = init_state(cfg, rng);
    fs::path dir = scratch("toy");
    RunRecord rec = train(cfg, st, dir);
    double initial = rec.loss_curve.front(), final_loss = rec.loss_curve.back();
    expect(final_loss < 0.1 * initial,
           "loss " + std::to_string(final_loss) + " is not below 10% of the initial " +
               std::to_string(initial));
    double p = held_out_pck(st, cfg, 50, 424242, 0.1, ThresholdMode::img);
    expect(p >= 0.90, "held-out PCK@0.1 " + std::to_string(p) + " below 0.90");
    expect(now_s() - t0 < 600.0, "exceeded the 10 minute budget");
    g_trained = std::move(st);
    g_toy_cfg = cfg;
}

// ---- criterion 7: nonlocality ----------------------------------------------

void criterion_nonlocality() {
    for (std::size_t K : {1, 3, 5, 7, 9, 11})
        for (std::size_t d : {2, 4, 6}) {
            ConvSpec spec{K, d};
            double e = nonlocality_conv(spec);
            double c = nonlocality_conv_closed_form(spec);
            expect(e == c, "enumeration and closed form differ for K=" + std::to_string(K) +
                               ", d=" + std::to_string(d));
        }
    expect(nonlocality_conv({3, 2}) == 4.0 / 3.0, "K=3, d=2 is not 4/3");
    expect(nonlocality_conv({5, 4}) == 8.0, "K=5, d=4 is not 8.0");

    expect(g_trained.has_value(), "trained model unavailable (previous criterion failed)");
    SyntheticPair sp = provider_pair(g_toy_cfg.provider, g_toy_cfg.translation_jitter, 0);
    NoGrad ng;
    std::vector<Correlation4D> corrs;
    for (std::size_t l = 0; l < sp.source.size(); ++l)
        corrs.push_back(cosine_correlation(sp.source[l], sp.target[l]));
    MultiChannelCorrelation mc = assemble_multichannel(corrs, g_toy_cfg.grid);
    NonlocalityReport rep = analyze_nonlocality(mc, *g_trained, g_toy_cfg);
    expect(rep.total > 8.0 / 3.0,
           "trained attention nonlocality " + std::to_string(rep.total) +
               " does not exceed the K=3 conv baseline stack value 8/3");
}

// ---- criterion 8: PCK oracle -----------------------------------------------

void criterion_pck_oracle() {
    Rng rng(1008);
    std::size_t cases = 0;
    while (cases < 1000) {
        std::size_t M = 1 + rng.uniform_index(8);
        std::vector<Point> pred, gt;
        for (std::size_t m = 0; m < M; ++m) {
            pred.push_back({rng.uniform(0.0, 200.0), rng.uniform(0.0, 200.0)});
            gt.push_back({rng.uniform(0.0, 200.0), rng.uniform(0.0, 200.0)});
        }
        std::pair<double, double> img{rng.uniform(50.0, 400.0), rng.uniform(50.0, 400.0)};
        BBox box{10.0, 20.0, 10.0 + rng.uniform(5.0, 200.0), 20.0 + rng.uniform(5.0, 200.0)};
        double alpha = rng.uniform(0.01, 0.6);
        for (ThresholdMode mode :
             {ThresholdMode::img, ThresholdMode::bbox, ThresholdMode::bbox_kp}) {
            std::pair<double, double> ref;
            try {
                ref = resolve_reference_size(mode, img, box, gt);
            } catch (const TensorError&) {
                continue;  // a single keypoint makes the tight box degenerate
            }
            if (ref.first <= 0 || ref.second <= 0) continue;
            double thr = alpha * std::max(ref.first, ref.second);
            std::size_t n = 0;
            for (std::size_t m = 0; m < M; ++m)
                if (std::hypot(pred[m].first - gt[m].first, pred[m].second - gt[m].second) <=
                    thr)
                    ++n;
            double got = pck(pred, gt, ref, alpha);
            expect(got == (double)n / (double)M,
                   "pck mismatch vs the indicator sum (mode " +
                       std::to_string((int)mode) + ")");
        }
        ++cases;
    }
}

// ---- criterion 9: run-to-run determinism -----------------------------------

void criterion_determinism() {
    RunConfig cfg = preset_config("desk");
    cfg.grid = {4, 4};
    cfg.provider.grid = {4, 4};
    cfg.provider.depth = 4;
    cfg.provider.layers = 2;
    cfg.provider.n_keypoints = 4;
    cfg.provider.warp = WarpSpec::translation(1.0, 0.5, 0.0);
    cfg.translation_jitter = 0.25;
    cfg.stack.depth = 1;
    cfg.optim.steps = 5;
    cfg.optim.batch = 2;
    cfg.optim.seed = 99;
    cfg.provider.seed = 99;

    auto run_once = [&](const fs::path& dir) {
        Rng rng(cfg.optim.seed);
        ModelState st = init_state(cfg, rng);
        return train(cfg, st, dir);
    };
    fs::path d1 = scratch("det_a"), d2 = scratch("det_b");
    RunRecord r1 = run_once(d1);
    RunRecord r2 = run_once(d2);
    expect(r1.loss_curve == r2.loss_curve, "loss curves differ between identical runs");
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(d1 / "checkpoint")) {
        if (!e.is_regular_file()) continue;
        fs::path other = d2 / "checkpoint" / e.path().filename();
        expect(fs::exists(other), "missing checkpoint file " + other.string());
        expect(io::read_text_file(e.path()) == io::read_text_file(other),
               "checkpoint file " + e.path().filename().string() + " differs");
        ++files;
    }
    expect(files > 10, "suspiciously few checkpoint files");
}

}  // namespace

int main() {
    struct Entry {
        const char* name;
        std::function<void()> fn;
    };
    std::vector<Entry> criteria{
        {"additive attention matches the literal-loop oracle", criterion_additive_oracle},
        {"kernel soft-argmax and flow match their loop oracles", criterion_flow_oracle},
        {"end-to-end gradients match central finite differences", criterion_end_to_end_gradient},
        {"rotary embedding identity and relative-offset invariance", criterion_rope},
        {"attention cost scaling and large-T footprint", criterion_scaling},
        {"toy training converges and transfers keypoints", criterion_toy_convergence},
        {"nonlocality enumeration, closed form and trained model", criterion_nonlocality},
        {"pck equals the indicator-sum oracle in all modes", criterion_pck_oracle},
        {"identical runs are byte-identical", criterion_determinism},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        double t0 = now_s();
        try {
            criteria[i].fn();
            std::printf("PASS  %zu. %s (%.1fs)\n", i + 1, criteria[i].name, now_s() - t0);
        } catch (const Failure& f) {
            std::printf("FAIL  %zu. %s: %s\n", i + 1, criteria[i].name, f.why.c_str());
            ++failures;
        } catch (const std::exception& e) {
            std::printf("FAIL  %zu. %s: unexpected error: %s\n", i + 1, criteria[i].name,
                        e.what());
            ++failures;
        }
        std::fflush(stdout);
    }
    if (failures) std::printf("%d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
