#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "tfm/pipeline.hpp"

using namespace tfm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("tfm_pipe_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// small configuration that keeps the full pipeline fast
RunConfig tiny_config() {
    RunConfig c = preset_config("desk");
    c.grid = {4, 4};
    c.provider.grid = {4, 4};
    c.provider.depth = 4;
    c.provider.layers = 2;
    c.provider.n_keypoints = 4;
    c.stack.depth = 1;
    c.stack.n_heads = 2;
    c.stack.head_dim = 4;
    c.stack.d_in = 8;
    c.stack.mlp_hidden = 16;
    c.optim.steps = 2;
    c.optim.batch = 1;
    c.flow.temperature = 1.0;
    // a gentle warp keeps keypoints inside the small 4x4 grid
    c.provider.warp = WarpSpec::translation(1.0, 0.5, 0.0);
    c.translation_jitter = 0.25;
    return c;
}

std::string slurp(const fs::path& p) { return io::read_text_file(p); }

}  // namespace

TEST_CASE("presets select the documented grids") {
    CHECK(preset_config("desk").grid == std::pair<std::size_t, std::size_t>{8, 8});
    CHECK(preset_config("paper").grid == std::pair<std::size_t, std::size_t>{15, 15});
    CHECK_THROWS_AS(preset_config("laptop"), TensorError);
}

TEST_CASE("run configuration JSON round trip") {
    RunConfig c = tiny_config();
    c.flow.loss_norm = LossNorm::euclidean;
    c.translation_jitter = 0.75;
    c.optim.seed = 42;
    nlohmann::json j = run_config_json(c);
    RunConfig back = run_config_from_json(j);
    CHECK(back.grid == c.grid);
    CHECK(back.stack.n_heads == c.stack.n_heads);
    CHECK(back.stack.mlp_hidden == c.stack.mlp_hidden);
    CHECK(back.flow.loss_norm == LossNorm::euclidean);
    CHECK(back.optim.seed == 42);
    CHECK(back.translation_jitter == 0.75);
    CHECK(back.provider.warp.offset == c.provider.warp.offset);
    nlohmann::json bad = j;
    bad["flow"]["loss_norm"] = "manhattan";
    CHECK_THROWS_AS(run_config_from_json(bad), TensorError);
}

TEST_CASE("configuration validation rejects bad values") {
    RunConfig c = tiny_config();
    c.flow.sigma = -1.0;
    CHECK_THROWS_AS(c.validate(), TensorError);
    RunConfig c2 = tiny_config();
    c2.optim.batch = 0;
    CHECK_THROWS_AS(c2.validate(), TensorError);
    RunConfig c3 = tiny_config();
    c3.stack.d_in = 9;
    CHECK_THROWS_AS(c3.validate(), TensorError);
}

TEST_CASE("seed mixing is deterministic and spreads indices") {
    CHECK(mix_seed(1, 2) == mix_seed(1, 2));
    CHECK(mix_seed(1, 2) != mix_seed(1, 3));
    CHECK(mix_seed(1, 2) != mix_seed(2, 2));
}

TEST_CASE("jittered warps vary per pair but are reproducible") {
    RunConfig c = tiny_config();
    WarpSpec w0 = provider_warp(c.provider, 2.0, 0);
    WarpSpec w0b = provider_warp(c.provider, 2.0, 0);
    WarpSpec w1 = provider_warp(c.provider, 2.0, 1);
    CHECK(w0.offset == w0b.offset);
    CHECK(w0.offset != w1.offset);
    WarpSpec still = provider_warp(c.provider, 0.0, 0);
    CHECK(still.offset == c.provider.warp.offset);
}

TEST_CASE("match_features produces a normalized flow on a synthetic pair") {
    RunConfig c = tiny_config();
    Rng rng(5);
    ModelState st = init_state(c, rng);
    SyntheticPair sp = provider_pair(c.provider, 0.0, 0);
    NoGrad ng;
    MatchResult res = match_features(sp.source, sp.target, st, c);
    CHECK(res.refined.values.shape() == Shape{8, 8, 8, 8});
    CHECK(res.flow.predicted.shape() == Shape{8, 8, 2});
    CHECK(res.flow.predicted.all_finite());
    std::vector<Point> pred = predict_keypoints(res, sp.keypoints, c);
    REQUIRE(pred.size() == sp.keypoints.src_kps.size());
    for (const auto& p : pred) {
        CHECK(std::isfinite(p.first));
        CHECK(std::isfinite(p.second));
        // expectations over the target grid stay inside the image
        CHECK(p.first >= 0.0);
        CHECK(p.first <= sp.keypoints.tgt_img_size.first);
    }
    CHECK_THROWS_AS(match_features({}, {}, st, c), TensorError);
}

TEST_CASE("pair loss is finite and differentiable") {
    RunConfig c = tiny_config();
    Rng rng(6);
    ModelState st = init_state(c, rng);
    SyntheticPair sp = provider_pair(c.provider, c.translation_jitter, 0);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = pair_loss(sp, st, c);
    CHECK(std::isfinite(loss.item()));
    CHECK(loss.item() >= 0.0);
    tape.backward(loss);
    CHECK(st.model.w_in.grad().size() == st.model.w_in.size());
    double gsum = 0.0;
    visit_params(st.model, [&](const std::string&, Tensor& t) {
        for (double g : t.grad()) gsum += std::abs(g);
    });
    CHECK(gsum > 0.0);
}

TEST_CASE("two identical runs produce identical losses and checkpoints") {
    RunConfig c = tiny_config();
    fs::path d1 = temp_dir("det1"), d2 = temp_dir("det2");
    Rng r1(c.optim.seed);
    ModelState s1 = init_state(c, r1);
    RunRecord rec1 = train(c, s1, d1);
    Rng r2(c.optim.seed);
    ModelState s2 = init_state(c, r2);
    RunRecord rec2 = train(c, s2, d2);
    CHECK(rec1.loss_curve == rec2.loss_curve);
    for (const auto& e : fs::directory_iterator(d1 / "checkpoint")) {
        fs::path other = d2 / "checkpoint" / e.path().filename();
        REQUIRE(fs::exists(other));
        CHECK(slurp(e.path()) == slurp(other));
    }
}

TEST_CASE("training writes a loadable checkpoint and run record") {
    RunConfig c = tiny_config();
    fs::path dir = temp_dir("train");
    Rng rng(c.optim.seed);
    ModelState st = init_state(c, rng);
    RunRecord rec = train(c, st, dir);
    CHECK(rec.loss_curve.size() == c.optim.steps);
    CHECK(fs::exists(dir / "run_record.json"));
    nlohmann::json rr = nlohmann::json::parse(slurp(dir / "run_record.json"));
    CHECK(rr["loss_curve"].size() == c.optim.steps);
    CHECK(rr["format_version"] == 1);

    ModelState back = load_state(dir / "checkpoint", c);
    CHECK(back.model.w_in.shape() == st.model.w_in.shape());
    // loaded weights match the trained state up to float32 storage
    for (std::size_t i = 0; i < st.model.w_in.size(); ++i)
        CHECK(back.model.w_in.data()[i] ==
              doctest::Approx(st.model.w_in.data()[i]).epsilon(1e-6));
    double p1 = held_out_pck(st, c, 3, 999, 0.5);
    CHECK(p1 >= 0.0);
    CHECK(p1 <= 1.0);
}

TEST_CASE("encoder provider trains the encoder jointly and checkpoints it") {
    RunConfig c = tiny_config();
    c.provider.kind = FeatureProviderConfig::Kind::encoder;
    c.provider.encoder.widths = {6, 4};
    fs::path dir = temp_dir("enc");
    Rng rng(3);
    ModelState st = init_state(c, rng);
    REQUIRE(st.encoder.has_value());
    RunRecord rec = train(c, st, dir);
    CHECK(std::isfinite(rec.final_loss));
    CHECK(fs::exists(dir / "checkpoint" / "encoder" / "manifest.json"));
    ModelState back = load_state(dir / "checkpoint", c);
    REQUIRE(back.encoder.has_value());
    CHECK(back.encoder->weights[0].shape() == st.encoder->weights[0].shape());
}

TEST_CASE("log-log slope recovers exact power laws") {
    std::vector<std::pair<double, double>> lin, quad;
    for (double t : {256.0, 512.0, 1024.0, 2048.0}) {
        lin.push_back({t, 3.0 * t});
        quad.push_back({t, 0.5 * t * t});
    }
    CHECK(detail::loglog_slope(lin) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(detail::loglog_slope(quad) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("attention benchmark rows and csv") {
    BenchResult res = bench_attention({64, 128}, 4, 3);
    REQUIRE(res.rows.size() == 4);  // additive + vanilla at both sizes
    for (const auto& r : res.rows) CHECK(r.median_seconds > 0.0);
    std::string csv = bench_csv(res);
    CHECK(csv.find("kind,T,median_seconds") == 0);
    CHECK(csv.find("additive,64,") != std::string::npos);
    CHECK_THROWS_AS(bench_attention({128, 64}, 4, 3), TensorError);
}

TEST_CASE("nonlocality analysis over the tiny model") {
    RunConfig c = tiny_config();
    Rng rng(8);
    ModelState st = init_state(c, rng);
    SyntheticPair sp = provider_pair(c.provider, 0.0, 0);
    std::vector<Correlation4D> corrs;
    for (std::size_t l = 0; l < sp.source.size(); ++l)
        corrs.push_back(cosine_correlation(sp.source[l], sp.target[l]));
    MultiChannelCorrelation mc = assemble_multichannel(corrs, c.grid);
    NonlocalityReport rep = analyze_nonlocality(mc, st, c);
    REQUIRE(rep.per_layer.size() == c.stack.depth);
    double sum = 0.0;
    for (double v : rep.per_layer) {
        CHECK(v >= 0.0);
        CHECK(std::isfinite(v));
        sum += v;
    }
    CHECK(rep.total == doctest::Approx(sum));
    CHECK(rep.grid == c.grid);
}

TEST_CASE("predictions written by matching evaluate cleanly") {
    RunConfig c = tiny_config();
    Rng rng(9);
    ModelState st = init_state(c, rng);
    SyntheticPair sp = provider_pair(c.provider, 0.0, 3);
    NoGrad ng;
    MatchResult res = match_features(sp.source, sp.target, st, c);
    std::vector<Point> pred = predict_keypoints(res, sp.keypoints, c);
    PairEvalRecord rec;
    rec.category = sp.keypoints.category;
    double v = pck(pred, sp.keypoints.tgt_kps, sp.keypoints.tgt_img_size, 1e6);
    CHECK(v == 1.0);  // sanity: huge alpha accepts every finite prediction
}
