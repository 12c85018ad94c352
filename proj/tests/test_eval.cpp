#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tfm/evaluation.hpp"

using namespace tfm;

TEST_CASE("pck counts keypoints within the threshold, 2-of-3 example") {
    std::vector<Point> pred{{0.0, 0.0}, {10.0, 0.0}, {0.0, 50.0}};
    std::vector<Point> gt{{1.0, 0.0}, {10.0, 2.0}, {0.0, 0.0}};
    // threshold = 0.1 * max(100, 80) = 10
    CHECK(pck(pred, gt, {100.0, 80.0}, 0.1) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("boundary equality counts as correct") {
    std::vector<Point> pred{{10.0, 0.0}};
    std::vector<Point> gt{{0.0, 0.0}};
    CHECK(pck(pred, gt, {100.0, 100.0}, 0.1) == 1.0);    // distance == threshold
    CHECK(pck(pred, gt, {100.0, 100.0}, 0.0999) == 0.0);  // just under
}

TEST_CASE("a huge alpha accepts everything") {
    std::vector<Point> pred{{1e4, -1e4}, {0.0, 0.0}};
    std::vector<Point> gt{{0.0, 0.0}, {5.0, 5.0}};
    CHECK(pck(pred, gt, {10.0, 10.0}, 1e6) == 1.0);
}

TEST_CASE("pck is invariant to jointly scaling points and reference size") {
    std::vector<Point> pred{{3.0, 4.0}, {50.0, 0.0}};
    std::vector<Point> gt{{0.0, 0.0}, {0.0, 0.0}};
    double a = pck(pred, gt, {100.0, 60.0}, 0.1);
    std::vector<Point> pred2, gt2;
    for (auto& p : pred) pred2.push_back({p.first * 7, p.second * 7});
    for (auto& p : gt) gt2.push_back({p.first * 7, p.second * 7});
    CHECK(pck(pred2, gt2, {700.0, 420.0}, 0.1) == a);
}

TEST_CASE("pck validates its arguments") {
    std::vector<Point> one{{0, 0}};
    CHECK_THROWS_AS(pck({}, {}, {10, 10}, 0.1), TensorError);
    CHECK_THROWS_AS(pck(one, {}, {10, 10}, 0.1), TensorError);
    CHECK_THROWS_AS(pck(one, one, {0, 10}, 0.1), TensorError);
    CHECK_THROWS_AS(pck(one, one, {10, 10}, 0.0), TensorError);
}

TEST_CASE("pck values are exact multiples of 1/M") {
    Rng rng(71);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t M = 1 + rng.uniform_index(7);
        std::vector<Point> pred, gt;
        for (std::size_t m = 0; m < M; ++m) {
            pred.push_back({rng.uniform(0.0, 50.0), rng.uniform(0.0, 50.0)});
            gt.push_back({rng.uniform(0.0, 50.0), rng.uniform(0.0, 50.0)});
        }
        double v = pck(pred, gt, {50.0, 50.0}, 0.2);
        double scaled = v * (double)M;
        CHECK(std::abs(scaled - std::round(scaled)) < 1e-12);
    }
}

TEST_CASE("pck matches an indicator-sum oracle on random cases") {
    Rng rng(72);
    for (int trial = 0; trial < 300; ++trial) {
        std::size_t M = 1 + rng.uniform_index(6);
        std::vector<Point> pred, gt;
        for (std::size_t m = 0; m < M; ++m) {
            pred.push_back({rng.uniform(0.0, 40.0), rng.uniform(0.0, 40.0)});
            gt.push_back({rng.uniform(0.0, 40.0), rng.uniform(0.0, 40.0)});
        }
        double w = rng.uniform(10.0, 60.0), h = rng.uniform(10.0, 60.0);
        double alpha = rng.uniform(0.05, 0.5);
        std::size_t n = 0;
        double thr = alpha * std::max(w, h);
        for (std::size_t m = 0; m < M; ++m)
            if (std::hypot(pred[m].first - gt[m].first, pred[m].second - gt[m].second) <= thr)
                ++n;
        CHECK(pck(pred, gt, {w, h}, alpha) == doctest::Approx((double)n / M).epsilon(1e-15));
    }
}

TEST_CASE("reference size modes") {
    BBox box{10, 20, 60, 100};
    std::vector<Point> kps{{15, 25}, {40, 90}, {20, 30}};
    auto img = resolve_reference_size(ThresholdMode::img, {640, 480}, box, kps);
    CHECK(img == std::pair<double, double>{640, 480});
    auto bb = resolve_reference_size(ThresholdMode::bbox, {640, 480}, box, kps);
    CHECK(bb == std::pair<double, double>{50, 80});
    auto bk = resolve_reference_size(ThresholdMode::bbox_kp, {640, 480}, box, kps);
    CHECK(bk == std::pair<double, double>{25, 65});
    CHECK_THROWS_AS(
        resolve_reference_size(ThresholdMode::bbox, {640, 480}, BBox{5, 5, 5, 5}, kps),
        TensorError);
    CHECK_THROWS_AS(resolve_reference_size(ThresholdMode::bbox_kp, {640, 480}, box, {}),
                    TensorError);
}

TEST_CASE("threshold mode parsing") {
    CHECK(threshold_mode_from_string("img") == ThresholdMode::img);
    CHECK(threshold_mode_from_string("bbox") == ThresholdMode::bbox);
    CHECK(threshold_mode_from_string("bbox_kp") == ThresholdMode::bbox_kp);
    CHECK(threshold_mode_from_string("bbox-kp") == ThresholdMode::bbox_kp);
    CHECK_THROWS_AS(threshold_mode_from_string("image"), TensorError);
}

TEST_CASE("aggregation schemes weight pairs differently") {
    PairEvalRecord a;
    a.category = "cat";
    a.correct = {true, false};  // pair pck 0.5
    a.pair_pck = 0.5;
    PairEvalRecord b;
    b.category = "cat";
    b.correct = {true};  // pair pck 1.0
    b.pair_pck = 1.0;
    EvalReport pool = aggregate({a, b}, AggScheme::per_keypoint_pool);
    CHECK(pool.all().pck == doctest::Approx(2.0 / 3.0));
    EvalReport mean = aggregate({a, b}, AggScheme::per_pair_mean);
    CHECK(mean.all().pck == doctest::Approx(0.75));
    CHECK(pool.all().n_pairs == 2);
    CHECK(pool.all().n_keypoints == 3);
    CHECK_THROWS_AS(aggregate({}, AggScheme::per_pair_mean), TensorError);
}

TEST_CASE("per-category rows are sorted with the pooled row last") {
    PairEvalRecord a;
    a.category = "zebra";
    a.correct = {true};
    a.pair_pck = 1.0;
    PairEvalRecord b;
    b.category = "aeroplane";
    b.correct = {false};
    b.pair_pck = 0.0;
    EvalReport rep = aggregate({a, b}, AggScheme::per_keypoint_pool);
    REQUIRE(rep.rows.size() == 3);
    CHECK(rep.rows[0].category == "aeroplane");
    CHECK(rep.rows[1].category == "zebra");
    CHECK(rep.rows[2].category == "all");
}

TEST_CASE("adding a correct keypoint never lowers pooled pck") {
    PairEvalRecord a;
    a.category = "c";
    a.correct = {true, false, false};
    a.pair_pck = 1.0 / 3.0;
    double before = aggregate({a}, AggScheme::per_keypoint_pool).all().pck;
    a.correct.push_back(true);
    a.pair_pck = 0.5;
    double after = aggregate({a}, AggScheme::per_keypoint_pool).all().pck;
    CHECK(after >= before);
}

TEST_CASE("report serialization") {
    PairEvalRecord a;
    a.category = "cat";
    a.correct = {true, true};
    a.pair_pck = 1.0;
    EvalReport rep = aggregate({a}, AggScheme::per_keypoint_pool);
    std::string csv = report_csv(rep);
    CHECK(csv.find("category,n_pairs,n_keypoints,pck") == 0);
    CHECK(csv.find("cat,1,2,1") != std::string::npos);
    nlohmann::json j = report_json(rep);
    CHECK(j["scheme"] == "per_keypoint_pool");
    CHECK(j["rows"].back()["category"] == "all");
    CHECK(j["rows"].back()["pck"] == 1.0);
}
