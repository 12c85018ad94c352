#pragma once

// PCK metric under the img / bbox / bbox-kp threshold conventions, with
// per-category aggregation and CSV/JSON report generation.

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tfm/tensor.hpp"

namespace tfm {

enum class ThresholdMode { img, bbox, bbox_kp };

struct EvalThreshold {
    ThresholdMode mode = ThresholdMode::img;
    double alpha = 0.1;
};

inline ThresholdMode threshold_mode_from_string(const std::string& s) {
    if (s == "img") return ThresholdMode::img;
    if (s == "bbox") return ThresholdMode::bbox;
    if (s == "bbox_kp" || s == "bbox-kp") return ThresholdMode::bbox_kp;
    throw TensorError("unknown threshold mode '" + s + "'");
}

struct PairEvalRecord {
    std::string category;
    std::vector<bool> correct;
    double pair_pck = 0.0;
    double threshold_pixels = 0.0;
};

using Point = std::pair<double, double>;

// Fraction of keypoints with ||k̂ - k̂'|| <= alpha * max(w, h); boundary
// equality counts as correct.
inline double pck(const std::vector<Point>& predicted, const std::vector<Point>& ground_truth,
                  std::pair<double, double> ref_size, double alpha) {
    if (predicted.empty() || predicted.size() != ground_truth.size())
        throw TensorError("pck: keypoint lists must be non-empty and equal length");
    if (ref_size.first <= 0.0 || ref_size.second <= 0.0)
        throw TensorError("pck: reference size must be positive");
    if (alpha <= 0.0) throw TensorError("pck: alpha must be positive");
    double thr = alpha * std::max(ref_size.first, ref_size.second);
    std::size_t n = 0;
    for (std::size_t m = 0; m < predicted.size(); ++m) {
        double dx = predicted[m].first - ground_truth[m].first;
        double dy = predicted[m].second - ground_truth[m].second;
        if (std::sqrt(dx * dx + dy * dy) <= thr) ++n;
    }
    return (double)n / (double)predicted.size();
}

struct BBox {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

// img -> image size; bbox -> bbox extent; bbox_kp -> tight extent of the
// annotated keypoints.
inline std::pair<double, double> resolve_reference_size(ThresholdMode mode,
                                                        std::pair<double, double> image_size,
                                                        const BBox& bbox,
                                                        const std::vector<Point>& keypoints) {
    std::pair<double, double> r;
    switch (mode) {
        case ThresholdMode::img:
            r = image_size;
            break;
        case ThresholdMode::bbox:
            r = {bbox.x1 - bbox.x0, bbox.y1 - bbox.y0};
            break;
        case ThresholdMode::bbox_kp: {
            if (keypoints.empty())
                throw TensorError("resolve_reference_size: bbox_kp needs keypoints");
            double x0 = keypoints[0].first, x1 = x0, y0 = keypoints[0].second, y1 = y0;
            for (const auto& k : keypoints) {
                x0 = std::min(x0, k.first);
                x1 = std::max(x1, k.first);
                y0 = std::min(y0, k.second);
                y1 = std::max(y1, k.second);
            }
            r = {x1 - x0, y1 - y0};
            break;
        }
    }
    if (r.first <= 0.0 && r.second <= 0.0)
        throw TensorError("resolve_reference_size: degenerate zero-area reference");
    return r;
}

enum class AggScheme { per_pair_mean, per_keypoint_pool };

struct CategoryRow {
    std::string category;
    std::size_t n_pairs = 0;
    std::size_t n_keypoints = 0;
    double pck = 0.0;
};

struct EvalReport {
    std::vector<CategoryRow> rows;  // per-category, sorted lexically, then "all"
    AggScheme scheme = AggScheme::per_keypoint_pool;

    const CategoryRow& all() const { return rows.back(); }
};

inline EvalReport aggregate(const std::vector<PairEvalRecord>& records, AggScheme scheme) {
    if (records.empty()) throw TensorError("aggregate: no records");
    struct Acc {
        std::size_t pairs = 0, kps = 0, correct = 0;
        double pair_pck_sum = 0.0;
    };
    std::map<std::string, Acc> by_cat;
    Acc all;
    for (const auto& r : records) {
        std::size_t c = (std::size_t)std::count(r.correct.begin(), r.correct.end(), true);
        for (Acc* a : {&by_cat[r.category], &all}) {
            a->pairs += 1;
            a->kps += r.correct.size();
            a->correct += c;
            a->pair_pck_sum += r.pair_pck;
        }
    }
    auto score = [&](const Acc& a) {
        return scheme == AggScheme::per_pair_mean ? a.pair_pck_sum / (double)a.pairs
                                                  : (double)a.correct / (double)a.kps;
    };
    EvalReport rep;
    rep.scheme = scheme;
    for (const auto& [cat, acc] : by_cat)
        rep.rows.push_back({cat, acc.pairs, acc.kps, score(acc)});
    rep.rows.push_back({"all", all.pairs, all.kps, score(all)});
    return rep;
}

inline std::string report_csv(const EvalReport& rep) {
    std::ostringstream oss;
    oss << "category,n_pairs,n_keypoints,pck\n";
    for (const auto& r : rep.rows)
        oss << r.category << "," << r.n_pairs << "," << r.n_keypoints << "," << r.pck << "\n";
    return oss.str();
}

inline nlohmann::json report_json(const EvalReport& rep) {
    nlohmann::json j;
    j["scheme"] = rep.scheme == AggScheme::per_pair_mean ? "per_pair_mean" : "per_keypoint_pool";
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rep.rows)
        j["rows"].push_back({{"category", r.category},
                             {"n_pairs", r.n_pairs},
                             {"n_keypoints", r.n_keypoints},
                             {"pck", r.pck}});
    return j;
}

}  // namespace tfm
