#pragma once

// Annotation ingestion, synthetic correspondence-pair generation with
// exact ground truth, and the pluggable feature provider.

#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tfm/correlation.hpp"
#include "tfm/io.hpp"
#include "tfm/tensor.hpp"

namespace tfm {

using FeatureStack = std::vector<FeatureMap>;
using Point = std::pair<double, double>;

struct KeypointPairSet {
    std::string pair_id;
    std::string category;
    std::pair<double, double> src_img_size{0, 0};  // (w, h) pixels
    std::pair<double, double> tgt_img_size{0, 0};
    std::array<double, 4> src_bbox{0, 0, 0, 0};  // x0, y0, x1, y1
    std::array<double, 4> tgt_bbox{0, 0, 0, 0};
    std::vector<Point> src_kps;  // pixel coordinates
    std::vector<Point> tgt_kps;
    std::map<std::string, std::string> difficulty;  // type -> easy|medium|hard
};

class AnnotationError : public std::runtime_error {
public:
    explicit AnnotationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Linear pixel <-> grid scaling, applied at module boundaries only.
inline Point pixel_to_grid(Point p, std::pair<double, double> image_size,
                           std::pair<std::size_t, std::size_t> grid) {
    return {p.first * (double)grid.second / image_size.first,
            p.second * (double)grid.first / image_size.second};
}

inline Point grid_to_pixel(Point p, std::pair<double, double> image_size,
                           std::pair<std::size_t, std::size_t> grid) {
    return {p.first * image_size.first / (double)grid.second,
            p.second * image_size.second / (double)grid.first};
}

// --- annotations ------------------------------------------------------------

namespace detail {

inline void validate_pair(const KeypointPairSet& p) {
    auto fail = [&](const std::string& why) {
        throw AnnotationError("pair '" + p.pair_id + "': " + why);
    };
    if (p.src_kps.size() != p.tgt_kps.size())
        fail("source and target keypoint lists have different lengths (" +
             std::to_string(p.src_kps.size()) + " vs " + std::to_string(p.tgt_kps.size()) + ")");
    if (p.src_kps.empty()) fail("no keypoints");
    if (p.src_img_size.first <= 0 || p.src_img_size.second <= 0 ||
        p.tgt_img_size.first <= 0 || p.tgt_img_size.second <= 0)
        fail("non-positive image size");
    auto in_bounds = [](const Point& k, std::pair<double, double> sz) {
        return k.first >= 0 && k.first <= sz.first && k.second >= 0 && k.second <= sz.second;
    };
    for (std::size_t m = 0; m < p.src_kps.size(); ++m) {
        if (!in_bounds(p.src_kps[m], p.src_img_size))
            fail("source keypoint " + std::to_string(m) + " outside image bounds");
        if (!in_bounds(p.tgt_kps[m], p.tgt_img_size))
            fail("target keypoint " + std::to_string(m) + " outside image bounds");
    }
}

inline nlohmann::json pair_to_json(const KeypointPairSet& p) {
    nlohmann::json j;
    j["pair_id"] = p.pair_id;
    j["category"] = p.category;
    j["src_img_size"] = {p.src_img_size.first, p.src_img_size.second};
    j["tgt_img_size"] = {p.tgt_img_size.first, p.tgt_img_size.second};
    j["src_bbox"] = p.src_bbox;
    j["tgt_bbox"] = p.tgt_bbox;
    auto kps = [](const std::vector<Point>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& k : v) a.push_back({k.first, k.second});
        return a;
    };
    j["src_kps"] = kps(p.src_kps);
    j["tgt_kps"] = kps(p.tgt_kps);
    if (!p.difficulty.empty()) j["difficulty"] = p.difficulty;
    return j;
}

inline KeypointPairSet pair_from_json(const nlohmann::json& j) {
    KeypointPairSet p;
    try {
        p.pair_id = j.at("pair_id").get<std::string>();
        p.category = j.at("category").get<std::string>();
        p.src_img_size = {j.at("src_img_size").at(0).get<double>(),
                          j.at("src_img_size").at(1).get<double>()};
        p.tgt_img_size = {j.at("tgt_img_size").at(0).get<double>(),
                          j.at("tgt_img_size").at(1).get<double>()};
        for (int i = 0; i < 4; ++i) {
            p.src_bbox[i] = j.at("src_bbox").at(i).get<double>();
            p.tgt_bbox[i] = j.at("tgt_bbox").at(i).get<double>();
        }
        for (const auto& k : j.at("src_kps"))
            p.src_kps.push_back({k.at(0).get<double>(), k.at(1).get<double>()});
        for (const auto& k : j.at("tgt_kps"))
            p.tgt_kps.push_back({k.at(0).get<double>(), k.at(1).get<double>()});
        if (j.contains("difficulty"))
            p.difficulty = j.at("difficulty").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw AnnotationError("pair '" + p.pair_id + "': malformed field (" + e.what() + ")");
    }
    validate_pair(p);
    return p;
}

}  // namespace detail

inline std::vector<KeypointPairSet> load_annotations(const std::filesystem::path& path) {
    std::string text;
    try {
        text = io::read_text_file(path);
    } catch (const std::exception& e) {
        throw AnnotationError(e.what());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw AnnotationError("cannot parse " + path.string() + ": " + e.what());
    }
    if (!j.is_array()) throw AnnotationError(path.string() + ": top level must be an array");
    std::vector<KeypointPairSet> out;
    for (const auto& e : j) out.push_back(detail::pair_from_json(e));
    return out;
}

inline void save_annotations(const std::filesystem::path& path,
                             const std::vector<KeypointPairSet>& pairs) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& p : pairs) j.push_back(detail::pair_to_json(p));
    io::write_text_file(path, j.dump(2) + "\n");
}

// --- warps ------------------------------------------------------------------

enum class WarpKind { translation, rotation, scale, affine };

// Invertible affine warp in grid coordinates (x = column, y = row):
// maps source positions to target positions.
struct WarpSpec {
    WarpKind kind = WarpKind::translation;
    // row-major 2x2 linear part + translation, applied as t = A*s + b
    std::array<double, 4> linear{1, 0, 0, 1};
    std::array<double, 2> offset{0, 0};
    double sigma_feat = 0.0;  // per-layer target feature noise

    static WarpSpec translation(double dx, double dy, double sigma_feat = 0.0) {
        WarpSpec w;
        w.kind = WarpKind::translation;
        w.offset = {dx, dy};
        w.sigma_feat = sigma_feat;
        return w;
    }

    // rotation about a center, angle in radians
    static WarpSpec rotation(double angle, Point center, double sigma_feat = 0.0) {
        WarpSpec w;
        w.kind = WarpKind::rotation;
        double c = std::cos(angle), s = std::sin(angle);
        w.linear = {c, -s, s, c};
        w.offset = {center.first - (c * center.first - s * center.second),
                    center.second - (s * center.first + c * center.second)};
        w.sigma_feat = sigma_feat;
        return w;
    }

    static WarpSpec scaling(double factor, Point center, double sigma_feat = 0.0) {
        WarpSpec w;
        w.kind = WarpKind::scale;
        w.linear = {factor, 0, 0, factor};
        w.offset = {center.first * (1.0 - factor), center.second * (1.0 - factor)};
        w.sigma_feat = sigma_feat;
        return w;
    }

    static WarpSpec affine(std::array<double, 4> linear, std::array<double, 2> offset,
                           double sigma_feat = 0.0) {
        WarpSpec w;
        w.kind = WarpKind::affine;
        w.linear = linear;
        w.offset = offset;
        w.sigma_feat = sigma_feat;
        return w;
    }

    double det() const { return linear[0] * linear[3] - linear[1] * linear[2]; }

    void validate() const {
        if (std::abs(det()) <= 1e-6) throw TensorError("WarpSpec: warp is not invertible");
        if (sigma_feat < 0.0) throw TensorError("WarpSpec: negative noise level");
    }

    Point apply(Point s) const {
        return {linear[0] * s.first + linear[1] * s.second + offset[0],
                linear[2] * s.first + linear[3] * s.second + offset[1]};
    }

    Point apply_inverse(Point t) const {
        double d = det();
        double x = t.first - offset[0], y = t.second - offset[1];
        return {(linear[3] * x - linear[1] * y) / d, (-linear[2] * x + linear[0] * y) / d};
    }
};

// --- synthetic generation ---------------------------------------------------

namespace detail {

// 3x3 box blur per channel with clamped borders; makes correlation
// argmaxes informative on white-noise features.
inline Tensor box_blur_3x3(const Tensor& f) {
    std::size_t H = f.dim(0), W = f.dim(1), D = f.dim(2);
    Tensor out = Tensor::zeros({H, W, D});
    const auto& x = f.data();
    auto& y = out.data();
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
            for (std::size_t d = 0; d < D; ++d) {
                double s = 0.0;
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        std::size_t ii = (std::size_t)std::clamp((long)i + di, 0L, (long)H - 1);
                        std::size_t jj = (std::size_t)std::clamp((long)j + dj, 0L, (long)W - 1);
                        s += x[(ii * W + jj) * D + d];
                    }
                y[(i * W + j) * D + d] = s / 9.0;
            }
    return out;
}

inline double bilinear_sample(const Tensor& f, double x, double y, std::size_t d) {
    std::size_t H = f.dim(0), W = f.dim(1), D = f.dim(2);
    x = std::clamp(x, 0.0, (double)W - 1);
    y = std::clamp(y, 0.0, (double)H - 1);
    std::size_t j0 = (std::size_t)std::floor(x), i0 = (std::size_t)std::floor(y);
    std::size_t j1 = std::min(j0 + 1, W - 1), i1 = std::min(i0 + 1, H - 1);
    double wx = x - (double)j0, wy = y - (double)i0;
    const auto& v = f.data();
    double a = v[(i0 * W + j0) * D + d], b = v[(i0 * W + j1) * D + d];
    double c = v[(i1 * W + j0) * D + d], e = v[(i1 * W + j1) * D + d];
    return (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * e);
}

}  // namespace detail

struct SyntheticPair {
    FeatureStack source;
    FeatureStack target;
    KeypointPairSet keypoints;
};

inline constexpr double kPixelsPerCell = 16.0;  // image pixels per correlation grid cell

// Deterministic synthetic correspondence pair: smoothed seeded noise
// features, a warp-resampled target with optional feature noise, and
// keypoints mapped through the exact warp. Keypoints are stored in pixel
// coordinates of a (W*16, H*16) image.
inline SyntheticPair synth_pair(std::uint64_t seed, std::pair<std::size_t, std::size_t> grid,
                                std::size_t depth, std::size_t layers, const WarpSpec& warp,
                                std::size_t n_keypoints) {
    warp.validate();
    if (n_keypoints == 0) throw TensorError("synth_pair: need at least one keypoint");
    std::size_t H = grid.first, W = grid.second;
    Rng rng(seed);
    SyntheticPair out;
    for (std::size_t l = 0; l < layers; ++l) {
        FeatureMap src;
        src.layer_id = (int)l + 1;
        src.values = detail::box_blur_3x3(rng.normal_tensor({H, W, depth}));
        src.source_size = {(int)((double)W * kPixelsPerCell), (int)((double)H * kPixelsPerCell)};
        FeatureMap tgt = src;
        tgt.values = Tensor::zeros({H, W, depth});
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                Point s = warp.apply_inverse({(double)j, (double)i});
                for (std::size_t d = 0; d < depth; ++d)
                    tgt.values.data()[(i * W + j) * depth + d] =
                        detail::bilinear_sample(src.values, s.first, s.second, d);
            }
        if (warp.sigma_feat > 0.0)
            for (auto& v : tgt.values.data()) v += rng.normal() * warp.sigma_feat;
        out.source.push_back(std::move(src));
        out.target.push_back(std::move(tgt));
    }

    std::pair<double, double> img_size{(double)W * kPixelsPerCell, (double)H * kPixelsPerCell};
    KeypointPairSet& kp = out.keypoints;
    kp.pair_id = "synth-" + std::to_string(seed);
    kp.category = "synthetic";
    kp.src_img_size = img_size;
    kp.tgt_img_size = img_size;
    kp.src_bbox = {0, 0, img_size.first, img_size.second};
    kp.tgt_bbox = {0, 0, img_size.first, img_size.second};
    std::size_t attempts = 0, max_attempts = 200 * n_keypoints;
    while (kp.src_kps.size() < n_keypoints && attempts < max_attempts) {
        ++attempts;
        Point s{rng.uniform(0.0, (double)W - 1), rng.uniform(0.0, (double)H - 1)};
        Point t = warp.apply(s);
        if (t.first < 0 || t.first > (double)W - 1 || t.second < 0 || t.second > (double)H - 1)
            continue;
        kp.src_kps.push_back(grid_to_pixel(s, img_size, grid));
        kp.tgt_kps.push_back(grid_to_pixel(t, img_size, grid));
    }
    if (kp.src_kps.empty())
        throw TensorError("synth_pair: warp maps all keypoints outside target bounds");
    if (kp.src_kps.size() < n_keypoints)
        throw TensorError("synth_pair: could not place " + std::to_string(n_keypoints) +
                          " keypoints inside target bounds");
    return out;
}

// --- feature provider -------------------------------------------------------

struct EncoderConfig {
    std::vector<std::size_t> widths;  // hidden widths; last entry is the output depth
};

struct FeatureProviderConfig {
    enum class Kind { file, synthetic, encoder } kind = Kind::synthetic;
    // file
    std::vector<std::filesystem::path> layer_files;
    // synthetic
    std::uint64_t seed = 0;
    std::pair<std::size_t, std::size_t> grid{8, 8};
    std::size_t depth = 8;
    std::size_t layers = 2;
    WarpSpec warp;
    std::size_t n_keypoints = 8;
    // encoder (applied on top of synthetic/file features)
    EncoderConfig encoder;
};

struct EncoderParams {
    std::vector<Tensor> weights;  // (D_prev, D_next)
    std::vector<Tensor> biases;   // (D_next)
};

inline EncoderParams init_encoder(std::size_t input_depth, const EncoderConfig& cfg, Rng& rng) {
    if (cfg.widths.empty()) throw TensorError("init_encoder: empty width list");
    EncoderParams p;
    std::size_t prev = input_depth;
    for (std::size_t w : cfg.widths) {
        if (w == 0) throw TensorError("init_encoder: zero width");
        p.weights.push_back(rng.normal_tensor({prev, w}, 1.0 / std::sqrt((double)prev), true));
        p.biases.push_back(Tensor::zeros({w}, true));
        prev = w;
    }
    return p;
}

template <typename Fn>
inline void visit_encoder_params(EncoderParams& p, Fn&& fn) {
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
        fn("encoder.w" + std::to_string(i), p.weights[i]);
        fn("encoder.b" + std::to_string(i), p.biases[i]);
    }
}

// Per-position MLP over the channel depth; participates in the autodiff
// tape so the encoder trains end to end.
inline FeatureMap encoder_forward(const FeatureMap& input, const EncoderParams& params) {
    if (params.weights.empty()) throw TensorError("encoder_forward: uninitialized encoder");
    std::size_t H = input.height(), W = input.width(), D = input.depth();
    if (params.weights[0].dim(0) != D)
        throw TensorError("encoder_forward: input depth " + std::to_string(D) +
                          " does not match encoder weight " +
                          shape_str(params.weights[0].shape()));
    Tensor x = reshape(input.values, {H * W, D});
    for (std::size_t i = 0; i < params.weights.size(); ++i) {
        x = add(matmul(x, params.weights[i]), params.biases[i]);
        if (i + 1 < params.weights.size()) x = relu(x);
    }
    FeatureMap out;
    out.layer_id = input.layer_id;
    out.source_size = input.source_size;
    out.values = reshape(x, {H, W, x.dim(1)});
    return out;
}

inline FeatureStack encoder_forward_stack(const FeatureStack& stack,
                                          const EncoderParams& params) {
    FeatureStack out;
    out.reserve(stack.size());
    for (const auto& f : stack) out.push_back(encoder_forward(f, params));
    return out;
}

// --- feature stack files ----------------------------------------------------

// A feature stack on disk is one tensor file per layer plus a JSON
// manifest listing the layer files and grid sizes.
inline void save_feature_stack(const std::filesystem::path& dir, const std::string& stem,
                               const FeatureStack& stack) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["layers"] = nlohmann::json::array();
    for (const auto& f : stack) {
        std::string file = stem + "_layer" + std::to_string(f.layer_id) + ".tfmf";
        io::save_tensor_file(dir / file, f.values);
        manifest["layers"].push_back({{"layer_id", f.layer_id},
                                      {"file", file},
                                      {"grid", {f.height(), f.width()}},
                                      {"source_size", {f.source_size.first, f.source_size.second}}});
    }
    io::write_text_file(dir / (stem + "_manifest.json"), manifest.dump(2) + "\n");
}

inline FeatureStack load_feature_stack(const std::filesystem::path& manifest_path) {
    nlohmann::json manifest = nlohmann::json::parse(io::read_text_file(manifest_path));
    FeatureStack out;
    for (const auto& e : manifest.at("layers")) {
        FeatureMap f;
        f.layer_id = e.at("layer_id").get<int>();
        f.values = io::load_tensor_file(manifest_path.parent_path() /
                                        e.at("file").get<std::string>());
        f.source_size = {e.at("source_size").at(0).get<int>(),
                         e.at("source_size").at(1).get<int>()};
        if (f.values.rank() != 3) throw io::IoError("feature layer file must be rank 3");
        out.push_back(std::move(f));
    }
    return out;
}

}  // namespace tfm
