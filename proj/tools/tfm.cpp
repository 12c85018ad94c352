// Command-line entry points for the matching pipeline: synthetic data
// generation, toy training, matching, PCK evaluation, attention
// benchmarking and nonlocality analysis.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "tfm/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalOpts {
    std::string config_path;
    std::string preset = "desk";
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir = "out";
};

tfm::RunConfig resolve_config(const GlobalOpts& g) {
    tfm::RunConfig cfg = tfm::preset_config(g.preset);
    if (!g.config_path.empty()) {
        json j = json::parse(tfm::io::read_text_file(g.config_path));
        cfg = tfm::run_config_from_json(j);
    }
    if (g.seed_set) {
        cfg.optim.seed = g.seed;
        cfg.provider.seed = g.seed;
    }
    cfg.out_dir = g.out_dir;
    cfg.validate();
    return cfg;
}

void add_globals(CLI::App* cmd, GlobalOpts& g) {
    cmd->add_option("--config", g.config_path, "run configuration JSON file");
    cmd->add_option("--preset", g.preset, "named preset: desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--seed", g.seed, "seed override")->each([&](const std::string&) {
        g.seed_set = true;
    });
    cmd->add_option("--out-dir", g.out_dir, "output directory");
}

int cmd_gen_synth(const GlobalOpts& g, std::size_t n_pairs) {
    tfm::RunConfig cfg = resolve_config(g);
    fs::path out = cfg.out_dir;
    fs::create_directories(out);
    std::vector<tfm::KeypointPairSet> anns;
    for (std::size_t i = 0; i < n_pairs; ++i) {
        tfm::SyntheticPair sp = tfm::provider_pair(cfg.provider, cfg.translation_jitter, i);
        std::string stem = "pair" + std::to_string(i);
        tfm::save_feature_stack(out, stem + "_src", sp.source);
        tfm::save_feature_stack(out, stem + "_tgt", sp.target);
        sp.keypoints.pair_id = stem;
        anns.push_back(sp.keypoints);
    }
    tfm::save_annotations(out / "annotations.json", anns);
    std::cout << "wrote " << n_pairs << " pairs to " << out.string() << "\n";
    return 0;
}

int cmd_train(const GlobalOpts& g) {
    tfm::RunConfig cfg = resolve_config(g);
    tfm::Rng rng(cfg.optim.seed);
    tfm::ModelState st = tfm::init_state(cfg, rng);
    tfm::RunRecord rec = tfm::train(cfg, st, cfg.out_dir);
    std::cout << "steps=" << rec.loss_curve.size() << " final_loss=" << rec.final_loss
              << " checkpoint=" << rec.checkpoint_path << "\n";
    return 0;
}

int cmd_match(const GlobalOpts& g, const std::string& ckpt, const std::string& src_manifest,
              const std::string& tgt_manifest, const std::string& annotations,
              const std::string& pair_id) {
    tfm::RunConfig cfg = resolve_config(g);
    tfm::ModelState st = tfm::load_state(ckpt, cfg);
    tfm::FeatureStack src = tfm::load_feature_stack(src_manifest);
    tfm::FeatureStack tgt = tfm::load_feature_stack(tgt_manifest);
    tfm::NoGrad ng;
    tfm::MatchResult res = tfm::match_features(src, tgt, st, cfg);
    fs::path out = cfg.out_dir;
    fs::create_directories(out);
    tfm::io::save_tensor_file(out / "flow.tfmf", res.flow.predicted);
    if (!annotations.empty()) {
        auto anns = tfm::load_annotations(annotations);
        json preds = json::array();
        for (const auto& a : anns) {
            if (!pair_id.empty() && a.pair_id != pair_id) continue;
            std::vector<tfm::Point> p = tfm::predict_keypoints(res, a, cfg);
            json kps = json::array();
            for (const auto& k : p) kps.push_back({k.first, k.second});
            preds.push_back({{"pair_id", a.pair_id}, {"keypoints", kps}});
        }
        tfm::io::write_text_file(out / "predictions.json", preds.dump(2) + "\n");
    }
    std::cout << "wrote flow field to " << (out / "flow.tfmf").string() << "\n";
    return 0;
}

int cmd_eval(const GlobalOpts& g, const std::string& predictions, const std::string& annotations,
             const std::string& mode_str, double alpha, const std::string& scheme_str) {
    tfm::RunConfig cfg = resolve_config(g);
    tfm::ThresholdMode mode = tfm::threshold_mode_from_string(mode_str);
    tfm::AggScheme scheme = scheme_str == "per_pair_mean" ? tfm::AggScheme::per_pair_mean
                                                          : tfm::AggScheme::per_keypoint_pool;
    auto anns = tfm::load_annotations(annotations);
    std::map<std::string, const tfm::KeypointPairSet*> by_id;
    for (const auto& a : anns) by_id[a.pair_id] = &a;
    json preds = json::parse(tfm::io::read_text_file(predictions));
    std::vector<tfm::PairEvalRecord> records;
    std::vector<std::string> unmatched;
    for (const auto& p : preds) {
        std::string id = p.at("pair_id").get<std::string>();
        auto it = by_id.find(id);
        if (it == by_id.end()) {
            unmatched.push_back(id);
            continue;
        }
        const tfm::KeypointPairSet& a = *it->second;
        std::vector<tfm::Point> pred;
        for (const auto& k : p.at("keypoints"))
            pred.push_back({k.at(0).get<double>(), k.at(1).get<double>()});
        if (pred.size() != a.tgt_kps.size()) {
            unmatched.push_back(id + " (keypoint count mismatch)");
            continue;
        }
        auto ref = tfm::resolve_reference_size(
            mode, a.tgt_img_size,
            tfm::BBox{a.tgt_bbox[0], a.tgt_bbox[1], a.tgt_bbox[2], a.tgt_bbox[3]}, a.tgt_kps);
        double thr = alpha * std::max(ref.first, ref.second);
        tfm::PairEvalRecord rec;
        rec.category = a.category;
        rec.threshold_pixels = thr;
        for (std::size_t m = 0; m < pred.size(); ++m) {
            double dx = pred[m].first - a.tgt_kps[m].first;
            double dy = pred[m].second - a.tgt_kps[m].second;
            rec.correct.push_back(std::sqrt(dx * dx + dy * dy) <= thr);
        }
        rec.pair_pck = (double)std::count(rec.correct.begin(), rec.correct.end(), true) /
                       (double)rec.correct.size();
        records.push_back(std::move(rec));
    }
    if (!unmatched.empty()) {
        std::cerr << "error: predictions without matching annotation ids:\n";
        for (const auto& u : unmatched) std::cerr << "  " << u << "\n";
        return 2;
    }
    tfm::EvalReport rep = tfm::aggregate(records, scheme);
    fs::path out = cfg.out_dir;
    fs::create_directories(out);
    tfm::io::write_text_file(out / "pck_report.csv", tfm::report_csv(rep));
    tfm::io::write_text_file(out / "pck_report.json", tfm::report_json(rep).dump(2) + "\n");
    std::cout << "all," << rep.all().n_pairs << "," << rep.all().n_keypoints << ","
              << rep.all().pck << "\n";
    return 0;
}

int cmd_bench(const GlobalOpts& g, std::vector<std::size_t> t_values, std::size_t head_dim,
              std::size_t trials) {
    tfm::RunConfig cfg = resolve_config(g);
    tfm::BenchResult res = tfm::bench_attention(t_values, head_dim, trials);
    fs::path out = cfg.out_dir;
    fs::create_directories(out);
    tfm::io::write_text_file(out / "bench_attn.csv", tfm::bench_csv(res));
    std::cout << tfm::bench_csv(res);
    return 0;
}

int cmd_nonlocality(const GlobalOpts& g, const std::string& ckpt, std::size_t n_pairs,
                    std::size_t n_bins) {
    tfm::RunConfig cfg = resolve_config(g);
    tfm::ModelState st = tfm::load_state(ckpt, cfg);
    fs::path out = cfg.out_dir;
    fs::create_directories(out);

    std::ostringstream phi_csv;
    phi_csv << "pair,layer,phi\n";
    std::vector<tfm::DifficultySample> samples;
    std::vector<double> magnitudes;
    std::vector<double> totals;
    for (std::size_t i = 0; i < n_pairs; ++i) {
        tfm::SyntheticPair sp = tfm::provider_pair(cfg.provider, cfg.translation_jitter, i);
        tfm::NoGrad ng;
        tfm::FeatureStack src = sp.source, tgt = sp.target;
        if (st.encoder) {
            src = tfm::encoder_forward_stack(src, *st.encoder);
            tgt = tfm::encoder_forward_stack(tgt, *st.encoder);
        }
        std::vector<tfm::Correlation4D> corrs;
        for (std::size_t l = 0; l < src.size(); ++l)
            corrs.push_back(tfm::cosine_correlation(src[l], tgt[l]));
        tfm::MultiChannelCorrelation mc = tfm::assemble_multichannel(corrs, cfg.grid);
        tfm::NonlocalityReport rep = tfm::analyze_nonlocality(mc, st, cfg);
        for (std::size_t l = 0; l < rep.per_layer.size(); ++l)
            phi_csv << i << "," << l << "," << rep.per_layer[l] << "\n";
        totals.push_back(rep.total);
        tfm::WarpSpec w = tfm::provider_warp(cfg.provider, cfg.translation_jitter, i);
        magnitudes.push_back(std::hypot(w.offset[0], w.offset[1]));
    }
    // difficulty labels from warp magnitude terciles
    std::vector<double> sorted_mag = magnitudes;
    std::sort(sorted_mag.begin(), sorted_mag.end());
    double q33 = sorted_mag[sorted_mag.size() / 3];
    double q66 = sorted_mag[(2 * sorted_mag.size()) / 3];
    for (std::size_t i = 0; i < totals.size(); ++i) {
        tfm::DifficultySample s;
        s.phi = totals[i];
        std::string level = magnitudes[i] <= q33 ? "easy"
                            : magnitudes[i] <= q66 ? "medium"
                                                   : "hard";
        s.labels["warp"] = level;
        samples.push_back(std::move(s));
    }
    auto bins = tfm::difficulty_binning(samples, n_bins);
    std::ostringstream bin_csv;
    bin_csv << "bin,count,type,level,proportion\n";
    for (std::size_t b = 0; b < bins.size(); ++b)
        for (const auto& [type, levels] : bins[b].proportions)
            for (const auto& [level, prop] : levels)
                bin_csv << b << "," << bins[b].count << "," << type << "," << level << ","
                        << prop << "\n";
    std::ostringstream conv_csv;
    conv_csv << "kind,K,d,phi\n";
    for (std::size_t K : {3, 5, 7, 9, 11})
        for (std::size_t d : {2, 4, 6})
            conv_csv << "conv," << K << "," << d << ","
                     << tfm::nonlocality_conv({K, d}) << "\n";
    tfm::io::write_text_file(out / "nonlocality_phi.csv", phi_csv.str());
    tfm::io::write_text_file(out / "nonlocality_bins.csv", bin_csv.str());
    tfm::io::write_text_file(out / "nonlocality_conv.csv", conv_csv.str());
    std::cout << "wrote nonlocality reports to " << out.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"semantic matching with match-to-match attention"};
    app.require_subcommand(1);

    GlobalOpts g;

    auto* gen = app.add_subcommand("gen-synth", "generate a synthetic dataset");
    std::size_t gen_pairs = 8;
    add_globals(gen, g);
    gen->add_option("--pairs", gen_pairs, "number of pairs");

    auto* train = app.add_subcommand("train", "train on synthetic pairs");
    add_globals(train, g);

    auto* match = app.add_subcommand("match", "match a feature-stack pair");
    std::string ckpt, src_m, tgt_m, anns, pair_id;
    add_globals(match, g);
    match->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
    match->add_option("--source", src_m, "source feature manifest")->required();
    match->add_option("--target", tgt_m, "target feature manifest")->required();
    match->add_option("--keypoints", anns, "annotation JSON for keypoint transfer");
    match->add_option("--pair-id", pair_id, "restrict transfer to one pair id");

    auto* eval = app.add_subcommand("eval", "PCK evaluation of predictions");
    std::string preds, eval_anns, mode = "img", scheme = "per_keypoint_pool";
    double alpha = 0.1;
    add_globals(eval, g);
    eval->add_option("--predictions", preds, "predictions JSON")->required();
    eval->add_option("--annotations", eval_anns, "annotation JSON")->required();
    eval->add_option("--mode", mode, "threshold mode: img, bbox, bbox_kp");
    eval->add_option("--alpha", alpha, "tolerance factor");
    eval->add_option("--scheme", scheme, "per_keypoint_pool or per_pair_mean");

    auto* bench = app.add_subcommand("bench-attn", "attention scaling benchmark");
    std::vector<std::size_t> t_values{1024, 2048, 4096, 8192};
    std::size_t head_dim = 4, trials = 20;
    add_globals(bench, g);
    bench->add_option("--t", t_values, "sequence lengths, ascending");
    bench->add_option("--head-dim", head_dim, "head dimension");
    bench->add_option("--trials", trials, "timing trials per point");

    auto* nl = app.add_subcommand("nonlocality", "nonlocality analysis");
    std::string nl_ckpt;
    std::size_t nl_pairs = 12, nl_bins = 4;
    add_globals(nl, g);
    nl->add_option("--checkpoint", nl_ckpt, "checkpoint directory")->required();
    nl->add_option("--pairs", nl_pairs, "number of synthetic pairs");
    nl->add_option("--n-bins", nl_bins, "difficulty bins");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_synth(g, gen_pairs);
        if (train->parsed()) return cmd_train(g);
        if (match->parsed()) return cmd_match(g, ckpt, src_m, tgt_m, anns, pair_id);
        if (eval->parsed()) return cmd_eval(g, preds, eval_anns, mode, alpha, scheme);
        if (bench->parsed()) return cmd_bench(g, t_values, head_dim, trials);
        if (nl->parsed()) return cmd_nonlocality(g, nl_ckpt, nl_pairs, nl_bins);
    } catch (const std::exception& e) {
        nlohmann::json err{{"error", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 1;
}
