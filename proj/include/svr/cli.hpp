#pragma once

// Command-line front end. `run_cli` is the whole program so the same code
// path can be driven in-process.
//
// Exit codes: 0 success, 1 usage or invalid input, 2 ingestion, 3 numeric.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "svr/gradcheck_suite.hpp"
#include "svr/metrics.hpp"
#include "svr/pipeline.hpp"

namespace svr {

namespace cli_detail {

namespace fs = std::filesystem;

inline void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// Relative ids (no extension) of every PNG under `dir`, sorted.
inline std::vector<std::string> png_ids(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IngestionError("missing directory: " + dir.string());
    std::vector<std::string> ids;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") {
            auto rel = fs::relative(e.path(), dir);
            rel.replace_extension();
            ids.push_back(rel.generic_string());
        }
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline fs::path require_file(const fs::path& p, const std::string& what) {
    if (!fs::is_regular_file(p)) throw IngestionError("missing " + what + ": " + p.string());
    return p;
}

struct Loaded {
    std::vector<StereoClip> clips;
    std::vector<ClipInputs> inputs;
};

inline Loaded load_clips(const RunConfig& cfg, std::ostream& err, Windowing mode = Windowing::sliding) {
    Loaded l;
    if (cfg.synthetic) {
        auto s = make_synthetic_clip();
        l.clips.push_back(std::move(s.clip));
        l.inputs.push_back(std::move(s.inputs));
        return l;
    }
    if (cfg.root.empty()) throw UsageError("config: data.root is required unless data.synthetic = true");
    std::vector<std::string> warnings;
    l.clips = load_dataset(cfg.root, cfg, &warnings, mode);
    for (const auto& w : warnings) err << "warning: " << w << '\n';
    for (const auto& c : l.clips) l.inputs.push_back(load_clip_inputs(cfg.root, cfg, c));
    if (l.clips.empty()) throw IngestionError("no clips found under " + cfg.root);
    return l;
}

// ---------------------------------------------------------------------------

inline int fuse_saliency(const std::string& sal_dir, const std::string& box_dir, const std::string& disp_dir,
                         const std::string& out_dir, double min_conf, std::ostream& out) {
    const FuseParams params{min_conf};
    std::size_t n = 0;
    for (const auto& id : png_ids(sal_dir)) {
        SaliencyMap s{load_gray((fs::path(sal_dir) / (id + ".png")).string()), id};
        const auto boxes = load_boxes(require_file(fs::path(box_dir) / (id + ".json"), "boxes").string());
        const auto disp = load_disparity(require_file(fs::path(disp_dir) / (id + ".png"), "disparity").string());
        const auto mask = fuse(s, disp, boxes, params);
        const auto dst = fs::path(out_dir) / (id + ".png");
        ensure_parent(dst);
        save_gray(dst.string(), mask.values);
        ++n;
    }
    out << "fused " << n << " masks into " << out_dir << '\n';
    return 0;
}

inline int retarget(RunConfig cfg, const std::string& weights, const std::string& out_dir, std::ostream& out,
                    std::ostream& err) {
    cfg.validate();
    const auto data = load_clips(cfg, err, Windowing::per_frame);
    std::unique_ptr<RetargetModel<float>> model;
    FeatureExtractor<float> fx(cfg.seed + 100);  // losses are computed but unused here
    if (!weights.empty()) {
        model = std::make_unique<RetargetModel<float>>(cfg, data.clips[0].height(), data.clips[0].width(), cfg.seed);
        model->load(weights);
        model->pam.training = false;
    }
    const fs::path o(out_dir);
    for (std::size_t i = 0; i < data.clips.size(); ++i) {
        const auto& clip = data.clips[i];
        const auto rt = retarget_clip(clip, data.inputs[i], cfg);
        const auto& id = clip.center_id();
        for (auto [view, v] : {std::pair{"left", &rt.left}, std::pair{"right", &rt.right}}) {
            const auto img = o / view / (id + ".png");
            ensure_parent(img);
            save_rgb(img.string(), v->frame);
            const auto map = o / "mappings" / (id + "_" + view + ".txt");
            ensure_parent(map);
            save_mapping(map.string(), v->mapping);
            save_shift_map((o / "mappings" / (id + "_" + view + "_shift.txt")).string(), v->shift);
        }
        if (model) {
            if (clip.height() != data.clips[0].height() || clip.width() != data.clips[0].width())
                throw DimensionError("retarget: all clips must share extents when weights are given");
            Tape<float> tape;
            const auto pass = forward_losses(tape, *model, fx, clip, rt, cfg);
            for (auto [view, v] : {std::pair{"left", pass.recon_left}, std::pair{"right", pass.recon_right}}) {
                const auto img = o / "recon" / view / (id + ".png");
                ensure_parent(img);
                save_rgb(img.string(), v.value());
            }
        }
    }
    out << "retargeted " << data.clips.size() << " frame pairs to width "
        << target_width_for(data.clips[0].width(), cfg.shift.target_ratio) << " into " << out_dir << '\n';
    return 0;
}

inline int train(RunConfig cfg, std::ostream& out, std::ostream& err) {
    cfg.validate();
    auto data = load_clips(cfg, err);
    TrainingRun run(std::move(data.clips), data.inputs, cfg);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const auto& r = run.step();
        if (it % 20 == 0 || it + 1 == cfg.iterations) out << "iter " << it << " total " << r.total << '\n';
    }
    const fs::path w(cfg.weights), csv = fs::path(cfg.output) / "loss.csv";
    ensure_parent(w);
    ensure_parent(csv);
    run.model->save(w.string());
    run.write_csv(csv.string());
    out << "wrote " << w.string() << " and " << csv.string() << '\n';
    return 0;
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

inline int evaluate(const std::string& source, const std::string& retargeted, const std::string& mappings,
                    const std::string& metrics, const std::string& report_path, const BdsParams& bds_params,
                    const std::string& extractor_path, std::ostream& out) {
    bool want_bds = false, want_feat = false, want_ddr = false;
    for (const auto& m : split_list(metrics)) {
        if (m == "bds") want_bds = true;
        else if (m == "featdist") want_feat = true;
        else if (m == "ddr") want_ddr = true;
        else throw UsageError("unknown metric '" + m + "' (expected bds, featdist, ddr)");
    }
    if (want_ddr && mappings.empty()) throw UsageError("--metrics ddr needs --mappings");
    const fs::path src(source), ret(retargeted), maps(mappings);
    const auto ids = png_ids(ret / "left");
    if (ids.empty()) throw IngestionError("no retargeted frames under " + (ret / "left").string());

    std::vector<Tensor> src_frames, ret_frames;
    std::vector<DisparityMap> disp;
    std::vector<ColumnMapping> map_l, map_r;
    for (const auto& id : ids)
        for (const char* view : {"left", "right"}) {
            src_frames.push_back(load_rgb(require_file(src / view / (id + ".png"), "source frame").string()));
            ret_frames.push_back(load_rgb(require_file(ret / view / (id + ".png"), "retargeted frame").string()));
        }
    if (want_ddr)
        for (const auto& id : ids) {
            disp.push_back(load_disparity(require_file(src / "disparity" / (id + ".png"), "disparity").string()));
            map_l.push_back(load_mapping(require_file(maps / (id + "_left.txt"), "mapping").string()));
            map_r.push_back(load_mapping(require_file(maps / (id + "_right.txt"), "mapping").string()));
        }

    MetricsReport rep;
    if (want_bds) {
        rep.bds_per_frame = bds_per_frame(src_frames, ret_frames, bds_params);
        rep.bds = mean_of(rep.bds_per_frame);
    }
    if (want_feat) {
        FeatureExtractor<float> fx(100);
        if (!extractor_path.empty()) fx.load(extractor_path);
        rep.feature_distance_per_frame = feature_distance_per_frame(fx, src_frames, ret_frames);
        rep.feature_distance = mean_of(rep.feature_distance_per_frame);
    }
    if (want_ddr) {
        const auto r = ddr(disp, map_l, map_r);
        rep.ddr_signed = r.signed_ratio;
        rep.ddr_abs = r.abs_ratio;
    }
    const fs::path rp(report_path);
    ensure_parent(rp);
    std::ofstream os(rp);
    if (!os) throw IngestionError("cannot write report: " + report_path);
    os << rep.to_json().dump(2) << '\n';
    out << rep.to_json().dump() << '\n';
    return 0;
}

inline int gradcheck_command(std::uint64_t seed, std::ostream& out) {
    const auto rep = run_gradcheck_suite(seed);
    for (const auto& c : rep.cases)
        out << (c.passed ? "PASS " : "FAIL ") << c.name << "  shapes " << c.shapes << "  max rel err "
            << c.worst.max_rel_error << "  skipped " << c.worst.skipped << '\n';
    out << (rep.passed() ? "all gradient checks passed" : "gradient checks FAILED") << " in " << rep.seconds
        << " s\n";
    return rep.passed() ? 0 : static_cast<int>(ExitCode::numeric);
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Saliency-aware stereo video retargeting"};
    app.require_subcommand(1);

    std::string sal_dir, box_dir, disp_dir, out_dir;
    double min_conf = FuseParams{}.min_confidence;
    auto* fuse_cmd = app.add_subcommand("fuse-saliency", "Fuse saliency, boxes and disparity into masks");
    fuse_cmd->add_option("--saliency", sal_dir, "Saliency PNG directory")->required()->check(CLI::ExistingDirectory);
    fuse_cmd->add_option("--boxes", box_dir, "Detection box JSON directory")->required()->check(CLI::ExistingDirectory);
    fuse_cmd->add_option("--disparity", disp_dir, "16-bit disparity PNG directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    fuse_cmd->add_option("--out", out_dir, "Output directory")->required();
    fuse_cmd->add_option("--min-conf", min_conf, "Minimum box confidence")->check(CLI::Range(0.0, 1.0));

    std::string config, weights;
    double ratio = 0;
    bool synthetic = false;
    auto* ret_cmd = app.add_subcommand("retarget", "Retarget every frame pair, each with a window around it");
    ret_cmd->add_option("--config", config, "INI run configuration")->required()->check(CLI::ExistingFile);
    ret_cmd->add_option("--ratio", ratio, "Target width ratio")->required()->check(CLI::PositiveNumber);
    ret_cmd->add_option("--weights", weights, "Trained weights; also writes reconstructions")
        ->check(CLI::ExistingFile);
    ret_cmd->add_option("--out", out_dir, "Output directory")->required();
    ret_cmd->add_flag("--synthetic", synthetic, "Use the built-in synthetic clip");

    std::size_t iterations = 0;
    double lr = 0;
    std::uint64_t seed = 0;
    auto* train_cmd = app.add_subcommand("train", "Train the model and write weights plus a loss curve");
    train_cmd->add_option("--config", config, "INI run configuration")->required()->check(CLI::ExistingFile);
    auto* it_opt = train_cmd->add_option("--iterations", iterations, "Training steps");
    auto* lr_opt = train_cmd->add_option("--lr", lr, "Learning rate")->check(CLI::NonNegativeNumber);
    auto* seed_opt = train_cmd->add_option("--seed", seed, "Seed");
    train_cmd->add_flag("--synthetic", synthetic, "Use the built-in synthetic clip");

    std::string source, retargeted, mappings, metrics = "bds,featdist,ddr", report, extractor;
    BdsParams bds_params;
    auto* eval_cmd = app.add_subcommand("evaluate", "Compute metrics between source and retargeted frames");
    eval_cmd->add_option("--source", source, "Directory with left/, right/ and disparity/")
        ->required()
        ->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--retargeted", retargeted, "Directory with left/ and right/")
        ->required()
        ->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--mappings", mappings, "Directory with <id>_left.txt / <id>_right.txt")
        ->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--metrics", metrics, "Comma list of bds, featdist, ddr");
    eval_cmd->add_option("--out", report, "Report JSON path")->required();
    eval_cmd->add_option("--patch", bds_params.patch, "BDS patch size")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--stride", bds_params.stride, "BDS query stride")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--extractor", extractor, "Feature extractor weights")->check(CLI::ExistingFile);

    std::uint64_t gc_seed = 0;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
    gc_cmd->add_option("--seed", gc_seed, "Seed for shapes and values");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : static_cast<int>(ExitCode::usage);
    }

    try {
        if (fuse_cmd->parsed()) return cli_detail::fuse_saliency(sal_dir, box_dir, disp_dir, out_dir, min_conf, out);
        if (gc_cmd->parsed()) return cli_detail::gradcheck_command(gc_seed, out);
        if (eval_cmd->parsed())
            return cli_detail::evaluate(source, retargeted, mappings, metrics, report, bds_params, extractor, out);
        RunConfig cfg = load_config(config);
        if (synthetic) cfg.synthetic = true;
        if (ret_cmd->parsed()) {
            cfg.shift.target_ratio = ratio;
            return cli_detail::retarget(cfg, weights, out_dir, out, err);
        }
        if (*it_opt) cfg.iterations = iterations;
        if (*lr_opt) cfg.optim.lr = lr;
        if (*seed_opt) cfg.seed = seed;
        return cli_detail::train(cfg, out, err);
    } catch (const TrainingError& e) {
        err << "error: " << e.what() << " (term " << e.term << ")\n";
        return static_cast<int>(ExitCode::numeric);
    } catch (const NumericError& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::numeric);
    } catch (const IngestionError& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::ingestion);
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::ingestion);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::usage);
    } catch (const std::logic_error& e) {  // contract and dimension errors
        err << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::usage);
    }
}

}  // namespace svr
