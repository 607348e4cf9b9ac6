#include "mitodet/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mitodet/augment.hpp"
#include "mitodet/classifier.hpp"
#include "mitodet/config.hpp"
#include "mitodet/dataset.hpp"
#include "mitodet/eval.hpp"
#include "mitodet/image_io.hpp"
#include "mitodet/pipeline.hpp"
#include "mitodet/proposer.hpp"
#include "mitodet/tiling.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mitodet::cli {

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::int64_t seed = -1;  // -1: use config value
    std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "config file (key = value lines)");
    cmd->add_option("--set", args.overrides, "override a config key (key=value)")
        ->take_all();
    cmd->add_option("--seed", args.seed, "seed for every RNG stream");
    cmd->add_option("--out", args.out, "output directory");
}

Config resolve_config(const CommonArgs& args) {
    Config cfg;
    if (!args.config_path.empty()) cfg.load_file(args.config_path);
    for (const auto& kv : args.overrides) cfg.set_kv(kv);
    if (args.seed >= 0) cfg.set("seed", std::to_string(args.seed));
    return cfg;
}

void write_run_json(const std::string& out_dir, const std::string& command,
                    const std::vector<std::string>& argv, const Config& cfg) {
    if (out_dir.empty()) return;
    fs::create_directories(out_dir);
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["seed"] = cfg.get_int("seed");
    j["config"] = json::object();
    for (const auto& [k, v] : cfg.values()) j["config"][k] = v;
    std::ofstream f(fs::path(out_dir) / "run.json");
    f << j.dump(2) << "\n";
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write '" + path + "'");
    f << text;
}

// Ground-truth CSV without image-bound validation (evaluate has no images).
std::map<std::string, std::vector<Annotation>> read_gt_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::map<std::string, std::vector<Annotation>> out;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        if (header) {
            header = false;
            continue;
        }
        std::stringstream ss(line);
        std::string f0, f1, f2, f3;
        std::getline(ss, f0, ',');
        std::getline(ss, f1, ',');
        std::getline(ss, f2, ',');
        std::getline(ss, f3, ',');
        out[f0].push_back({f0, std::stod(f1), std::stod(f2), std::stoi(f3)});
    }
    return out;
}

std::vector<aug::DetSample> load_det_samples(const io::DatasetManifest& manifest,
                                             io::Split split, const Config& cfg,
                                             std::vector<std::string>* ids = nullptr) {
    const auto patch_size = cfg.get_int("tile.patch_size");
    const auto overlap = cfg.get_double("tile.overlap");
    const auto box_size = cfg.get_double("tile.annotation_box_size");
    std::vector<aug::DetSample> samples;
    for (const auto& id : manifest.image_ids(split)) {
        const auto* info = manifest.find_image(id);
        auto image = io::read_image(info->path);
        auto grid = tile::make_grid(info->width, info->height, patch_size, overlap);
        auto per_patch = tile::crop_annotations(grid, manifest.annotations_for(id),
                                                box_size);
        for (const auto& patch : grid.patches) {
            aug::DetSample s;
            s.image = io::crop_region(image, patch.origin_x, patch.origin_y,
                                      patch.size, patch.size);
            const auto it = per_patch.find(patch.id);
            if (it != per_patch.end()) {
                for (const auto& pa : it->second) s.boxes.push_back(pa.box);
            }
            samples.push_back(std::move(s));
            if (ids) ids->push_back(id + "_" + patch.id);
        }
    }
    return samples;
}

pipe::ProposeFn make_propose_fn(nn::ProposerModel model) {
    return [model](const torch::Tensor& patch) mutable {
        return nn::propose(model, patch);
    };
}

pipe::ClassifyFn make_classify_fn(nn::ConvNeXtClassifier model) {
    return [model](const torch::Tensor& crops) mutable {
        return nn::classify(model, crops);
    };
}

int cmd_synth(const CommonArgs& common, const std::vector<std::string>& argv) {
    auto cfg = resolve_config(common);
    if (common.out.empty()) throw CLI::ValidationError("synth", "--out is required");
    io::SyntheticSpec spec;
    spec.n_images = cfg.get_int("synth.n_images");
    spec.size = cfg.get_int("synth.size");
    spec.blobs_per_image = cfg.get_int("synth.blobs");
    spec.distractors_per_image = cfg.get_int("synth.distractors");
    spec.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
    auto data = io::generate_synthetic(spec);
    for (const auto& w : data.warnings) std::cerr << "warning: " << w << "\n";
    auto manifest = io::write_synthetic(data, common.out);
    io::assign_splits(manifest, spec.seed, cfg.get_double("split.train"),
                      cfg.get_double("split.val"), cfg.get_double("split.test"));
    io::save_manifest(manifest, (fs::path(common.out) / "manifest.json").string());
    write_run_json(common.out, "synth", argv, cfg);
    std::cout << "wrote " << data.images.size() << " images, "
              << data.annotations.size() << " annotations to " << common.out << "\n";
    return 0;
}

int cmd_tile(const CommonArgs& common, const std::string& manifest_path,
             const std::vector<std::string>& argv) {
    auto cfg = resolve_config(common);
    if (common.out.empty()) throw CLI::ValidationError("tile", "--out is required");
    auto manifest = io::load_manifest_json(manifest_path);
    const auto patch_size = cfg.get_int("tile.patch_size");
    const auto overlap = cfg.get_double("tile.overlap");
    const auto box_size = cfg.get_double("tile.annotation_box_size");
    fs::create_directories(fs::path(common.out) / "patches");
    std::vector<Annotation> patch_anns;
    std::int64_t n_patches = 0;
    for (const auto& info : manifest.images) {
        auto image = io::read_image(info.path);
        auto grid = tile::make_grid(info.width, info.height, patch_size, overlap);
        auto per_patch =
            tile::crop_annotations(grid, manifest.annotations_for(info.id), box_size);
        for (const auto& patch : grid.patches) {
            auto pixels = io::crop_region(image, patch.origin_x, patch.origin_y,
                                          patch.size, patch.size);
            const auto name = tile::patch_file_name(info.id, patch);
            io::write_image((fs::path(common.out) / "patches" / name).string(), pixels);
            ++n_patches;
            const auto it = per_patch.find(patch.id);
            if (it == per_patch.end()) continue;
            const auto stem = name.substr(0, name.size() - 4);
            for (const auto& pa : it->second) {
                patch_anns.push_back({stem, pa.ann.cx, pa.ann.cy, pa.ann.label});
            }
        }
    }
    io::save_annotation_csv(patch_anns,
                            (fs::path(common.out) / "annotations.csv").string());
    write_run_json(common.out, "tile", argv, cfg);
    std::cout << "wrote " << n_patches << " patches\n";
    return 0;
}

int cmd_train_proposer(const CommonArgs& common, const std::string& manifest_path,
                       const std::vector<std::string>& argv) {
    auto cfg = resolve_config(common);
    if (common.out.empty())
        throw CLI::ValidationError("train-proposer", "--out is required");
    torch::manual_seed(cfg.get_int("seed"));
    auto manifest = io::load_manifest_json(manifest_path);
    auto train = load_det_samples(manifest, io::Split::kTrain, cfg);
    auto val = load_det_samples(manifest, io::Split::kVal, cfg);

    nn::ProposerModel model(nn::ProposerConfig::from(cfg));
    auto opts = nn::ProposerTrainOptions::from(cfg);
    opts.verbose = true;
    auto history = nn::train_proposer(model, train, val, opts);

    fs::create_directories(common.out);
    nn::save_proposer(model, (fs::path(common.out) / "proposer").string());
    write_text((fs::path(common.out) / "history.csv").string(), history.to_csv());
    write_run_json(common.out, "train-proposer", argv, cfg);
    if (!history.epochs.empty()) {
        const auto& last = history.epochs.back();
        std::cout << "final val P " << last.val_p << " R " << last.val_r << " F1 "
                  << last.val_f1 << "\n";
    }
    return 0;
}

int cmd_train_classifier(const CommonArgs& common, const std::string& manifest_path,
                         const std::string& proposer_stem,
                         const std::vector<std::string>& argv) {
    auto cfg = resolve_config(common);
    if (common.out.empty())
        throw CLI::ValidationError("train-classifier", "--out is required");
    torch::manual_seed(cfg.get_int("seed"));
    auto manifest = io::load_manifest_json(manifest_path);
    auto train = load_det_samples(manifest, io::Split::kTrain, cfg);
    auto val = load_det_samples(manifest, io::Split::kVal, cfg);

    auto proposer = nn::load_proposer(proposer_stem);
    auto propose_fn = [&proposer](const torch::Tensor& patch) {
        return nn::propose(proposer, patch);
    };
    auto cls_cfg = nn::ClassifierConfig::from(cfg);
    const auto rule = eval::MatchRule::parse(cfg.get_string("eval.rule"));
    const auto seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
    auto train_set = nn::build_candidate_set(train, propose_fn, cls_cfg,
                                             rule.threshold, seed);
    auto val_set = nn::build_candidate_set(val, propose_fn, cls_cfg, rule.threshold,
                                           seed + 1);
    std::cout << "candidates: train " << train_set.samples.size() << " (gt "
              << train_set.gt_positives << ", random-neg "
              << train_set.random_negatives << "), val " << val_set.samples.size()
              << "\n";

    nn::ConvNeXtClassifier model(cls_cfg);
    auto opts = nn::ClassifierTrainOptions::from(cfg);
    opts.verbose = true;
    auto history = nn::train_classifier(model, train_set.samples, val_set.samples,
                                        nn::HybridLossParams::from(cfg), opts);

    fs::create_directories(common.out);
    nn::save_classifier(model, (fs::path(common.out) / "classifier").string());
    write_text((fs::path(common.out) / "history.csv").string(), history.to_csv());
    write_run_json(common.out, "train-classifier", argv, cfg);
    std::cout << "best val F1 " << history.best_val_f1 << " at epoch "
              << history.best_epoch << "\n";
    return 0;
}

int cmd_infer(const CommonArgs& common, const std::string& manifest_path,
              const std::string& image_path, const std::string& split_name,
              const std::string& proposer_stem, const std::string& classifier_stem,
              bool overlay, const std::vector<std::string>& argv) {
    auto cfg = resolve_config(common);
    if (common.out.empty()) throw CLI::ValidationError("infer", "--out is required");
    auto pipe_cfg = pipe::PipelineConfig::from(cfg);

    auto proposer = nn::load_proposer(proposer_stem);
    auto propose_fn = make_propose_fn(proposer);
    pipe::ClassifyFn classify_fn;  // empty = single-stage
    if (!classifier_stem.empty()) {
        classify_fn = make_classify_fn(nn::load_classifier(classifier_stem));
    }

    std::vector<std::pair<std::string, std::string>> targets;  // (id, path)
    if (!image_path.empty()) {
        targets.emplace_back(fs::path(image_path).stem().string(), image_path);
    } else {
        auto manifest = io::load_manifest_json(manifest_path);
        for (const auto& id : manifest.image_ids(io::split_from_name(split_name))) {
            targets.emplace_back(id, manifest.find_image(id)->path);
        }
    }
    if (targets.empty()) throw std::runtime_error("infer: nothing to process");

    fs::create_directories(common.out);
    for (const auto& [id, path] : targets) {
        pipe::RasterImageSource source(io::read_image(path));
        auto result = pipe::run_wsi(source, propose_fn, classify_fn, pipe_cfg);
        write_text((fs::path(common.out) / (id + ".csv")).string(),
                   pipe::detections_csv(id, result));
        if (overlay) {
            auto canvas = io::draw_detections(source.image(), result.final_dets);
            io::write_image((fs::path(common.out) / (id + "_overlay.png")).string(),
                            canvas);
        }
        std::cout << id << ": patches " << result.stats.patches << " proposals "
                  << result.stats.proposals << " survivors " << result.stats.survivors
                  << " final " << result.stats.final_count << "\n";
    }
    write_run_json(common.out, "infer", argv, cfg);
    return 0;
}

int cmd_evaluate(const CommonArgs& common, const std::vector<std::string>& det_paths,
                 const std::string& gt_path, const std::string& rule_text,
                 const std::vector<std::string>& argv) {
    auto cfg = resolve_config(common);
    if (!rule_text.empty()) cfg.set("eval.rule", rule_text);
    const auto rule = eval::MatchRule::parse(cfg.get_string("eval.rule"));
    const auto box_size = cfg.get_double("tile.annotation_box_size");

    std::map<std::string, std::vector<geom::Detection>> dets;
    for (const auto& p : det_paths) {
        std::ifstream in(p);
        if (!in) throw std::runtime_error("cannot open '" + p + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        for (auto& [id, v] : pipe::parse_detections_csv(ss.str(), "final")) {
            auto& dst = dets[id];
            dst.insert(dst.end(), v.begin(), v.end());
        }
    }
    auto gts = read_gt_csv(gt_path);
    auto report = eval::evaluate(dets, gts, rule, box_size);
    std::cout << eval::report_table(report);
    if (!common.out.empty()) {
        fs::create_directories(common.out);
        write_text((fs::path(common.out) / "report.csv").string(),
                   eval::report_csv(report));
        write_run_json(common.out, "evaluate", argv, cfg);
    }
    return 0;
}

int cmd_sweep(const CommonArgs& common, const std::string& manifest_path,
              const std::string& split_name, const std::string& proposer_stem,
              const std::string& classifier_stem, std::vector<double> confs,
              std::vector<double> cls_thrs, std::vector<double> merges,
              const std::vector<std::string>& argv) {
    auto cfg = resolve_config(common);
    if (common.out.empty()) throw CLI::ValidationError("sweep", "--out is required");
    auto pipe_cfg = pipe::PipelineConfig::from(cfg);
    if (confs.empty()) confs = {pipe_cfg.conf_threshold};
    if (cls_thrs.empty()) cls_thrs = {pipe_cfg.classifier_threshold};
    if (merges.empty()) merges = {pipe_cfg.merge_iou};
    const double min_conf = *std::min_element(confs.begin(), confs.end());

    auto proposer = nn::load_proposer(proposer_stem);
    auto propose_fn = [&proposer, min_conf](const torch::Tensor& patch) {
        return nn::propose(proposer, patch, min_conf);
    };
    pipe::ClassifyFn classify_fn;
    if (!classifier_stem.empty()) {
        classify_fn = make_classify_fn(nn::load_classifier(classifier_stem));
    }

    auto manifest = io::load_manifest_json(manifest_path);
    const auto rule = eval::MatchRule::parse(cfg.get_string("eval.rule"));
    std::map<std::tuple<double, double, double>, pipe::SweepRow> cells;
    for (const auto& id : manifest.image_ids(io::split_from_name(split_name))) {
        pipe::RasterImageSource source(io::read_image(manifest.find_image(id)->path));
        auto cache = pipe::build_sweep_cache(source, propose_fn, classify_fn, pipe_cfg,
                                             min_conf);
        if (cache.proposals.empty()) continue;
        auto rows = pipe::sweep_thresholds(cache, confs, cls_thrs, merges,
                                           manifest.annotations_for(id), rule);
        for (const auto& r : rows) {
            auto& cell = cells[{r.conf, r.cls_threshold, r.merge_iou}];
            cell.conf = r.conf;
            cell.cls_threshold = r.cls_threshold;
            cell.merge_iou = r.merge_iou;
            cell.tp += r.tp;
            cell.fp += r.fp;
            cell.fn += r.fn;
        }
    }
    std::vector<pipe::SweepRow> rows;
    for (auto& [key, cell] : cells) {
        const auto m = eval::metrics(cell.tp, cell.fp, cell.fn);
        cell.precision = m.precision;
        cell.recall = m.recall;
        cell.f1 = m.f1;
        rows.push_back(cell);
    }
    fs::create_directories(common.out);
    write_text((fs::path(common.out) / "sweep.csv").string(), pipe::sweep_csv(rows));
    write_run_json(common.out, "sweep", argv, cfg);
    std::cout << pipe::sweep_csv(rows);
    return 0;
}

int dispatch_impl(const std::vector<std::string>& args) {
    CLI::App app{"two-stage mitosis detection pipeline"};
    app.require_subcommand(1);

    CommonArgs common;

    auto* synth = app.add_subcommand("synth", "generate a synthetic blob corpus");
    add_common(synth, common);

    std::string manifest_path, image_path, split_name = "test";
    std::string proposer_stem, classifier_stem, gt_path, rule_text;
    std::vector<std::string> det_paths;
    bool overlay = false;
    std::vector<double> confs, cls_thrs, merges;

    auto* tile_cmd = app.add_subcommand("tile", "dump patches and patch annotations");
    add_common(tile_cmd, common);
    tile_cmd->add_option("--manifest", manifest_path, "dataset manifest JSON")
        ->required();

    auto* tp = app.add_subcommand("train-proposer", "train the stage-1 detector");
    add_common(tp, common);
    tp->add_option("--manifest", manifest_path, "dataset manifest JSON")->required();

    auto* tc = app.add_subcommand("train-classifier", "train the stage-2 classifier");
    add_common(tc, common);
    tc->add_option("--manifest", manifest_path, "dataset manifest JSON")->required();
    tc->add_option("--proposer", proposer_stem, "proposer checkpoint stem")->required();

    auto* infer = app.add_subcommand("infer", "run the two-stage pipeline");
    add_common(infer, common);
    infer->add_option("--manifest", manifest_path, "dataset manifest JSON");
    infer->add_option("--image", image_path, "single image instead of a manifest");
    infer->add_option("--split", split_name, "manifest split to process");
    infer->add_option("--proposer", proposer_stem, "proposer checkpoint stem")
        ->required();
    infer->add_option("--classifier", classifier_stem,
                      "classifier checkpoint stem (omit for single-stage)");
    infer->add_flag("--overlay", overlay, "write detection overlays");

    auto* ev = app.add_subcommand("evaluate", "score detection CSVs against ground truth");
    add_common(ev, common);
    ev->add_option("--dets", det_paths, "detection CSV file(s)")->required()->take_all();
    ev->add_option("--gt", gt_path, "ground-truth annotation CSV")->required();
    ev->add_option("--rule", rule_text, "matching rule, e.g. center:30 or iou:0.5");

    auto* sweep = app.add_subcommand("sweep", "threshold sweep on cached proposals");
    add_common(sweep, common);
    sweep->add_option("--manifest", manifest_path, "dataset manifest JSON")->required();
    sweep->add_option("--split", split_name, "manifest split to process");
    sweep->add_option("--proposer", proposer_stem, "proposer checkpoint stem")
        ->required();
    sweep->add_option("--classifier", classifier_stem, "classifier checkpoint stem");
    sweep->add_option("--confs", confs, "confidence thresholds")->delimiter(',');
    sweep->add_option("--cls", cls_thrs, "classifier thresholds")->delimiter(',');
    sweep->add_option("--merge", merges, "merge IoU thresholds")->delimiter(',');

    std::vector<const char*> argv;
    argv.push_back("mitodet");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return cmd_synth(common, args);
        if (tile_cmd->parsed()) return cmd_tile(common, manifest_path, args);
        if (tp->parsed()) return cmd_train_proposer(common, manifest_path, args);
        if (tc->parsed())
            return cmd_train_classifier(common, manifest_path, proposer_stem, args);
        if (infer->parsed())
            return cmd_infer(common, manifest_path, image_path, split_name,
                             proposer_stem, classifier_stem, overlay, args);
        if (ev->parsed())
            return cmd_evaluate(common, det_paths, gt_path, rule_text, args);
        if (sweep->parsed())
            return cmd_sweep(common, manifest_path, split_name, proposer_stem,
                             classifier_stem, confs, cls_thrs, merges, args);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
    // Replay: re-execute the argv recorded in a run.json.
    if (args.size() >= 2 && args[0] == "--from-run") {
        std::ifstream in(args[1]);
        if (!in) {
            std::cerr << "error: cannot open '" << args[1] << "'\n";
            return 1;
        }
        json j;
        try {
            in >> j;
            return dispatch_impl(j.at("argv").get<std::vector<std::string>>());
        } catch (const std::exception& e) {
            std::cerr << "error: bad run.json: " << e.what() << "\n";
            return 1;
        }
    }
    return dispatch_impl(args);
}

int dispatch(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return dispatch(args);
}

}  // namespace mitodet::cli
