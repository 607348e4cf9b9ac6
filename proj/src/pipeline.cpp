#include "mitodet/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "mitodet/classifier.hpp"
#include "mitodet/image_io.hpp"

namespace mitodet::pipe {

PipelineConfig PipelineConfig::from(const Config& cfg) {
    PipelineConfig p;
    p.patch_size = cfg.get_int("tile.patch_size");
    p.overlap = cfg.get_double("tile.overlap");
    p.conf_threshold = cfg.get_double("proposer.conf_threshold");
    p.nms_iou = cfg.get_double("proposer.nms_iou");
    p.classifier_threshold = cfg.get_double("pipeline.classifier_threshold");
    p.merge_iou = cfg.get_double("pipeline.merge_iou");
    p.crop_size = cfg.get_int("classifier.input_size");
    p.workers = cfg.get_int("workers");
    p.validate();
    return p;
}

void PipelineConfig::validate() const {
    auto in01 = [](double v) { return v > 0.0 && v < 1.0; };
    if (!in01(conf_threshold) || !in01(nms_iou) || !in01(classifier_threshold) ||
        !in01(merge_iou)) {
        throw std::invalid_argument("pipeline: thresholds must be in (0,1)");
    }
    if (!(overlap >= 0.0 && overlap < 1.0)) {
        throw std::invalid_argument("pipeline: overlap must be in [0,1)");
    }
    if (patch_size <= 0 || workers <= 0) {
        throw std::invalid_argument("pipeline: patch_size and workers must be positive");
    }
}

RasterImageSource::RasterImageSource(torch::Tensor image) : image_(std::move(image)) {
    TORCH_CHECK(image_.dim() == 3 && image_.size(0) == 3,
                "RasterImageSource: expected (3,H,W) tensor");
}

torch::Tensor RasterImageSource::read_region(std::int64_t x, std::int64_t y,
                                             std::int64_t w, std::int64_t h) const {
    return io::crop_region(image_, x, y, w, h);
}

namespace {

struct PatchOutput {
    std::vector<geom::Detection> proposals_global;
    std::vector<double> cls_scores;
};

// Canonical order so downstream merging never depends on patch order.
void canonical_sort(std::vector<geom::Detection>& dets, std::vector<double>* aligned) {
    std::vector<std::size_t> idx(dets.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
        if (dets[a].box.x != dets[b].box.x) return dets[a].box.x < dets[b].box.x;
        if (dets[a].box.y != dets[b].box.y) return dets[a].box.y < dets[b].box.y;
        return dets[a].id < dets[b].id;
    });
    std::vector<geom::Detection> d2(dets.size());
    std::vector<double> s2(aligned ? aligned->size() : 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        d2[i] = dets[idx[i]];
        if (aligned) s2[i] = (*aligned)[idx[i]];
    }
    dets = std::move(d2);
    if (aligned) *aligned = std::move(s2);
}

// Runs stage 1 + stage 2 over every patch of the grid and returns per-patch
// outputs (global frame, classifier scores aligned with proposals).
std::vector<PatchOutput> process_patches(const ImageSource& image,
                                         const ProposeFn& propose,
                                         const ClassifyFn& classify,
                                         const PipelineConfig& cfg,
                                         const tile::TileGrid& grid) {
    std::vector<PatchOutput> outputs(grid.patches.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&]() {
        while (true) {
            const std::size_t pi = next.fetch_add(1);
            if (pi >= grid.patches.size()) break;
            const auto& patch = grid.patches[pi];
            auto pixels = image.read_region(patch.origin_x, patch.origin_y,
                                            patch.size, patch.size);
            auto dets = propose(pixels);
            PatchOutput out;
            for (std::size_t k = 0; k < dets.size(); ++k) {
                auto& d = dets[k];
                d.frame = geom::Frame::kPatch;
                d.patch_id = patch.id;
                d.id = patch.id + "#" + std::to_string(k);
                out.proposals_global.push_back(geom::to_global(d, patch));
            }
            if (classify && !dets.empty()) {
                nn::ClassifierConfig crop_cfg;
                crop_cfg.input_size = cfg.crop_size;
                std::vector<torch::Tensor> crops;
                for (const auto& d : dets) {
                    crops.push_back(nn::extract_candidate(pixels, d.box, crop_cfg));
                }
                auto scores = classify(torch::stack(crops));
                TORCH_CHECK(scores.numel() == static_cast<std::int64_t>(dets.size()),
                            "pipeline: classifier returned wrong score count");
                auto scores64 = scores.to(torch::kFloat64).contiguous();
                auto acc = scores64.accessor<double, 1>();
                for (std::int64_t i = 0; i < scores.numel(); ++i) {
                    out.cls_scores.push_back(acc[i]);
                }
            } else {
                out.cls_scores.assign(dets.size(), 1.0);
            }
            outputs[pi] = std::move(out);
        }
    };

    const auto n_workers = static_cast<std::size_t>(
        std::max<std::int64_t>(1, std::min<std::int64_t>(
                                      cfg.workers,
                                      static_cast<std::int64_t>(grid.patches.size()))));
    if (n_workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (std::size_t i = 0; i < n_workers; ++i) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    return outputs;
}

}  // namespace

WsiResult run_wsi(const ImageSource& image, const ProposeFn& propose,
                  const ClassifyFn& classify, const PipelineConfig& cfg) {
    cfg.validate();
    if (!propose) throw std::invalid_argument("run_wsi: propose function required");

    // Step 1: tile with overlap.
    const auto grid = tile::make_grid(image.width(), image.height(), cfg.patch_size,
                                      cfg.overlap);

    // Step 2 + 3: propose per patch, classify candidates.
    auto outputs = process_patches(image, propose, classify, cfg, grid);

    WsiResult result;
    result.stats.patches = static_cast<std::int64_t>(grid.patches.size());
    for (auto& out : outputs) {
        for (std::size_t k = 0; k < out.proposals_global.size(); ++k) {
            result.proposals.push_back(out.proposals_global[k]);
            result.classifier_scores.push_back(out.cls_scores[k]);
        }
    }
    canonical_sort(result.proposals, &result.classifier_scores);
    result.stats.proposals = static_cast<std::int64_t>(result.proposals.size());

    // Step 3 (gate): candidates with classification scores below the
    // threshold are rejected; a score exactly at the threshold survives.
    for (std::size_t i = 0; i < result.proposals.size(); ++i) {
        if (result.classifier_scores[i] < cfg.classifier_threshold) {
            ++result.stats.rejected;
        } else {
            result.survivors.push_back(result.proposals[i]);
        }
    }
    result.stats.survivors = static_cast<std::int64_t>(result.survivors.size());

    // Step 4: cross-patch merge.
    result.final_dets = geom::merge_cross_patch(result.survivors, cfg.merge_iou);
    result.stats.final_count = static_cast<std::int64_t>(result.final_dets.size());
    return result;
}

std::string detections_csv(const std::string& image_id, const WsiResult& result) {
    std::ostringstream os;
    os << "image_id,x,y,w,h,score,stage\n";
    char buf[256];
    for (const auto& d : result.proposals) {
        std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.4f,%.6f,proposal\n",
                      image_id.c_str(), d.box.x, d.box.y, d.box.w, d.box.h, d.score);
        os << buf;
    }
    for (const auto& d : result.final_dets) {
        std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.4f,%.6f,final\n",
                      image_id.c_str(), d.box.x, d.box.y, d.box.w, d.box.h, d.score);
        os << buf;
    }
    return os.str();
}

std::map<std::string, std::vector<geom::Detection>> parse_detections_csv(
    const std::string& text, const std::string& stage) {
    std::map<std::string, std::vector<geom::Detection>> out;
    std::istringstream in(text);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            if (line.rfind("image_id,", 0) == 0) continue;
        }
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 7) {
            throw std::invalid_argument("detections csv: expected 7 columns");
        }
        if (fields[6] != stage) continue;
        geom::Detection d;
        d.box = geom::Box(std::stod(fields[1]), std::stod(fields[2]),
                          std::stod(fields[3]), std::stod(fields[4]));
        d.score = std::stod(fields[5]);
        d.frame = geom::Frame::kGlobal;
        out[fields[0]].push_back(std::move(d));
    }
    return out;
}

SweepCache build_sweep_cache(const ImageSource& image, const ProposeFn& propose,
                             const ClassifyFn& classify, const PipelineConfig& cfg,
                             double min_conf) {
    SweepCache cache;
    cache.min_conf = min_conf;
    const auto grid = tile::make_grid(image.width(), image.height(), cfg.patch_size,
                                      cfg.overlap);
    auto outputs = process_patches(image, propose, classify, cfg, grid);
    for (auto& out : outputs) {
        for (std::size_t k = 0; k < out.proposals_global.size(); ++k) {
            cache.proposals.push_back(out.proposals_global[k]);
            cache.cls_scores.push_back(out.cls_scores[k]);
        }
    }
    canonical_sort(cache.proposals, &cache.cls_scores);
    return cache;
}

std::vector<SweepRow> sweep_thresholds(const SweepCache& cache,
                                       const std::vector<double>& confs,
                                       const std::vector<double>& cls_thresholds,
                                       const std::vector<double>& merge_ious,
                                       const std::vector<Annotation>& gts,
                                       const eval::MatchRule& rule) {
    if (cache.proposals.empty()) {
        throw std::invalid_argument("sweep_thresholds: empty cache");
    }
    std::vector<SweepRow> rows;
    for (double conf : confs) {
        for (double cls_thr : cls_thresholds) {
            std::vector<geom::Detection> kept;
            for (std::size_t i = 0; i < cache.proposals.size(); ++i) {
                if (cache.proposals[i].score >= conf &&
                    cache.cls_scores[i] >= cls_thr) {
                    kept.push_back(cache.proposals[i]);
                }
            }
            for (double merge : merge_ious) {
                auto merged = geom::merge_cross_patch(kept, merge);
                auto res = eval::match(merged, gts, rule);
                SweepRow row;
                row.conf = conf;
                row.cls_threshold = cls_thr;
                row.merge_iou = merge;
                row.tp = res.tp;
                row.fp = res.fp;
                row.fn = res.fn;
                const auto m = eval::metrics(res.tp, res.fp, res.fn);
                row.precision = m.precision;
                row.recall = m.recall;
                row.f1 = m.f1;
                rows.push_back(row);
            }
        }
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "conf,cls,merge,tp,fp,fn,p,r,f1\n";
    char buf[220];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.4f,%.4f,%.4f,%lld,%lld,%lld,%.6f,%.6f,%.6f\n",
                      r.conf, r.cls_threshold, r.merge_iou,
                      static_cast<long long>(r.tp), static_cast<long long>(r.fp),
                      static_cast<long long>(r.fn), r.precision, r.recall, r.f1);
        os << buf;
    }
    return os.str();
}

}  // namespace mitodet::pipe
