#pragma once

/// Two-stage WSI inference orchestration: tile -> propose -> classify-filter
/// -> lift to global -> cross-patch merge. Patch processing may run in a
/// worker pool; the result is independent of patch order and worker count.

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mitodet/annotation.hpp"
#include "mitodet/config.hpp"
#include "mitodet/eval.hpp"
#include "mitodet/geometry.hpp"
#include "mitodet/tiling.hpp"

namespace mitodet::pipe {

struct PipelineConfig {
    std::int64_t patch_size = 512;
    double overlap = 0.2;
    double conf_threshold = 0.2;
    double nms_iou = 0.3;
    double classifier_threshold = 0.5;
    double merge_iou = 0.5;
    std::int64_t crop_size = 64;
    std::int64_t workers = 1;

    static PipelineConfig from(const Config& cfg);
    void validate() const;
};

/// Abstract pixel provider for large images; a plain-raster adapter ships.
/// Implementations must support concurrent read_region calls.
class ImageSource {
  public:
    virtual ~ImageSource() = default;
    virtual std::int64_t width() const = 0;
    virtual std::int64_t height() const = 0;
    /// (3,h,w) float RGB in [0,1]; out-of-bounds areas zero-padded.
    virtual torch::Tensor read_region(std::int64_t x, std::int64_t y,
                                      std::int64_t w, std::int64_t h) const = 0;
};

class RasterImageSource : public ImageSource {
  public:
    explicit RasterImageSource(torch::Tensor image);
    std::int64_t width() const override { return image_.size(2); }
    std::int64_t height() const override { return image_.size(1); }
    torch::Tensor read_region(std::int64_t x, std::int64_t y, std::int64_t w,
                              std::int64_t h) const override;
    const torch::Tensor& image() const { return image_; }

  private:
    torch::Tensor image_;
};

/// Stage-1 model interface: patch pixels -> patch-frame detections (already
/// confidence-filtered and NMS-deduplicated). Provenance ids are assigned by
/// the pipeline afterwards.
using ProposeFn = std::function<std::vector<geom::Detection>(const torch::Tensor&)>;

/// Stage-2 model interface: raw [0,1] crops (N,3,S,S) -> mitosis scores (N).
/// An empty function runs the pipeline single-stage (no filtering).
using ClassifyFn = std::function<torch::Tensor(const torch::Tensor&)>;

struct RunStats {
    std::int64_t patches = 0;
    std::int64_t proposals = 0;
    std::int64_t rejected = 0;
    std::int64_t survivors = 0;
    std::int64_t final_count = 0;
};

struct WsiResult {
    std::vector<geom::Detection> proposals;  // global frame, all stage-1 output
    std::vector<double> classifier_scores;   // aligned with proposals
    std::vector<geom::Detection> survivors;  // after the classifier gate
    std::vector<geom::Detection> final_dets; // after cross-patch merge
    RunStats stats;
};

/// The four-step composition. Final detections are sorted score-descending.
WsiResult run_wsi(const ImageSource& image, const ProposeFn& propose,
                  const ClassifyFn& classify, const PipelineConfig& cfg);

/// Detection CSV rows `image_id,x,y,w,h,score,stage`, stage in
/// {proposal, final}.
std::string detections_csv(const std::string& image_id, const WsiResult& result);
/// Parses rows written by detections_csv, keeping only the given stage.
std::map<std::string, std::vector<geom::Detection>> parse_detections_csv(
    const std::string& text, const std::string& stage = "final");

/// Cached stage-1/stage-2 outputs at a low confidence floor, enough to
/// re-evaluate any (conf, classifier, merge) threshold cell without
/// re-running models.
struct SweepCache {
    double min_conf = 0.0;
    std::vector<geom::Detection> proposals;  // global frame, NMS applied
    std::vector<double> cls_scores;          // aligned
};

SweepCache build_sweep_cache(const ImageSource& image, const ProposeFn& propose,
                             const ClassifyFn& classify, const PipelineConfig& cfg,
                             double min_conf);

struct SweepRow {
    double conf = 0, cls_threshold = 0, merge_iou = 0;
    std::int64_t tp = 0, fp = 0, fn = 0;
    double precision = 0, recall = 0, f1 = 0;
};

/// Re-filters the cache for every grid cell and scores against ground truth.
/// Throws std::invalid_argument on an empty cache.
std::vector<SweepRow> sweep_thresholds(const SweepCache& cache,
                                       const std::vector<double>& confs,
                                       const std::vector<double>& cls_thresholds,
                                       const std::vector<double>& merge_ious,
                                       const std::vector<Annotation>& gts,
                                       const eval::MatchRule& rule);

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace mitodet::pipe
