#pragma once

/// Detection-vs-ground-truth matching and precision / recall / F1 metrics.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mitodet/annotation.hpp"
#include "mitodet/geometry.hpp"

namespace mitodet::eval {

/// How a detection may claim a ground-truth annotation.
struct MatchRule {
    enum class Kind { kCenterDistance, kIoU };
    Kind kind = Kind::kCenterDistance;
    double threshold = 30.0;  // pixels for center distance, ratio for IoU

    static MatchRule center(double max_distance_px = 30.0) {
        return {Kind::kCenterDistance, max_distance_px};
    }
    static MatchRule iou(double min_iou = 0.5) { return {Kind::kIoU, min_iou}; }
    /// Parses "center:30" or "iou:0.5".
    static MatchRule parse(const std::string& text);
    std::string to_string() const;
};

struct MatchResult {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;
    // (index into detections, index into annotations), one entry per TP.
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
};

struct Metrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Greedy one-to-one matching: detections in score-descending order each
/// claim the nearest (center rule) or highest-overlap (IoU rule) unmatched
/// annotation within the rule threshold. `gt_box_size` sizes the annotation
/// boxes for the IoU rule.
MatchResult match(const std::vector<geom::Detection>& dets,
                  const std::vector<Annotation>& gts, const MatchRule& rule,
                  double gt_box_size = 50.0);

/// P = tp/(tp+fp), R = tp/(tp+fn), F1 = 2PR/(P+R). Degenerate cases: all
/// three are 1 when tp=fp=fn=0; P (R) is 0 when detections (annotations)
/// exist without any TP; F1 is 0 when P + R = 0.
Metrics metrics(std::int64_t tp, std::int64_t fp, std::int64_t fn);

struct EvalReport {
    std::map<std::string, MatchResult> per_image;
    std::int64_t tp = 0, fp = 0, fn = 0;  // micro-aggregated
    Metrics aggregate;
};

/// Matches per image and micro-averages the counts.
EvalReport evaluate(const std::map<std::string, std::vector<geom::Detection>>& dets,
                    const std::map<std::string, std::vector<Annotation>>& gts,
                    const MatchRule& rule, double gt_box_size = 50.0);

/// CSV rows `image_id,tp,fp,fn,p,r,f1` plus a final ALL row.
std::string report_csv(const EvalReport& report);

/// Human-readable table with per-variant counts and metrics columns.
std::string report_table(const EvalReport& report);

}  // namespace mitodet::eval
