#pragma once

/// Box arithmetic, IoU, greedy NMS, coordinate-frame lifting and cross-patch
/// merging. Everything here is pure and safe to call concurrently.

#include <cstdint>
#include <string>
#include <vector>

namespace mitodet::tile {
struct PatchSpec;
}

namespace mitodet::geom {

/// Axis-aligned rectangle in pixels, half-open intervals [x, x+w) x [y, y+h).
struct Box {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    Box() = default;
    /// Throws std::invalid_argument unless w > 0, h > 0 and all values finite.
    Box(double x, double y, double w, double h);

    double x2() const { return x + w; }
    double y2() const { return y + h; }
    double cx() const { return x + 0.5 * w; }
    double cy() const { return y + 0.5 * h; }
    double area() const { return w * h; }

    bool operator==(const Box&) const = default;
};

/// Coordinate frame a detection lives in. Patch-frame detections carry the
/// id of their source patch; lifting to the global frame clears it.
enum class Frame { kPatch, kGlobal };

struct Detection {
    Box box;
    double score = 0.0;  // in [0, 1]
    int label = 0;       // 0 = mitosis
    Frame frame = Frame::kGlobal;
    std::string patch_id;  // source patch, set while frame == kPatch
    std::string id;        // provenance id, unique within one run
};

/// Throws std::invalid_argument when score is outside [0, 1] or the frame /
/// patch_id combination is inconsistent.
void validate(const Detection& d);

/// Intersection over union. Symmetric, 0 for disjoint boxes, 1 for identical.
double iou(const Box& a, const Box& b);

/// Greedy non-maximum suppression. Detections are ordered by score descending
/// (ties by smaller x, then smaller y); the top is kept and every remaining
/// detection with iou strictly greater than `iou_threshold` against it is
/// dropped. Kept order is preserved in the output.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

/// Translates a patch-frame detection by the patch origin. Throws
/// std::invalid_argument when the detection is not in the patch's frame.
Detection to_global(const Detection& d, const tile::PatchSpec& patch);

/// Inverse of to_global: re-expresses a global detection in the patch frame.
Detection to_patch(const Detection& d, const tile::PatchSpec& patch);

/// Merges duplicate detections of one object seen from overlapping patches:
/// connected components under iou >= iou_threshold, each component replaced
/// by its highest-score member (ties by smaller x, then y). Output sorted by
/// score descending. Input must be in the global frame.
std::vector<Detection> merge_cross_patch(const std::vector<Detection>& dets,
                                         double iou_threshold = 0.5);

}  // namespace mitodet::geom
