#include "mitodet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mitodet/tiling.hpp"

namespace mitodet::geom {

Box::Box(double x, double y, double w, double h) : x(x), y(y), w(w), h(h) {
    if (!(std::isfinite(x) && std::isfinite(y) && std::isfinite(w) &&
          std::isfinite(h))) {
        throw std::invalid_argument("Box: coordinates must be finite");
    }
    if (!(w > 0.0 && h > 0.0)) {
        throw std::invalid_argument("Box: width and height must be positive");
    }
}

void validate(const Detection& d) {
    if (!(d.score >= 0.0 && d.score <= 1.0)) {
        throw std::invalid_argument("Detection: score must be in [0, 1]");
    }
    if (d.frame == Frame::kGlobal && !d.patch_id.empty()) {
        throw std::invalid_argument(
            "Detection: global-frame detection carries a patch id");
    }
}

double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
    const double inter = ix * iy;
    if (inter <= 0.0) return 0.0;
    return inter / (a.area() + b.area() - inter);
}

namespace {

// Canonical detection order: score descending, ties by smaller x then y.
bool score_order(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x != b.box.x) return a.box.x < b.box.x;
    return a.box.y < b.box.y;
}

}  // namespace

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
    std::stable_sort(dets.begin(), dets.end(), score_order);
    std::vector<Detection> kept;
    kept.reserve(dets.size());
    std::vector<bool> dropped(dets.size(), false);
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (dropped[i]) continue;
        kept.push_back(dets[i]);
        for (std::size_t j = i + 1; j < dets.size(); ++j) {
            if (dropped[j]) continue;
            if (iou(dets[i].box, dets[j].box) > iou_threshold) dropped[j] = true;
        }
    }
    return kept;
}

Detection to_global(const Detection& d, const tile::PatchSpec& patch) {
    if (d.frame != Frame::kPatch) {
        throw std::invalid_argument("to_global: detection is not in a patch frame");
    }
    if (d.patch_id != patch.id) {
        throw std::invalid_argument("to_global: detection belongs to patch '" +
                                    d.patch_id + "', not '" + patch.id + "'");
    }
    Detection out = d;
    out.box.x += static_cast<double>(patch.origin_x);
    out.box.y += static_cast<double>(patch.origin_y);
    out.frame = Frame::kGlobal;
    out.patch_id.clear();
    return out;
}

Detection to_patch(const Detection& d, const tile::PatchSpec& patch) {
    if (d.frame != Frame::kGlobal) {
        throw std::invalid_argument("to_patch: detection is not in the global frame");
    }
    Detection out = d;
    out.box.x -= static_cast<double>(patch.origin_x);
    out.box.y -= static_cast<double>(patch.origin_y);
    out.frame = Frame::kPatch;
    out.patch_id = patch.id;
    return out;
}

namespace {

struct UnionFind {
    std::vector<std::size_t> parent;
    explicit UnionFind(std::size_t n) : parent(n) {
        std::iota(parent.begin(), parent.end(), std::size_t{0});
    }
    std::size_t find(std::size_t a) {
        while (parent[a] != a) {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        return a;
    }
    void unite(std::size_t a, std::size_t b) { parent[find(a)] = find(b); }
};

}  // namespace

std::vector<Detection> merge_cross_patch(const std::vector<Detection>& dets,
                                         double iou_threshold) {
    for (const auto& d : dets) {
        if (d.frame != Frame::kGlobal) {
            throw std::invalid_argument(
                "merge_cross_patch: all detections must be in the global frame");
        }
    }
    const std::size_t n = dets.size();
    UnionFind uf(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (iou(dets[i].box, dets[j].box) >= iou_threshold) uf.unite(i, j);
        }
    }
    // Representative per component: highest score, ties by smaller x then y.
    std::vector<std::size_t> rep(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t root = uf.find(i);
        if (rep[root] == n || score_order(dets[i], dets[rep[root]])) {
            rep[root] = i;
        }
    }
    std::vector<Detection> out;
    for (std::size_t i = 0; i < n; ++i) {
        if (rep[uf.find(i)] == i) out.push_back(dets[i]);
    }
    std::stable_sort(out.begin(), out.end(), score_order);
    return out;
}

}  // namespace mitodet::geom
