#include "mitodet/tiling.hpp"

#include <cmath>
#include <stdexcept>

namespace mitodet::tile {

std::int64_t grid_stride(std::int64_t patch_size, double overlap) {
    return static_cast<std::int64_t>(
        std::llround(static_cast<double>(patch_size) * (1.0 - overlap)));
}

namespace {

// Origins along one axis: 0, stride, ... while origin + patch <= extent,
// plus a clamped origin at extent - patch when the edge is not reached.
std::vector<std::int64_t> axis_origins(std::int64_t extent, std::int64_t patch,
                                       std::int64_t stride) {
    std::vector<std::int64_t> origins;
    if (extent <= patch) {
        origins.push_back(0);
        return origins;
    }
    for (std::int64_t o = 0; o + patch <= extent; o += stride) {
        origins.push_back(o);
    }
    if (origins.back() + patch < extent) {
        origins.push_back(extent - patch);
    }
    return origins;
}

}  // namespace

TileGrid make_grid(std::int64_t image_w, std::int64_t image_h,
                   std::int64_t patch_size, double overlap) {
    if (image_w <= 0 || image_h <= 0) {
        throw std::invalid_argument("make_grid: image extent must be positive");
    }
    if (patch_size <= 0) {
        throw std::invalid_argument("make_grid: patch size must be positive");
    }
    if (!(overlap >= 0.0 && overlap < 1.0)) {
        throw std::invalid_argument("make_grid: overlap must be in [0, 1)");
    }
    const std::int64_t stride = grid_stride(patch_size, overlap);
    if (stride <= 0) {
        throw std::invalid_argument("make_grid: overlap leaves a non-positive stride");
    }

    TileGrid grid;
    grid.image_w = image_w;
    grid.image_h = image_h;
    grid.patch_size = patch_size;
    grid.overlap_fraction = overlap;
    grid.xs = axis_origins(image_w, patch_size, stride);
    grid.ys = axis_origins(image_h, patch_size, stride);

    const std::int64_t pad_x = std::max<std::int64_t>(0, patch_size - image_w);
    const std::int64_t pad_y = std::max<std::int64_t>(0, patch_size - image_h);
    for (std::int64_t oy : grid.ys) {
        for (std::int64_t ox : grid.xs) {
            PatchSpec p;
            p.origin_x = ox;
            p.origin_y = oy;
            p.size = patch_size;
            p.pad_x = pad_x;
            p.pad_y = pad_y;
            p.id = "x" + std::to_string(ox) + "_y" + std::to_string(oy);
            grid.patches.push_back(std::move(p));
        }
    }
    return grid;
}

std::string patch_file_name(const std::string& image_id, const PatchSpec& p) {
    return image_id + "_" + p.id + ".png";
}

std::map<std::string, std::vector<PatchAnnotation>> crop_annotations(
    const TileGrid& grid, const std::vector<Annotation>& anns,
    double box_size) {
    for (const auto& a : anns) {
        if (a.cx < 0 || a.cy < 0 || a.cx >= static_cast<double>(grid.image_w) ||
            a.cy >= static_cast<double>(grid.image_h)) {
            throw std::invalid_argument("crop_annotations: annotation outside image");
        }
    }
    std::map<std::string, std::vector<PatchAnnotation>> out;
    for (const auto& a : anns) {
        const geom::Box box = expand_to_box(a, box_size);
        bool assigned = false;
        for (const auto& p : grid.patches) {
            const double px0 = static_cast<double>(p.origin_x);
            const double py0 = static_cast<double>(p.origin_y);
            const double px1 = px0 + static_cast<double>(p.size);
            const double py1 = py0 + static_cast<double>(p.size);
            if (box.x >= px0 && box.y >= py0 && box.x2() <= px1 && box.y2() <= py1) {
                PatchAnnotation pa;
                pa.ann = a;
                pa.ann.cx -= px0;
                pa.ann.cy -= py0;
                pa.box = geom::Box(box.x - px0, box.y - py0, box.w, box.h);
                out[p.id].push_back(std::move(pa));
                assigned = true;
            }
        }
        if (assigned) continue;
        // Fallback: the (first, row-major) patch containing the center, clipped.
        for (const auto& p : grid.patches) {
            const double px0 = static_cast<double>(p.origin_x);
            const double py0 = static_cast<double>(p.origin_y);
            const double px1 = px0 + static_cast<double>(p.size);
            const double py1 = py0 + static_cast<double>(p.size);
            if (a.cx >= px0 && a.cx < px1 && a.cy >= py0 && a.cy < py1) {
                const double bx0 = std::max(box.x, px0);
                const double by0 = std::max(box.y, py0);
                const double bx1 = std::min(box.x2(), px1);
                const double by1 = std::min(box.y2(), py1);
                PatchAnnotation pa;
                pa.ann = a;
                pa.ann.cx -= px0;
                pa.ann.cy -= py0;
                pa.box = geom::Box(bx0 - px0, by0 - py0, bx1 - bx0, by1 - by0);
                pa.truncated = true;
                out[p.id].push_back(std::move(pa));
                break;
            }
        }
    }
    return out;
}

}  // namespace mitodet::tile
