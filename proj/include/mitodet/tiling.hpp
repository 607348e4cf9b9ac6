#pragma once

/// Tile grids over large images: 512x512 patches with 20% overlap by default,
/// plus annotation cropping into patch frames.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mitodet/annotation.hpp"
#include "mitodet/geometry.hpp"

namespace mitodet::tile {

/// One square crop of a large image. `pad_x` / `pad_y` record zero-padding
/// applied on the right/bottom when the source image is smaller than the
/// patch on an axis.
struct PatchSpec {
    std::string id;  // "x<origin_x>_y<origin_y>"
    std::int64_t origin_x = 0;
    std::int64_t origin_y = 0;
    std::int64_t size = 0;
    std::int64_t pad_x = 0;
    std::int64_t pad_y = 0;
};

struct TileGrid {
    std::int64_t image_w = 0;
    std::int64_t image_h = 0;
    std::int64_t patch_size = 0;
    double overlap_fraction = 0.0;
    std::vector<std::int64_t> xs;  // patch origins along x, ascending
    std::vector<std::int64_t> ys;  // patch origins along y, ascending
    std::vector<PatchSpec> patches;  // row-major: ys outer, xs inner
};

/// Stride between consecutive patch origins: round(patch_size * (1 - overlap)).
std::int64_t grid_stride(std::int64_t patch_size, double overlap);

/// Builds the covering grid. Origins run 0, stride, 2*stride, ... while
/// origin + patch_size <= extent; when the last origin falls short of the
/// edge a clamped origin at extent - patch_size is appended. Images smaller
/// than the patch on an axis get a single origin 0 with zero-padding recorded
/// in the PatchSpec.
TileGrid make_grid(std::int64_t image_w, std::int64_t image_h,
                   std::int64_t patch_size = 512, double overlap = 0.2);

/// Patch file name for on-disk dumps: "<image_id>_x<origin_x>_y<origin_y>.png".
std::string patch_file_name(const std::string& image_id, const PatchSpec& p);

/// An annotation expressed in a patch's coordinate frame.
struct PatchAnnotation {
    Annotation ann;       // cx/cy in patch frame
    geom::Box box;        // expanded box in patch frame, clipped when truncated
    bool truncated = false;
};

/// Assigns each annotation to every patch that fully contains its expanded
/// box and translates it into that patch's frame. An annotation contained by
/// no patch is assigned once, to the patch holding its center, clipped and
/// flagged truncated. Annotations must be inside the image bounds.
std::map<std::string, std::vector<PatchAnnotation>> crop_annotations(
    const TileGrid& grid, const std::vector<Annotation>& anns,
    double box_size = 50.0);

}  // namespace mitodet::tile
