#pragma once

#include <string>

#include "mitodet/geometry.hpp"

namespace mitodet {

/// Ground-truth mitosis location: a center point, optionally expanded to a
/// fixed-size box for detector training and containment tests.
struct Annotation {
    std::string image_id;
    double cx = 0.0;
    double cy = 0.0;
    int label = 0;  // 0 = mitosis
};

/// Expands a center annotation to a square box of side `box_size` centered on
/// (cx, cy).
inline geom::Box expand_to_box(const Annotation& a, double box_size) {
    return geom::Box(a.cx - 0.5 * box_size, a.cy - 0.5 * box_size, box_size,
                     box_size);
}

}  // namespace mitodet
