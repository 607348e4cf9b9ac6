#pragma once

/// Detection- and classification-stage augmentation suites. Every random
/// draw comes from the caller's RNG, so identical seeds reproduce identical
/// outputs bit for bit.

#include <torch/torch.h>

#include <cstdint>
#include <vector>

#include "mitodet/config.hpp"
#include "mitodet/geometry.hpp"
#include "mitodet/rng.hpp"

namespace mitodet::aug {

struct DetAugmentProfile {
    double rotation_max_deg = 180.0;
    double flip_p = 0.5;
    double mixup_p = 0.3;
    double mosaic_p = 1.0;
    std::int64_t mosaic_epochs = 20;
    std::int64_t randaug_ops = 2;
    std::int64_t randaug_magnitude = 9;
    double erase_p = 0.4;
    double erase_min = 0.02;
    double erase_max = 0.1;

    static DetAugmentProfile from(const Config& cfg);
};

struct ClsAugmentProfile {
    double flip_p = 0.5;
    double rotation_max_deg = 15.0;
    double jitter_brightness = 0.2;
    double jitter_contrast = 0.2;
    double jitter_saturation = 0.1;
    double mixup_p = 0.2;
    std::int64_t randaug_ops = 3;
    std::int64_t randaug_magnitude = 5;
    double erase_p = 0.5;
    double erase_min = 0.02;
    double erase_max = 0.15;
    bool half_erase = true;

    static ClsAugmentProfile from(const Config& cfg);
};

/// A training patch with its ground-truth boxes.
struct DetSample {
    torch::Tensor image;  // (3,S,S) float in [0,1]
    std::vector<geom::Box> boxes;
};

/// A classifier crop with its class label (0 = mitosis, 1 = background).
struct ClsSample {
    torch::Tensor crop;  // (3,64,64) float in [0,1], not yet normalized
    int label = 0;
};

/// Classifier crop after augmentation; mixup produces a convex label
/// combination: weight `mix_w` on `label_a`, 1 - mix_w on `label_b`.
struct ClsAugmented {
    torch::Tensor crop;
    int label_a = 0;
    int label_b = 0;
    double mix_w = 1.0;
};

/// Rotates a CHW image by `deg` counter-clockwise about its center (bilinear,
/// reflect padding). Exposed for tests.
torch::Tensor rotate_image(const torch::Tensor& image, double deg);

/// Axis-aligned hull of a box whose corners were rotated by `deg`
/// counter-clockwise about the image center.
geom::Box rotate_box_hull(const geom::Box& box, double deg, double img_w,
                          double img_h);

/// Pixels an erase rectangle should cover: round(ratio * h * w).
std::int64_t erase_target_area(double ratio, std::int64_t h, std::int64_t w);

/// Full detection-stage suite: rotation U[0,max], H/V flips, mixup (box
/// union), mosaic (only while epoch < mosaic_epochs), pixel-level
/// RandAugment, random erasing. Boxes are clipped to the canvas; a box
/// keeping under 25% of its area is dropped.
DetSample augment_detection(const DetSample& sample,
                            const std::vector<DetSample>& pool,
                            const DetAugmentProfile& profile, std::int64_t epoch,
                            Rng& rng);

/// Full classification-stage suite: flip, rotation U[-max,+max], ColorJitter,
/// mixup (label mixing), RandAugment, half-erasing.
ClsAugmented augment_classification(const torch::Tensor& crop, int label,
                                    const std::vector<ClsSample>& pool,
                                    const ClsAugmentProfile& profile, Rng& rng);

}  // namespace mitodet::aug
