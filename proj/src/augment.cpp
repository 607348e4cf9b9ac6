#include "mitodet/augment.hpp"

#include <algorithm>
#include <cmath>

namespace F = torch::nn::functional;

namespace mitodet::aug {

DetAugmentProfile DetAugmentProfile::from(const Config& cfg) {
    DetAugmentProfile p;
    p.rotation_max_deg = cfg.get_double("augment.det.rotation_max_deg");
    p.flip_p = cfg.get_double("augment.det.flip_p");
    p.mixup_p = cfg.get_double("augment.det.mixup_p");
    p.mosaic_p = cfg.get_double("augment.det.mosaic_p");
    p.mosaic_epochs = cfg.get_int("augment.det.mosaic_epochs");
    p.randaug_ops = cfg.get_int("augment.det.randaug_ops");
    p.randaug_magnitude = cfg.get_int("augment.det.randaug_magnitude");
    p.erase_p = cfg.get_double("augment.det.erase_p");
    p.erase_min = cfg.get_double("augment.det.erase_min");
    p.erase_max = cfg.get_double("augment.det.erase_max");
    return p;
}

ClsAugmentProfile ClsAugmentProfile::from(const Config& cfg) {
    ClsAugmentProfile p;
    p.flip_p = cfg.get_double("augment.cls.flip_p");
    p.rotation_max_deg = cfg.get_double("augment.cls.rotation_max_deg");
    p.jitter_brightness = cfg.get_double("augment.cls.jitter_brightness");
    p.jitter_contrast = cfg.get_double("augment.cls.jitter_contrast");
    p.jitter_saturation = cfg.get_double("augment.cls.jitter_saturation");
    p.mixup_p = cfg.get_double("augment.cls.mixup_p");
    p.randaug_ops = cfg.get_int("augment.cls.randaug_ops");
    p.randaug_magnitude = cfg.get_int("augment.cls.randaug_magnitude");
    p.erase_p = cfg.get_double("augment.cls.erase_p");
    p.erase_min = cfg.get_double("augment.cls.erase_min");
    p.erase_max = cfg.get_double("augment.cls.erase_max");
    p.half_erase = cfg.get_bool("augment.cls.half_erase");
    return p;
}

torch::Tensor rotate_image(const torch::Tensor& image, double deg) {
    if (std::abs(deg) < 1e-12) return image;
    const double rad = deg * M_PI / 180.0;
    const double c = std::cos(rad);
    const double s = std::sin(rad);
    // Sampling grid rotates by -deg so the content rotates by +deg (CCW with
    // y pointing down means visually clockwise; the convention only has to
    // match rotate_box_hull).
    auto theta = torch::tensor({{c, s, 0.0}, {-s, c, 0.0}}, torch::kFloat64)
                     .unsqueeze(0)
                     .to(image.dtype());
    auto grid = F::affine_grid(theta,
                               {1, image.size(0), image.size(1), image.size(2)},
                               /*align_corners=*/false);
    auto out = F::grid_sample(image.unsqueeze(0), grid,
                              F::GridSampleFuncOptions()
                                  .mode(torch::kBilinear)
                                  .padding_mode(torch::kReflection)
                                  .align_corners(false));
    return out.squeeze(0);
}

geom::Box rotate_box_hull(const geom::Box& box, double deg, double img_w,
                          double img_h) {
    const double rad = deg * M_PI / 180.0;
    const double c = std::cos(rad);
    const double s = std::sin(rad);
    const double cx = 0.5 * img_w;
    const double cy = 0.5 * img_h;
    // Content point p maps to R(p - c) + c with R matching rotate_image's
    // inverse-grid convention.
    const double xs[2] = {box.x, box.x2()};
    const double ys[2] = {box.y, box.y2()};
    double min_x = 1e300, min_y = 1e300, max_x = -1e300, max_y = -1e300;
    for (double px : xs) {
        for (double py : ys) {
            const double dx = px - cx;
            const double dy = py - cy;
            const double nx = c * dx - s * dy + cx;
            const double ny = s * dx + c * dy + cy;
            min_x = std::min(min_x, nx);
            max_x = std::max(max_x, nx);
            min_y = std::min(min_y, ny);
            max_y = std::max(max_y, ny);
        }
    }
    return geom::Box(min_x, min_y, std::max(max_x - min_x, 1e-6),
                     std::max(max_y - min_y, 1e-6));
}

std::int64_t erase_target_area(double ratio, std::int64_t h, std::int64_t w) {
    return static_cast<std::int64_t>(
        std::llround(ratio * static_cast<double>(h) * static_cast<double>(w)));
}

namespace {

// Clips boxes to the canvas, dropping those that keep under `min_keep` of
// their area.
std::vector<geom::Box> clip_boxes(const std::vector<geom::Box>& boxes, double w,
                                  double h, double min_keep = 0.25) {
    std::vector<geom::Box> out;
    for (const auto& b : boxes) {
        const double x0 = std::max(b.x, 0.0);
        const double y0 = std::max(b.y, 0.0);
        const double x1 = std::min(b.x2(), w);
        const double y1 = std::min(b.y2(), h);
        if (x1 - x0 <= 0.0 || y1 - y0 <= 0.0) continue;
        const double kept = (x1 - x0) * (y1 - y0) / b.area();
        if (kept < min_keep) continue;
        out.push_back(geom::Box(x0, y0, x1 - x0, y1 - y0));
    }
    return out;
}

torch::Tensor apply_randaug_op(const torch::Tensor& img, std::int64_t op,
                               double magnitude, Rng& rng) {
    const double m = magnitude / 10.0;
    const double sign = bernoulli(rng, 0.5) ? 1.0 : -1.0;
    switch (op) {
        case 0:  // identity
            return img;
        case 1: {  // autocontrast, per channel
            auto mn = std::get<0>(img.flatten(1).min(1)).view({3, 1, 1});
            auto mx = std::get<0>(img.flatten(1).max(1)).view({3, 1, 1});
            auto span = (mx - mn).clamp_min(1e-6);
            return ((img - mn) / span).clamp(0.0, 1.0);
        }
        case 2: {  // brightness
            const double f = 1.0 + sign * 0.9 * m;
            return (img * f).clamp(0.0, 1.0);
        }
        case 3: {  // contrast about the gray mean
            const double f = 1.0 + sign * 0.9 * m;
            auto mean = img.mean();
            return ((img - mean) * f + mean).clamp(0.0, 1.0);
        }
        case 4: {  // saturation
            const double f = 1.0 + sign * 0.9 * m;
            auto gray = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).unsqueeze(0);
            return (gray + (img - gray) * f).clamp(0.0, 1.0);
        }
        case 5: {  // sharpness blend against a fixed 3x3 smoothing
            const double f = 1.0 + sign * 0.9 * m;
            auto kernel = torch::tensor({{1.0f, 1.0f, 1.0f},
                                         {1.0f, 5.0f, 1.0f},
                                         {1.0f, 1.0f, 1.0f}}) /
                          13.0f;
            kernel = kernel.to(img.dtype()).view({1, 1, 3, 3}).repeat({3, 1, 1, 1});
            auto smooth = F::conv2d(img.unsqueeze(0), kernel,
                                    F::Conv2dFuncOptions().padding(1).groups(3))
                              .squeeze(0);
            return (smooth + (img - smooth) * f).clamp(0.0, 1.0);
        }
        case 6: {  // posterize
            const auto bits = static_cast<std::int64_t>(8 - std::llround(4.0 * m));
            const double levels = std::pow(2.0, static_cast<double>(bits));
            const double step = 256.0 / levels;
            return ((img * 255.0 / step).floor() * step / 255.0).clamp(0.0, 1.0);
        }
        case 7: {  // solarize: invert above a threshold
            const double threshold = 1.0 - m;
            return torch::where(img < threshold, img, 1.0 - img);
        }
        default:
            return img;
    }
}

torch::Tensor randaugment(const torch::Tensor& img, std::int64_t n_ops,
                          std::int64_t magnitude, Rng& rng) {
    auto out = img;
    for (std::int64_t i = 0; i < n_ops; ++i) {
        const auto op = uniform_int(rng, 0, 7);
        out = apply_randaug_op(out, op, static_cast<double>(magnitude), rng);
    }
    return out;
}

// Fills a rectangle of ~target_area pixels with the image's per-channel mean.
// When `half` is in [0,3] the rectangle is confined to the left / right /
// top / bottom half.
void erase_rect(torch::Tensor& img, double ratio, int half, Rng& rng) {
    const auto h = img.size(1);
    const auto w = img.size(2);
    const auto target = erase_target_area(ratio, h, w);
    if (target <= 0) return;
    const double aspect = uniform(rng, 0.5, 2.0);
    auto rw = static_cast<std::int64_t>(
        std::llround(std::sqrt(static_cast<double>(target) * aspect)));
    auto rh = static_cast<std::int64_t>(
        std::llround(std::sqrt(static_cast<double>(target) / aspect)));

    std::int64_t rx0 = 0, ry0 = 0, rx1 = w, ry1 = h;  // placement region
    if (half == 0) rx1 = w / 2;
    if (half == 1) rx0 = w / 2;
    if (half == 2) ry1 = h / 2;
    if (half == 3) ry0 = h / 2;
    rw = std::min(rw, rx1 - rx0);
    rh = std::min(rh, ry1 - ry0);
    if (rw <= 0 || rh <= 0) return;
    const auto x = uniform_int(rng, rx0, rx1 - rw);
    const auto y = uniform_int(rng, ry0, ry1 - rh);

    auto mean = img.mean({1, 2});  // per-channel
    img.index_put_({torch::indexing::Slice(),
                    torch::indexing::Slice(y, y + rh),
                    torch::indexing::Slice(x, x + rw)},
                   mean.view({3, 1, 1}));
}

}  // namespace

DetSample augment_detection(const DetSample& sample,
                            const std::vector<DetSample>& pool,
                            const DetAugmentProfile& profile, std::int64_t epoch,
                            Rng& rng) {
    auto img = sample.image.clone();
    auto boxes = sample.boxes;
    const double W = static_cast<double>(img.size(2));
    const double H = static_cast<double>(img.size(1));

    // Rotation U[0, max].
    if (profile.rotation_max_deg > 0.0) {
        const double deg = uniform(rng, 0.0, profile.rotation_max_deg);
        if (std::abs(deg) > 1e-12) {
            img = rotate_image(img, deg);
            std::vector<geom::Box> rotated;
            for (const auto& b : boxes) rotated.push_back(rotate_box_hull(b, deg, W, H));
            boxes = clip_boxes(rotated, W, H);
        }
    }

    // Horizontal / vertical flips.
    if (bernoulli(rng, profile.flip_p)) {
        img = img.flip({2});
        for (auto& b : boxes) b = geom::Box(W - b.x - b.w, b.y, b.w, b.h);
    }
    if (bernoulli(rng, profile.flip_p)) {
        img = img.flip({1});
        for (auto& b : boxes) b = geom::Box(b.x, H - b.y - b.h, b.w, b.h);
    }

    // Mixup with a random pool partner: pixel blend, box union.
    if (!pool.empty() && bernoulli(rng, profile.mixup_p)) {
        const auto& other =
            pool[static_cast<std::size_t>(uniform_int(
                rng, 0, static_cast<std::int64_t>(pool.size()) - 1))];
        const double wgt = uniform(rng, 0.0, 1.0);
        img = img * wgt + other.image * (1.0 - wgt);
        for (const auto& b : other.boxes) boxes.push_back(b);
    }

    // Mosaic: 2x2 canvas of this sample plus three pool partners, active only
    // in the first `mosaic_epochs` epochs.
    if (epoch < profile.mosaic_epochs && pool.size() >= 3 &&
        bernoulli(rng, profile.mosaic_p)) {
        const auto S = img.size(1);
        const auto half = S / 2;
        auto canvas = torch::zeros_like(img);
        std::vector<geom::Box> mosaic_boxes;
        const DetSample current{img, boxes};
        for (int q = 0; q < 4; ++q) {
            const DetSample* src;
            if (q == 0) {
                src = &current;
            } else {
                src = &pool[static_cast<std::size_t>(uniform_int(
                    rng, 0, static_cast<std::int64_t>(pool.size()) - 1))];
            }
            auto scaled = F::interpolate(src->image.unsqueeze(0),
                                         F::InterpolateFuncOptions()
                                             .size(std::vector<std::int64_t>{half, half})
                                             .mode(torch::kBilinear)
                                             .align_corners(false))
                              .squeeze(0);
            const auto ox = (q % 2) * half;
            const auto oy = (q / 2) * half;
            canvas.index_put_({torch::indexing::Slice(),
                               torch::indexing::Slice(oy, oy + half),
                               torch::indexing::Slice(ox, ox + half)},
                              scaled);
            const double sx = static_cast<double>(half) / static_cast<double>(src->image.size(2));
            const double sy = static_cast<double>(half) / static_cast<double>(src->image.size(1));
            for (const auto& b : src->boxes) {
                mosaic_boxes.push_back(geom::Box(b.x * sx + ox, b.y * sy + oy,
                                                 std::max(b.w * sx, 1e-6),
                                                 std::max(b.h * sy, 1e-6)));
            }
        }
        img = canvas;
        boxes = clip_boxes(mosaic_boxes, W, H);
    }

    // Pixel-level RandAugment.
    if (profile.randaug_ops > 0) {
        img = randaugment(img, profile.randaug_ops, profile.randaug_magnitude, rng);
    }

    // Random erasing.
    if (bernoulli(rng, profile.erase_p)) {
        erase_rect(img, uniform(rng, profile.erase_min, profile.erase_max),
                   /*half=*/-1, rng);
    }

    return {img.clamp(0.0, 1.0), boxes};
}

ClsAugmented augment_classification(const torch::Tensor& crop, int label,
                                    const std::vector<ClsSample>& pool,
                                    const ClsAugmentProfile& profile, Rng& rng) {
    TORCH_CHECK(crop.dim() == 3 && crop.size(1) == crop.size(2),
                "augment_classification: expected square CHW crop");
    ClsAugmented out;
    out.label_a = label;
    out.label_b = label;
    auto img = crop.clone();

    if (bernoulli(rng, profile.flip_p)) img = img.flip({2});

    if (profile.rotation_max_deg > 0.0) {
        const double deg =
            uniform(rng, -profile.rotation_max_deg, profile.rotation_max_deg);
        img = rotate_image(img, deg);
    }

    // ColorJitter: independent uniform factors around 1.
    if (profile.jitter_brightness > 0.0) {
        const double f = uniform(rng, std::max(0.0, 1.0 - profile.jitter_brightness),
                                 1.0 + profile.jitter_brightness);
        img = (img * f).clamp(0.0, 1.0);
    }
    if (profile.jitter_contrast > 0.0) {
        const double f = uniform(rng, std::max(0.0, 1.0 - profile.jitter_contrast),
                                 1.0 + profile.jitter_contrast);
        auto mean = img.mean();
        img = ((img - mean) * f + mean).clamp(0.0, 1.0);
    }
    if (profile.jitter_saturation > 0.0) {
        const double f = uniform(rng, std::max(0.0, 1.0 - profile.jitter_saturation),
                                 1.0 + profile.jitter_saturation);
        auto gray = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).unsqueeze(0);
        img = (gray + (img - gray) * f).clamp(0.0, 1.0);
    }

    // Mixup with a random pool crop; labels mix proportionally.
    if (!pool.empty() && bernoulli(rng, profile.mixup_p)) {
        const auto& other =
            pool[static_cast<std::size_t>(uniform_int(
                rng, 0, static_cast<std::int64_t>(pool.size()) - 1))];
        const double wgt = uniform(rng, 0.0, 1.0);
        img = img * wgt + other.crop * (1.0 - wgt);
        out.label_b = other.label;
        out.mix_w = wgt;
    }

    if (profile.randaug_ops > 0) {
        img = randaugment(img, profile.randaug_ops, profile.randaug_magnitude, rng);
    }

    // Half-erasing: rectangle confined to one uniformly-chosen half.
    if (bernoulli(rng, profile.erase_p)) {
        const int half = profile.half_erase ? static_cast<int>(uniform_int(rng, 0, 3)) : -1;
        erase_rect(img, uniform(rng, profile.erase_min, profile.erase_max), half, rng);
    }

    out.crop = img.clamp(0.0, 1.0);
    return out;
}

}  // namespace mitodet::aug
