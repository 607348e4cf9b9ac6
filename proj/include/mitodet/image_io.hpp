#pragma once

/// PNG <-> tensor conversions and box overlay rendering. Images are carried
/// as float32 CHW tensors with RGB channels in [0, 1].

#include <torch/torch.h>

#include <string>
#include <vector>

#include "mitodet/geometry.hpp"

namespace mitodet::io {

torch::Tensor read_image(const std::string& path);
void write_image(const std::string& path, const torch::Tensor& image);

/// Extracts the region [x, x+w) x [y, y+h) from a CHW image, zero-padding
/// parts that fall outside the image.
torch::Tensor crop_region(const torch::Tensor& image, std::int64_t x,
                          std::int64_t y, std::int64_t w, std::int64_t h);

/// Renders detections as green rectangles onto a copy of the image.
torch::Tensor draw_detections(const torch::Tensor& image,
                              const std::vector<geom::Detection>& dets);

}  // namespace mitodet::io
