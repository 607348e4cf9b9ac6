#include "mitodet/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <stdexcept>

namespace mitodet::io {

torch::Tensor read_image(const std::string& path) {
    cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw std::runtime_error("read_image: cannot read '" + path + "'");
    }
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8)
                 .permute({2, 0, 1})
                 .to(torch::kFloat32)
                 .div(255.0);
    return t.clone();
}

void write_image(const std::string& path, const torch::Tensor& image) {
    TORCH_CHECK(image.dim() == 3 && image.size(0) == 3,
                "write_image: expected (3,H,W) tensor");
    auto hwc = image.detach()
                   .to(torch::kFloat32)
                   .clamp(0.0, 1.0)
                   .mul(255.0)
                   .round()
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
    cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)),
                CV_8UC3, hwc.data_ptr<std::uint8_t>());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path, bgr)) {
        throw std::runtime_error("write_image: cannot write '" + path + "'");
    }
}

torch::Tensor crop_region(const torch::Tensor& image, std::int64_t x,
                          std::int64_t y, std::int64_t w, std::int64_t h) {
    TORCH_CHECK(image.dim() == 3, "crop_region: expected CHW tensor");
    TORCH_CHECK(w > 0 && h > 0, "crop_region: extent must be positive");
    const std::int64_t c = image.size(0);
    const std::int64_t ih = image.size(1);
    const std::int64_t iw = image.size(2);
    auto out = torch::zeros({c, h, w}, image.options());
    const std::int64_t sx0 = std::max<std::int64_t>(x, 0);
    const std::int64_t sy0 = std::max<std::int64_t>(y, 0);
    const std::int64_t sx1 = std::min(x + w, iw);
    const std::int64_t sy1 = std::min(y + h, ih);
    if (sx0 < sx1 && sy0 < sy1) {
        out.index_put_({torch::indexing::Slice(),
                        torch::indexing::Slice(sy0 - y, sy1 - y),
                        torch::indexing::Slice(sx0 - x, sx1 - x)},
                       image.index({torch::indexing::Slice(),
                                    torch::indexing::Slice(sy0, sy1),
                                    torch::indexing::Slice(sx0, sx1)}));
    }
    return out;
}

torch::Tensor draw_detections(const torch::Tensor& image,
                              const std::vector<geom::Detection>& dets) {
    auto hwc = image.detach()
                   .to(torch::kFloat32)
                   .clamp(0.0, 1.0)
                   .mul(255.0)
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
    cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)),
                CV_8UC3, hwc.data_ptr<std::uint8_t>());
    cv::Mat canvas = rgb.clone();
    const cv::Scalar green(0, 255, 0);  // RGB order in this buffer
    for (const auto& d : dets) {
        cv::rectangle(canvas,
                      cv::Point(static_cast<int>(std::lround(d.box.x)),
                                static_cast<int>(std::lround(d.box.y))),
                      cv::Point(static_cast<int>(std::lround(d.box.x2())),
                                static_cast<int>(std::lround(d.box.y2()))),
                      green, 2);
    }
    auto t = torch::from_blob(canvas.data, {canvas.rows, canvas.cols, 3},
                              torch::kUInt8)
                 .permute({2, 0, 1})
                 .to(torch::kFloat32)
                 .div(255.0);
    return t.clone();
}

}  // namespace mitodet::io
