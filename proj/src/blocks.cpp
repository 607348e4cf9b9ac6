#include "mitodet/blocks.hpp"

namespace F = torch::nn::functional;

namespace mitodet::nn {

std::int64_t group_count(std::int64_t channels, std::int64_t cap) {
    for (std::int64_t g = std::min(cap, channels); g > 1; --g) {
        if (channels % g == 0) return g;
    }
    return 1;
}

ConvNormActImpl::ConvNormActImpl(std::int64_t in_ch, std::int64_t out_ch,
                                 std::int64_t kernel, std::int64_t stride) {
    conv_ = register_module(
        "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, kernel)
                                      .stride(stride)
                                      .padding(kernel / 2)
                                      .bias(false)));
    norm_ = register_module(
        "norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(
                    group_count(out_ch), out_ch)));
}

torch::Tensor ConvNormActImpl::forward(const torch::Tensor& x) {
    return torch::silu(norm_->forward(conv_->forward(x)));
}

LSConvImpl::LSConvImpl(std::int64_t channels, std::int64_t large_kernel,
                       std::int64_t small_kernel)
    : channels_(channels), small_kernel_(small_kernel) {
    TORCH_CHECK(large_kernel % 2 == 1 && small_kernel % 2 == 1,
                "LSConv: kernels must be odd");
    dyn_groups_ = group_count(channels, 8);
    dw_large_ = register_module(
        "dw_large",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, large_kernel)
                              .padding(large_kernel / 2)
                              .groups(channels)
                              .bias(false)));
    norm_ctx_ = register_module(
        "norm_ctx", torch::nn::GroupNorm(torch::nn::GroupNormOptions(
                        group_count(channels), channels)));
    const std::int64_t k2 = small_kernel * small_kernel;
    kernel_proj_ = register_module(
        "kernel_proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(
                           channels, dyn_groups_ * k2, 1)));
    mix_ = register_module(
        "mix", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)
                                     .bias(false)));
    norm_out_ = register_module(
        "norm_out", torch::nn::GroupNorm(torch::nn::GroupNormOptions(
                        group_count(channels), channels)));
}

torch::Tensor LSConvImpl::forward(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 4, "LSConv: expected (B,C,H,W) input");
    TORCH_CHECK(x.size(1) == channels_, "LSConv: channel mismatch, expected ",
                channels_, " got ", x.size(1));
    const auto b = x.size(0);
    const auto h = x.size(2);
    const auto w = x.size(3);
    const auto k2 = small_kernel_ * small_kernel_;

    // Large-kernel perception: depthwise context.
    auto ctx = torch::silu(norm_ctx_->forward(dw_large_->forward(x)));

    // Per-position grouped kernels from the context, softmax over taps.
    auto kernels = kernel_proj_->forward(ctx)
                       .view({b, dyn_groups_, 1, k2, h * w})
                       .softmax(3);

    // Small-kernel aggregation with the dynamic kernels.
    auto cols = F::unfold(x, F::UnfoldFuncOptions({small_kernel_, small_kernel_})
                                 .padding(small_kernel_ / 2))
                    .view({b, dyn_groups_, channels_ / dyn_groups_, k2, h * w});
    auto agg = (cols * kernels).sum(3).view({b, channels_, h, w});

    return torch::silu(norm_out_->forward(mix_->forward(agg)));
}

EMAAttentionImpl::EMAAttentionImpl(std::int64_t channels, std::int64_t groups)
    : channels_(channels), groups_(groups) {
    TORCH_CHECK(groups > 0, "EMAAttention: groups must be positive");
    TORCH_CHECK(channels % groups == 0,
                "EMAAttention: channels (", channels,
                ") must be divisible by groups (", groups, ")");
    const std::int64_t cg = channels / groups;
    conv1x1_ = register_module(
        "conv1x1", torch::nn::Conv2d(torch::nn::Conv2dOptions(cg, cg, 1)));
    conv3x3_ = register_module(
        "conv3x3",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(cg, cg, 3).padding(1)));
    gn_ = register_module(
        "gn", torch::nn::GroupNorm(torch::nn::GroupNormOptions(cg, cg)));
    // Positive initial bias keeps the untrained gate near pass-through.
    gate_bias_ = register_parameter("gate_bias", torch::full({1}, 2.0));
}

torch::Tensor EMAAttentionImpl::gate(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 4, "EMAAttention: expected (B,C,H,W) input");
    TORCH_CHECK(x.size(1) == channels_, "EMAAttention: channel mismatch");
    const auto b = x.size(0);
    const auto h = x.size(2);
    const auto w = x.size(3);
    const auto cg = channels_ / groups_;

    auto xg = x.reshape({b * groups_, cg, h, w});
    auto x_h = xg.mean(3, /*keepdim=*/true);                       // (BG,cg,H,1)
    auto x_w = xg.mean(2, /*keepdim=*/true).permute({0, 1, 3, 2}); // (BG,cg,W,1)
    auto hw = conv1x1_->forward(torch::cat({x_h, x_w}, 2));
    auto parts = torch::split(hw, {h, w}, 2);
    auto gate_h = parts[0].sigmoid();
    auto gate_w = parts[1].permute({0, 1, 3, 2}).sigmoid();

    auto x1 = gn_->forward(xg * gate_h * gate_w);
    auto x2 = conv3x3_->forward(xg);

    auto pooled1 = x1.mean({2, 3}).reshape({b * groups_, 1, cg}).softmax(2);
    auto pooled2 = x2.mean({2, 3}).reshape({b * groups_, 1, cg}).softmax(2);
    auto flat1 = x1.reshape({b * groups_, cg, h * w});
    auto flat2 = x2.reshape({b * groups_, cg, h * w});

    auto weights = (torch::matmul(pooled1, flat2) + torch::matmul(pooled2, flat1))
                       .reshape({b * groups_, 1, h, w});
    return (weights + gate_bias_).sigmoid().reshape({b, groups_, 1, h, w});
}

torch::Tensor EMAAttentionImpl::forward(const torch::Tensor& x) {
    const auto b = x.size(0);
    const auto h = x.size(2);
    const auto w = x.size(3);
    auto g = gate(x);
    auto xg = x.reshape({b, groups_, channels_ / groups_, h, w});
    return (xg * g).reshape({b, channels_, h, w});
}

BottleneckImpl::BottleneckImpl(std::int64_t channels, bool use_lsconv,
                               const BlockConfig& cfg)
    : use_lsconv_(use_lsconv) {
    if (use_lsconv_) {
        ls1_ = register_module("ls1", LSConv(channels, cfg.lsconv_large_kernel,
                                             cfg.lsconv_small_kernel));
        ls2_ = register_module("ls2", LSConv(channels, cfg.lsconv_large_kernel,
                                             cfg.lsconv_small_kernel));
    } else {
        cv1_ = register_module("cv1", ConvNormAct(channels, channels, 3));
        cv2_ = register_module("cv2", ConvNormAct(channels, channels, 3));
    }
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x) {
    auto y = use_lsconv_ ? ls2_->forward(ls1_->forward(x))
                         : cv2_->forward(cv1_->forward(x));
    return x + y;
}

C3k2Impl::C3k2Impl(std::int64_t in_ch, std::int64_t out_ch,
                   std::int64_t n_bottlenecks, bool use_lsconv,
                   const BlockConfig& cfg)
    : hidden_(out_ch / 2), use_lsconv_(use_lsconv) {
    TORCH_CHECK(out_ch % 2 == 0, "C3k2: output channels must be even");
    cv1_ = register_module("cv1", ConvNormAct(in_ch, 2 * hidden_, 1));
    for (std::int64_t i = 0; i < n_bottlenecks; ++i) {
        bottlenecks_.push_back(Bottleneck(hidden_, use_lsconv, cfg));
        register_module("m" + std::to_string(i), bottlenecks_.back());
    }
    cv2_ = register_module(
        "cv2", ConvNormAct((2 + n_bottlenecks) * hidden_, out_ch, 1));
}

torch::Tensor C3k2Impl::forward(const torch::Tensor& x) {
    auto y = cv1_->forward(x);
    std::vector<torch::Tensor> parts = {y.narrow(1, 0, hidden_),
                                        y.narrow(1, hidden_, hidden_)};
    for (auto& m : bottlenecks_) {
        parts.push_back(m->forward(parts.back()));
    }
    return cv2_->forward(torch::cat(parts, 1));
}

SPPFImpl::SPPFImpl(std::int64_t channels) {
    const std::int64_t hidden = std::max<std::int64_t>(channels / 2, 1);
    cv1_ = register_module("cv1", ConvNormAct(channels, hidden, 1));
    cv2_ = register_module("cv2", ConvNormAct(4 * hidden, channels, 1));
}

torch::Tensor SPPFImpl::forward(const torch::Tensor& x) {
    auto y = cv1_->forward(x);
    auto opts = F::MaxPool2dFuncOptions(5).stride(1).padding(2);
    auto p1 = F::max_pool2d(y, opts);
    auto p2 = F::max_pool2d(p1, opts);
    auto p3 = F::max_pool2d(p2, opts);
    return cv2_->forward(torch::cat({y, p1, p2, p3}, 1));
}

PSABlockImpl::PSABlockImpl(std::int64_t channels, bool use_ema,
                           std::int64_t ema_groups)
    : use_ema_(use_ema), channels_(channels) {
    if (use_ema_) {
        ema_ = register_module("ema", EMAAttention(channels, ema_groups));
    } else {
        qkv_ = register_module(
            "qkv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 3 * channels, 1)));
        attn_out_ = register_module(
            "attn_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
    }
    ffn1_ = register_module(
        "ffn1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 2 * channels, 1)));
    ffn2_ = register_module(
        "ffn2", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * channels, channels, 1)));
    ffn_norm_ = register_module(
        "ffn_norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(
                        group_count(channels), channels)));
}

torch::Tensor PSABlockImpl::attend(const torch::Tensor& x) {
    if (use_ema_) return ema_->forward(x);
    // Single-head self-attention over spatial positions.
    const auto b = x.size(0);
    const auto h = x.size(2);
    const auto w = x.size(3);
    auto qkv = qkv_->forward(x).reshape({b, 3, channels_, h * w});
    auto q = qkv.select(1, 0);
    auto k = qkv.select(1, 1);
    auto v = qkv.select(1, 2);
    const double scale = 1.0 / std::sqrt(static_cast<double>(channels_));
    auto attn = torch::matmul(q.transpose(1, 2), k).mul(scale).softmax(2);
    auto out = torch::matmul(v, attn.transpose(1, 2)).reshape({b, channels_, h, w});
    return attn_out_->forward(out);
}

torch::Tensor PSABlockImpl::forward(const torch::Tensor& x) {
    auto y = x + attend(x);
    auto f = ffn2_->forward(torch::silu(ffn1_->forward(ffn_norm_->forward(y))));
    return y + f;
}

C2PSAImpl::C2PSAImpl(std::int64_t channels, std::int64_t n_blocks, bool use_ema,
                     std::int64_t ema_groups)
    : channels_(channels), use_ema_(use_ema) {
    TORCH_CHECK(channels % 2 == 0, "C2PSA: channels must be even");
    const std::int64_t half = channels / 2;
    if (use_ema) {
        TORCH_CHECK(half % ema_groups == 0,
                    "C2PSA: attended half (", half,
                    ") must be divisible by ema_groups (", ema_groups, ")");
    }
    cv1_ = register_module("cv1", ConvNormAct(half, half, 1));
    for (std::int64_t i = 0; i < n_blocks; ++i) {
        blocks_.push_back(PSABlock(half, use_ema, ema_groups));
        register_module("psa" + std::to_string(i), blocks_.back());
    }
}

torch::Tensor C2PSAImpl::forward(const torch::Tensor& x) {
    TORCH_CHECK(x.size(1) == channels_, "C2PSA: channel mismatch");
    const std::int64_t half = channels_ / 2;
    auto a = x.narrow(1, 0, half);
    auto b = cv1_->forward(x.narrow(1, half, half));
    for (auto& blk : blocks_) b = blk->forward(b);
    return torch::cat({a, b}, 1);
}

}  // namespace mitodet::nn
