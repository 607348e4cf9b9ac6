#pragma once

/// Neural building blocks for the proposal network: LSConv (large-kernel
/// perception + small-kernel dynamic aggregation), EMA attention (grouped
/// cross-spatial reweighting), the C3k2 split/bottleneck/fuse block and its
/// LSConv variant, SPPF, and the C2PSA attention module with standard or EMA
/// attention units. All blocks preserve (B,C,H,W) shape.

#include <torch/torch.h>

#include <cstdint>

namespace mitodet::nn {

struct BlockConfig {
    std::int64_t channels = 64;
    std::int64_t ema_groups = 32;
    std::int64_t lsconv_large_kernel = 7;
    std::int64_t lsconv_small_kernel = 3;
    std::int64_t n_psa_blocks = 1;
};

/// Largest divisor of `channels` not exceeding `cap`; used to size group
/// normalization and grouped convolutions for arbitrary widths.
std::int64_t group_count(std::int64_t channels, std::int64_t cap = 8);

/// Conv2d + GroupNorm + SiLU.
class ConvNormActImpl : public torch::nn::Module {
  public:
    ConvNormActImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t kernel,
                    std::int64_t stride = 1);
    torch::Tensor forward(const torch::Tensor& x);

  private:
    torch::nn::Conv2d conv_{nullptr};
    torch::nn::GroupNorm norm_{nullptr};
};
TORCH_MODULE(ConvNormAct);

/// Large-kernel depthwise context branch whose output generates per-position
/// grouped kernels (softmax over kernel taps) for a small-kernel dynamic
/// aggregation, followed by pointwise mixing. Shape preserving.
class LSConvImpl : public torch::nn::Module {
  public:
    LSConvImpl(std::int64_t channels, std::int64_t large_kernel = 7,
               std::int64_t small_kernel = 3);
    torch::Tensor forward(const torch::Tensor& x);

    std::int64_t channels() const { return channels_; }

  private:
    std::int64_t channels_;
    std::int64_t small_kernel_;
    std::int64_t dyn_groups_;
    torch::nn::Conv2d dw_large_{nullptr};
    torch::nn::GroupNorm norm_ctx_{nullptr};
    torch::nn::Conv2d kernel_proj_{nullptr};
    torch::nn::Conv2d mix_{nullptr};
    torch::nn::GroupNorm norm_out_{nullptr};
};
TORCH_MODULE(LSConv);

/// Efficient multi-scale attention: channels split into groups, parallel
/// 1x1 (with H- and W-pooled directional gates) and 3x3 branches, combined by
/// cross-spatial softmax-weighted aggregation into a sigmoid gate that
/// rescales the input. The gate bias starts positive so an untrained block is
/// close to a pass-through.
class EMAAttentionImpl : public torch::nn::Module {
  public:
    EMAAttentionImpl(std::int64_t channels, std::int64_t groups = 32);
    torch::Tensor forward(const torch::Tensor& x);

    /// The sigmoid gate applied to the input, exposed for inspection.
    torch::Tensor gate(const torch::Tensor& x);

  private:
    std::int64_t channels_;
    std::int64_t groups_;
    torch::nn::Conv2d conv1x1_{nullptr};
    torch::nn::Conv2d conv3x3_{nullptr};
    torch::nn::GroupNorm gn_{nullptr};
    torch::Tensor gate_bias_;
};
TORCH_MODULE(EMAAttention);

/// Two stacked 3x3 convolutions (or LSConvs) with a residual connection.
class BottleneckImpl : public torch::nn::Module {
  public:
    BottleneckImpl(std::int64_t channels, bool use_lsconv,
                   const BlockConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);

  private:
    ConvNormAct cv1_{nullptr}, cv2_{nullptr};
    LSConv ls1_{nullptr}, ls2_{nullptr};
    bool use_lsconv_;
};
TORCH_MODULE(Bottleneck);

/// C3k2 topology: pointwise split, a stack of bottlenecks on one branch with
/// every intermediate output retained, concatenation, pointwise fuse. The
/// LSConv variant swaps the bottlenecks' spatial convolutions for LSConv.
class C3k2Impl : public torch::nn::Module {
  public:
    C3k2Impl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t n_bottlenecks,
             bool use_lsconv, const BlockConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);

    bool uses_lsconv() const { return use_lsconv_; }

  private:
    ConvNormAct cv1_{nullptr}, cv2_{nullptr};
    std::vector<Bottleneck> bottlenecks_;
    std::int64_t hidden_;
    bool use_lsconv_;
};
TORCH_MODULE(C3k2);

/// Spatial pyramid pooling (fast): three chained 5x5 max-pools concatenated.
class SPPFImpl : public torch::nn::Module {
  public:
    explicit SPPFImpl(std::int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);

  private:
    ConvNormAct cv1_{nullptr}, cv2_{nullptr};
};
TORCH_MODULE(SPPF);

/// Attention unit used inside C2PSA: attention + feed-forward network, both
/// with residual connections. `use_ema` selects EMA attention; otherwise a
/// compact single-head self-attention over spatial positions is used.
class PSABlockImpl : public torch::nn::Module {
  public:
    PSABlockImpl(std::int64_t channels, bool use_ema, std::int64_t ema_groups);
    torch::Tensor forward(const torch::Tensor& x);

    bool uses_ema() const { return use_ema_; }

  private:
    torch::Tensor attend(const torch::Tensor& x);

    bool use_ema_;
    std::int64_t channels_;
    EMAAttention ema_{nullptr};
    torch::nn::Conv2d qkv_{nullptr};
    torch::nn::Conv2d attn_out_{nullptr};
    torch::nn::Conv2d ffn1_{nullptr};
    torch::nn::Conv2d ffn2_{nullptr};
    torch::nn::GroupNorm ffn_norm_{nullptr};
};
TORCH_MODULE(PSABlock);

/// Channel-split attention module: one half passes through untouched, the
/// other goes through a 1x1 convolution and n attention units; halves are
/// concatenated back to the original width.
class C2PSAImpl : public torch::nn::Module {
  public:
    C2PSAImpl(std::int64_t channels, std::int64_t n_blocks, bool use_ema,
              std::int64_t ema_groups);
    torch::Tensor forward(const torch::Tensor& x);

    bool uses_ema() const { return use_ema_; }

  private:
    std::int64_t channels_;
    bool use_ema_;
    ConvNormAct cv1_{nullptr};
    std::vector<PSABlock> blocks_;
};
TORCH_MODULE(C2PSA);

}  // namespace mitodet::nn
