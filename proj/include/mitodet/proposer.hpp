#pragma once

/// Stage-1 recall-oriented proposal detector: an anchor-free multi-scale
/// detector with P3/P4/P5 heads at strides 8/16/32. The improved build swaps
/// the P3/P4/P5 C3k2 blocks for their LSConv variants, places C2PSA with EMA
/// attention at the backbone-neck fusion point, and applies EMA attention to
/// each head input. A baseline flag builds the unmodified topology.

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include "mitodet/augment.hpp"
#include "mitodet/blocks.hpp"
#include "mitodet/config.hpp"
#include "mitodet/geometry.hpp"

namespace mitodet::nn {

struct ProposerConfig {
    std::int64_t input_size = 512;
    double conf_threshold = 0.2;
    double nms_iou = 0.3;
    double width_mult = 0.25;
    double depth_mult = 0.33;
    std::int64_t reg_max = 16;
    std::int64_t ema_groups = 32;
    std::int64_t n_psa_blocks = 1;
    std::int64_t lsconv_large_kernel = 7;
    std::int64_t lsconv_small_kernel = 3;
    bool improved = true;

    static ProposerConfig from(const Config& cfg);

    /// Stage widths {c1..c5} after the width multiplier (multiples of 8).
    std::vector<std::int64_t> channels() const;
    /// Bottlenecks per C3k2 block after the depth multiplier.
    std::int64_t depth() const;

    static constexpr std::int64_t kStrides[3] = {8, 16, 32};
};

/// Raw per-level head outputs: box distance logits (B, 4*reg_max, H, W) and
/// class logits (B, 1, H, W).
struct LevelPreds {
    torch::Tensor box_logits;
    torch::Tensor cls_logits;
    std::int64_t stride = 8;
};

class ProposerModelImpl : public torch::nn::Module {
  public:
    explicit ProposerModelImpl(const ProposerConfig& cfg);

    std::vector<LevelPreds> forward(const torch::Tensor& x);
    const ProposerConfig& config() const { return cfg_; }

  private:
    torch::Tensor upsample2x(const torch::Tensor& x);

    ProposerConfig cfg_;
    ConvNormAct stem_{nullptr}, down2_{nullptr}, down3_{nullptr}, down4_{nullptr},
        down5_{nullptr};
    C3k2 stage2_{nullptr}, stage3_{nullptr}, stage4_{nullptr}, stage5_{nullptr};
    SPPF sppf_{nullptr};
    C2PSA fusion_psa_{nullptr};
    C3k2 neck_up_p4_{nullptr}, neck_p3_{nullptr}, neck_p4_{nullptr}, neck_p5_{nullptr};
    ConvNormAct neck_down_a_{nullptr}, neck_down_b_{nullptr};
    std::vector<EMAAttention> head_ema_;
    std::vector<ConvNormAct> head_box_conv_, head_cls_conv_;
    std::vector<torch::nn::Conv2d> head_box_out_, head_cls_out_;
};
TORCH_MODULE(ProposerModel);

/// Structural facts gathered by walking the module graph.
struct StructuralAudit {
    bool lsconv_at_p3 = false;
    bool lsconv_at_p4 = false;
    bool lsconv_at_p5 = false;
    int c2psa_ema_count = 0;
    int head_ema_count = 0;
    int lsconv_total = 0;
    std::string summary() const;
};
StructuralAudit audit_model(ProposerModel& model);

/// Shapes of every head output for a dummy input, e.g.
/// "p3:box(1,64,64,64),cls(1,1,64,64);p4:...".
std::string prediction_signature(ProposerModel& model);

/// Decodes one batch item's raw predictions: DFL expectation of the distance
/// bins around each anchor point, sigmoid class score, keep score >=
/// conf_threshold. Boxes are clipped to the input square. No NMS here.
std::vector<geom::Detection> decode_predictions(const std::vector<LevelPreds>& preds,
                                                std::int64_t batch_index,
                                                const ProposerConfig& cfg,
                                                double conf_threshold);

/// Inference on one 512x512 patch: decode, confidence-filter, greedy NMS.
/// `conf_override` < 0 uses cfg.conf_threshold.
std::vector<geom::Detection> propose(ProposerModel& model,
                                     const torch::Tensor& patch,
                                     double conf_override = -1.0);

struct ProposerTrainOptions {
    std::int64_t epochs = 300;
    std::int64_t batch_size = 960;
    double lr_initial = 1e-3;
    double lr_final = 1e-5;
    double weight_decay = 5e-4;
    std::int64_t patches_per_epoch = 0;  // 0 = all
    double loss_box = 7.5;
    double loss_cls = 0.5;
    double loss_dfl = 1.5;
    bool augment = true;
    aug::DetAugmentProfile profile;
    std::uint64_t seed = 0;
    bool verbose = false;

    static ProposerTrainOptions from(const Config& cfg);
};

struct ProposerEpochStats {
    double lr = 0;
    double loss_box = 0, loss_cls = 0, loss_dfl = 0;
    double val_p = 0, val_r = 0, val_f1 = 0;
};

struct ProposerHistory {
    std::vector<ProposerEpochStats> epochs;
    std::string to_csv() const;  // epoch,loss_box,loss_cls,loss_dfl,val_p,val_r,val_f1
};

/// AdamW with cosine annealing and the composite detection loss (CIoU box
/// term, BCE classification, distribution-focal regression). Mosaic runs
/// only while epoch < profile.mosaic_epochs. Validation detections are
/// matched to box centers within 30 px for the per-epoch P/R/F1 columns.
ProposerHistory train_proposer(ProposerModel& model,
                               const std::vector<aug::DetSample>& train,
                               const std::vector<aug::DetSample>& val,
                               const ProposerTrainOptions& opts);

void save_proposer(ProposerModel& model, const std::string& path_stem);
ProposerModel load_proposer(const std::string& path_stem);

}  // namespace mitodet::nn
