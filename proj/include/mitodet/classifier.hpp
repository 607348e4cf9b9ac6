#pragma once

/// Stage-2 precision filter: a ConvNeXt classifier over 64x64 candidate
/// crops, trained with the hybrid focal + contrastive loss and early
/// stopping on validation F1.

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mitodet/augment.hpp"
#include "mitodet/config.hpp"
#include "mitodet/geometry.hpp"
#include "mitodet/losses.hpp"

namespace mitodet::nn {

struct ClassifierConfig {
    std::int64_t input_size = 64;
    std::vector<std::int64_t> depths = {3, 3, 9, 3};
    std::vector<std::int64_t> dims = {96, 192, 384, 768};
    std::vector<double> norm_mean = {0.485, 0.456, 0.406};
    std::vector<double> norm_std = {0.229, 0.224, 0.225};
    double crop_margin = 0.0;  // context margin as a fraction of box size

    static ClassifierConfig from(const Config& cfg);
};

/// LayerNorm over the channel dimension of (B,C,H,W) tensors.
class ChannelNormImpl : public torch::nn::Module {
  public:
    explicit ChannelNormImpl(std::int64_t channels, double eps = 1e-6);
    torch::Tensor forward(const torch::Tensor& x);

  private:
    torch::Tensor weight_, bias_;
    double eps_;
};
TORCH_MODULE(ChannelNorm);

/// ConvNeXt block: 7x7 depthwise conv, layer norm, pointwise expansion with
/// GELU, pointwise projection, learnable per-channel scale, residual.
class ConvNeXtBlockImpl : public torch::nn::Module {
  public:
    explicit ConvNeXtBlockImpl(std::int64_t dim);
    torch::Tensor forward(const torch::Tensor& x);

  private:
    torch::nn::Conv2d dwconv_{nullptr};
    torch::nn::LayerNorm norm_{nullptr};
    torch::nn::Linear pw1_{nullptr}, pw2_{nullptr};
    torch::Tensor scale_;
};
TORCH_MODULE(ConvNeXtBlock);

class ConvNeXtClassifierImpl : public torch::nn::Module {
  public:
    explicit ConvNeXtClassifierImpl(const ClassifierConfig& cfg);

    /// 2-class logits for normalized (B,3,S,S) crops.
    torch::Tensor forward(const torch::Tensor& x);

    struct Output {
        torch::Tensor logits;    // (B,2)
        torch::Tensor features;  // (B,D) L2-normalized penultimate features
    };
    Output forward_with_features(const torch::Tensor& x);

    const ClassifierConfig& config() const { return cfg_; }

  private:
    torch::Tensor backbone(const torch::Tensor& x);

    ClassifierConfig cfg_;
    torch::nn::Conv2d stem_conv_{nullptr};
    ChannelNorm stem_norm_{nullptr};
    std::vector<ChannelNorm> down_norms_;
    std::vector<torch::nn::Conv2d> down_convs_;
    std::vector<ConvNeXtBlock> blocks_;
    std::vector<std::int64_t> stage_of_block_;
    torch::nn::LayerNorm head_norm_{nullptr};
    torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(ConvNeXtClassifier);

/// Normalizes raw [0,1] crops with the configured per-channel mean/std.
torch::Tensor normalize_crops(const torch::Tensor& crops,
                              const ClassifierConfig& cfg);

/// Extracts the candidate crop for a proposal box from its source patch:
/// box (plus optional margin) cut out with zero padding, resized to
/// input_size with bilinear interpolation. Returns a raw [0,1] crop.
torch::Tensor extract_candidate(const torch::Tensor& patch, const geom::Box& box,
                                const ClassifierConfig& cfg);

/// Mitosis probability per crop (softmax over the 2-class head). Accepts raw
/// [0,1] crops and normalizes internally; empty input yields an empty tensor.
torch::Tensor classify(ConvNeXtClassifier& model, const torch::Tensor& crops);

struct ClassifierTrainOptions {
    std::int64_t epochs = 400;
    std::int64_t patience = 60;
    std::int64_t batch_size = 64;
    double lr_initial = 3e-4;
    double lr_final = 1e-6;
    double weight_decay = 1e-5;
    bool augment = true;
    aug::ClsAugmentProfile profile;
    std::uint64_t seed = 0;
    bool verbose = false;

    static ClassifierTrainOptions from(const Config& cfg);
};

struct ClassifierEpochStats {
    double loss_total = 0, loss_focal = 0, loss_contrastive = 0, val_f1 = 0;
};

struct ClassifierHistory {
    std::vector<ClassifierEpochStats> epochs;
    std::int64_t best_epoch = -1;
    double best_val_f1 = 0.0;
    std::string to_csv() const;  // epoch,loss_total,loss_focal,loss_contrastive,val_f1
};

/// AdamW + cosine annealing, early stop when validation F1 fails to improve
/// for `patience` epochs; the best-F1 parameters are restored into `model`.
/// Throws std::invalid_argument when the training set misses a class.
ClassifierHistory train_classifier(ConvNeXtClassifier& model,
                                   const std::vector<aug::ClsSample>& train,
                                   const std::vector<aug::ClsSample>& val,
                                   const HybridLossParams& loss_params,
                                   const ClassifierTrainOptions& opts);

void save_classifier(ConvNeXtClassifier& model, const std::string& path_stem);
ConvNeXtClassifier load_classifier(const std::string& path_stem);

/// Builds labeled training crops for the classifier: proposals from
/// `propose_fn` on each patch are labeled positive when their center lies
/// within `match_distance` of a ground-truth center; every ground truth also
/// contributes a centered positive crop, and random background crops top up
/// the negatives to at least the positive count.
struct CandidateSet {
    std::vector<aug::ClsSample> samples;
    std::int64_t from_proposals = 0;
    std::int64_t gt_positives = 0;
    std::int64_t random_negatives = 0;
};
CandidateSet build_candidate_set(
    const std::vector<aug::DetSample>& patches,
    const std::function<std::vector<geom::Detection>(const torch::Tensor&)>& propose_fn,
    const ClassifierConfig& cfg, double match_distance, std::uint64_t seed);

}  // namespace mitodet::nn
