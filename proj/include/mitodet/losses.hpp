#pragma once

/// Hybrid classifier objective: class-weighted focal loss plus a
/// temperature-scaled contrastive term over L2-normalized features,
/// total = focal + lambda * contrastive.

#include <torch/torch.h>

#include <cstdint>
#include <vector>

#include "mitodet/config.hpp"
#include "mitodet/rng.hpp"

namespace mitodet::nn {

/// Class ids used throughout the classifier: 0 = mitosis, 1 = background.
inline constexpr std::int64_t kMitosisClass = 0;
inline constexpr std::int64_t kBackgroundClass = 1;

struct HybridLossParams {
    double alpha_mitosis = 1.0;
    double alpha_background = 1.5;
    double gamma = 2.0;
    double temperature = 0.2;
    double lambda = 1.0;
    bool contrastive_include_self = true;

    static HybridLossParams from(const Config& cfg);
};

/// Probability of each sample's true class from 2-class logits.
torch::Tensor true_class_probs(const torch::Tensor& logits,
                               const torch::Tensor& labels);

/// -(1/N) sum alpha_c (1 - p_c)^gamma log p_c over true-class probabilities.
/// Probabilities <= 0 are clamped to 1e-7.
torch::Tensor focal_loss_from_probs(const torch::Tensor& probs,
                                    const torch::Tensor& labels,
                                    const HybridLossParams& params);

torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                         const HybridLossParams& params);

/// Uniformly picks one same-class partner per sample; -1 where a sample has
/// no in-batch positive.
std::vector<std::int64_t> sample_positive_indices(const torch::Tensor& labels,
                                                  Rng& rng);

struct ContrastiveResult {
    torch::Tensor loss;
    bool no_positives = false;  // every sample lacked a positive partner
};

/// -(1/N') sum log( exp(sim(f_i, f_pos)/T) / sum_j exp(sim(f_i, f_j)/T) )
/// with cosine similarity over internally L2-normalized features. Samples
/// with positive index -1 are skipped and N' adjusted; when all are skipped
/// the loss is 0 and `no_positives` is set. The denominator runs over every
/// j including i unless contrastive_include_self is false.
ContrastiveResult contrastive_loss(const torch::Tensor& features,
                                   const std::vector<std::int64_t>& positives,
                                   const HybridLossParams& params);

struct TotalLossResult {
    torch::Tensor total;
    torch::Tensor focal;
    torch::Tensor contrastive;
    bool no_positives = false;
};

TotalLossResult total_loss(const torch::Tensor& logits,
                           const torch::Tensor& features,
                           const torch::Tensor& labels,
                           const std::vector<std::int64_t>& positives,
                           const HybridLossParams& params);

/// Cosine annealing over whole epochs: lr(0) = lr_initial and
/// lr(total_epochs - 1) = lr_final.
double cosine_lr(std::int64_t epoch, std::int64_t total_epochs, double lr_initial,
                 double lr_final);

}  // namespace mitodet::nn
