#include "mitodet/losses.hpp"

#include <cmath>

namespace F = torch::nn::functional;

namespace mitodet::nn {

HybridLossParams HybridLossParams::from(const Config& cfg) {
    HybridLossParams p;
    p.alpha_mitosis = cfg.get_double("loss.alpha_mitosis");
    p.alpha_background = cfg.get_double("loss.alpha_background");
    p.gamma = cfg.get_double("loss.gamma");
    p.temperature = cfg.get_double("loss.temperature");
    p.lambda = cfg.get_double("loss.lambda");
    p.contrastive_include_self = cfg.get_bool("loss.contrastive_include_self");
    return p;
}

torch::Tensor true_class_probs(const torch::Tensor& logits,
                               const torch::Tensor& labels) {
    TORCH_CHECK(logits.dim() == 2, "true_class_probs: expected (N,classes) logits");
    auto probs = logits.softmax(1);
    return probs.gather(1, labels.view({-1, 1})).squeeze(1);
}

torch::Tensor focal_loss_from_probs(const torch::Tensor& probs,
                                    const torch::Tensor& labels,
                                    const HybridLossParams& params) {
    TORCH_CHECK(probs.numel() > 0, "focal_loss: empty batch");
    auto p = probs.clamp_min(1e-7);
    auto alpha = torch::where(labels == kMitosisClass,
                              torch::full_like(p, params.alpha_mitosis),
                              torch::full_like(p, params.alpha_background));
    auto loss = -alpha * (1.0 - p).pow(params.gamma) * p.log();
    return loss.mean();
}

torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& labels,
                         const HybridLossParams& params) {
    return focal_loss_from_probs(true_class_probs(logits, labels), labels, params);
}

std::vector<std::int64_t> sample_positive_indices(const torch::Tensor& labels,
                                                  Rng& rng) {
    const auto n = labels.size(0);
    auto acc = labels.accessor<std::int64_t, 1>();
    std::vector<std::int64_t> out(static_cast<std::size_t>(n), -1);
    for (std::int64_t i = 0; i < n; ++i) {
        std::vector<std::int64_t> same;
        for (std::int64_t j = 0; j < n; ++j) {
            if (j != i && acc[j] == acc[i]) same.push_back(j);
        }
        if (!same.empty()) {
            out[static_cast<std::size_t>(i)] =
                same[static_cast<std::size_t>(uniform_int(
                    rng, 0, static_cast<std::int64_t>(same.size()) - 1))];
        }
    }
    return out;
}

ContrastiveResult contrastive_loss(const torch::Tensor& features,
                                   const std::vector<std::int64_t>& positives,
                                   const HybridLossParams& params) {
    TORCH_CHECK(features.dim() == 2, "contrastive_loss: expected (N,D) features");
    const auto n = features.size(0);
    TORCH_CHECK(static_cast<std::int64_t>(positives.size()) == n,
                "contrastive_loss: positives size mismatch");
    TORCH_CHECK(params.temperature > 0, "contrastive_loss: temperature must be > 0");

    auto f = F::normalize(features, F::NormalizeFuncOptions().dim(1).eps(1e-12));
    auto sim = torch::matmul(f, f.t()) / params.temperature;  // (N,N)

    if (!params.contrastive_include_self) {
        sim = sim.masked_fill(
            torch::eye(n, torch::TensorOptions().dtype(torch::kBool)), -1e30);
    }
    auto logsumexp = sim.logsumexp(1);  // (N,)

    std::vector<torch::Tensor> terms;
    for (std::int64_t i = 0; i < n; ++i) {
        const auto pos = positives[static_cast<std::size_t>(i)];
        if (pos < 0) continue;
        terms.push_back(logsumexp[i] - sim[i][pos]);
    }
    ContrastiveResult res;
    if (terms.empty()) {
        res.loss = torch::zeros({}, features.options());
        res.no_positives = true;
        return res;
    }
    res.loss = torch::stack(terms).mean();
    return res;
}

TotalLossResult total_loss(const torch::Tensor& logits,
                           const torch::Tensor& features,
                           const torch::Tensor& labels,
                           const std::vector<std::int64_t>& positives,
                           const HybridLossParams& params) {
    TotalLossResult res;
    res.focal = focal_loss(logits, labels, params);
    auto con = contrastive_loss(features, positives, params);
    res.contrastive = con.loss;
    res.no_positives = con.no_positives;
    res.total = res.focal + params.lambda * res.contrastive;
    return res;
}

double cosine_lr(std::int64_t epoch, std::int64_t total_epochs, double lr_initial,
                 double lr_final) {
    if (total_epochs <= 1) return lr_initial;
    const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
    return lr_final + 0.5 * (lr_initial - lr_final) * (1.0 + std::cos(M_PI * t));
}

}  // namespace mitodet::nn
