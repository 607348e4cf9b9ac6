#include "mitodet/classifier.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mitodet/image_io.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace mitodet::nn {

ClassifierConfig ClassifierConfig::from(const Config& cfg) {
    ClassifierConfig c;
    c.input_size = cfg.get_int("classifier.input_size");
    c.depths = cfg.get_int_list("classifier.depths");
    c.dims = cfg.get_int_list("classifier.dims");
    c.norm_mean = cfg.get_double_list("classifier.norm_mean");
    c.norm_std = cfg.get_double_list("classifier.norm_std");
    c.crop_margin = cfg.get_double("classifier.crop_margin");
    if (c.depths.size() != c.dims.size() || c.depths.empty()) {
        throw std::invalid_argument("classifier: depths/dims must be equal-length");
    }
    return c;
}

ChannelNormImpl::ChannelNormImpl(std::int64_t channels, double eps) : eps_(eps) {
    weight_ = register_parameter("weight", torch::ones({channels}));
    bias_ = register_parameter("bias", torch::zeros({channels}));
}

torch::Tensor ChannelNormImpl::forward(const torch::Tensor& x) {
    auto u = x.mean(1, /*keepdim=*/true);
    auto s = (x - u).pow(2).mean(1, /*keepdim=*/true);
    auto y = (x - u) / (s + eps_).sqrt();
    return weight_.view({1, -1, 1, 1}) * y + bias_.view({1, -1, 1, 1});
}

ConvNeXtBlockImpl::ConvNeXtBlockImpl(std::int64_t dim) {
    dwconv_ = register_module(
        "dwconv", torch::nn::Conv2d(
                      torch::nn::Conv2dOptions(dim, dim, 7).padding(3).groups(dim)));
    norm_ = register_module(
        "norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    pw1_ = register_module("pw1", torch::nn::Linear(dim, 4 * dim));
    pw2_ = register_module("pw2", torch::nn::Linear(4 * dim, dim));
    scale_ = register_parameter("scale", torch::full({dim}, 1e-6));
}

torch::Tensor ConvNeXtBlockImpl::forward(const torch::Tensor& x) {
    auto y = dwconv_->forward(x).permute({0, 2, 3, 1});  // (B,H,W,C)
    y = norm_->forward(y);
    y = pw2_->forward(torch::gelu(pw1_->forward(y)));
    y = (scale_ * y).permute({0, 3, 1, 2});
    return x + y;
}

ConvNeXtClassifierImpl::ConvNeXtClassifierImpl(const ClassifierConfig& cfg)
    : cfg_(cfg) {
    stem_conv_ = register_module(
        "stem_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, cfg.dims[0], 4)
                                           .stride(4)));
    stem_norm_ = register_module("stem_norm", ChannelNorm(cfg.dims[0]));
    const auto n_stages = static_cast<std::int64_t>(cfg.depths.size());
    for (std::int64_t s = 0; s < n_stages; ++s) {
        if (s > 0) {
            down_norms_.push_back(ChannelNorm(cfg.dims[s - 1]));
            register_module("down_norm" + std::to_string(s), down_norms_.back());
            down_convs_.push_back(torch::nn::Conv2d(
                torch::nn::Conv2dOptions(cfg.dims[s - 1], cfg.dims[s], 2).stride(2)));
            register_module("down_conv" + std::to_string(s), down_convs_.back());
        }
        for (std::int64_t b = 0; b < cfg.depths[s]; ++b) {
            blocks_.push_back(ConvNeXtBlock(cfg.dims[s]));
            stage_of_block_.push_back(s);
            register_module("stage" + std::to_string(s) + "_block" + std::to_string(b),
                            blocks_.back());
        }
    }
    head_norm_ = register_module(
        "head_norm",
        torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.dims.back()})));
    head_ = register_module("head", torch::nn::Linear(cfg.dims.back(), 2));
}

torch::Tensor ConvNeXtClassifierImpl::backbone(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 4 && x.size(1) == 3 && x.size(2) == cfg_.input_size &&
                    x.size(3) == cfg_.input_size,
                "classifier: expected (B,3,", cfg_.input_size, ",",
                cfg_.input_size, ") input");
    auto y = stem_norm_->forward(stem_conv_->forward(x));
    std::int64_t stage = 0;
    std::size_t down = 0;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        if (stage_of_block_[i] != stage) {
            stage = stage_of_block_[i];
            y = down_convs_[down]->forward(down_norms_[down]->forward(y));
            ++down;
        }
        y = blocks_[i]->forward(y);
    }
    return y;
}

torch::Tensor ConvNeXtClassifierImpl::forward(const torch::Tensor& x) {
    return forward_with_features(x).logits;
}

ConvNeXtClassifierImpl::Output ConvNeXtClassifierImpl::forward_with_features(
    const torch::Tensor& x) {
    auto y = backbone(x);
    auto pooled = head_norm_->forward(y.mean({2, 3}));
    Output out;
    out.logits = head_->forward(pooled);
    out.features = F::normalize(pooled, F::NormalizeFuncOptions().dim(1).eps(1e-12));
    return out;
}

torch::Tensor normalize_crops(const torch::Tensor& crops,
                              const ClassifierConfig& cfg) {
    auto mean = torch::tensor({static_cast<float>(cfg.norm_mean[0]),
                               static_cast<float>(cfg.norm_mean[1]),
                               static_cast<float>(cfg.norm_mean[2])})
                    .view({1, 3, 1, 1})
                    .to(crops.dtype());
    auto std = torch::tensor({static_cast<float>(cfg.norm_std[0]),
                              static_cast<float>(cfg.norm_std[1]),
                              static_cast<float>(cfg.norm_std[2])})
                   .view({1, 3, 1, 1})
                   .to(crops.dtype());
    return (crops - mean) / std;
}

torch::Tensor extract_candidate(const torch::Tensor& patch, const geom::Box& box,
                                const ClassifierConfig& cfg) {
    const double margin = cfg.crop_margin * std::max(box.w, box.h);
    const auto x0 = static_cast<std::int64_t>(std::floor(box.x - margin));
    const auto y0 = static_cast<std::int64_t>(std::floor(box.y - margin));
    const auto x1 = static_cast<std::int64_t>(std::ceil(box.x2() + margin));
    const auto y1 = static_cast<std::int64_t>(std::ceil(box.y2() + margin));
    auto crop = io::crop_region(patch, x0, y0, std::max<std::int64_t>(x1 - x0, 1),
                                std::max<std::int64_t>(y1 - y0, 1));
    return F::interpolate(crop.unsqueeze(0),
                          F::InterpolateFuncOptions()
                              .size(std::vector<std::int64_t>{cfg.input_size,
                                                              cfg.input_size})
                              .mode(torch::kBilinear)
                              .align_corners(false))
        .squeeze(0)
        .clamp(0.0, 1.0);
}

torch::Tensor classify(ConvNeXtClassifier& model, const torch::Tensor& crops) {
    if (crops.numel() == 0 || crops.size(0) == 0) {
        return torch::empty({0});
    }
    torch::NoGradGuard no_grad;
    model->eval();
    auto logits = model->forward(normalize_crops(crops, model->config()));
    return logits.softmax(1).select(1, kMitosisClass);
}

ClassifierTrainOptions ClassifierTrainOptions::from(const Config& cfg) {
    ClassifierTrainOptions o;
    o.epochs = cfg.get_int("train.classifier.epochs");
    o.patience = cfg.get_int("train.classifier.patience");
    o.batch_size = cfg.get_int("train.classifier.batch_size");
    o.lr_initial = cfg.get_double("train.classifier.lr_initial");
    o.lr_final = cfg.get_double("train.classifier.lr_final");
    o.weight_decay = cfg.get_double("train.classifier.weight_decay");
    o.profile = aug::ClsAugmentProfile::from(cfg);
    o.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
    return o;
}

std::string ClassifierHistory::to_csv() const {
    std::ostringstream os;
    os << "epoch,loss_total,loss_focal,loss_contrastive,val_f1\n";
    for (std::size_t i = 0; i < epochs.size(); ++i) {
        const auto& e = epochs[i];
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f,%.6f\n", i, e.loss_total,
                      e.loss_focal, e.loss_contrastive, e.val_f1);
        os << buf;
    }
    return os.str();
}

namespace {

// Per-sample focal terms, so mixup can combine the two label views.
torch::Tensor focal_terms(const torch::Tensor& logits, const torch::Tensor& labels,
                          const HybridLossParams& params) {
    auto p = true_class_probs(logits, labels).clamp_min(1e-7);
    auto alpha = torch::where(labels == kMitosisClass,
                              torch::full_like(p, params.alpha_mitosis),
                              torch::full_like(p, params.alpha_background));
    return -alpha * (1.0 - p).pow(params.gamma) * p.log();
}

double binary_f1(ConvNeXtClassifier& model, const std::vector<aug::ClsSample>& val,
                 std::int64_t batch_size) {
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t start = 0; start < val.size();
         start += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(val.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<torch::Tensor> crops;
        for (std::size_t i = start; i < end; ++i) crops.push_back(val[i].crop);
        auto scores = classify(model, torch::stack(crops));
        auto acc = scores.accessor<float, 1>();
        for (std::size_t i = start; i < end; ++i) {
            const bool pred_pos = acc[static_cast<std::int64_t>(i - start)] >= 0.5f;
            const bool is_pos = val[i].label == kMitosisClass;
            if (pred_pos && is_pos) ++tp;
            if (pred_pos && !is_pos) ++fp;
            if (!pred_pos && is_pos) ++fn;
        }
    }
    if (tp == 0 && fp == 0 && fn == 0) return 1.0;
    const double denom = 2.0 * tp + fp + fn;
    return denom > 0 ? 2.0 * tp / denom : 0.0;
}

}  // namespace

ClassifierHistory train_classifier(ConvNeXtClassifier& model,
                                   const std::vector<aug::ClsSample>& train,
                                   const std::vector<aug::ClsSample>& val,
                                   const HybridLossParams& loss_params,
                                   const ClassifierTrainOptions& opts) {
    if (train.empty()) throw std::invalid_argument("train_classifier: empty training set");
    bool has_pos = false, has_neg = false;
    for (const auto& s : train) {
        if (s.label == kMitosisClass) has_pos = true;
        else has_neg = true;
    }
    if (!has_pos || !has_neg) {
        throw std::invalid_argument(
            "train_classifier: training set must contain both classes");
    }

    torch::optim::AdamW optim(
        model->parameters(),
        torch::optim::AdamWOptions(opts.lr_initial).weight_decay(opts.weight_decay));

    ClassifierHistory history;
    std::vector<torch::Tensor> best_params;
    double best_f1 = -1.0;
    std::int64_t best_epoch = -1;
    std::int64_t since_best = 0;

    Rng rng = child_rng(opts.seed, 0xC1A55);
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::int64_t epoch = 0; epoch < opts.epochs; ++epoch) {
        const double lr = cosine_lr(epoch, opts.epochs, opts.lr_initial, opts.lr_final);
        for (auto& group : optim.param_groups()) {
            static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
        }

        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1],
                      order[static_cast<std::size_t>(uniform_int(
                          rng, 0, static_cast<std::int64_t>(i) - 1))]);
        }

        model->train();
        ClassifierEpochStats stats;
        std::int64_t batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(opts.batch_size)) {
            const auto end =
                std::min(order.size(), start + static_cast<std::size_t>(opts.batch_size));
            std::vector<torch::Tensor> crops;
            std::vector<std::int64_t> la, lb;
            std::vector<double> mw;
            for (std::size_t k = start; k < end; ++k) {
                const auto& s = train[order[k]];
                if (opts.augment) {
                    auto a = aug::augment_classification(s.crop, s.label, train,
                                                         opts.profile, rng);
                    crops.push_back(a.crop);
                    la.push_back(a.label_a);
                    lb.push_back(a.label_b);
                    mw.push_back(a.mix_w);
                } else {
                    crops.push_back(s.crop);
                    la.push_back(s.label);
                    lb.push_back(s.label);
                    mw.push_back(1.0);
                }
            }
            auto batch = normalize_crops(torch::stack(crops), model->config());
            auto labels_a = torch::tensor(la, torch::kInt64);
            auto labels_b = torch::tensor(lb, torch::kInt64);
            auto mix_w = torch::tensor(mw, torch::kFloat32);

            optim.zero_grad();
            auto out = model->forward_with_features(batch);
            auto focal = (mix_w * focal_terms(out.logits, labels_a, loss_params) +
                          (1.0 - mix_w) * focal_terms(out.logits, labels_b, loss_params))
                             .mean();
            // Contrastive semantics follow the dominant mixup label.
            auto dominant = torch::where(mix_w >= 0.5, labels_a, labels_b);
            auto positives = sample_positive_indices(dominant, rng);
            auto con = contrastive_loss(out.features, positives, loss_params);
            auto total = focal + loss_params.lambda * con.loss;
            total.backward();
            optim.step();

            stats.loss_total += total.item<double>();
            stats.loss_focal += focal.item<double>();
            stats.loss_contrastive += con.loss.item<double>();
            ++batches;
        }
        if (batches > 0) {
            stats.loss_total /= static_cast<double>(batches);
            stats.loss_focal /= static_cast<double>(batches);
            stats.loss_contrastive /= static_cast<double>(batches);
        }

        stats.val_f1 = val.empty() ? 0.0 : binary_f1(model, val, opts.batch_size);
        history.epochs.push_back(stats);
        if (opts.verbose) {
            std::printf("classifier epoch %lld loss %.4f val_f1 %.4f\n",
                        static_cast<long long>(epoch), stats.loss_total, stats.val_f1);
        }

        if (stats.val_f1 > best_f1 + 1e-12) {
            best_f1 = stats.val_f1;
            best_epoch = epoch;
            since_best = 0;
            best_params.clear();
            for (const auto& p : model->parameters()) {
                best_params.push_back(p.detach().clone());
            }
        } else {
            ++since_best;
            if (since_best >= opts.patience) break;
        }
    }

    if (!best_params.empty()) {
        torch::NoGradGuard no_grad;
        auto params = model->parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i].copy_(best_params[i]);
        }
    }
    history.best_epoch = best_epoch;
    history.best_val_f1 = best_f1;
    return history;
}

void save_classifier(ConvNeXtClassifier& model, const std::string& path_stem) {
    const auto& cfg = model->config();
    json j;
    j["input_size"] = cfg.input_size;
    j["depths"] = cfg.depths;
    j["dims"] = cfg.dims;
    j["norm_mean"] = cfg.norm_mean;
    j["norm_std"] = cfg.norm_std;
    j["crop_margin"] = cfg.crop_margin;
    std::ofstream out(path_stem + ".json");
    if (!out) throw std::runtime_error("save_classifier: cannot write " + path_stem);
    out << j.dump(2) << "\n";
    torch::save(model, path_stem + ".pt");
}

ConvNeXtClassifier load_classifier(const std::string& path_stem) {
    std::ifstream in(path_stem + ".json");
    if (!in) throw std::runtime_error("load_classifier: cannot open " + path_stem + ".json");
    json j;
    in >> j;
    ClassifierConfig cfg;
    cfg.input_size = j.at("input_size").get<std::int64_t>();
    cfg.depths = j.at("depths").get<std::vector<std::int64_t>>();
    cfg.dims = j.at("dims").get<std::vector<std::int64_t>>();
    cfg.norm_mean = j.at("norm_mean").get<std::vector<double>>();
    cfg.norm_std = j.at("norm_std").get<std::vector<double>>();
    cfg.crop_margin = j.at("crop_margin").get<double>();
    ConvNeXtClassifier model(cfg);
    torch::load(model, path_stem + ".pt");
    return model;
}

CandidateSet build_candidate_set(
    const std::vector<aug::DetSample>& patches,
    const std::function<std::vector<geom::Detection>(const torch::Tensor&)>& propose_fn,
    const ClassifierConfig& cfg, double match_distance, std::uint64_t seed) {
    CandidateSet set;
    Rng rng = child_rng(seed, 0xCA4D);
    for (const auto& patch : patches) {
        auto proposals = propose_fn(patch.image);
        for (const auto& d : proposals) {
            bool positive = false;
            for (const auto& gt : patch.boxes) {
                const double dx = d.box.cx() - gt.cx();
                const double dy = d.box.cy() - gt.cy();
                if (std::sqrt(dx * dx + dy * dy) <= match_distance) {
                    positive = true;
                    break;
                }
            }
            set.samples.push_back({extract_candidate(patch.image, d.box, cfg),
                                   positive ? static_cast<int>(kMitosisClass)
                                            : static_cast<int>(kBackgroundClass)});
            ++set.from_proposals;
        }
        // Ground-truth-centered positives keep the positive pool healthy even
        // when the proposer misses.
        for (const auto& gt : patch.boxes) {
            set.samples.push_back({extract_candidate(patch.image, gt, cfg),
                                   static_cast<int>(kMitosisClass)});
            ++set.gt_positives;
        }
    }
    std::int64_t pos = 0, neg = 0;
    for (const auto& s : set.samples) {
        (s.label == kMitosisClass ? pos : neg) += 1;
    }
    // Top up negatives with random background crops away from ground truth.
    const double box_side = 50.0;
    std::size_t patch_idx = 0;
    std::int64_t guard = 0;
    while (neg < pos && !patches.empty() && guard < pos * 50) {
        ++guard;
        const auto& patch = patches[patch_idx];
        patch_idx = (patch_idx + 1) % patches.size();
        const double S = static_cast<double>(patch.image.size(1));
        const double cx = uniform(rng, box_side, S - box_side);
        const double cy = uniform(rng, box_side, S - box_side);
        bool clear = true;
        for (const auto& gt : patch.boxes) {
            const double dx = cx - gt.cx();
            const double dy = cy - gt.cy();
            if (std::sqrt(dx * dx + dy * dy) < 2.0 * match_distance) {
                clear = false;
                break;
            }
        }
        if (!clear) continue;
        geom::Box box(cx - box_side / 2, cy - box_side / 2, box_side, box_side);
        set.samples.push_back({extract_candidate(patch.image, box, cfg),
                               static_cast<int>(kBackgroundClass)});
        ++set.random_negatives;
        ++neg;
    }
    return set;
}

}  // namespace mitodet::nn
