#include "mitodet/proposer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mitodet/eval.hpp"
#include "mitodet/losses.hpp"
#include "mitodet/rng.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace mitodet::nn {

ProposerConfig ProposerConfig::from(const Config& cfg) {
    ProposerConfig p;
    p.input_size = cfg.get_int("proposer.input_size");
    p.conf_threshold = cfg.get_double("proposer.conf_threshold");
    p.nms_iou = cfg.get_double("proposer.nms_iou");
    p.width_mult = cfg.get_double("proposer.width_mult");
    p.depth_mult = cfg.get_double("proposer.depth_mult");
    p.reg_max = cfg.get_int("proposer.reg_max");
    p.ema_groups = cfg.get_int("proposer.ema_groups");
    p.n_psa_blocks = cfg.get_int("proposer.n_psa_blocks");
    p.lsconv_large_kernel = cfg.get_int("proposer.lsconv_large_kernel");
    p.lsconv_small_kernel = cfg.get_int("proposer.lsconv_small_kernel");
    p.improved = cfg.get_bool("proposer.improved");
    if (!(p.conf_threshold > 0 && p.conf_threshold < 1)) {
        throw std::invalid_argument("proposer: conf_threshold must be in (0,1)");
    }
    if (!(p.nms_iou > 0 && p.nms_iou < 1)) {
        throw std::invalid_argument("proposer: nms_iou must be in (0,1)");
    }
    return p;
}

std::vector<std::int64_t> ProposerConfig::channels() const {
    if (!(width_mult > 0) || !(depth_mult > 0)) {
        throw std::invalid_argument("proposer: multipliers must be positive");
    }
    const double base[5] = {64, 128, 256, 512, 512};
    std::vector<std::int64_t> out;
    for (double b : base) {
        auto c = static_cast<std::int64_t>(std::llround(b * width_mult / 8.0)) * 8;
        out.push_back(std::max<std::int64_t>(c, 8));
    }
    return out;
}

std::int64_t ProposerConfig::depth() const {
    return std::max<std::int64_t>(1, std::llround(3.0 * depth_mult));
}

ProposerModelImpl::ProposerModelImpl(const ProposerConfig& cfg) : cfg_(cfg) {
    const auto ch = cfg.channels();
    const auto c1 = ch[0], c2 = ch[1], c3 = ch[2], c4 = ch[3], c5 = ch[4];
    const auto n = cfg.depth();
    BlockConfig bc;
    bc.ema_groups = cfg.ema_groups;
    bc.lsconv_large_kernel = cfg.lsconv_large_kernel;
    bc.lsconv_small_kernel = cfg.lsconv_small_kernel;

    if (cfg.improved) {
        for (auto c : {c3, c4, c5}) {
            if (c % cfg.ema_groups != 0) {
                throw std::invalid_argument(
                    "proposer: head channels must be divisible by ema_groups");
            }
        }
        if ((c5 / 2) % cfg.ema_groups != 0) {
            throw std::invalid_argument(
                "proposer: C2PSA half-width must be divisible by ema_groups");
        }
    }

    stem_ = register_module("stem", ConvNormAct(3, c1, 3, 2));
    down2_ = register_module("down2", ConvNormAct(c1, c2, 3, 2));
    stage2_ = register_module("stage2", C3k2(c2, c2, n, false, bc));
    down3_ = register_module("down3", ConvNormAct(c2, c3, 3, 2));
    stage3_ = register_module("stage3", C3k2(c3, c3, n, false, bc));
    down4_ = register_module("down4", ConvNormAct(c3, c4, 3, 2));
    stage4_ = register_module("stage4", C3k2(c4, c4, n, false, bc));
    down5_ = register_module("down5", ConvNormAct(c4, c5, 3, 2));
    stage5_ = register_module("stage5", C3k2(c5, c5, n, false, bc));
    sppf_ = register_module("sppf", SPPF(c5));
    fusion_psa_ = register_module(
        "fusion_psa", C2PSA(c5, cfg.n_psa_blocks, cfg.improved, cfg.ema_groups));

    neck_up_p4_ = register_module("neck_up_p4", C3k2(c5 + c4, c4, n, false, bc));
    neck_p3_ = register_module("neck_p3", C3k2(c4 + c3, c3, n, cfg.improved, bc));
    neck_down_a_ = register_module("neck_down_a", ConvNormAct(c3, c3, 3, 2));
    neck_p4_ = register_module("neck_p4", C3k2(c3 + c4, c4, n, cfg.improved, bc));
    neck_down_b_ = register_module("neck_down_b", ConvNormAct(c4, c4, 3, 2));
    neck_p5_ = register_module("neck_p5", C3k2(c4 + c5, c5, n, cfg.improved, bc));

    const std::int64_t head_ch[3] = {c3, c4, c5};
    const char* names[3] = {"p3", "p4", "p5"};
    for (int i = 0; i < 3; ++i) {
        if (cfg.improved) {
            head_ema_.push_back(EMAAttention(head_ch[i], cfg.ema_groups));
            register_module(std::string("head_") + names[i] + "_ema", head_ema_.back());
        }
        head_box_conv_.push_back(ConvNormAct(head_ch[i], head_ch[i], 3));
        register_module(std::string("head_") + names[i] + "_box_conv",
                        head_box_conv_.back());
        head_box_out_.push_back(torch::nn::Conv2d(
            torch::nn::Conv2dOptions(head_ch[i], 4 * cfg.reg_max, 1)));
        register_module(std::string("head_") + names[i] + "_box_out",
                        head_box_out_.back());
        head_cls_conv_.push_back(ConvNormAct(head_ch[i], head_ch[i], 3));
        register_module(std::string("head_") + names[i] + "_cls_conv",
                        head_cls_conv_.back());
        head_cls_out_.push_back(
            torch::nn::Conv2d(torch::nn::Conv2dOptions(head_ch[i], 1, 1)));
        register_module(std::string("head_") + names[i] + "_cls_out",
                        head_cls_out_.back());
        // Low-prior class bias so an untrained model emits few candidates.
        torch::NoGradGuard no_grad;
        head_cls_out_.back()->bias.fill_(-4.595);
    }
}

torch::Tensor ProposerModelImpl::upsample2x(const torch::Tensor& x) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{2.0, 2.0})
                                 .mode(torch::kNearest));
}

std::vector<LevelPreds> ProposerModelImpl::forward(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 4 && x.size(1) == 3, "proposer: expected (B,3,H,W)");
    TORCH_CHECK(x.size(2) == cfg_.input_size && x.size(3) == cfg_.input_size,
                "proposer: expected ", cfg_.input_size, "x", cfg_.input_size,
                " input, got ", x.size(2), "x", x.size(3));

    auto y = stem_->forward(x);
    y = stage2_->forward(down2_->forward(y));
    auto p3 = stage3_->forward(down3_->forward(y));
    auto p4 = stage4_->forward(down4_->forward(p3));
    auto p5 = fusion_psa_->forward(sppf_->forward(stage5_->forward(down5_->forward(p4))));

    auto n4 = neck_up_p4_->forward(torch::cat({upsample2x(p5), p4}, 1));
    auto n3 = neck_p3_->forward(torch::cat({upsample2x(n4), p3}, 1));
    auto n4b = neck_p4_->forward(torch::cat({neck_down_a_->forward(n3), n4}, 1));
    auto n5 = neck_p5_->forward(torch::cat({neck_down_b_->forward(n4b), p5}, 1));

    std::vector<LevelPreds> preds;
    const torch::Tensor feats[3] = {n3, n4b, n5};
    for (int i = 0; i < 3; ++i) {
        auto f = cfg_.improved ? head_ema_[static_cast<std::size_t>(i)]->forward(feats[i])
                               : feats[i];
        LevelPreds lp;
        lp.box_logits = head_box_out_[static_cast<std::size_t>(i)]->forward(
            head_box_conv_[static_cast<std::size_t>(i)]->forward(f));
        lp.cls_logits = head_cls_out_[static_cast<std::size_t>(i)]->forward(
            head_cls_conv_[static_cast<std::size_t>(i)]->forward(f));
        lp.stride = ProposerConfig::kStrides[i];
        preds.push_back(std::move(lp));
    }
    return preds;
}

namespace {

bool has_lsconv_descendant(const std::shared_ptr<torch::nn::Module>& m) {
    for (const auto& child : m->modules(/*include_self=*/false)) {
        if (dynamic_cast<LSConvImpl*>(child.get()) != nullptr) return true;
    }
    return false;
}

}  // namespace

StructuralAudit audit_model(ProposerModel& model) {
    StructuralAudit audit;
    for (const auto& item : model->named_modules("", /*include_self=*/false)) {
        const auto& name = item.key();
        const auto& mod = item.value();
        if (dynamic_cast<LSConvImpl*>(mod.get()) != nullptr) {
            ++audit.lsconv_total;
        }
        if (auto* c3k2 = dynamic_cast<C3k2Impl*>(mod.get())) {
            const bool ls = c3k2->uses_lsconv() && has_lsconv_descendant(mod);
            if (name == "neck_p3") audit.lsconv_at_p3 = ls;
            if (name == "neck_p4") audit.lsconv_at_p4 = ls;
            if (name == "neck_p5") audit.lsconv_at_p5 = ls;
        }
        if (auto* psa = dynamic_cast<C2PSAImpl*>(mod.get())) {
            bool has_ema = false;
            for (const auto& child : mod->modules(false)) {
                if (dynamic_cast<EMAAttentionImpl*>(child.get())) has_ema = true;
            }
            if (psa->uses_ema() && has_ema) ++audit.c2psa_ema_count;
        }
        if (dynamic_cast<EMAAttentionImpl*>(mod.get()) != nullptr &&
            name.rfind("head_", 0) == 0) {
            ++audit.head_ema_count;
        }
    }
    return audit;
}

std::string StructuralAudit::summary() const {
    std::ostringstream os;
    os << "lsconv[p3=" << lsconv_at_p3 << ",p4=" << lsconv_at_p4
       << ",p5=" << lsconv_at_p5 << "] c2psa_ema=" << c2psa_ema_count
       << " head_ema=" << head_ema_count << " lsconv_total=" << lsconv_total;
    return os.str();
}

std::string prediction_signature(ProposerModel& model) {
    torch::NoGradGuard no_grad;
    model->eval();
    auto x = torch::zeros({1, 3, model->config().input_size, model->config().input_size});
    auto preds = model->forward(x);
    std::ostringstream os;
    const char* names[3] = {"p3", "p4", "p5"};
    for (std::size_t i = 0; i < preds.size(); ++i) {
        os << names[i] << ":box(";
        for (auto d : preds[i].box_logits.sizes()) os << d << ",";
        os << "),cls(";
        for (auto d : preds[i].cls_logits.sizes()) os << d << ",";
        os << ");";
    }
    return os.str();
}

std::vector<geom::Detection> decode_predictions(const std::vector<LevelPreds>& preds,
                                                std::int64_t batch_index,
                                                const ProposerConfig& cfg,
                                                double conf_threshold) {
    std::vector<geom::Detection> dets;
    const double S = static_cast<double>(cfg.input_size);
    for (const auto& lp : preds) {
        const auto h = lp.cls_logits.size(2);
        const auto w = lp.cls_logits.size(3);
        const double stride = static_cast<double>(lp.stride);
        auto scores = lp.cls_logits.select(0, batch_index).sigmoid().view({h * w});
        auto keep = (scores >= conf_threshold).nonzero().view(-1);
        if (keep.numel() == 0) continue;

        // DFL expectation over the distance bins, in stride units.
        auto box = lp.box_logits.select(0, batch_index)
                       .view({4, cfg.reg_max, h * w})
                       .index_select(2, keep)
                       .softmax(1);
        auto bins = torch::arange(cfg.reg_max, torch::kFloat32).view({1, cfg.reg_max, 1});
        auto dist = (box * bins).sum(1);  // (4, K)

        auto keep_acc = keep.accessor<std::int64_t, 1>();
        auto dist_acc = dist.accessor<float, 2>();
        auto score_sel = scores.index_select(0, keep);
        auto score_acc = score_sel.accessor<float, 1>();
        for (std::int64_t k = 0; k < keep.size(0); ++k) {
            const auto cell = keep_acc[k];
            const double ax = (static_cast<double>(cell % w) + 0.5) * stride;
            const double ay = (static_cast<double>(cell / w) + 0.5) * stride;
            double x1 = ax - dist_acc[0][k] * stride;
            double y1 = ay - dist_acc[1][k] * stride;
            double x2 = ax + dist_acc[2][k] * stride;
            double y2 = ay + dist_acc[3][k] * stride;
            x1 = std::clamp(x1, 0.0, S);
            y1 = std::clamp(y1, 0.0, S);
            x2 = std::clamp(x2, 0.0, S);
            y2 = std::clamp(y2, 0.0, S);
            geom::Detection d;
            d.box = geom::Box(x1, y1, std::max(x2 - x1, 1e-3), std::max(y2 - y1, 1e-3));
            d.score = static_cast<double>(score_acc[k]);
            d.label = 0;
            d.frame = geom::Frame::kPatch;
            dets.push_back(std::move(d));
        }
    }
    return dets;
}

std::vector<geom::Detection> propose(ProposerModel& model,
                                     const torch::Tensor& patch,
                                     double conf_override) {
    const auto& cfg = model->config();
    TORCH_CHECK(patch.dim() == 3 && patch.size(0) == 3,
                "propose: expected (3,S,S) patch");
    torch::NoGradGuard no_grad;
    model->eval();
    auto preds = model->forward(patch.unsqueeze(0));
    const double conf = conf_override >= 0.0 ? conf_override : cfg.conf_threshold;
    auto dets = decode_predictions(preds, 0, cfg, conf);
    return geom::nms(std::move(dets), cfg.nms_iou);
}

ProposerTrainOptions ProposerTrainOptions::from(const Config& cfg) {
    ProposerTrainOptions o;
    o.epochs = cfg.get_int("train.proposer.epochs");
    o.batch_size = cfg.get_int("train.proposer.batch_size");
    o.lr_initial = cfg.get_double("train.proposer.lr_initial");
    o.lr_final = cfg.get_double("train.proposer.lr_final");
    o.weight_decay = cfg.get_double("train.proposer.weight_decay");
    o.patches_per_epoch = cfg.get_int("train.proposer.patches_per_epoch");
    o.loss_box = cfg.get_double("train.proposer.loss_box");
    o.loss_cls = cfg.get_double("train.proposer.loss_cls");
    o.loss_dfl = cfg.get_double("train.proposer.loss_dfl");
    o.profile = aug::DetAugmentProfile::from(cfg);
    o.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
    return o;
}

std::string ProposerHistory::to_csv() const {
    std::ostringstream os;
    os << "epoch,loss_box,loss_cls,loss_dfl,val_p,val_r,val_f1\n";
    for (std::size_t i = 0; i < epochs.size(); ++i) {
        const auto& e = epochs[i];
        char buf[200];
        std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", i,
                      e.loss_box, e.loss_cls, e.loss_dfl, e.val_p, e.val_r, e.val_f1);
        os << buf;
    }
    return os.str();
}

namespace {

// Size range (max box side, pixels) a level is responsible for.
void level_range(int level, double& lo, double& hi) {
    if (level == 0) {
        lo = 0.0;
        hi = 64.0;
    } else if (level == 1) {
        lo = 64.0;
        hi = 128.0;
    } else {
        lo = 128.0;
        hi = 1e30;
    }
}

struct LevelTargets {
    // Dense class targets (B, H*W) and the positives as flat indices into
    // (B*H*W) with their ltrb distance targets in stride units.
    torch::Tensor cls_target;
    std::vector<std::int64_t> pos_flat;
    std::vector<std::array<double, 4>> pos_ltrb;
};

std::vector<LevelTargets> assign_targets(const std::vector<LevelPreds>& preds,
                                         const std::vector<std::vector<geom::Box>>& boxes,
                                         const ProposerConfig& cfg) {
    std::vector<LevelTargets> out;
    for (std::size_t li = 0; li < preds.size(); ++li) {
        const auto& lp = preds[li];
        const auto b = lp.cls_logits.size(0);
        const auto h = lp.cls_logits.size(2);
        const auto w = lp.cls_logits.size(3);
        const double stride = static_cast<double>(lp.stride);
        double lo, hi;
        level_range(static_cast<int>(li), lo, hi);

        LevelTargets t;
        t.cls_target = torch::zeros({b, h * w}, torch::kFloat32);
        auto cls_acc = t.cls_target.accessor<float, 2>();
        // Closest-center wins when two boxes claim one cell.
        std::vector<double> best_dist(static_cast<std::size_t>(b * h * w), 1e30);

        for (std::int64_t bi = 0; bi < b; ++bi) {
            for (const auto& box : boxes[static_cast<std::size_t>(bi)]) {
                const double side = std::max(box.w, box.h);
                if (side < lo || side >= hi) continue;
                const double cx = box.cx();
                const double cy = box.cy();
                const double radius = 1.5 * stride;
                const auto i0 = std::max<std::int64_t>(
                    0, static_cast<std::int64_t>((cy - radius) / stride - 0.5));
                const auto i1 = std::min<std::int64_t>(
                    h - 1, static_cast<std::int64_t>((cy + radius) / stride));
                const auto j0 = std::max<std::int64_t>(
                    0, static_cast<std::int64_t>((cx - radius) / stride - 0.5));
                const auto j1 = std::min<std::int64_t>(
                    w - 1, static_cast<std::int64_t>((cx + radius) / stride));
                for (std::int64_t i = i0; i <= i1; ++i) {
                    for (std::int64_t j = j0; j <= j1; ++j) {
                        const double ax = (static_cast<double>(j) + 0.5) * stride;
                        const double ay = (static_cast<double>(i) + 0.5) * stride;
                        if (ax < box.x || ax >= box.x2() || ay < box.y || ay >= box.y2())
                            continue;
                        if (std::abs(ax - cx) > radius || std::abs(ay - cy) > radius)
                            continue;
                        const double d2 = (ax - cx) * (ax - cx) + (ay - cy) * (ay - cy);
                        const auto flat =
                            static_cast<std::size_t>((bi * h + i) * w + j);
                        if (d2 >= best_dist[flat]) continue;
                        const double eps = 0.01;
                        std::array<double, 4> ltrb = {
                            std::clamp((ax - box.x) / stride, 0.0,
                                       static_cast<double>(cfg.reg_max) - 1 - eps),
                            std::clamp((ay - box.y) / stride, 0.0,
                                       static_cast<double>(cfg.reg_max) - 1 - eps),
                            std::clamp((box.x2() - ax) / stride, 0.0,
                                       static_cast<double>(cfg.reg_max) - 1 - eps),
                            std::clamp((box.y2() - ay) / stride, 0.0,
                                       static_cast<double>(cfg.reg_max) - 1 - eps)};
                        if (best_dist[flat] > 1e29) {
                            t.pos_flat.push_back(static_cast<std::int64_t>(flat));
                            t.pos_ltrb.push_back(ltrb);
                        } else {
                            for (std::size_t q = 0; q < t.pos_flat.size(); ++q) {
                                if (t.pos_flat[q] == static_cast<std::int64_t>(flat)) {
                                    t.pos_ltrb[q] = ltrb;
                                    break;
                                }
                            }
                        }
                        best_dist[flat] = d2;
                        cls_acc[bi][i * w + j] = 1.0f;
                    }
                }
            }
        }
        out.push_back(std::move(t));
    }
    return out;
}

// Complete-IoU loss between predicted and target ltrb distances (in stride
// units) around shared anchor points.
torch::Tensor ciou_loss(const torch::Tensor& pred_ltrb, const torch::Tensor& tgt_ltrb) {
    auto px1 = -pred_ltrb.select(1, 0), py1 = -pred_ltrb.select(1, 1);
    auto px2 = pred_ltrb.select(1, 2), py2 = pred_ltrb.select(1, 3);
    auto tx1 = -tgt_ltrb.select(1, 0), ty1 = -tgt_ltrb.select(1, 1);
    auto tx2 = tgt_ltrb.select(1, 2), ty2 = tgt_ltrb.select(1, 3);

    auto pw = (px2 - px1).clamp_min(1e-6), ph = (py2 - py1).clamp_min(1e-6);
    auto tw = (tx2 - tx1).clamp_min(1e-6), th = (ty2 - ty1).clamp_min(1e-6);

    auto inter = (torch::min(px2, tx2) - torch::max(px1, tx1)).clamp_min(0) *
                 (torch::min(py2, ty2) - torch::max(py1, ty1)).clamp_min(0);
    auto uni = pw * ph + tw * th - inter;
    auto iou = inter / uni.clamp_min(1e-9);

    auto cw = torch::max(px2, tx2) - torch::min(px1, tx1);
    auto chh = torch::max(py2, ty2) - torch::min(py1, ty1);
    auto c2 = (cw * cw + chh * chh).clamp_min(1e-9);
    auto rho2 = ((px1 + px2 - tx1 - tx2).pow(2) + (py1 + py2 - ty1 - ty2).pow(2)) / 4.0;

    const double pi2 = M_PI * M_PI;
    auto v = (4.0 / pi2) * (torch::atan(tw / th) - torch::atan(pw / ph)).pow(2);
    auto alpha = (v / (1.0 - iou + v + 1e-9)).detach();
    auto ciou = iou - rho2 / c2 - alpha * v;
    return (1.0 - ciou).mean();
}

struct BatchLoss {
    torch::Tensor total, box, cls, dfl;
};

BatchLoss detection_loss(const std::vector<LevelPreds>& preds,
                         const std::vector<std::vector<geom::Box>>& boxes,
                         const ProposerConfig& cfg, const ProposerTrainOptions& opts) {
    auto targets = assign_targets(preds, boxes, cfg);
    auto zero = torch::zeros({}, torch::kFloat32);
    torch::Tensor cls_sum = zero.clone();
    std::vector<torch::Tensor> box_losses, dfl_losses;
    std::int64_t n_cells = 0;

    for (std::size_t li = 0; li < preds.size(); ++li) {
        const auto& lp = preds[li];
        const auto b = lp.cls_logits.size(0);
        const auto h = lp.cls_logits.size(2);
        const auto w = lp.cls_logits.size(3);
        auto cls_flat = lp.cls_logits.view({b * h * w});
        auto tgt_flat = targets[li].cls_target.view({b * h * w});
        cls_sum = cls_sum + F::binary_cross_entropy_with_logits(
                                cls_flat, tgt_flat,
                                F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(
                                    torch::kSum));
        n_cells += b * h * w;

        const auto& pos = targets[li].pos_flat;
        if (pos.empty()) continue;
        auto pos_idx = torch::tensor(pos, torch::kInt64);
        // (B,4R,H,W) -> (B*H*W, 4, R)
        auto box_logits = lp.box_logits.view({b, 4, cfg.reg_max, h * w})
                              .permute({0, 3, 1, 2})
                              .reshape({b * h * w, 4, cfg.reg_max})
                              .index_select(0, pos_idx);
        auto tgt = torch::empty({static_cast<std::int64_t>(pos.size()), 4},
                                torch::kFloat32);
        auto tgt_acc = tgt.accessor<float, 2>();
        for (std::size_t q = 0; q < pos.size(); ++q) {
            for (int s = 0; s < 4; ++s) {
                tgt_acc[static_cast<std::int64_t>(q)][s] =
                    static_cast<float>(targets[li].pos_ltrb[q][static_cast<std::size_t>(s)]);
            }
        }

        auto bins = torch::arange(cfg.reg_max, torch::kFloat32).view({1, 1, cfg.reg_max});
        auto pred_dist = (box_logits.softmax(2) * bins).sum(2);  // (P,4)
        box_losses.push_back(ciou_loss(pred_dist, tgt));

        // Distribution focal loss: cross-entropy split across adjacent bins.
        auto logsm = box_logits.log_softmax(2);
        auto tl = tgt.floor().clamp(0, static_cast<double>(cfg.reg_max - 1));
        auto tr = (tl + 1).clamp(0, static_cast<double>(cfg.reg_max - 1));
        auto wl = tr - tgt;
        auto wr = tgt - tl;
        auto gather_l = logsm.gather(2, tl.to(torch::kInt64).unsqueeze(2)).squeeze(2);
        auto gather_r = logsm.gather(2, tr.to(torch::kInt64).unsqueeze(2)).squeeze(2);
        dfl_losses.push_back(-(wl * gather_l + wr * gather_r).mean());
    }

    BatchLoss loss;
    loss.cls = cls_sum / static_cast<double>(std::max<std::int64_t>(n_cells, 1));
    loss.box = box_losses.empty() ? zero.clone() : torch::stack(box_losses).mean();
    loss.dfl = dfl_losses.empty() ? zero.clone() : torch::stack(dfl_losses).mean();
    loss.total = opts.loss_box * loss.box + opts.loss_cls * loss.cls +
                 opts.loss_dfl * loss.dfl;
    return loss;
}

}  // namespace

ProposerHistory train_proposer(ProposerModel& model,
                               const std::vector<aug::DetSample>& train,
                               const std::vector<aug::DetSample>& val,
                               const ProposerTrainOptions& opts) {
    if (train.empty()) {
        throw std::invalid_argument("train_proposer: empty training set");
    }
    const auto& cfg = model->config();
    torch::optim::AdamW optim(
        model->parameters(),
        torch::optim::AdamWOptions(opts.lr_initial).weight_decay(opts.weight_decay));

    Rng rng = child_rng(opts.seed, 0xDE7EC7);
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    ProposerHistory history;
    for (std::int64_t epoch = 0; epoch < opts.epochs; ++epoch) {
        ProposerEpochStats stats;
        stats.lr = cosine_lr(epoch, opts.epochs, opts.lr_initial, opts.lr_final);
        for (auto& group : optim.param_groups()) {
            static_cast<torch::optim::AdamWOptions&>(group.options()).lr(stats.lr);
        }

        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1],
                      order[static_cast<std::size_t>(uniform_int(
                          rng, 0, static_cast<std::int64_t>(i) - 1))]);
        }
        const std::size_t epoch_n =
            opts.patches_per_epoch > 0
                ? std::min(order.size(), static_cast<std::size_t>(opts.patches_per_epoch))
                : order.size();

        model->train();
        std::int64_t batches = 0;
        for (std::size_t start = 0; start < epoch_n;
             start += static_cast<std::size_t>(opts.batch_size)) {
            const auto end =
                std::min(epoch_n, start + static_cast<std::size_t>(opts.batch_size));
            std::vector<torch::Tensor> images;
            std::vector<std::vector<geom::Box>> boxes;
            for (std::size_t k = start; k < end; ++k) {
                const auto& s = train[order[k]];
                if (opts.augment) {
                    auto a = aug::augment_detection(s, train, opts.profile, epoch, rng);
                    images.push_back(a.image);
                    boxes.push_back(a.boxes);
                } else {
                    images.push_back(s.image);
                    boxes.push_back(s.boxes);
                }
            }
            optim.zero_grad();
            auto preds = model->forward(torch::stack(images));
            auto loss = detection_loss(preds, boxes, cfg, opts);
            loss.total.backward();
            optim.step();
            stats.loss_box += loss.box.item<double>();
            stats.loss_cls += loss.cls.item<double>();
            stats.loss_dfl += loss.dfl.item<double>();
            ++batches;
        }
        if (batches > 0) {
            stats.loss_box /= static_cast<double>(batches);
            stats.loss_cls /= static_cast<double>(batches);
            stats.loss_dfl /= static_cast<double>(batches);
        }

        // Validation recall / precision with the center-distance rule.
        if (!val.empty()) {
            std::int64_t tp = 0, fp = 0, fn = 0;
            for (const auto& v : val) {
                auto dets = propose(model, v.image);
                std::vector<Annotation> gts;
                for (const auto& b : v.boxes) gts.push_back({"", b.cx(), b.cy(), 0});
                auto r = eval::match(dets, gts, eval::MatchRule::center(30.0));
                tp += r.tp;
                fp += r.fp;
                fn += r.fn;
            }
            const auto m = eval::metrics(tp, fp, fn);
            stats.val_p = m.precision;
            stats.val_r = m.recall;
            stats.val_f1 = m.f1;
        }
        history.epochs.push_back(stats);
        if (opts.verbose) {
            std::printf(
                "proposer epoch %lld lr %.2e box %.4f cls %.4f dfl %.4f val_f1 %.4f\n",
                static_cast<long long>(epoch), stats.lr, stats.loss_box, stats.loss_cls,
                stats.loss_dfl, stats.val_f1);
        }
    }
    return history;
}

void save_proposer(ProposerModel& model, const std::string& path_stem) {
    const auto& cfg = model->config();
    json j;
    j["input_size"] = cfg.input_size;
    j["conf_threshold"] = cfg.conf_threshold;
    j["nms_iou"] = cfg.nms_iou;
    j["width_mult"] = cfg.width_mult;
    j["depth_mult"] = cfg.depth_mult;
    j["reg_max"] = cfg.reg_max;
    j["ema_groups"] = cfg.ema_groups;
    j["n_psa_blocks"] = cfg.n_psa_blocks;
    j["lsconv_large_kernel"] = cfg.lsconv_large_kernel;
    j["lsconv_small_kernel"] = cfg.lsconv_small_kernel;
    j["improved"] = cfg.improved;
    std::ofstream out(path_stem + ".json");
    if (!out) throw std::runtime_error("save_proposer: cannot write " + path_stem);
    out << j.dump(2) << "\n";
    torch::save(model, path_stem + ".pt");
}

ProposerModel load_proposer(const std::string& path_stem) {
    std::ifstream in(path_stem + ".json");
    if (!in) throw std::runtime_error("load_proposer: cannot open " + path_stem + ".json");
    json j;
    in >> j;
    ProposerConfig cfg;
    cfg.input_size = j.at("input_size").get<std::int64_t>();
    cfg.conf_threshold = j.at("conf_threshold").get<double>();
    cfg.nms_iou = j.at("nms_iou").get<double>();
    cfg.width_mult = j.at("width_mult").get<double>();
    cfg.depth_mult = j.at("depth_mult").get<double>();
    cfg.reg_max = j.at("reg_max").get<std::int64_t>();
    cfg.ema_groups = j.at("ema_groups").get<std::int64_t>();
    cfg.n_psa_blocks = j.at("n_psa_blocks").get<std::int64_t>();
    cfg.lsconv_large_kernel = j.at("lsconv_large_kernel").get<std::int64_t>();
    cfg.lsconv_small_kernel = j.at("lsconv_small_kernel").get<std::int64_t>();
    cfg.improved = j.at("improved").get<bool>();
    ProposerModel model(cfg);
    torch::load(model, path_stem + ".pt");
    return model;
}

}  // namespace mitodet::nn
