#include "mitodet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace mitodet::eval {

MatchRule MatchRule::parse(const std::string& text) {
    const auto colon = text.find(':');
    const std::string kind = text.substr(0, colon);
    MatchRule rule;
    if (kind == "center") {
        rule.kind = Kind::kCenterDistance;
        rule.threshold = 30.0;
    } else if (kind == "iou") {
        rule.kind = Kind::kIoU;
        rule.threshold = 0.5;
    } else {
        throw std::invalid_argument("MatchRule: unknown rule '" + text + "'");
    }
    if (colon != std::string::npos) {
        rule.threshold = std::stod(text.substr(colon + 1));
    }
    if (!(rule.threshold > 0.0)) {
        throw std::invalid_argument("MatchRule: threshold must be positive");
    }
    return rule;
}

std::string MatchRule::to_string() const {
    std::ostringstream os;
    os << (kind == Kind::kCenterDistance ? "center" : "iou") << ":" << threshold;
    return os.str();
}

namespace {

// Grid buckets over annotation centers so each detection only scans a 3x3
// cell neighbourhood instead of every annotation.
struct CenterIndex {
    double cell;
    std::unordered_map<std::int64_t, std::vector<std::size_t>> buckets;

    CenterIndex(const std::vector<Annotation>& gts, double cell) : cell(cell) {
        for (std::size_t i = 0; i < gts.size(); ++i) {
            buckets[key(gts[i].cx, gts[i].cy)].push_back(i);
        }
    }
    std::int64_t key(double x, double y) const {
        const auto gx = static_cast<std::int64_t>(std::floor(x / cell));
        const auto gy = static_cast<std::int64_t>(std::floor(y / cell));
        return gx * 2000003 + gy;
    }
    template <typename Fn>
    void for_neighbourhood(double x, double y, Fn&& fn) const {
        const auto gx = static_cast<std::int64_t>(std::floor(x / cell));
        const auto gy = static_cast<std::int64_t>(std::floor(y / cell));
        for (std::int64_t dy = -1; dy <= 1; ++dy) {
            for (std::int64_t dx = -1; dx <= 1; ++dx) {
                const auto it = buckets.find((gx + dx) * 2000003 + (gy + dy));
                if (it == buckets.end()) continue;
                for (std::size_t idx : it->second) fn(idx);
            }
        }
    }
};

}  // namespace

MatchResult match(const std::vector<geom::Detection>& dets,
                  const std::vector<Annotation>& gts, const MatchRule& rule,
                  double gt_box_size) {
    // Canonical score order makes the greedy result input-order invariant.
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
        if (dets[a].box.x != dets[b].box.x) return dets[a].box.x < dets[b].box.x;
        return dets[a].box.y < dets[b].box.y;
    });

    std::vector<bool> claimed(gts.size(), false);
    MatchResult res;

    if (rule.kind == MatchRule::Kind::kCenterDistance) {
        const CenterIndex index(gts, std::max(rule.threshold, 1.0));
        for (std::size_t di : order) {
            const double cx = dets[di].box.cx();
            const double cy = dets[di].box.cy();
            double best = std::numeric_limits<double>::infinity();
            std::size_t best_gt = gts.size();
            index.for_neighbourhood(cx, cy, [&](std::size_t gi) {
                if (claimed[gi]) return;
                const double dx = gts[gi].cx - cx;
                const double dy = gts[gi].cy - cy;
                const double d = std::sqrt(dx * dx + dy * dy);
                if (d > rule.threshold) return;
                if (d < best || (d == best && gi < best_gt)) {
                    best = d;
                    best_gt = gi;
                }
            });
            if (best_gt < gts.size()) {
                claimed[best_gt] = true;
                res.pairs.emplace_back(di, best_gt);
            }
        }
    } else {
        for (std::size_t di : order) {
            double best = 0.0;
            std::size_t best_gt = gts.size();
            for (std::size_t gi = 0; gi < gts.size(); ++gi) {
                if (claimed[gi]) continue;
                const double v = geom::iou(dets[di].box, expand_to_box(gts[gi], gt_box_size));
                if (v < rule.threshold) continue;
                if (v > best || (v == best && gi < best_gt)) {
                    best = v;
                    best_gt = gi;
                }
            }
            if (best_gt < gts.size()) {
                claimed[best_gt] = true;
                res.pairs.emplace_back(di, best_gt);
            }
        }
    }

    res.tp = static_cast<std::int64_t>(res.pairs.size());
    res.fp = static_cast<std::int64_t>(dets.size()) - res.tp;
    res.fn = static_cast<std::int64_t>(gts.size()) - res.tp;
    return res;
}

Metrics metrics(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
    if (tp < 0 || fp < 0 || fn < 0) {
        throw std::invalid_argument("metrics: counts must be non-negative");
    }
    Metrics m;
    if (tp == 0 && fp == 0 && fn == 0) {
        m.precision = m.recall = m.f1 = 1.0;
        return m;
    }
    const double tpd = static_cast<double>(tp);
    m.precision = (tp + fp > 0) ? tpd / static_cast<double>(tp + fp)
                                : (fn > 0 ? 1.0 : 0.0);
    m.recall = (tp + fn > 0) ? tpd / static_cast<double>(tp + fn)
                             : (fp > 0 ? 1.0 : 0.0);
    m.f1 = (m.precision + m.recall > 0.0)
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

EvalReport evaluate(const std::map<std::string, std::vector<geom::Detection>>& dets,
                    const std::map<std::string, std::vector<Annotation>>& gts,
                    const MatchRule& rule, double gt_box_size) {
    EvalReport report;
    std::vector<std::string> ids;
    for (const auto& [id, _] : dets) ids.push_back(id);
    for (const auto& [id, _] : gts) {
        if (!dets.count(id)) ids.push_back(id);
    }
    std::sort(ids.begin(), ids.end());
    static const std::vector<geom::Detection> no_dets;
    static const std::vector<Annotation> no_gts;
    for (const auto& id : ids) {
        const auto dit = dets.find(id);
        const auto git = gts.find(id);
        auto r = match(dit != dets.end() ? dit->second : no_dets,
                       git != gts.end() ? git->second : no_gts, rule, gt_box_size);
        report.tp += r.tp;
        report.fp += r.fp;
        report.fn += r.fn;
        report.per_image.emplace(id, std::move(r));
    }
    report.aggregate = metrics(report.tp, report.fp, report.fn);
    return report;
}

namespace {

std::string fmt3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

}  // namespace

std::string report_csv(const EvalReport& report) {
    std::ostringstream os;
    os << "image_id,tp,fp,fn,p,r,f1\n";
    for (const auto& [id, r] : report.per_image) {
        const Metrics m = metrics(r.tp, r.fp, r.fn);
        os << id << "," << r.tp << "," << r.fp << "," << r.fn << ","
           << fmt3(m.precision) << "," << fmt3(m.recall) << "," << fmt3(m.f1)
           << "\n";
    }
    os << "ALL," << report.tp << "," << report.fp << "," << report.fn << ","
       << fmt3(report.aggregate.precision) << "," << fmt3(report.aggregate.recall)
       << "," << fmt3(report.aggregate.f1) << "\n";
    return os.str();
}

std::string report_table(const EvalReport& report) {
    std::ostringstream os;
    os << "image            TP      FP      FN       P       R      F1\n";
    auto row = [&](const std::string& id, std::int64_t tp, std::int64_t fp,
                   std::int64_t fn, const Metrics& m) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-12s %7lld %7lld %7lld   %.3f   %.3f   %.3f\n",
                      id.c_str(), static_cast<long long>(tp),
                      static_cast<long long>(fp), static_cast<long long>(fn),
                      m.precision, m.recall, m.f1);
        os << buf;
    };
    for (const auto& [id, r] : report.per_image) {
        row(id, r.tp, r.fp, r.fn, metrics(r.tp, r.fp, r.fn));
    }
    row("ALL", report.tp, report.fp, report.fn, report.aggregate);
    return os.str();
}

}  // namespace mitodet::eval
