#pragma once

// Training objective: target assignment, the detection loss
// (classification + GIoU box + DFL) on pre-NMS fused logits, routing
// statistics, the load-balancing loss, and their weighted total.

#include <array>
#include <cmath>
#include <map>
#include <tuple>
#include <vector>

#include "moedet/data.hpp"
#include "moedet/expert.hpp"
#include "moedet/geometry.hpp"
#include "moedet/tensor.hpp"

namespace moedet {

struct Assignment {
    int level = 0;
    int row = 0, col = 0;
    std::array<double, 4> targets{};  // (left, top, bottom, right), stride units
    int class_id = 0;
    Box gt_box{};
};

// One positive cell per GT: the level is picked by the box's max side (small
// boxes to fine strides, the stride-16 band closed at image_size/4), the cell
// is the one containing the box center, and the targets are center-to-side
// distances in stride units, clamped to the representable bin range. When two
// GTs land in the same cell the smaller area wins; remaining ties break on
// coordinates so the result is independent of GT order. Output is sorted by
// (level, row, col).
inline std::vector<Assignment> assign_targets(const std::vector<GtObject>& gts, const ExpertConfig& config) {
    validate(config);
    const double S = config.image_size;
    std::map<std::tuple<int, int, int>, Assignment> chosen;
    auto precedes = [](const Assignment& a, const Assignment& b) {
        const double aa = box_area(a.gt_box), ab = box_area(b.gt_box);
        if (aa != ab) return aa < ab;
        const auto ka = std::make_tuple(a.gt_box.x1, a.gt_box.y1, a.gt_box.x2, a.gt_box.y2, a.class_id);
        const auto kb = std::make_tuple(b.gt_box.x1, b.gt_box.y1, b.gt_box.x2, b.gt_box.y2, b.class_id);
        return ka < kb;
    };
    for (const GtObject& gt : gts) {
        const Box& b = gt.box;
        if (!(b.x2 > b.x1 && b.y2 > b.y1)) throw shape_error("assign_targets: degenerate ground-truth box");
        if (b.x1 < 0 || b.y1 < 0 || b.x2 > S || b.y2 > S)
            throw shape_error("assign_targets: ground-truth box outside image bounds");
        if (gt.class_id < 0 || gt.class_id >= config.num_classes)
            throw shape_error("assign_targets: class id outside [0, num_classes)");
        const double m = std::max(b.x2 - b.x1, b.y2 - b.y1);
        const int level = m < S / 8 ? 0 : (m <= S / 4 ? 1 : 2);
        const int stride = kStrides[static_cast<size_t>(level)];
        const int grid = config.image_size / stride;
        const double cx = (b.x1 + b.x2) / 2, cy = (b.y1 + b.y2) / 2;
        Assignment a;
        a.level = level;
        a.col = std::min(grid - 1, static_cast<int>(cx / stride));
        a.row = std::min(grid - 1, static_cast<int>(cy / stride));
        const double hi = config.num_bins - 1;
        a.targets = {std::clamp((cx - b.x1) / stride, 0.0, hi), std::clamp((cy - b.y1) / stride, 0.0, hi),
                     std::clamp((b.y2 - cy) / stride, 0.0, hi), std::clamp((b.x2 - cx) / stride, 0.0, hi)};
        a.class_id = gt.class_id;
        a.gt_box = b;
        auto key = std::make_tuple(level, a.row, a.col);
        auto it = chosen.find(key);
        if (it == chosen.end() || precedes(a, it->second)) chosen[key] = a;
    }
    std::vector<Assignment> out;
    out.reserve(chosen.size());
    for (auto& [key, a] : chosen) out.push_back(a);
    return out;
}

struct LossWeights {
    double cls = 0.5;
    double box = 7.5;
    double dfl = 1.5;
};

template <typename S>
struct DetectionLoss {
    TensorPtr<S> total;
    TensorPtr<S> cls, box, dfl;  // unweighted parts
    int num_positives = 0;
};

// L_det = w_cls*L_cls + w_box*L_box + w_dfl*L_dfl on the fused pre-NMS
// logits. Classification is summed binary cross entropy averaged over all
// cells of all levels; box and DFL terms average over positive cells. The
// box branch decodes each positive's DFL expectation around the GT center
// (the same origin the targets are measured from) and scores it with GIoU.
template <typename S>
DetectionLoss<S> detection_loss(Tape<S>& tape, const std::array<TensorPtr<S>, kNumLevels>& box_logits,
                                const std::array<TensorPtr<S>, kNumLevels>& cls_logits,
                                const std::vector<std::vector<Assignment>>& assignments, const ExpertConfig& config,
                                const LossWeights& weights = {}) {
    validate(config);
    const int B = cls_logits[0]->dim(0);
    detail::require(static_cast<int>(assignments.size()) == B,
                    "detection_loss: need one assignment list per image in the batch");
    const int N = config.num_bins;

    // Classification targets: one-hot at positive cells, zero elsewhere.
    int64_t total_cells = 0;
    std::array<TensorPtr<S>, kNumLevels> cls_targets;
    for (int l = 0; l < kNumLevels; ++l) {
        const auto& shape = cls_logits[static_cast<size_t>(l)]->shape;
        detail::require(cls_logits[static_cast<size_t>(l)]->rank() == 4 && shape[1] == config.num_classes,
                        "detection_loss: class logits must be [B,n_c,H,W]");
        cls_targets[static_cast<size_t>(l)] = tensor_zeros<S>(shape);
        total_cells += static_cast<int64_t>(B) * shape[2] * shape[3];
    }
    for (int b = 0; b < B; ++b)
        for (const Assignment& a : assignments[static_cast<size_t>(b)])
            cls_targets[static_cast<size_t>(a.level)]->at4(b, a.class_id, a.row, a.col) = S(1);

    TensorPtr<S> bce;
    for (int l = 0; l < kNumLevels; ++l) {
        auto part = bce_logits_sum(tape, cls_logits[static_cast<size_t>(l)], cls_targets[static_cast<size_t>(l)]);
        bce = bce ? add(tape, bce, part) : part;
    }
    auto l_cls = mul_scalar(tape, bce, S(1) / static_cast<S>(total_cells));

    // Positives in deterministic (image, level, row, col) order.
    struct Pos {
        int b;
        const Assignment* a;
    };
    std::vector<Pos> positives;
    for (int b = 0; b < B; ++b)
        for (const Assignment& a : assignments[static_cast<size_t>(b)]) positives.push_back({b, &a});
    const int R = static_cast<int>(positives.size());

    DetectionLoss<S> out;
    out.num_positives = R;
    out.cls = l_cls;

    if (R == 0) {
        out.box = tensor_zeros<S>({1});
        out.dfl = tensor_zeros<S>({1});
        out.total = mul_scalar(tape, l_cls, static_cast<S>(weights.cls));
        return out;
    }

    TensorPtr<S> dfl_acc;
    std::vector<TensorPtr<S>> rows;
    rows.reserve(positives.size());
    for (const Pos& p : positives) {
        const Assignment& a = *p.a;
        auto cell = gather_cell(tape, box_logits[static_cast<size_t>(a.level)], p.b, a.row, a.col);
        rows.push_back(cell);
        const std::array<S, 4> t{static_cast<S>(a.targets[0]), static_cast<S>(a.targets[1]),
                                 static_cast<S>(a.targets[2]), static_cast<S>(a.targets[3])};
        auto d = dfl_cell_loss(tape, cell, t, N);
        dfl_acc = dfl_acc ? add(tape, dfl_acc, d) : d;
    }
    out.dfl = mul_scalar(tape, dfl_acc, S(1) / static_cast<S>(R));

    // Vectorized GIoU over all positives.
    auto stacked = stack_rows(tape, rows);                      // [R,4N]
    auto probs = softmax(tape, reshape(tape, stacked, {4 * R, N}), 1);
    auto ev = reshape(tape, dfl_expect(tape, probs), {R, 4});   // bin units
    auto d_l = select_column(tape, ev, 0);
    auto d_t = select_column(tape, ev, 1);
    auto d_b = select_column(tape, ev, 2);
    auto d_r = select_column(tape, ev, 3);

    std::vector<S> sv, cxv, cyv, gx1, gy1, gx2, gy2, gav;
    for (const Pos& p : positives) {
        const Assignment& a = *p.a;
        sv.push_back(static_cast<S>(kStrides[static_cast<size_t>(a.level)]));
        cxv.push_back(static_cast<S>((a.gt_box.x1 + a.gt_box.x2) / 2));
        cyv.push_back(static_cast<S>((a.gt_box.y1 + a.gt_box.y2) / 2));
        gx1.push_back(static_cast<S>(a.gt_box.x1));
        gy1.push_back(static_cast<S>(a.gt_box.y1));
        gx2.push_back(static_cast<S>(a.gt_box.x2));
        gy2.push_back(static_cast<S>(a.gt_box.y2));
        gav.push_back(static_cast<S>(box_area(a.gt_box)));
    }
    auto cst = [&](std::vector<S> v) { return tensor_of<S>({R}, std::move(v)); };
    auto stride_v = cst(sv);
    auto cx = cst(cxv), cy = cst(cyv);
    auto bx1 = cst(gx1), by1 = cst(gy1), bx2 = cst(gx2), by2 = cst(gy2), garea = cst(gav);
    auto zero = tensor_zeros<S>({R});
    auto one = tensor_full<S>({R}, S(1));

    auto px1 = sub(tape, cx, elementwise_mul(tape, d_l, stride_v));
    auto py1 = sub(tape, cy, elementwise_mul(tape, d_t, stride_v));
    auto py2 = add(tape, cy, elementwise_mul(tape, d_b, stride_v));
    auto px2 = add(tape, cx, elementwise_mul(tape, d_r, stride_v));

    auto iw = maximum(tape, sub(tape, minimum(tape, px2, bx2), maximum(tape, px1, bx1)), zero);
    auto ih = maximum(tape, sub(tape, minimum(tape, py2, by2), maximum(tape, py1, by1)), zero);
    auto inter = elementwise_mul(tape, iw, ih);
    auto parea = elementwise_mul(tape, sub(tape, px2, px1), sub(tape, py2, py1));
    auto uni = sub(tape, add(tape, parea, garea), inter);
    auto ew = sub(tape, maximum(tape, px2, bx2), minimum(tape, px1, bx1));
    auto eh = sub(tape, maximum(tape, py2, by2), minimum(tape, py1, by1));
    auto enclose = elementwise_mul(tape, ew, eh);
    auto giou_v = sub(tape, div(tape, inter, uni), div(tape, sub(tape, enclose, uni), enclose));
    out.box = mean_all(tape, sub(tape, one, giou_v));

    auto total = mul_scalar(tape, l_cls, static_cast<S>(weights.cls));
    total = add(tape, total, mul_scalar(tape, out.box, static_cast<S>(weights.box)));
    total = add(tape, total, mul_scalar(tape, out.dfl, static_cast<S>(weights.dfl)));
    out.total = total;
    return out;
}

// Hard routing fractions (constants) and mean routing probabilities
// (differentiable) per level.
template <typename S>
struct RoutingStats {
    struct Level {
        std::vector<double> f;  // argmax fractions, ties to the lowest index
        TensorPtr<S> P;         // [E], column means of alpha
    };
    std::vector<Level> levels;
};

template <typename S>
RoutingStats<S> routing_stats(Tape<S>& tape, const std::vector<TensorPtr<S>>& alphas) {
    RoutingStats<S> stats;
    for (const auto& alpha : alphas) {
        detail::require(alpha->rank() == 2 && alpha->dim(0) >= 1, "routing_stats: alpha must be [B,E] with B >= 1");
        const int B = alpha->dim(0), E = alpha->dim(1);
        typename RoutingStats<S>::Level lvl;
        lvl.f.assign(static_cast<size_t>(E), 0.0);
        for (int b = 0; b < B; ++b) {
            int best = 0;
            for (int e = 1; e < E; ++e)
                if (alpha->at2(b, e) > alpha->at2(b, best)) best = e;
            lvl.f[static_cast<size_t>(best)] += 1.0 / B;
        }
        lvl.P = mean_rows(tape, alpha);
        stats.levels.push_back(std::move(lvl));
    }
    return stats;
}

// L_lb = (1/I) * sum_i E * sum_e f_{i,e} * P_{i,e}; the gradient flows only
// through P.
template <typename S>
TensorPtr<S> load_balance_loss(Tape<S>& tape, const RoutingStats<S>& stats, int num_experts, int num_levels) {
    detail::require(static_cast<int>(stats.levels.size()) == num_levels,
                    "load_balance_loss: stats must cover exactly the stated level count");
    TensorPtr<S> acc;
    for (const auto& lvl : stats.levels) {
        detail::require(static_cast<int>(lvl.f.size()) == num_experts && lvl.P->dim(0) == num_experts,
                        "load_balance_loss: stats width must equal the expert count");
        std::vector<S> f(lvl.f.begin(), lvl.f.end());
        auto fc = tensor_of<S>({num_experts}, std::move(f));
        auto dot = sum_all(tape, elementwise_mul(tape, lvl.P, fc));
        acc = acc ? add(tape, acc, dot) : dot;
    }
    return mul_scalar(tape, acc, static_cast<S>(num_experts) / static_cast<S>(num_levels));
}

template <typename S>
TensorPtr<S> total_loss(Tape<S>& tape, const TensorPtr<S>& l_det, const TensorPtr<S>& l_lb, double lambda_lb) {
    if (lambda_lb < 0) throw config_error("lambda_lb must be non-negative");
    return add(tape, l_det, mul_scalar(tape, l_lb, static_cast<S>(lambda_lb)));
}

}  // namespace moedet
