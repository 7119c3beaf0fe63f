#pragma once

// Glue between data, models, losses, and metrics: batching scenes into
// tensors, running single-expert or MoE forward passes, and decoding fused
// logits into NMS-filtered detections. The loss path never touches the
// decode/NMS path; they only share the raw logits.

#include <algorithm>
#include <cmath>
#include <vector>

#include "moedet/checkpoint.hpp"
#include "moedet/data.hpp"
#include "moedet/expert.hpp"
#include "moedet/geometry.hpp"
#include "moedet/losses.hpp"
#include "moedet/router.hpp"

namespace moedet {

struct DecodeConfig {
    double score_threshold = 0.05;
    double nms_iou = 0.6;
    int max_detections = 100;
};

template <typename S>
TensorPtr<S> batch_to_tensor(const std::vector<const Scene*>& scenes) {
    detail::require(!scenes.empty(), "batch_to_tensor: empty batch");
    const int size = scenes[0]->size;
    auto t = tensor_zeros<S>({static_cast<int>(scenes.size()), 3, size, size});
    for (size_t b = 0; b < scenes.size(); ++b) {
        detail::require(scenes[b]->size == size, "batch_to_tensor: mixed image sizes in one batch");
        const auto& img = scenes[b]->image;
        S* dst = t->data.data() + static_cast<size_t>(b) * img.size();
        for (size_t i = 0; i < img.size(); ++i) dst[i] = static_cast<S>(img[i]);
    }
    return t;
}

// Raw per-level logits from either model family, so the loss and decode
// paths can be written once.
template <typename S>
struct ModelOutputs {
    std::array<TensorPtr<S>, kNumLevels> box_logits;
    std::array<TensorPtr<S>, kNumLevels> cls_logits;
    std::array<TensorPtr<S>, kNumLevels> alpha;  // empty tensors for single experts
};

template <typename S>
ModelOutputs<S> single_forward(Tape<S>& tape, const TensorPtr<S>& image, const ParameterSet<S>& params,
                               const ExpertConfig& ec) {
    auto out = expert_forward(tape, image, params, ec);
    ModelOutputs<S> m;
    m.box_logits = out.box_logits;
    m.cls_logits = out.cls_logits;
    return m;
}

template <typename S>
ModelOutputs<S> moe_model_forward(Tape<S>& tape, const TensorPtr<S>& image,
                                  const std::vector<ParameterSet<S>>& experts, const ParameterSet<S>& moe_params,
                                  const ExpertConfig& ec, const RouterConfig& rc) {
    auto out = moe_forward(tape, image, experts, moe_params, ec, rc);
    ModelOutputs<S> m;
    m.box_logits = out.box_logits;
    m.cls_logits = out.cls_logits;
    m.alpha = out.alpha;
    return m;
}

// Decode one image's fused logits: every (cell, class) is a candidate whose
// score is the sigmoid class logit; boxes come from the DFL expectation
// around the cell center, clipped to the image. Greedy per-class NMS caps
// the result.
template <typename S>
std::vector<Detection> decode_detections(const ModelOutputs<S>& out, int image_index, const ExpertConfig& ec,
                                         const DecodeConfig& dc = {}) {
    std::vector<Detection> cands;
    const int N = ec.num_bins;
    for (int l = 0; l < kNumLevels; ++l) {
        const auto& box = out.box_logits[static_cast<size_t>(l)];
        const auto& cls = out.cls_logits[static_cast<size_t>(l)];
        const int stride = kStrides[static_cast<size_t>(l)];
        const int H = box->dim(2), W = box->dim(3);
        std::vector<double> p(static_cast<size_t>(N));
        for (int row = 0; row < H; ++row) {
            for (int col = 0; col < W; ++col) {
                // Best class first: skip the DFL softmax when no class clears
                // the score threshold.
                double best_any = -1.0;
                for (int c = 0; c < ec.num_classes; ++c) {
                    const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(cls->at4(image_index, c, row, col))));
                    best_any = std::max(best_any, s);
                }
                if (best_any < dc.score_threshold) continue;

                double d[4];
                for (int side = 0; side < 4; ++side) {
                    double mx = -1e30;
                    for (int k = 0; k < N; ++k)
                        mx = std::max(mx, static_cast<double>(box->at4(image_index, side * N + k, row, col)));
                    double z = 0.0;
                    for (int k = 0; k < N; ++k) {
                        p[static_cast<size_t>(k)] =
                            std::exp(static_cast<double>(box->at4(image_index, side * N + k, row, col)) - mx);
                        z += p[static_cast<size_t>(k)];
                    }
                    double ev = 0.0;
                    for (int k = 0; k < N; ++k) ev += k * p[static_cast<size_t>(k)] / z;
                    d[side] = ev * stride;
                }
                const double cx = (col + 0.5) * stride, cy = (row + 0.5) * stride;
                const double S_img = ec.image_size;
                Box b{std::clamp(cx - d[0], 0.0, S_img), std::clamp(cy - d[1], 0.0, S_img),
                      std::clamp(cx + d[3], 0.0, S_img), std::clamp(cy + d[2], 0.0, S_img)};
                if (!(b.x2 > b.x1 && b.y2 > b.y1)) continue;
                for (int c = 0; c < ec.num_classes; ++c) {
                    const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(cls->at4(image_index, c, row, col))));
                    if (s >= dc.score_threshold) cands.push_back({b, c, s});
                }
            }
        }
    }
    return nms(cands, dc.nms_iou, dc.score_threshold, dc.max_detections);
}

}  // namespace moedet
