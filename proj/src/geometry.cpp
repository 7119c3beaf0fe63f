#include "moedet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "moedet/error.hpp"

namespace moedet {

double box_area(const Box& b) { return (b.x2 - b.x1) * (b.y2 - b.y1); }

Box decode_dfl(const DflDistribution& dist, double cx, double cy, double stride) {
    if (dist.bins < 2 || dist.probs.size() != static_cast<size_t>(4) * dist.bins)
        throw shape_error("decode_dfl: expected 4 rows of " + std::to_string(dist.bins) + " bins");
    double d[4];
    for (int r = 0; r < 4; ++r) {
        const double* row = dist.probs.data() + static_cast<size_t>(r) * dist.bins;
        double sum = 0, ev = 0;
        for (int k = 0; k < dist.bins; ++k) {
            sum += row[k];
            ev += k * row[k];
        }
        if (std::abs(sum - 1.0) > 1e-4) throw numeric_error("decode_dfl: row " + std::to_string(r) + " not normalized");
        d[r] = stride * ev;
    }
    // Row order is (left, top, bottom, right).
    return Box{cx - d[0], cy - d[1], cx + d[3], cy + d[2]};
}

double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double uni = box_area(a) + box_area(b) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

double giou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double uni = box_area(a) + box_area(b) - inter;
    const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
    const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
    const double enclose = ew * eh;
    if (enclose <= 0) return 0.0;
    const double i = uni > 0 ? inter / uni : 0.0;
    return i - (enclose - uni) / enclose;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold, double score_threshold,
                           int max_detections) {
    std::vector<size_t> order;
    order.reserve(dets.size());
    for (size_t i = 0; i < dets.size(); ++i)
        if (dets[i].score >= score_threshold) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](size_t l, size_t r) {
        if (dets[l].score != dets[r].score) return dets[l].score > dets[r].score;
        return l < r;
    });

    std::vector<Detection> kept;
    for (size_t idx : order) {
        if (static_cast<int>(kept.size()) >= max_detections) break;
        const Detection& cand = dets[idx];
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.class_id == cand.class_id && iou(k.box, cand.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(cand);
    }
    return kept;
}

}  // namespace moedet
