#pragma once

// Box algebra, DFL decoding, the IoU family, and greedy NMS. Everything here
// is pure arithmetic on plain structs; nothing touches the autodiff tape.

#include <vector>

namespace moedet {

struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

double box_area(const Box& b);

struct Detection {
    Box box;
    int class_id = 0;
    double score = 0;
};

// Four rows (left, top, bottom, right) of N bin probabilities, row-major.
struct DflDistribution {
    int bins = 0;
    std::vector<double> probs;  // 4 * bins
};

// Expectation decode: distance_r = stride * sum_k k * probs[r][k], then the
// distances are pushed out from the cell center. Rows must be normalized
// within 1e-4.
Box decode_dfl(const DflDistribution& dist, double cx, double cy, double stride);

double iou(const Box& a, const Box& b);

// IoU minus the enclosing-box slack ratio; in (-1, 1], 1 only for identical
// boxes.
double giou(const Box& a, const Box& b);

// Class-wise greedy suppression. Detections below score_threshold are
// dropped, candidates are visited by descending score (ties by original
// index), and a candidate survives iff it overlaps no kept detection of the
// same class with IoU strictly above iou_threshold. At most max_detections
// survive; output is score-descending.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold, double score_threshold,
                           int max_detections);

}  // namespace moedet
