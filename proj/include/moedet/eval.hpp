#pragma once

// COCO-style detection metrics: greedy per-class matching, 101-point
// interpolated average precision, mAP@0.5:0.95, and AR@100.

#include <string>
#include <vector>

#include "moedet/data.hpp"
#include "moedet/geometry.hpp"

namespace moedet {

// The standard threshold grid 0.50, 0.55, ..., 0.95.
std::vector<double> iou_thresholds();

struct MatchResult {
    std::vector<bool> tp;  // one flag per detection, detection order preserved
    int fn = 0;            // ground-truth objects left unmatched
};

// Greedy matching: detections must already be sorted by descending score
// (ties by original index). Each detection claims the unmatched same-class
// GT with the highest IoU if that IoU reaches the threshold; each GT is
// matched at most once. IoU ties between GTs go to the lower GT index.
MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<GtObject>& gts,
                             double iou_threshold);

// 101-point interpolated AP from pooled TP/FP flags sorted by descending
// score. The precision envelope is sampled at recalls 0.00, 0.01, ..., 1.00.
// With num_gt == 0 the caller decides whether the class is skipped; this
// function returns 0 in that case (any flag is a false positive).
double average_precision(const std::vector<bool>& flags, int num_gt);

struct EvalResult {
    std::vector<std::vector<double>> ap;  // [class][threshold]; valid rows only
    std::vector<bool> class_valid;        // false: no GT and no detections
    std::vector<int> tp, fp, fn;          // per threshold, summed over classes
    double map_50_95 = 0.0;
    double ar = 0.0;
};

// Detections must be NMS-filtered (<= 100 per image, sorted by descending
// score). mAP averages AP over valid classes and all thresholds; AR averages
// matched-GT fractions the same way over classes that have ground truth.
EvalResult evaluate(const std::vector<std::vector<Detection>>& dets_per_image,
                    const std::vector<std::vector<GtObject>>& gts_per_image, int num_classes = kNumClasses);

// Plain-text table plus machine-readable key=value lines (6 decimals).
std::string format_eval_report(const EvalResult& r);
std::string format_eval_keyvals(const EvalResult& r);

}  // namespace moedet
