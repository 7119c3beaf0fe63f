#include "moedet/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "moedet/error.hpp"

namespace moedet {

std::vector<double> iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
    return t;
}

MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<GtObject>& gts,
                             double iou_threshold) {
    MatchResult res;
    res.tp.assign(dets.size(), false);
    std::vector<bool> taken(gts.size(), false);
    for (size_t d = 0; d < dets.size(); ++d) {
        int best = -1;
        double best_iou = 0.0;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (taken[g] || gts[g].class_id != dets[d].class_id) continue;
            const double v = iou(dets[d].box, gts[g].box);
            if (v > best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0 && best_iou >= iou_threshold) {
            res.tp[d] = true;
            taken[static_cast<size_t>(best)] = true;
        }
    }
    for (bool t : taken)
        if (!t) ++res.fn;
    return res;
}

double average_precision(const std::vector<bool>& flags, int num_gt) {
    if (num_gt < 0) throw config_error("average_precision: num_gt must be >= 0");
    if (num_gt == 0) return 0.0;
    // Cumulative precision/recall points, then the running-max envelope from
    // the high-recall end so each sampled recall sees the best precision at
    // or beyond it.
    const size_t n = flags.size();
    std::vector<double> prec(n), rec(n);
    int tp = 0;
    for (size_t i = 0; i < n; ++i) {
        if (flags[i]) ++tp;
        prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        rec[i] = static_cast<double>(tp) / num_gt;
    }
    for (size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
    double sum = 0.0;
    size_t j = 0;
    for (int s = 0; s <= 100; ++s) {
        const double r = s / 100.0;
        while (j < n && rec[j] < r) ++j;
        if (j < n) sum += prec[j];
    }
    return sum / 101.0;
}

EvalResult evaluate(const std::vector<std::vector<Detection>>& dets_per_image,
                    const std::vector<std::vector<GtObject>>& gts_per_image, int num_classes) {
    if (dets_per_image.size() != gts_per_image.size())
        throw config_error("evaluate: detection and ground-truth image counts differ");
    const auto thresholds = iou_thresholds();
    const size_t T = thresholds.size();
    const size_t num_images = gts_per_image.size();

    EvalResult r;
    r.ap.assign(static_cast<size_t>(num_classes), std::vector<double>(T, 0.0));
    r.class_valid.assign(static_cast<size_t>(num_classes), false);
    r.tp.assign(T, 0);
    r.fp.assign(T, 0);
    r.fn.assign(T, 0);

    std::vector<int> num_gt(static_cast<size_t>(num_classes), 0);
    std::vector<bool> has_det(static_cast<size_t>(num_classes), false);
    for (const auto& gts : gts_per_image)
        for (const auto& g : gts) {
            if (g.class_id < 0 || g.class_id >= num_classes) throw config_error("evaluate: class id out of range");
            ++num_gt[static_cast<size_t>(g.class_id)];
        }
    for (const auto& dets : dets_per_image)
        for (const auto& d : dets) {
            if (d.class_id < 0 || d.class_id >= num_classes) throw config_error("evaluate: class id out of range");
            has_det[static_cast<size_t>(d.class_id)] = true;
        }

    double ap_sum = 0.0, ar_sum = 0.0;
    int ap_terms = 0, ar_terms = 0;
    for (int c = 0; c < num_classes; ++c) {
        const size_t ci = static_cast<size_t>(c);
        r.class_valid[ci] = num_gt[ci] > 0 || has_det[ci];
        if (!r.class_valid[ci]) continue;
        for (size_t t = 0; t < T; ++t) {
            // Per-image greedy matching, then a global pool sorted by score
            // (stable: ties keep image order, then within-image order).
            struct Flagged {
                double score;
                bool tp;
            };
            std::vector<Flagged> pool;
            int matched = 0;
            for (size_t img = 0; img < num_images; ++img) {
                std::vector<Detection> cd;
                for (const auto& d : dets_per_image[img])
                    if (d.class_id == c) cd.push_back(d);
                std::vector<GtObject> cg;
                for (const auto& g : gts_per_image[img])
                    if (g.class_id == c) cg.push_back(g);
                auto m = match_detections(cd, cg, thresholds[t]);
                for (size_t d = 0; d < cd.size(); ++d) pool.push_back({cd[d].score, m.tp[d]});
                matched += static_cast<int>(cg.size()) - m.fn;
            }
            // Canonical pool order: score descending, true positives first
            // within a tie. This keeps the metrics invariant under image
            // permutation and under reordering of equal-score detections.
            std::stable_sort(pool.begin(), pool.end(), [](const Flagged& a, const Flagged& b) {
                if (a.score != b.score) return a.score > b.score;
                return a.tp && !b.tp;
            });
            std::vector<bool> flags;
            flags.reserve(pool.size());
            int tp_count = 0;
            for (const auto& f : pool) {
                flags.push_back(f.tp);
                if (f.tp) ++tp_count;
            }
            const double ap = average_precision(flags, num_gt[ci]);
            r.ap[ci][t] = ap;
            ap_sum += ap;
            ++ap_terms;
            r.tp[t] += tp_count;
            r.fp[t] += static_cast<int>(flags.size()) - tp_count;
            r.fn[t] += num_gt[ci] - matched;
            if (num_gt[ci] > 0) {
                ar_sum += static_cast<double>(matched) / num_gt[ci];
                ++ar_terms;
            }
        }
    }
    r.map_50_95 = ap_terms > 0 ? ap_sum / ap_terms : 0.0;
    r.ar = ar_terms > 0 ? ar_sum / ar_terms : 0.0;
    return r;
}

namespace {

std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

std::string format_eval_report(const EvalResult& r) {
    std::string out;
    out += "class            AP@0.50  AP@0.75  AP@0.5:0.95\n";
    const auto thresholds = iou_thresholds();
    for (size_t c = 0; c < r.ap.size(); ++c) {
        if (!r.class_valid[c]) continue;
        double mean = 0.0;
        for (double v : r.ap[c]) mean += v;
        mean /= static_cast<double>(thresholds.size());
        char line[128];
        std::snprintf(line, sizeof line, "%-16s %.6f %.6f %.6f\n", class_name(static_cast<int>(c)), r.ap[c][0],
                      r.ap[c][5], mean);
        out += line;
    }
    out += "mAP@0.5:0.95 " + fmt6(r.map_50_95) + "\n";
    out += "AR@100       " + fmt6(r.ar) + "\n";
    return out;
}

std::string format_eval_keyvals(const EvalResult& r) {
    std::string out;
    out += "map_50_95=" + fmt6(r.map_50_95) + "\n";
    out += "ar_100=" + fmt6(r.ar) + "\n";
    const auto thresholds = iou_thresholds();
    for (size_t c = 0; c < r.ap.size(); ++c) {
        if (!r.class_valid[c]) continue;
        for (size_t t = 0; t < thresholds.size(); ++t) {
            char key[64];
            std::snprintf(key, sizeof key, "ap_%s_%02d", class_name(static_cast<int>(c)),
                          static_cast<int>(thresholds[t] * 100 + 0.5));
            out += std::string(key) + "=" + fmt6(r.ap[c][t]) + "\n";
        }
    }
    return out;
}

}  // namespace moedet
