#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "moedet/error.hpp"
#include "moedet/eval.hpp"
#include "moedet/rng.hpp"

using moedet::average_precision;
using moedet::Box;
using moedet::Detection;
using moedet::evaluate;
using moedet::EvalResult;
using moedet::GtObject;
using moedet::match_detections;

namespace {

// ----- independent oracle, structured differently from the library path -----

double iou_o(const Box& a, const Box& b) {
    const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (w <= 0 || h <= 0) return 0.0;
    const double inter = w * h;
    const double ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    return ua > 0 ? inter / ua : 0.0;
}

// Pool-erase greedy matcher for one image and one class.
std::vector<bool> match_o(const std::vector<Detection>& dets, std::vector<Box> gt_pool, double thr, int* matched) {
    std::vector<bool> tp(dets.size(), false);
    for (size_t d = 0; d < dets.size(); ++d) {
        size_t best = gt_pool.size();
        double best_iou = 0.0;
        for (size_t g = 0; g < gt_pool.size(); ++g) {
            const double v = iou_o(dets[d].box, gt_pool[g]);
            if (v > best_iou) {
                best_iou = v;
                best = g;
            }
        }
        if (best < gt_pool.size() && best_iou >= thr) {
            tp[d] = true;
            gt_pool.erase(gt_pool.begin() + static_cast<long>(best));
            ++*matched;
        }
    }
    return tp;
}

// Quadratic 101-point AP: for every sampled recall, scan every PR point.
double ap_o(const std::vector<bool>& flags, int num_gt) {
    if (num_gt == 0) return 0.0;
    std::vector<double> prec, rec;
    int tp = 0;
    for (size_t i = 0; i < flags.size(); ++i) {
        if (flags[i]) ++tp;
        prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        rec.push_back(static_cast<double>(tp) / num_gt);
    }
    double sum = 0.0;
    for (int s = 0; s <= 100; ++s) {
        const double r = s / 100.0;
        double best = 0.0;
        for (size_t k = 0; k < prec.size(); ++k)
            if (rec[k] >= r) best = std::max(best, prec[k]);
        sum += best;
    }
    return sum / 101.0;
}

struct OracleOut {
    double map, ar;
};

OracleOut eval_o(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<GtObject>>& gts,
                 int num_classes) {
    double ap_sum = 0, ar_sum = 0;
    int ap_n = 0, ar_n = 0;
    for (int c = 0; c < num_classes; ++c) {
        int num_gt = 0;
        bool any_det = false;
        for (const auto& g : gts)
            for (const auto& o : g) num_gt += o.class_id == c;
        for (const auto& d : dets)
            for (const auto& o : d) any_det |= o.class_id == c;
        if (num_gt == 0 && !any_det) continue;
        for (double thr = 0.50; thr < 0.951; thr += 0.05) {
            struct SF {
                double score;
                bool tp;
            };
            std::vector<SF> pool;
            int matched = 0;
            for (size_t img = 0; img < dets.size(); ++img) {
                std::vector<Detection> cd;
                for (const auto& o : dets[img])
                    if (o.class_id == c) cd.push_back(o);
                std::vector<Box> cg;
                for (const auto& o : gts[img])
                    if (o.class_id == c) cg.push_back(o.box);
                auto tp = match_o(cd, cg, thr, &matched);
                for (size_t d = 0; d < cd.size(); ++d) pool.push_back({cd[d].score, tp[d]});
            }
            std::stable_sort(pool.begin(), pool.end(), [](const SF& a, const SF& b) {
                if (a.score != b.score) return a.score > b.score;
                return a.tp && !b.tp;
            });
            std::vector<bool> flags;
            for (const auto& p : pool) flags.push_back(p.tp);
            ap_sum += ap_o(flags, num_gt);
            ++ap_n;
            if (num_gt > 0) {
                ar_sum += static_cast<double>(matched) / num_gt;
                ++ar_n;
            }
        }
    }
    return {ap_n ? ap_sum / ap_n : 0.0, ar_n ? ar_sum / ar_n : 0.0};
}

// Random instance: a handful of images with GTs and detections around them.
struct Instance {
    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<GtObject>> gts;
};

Instance random_instance(moedet::Rng& rng, int num_classes) {
    Instance inst;
    const int images = rng.uniform_int(1, 4);
    for (int i = 0; i < images; ++i) {
        std::vector<GtObject> gt;
        std::vector<Detection> det;
        const int n = rng.uniform_int(0, 6);
        for (int k = 0; k < n; ++k) {
            const double s = rng.uniform(6, 24);
            const double x = rng.uniform(0, 64 - s), y = rng.uniform(0, 64 - s);
            const int cls = rng.uniform_int(0, num_classes - 1);
            gt.push_back({Box{x, y, x + s, y + s}, cls});
            // Jittered prediction for most GTs, sometimes with the wrong class.
            if (rng.uniform() < 0.8) {
                const double j = rng.uniform(0, 6);
                det.push_back({Box{x + j, y + j, x + s + j, y + s + j},
                               rng.uniform() < 0.9 ? cls : rng.uniform_int(0, num_classes - 1), rng.uniform(0.2, 1.0)});
            }
        }
        // Spurious detections.
        const int extra = rng.uniform_int(0, 2);
        for (int k = 0; k < extra; ++k) {
            const double s = rng.uniform(6, 20);
            const double x = rng.uniform(0, 64 - s), y = rng.uniform(0, 64 - s);
            det.push_back({Box{x, y, x + s, y + s}, rng.uniform_int(0, num_classes - 1), rng.uniform(0.05, 1.0)});
        }
        std::sort(det.begin(), det.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
        inst.dets.push_back(det);
        inst.gts.push_back(gt);
    }
    return inst;
}

}  // namespace

TEST_CASE("match_detections: worked examples") {
    const std::vector<GtObject> gts{{Box{10, 10, 30, 30}, 0}};

    auto exact = match_detections({{Box{10, 10, 30, 30}, 0, 0.9}}, gts, 0.5);
    CHECK(exact.tp == std::vector<bool>{true});
    CHECK(exact.fn == 0);

    // IoU (10x20 overlap band) well under 0.5: counted as FP, GT unmatched.
    auto far = match_detections({{Box{24, 10, 44, 30}, 0, 0.9}}, gts, 0.5);
    CHECK(far.tp == std::vector<bool>{false});
    CHECK(far.fn == 1);

    // Two detections over one GT: the higher-scored (earlier) one wins.
    auto two = match_detections({{Box{10, 10, 30, 30}, 0, 0.9}, {Box{11, 11, 31, 31}, 0, 0.5}}, gts, 0.5);
    CHECK(two.tp == std::vector<bool>{true, false});
    CHECK(two.fn == 0);

    // Class mismatch never matches.
    auto wrong = match_detections({{Box{10, 10, 30, 30}, 1, 0.9}}, gts, 0.5);
    CHECK(wrong.tp == std::vector<bool>{false});
    CHECK(wrong.fn == 1);
}

TEST_CASE("average_precision: worked examples and oracle equality") {
    CHECK(average_precision({true}, 1) == doctest::Approx(1.0));
    CHECK(average_precision({}, 1) == doctest::Approx(0.0));
    CHECK(average_precision({false, false}, 0) == doctest::Approx(0.0));

    const std::vector<bool> flags{true, false, true};
    CHECK(average_precision(flags, 2) == doctest::Approx(ap_o(flags, 2)).epsilon(1e-12));

    moedet::Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<bool> f;
        const int n = rng.uniform_int(0, 12);
        for (int i = 0; i < n; ++i) f.push_back(rng.uniform() < 0.5);
        const int num_gt = rng.uniform_int(1, 8);
        CHECK(average_precision(f, num_gt) == doctest::Approx(ap_o(f, num_gt)).epsilon(1e-12));
    }
}

TEST_CASE("evaluate: perfect predictions give mAP = AR = 1") {
    std::vector<std::vector<GtObject>> gts{
        {{Box{5, 5, 20, 20}, 0}, {Box{30, 30, 50, 55}, 1}},
        {{Box{8, 12, 28, 30}, 2}},
    };
    std::vector<std::vector<Detection>> dets;
    for (const auto& g : gts) {
        std::vector<Detection> d;
        for (const auto& o : g) d.push_back({o.box, o.class_id, 1.0});
        dets.push_back(d);
    }
    auto r = evaluate(dets, gts);
    CHECK(r.map_50_95 == doctest::Approx(1.0));
    CHECK(r.ar == doctest::Approx(1.0));
    for (int t = 0; t < 10; ++t) {
        CHECK(r.tp[static_cast<size_t>(t)] == 3);
        CHECK(r.fp[static_cast<size_t>(t)] == 0);
        CHECK(r.fn[static_cast<size_t>(t)] == 0);
    }
}

TEST_CASE("evaluate: no predictions give zero metrics when GTs exist") {
    std::vector<std::vector<GtObject>> gts{{{Box{5, 5, 20, 20}, 0}}};
    auto r = evaluate({{}}, gts);
    CHECK(r.map_50_95 == doctest::Approx(0.0));
    CHECK(r.ar == doctest::Approx(0.0));
    CHECK(r.fn[0] == 1);
}

TEST_CASE("evaluate: GT-less class with false positives scores zero AP; absent class is skipped") {
    std::vector<std::vector<GtObject>> gts{{{Box{5, 5, 25, 25}, 0}}};
    std::vector<std::vector<Detection>> dets{{{Box{5, 5, 25, 25}, 0, 0.9}, {Box{40, 40, 60, 60}, 1, 0.8}}};
    auto r = evaluate(dets, gts);
    CHECK(r.class_valid[0]);
    CHECK(r.class_valid[1]);       // has detections, no GT: valid with AP 0
    CHECK_FALSE(r.class_valid[2]); // nothing at all
    CHECK_FALSE(r.class_valid[3]);
    CHECK(r.ap[1][0] == doctest::Approx(0.0));
    // mAP averages class 0 (AP 1 everywhere) and class 1 (AP 0): 0.5.
    CHECK(r.map_50_95 == doctest::Approx(0.5));
    // AR only averages classes with ground truth.
    CHECK(r.ar == doctest::Approx(1.0));
}

TEST_CASE("evaluate: 50 randomized instances match the brute-force oracle within 1e-9") {
    moedet::Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        auto inst = random_instance(rng, 2);
        auto got = evaluate(inst.dets, inst.gts, 2);
        auto want = eval_o(inst.dets, inst.gts, 2);
        REQUIRE(std::abs(got.map_50_95 - want.map) < 1e-9);
        REQUIRE(std::abs(got.ar - want.ar) < 1e-9);
        REQUIRE(got.map_50_95 >= 0.0);
        REQUIRE(got.map_50_95 <= 1.0);
        REQUIRE(got.ar >= 0.0);
        REQUIRE(got.ar <= 1.0);
    }
}

TEST_CASE("evaluate: invariant under image permutation and score-tie reordering") {
    moedet::Rng rng(23);
    auto inst = random_instance(rng, 2);
    while (inst.dets.size() < 2) inst = random_instance(rng, 2);
    auto base = evaluate(inst.dets, inst.gts, 2);

    auto perm = inst;
    std::reverse(perm.dets.begin(), perm.dets.end());
    std::reverse(perm.gts.begin(), perm.gts.end());
    auto moved = evaluate(perm.dets, perm.gts, 2);
    CHECK(base.map_50_95 == moved.map_50_95);
    CHECK(base.ar == moved.ar);

    // Force a score tie across images: one TP and one FP at the same score.
    std::vector<std::vector<GtObject>> gts{{{Box{5, 5, 25, 25}, 0}}, {{Box{10, 10, 30, 30}, 0}}};
    std::vector<std::vector<Detection>> d1{{{Box{5, 5, 25, 25}, 0, 0.7}}, {{Box{40, 40, 60, 60}, 0, 0.7}}};
    std::vector<std::vector<Detection>> d2{{{Box{40, 40, 60, 60}, 0, 0.7}}, {{Box{10, 10, 30, 30}, 0, 0.7}}};
    auto r1 = evaluate(d1, gts);
    auto r2 = evaluate(d2, gts);
    CHECK(r1.map_50_95 == r2.map_50_95);
    CHECK(r1.ar == r2.ar);
}

TEST_CASE("evaluate: adding a perfect top-score detection never hurts") {
    moedet::Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        auto inst = random_instance(rng, 2);
        // Find an image with at least one GT; append an exact detection for
        // its first GT at a score above everything else.
        size_t img = inst.gts.size();
        for (size_t i = 0; i < inst.gts.size(); ++i)
            if (!inst.gts[i].empty()) {
                img = i;
                break;
            }
        if (img == inst.gts.size()) continue;
        auto before = evaluate(inst.dets, inst.gts, 2);
        auto& gt0 = inst.gts[img][0];
        inst.dets[img].insert(inst.dets[img].begin(), {gt0.box, gt0.class_id, 2.0});
        auto after = evaluate(inst.dets, inst.gts, 2);
        CHECK(after.map_50_95 >= before.map_50_95 - 1e-12);
        CHECK(after.ar >= before.ar - 1e-12);
    }
}

TEST_CASE("evaluate: report formatting carries the headline metrics") {
    std::vector<std::vector<GtObject>> gts{{{Box{5, 5, 20, 20}, 0}}};
    std::vector<std::vector<Detection>> dets{{{Box{5, 5, 20, 20}, 0, 1.0}}};
    auto r = evaluate(dets, gts);
    auto text = moedet::format_eval_report(r);
    CHECK(text.find("mAP@0.5:0.95 1.000000") != std::string::npos);
    CHECK(text.find("AR@100       1.000000") != std::string::npos);
    auto kv = moedet::format_eval_keyvals(r);
    CHECK(kv.find("map_50_95=1.000000") != std::string::npos);
    CHECK(kv.find("ar_100=1.000000") != std::string::npos);
    CHECK(kv.find("ap_disc_50=1.000000") != std::string::npos);
}

TEST_CASE("evaluate: mismatched image counts are rejected") {
    CHECK_THROWS_AS(evaluate({{}}, {}), moedet::config_error);
}
