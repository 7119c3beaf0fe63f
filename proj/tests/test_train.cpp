#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <vector>

#include "moedet/checkpoint.hpp"
#include "moedet/data.hpp"
#include "moedet/error.hpp"
#include "moedet/train.hpp"

using namespace moedet;

namespace {

std::vector<const Scene*> all_ptrs(const std::vector<Scene>& scenes, size_t count) {
    std::vector<const Scene*> out;
    for (size_t i = 0; i < std::min(count, scenes.size()); ++i) out.push_back(&scenes[i]);
    return out;
}

TrainConfig quick_config(int epochs, uint64_t seed) {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.seed = seed;
    return tc;
}

}  // namespace

TEST_CASE("optimizer: momentum accumulation and global norm clip") {
    auto p = tensor_of<float>({2}, {1.0f, 2.0f}, true);
    SgdMomentum opt({p}, 0.1, 0.9, 10.0);

    // Constant gradient (3, 4): norm 5, under the clip.
    p->grad = {3.0f, 4.0f};
    opt.step();
    CHECK(opt.last_grad_norm() == doctest::Approx(5.0));
    CHECK(p->data[0] == doctest::Approx(1.0 - 0.1 * 3.0));
    CHECK(p->data[1] == doctest::Approx(2.0 - 0.1 * 4.0));

    // Second step with the same gradient: velocity = 0.9*g + g = 1.9*g.
    p->grad = {3.0f, 4.0f};
    opt.step();
    CHECK(p->data[0] == doctest::Approx(1.0 - 0.1 * 3.0 - 0.1 * 1.9 * 3.0));

    // Oversized gradient is rescaled to norm 10 before the update.
    auto q = tensor_of<float>({1}, {0.0f}, true);
    SgdMomentum opt2({q}, 1.0, 0.0, 10.0);
    q->grad = {400.0f};
    opt2.step();
    CHECK(opt2.last_grad_norm() == doctest::Approx(400.0));
    CHECK(q->data[0] == doctest::Approx(-10.0));
}

TEST_CASE("optimizer: zero_grad and non-finite gradients") {
    auto p = tensor_of<float>({2}, {0.0f, 0.0f}, true);
    SgdMomentum opt({p}, 0.1, 0.9, 10.0);
    p->grad = {5.0f, 5.0f};
    opt.zero_grad();
    CHECK(p->grad[0] == 0.0f);
    p->grad = {std::numeric_limits<float>::infinity(), 0.0f};
    CHECK_THROWS_AS(opt.step(), numeric_error);
}

TEST_CASE("train config validation") {
    TrainConfig tc;
    CHECK_NOTHROW(validate(tc));
    TrainConfig bad = tc;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(validate(bad), config_error);
    bad = tc;
    bad.epochs = 0;
    CHECK_THROWS_AS(validate(bad), config_error);
    bad = tc;
    bad.lambda_lb = -0.1;
    CHECK_THROWS_AS(validate(bad), config_error);
    bad = tc;
    bad.batch_size = 0;
    CHECK_THROWS_AS(validate(bad), config_error);
}

TEST_CASE("pretrain: loss drops, best epoch retained, round trip forwards identically") {
    const auto train = generate_scenes(domain_spec('A'), 11, 64);
    const auto held = generate_scenes(domain_spec('A'), 12, 16);
    ExpertConfig ec;
    TrainConfig tc = quick_config(2, 5);

    TrainTrace trace;
    Checkpoint ckpt = pretrain_expert(train, held, ec, tc, nullptr, &trace);

    REQUIRE(trace.epoch_mean_loss.size() == 2);
    CHECK(trace.epoch_mean_loss[1] < trace.epoch_mean_loss[0]);
    REQUIRE(trace.step_losses.size() == 2 * 4);  // 64 scenes / batch 16, two epochs
    for (double l : trace.step_losses) CHECK(std::isfinite(l));

    // Selection rule: the checkpoint holds the earliest epoch achieving the
    // best held-out mAP, and its parameters reproduce that mAP exactly.
    const auto it = std::max_element(trace.epoch_map.begin(), trace.epoch_map.end());
    CHECK(ckpt.best_map == *it);
    CHECK(ckpt.epoch == static_cast<uint32_t>(1 + (it - trace.epoch_map.begin())));
    REQUIRE(ckpt.experts.size() == 1);
    const EvalResult re = evaluate_expert(ckpt.experts[0], ec, held, tc.batch_size, tc.decode);
    CHECK(re.map_50_95 == ckpt.best_map);

    // save -> load -> forward is bit-identical to the in-memory model.
    const std::string path = "/tmp/moedet_train_rt.ckpt";
    save_checkpoint(ckpt, path);
    Checkpoint loaded = load_checkpoint(path);
    std::remove(path.c_str());

    auto batch = all_ptrs(held, 4);
    Tape<float> tape;
    tape.set_enabled(false);
    auto a = expert_forward(tape, batch_to_tensor<float>(batch), ckpt.experts[0], ec);
    auto b = expert_forward(tape, batch_to_tensor<float>(batch), loaded.experts[0], ec);
    for (int l = 0; l < kNumLevels; ++l) {
        CHECK(a.box_logits[static_cast<size_t>(l)]->data == b.box_logits[static_cast<size_t>(l)]->data);
        CHECK(a.cls_logits[static_cast<size_t>(l)]->data == b.cls_logits[static_cast<size_t>(l)]->data);
    }
}

TEST_CASE("pretrain rejects empty datasets") {
    ExpertConfig ec;
    TrainConfig tc = quick_config(1, 0);
    const auto scenes = generate_scenes(domain_spec('A'), 1, 4);
    CHECK_THROWS_AS(pretrain_expert({}, scenes, ec, tc), config_error);
    CHECK_THROWS_AS(pretrain_expert(scenes, {}, ec, tc), config_error);
}

TEST_CASE("single-expert MoE matches detection loss plus lambda exactly") {
    // E = 1: alpha is identically 1, the fused logits equal the expert's,
    // and the load-balance term is the constant 1.0.
    const auto scenes = generate_scenes(domain_spec('A'), 21, 8);
    ExpertConfig ec;
    RouterConfig rc{1, ec.hidden_channels, 32};
    auto batch = all_ptrs(scenes, 8);

    std::vector<ParameterSet<float>> experts{init_expert_params<float>(ec, 3)};
    auto moe_params = init_moe_params<float>(ec, rc, 4);

    // Loss through the MoE path, no optimizer movement (lr 0 keeps params).
    SgdMomentum opt_moe({}, 0.01, 0.9, 10.0);
    const double moe_loss = train_step_moe(opt_moe, batch, experts, moe_params, ec, rc, {}, 0.5);

    SgdMomentum opt_e({}, 0.01, 0.9, 10.0);
    const double det_loss = train_step_expert(opt_e, batch, experts[0], ec, {});

    // The fused logits equal the expert's bitwise; only the final float
    // addition of lambda * 1.0 rounds.
    CHECK(moe_loss == doctest::Approx(det_loss + 0.5).epsilon(1e-6));
}

TEST_CASE("train_moe: degenerate E=1 runs, determinism, and validation") {
    const auto train_a = generate_scenes(domain_spec('A'), 31, 24);
    const auto held = generate_scenes(domain_spec('A'), 32, 8);
    ExpertConfig ec;
    TrainConfig tc = quick_config(1, 9);

    Checkpoint e1 = pretrain_expert(train_a, held, ec, tc);

    SUBCASE("E=1 completes") {
        TrainTrace trace;
        Checkpoint m = train_moe({e1}, train_a, held, quick_config(1, 10), 32, nullptr, &trace);
        CHECK(m.kind == ModelKind::moe);
        CHECK(m.router_config.num_experts == 1);
        REQUIRE(m.experts.size() == 1);
        CHECK(!m.moe_params.empty());
        for (double l : trace.step_losses) CHECK(std::isfinite(l));
    }

    SUBCASE("same seed, same losses, same checkpoint bytes") {
        TrainTrace t1, t2;
        Checkpoint m1 = train_moe({e1}, train_a, held, quick_config(2, 10), 32, nullptr, &t1);
        Checkpoint m2 = train_moe({e1}, train_a, held, quick_config(2, 10), 32, nullptr, &t2);
        CHECK(t1.step_losses == t2.step_losses);
        CHECK(t1.epoch_map == t2.epoch_map);
        save_checkpoint(m1, "/tmp/moedet_det_a.ckpt");
        save_checkpoint(m2, "/tmp/moedet_det_b.ckpt");
        std::ifstream fa("/tmp/moedet_det_a.ckpt", std::ios::binary), fb("/tmp/moedet_det_b.ckpt", std::ios::binary);
        std::vector<char> ba{std::istreambuf_iterator<char>(fa), {}}, bb{std::istreambuf_iterator<char>(fb), {}};
        CHECK(ba == bb);
        std::remove("/tmp/moedet_det_a.ckpt");
        std::remove("/tmp/moedet_det_b.ckpt");
    }

    SUBCASE("incompatible expert configs are rejected") {
        ExpertConfig other = ec;
        other.hidden_channels = 8;
        Checkpoint e2;
        e2.kind = ModelKind::expert;
        e2.expert_config = other;
        e2.experts.push_back(init_expert_params<float>(other, 1));
        CHECK_THROWS_WITH_AS(train_moe({e1, e2}, train_a, held, tc), doctest::Contains("incompatible"), config_error);
    }

    SUBCASE("moe checkpoint as expert input is rejected") {
        Checkpoint m = train_moe({e1}, train_a, held, quick_config(1, 10));
        CHECK_THROWS_AS(train_moe({m}, train_a, held, tc), config_error);
        CHECK_THROWS_AS(train_moe({}, train_a, held, tc), config_error);
    }
}

TEST_CASE("freeze_experts leaves expert parameters bitwise untouched") {
    // Two experts: with a single expert the router's softmax is constantly 1
    // and routing parameters would legitimately receive zero gradient.
    const auto train_a = generate_scenes(domain_spec('A'), 41, 16);
    const auto held = generate_scenes(domain_spec('A'), 42, 8);
    ExpertConfig ec;
    Checkpoint e1 = pretrain_expert(train_a, held, ec, quick_config(1, 2));
    Checkpoint e2 = pretrain_expert(train_a, held, ec, quick_config(1, 4));

    TrainConfig tc = quick_config(1, 3);
    tc.freeze_experts = true;
    Checkpoint m = train_moe({e1, e2}, train_a, held, tc);

    for (const auto& [name, t] : e1.experts[0]) CHECK(t->data == m.experts[0].at(name)->data);
    for (const auto& [name, t] : e2.experts[0]) CHECK(t->data == m.experts[1].at(name)->data);
    // The routing parameters did move.
    auto fresh = init_moe_params<float>(ec, m.router_config, tc.seed);
    bool any_moved = false;
    for (const auto& [name, t] : m.moe_params)
        if (t->data != fresh.at(name)->data) any_moved = true;
    CHECK(any_moved);
}

TEST_CASE("NMS thresholds never touch the training losses") {
    const auto train_a = generate_scenes(domain_spec('A'), 51, 32);
    const auto held = generate_scenes(domain_spec('A'), 52, 8);
    ExpertConfig ec;

    TrainConfig a = quick_config(2, 6);
    TrainConfig b = a;
    b.decode.nms_iou = 0.9;
    b.decode.score_threshold = 0.3;
    b.decode.max_detections = 7;

    TrainTrace ta, tb;
    pretrain_expert(train_a, held, ec, a, nullptr, &ta);
    pretrain_expert(train_a, held, ec, b, nullptr, &tb);
    CHECK(ta.step_losses == tb.step_losses);  // bitwise: loss path is NMS-free
}

TEST_CASE("overfitting a fixed batch shrinks the loss") {
    const auto scenes = generate_scenes(domain_spec('A'), 61, 8);
    ExpertConfig ec;
    auto batch = all_ptrs(scenes, 8);

    auto params = init_expert_params<float>(ec, 7);
    std::vector<TensorPtr<float>> tensors;
    for (const auto& [name, t] : params) tensors.push_back(t);
    SgdMomentum opt(tensors, 0.01, 0.9, 10.0);

    const double first = train_step_expert(opt, batch, params, ec, {});
    double last = first;
    for (int i = 0; i < 24; ++i) last = train_step_expert(opt, batch, params, ec, {});
    CHECK(last < 0.6 * first);
}
