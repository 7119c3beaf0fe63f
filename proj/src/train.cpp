#include "moedet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "moedet/error.hpp"
#include "moedet/rng.hpp"
#include "moedet/router.hpp"

namespace moedet {

void validate(const TrainConfig& c) {
    if (!(c.learning_rate > 0)) throw config_error("learning_rate must be positive");
    if (c.epochs < 1) throw config_error("epochs must be at least 1");
    if (c.batch_size < 1) throw config_error("batch_size must be at least 1");
    if (c.lambda_lb < 0) throw config_error("lambda_lb must be non-negative");
    if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw config_error("momentum must be in [0, 1)");
    if (!(c.grad_clip > 0)) throw config_error("grad_clip must be positive");
}

SgdMomentum::SgdMomentum(std::vector<TensorPtr<float>> params, double lr, double momentum, double clip)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), clip_(clip) {
    for (const auto& p : params_) {
        if (!p->requires_grad) p->alloc_grad();
        velocity_.emplace_back(p->data.size(), 0.0f);
    }
}

void SgdMomentum::zero_grad() {
    for (const auto& p : params_) p->zero_grad();
}

void SgdMomentum::step() {
    double sq = 0.0;
    for (const auto& p : params_)
        for (float g : p->grad) sq += static_cast<double>(g) * g;
    last_norm_ = std::sqrt(sq);
    if (!std::isfinite(last_norm_)) throw numeric_error("non-finite gradient norm");
    const double scale = last_norm_ > clip_ ? clip_ / last_norm_ : 1.0;
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = *params_[i];
        auto& v = velocity_[i];
        for (size_t j = 0; j < p.data.size(); ++j) {
            v[j] = static_cast<float>(momentum_ * v[j] + scale * p.grad[j]);
            p.data[j] -= static_cast<float>(lr_ * v[j]);
        }
    }
}

ParameterSet<float> clone_params(const ParameterSet<float>& ps) {
    ParameterSet<float> out;
    for (const auto& [name, t] : ps) out[name] = tensor_of<float>(t->shape, t->data, true);
    return out;
}

namespace {

std::vector<TensorPtr<float>> params_of(const ParameterSet<float>& ps) {
    std::vector<TensorPtr<float>> out;
    for (const auto& [name, t] : ps) out.push_back(t);
    return out;
}

// Deterministic Fisher-Yates; the stream offset keeps epoch shuffles out of
// the scene-generation stream space.
std::vector<size_t> epoch_order(size_t n, uint64_t seed, int epoch) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(seed, (1ull << 32) + static_cast<uint64_t>(epoch));
    for (size_t i = n; i > 1; --i) {
        const size_t j = rng.next_u64() % i;
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

std::vector<std::vector<const Scene*>> make_batches(const std::vector<Scene>& scenes, const std::vector<size_t>& order,
                                                    int batch_size) {
    std::vector<std::vector<const Scene*>> batches;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
        std::vector<const Scene*> b;
        const size_t stop = std::min(order.size(), start + static_cast<size_t>(batch_size));
        for (size_t i = start; i < stop; ++i) b.push_back(&scenes[order[i]]);
        batches.push_back(std::move(b));
    }
    return batches;
}

std::vector<std::vector<Assignment>> batch_assignments(const std::vector<const Scene*>& batch,
                                                       const ExpertConfig& ec) {
    std::vector<std::vector<Assignment>> out;
    out.reserve(batch.size());
    for (const Scene* s : batch) out.push_back(assign_targets(s->objects, ec));
    return out;
}

template <typename Forward>
EvalResult evaluate_with(Forward&& forward, const ExpertConfig& ec, const std::vector<Scene>& scenes, int batch_size,
                         const DecodeConfig& dc) {
    if (scenes.empty()) throw config_error("evaluate: empty dataset");
    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<GtObject>> gts;
    dets.reserve(scenes.size());
    gts.reserve(scenes.size());
    for (size_t start = 0; start < scenes.size(); start += static_cast<size_t>(batch_size)) {
        const size_t stop = std::min(scenes.size(), start + static_cast<size_t>(batch_size));
        std::vector<const Scene*> batch;
        for (size_t i = start; i < stop; ++i) batch.push_back(&scenes[i]);
        Tape<float> tape;
        tape.set_enabled(false);  // inference: no graph, no gradients
        auto out = forward(tape, batch_to_tensor<float>(batch));
        for (size_t i = 0; i < batch.size(); ++i) {
            dets.push_back(decode_detections(out, static_cast<int>(i), ec, dc));
            gts.push_back(batch[i]->objects);
        }
    }
    return evaluate(dets, gts, ec.num_classes);
}

void log_epoch(std::ostream* log, const char* tag, int epoch, int epochs, double loss, double map) {
    if (!log) return;
    char line[128];
    std::snprintf(line, sizeof line, "%s epoch %d/%d  loss %.6f  held-out mAP %.6f", tag, epoch, epochs, loss, map);
    *log << line << std::endl;
}

}  // namespace

EvalResult evaluate_expert(const ParameterSet<float>& params, const ExpertConfig& ec, const std::vector<Scene>& scenes,
                           int batch_size, const DecodeConfig& dc) {
    return evaluate_with(
        [&](Tape<float>& tape, const TensorPtr<float>& input) { return single_forward(tape, input, params, ec); }, ec,
        scenes, batch_size, dc);
}

EvalResult evaluate_moe(const std::vector<ParameterSet<float>>& experts, const ParameterSet<float>& moe_params,
                        const ExpertConfig& ec, const RouterConfig& rc, const std::vector<Scene>& scenes,
                        int batch_size, const DecodeConfig& dc) {
    return evaluate_with(
        [&](Tape<float>& tape, const TensorPtr<float>& input) {
            return moe_model_forward(tape, input, experts, moe_params, ec, rc);
        },
        ec, scenes, batch_size, dc);
}

double train_step_expert(SgdMomentum& opt, const std::vector<const Scene*>& batch, const ParameterSet<float>& params,
                         const ExpertConfig& ec, const LossWeights& weights) {
    opt.zero_grad();
    Tape<float> tape;
    auto out = expert_forward(tape, batch_to_tensor<float>(batch), params, ec);
    auto loss = detection_loss(tape, out.box_logits, out.cls_logits, batch_assignments(batch, ec), ec, weights);
    const double value = static_cast<double>(loss.total->data[0]);
    if (!std::isfinite(value)) throw numeric_error("non-finite training loss");
    tape.backward(loss.total);
    opt.step();
    return value;
}

double train_step_moe(SgdMomentum& opt, const std::vector<const Scene*>& batch,
                      const std::vector<ParameterSet<float>>& experts, const ParameterSet<float>& moe_params,
                      const ExpertConfig& ec, const RouterConfig& rc, const LossWeights& weights, double lambda_lb) {
    // Zero every participating tensor, not just what the optimizer owns:
    // backward() accumulates into all trainable leaves.
    for (const auto& ps : experts)
        for (const auto& [name, t] : ps) t->zero_grad();
    for (const auto& [name, t] : moe_params) t->zero_grad();

    Tape<float> tape;
    auto out = moe_forward(tape, batch_to_tensor<float>(batch), experts, moe_params, ec, rc);
    auto det = detection_loss(tape, out.box_logits, out.cls_logits, batch_assignments(batch, ec), ec, weights);
    auto stats = routing_stats(tape, std::vector<TensorPtr<float>>(out.alpha.begin(), out.alpha.end()));
    auto lb = load_balance_loss(tape, stats, rc.num_experts, kNumLevels);
    auto loss = total_loss(tape, det.total, lb, lambda_lb);
    const double value = static_cast<double>(loss->data[0]);
    if (!std::isfinite(value)) throw numeric_error("non-finite training loss");
    tape.backward(loss);
    opt.step();
    return value;
}

Checkpoint pretrain_expert(const std::vector<Scene>& train, const std::vector<Scene>& held_out,
                           const ExpertConfig& ec, const TrainConfig& tc, std::ostream* log, TrainTrace* trace) {
    validate(ec);
    validate(tc);
    if (train.empty()) throw config_error("pretrain_expert: empty training dataset");
    if (held_out.empty()) throw config_error("pretrain_expert: empty held-out dataset");

    auto params = init_expert_params<float>(ec, tc.seed);
    SgdMomentum opt(params_of(params), tc.learning_rate, tc.momentum, tc.grad_clip);

    Checkpoint best;
    best.kind = ModelKind::expert;
    best.expert_config = ec;
    best.seed = tc.seed;
    best.best_map = -1.0;

    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        double sum = 0.0;
        int steps = 0;
        for (const auto& batch : make_batches(train, epoch_order(train.size(), tc.seed, epoch), tc.batch_size)) {
            const double loss = train_step_expert(opt, batch, params, ec, tc.weights);
            if (trace) trace->step_losses.push_back(loss);
            sum += loss;
            ++steps;
        }
        const double mean_loss = sum / steps;
        const EvalResult ev = evaluate_expert(params, ec, held_out, tc.batch_size, tc.decode);
        if (trace) {
            trace->epoch_mean_loss.push_back(mean_loss);
            trace->epoch_map.push_back(ev.map_50_95);
        }
        log_epoch(log, "pretrain", epoch, tc.epochs, mean_loss, ev.map_50_95);
        if (ev.map_50_95 > best.best_map) {  // ties keep the earlier epoch
            best.best_map = ev.map_50_95;
            best.epoch = static_cast<uint32_t>(epoch);
            best.experts = {clone_params(params)};
        }
    }
    return best;
}

Checkpoint train_moe(const std::vector<Checkpoint>& expert_ckpts, const std::vector<Scene>& train,
                     const std::vector<Scene>& held_out, const TrainConfig& tc, int router_channels, std::ostream* log,
                     TrainTrace* trace) {
    validate(tc);
    if (expert_ckpts.empty()) throw config_error("train_moe: need at least one expert checkpoint");
    if (train.empty()) throw config_error("train_moe: empty training dataset");
    if (held_out.empty()) throw config_error("train_moe: empty held-out dataset");

    const ExpertConfig ec = expert_ckpts[0].expert_config;
    for (const auto& c : expert_ckpts) {
        if (c.kind != ModelKind::expert || c.experts.size() != 1)
            throw config_error("train_moe: inputs must be single-expert checkpoints");
        if (c.expert_config.hidden_channels != ec.hidden_channels || c.expert_config.num_bins != ec.num_bins ||
            c.expert_config.num_classes != ec.num_classes || c.expert_config.image_size != ec.image_size)
            throw config_error("train_moe: expert configs are incompatible");
    }
    RouterConfig rc{static_cast<int>(expert_ckpts.size()), ec.hidden_channels, router_channels};
    validate(rc);

    std::vector<ParameterSet<float>> experts;
    for (const auto& c : expert_ckpts) experts.push_back(clone_params(c.experts[0]));
    auto moe_params = init_moe_params<float>(ec, rc, tc.seed);

    std::vector<TensorPtr<float>> trainable;
    if (tc.freeze_experts) {
        // Frozen experts are constants: dropping requires_grad skips their
        // whole backward sweep.
        for (auto& ps : experts)
            for (auto& [name, t] : ps) t->requires_grad = false;
    } else {
        for (const auto& ps : experts)
            for (const auto& t : params_of(ps)) trainable.push_back(t);
    }
    for (const auto& t : params_of(moe_params)) trainable.push_back(t);
    SgdMomentum opt(std::move(trainable), tc.learning_rate, tc.momentum, tc.grad_clip);

    Checkpoint best;
    best.kind = ModelKind::moe;
    best.expert_config = ec;
    best.router_config = rc;
    best.seed = tc.seed;
    best.best_map = -1.0;

    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        double sum = 0.0;
        int steps = 0;
        for (const auto& batch : make_batches(train, epoch_order(train.size(), tc.seed, epoch), tc.batch_size)) {
            const double loss = train_step_moe(opt, batch, experts, moe_params, ec, rc, tc.weights, tc.lambda_lb);
            if (trace) trace->step_losses.push_back(loss);
            sum += loss;
            ++steps;
        }
        const double mean_loss = sum / steps;
        const EvalResult ev = evaluate_moe(experts, moe_params, ec, rc, held_out, tc.batch_size, tc.decode);
        if (trace) {
            trace->epoch_mean_loss.push_back(mean_loss);
            trace->epoch_map.push_back(ev.map_50_95);
        }
        log_epoch(log, "train-moe", epoch, tc.epochs, mean_loss, ev.map_50_95);
        if (ev.map_50_95 > best.best_map) {
            best.best_map = ev.map_50_95;
            best.epoch = static_cast<uint32_t>(epoch);
            best.experts.clear();
            for (const auto& ps : experts) best.experts.push_back(clone_params(ps));
            best.moe_params = clone_params(moe_params);
        }
    }
    return best;
}

}  // namespace moedet
