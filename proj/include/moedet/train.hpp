#pragma once

// Training loops: single-expert pretraining and MoE training, both plain
// SGD with momentum and a global gradient-norm clip. Everything is seeded
// and single-threaded, so a (seed, data, config) triple fully determines
// the resulting checkpoint. The loss path never calls into NMS; detections
// are only decoded for the held-out evaluation between epochs.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "moedet/checkpoint.hpp"
#include "moedet/data.hpp"
#include "moedet/eval.hpp"
#include "moedet/expert.hpp"
#include "moedet/losses.hpp"
#include "moedet/pipeline.hpp"

namespace moedet {

struct TrainConfig {
    double learning_rate = 0.01;
    int epochs = 30;
    int batch_size = 16;
    double lambda_lb = 0.5;
    uint64_t seed = 0;
    LossWeights weights;
    double momentum = 0.9;
    double grad_clip = 10.0;
    bool freeze_experts = false;  // MoE only: train routers and fusion, keep experts fixed
    DecodeConfig decode;          // used only by the held-out evaluation between epochs
    // Paths live here so one parsed config drives the whole CLI run; the
    // training functions themselves take loaded scenes.
    std::string train_data, eval_data, checkpoint_path;
};

void validate(const TrainConfig& c);

// SGD with momentum over a fixed parameter list. step() first rescales all
// gradients so their global L2 norm is at most `clip`, then applies
// v = momentum * v + g; p -= lr * v.
class SgdMomentum {
public:
    SgdMomentum(std::vector<TensorPtr<float>> params, double lr, double momentum, double clip);

    void zero_grad();
    void step();
    double last_grad_norm() const { return last_norm_; }  // pre-clip

private:
    std::vector<TensorPtr<float>> params_;
    std::vector<std::vector<float>> velocity_;
    double lr_, momentum_, clip_;
    double last_norm_ = 0.0;
};

ParameterSet<float> clone_params(const ParameterSet<float>& ps);

// Held-out evaluation: batched forward, per-image decode + NMS, COCO-style
// metrics against the scene ground truth.
EvalResult evaluate_expert(const ParameterSet<float>& params, const ExpertConfig& ec, const std::vector<Scene>& scenes,
                           int batch_size, const DecodeConfig& dc = {});
EvalResult evaluate_moe(const std::vector<ParameterSet<float>>& experts, const ParameterSet<float>& moe_params,
                        const ExpertConfig& ec, const RouterConfig& rc, const std::vector<Scene>& scenes,
                        int batch_size, const DecodeConfig& dc = {});

// One full optimizer step (zero grads, forward, backward, clipped update)
// on one batch. Returns the loss value at the pre-step parameters. Throws
// numeric_error on a non-finite loss.
double train_step_expert(SgdMomentum& opt, const std::vector<const Scene*>& batch, const ParameterSet<float>& params,
                         const ExpertConfig& ec, const LossWeights& weights);
double train_step_moe(SgdMomentum& opt, const std::vector<const Scene*>& batch,
                      const std::vector<ParameterSet<float>>& experts, const ParameterSet<float>& moe_params,
                      const ExpertConfig& ec, const RouterConfig& rc, const LossWeights& weights, double lambda_lb);

// Everything a run emitted, for tests and reports; filled when passed in.
struct TrainTrace {
    std::vector<double> step_losses;      // one entry per optimizer step, in order
    std::vector<double> epoch_mean_loss;  // one per epoch
    std::vector<double> epoch_map;        // held-out mAP after each epoch
};

// Trains one expert with the detection loss only, evaluating on `held_out`
// after every epoch; the returned checkpoint carries the parameters of the
// best-mAP epoch. `log`, when given, receives one line per epoch.
Checkpoint pretrain_expert(const std::vector<Scene>& train, const std::vector<Scene>& held_out,
                           const ExpertConfig& ec, const TrainConfig& tc, std::ostream* log = nullptr,
                           TrainTrace* trace = nullptr);

// Trains a mixture whose experts start from the given expert checkpoints
// (all configs must match) and whose routing parameters start fresh from
// tc.seed. Optimizes detection + lambda_lb * load-balance on the fused
// outputs; everything is trainable unless tc.freeze_experts.
Checkpoint train_moe(const std::vector<Checkpoint>& expert_ckpts, const std::vector<Scene>& train,
                     const std::vector<Scene>& held_out, const TrainConfig& tc,
                     int router_channels = RouterConfig{}.router_channels, std::ostream* log = nullptr,
                     TrainTrace* trace = nullptr);

}  // namespace moedet
