#pragma once

// Per-level expert fusion and routing: Hadamard-fuse the expert features,
// concatenate them with the fused map as router input, run a small
// downsampling CNN to per-image routing weights, and convexly combine the
// experts' raw logits with those weights. Everything stays in logit space;
// sigmoids/softmaxes happen downstream.

#include <array>
#include <string>
#include <vector>

#include "moedet/expert.hpp"
#include "moedet/tensor.hpp"

namespace moedet {

struct RouterConfig {
    int num_experts = 2;
    int hidden_channels = 16;  // must match the experts' h
    int router_channels = 32;
};

inline void validate(const RouterConfig& c) {
    if (c.num_experts < 1) throw config_error("num_experts must be at least 1");
    if (c.hidden_channels < 1 || c.router_channels < 1) throw config_error("router channel counts must be positive");
}

// K = (F_1 ⊙ F_2 ⊙ ... ⊙ F_E) ⊙ fusion_weight, the weight broadcast per
// channel.
template <typename S>
TensorPtr<S> hadamard_fuse(Tape<S>& tape, const std::vector<TensorPtr<S>>& features,
                           const TensorPtr<S>& fusion_weight) {
    detail::require(!features.empty(), "hadamard_fuse: empty feature list");
    TensorPtr<S> prod = features.front();
    for (size_t e = 1; e < features.size(); ++e) prod = elementwise_mul(tape, prod, features[e]);
    return elementwise_mul(tape, prod, fusion_weight);
}

// M = Concat[F_1, ..., F_E, K] along channels: (E+1)h total.
template <typename S>
TensorPtr<S> build_router_input(Tape<S>& tape, const std::vector<TensorPtr<S>>& features, const TensorPtr<S>& fused) {
    std::vector<TensorPtr<S>> parts = features;
    parts.push_back(fused);
    return concat_channels(tape, parts);
}

// Two stride-2 3x3 convs, global average pool, linear to E logits, softmax.
// When the map entering the second conv is already 1x1 that conv is skipped
// rather than pretending to downsample further.
template <typename S>
TensorPtr<S> router_forward(Tape<S>& tape, const TensorPtr<S>& M, const ParameterSet<S>& params,
                            const std::string& prefix) {
    auto x = conv2d(tape, M, param(params, prefix + ".conv1.weight"), param(params, prefix + ".conv1.bias"), 2, 1);
    x = leaky_relu(tape, x, S(0.1));
    if (x->dim(2) >= 2 && x->dim(3) >= 2) {
        x = conv2d(tape, x, param(params, prefix + ".conv2.weight"), param(params, prefix + ".conv2.bias"), 2, 1);
        x = leaky_relu(tape, x, S(0.1));
    }
    auto pooled = global_avg_pool(tape, x);
    auto logits = linear(tape, pooled, param(params, prefix + ".fc.weight"), param(params, prefix + ".fc.bias"));
    return softmax(tape, logits, 1);
}

// z = sum_e alpha[:,e] * z_e, computed in fixed expert order.
template <typename S>
TensorPtr<S> fuse_logits(Tape<S>& tape, const std::vector<TensorPtr<S>>& per_expert_logits,
                         const TensorPtr<S>& alpha) {
    detail::require(!per_expert_logits.empty(), "fuse_logits: empty logit list");
    detail::require(alpha->rank() == 2 && alpha->dim(1) == static_cast<int>(per_expert_logits.size()),
                    "fuse_logits: alpha must be [B,E] with one column per expert");
    TensorPtr<S> out;
    for (size_t e = 0; e < per_expert_logits.size(); ++e) {
        auto weighted = batch_scale(tape, per_expert_logits[e], select_column(tape, alpha, static_cast<int>(e)));
        out = out ? add(tape, out, weighted) : weighted;
    }
    return out;
}

// Routing-side parameters: one router per level plus the per-level fusion
// weights. Fusion weights start at ones so K begins as the plain Hadamard
// product.
template <typename S>
ParameterSet<S> init_moe_params(const ExpertConfig& ec, const RouterConfig& rc, uint64_t seed) {
    validate(ec);
    validate(rc);
    if (rc.hidden_channels != ec.hidden_channels)
        throw config_error("router hidden_channels must match the expert's");
    const int in_ch = (rc.num_experts + 1) * rc.hidden_channels;
    ParameterSet<S> ps;
    for (int l = 0; l < kNumLevels; ++l) {
        const std::string p = "router.l" + std::to_string(l);
        detail::add_conv_param(ps, p + ".conv1", rc.router_channels, in_ch, 3);
        detail::add_conv_param(ps, p + ".conv2", rc.router_channels, rc.router_channels, 3);
        ps[p + ".fc.weight"] = tensor_zeros<S>({rc.num_experts, rc.router_channels}, true);
        ps[p + ".fc.bias"] = tensor_zeros<S>({rc.num_experts}, true);
        ps["fusion.l" + std::to_string(l)] = tensor_zeros<S>({rc.hidden_channels, 1, 1}, true);
    }
    detail::fill_params(ps, seed);
    for (int l = 0; l < kNumLevels; ++l) {
        auto& w = ps["fusion.l" + std::to_string(l)];
        std::fill(w->data.begin(), w->data.end(), S(1));
    }
    return ps;
}

template <typename S>
struct MoeOutputs {
    std::array<TensorPtr<S>, kNumLevels> box_logits;  // fused, [B,4N,H_i,W_i]
    std::array<TensorPtr<S>, kNumLevels> cls_logits;  // fused, [B,n_c,H_i,W_i]
    std::array<TensorPtr<S>, kNumLevels> alpha;       // [B,E] per level
};

template <typename S>
MoeOutputs<S> moe_forward(Tape<S>& tape, const TensorPtr<S>& image, const std::vector<ParameterSet<S>>& experts,
                          const ParameterSet<S>& moe_params, const ExpertConfig& ec, const RouterConfig& rc) {
    validate(ec);
    validate(rc);
    detail::require(static_cast<int>(experts.size()) == rc.num_experts,
                    "moe_forward: expected " + std::to_string(rc.num_experts) + " expert parameter sets");

    std::vector<ExpertOutputs<S>> outs;
    outs.reserve(experts.size());
    for (const auto& ex : experts) outs.push_back(expert_forward(tape, image, ex, ec));

    MoeOutputs<S> moe;
    for (int l = 0; l < kNumLevels; ++l) {
        std::vector<TensorPtr<S>> feats, box, cls;
        for (const auto& o : outs) {
            feats.push_back(o.features[static_cast<size_t>(l)]);
            box.push_back(o.box_logits[static_cast<size_t>(l)]);
            cls.push_back(o.cls_logits[static_cast<size_t>(l)]);
        }
        auto fused = hadamard_fuse(tape, feats, param(moe_params, "fusion.l" + std::to_string(l)));
        auto M = build_router_input(tape, feats, fused);
        auto a = router_forward(tape, M, moe_params, "router.l" + std::to_string(l));
        moe.alpha[static_cast<size_t>(l)] = a;
        moe.box_logits[static_cast<size_t>(l)] = fuse_logits(tape, box, a);
        moe.cls_logits[static_cast<size_t>(l)] = fuse_logits(tape, cls, a);
    }
    return moe;
}

}  // namespace moedet
