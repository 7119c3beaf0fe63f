#pragma once

// The detection expert: a small strided-conv backbone tapping features at
// strides 8/16/32, with per-level 1x1 heads for DFL box logits and class
// logits. Templated on the scalar so the same graph runs in float or double.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "moedet/error.hpp"
#include "moedet/rng.hpp"
#include "moedet/tensor.hpp"

namespace moedet {

inline constexpr std::array<int, 3> kStrides{8, 16, 32};
inline constexpr int kNumLevels = 3;

struct ExpertConfig {
    int hidden_channels = 16;
    int num_bins = 16;
    int num_classes = 4;
    int image_size = 64;
};

inline void validate(const ExpertConfig& c) {
    if (c.image_size % 32 != 0) throw config_error("image_size must be divisible by 32");
    if (c.hidden_channels < 4) throw config_error("hidden_channels must be at least 4");
    if (c.num_bins < 2) throw config_error("num_bins must be at least 2");
    if (c.num_classes < 1) throw config_error("num_classes must be at least 1");
}

template <typename S>
using ParameterSet = std::map<std::string, TensorPtr<S>>;

template <typename S>
const TensorPtr<S>& param(const ParameterSet<S>& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw config_error("missing parameter: " + name);
    return it->second;
}

template <typename S>
struct ExpertOutputs {
    std::array<TensorPtr<S>, kNumLevels> features;    // [B,h,H_i,W_i]
    std::array<TensorPtr<S>, kNumLevels> box_logits;  // [B,4N,H_i,W_i]
    std::array<TensorPtr<S>, kNumLevels> cls_logits;  // [B,n_c,H_i,W_i]
};

namespace detail {

template <typename S>
void add_conv_param(ParameterSet<S>& ps, const std::string& name, int cout, int cin, int k) {
    ps[name + ".weight"] = tensor_zeros<S>({cout, cin, k, k}, true);
    ps[name + ".bias"] = tensor_zeros<S>({cout}, true);
}

// He-uniform weights with the leaky-relu(0.1) gain, zero biases: bound
// sqrt(6 / (1.01 * fan_in)) keeps activation variance roughly constant
// through the stack, so deep features stay O(1) instead of decaying layer
// by layer. Tensors are filled in name order from a single stream, so the
// result depends only on (seed, parameter names, shapes).
template <typename S>
void fill_params(ParameterSet<S>& ps, uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, t] : ps) {
        if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0) continue;
        int64_t fan_in = 1;
        for (int i = 1; i < t->rank(); ++i) fan_in *= t->dim(i);
        const double bound = std::sqrt(6.0 / (1.01 * static_cast<double>(fan_in)));
        for (auto& v : t->data) v = static_cast<S>(rng.uniform(-bound, bound));
    }
}

template <typename S>
TensorPtr<S> conv_block(Tape<S>& tape, const TensorPtr<S>& x, const ParameterSet<S>& ps, const std::string& name,
                        int stride) {
    auto y = conv2d(tape, x, param(ps, name + ".weight"), param(ps, name + ".bias"), stride, 1);
    return leaky_relu(tape, y, S(0.1));
}

}  // namespace detail

template <typename S>
ParameterSet<S> init_expert_params(const ExpertConfig& c, uint64_t seed) {
    validate(c);
    const int h = c.hidden_channels;
    ParameterSet<S> ps;
    detail::add_conv_param(ps, "stem.0", h, 3, 3);
    detail::add_conv_param(ps, "stem.1", h, h, 3);
    for (int s = 1; s <= kNumLevels; ++s) {
        detail::add_conv_param(ps, "stage" + std::to_string(s) + ".0", h, h, 3);
        detail::add_conv_param(ps, "stage" + std::to_string(s) + ".1", h, h, 3);
    }
    for (int l = 0; l < kNumLevels; ++l) {
        ps["head.box.l" + std::to_string(l) + ".weight"] = tensor_zeros<S>({4 * c.num_bins, h, 1, 1}, true);
        ps["head.box.l" + std::to_string(l) + ".bias"] = tensor_zeros<S>({4 * c.num_bins}, true);
        ps["head.cls.l" + std::to_string(l) + ".weight"] = tensor_zeros<S>({c.num_classes, h, 1, 1}, true);
        ps["head.cls.l" + std::to_string(l) + ".bias"] = tensor_zeros<S>({c.num_classes}, true);
    }
    detail::fill_params(ps, seed);
    // Head prior: desk-scale objects are at most ~S/2 pixels, so every DFL
    // side target lands below one bin at its level; a down-sloped bias ramp
    // starts the expectation-decoded sides at ~0.6 bins instead of the
    // uniform (N-1)/2, which would need dozens of steps just to walk back.
    // Head weights start at zero so the initial prediction is exactly the
    // bias prior (feature-independent), and the first gradient steps grow
    // them from clean outer products.
    for (int l = 0; l < kNumLevels; ++l) {
        const std::string lv = "l" + std::to_string(l);
        auto& box_bias = ps["head.box." + lv + ".bias"];
        for (int s = 0; s < 4; ++s)
            for (int k = 0; k < c.num_bins; ++k)
                box_bias->data[static_cast<size_t>(s * c.num_bins + k)] = static_cast<S>(-1.0 * k);
        for (auto& v : ps["head.box." + lv + ".weight"]->data) v = S(0);
        for (auto& v : ps["head.cls." + lv + ".weight"]->data) v = S(0);
    }
    return ps;
}

// Backbone: two stride-2 stem convs take the image to stride 4; each of the
// three stages is a stride-2 conv followed by a stride-1 conv, landing the
// stage outputs at strides 8, 16, and 32. The stage output after activation
// is the level feature F_i feeding both heads.
template <typename S>
ExpertOutputs<S> expert_forward(Tape<S>& tape, const TensorPtr<S>& image, const ParameterSet<S>& params,
                                const ExpertConfig& c) {
    validate(c);
    detail::require(image->rank() == 4 && image->dim(1) == 3 && image->dim(2) == c.image_size &&
                        image->dim(3) == c.image_size,
                    "expert_forward: image must be [B,3," + std::to_string(c.image_size) + "," +
                        std::to_string(c.image_size) + "]");

    auto x = detail::conv_block(tape, image, params, "stem.0", 2);
    x = detail::conv_block(tape, x, params, "stem.1", 2);

    ExpertOutputs<S> out;
    for (int l = 0; l < kNumLevels; ++l) {
        const std::string stage = "stage" + std::to_string(l + 1);
        x = detail::conv_block(tape, x, params, stage + ".0", 2);
        x = detail::conv_block(tape, x, params, stage + ".1", 1);
        out.features[static_cast<size_t>(l)] = x;
        const std::string lv = "l" + std::to_string(l);
        out.box_logits[static_cast<size_t>(l)] = conv2d(tape, x, param(params, "head.box." + lv + ".weight"),
                                                        param(params, "head.box." + lv + ".bias"), 1, 0);
        out.cls_logits[static_cast<size_t>(l)] = conv2d(tape, x, param(params, "head.cls." + lv + ".weight"),
                                                        param(params, "head.cls." + lv + ".bias"), 1, 0);
    }
    return out;
}

}  // namespace moedet
