#pragma once

// Checkpoint container: model kind, configs, named float32 parameter
// tensors, and training metadata, in a little-endian binary file with a
// trailing whole-file checksum.

#include <cstdint>
#include <string>
#include <vector>

#include "moedet/expert.hpp"
#include "moedet/router.hpp"

namespace moedet {

enum class ModelKind : uint8_t { expert = 0, moe = 1 };

struct Checkpoint {
    ModelKind kind = ModelKind::expert;
    ExpertConfig expert_config;
    RouterConfig router_config;  // meaningful only for kind == moe
    uint32_t epoch = 0;          // epoch the retained parameters come from
    double best_map = 0.0;
    uint64_t seed = 0;
    // kind == expert: exactly one set; kind == moe: one per expert, then the
    // routing parameters as the trailing set.
    std::vector<ParameterSet<float>> experts;
    ParameterSet<float> moe_params;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace moedet
