#pragma once

// Desk-scale benchmark: trains the four comparison models (per-domain
// experts, a single model on the combined data, and the two-expert mixture)
// on the synthetic two-domain dataset and reports mAP/AR on each test split,
// plus routing diagnostics for the mixture.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "moedet/checkpoint.hpp"
#include "moedet/data.hpp"
#include "moedet/eval.hpp"
#include "moedet/expert.hpp"

namespace moedet {

struct BenchmarkConfig {
    uint64_t seed = 0;
    int train_scenes = 256;  // per domain
    int test_scenes = 96;    // per domain; held-out selection sets match this size
    int epochs = 18;
    int batch_size = 16;
    double lambda_lb = 0.5;
    double learning_rate = 0.01;
    bool compare_lambda_zero = true;  // retrain the mixture at lambda 0 for the entropy comparison
    ExpertConfig expert;
};

void validate(const BenchmarkConfig& bc);

// Routing behaviour of a mixture over a (possibly two-domain) dataset. All
// fractions are plain numbers in [0,1]; vectors are indexed [level][expert].
struct RoutingReport {
    int num_experts = 0;
    std::vector<std::vector<double>> f;  // argmax fractions over everything
    std::vector<std::vector<double>> p;  // mean routing probabilities
    std::vector<std::vector<double>> f_a, f_b;                    // per-domain argmax fractions
    std::vector<std::vector<double>> mean_alpha_a, mean_alpha_b;  // per-domain mean alpha
    // -sum_e alpha ln alpha, averaged over images and levels.
    double mean_entropy = 0.0;
};

// Runs the mixture over both domain lists (either may be empty) and gathers
// the per-level routing statistics. Rejects non-mixture checkpoints.
RoutingReport inspect_routing(const Checkpoint& ckpt, const std::vector<Scene>& domain_a,
                              const std::vector<Scene>& domain_b, int batch_size = 16);

struct BenchmarkRow {
    std::string model;             // expert_a, expert_b, single_ab, moe_ab
    std::array<EvalResult, 3> on;  // test-A, test-B, combined
};

struct BenchmarkReport {
    uint64_t seed = 0;
    std::vector<BenchmarkRow> rows;
    RoutingReport routing;        // the lambda mixture on the combined test set
    double entropy_lambda = 0.0;  // == routing.mean_entropy
    double entropy_zero = -1.0;   // lambda-0 retrain; -1 when the comparison is off
    double seconds = 0.0;
};

BenchmarkReport run_benchmark(const BenchmarkConfig& bc, std::ostream* log = nullptr);

// Plain-text table and machine-readable key=value lines (6 decimals).
std::string format_benchmark_report(const BenchmarkReport& r);
std::string format_benchmark_keyvals(const BenchmarkReport& r);
std::string format_routing_report(const RoutingReport& r);
std::string format_routing_keyvals(const RoutingReport& r);

}  // namespace moedet
