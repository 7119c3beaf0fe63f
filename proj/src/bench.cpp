#include "moedet/bench.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "moedet/losses.hpp"
#include "moedet/pipeline.hpp"
#include "moedet/train.hpp"

namespace moedet {

void validate(const BenchmarkConfig& bc) {
    validate(bc.expert);
    if (bc.train_scenes < 1) throw config_error("train_scenes must be at least 1");
    if (bc.test_scenes < 1) throw config_error("test_scenes must be at least 1");
    if (bc.epochs < 1) throw config_error("epochs must be at least 1");
    if (bc.batch_size < 1) throw config_error("batch_size must be at least 1");
    if (bc.lambda_lb < 0.0) throw config_error("lambda_lb must be non-negative");
    if (bc.learning_rate <= 0.0) throw config_error("learning_rate must be positive");
}

namespace {

// Alpha rows for every image, per level; rows are appended in dataset order.
std::array<std::vector<std::vector<double>>, kNumLevels> collect_alpha(const Checkpoint& ckpt,
                                                                       const std::vector<Scene>& scenes,
                                                                       int batch_size) {
    std::array<std::vector<std::vector<double>>, kNumLevels> rows;
    const int E = ckpt.router_config.num_experts;
    for (size_t start = 0; start < scenes.size(); start += static_cast<size_t>(batch_size)) {
        std::vector<const Scene*> batch;
        for (size_t i = start; i < scenes.size() && i < start + static_cast<size_t>(batch_size); ++i)
            batch.push_back(&scenes[i]);
        Tape<float> tape;
        tape.set_enabled(false);
        auto out = moe_forward(tape, batch_to_tensor<float>(batch), ckpt.experts, ckpt.moe_params,
                               ckpt.expert_config, ckpt.router_config);
        for (int l = 0; l < kNumLevels; ++l) {
            const auto& a = out.alpha[static_cast<size_t>(l)];
            for (size_t b = 0; b < batch.size(); ++b) {
                std::vector<double> row(static_cast<size_t>(E));
                for (int e = 0; e < E; ++e)
                    row[static_cast<size_t>(e)] = static_cast<double>(a->data[b * static_cast<size_t>(E) +
                                                                              static_cast<size_t>(e)]);
                rows[static_cast<size_t>(l)].push_back(std::move(row));
            }
        }
    }
    return rows;
}

// Argmax fractions (ties to the lowest index) and column means for one
// level's rows; both are empty when there are no rows.
void stats_of(const std::vector<std::vector<double>>& rows, int E, std::vector<double>& f, std::vector<double>& p) {
    f.assign(static_cast<size_t>(E), 0.0);
    p.assign(static_cast<size_t>(E), 0.0);
    if (rows.empty()) return;
    for (const auto& row : rows) {
        size_t best = 0;
        for (size_t e = 1; e < row.size(); ++e)
            if (row[e] > row[best]) best = e;
        f[best] += 1.0;
        for (size_t e = 0; e < row.size(); ++e) p[e] += row[e];
    }
    for (int e = 0; e < E; ++e) {
        f[static_cast<size_t>(e)] /= static_cast<double>(rows.size());
        p[static_cast<size_t>(e)] /= static_cast<double>(rows.size());
    }
}

double entropy_of(const std::array<std::vector<std::vector<double>>, kNumLevels>& rows) {
    double sum = 0.0;
    size_t count = 0;
    for (const auto& level : rows)
        for (const auto& row : level) {
            double h = 0.0;
            for (double a : row)
                if (a > 0.0) h -= a * std::log(a);
            sum += h;
            ++count;
        }
    return count ? sum / static_cast<double>(count) : 0.0;
}

TrainConfig leg_config(const BenchmarkConfig& bc, uint64_t seed, double lambda) {
    TrainConfig tc;
    tc.learning_rate = bc.learning_rate;
    tc.epochs = bc.epochs;
    tc.batch_size = bc.batch_size;
    tc.lambda_lb = lambda;
    tc.seed = seed;
    return tc;
}

std::vector<Scene> concat(const std::vector<Scene>& a, const std::vector<Scene>& b) {
    std::vector<Scene> out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

void log_line(std::ostream* log, const std::string& line) {
    if (log) *log << line << "\n";
}

}  // namespace

RoutingReport inspect_routing(const Checkpoint& ckpt, const std::vector<Scene>& domain_a,
                              const std::vector<Scene>& domain_b, int batch_size) {
    if (ckpt.kind != ModelKind::moe)
        throw config_error("inspect_routing: expected a mixture checkpoint, got a single expert");
    if (batch_size < 1) throw config_error("batch_size must be at least 1");
    if (domain_a.empty() && domain_b.empty()) throw config_error("inspect_routing: no scenes given");

    const int E = ckpt.router_config.num_experts;
    const auto rows_a = collect_alpha(ckpt, domain_a, batch_size);
    const auto rows_b = collect_alpha(ckpt, domain_b, batch_size);

    RoutingReport rep;
    rep.num_experts = E;
    rep.f.resize(kNumLevels);
    rep.p.resize(kNumLevels);
    rep.f_a.resize(kNumLevels);
    rep.f_b.resize(kNumLevels);
    rep.mean_alpha_a.resize(kNumLevels);
    rep.mean_alpha_b.resize(kNumLevels);
    std::array<std::vector<std::vector<double>>, kNumLevels> all;
    for (int l = 0; l < kNumLevels; ++l) {
        const auto lu = static_cast<size_t>(l);
        all[lu] = rows_a[lu];
        all[lu].insert(all[lu].end(), rows_b[lu].begin(), rows_b[lu].end());
        stats_of(all[lu], E, rep.f[lu], rep.p[lu]);
        if (!rows_a[lu].empty()) stats_of(rows_a[lu], E, rep.f_a[lu], rep.mean_alpha_a[lu]);
        if (!rows_b[lu].empty()) stats_of(rows_b[lu], E, rep.f_b[lu], rep.mean_alpha_b[lu]);
    }
    rep.mean_entropy = entropy_of(all);
    return rep;
}

BenchmarkReport run_benchmark(const BenchmarkConfig& bc, std::ostream* log) {
    validate(bc);
    const auto t0 = std::chrono::steady_clock::now();
    const uint64_t base = bc.seed << 8;

    const auto train_a = generate_scenes(domain_spec('A'), base + 1, static_cast<size_t>(bc.train_scenes));
    const auto train_b = generate_scenes(domain_spec('B'), base + 2, static_cast<size_t>(bc.train_scenes));
    const auto val_a = generate_scenes(domain_spec('A'), base + 3, static_cast<size_t>(bc.test_scenes));
    const auto val_b = generate_scenes(domain_spec('B'), base + 4, static_cast<size_t>(bc.test_scenes));
    const auto test_a = generate_scenes(domain_spec('A'), base + 5, static_cast<size_t>(bc.test_scenes));
    const auto test_b = generate_scenes(domain_spec('B'), base + 6, static_cast<size_t>(bc.test_scenes));
    const auto train_ab = concat(train_a, train_b);
    const auto val_ab = concat(val_a, val_b);
    const auto test_ab = concat(test_a, test_b);

    log_line(log, "[bench] seed " + std::to_string(bc.seed) + ": pretraining expert A");
    const Checkpoint ckpt_a = pretrain_expert(train_a, val_a, bc.expert, leg_config(bc, base + 10, 0.0), log);
    log_line(log, "[bench] pretraining expert B");
    const Checkpoint ckpt_b = pretrain_expert(train_b, val_b, bc.expert, leg_config(bc, base + 11, 0.0), log);
    log_line(log, "[bench] training the single model on A+B");
    const Checkpoint ckpt_s = pretrain_expert(train_ab, val_ab, bc.expert, leg_config(bc, base + 12, 0.0), log);
    log_line(log, "[bench] training the mixture on A+B (lambda " + std::to_string(bc.lambda_lb) + ")");
    const Checkpoint ckpt_m = train_moe({ckpt_a, ckpt_b}, train_ab, val_ab, leg_config(bc, base + 13, bc.lambda_lb),
                                        RouterConfig{}.router_channels, log);

    BenchmarkReport rep;
    rep.seed = bc.seed;
    const auto eval_expert = [&](const std::string& name, const Checkpoint& c) {
        BenchmarkRow row;
        row.model = name;
        row.on[0] = evaluate_expert(c.experts[0], c.expert_config, test_a, bc.batch_size);
        row.on[1] = evaluate_expert(c.experts[0], c.expert_config, test_b, bc.batch_size);
        row.on[2] = evaluate_expert(c.experts[0], c.expert_config, test_ab, bc.batch_size);
        rep.rows.push_back(std::move(row));
    };
    eval_expert("expert_a", ckpt_a);
    eval_expert("expert_b", ckpt_b);
    eval_expert("single_ab", ckpt_s);
    {
        BenchmarkRow row;
        row.model = "moe_ab";
        row.on[0] = evaluate_moe(ckpt_m.experts, ckpt_m.moe_params, ckpt_m.expert_config, ckpt_m.router_config,
                                 test_a, bc.batch_size);
        row.on[1] = evaluate_moe(ckpt_m.experts, ckpt_m.moe_params, ckpt_m.expert_config, ckpt_m.router_config,
                                 test_b, bc.batch_size);
        row.on[2] = evaluate_moe(ckpt_m.experts, ckpt_m.moe_params, ckpt_m.expert_config, ckpt_m.router_config,
                                 test_ab, bc.batch_size);
        rep.rows.push_back(std::move(row));
    }

    rep.routing = inspect_routing(ckpt_m, test_a, test_b, bc.batch_size);
    rep.entropy_lambda = rep.routing.mean_entropy;
    if (bc.compare_lambda_zero) {
        log_line(log, "[bench] retraining the mixture at lambda 0");
        const Checkpoint ckpt_m0 = train_moe({ckpt_a, ckpt_b}, train_ab, val_ab, leg_config(bc, base + 13, 0.0),
                                             RouterConfig{}.router_channels, log);
        rep.entropy_zero = inspect_routing(ckpt_m0, test_a, test_b, bc.batch_size).mean_entropy;
    }

    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log_line(log, "[bench] done in " + std::to_string(rep.seconds) + "s");
    return rep;
}

namespace {

std::string fixed6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string fixed4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace

std::string format_benchmark_report(const BenchmarkReport& r) {
    std::ostringstream out;
    out << "benchmark seed " << r.seed << "\n";
    char line[160];
    std::snprintf(line, sizeof line, "%-10s  %9s %9s  %9s %9s  %9s %9s\n", "model", "A mAP", "A AR", "B mAP", "B AR",
                  "AB mAP", "AB AR");
    out << line;
    for (const auto& row : r.rows) {
        std::snprintf(line, sizeof line, "%-10s  %9.4f %9.4f  %9.4f %9.4f  %9.4f %9.4f\n", row.model.c_str(),
                      row.on[0].map_50_95, row.on[0].ar, row.on[1].map_50_95, row.on[1].ar, row.on[2].map_50_95,
                      row.on[2].ar);
        out << line;
    }
    out << "routing entropy: lambda run " << fixed4(r.entropy_lambda);
    if (r.entropy_zero >= 0.0) out << ", lambda-0 run " << fixed4(r.entropy_zero);
    out << "\n";
    if (!r.routing.f_a.empty() && r.routing.num_experts > 0)
        out << "domain-A images routed to expert 0 at stride 8: " << fixed4(r.routing.f_a[0].empty() ? 0.0
                                                                                                     : r.routing.f_a[0][0])
            << "\n";
    out << "wall time: " << fixed4(r.seconds) << "s\n";
    return out.str();
}

std::string format_benchmark_keyvals(const BenchmarkReport& r) {
    std::ostringstream out;
    out << "seed=" << r.seed << "\n";
    const char* sets[3] = {"test_a", "test_b", "combined"};
    for (const auto& row : r.rows)
        for (int s = 0; s < 3; ++s) {
            out << row.model << "." << sets[s] << ".map=" << fixed6(row.on[static_cast<size_t>(s)].map_50_95) << "\n";
            out << row.model << "." << sets[s] << ".ar=" << fixed6(row.on[static_cast<size_t>(s)].ar) << "\n";
        }
    out << "entropy.lambda=" << fixed6(r.entropy_lambda) << "\n";
    if (r.entropy_zero >= 0.0) out << "entropy.zero=" << fixed6(r.entropy_zero) << "\n";
    out << "seconds=" << fixed6(r.seconds) << "\n";
    return out.str();
}

std::string format_routing_report(const RoutingReport& r) {
    std::ostringstream out;
    out << "routing over " << r.num_experts << " experts\n";
    for (size_t l = 0; l < r.f.size(); ++l) {
        out << "level " << l << " (stride " << kStrides[l] << "):";
        out << " f=(";
        for (size_t e = 0; e < r.f[l].size(); ++e) out << (e ? "," : "") << fixed4(r.f[l][e]);
        out << ") P=(";
        for (size_t e = 0; e < r.p[l].size(); ++e) out << (e ? "," : "") << fixed4(r.p[l][e]);
        out << ")\n";
    }
    for (size_t l = 0; l < r.mean_alpha_a.size(); ++l) {
        if (r.mean_alpha_a[l].empty() && r.mean_alpha_b[l].empty()) continue;
        out << "level " << l << " mean alpha:";
        if (!r.mean_alpha_a[l].empty()) {
            out << " domain-A=(";
            for (size_t e = 0; e < r.mean_alpha_a[l].size(); ++e) out << (e ? "," : "") << fixed4(r.mean_alpha_a[l][e]);
            out << ")";
        }
        if (!r.mean_alpha_b[l].empty()) {
            out << " domain-B=(";
            for (size_t e = 0; e < r.mean_alpha_b[l].size(); ++e) out << (e ? "," : "") << fixed4(r.mean_alpha_b[l][e]);
            out << ")";
        }
        out << "\n";
    }
    out << "mean entropy: " << fixed4(r.mean_entropy) << "\n";
    return out.str();
}

std::string format_routing_keyvals(const RoutingReport& r) {
    std::ostringstream out;
    out << "num_experts=" << r.num_experts << "\n";
    const auto emit = [&](const char* tag, const std::vector<std::vector<double>>& grid) {
        for (size_t l = 0; l < grid.size(); ++l)
            for (size_t e = 0; e < grid[l].size(); ++e)
                out << tag << ".l" << l << ".e" << e << "=" << fixed6(grid[l][e]) << "\n";
    };
    emit("f", r.f);
    emit("p", r.p);
    emit("f_a", r.f_a);
    emit("f_b", r.f_b);
    emit("mean_alpha_a", r.mean_alpha_a);
    emit("mean_alpha_b", r.mean_alpha_b);
    out << "mean_entropy=" << fixed6(r.mean_entropy) << "\n";
    return out.str();
}

}  // namespace moedet
