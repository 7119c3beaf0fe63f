// Command-line front end: dataset generation, training, evaluation, the
// Table-1-style benchmark, routing inspection, and a gradient self-check.
// Every subcommand accepts --config <key=value file>; explicit flags win
// over file values. Exit codes: 0 success, 1 usage/configuration error,
// 2 data or checkpoint format error, 3 numerical failure.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "moedet/bench.hpp"
#include "moedet/checkpoint.hpp"
#include "moedet/configfile.hpp"
#include "moedet/data.hpp"
#include "moedet/eval.hpp"
#include "moedet/expert.hpp"
#include "moedet/losses.hpp"
#include "moedet/pipeline.hpp"
#include "moedet/router.hpp"
#include "moedet/train.hpp"

namespace {

using moedet::ConfigMap;

// Per-subcommand state: flag values plus which flags the user actually set,
// so file values fill only the gaps.
struct Common {
    std::string config_path;
};

ConfigMap load_config(const std::string& path) {
    if (path.empty()) return {};
    return ConfigMap::load(path);
}

// Resolution order: explicit flag > config file > built-in default. The
// flag's current value already holds the default, so an unset flag simply
// defers to the file.
template <typename T, typename Get>
T resolve(const CLI::Option* opt, T flag_value, Get&& from_file) {
    if (opt != nullptr && opt->count() > 0) return flag_value;
    return from_file();
}

void reject_unknown_keys(const ConfigMap& cfg) {
    const auto unused = cfg.unused_keys();
    if (unused.empty()) return;
    std::string msg = "unknown config key(s):";
    for (const auto& k : unused) msg += " " + k;
    throw moedet::config_error(msg);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw moedet::io_error("cannot write: " + path);
    f << text;
}

// ---- gen-data ------------------------------------------------------------

int cmd_gen_data(const std::string& config_path, const CLI::Option* o_domain, std::string domain,
                 const CLI::Option* o_count, int count, const CLI::Option* o_seed, uint64_t seed,
                 const CLI::Option* o_out, std::string out) {
    const auto cfg = load_config(config_path);
    domain = resolve(o_domain, domain, [&] { return cfg.get_string("domain", "A"); });
    count = resolve(o_count, count, [&] { return cfg.get_int("count", 128); });
    seed = resolve(o_seed, seed, [&] { return cfg.get_u64("seed", 0); });
    out = resolve(o_out, out, [&] { return cfg.get_string("out", ""); });
    reject_unknown_keys(cfg);
    if (domain != "A" && domain != "B") throw moedet::config_error("domain must be A or B");
    if (count < 1) throw moedet::config_error("count must be at least 1");
    if (out.empty()) throw moedet::config_error("gen-data needs an output path (--out)");

    const auto scenes = moedet::generate_scenes(moedet::domain_spec(domain[0]), seed, count);
    moedet::write_dataset(scenes, out);
    std::cout << "wrote " << scenes.size() << " domain-" << domain << " scenes to " << out << "\n";
    return 0;
}

// ---- shared trainer plumbing ----------------------------------------------

struct TrainFlags {
    CLI::Option *o_train = nullptr, *o_val = nullptr, *o_out = nullptr, *o_seed = nullptr, *o_epochs = nullptr,
                *o_batch = nullptr, *o_lr = nullptr, *o_momentum = nullptr, *o_clip = nullptr, *o_hidden = nullptr;
    std::string train, val, out;
    uint64_t seed = 0;
    int epochs = 30, batch = 16, hidden = 16;
    double lr = 0.01, momentum = 0.9, clip = 10.0;
};

void add_train_flags(CLI::App* app, TrainFlags& f) {
    f.o_train = app->add_option("--train", f.train, "training dataset file");
    f.o_val = app->add_option("--val", f.val, "held-out dataset file for best-epoch selection");
    f.o_out = app->add_option("--out", f.out, "checkpoint output path");
    f.o_seed = app->add_option("--seed", f.seed, "random seed");
    f.o_epochs = app->add_option("--epochs", f.epochs, "training epochs");
    f.o_batch = app->add_option("--batch-size", f.batch, "batch size");
    f.o_lr = app->add_option("--learning-rate", f.lr, "constant learning rate");
    f.o_momentum = app->add_option("--momentum", f.momentum, "SGD momentum");
    f.o_clip = app->add_option("--grad-clip", f.clip, "global gradient-norm clip");
    f.o_hidden = app->add_option("--hidden-channels", f.hidden, "expert hidden channels");
}

// Fills TrainConfig/ExpertConfig from flags and file; train/val/out paths
// are returned through the struct fields.
void resolve_train(const ConfigMap& cfg, TrainFlags& f, moedet::TrainConfig& tc, moedet::ExpertConfig& ec) {
    f.train = resolve(f.o_train, f.train, [&] { return cfg.get_string("train", ""); });
    f.val = resolve(f.o_val, f.val, [&] { return cfg.get_string("val", ""); });
    f.out = resolve(f.o_out, f.out, [&] { return cfg.get_string("out", ""); });
    tc.seed = resolve(f.o_seed, f.seed, [&] { return cfg.get_u64("seed", tc.seed); });
    tc.epochs = resolve(f.o_epochs, f.epochs, [&] { return cfg.get_int("epochs", tc.epochs); });
    tc.batch_size = resolve(f.o_batch, f.batch, [&] { return cfg.get_int("batch_size", tc.batch_size); });
    tc.learning_rate = resolve(f.o_lr, f.lr, [&] { return cfg.get_double("learning_rate", tc.learning_rate); });
    tc.momentum = resolve(f.o_momentum, f.momentum, [&] { return cfg.get_double("momentum", tc.momentum); });
    tc.grad_clip = resolve(f.o_clip, f.clip, [&] { return cfg.get_double("grad_clip", tc.grad_clip); });
    ec.hidden_channels = resolve(f.o_hidden, f.hidden, [&] { return cfg.get_int("hidden_channels", 16); });
    ec.num_bins = cfg.get_int("num_bins", ec.num_bins);
    ec.num_classes = cfg.get_int("num_classes", ec.num_classes);
    ec.image_size = cfg.get_int("image_size", ec.image_size);
    if (f.train.empty()) throw moedet::config_error("a training dataset is required (--train)");
    if (f.val.empty()) throw moedet::config_error("a held-out dataset is required (--val)");
    if (f.out.empty()) throw moedet::config_error("a checkpoint output path is required (--out)");
}

int cmd_pretrain(const std::string& config_path, TrainFlags& f) {
    const auto cfg = load_config(config_path);
    moedet::TrainConfig tc;
    moedet::ExpertConfig ec;
    resolve_train(cfg, f, tc, ec);
    reject_unknown_keys(cfg);

    const auto train = moedet::read_dataset(f.train);
    const auto val = moedet::read_dataset(f.val);
    const auto ckpt = moedet::pretrain_expert(train, val, ec, tc, &std::cout);
    moedet::save_checkpoint(ckpt, f.out);
    std::cout << "saved expert checkpoint (best epoch " << ckpt.epoch << ", mAP " << ckpt.best_map << ") to "
              << f.out << "\n";
    return 0;
}

int cmd_train_moe(const std::string& config_path, TrainFlags& f, const CLI::Option* o_experts,
                  std::vector<std::string> experts, const CLI::Option* o_lambda, double lambda,
                  const CLI::Option* o_freeze, bool freeze, const CLI::Option* o_rch, int router_channels) {
    const auto cfg = load_config(config_path);
    moedet::TrainConfig tc;
    moedet::ExpertConfig ec;
    resolve_train(cfg, f, tc, ec);
    tc.lambda_lb = resolve(o_lambda, lambda, [&] { return cfg.get_double("lambda_lb", tc.lambda_lb); });
    tc.freeze_experts = resolve(o_freeze, freeze, [&] { return cfg.get_bool("freeze_experts", false); });
    router_channels =
        resolve(o_rch, router_channels, [&] { return cfg.get_int("router_channels", router_channels); });
    if (o_experts == nullptr || o_experts->count() == 0) {
        const std::string joined = cfg.get_string("experts", "");
        experts.clear();
        size_t pos = 0;
        while (pos <= joined.size() && !joined.empty()) {
            const size_t comma = joined.find(',', pos);
            experts.push_back(joined.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
    }
    reject_unknown_keys(cfg);
    if (experts.empty()) throw moedet::config_error("train-moe needs at least one expert checkpoint (--expert)");

    std::vector<moedet::Checkpoint> ckpts;
    for (const auto& path : experts) ckpts.push_back(moedet::load_checkpoint(path));
    const auto train = moedet::read_dataset(f.train);
    const auto val = moedet::read_dataset(f.val);
    const auto ckpt = moedet::train_moe(ckpts, train, val, tc, router_channels, &std::cout);
    moedet::save_checkpoint(ckpt, f.out);
    std::cout << "saved mixture checkpoint (best epoch " << ckpt.epoch << ", mAP " << ckpt.best_map << ") to "
              << f.out << "\n";
    return 0;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(const std::string& config_path, const CLI::Option* o_ckpt, std::string ckpt_path,
             const CLI::Option* o_data, std::string data_path, const CLI::Option* o_batch, int batch,
             const CLI::Option* o_out, std::string out) {
    const auto cfg = load_config(config_path);
    ckpt_path = resolve(o_ckpt, ckpt_path, [&] { return cfg.get_string("checkpoint", ""); });
    data_path = resolve(o_data, data_path, [&] { return cfg.get_string("data", ""); });
    batch = resolve(o_batch, batch, [&] { return cfg.get_int("batch_size", 16); });
    out = resolve(o_out, out, [&] { return cfg.get_string("out", ""); });
    moedet::DecodeConfig dc;
    dc.score_threshold = cfg.get_double("score_threshold", dc.score_threshold);
    dc.nms_iou = cfg.get_double("nms_iou", dc.nms_iou);
    dc.max_detections = cfg.get_int("max_detections", dc.max_detections);
    reject_unknown_keys(cfg);
    if (ckpt_path.empty()) throw moedet::config_error("eval needs a checkpoint (--checkpoint)");
    if (data_path.empty()) throw moedet::config_error("eval needs a dataset (--data)");

    const auto ckpt = moedet::load_checkpoint(ckpt_path);
    const auto scenes = moedet::read_dataset(data_path);
    const moedet::EvalResult r =
        ckpt.kind == moedet::ModelKind::expert
            ? moedet::evaluate_expert(ckpt.experts[0], ckpt.expert_config, scenes, batch, dc)
            : moedet::evaluate_moe(ckpt.experts, ckpt.moe_params, ckpt.expert_config, ckpt.router_config, scenes,
                                   batch, dc);
    const std::string report = moedet::format_eval_report(r) + moedet::format_eval_keyvals(r);
    std::cout << report;
    if (!out.empty()) write_text(out, report);
    return 0;
}

// ---- benchmark ---------------------------------------------------------------

int cmd_benchmark(const std::string& config_path, const CLI::Option* o_seed, uint64_t seed,
                  const CLI::Option* o_out, std::string out) {
    const auto cfg = load_config(config_path);
    moedet::BenchmarkConfig bc;
    bc.seed = resolve(o_seed, seed, [&] { return cfg.get_u64("seed", 0); });
    bc.train_scenes = cfg.get_int("train_scenes", bc.train_scenes);
    bc.test_scenes = cfg.get_int("test_scenes", bc.test_scenes);
    bc.epochs = cfg.get_int("epochs", bc.epochs);
    bc.batch_size = cfg.get_int("batch_size", bc.batch_size);
    bc.lambda_lb = cfg.get_double("lambda_lb", bc.lambda_lb);
    bc.learning_rate = cfg.get_double("learning_rate", bc.learning_rate);
    bc.compare_lambda_zero = cfg.get_bool("compare_lambda_zero", bc.compare_lambda_zero);
    bc.expert.hidden_channels = cfg.get_int("hidden_channels", bc.expert.hidden_channels);
    out = resolve(o_out, out, [&] { return cfg.get_string("out", ""); });
    reject_unknown_keys(cfg);

    const auto rep = moedet::run_benchmark(bc, &std::cout);
    const std::string text = moedet::format_benchmark_report(rep) + moedet::format_routing_report(rep.routing) +
                             moedet::format_benchmark_keyvals(rep) + moedet::format_routing_keyvals(rep.routing);
    std::cout << text;
    if (!out.empty()) write_text(out, text);
    return 0;
}

// ---- inspect-routing -----------------------------------------------------------

int cmd_inspect(const std::string& config_path, const CLI::Option* o_ckpt, std::string ckpt_path,
                const CLI::Option* o_a, std::string data_a, const CLI::Option* o_b, std::string data_b,
                const CLI::Option* o_batch, int batch, const CLI::Option* o_out, std::string out) {
    const auto cfg = load_config(config_path);
    ckpt_path = resolve(o_ckpt, ckpt_path, [&] { return cfg.get_string("checkpoint", ""); });
    data_a = resolve(o_a, data_a, [&] { return cfg.get_string("data_a", ""); });
    data_b = resolve(o_b, data_b, [&] { return cfg.get_string("data_b", ""); });
    batch = resolve(o_batch, batch, [&] { return cfg.get_int("batch_size", 16); });
    out = resolve(o_out, out, [&] { return cfg.get_string("out", ""); });
    reject_unknown_keys(cfg);
    if (ckpt_path.empty()) throw moedet::config_error("inspect-routing needs a checkpoint (--checkpoint)");
    if (data_a.empty() && data_b.empty())
        throw moedet::config_error("inspect-routing needs at least one dataset (--data-a / --data-b)");

    const auto ckpt = moedet::load_checkpoint(ckpt_path);
    const auto a = data_a.empty() ? std::vector<moedet::Scene>{} : moedet::read_dataset(data_a);
    const auto b = data_b.empty() ? std::vector<moedet::Scene>{} : moedet::read_dataset(data_b);
    const auto rep = moedet::inspect_routing(ckpt, a, b, batch);
    const std::string text = moedet::format_routing_report(rep) + moedet::format_routing_keyvals(rep);
    std::cout << text;
    if (!out.empty()) write_text(out, text);
    return 0;
}

// ---- grad-check ------------------------------------------------------------------

// Central-difference check of the composed mixture graph in double
// precision: perturbs sampled coordinates of every parameter tensor and
// compares against the backward pass.
int cmd_grad_check(const std::string& config_path, const CLI::Option* o_seed, uint64_t seed) {
    const auto cfg = load_config(config_path);
    seed = resolve(o_seed, seed, [&] { return cfg.get_u64("seed", 0); });
    const int samples = cfg.get_int("samples", 3);
    reject_unknown_keys(cfg);

    moedet::ExpertConfig ec;
    ec.hidden_channels = 4;
    ec.num_bins = 4;
    ec.num_classes = 2;
    moedet::RouterConfig rc;
    rc.num_experts = 2;
    rc.hidden_channels = 4;
    rc.router_channels = 8;

    const auto scenes = moedet::generate_scenes(moedet::domain_spec('A'), seed + 17, 2);
    std::vector<const moedet::Scene*> batch;
    for (const auto& s : scenes) batch.push_back(&s);
    std::vector<std::vector<moedet::Assignment>> as;
    for (const auto* s : batch) as.push_back(moedet::assign_targets(s->objects, ec));
    const auto image = moedet::batch_to_tensor<double>(batch);

    std::vector<moedet::ParameterSet<double>> experts;
    experts.push_back(moedet::init_expert_params<double>(ec, seed + 1));
    experts.push_back(moedet::init_expert_params<double>(ec, seed + 2));
    auto moe_params = moedet::init_moe_params<double>(ec, rc, seed + 3);

    const auto loss_value = [&]() {
        moedet::Tape<double> tape;
        tape.set_enabled(false);
        auto out = moedet::moe_forward(tape, image, experts, moe_params, ec, rc);
        auto det = moedet::detection_loss(tape, out.box_logits, out.cls_logits, as, ec);
        std::vector<moedet::TensorPtr<double>> alphas(out.alpha.begin(), out.alpha.end());
        auto stats = moedet::routing_stats(tape, alphas);
        auto lb = moedet::load_balance_loss(tape, stats, rc.num_experts, moedet::kNumLevels);
        auto total = moedet::total_loss(tape, det.total, lb, 0.5);
        return total->data[0];
    };

    // Analytic gradients.
    {
        moedet::Tape<double> tape;
        auto out = moedet::moe_forward(tape, image, experts, moe_params, ec, rc);
        auto det = moedet::detection_loss(tape, out.box_logits, out.cls_logits, as, ec);
        std::vector<moedet::TensorPtr<double>> alphas(out.alpha.begin(), out.alpha.end());
        auto stats = moedet::routing_stats(tape, alphas);
        auto lb = moedet::load_balance_loss(tape, stats, rc.num_experts, moedet::kNumLevels);
        auto total = moedet::total_loss(tape, det.total, lb, 0.5);
        tape.backward(total);
    }

    moedet::Rng pick(seed + 99);
    double max_rel = 0.0;
    int checked = 0;
    const double h = 1e-5;
    const auto check_tensor = [&](const std::string& name, const moedet::TensorPtr<double>& t) {
        for (int s = 0; s < samples; ++s) {
            const size_t i = static_cast<size_t>(pick.uniform_int(0, static_cast<int>(t->data.size()) - 1));
            const double keep = t->data[i];
            t->data[i] = keep + h;
            const double up = loss_value();
            t->data[i] = keep - h;
            const double down = loss_value();
            t->data[i] = keep;
            const double fd = (up - down) / (2 * h);
            const double an = t->grad[i];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
            if (rel > max_rel) max_rel = rel;
            ++checked;
            if (rel > 1e-4)
                std::cout << "grad-check FAIL " << name << "[" << i << "]: analytic " << an << " vs fd " << fd
                          << " (rel " << rel << ")\n";
        }
    };
    for (size_t e = 0; e < experts.size(); ++e)
        for (const auto& [name, t] : experts[e]) check_tensor("expert" + std::to_string(e) + "." + name, t);
    for (const auto& [name, t] : moe_params) check_tensor("moe." + name, t);

    std::cout << "grad-check: " << checked << " sampled coordinates, max relative error " << max_rel << "\n";
    if (!(max_rel < 1e-4)) {
        std::cout << "grad-check FAILED\n";
        return 3;
    }
    std::cout << "grad-check passed\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale mixture-of-experts object detection"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "key=value configuration file")->expected(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
    std::string g_domain = "A", g_out;
    int g_count = 128;
    uint64_t g_seed = 0;
    auto* g_o_domain = gen->add_option("--domain", g_domain, "A or B");
    auto* g_o_count = gen->add_option("--count", g_count, "number of scenes");
    auto* g_o_seed = gen->add_option("--seed", g_seed, "random seed");
    auto* g_o_out = gen->add_option("--out", g_out, "output dataset path");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "train a single expert");
    TrainFlags pf;
    add_train_flags(pre, pf);

    // train-moe
    auto* moe = app.add_subcommand("train-moe", "train a mixture from expert checkpoints");
    TrainFlags mf;
    add_train_flags(moe, mf);
    std::vector<std::string> m_experts;
    double m_lambda = 0.5;
    bool m_freeze = false;
    int m_rch = moedet::RouterConfig{}.router_channels;
    auto* m_o_experts = moe->add_option("--expert", m_experts, "expert checkpoint (repeatable)");
    auto* m_o_lambda = moe->add_option("--lambda-lb", m_lambda, "load-balance weight");
    auto* m_o_freeze = moe->add_flag("--freeze-experts", m_freeze, "train only routing parameters");
    auto* m_o_rch = moe->add_option("--router-channels", m_rch, "router conv channels");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string e_ckpt, e_data, e_out;
    int e_batch = 16;
    auto* e_o_ckpt = ev->add_option("--checkpoint", e_ckpt, "checkpoint path");
    auto* e_o_data = ev->add_option("--data", e_data, "dataset path");
    auto* e_o_batch = ev->add_option("--batch-size", e_batch, "evaluation batch size");
    auto* e_o_out = ev->add_option("--out", e_out, "also write the report here");

    // benchmark
    auto* be = app.add_subcommand("benchmark", "run the four-model two-domain comparison");
    uint64_t b_seed = 0;
    std::string b_out;
    auto* b_o_seed = be->add_option("--seed", b_seed, "benchmark seed");
    auto* b_o_out = be->add_option("--out", b_out, "also write the report here");

    // inspect-routing
    auto* ins = app.add_subcommand("inspect-routing", "per-level routing statistics of a mixture");
    std::string i_ckpt, i_a, i_b, i_out;
    int i_batch = 16;
    auto* i_o_ckpt = ins->add_option("--checkpoint", i_ckpt, "mixture checkpoint path");
    auto* i_o_a = ins->add_option("--data-a", i_a, "domain-A dataset path");
    auto* i_o_b = ins->add_option("--data-b", i_b, "domain-B dataset path");
    auto* i_o_batch = ins->add_option("--batch-size", i_batch, "batch size");
    auto* i_o_out = ins->add_option("--out", i_out, "also write the report here");

    // grad-check
    auto* gc = app.add_subcommand("grad-check", "finite-difference check of the composed gradient");
    uint64_t c_seed = 0;
    auto* c_o_seed = gc->add_option("--seed", c_seed, "random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // --help and friends exit 0 through CLI11; real parse errors are
        // usage errors regardless of CLI11's internal code.
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(config_path, g_o_domain, g_domain, g_o_count, g_count, g_o_seed, g_seed, g_o_out,
                                g_out);
        if (pre->parsed()) return cmd_pretrain(config_path, pf);
        if (moe->parsed())
            return cmd_train_moe(config_path, mf, m_o_experts, m_experts, m_o_lambda, m_lambda, m_o_freeze, m_freeze,
                                 m_o_rch, m_rch);
        if (ev->parsed()) return cmd_eval(config_path, e_o_ckpt, e_ckpt, e_o_data, e_data, e_o_batch, e_batch,
                                          e_o_out, e_out);
        if (be->parsed()) return cmd_benchmark(config_path, b_o_seed, b_seed, b_o_out, b_out);
        if (ins->parsed())
            return cmd_inspect(config_path, i_o_ckpt, i_ckpt, i_o_a, i_a, i_o_b, i_b, i_o_batch, i_batch, i_o_out,
                               i_out);
        if (gc->parsed()) return cmd_grad_check(config_path, c_o_seed, c_seed);
    } catch (const moedet::numeric_error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const moedet::io_error& e) {
        std::cerr << "file error: " << e.what() << "\n";
        return 2;
    } catch (const moedet::shape_error& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const moedet::config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
