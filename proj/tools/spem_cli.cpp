// Command-line front end: training, suites, ablations, gradient checks,
// parameter audits and checkpoint evaluation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spem/experiments.hpp"

using namespace spem;
namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// Flag-style options shared by the subcommands that build a spec. Only flags
// given on the command line are forwarded.
struct SpecFlags {
    std::map<std::string, std::string> values;
    std::vector<std::pair<std::string, CLI::Option*>> options;

    void add(CLI::App* app, const std::string& key, const std::string& help)
    {
        options.emplace_back(key, app->add_option("--" + key, values[key], help));
    }

    void add_common(CLI::App* app)
    {
        add(app, "data-dir", "directory holding the CIFAR binaries");
        add(app, "seed", "random seed");
        add(app, "scale", "preset: paper, desk or tiny");
        add(app, "epochs", "training epochs");
        add(app, "depth-n", "bottleneck blocks per stage (depth 9n+2)");
        add(app, "dataset", "cifar10, cifar100 or synthetic");
        add(app, "attention", "none, se or spem");
        add(app, "pooling", "gap, fixed:<c> or adaptive");
        add(app, "reweight", "ours, a, b, c, d, e, f, g or none");
        add(app, "eta", "penalty coefficient");
        add(app, "batch-size", "mini-batch size");
        add(app, "lr", "initial learning rate");
        add(app, "precision", "float or double");
        add(app, "train-subset", "first N training images (0 = all)");
        add(app, "test-subset", "first N test images (0 = all)");
        add(app, "synthetic-train", "synthetic training images");
        add(app, "synthetic-test", "synthetic test images");
        add(app, "widths", "stage widths, e.g. 16,32,64");
    }

    KeyValues to_kv(const std::string& default_scale) const
    {
        KeyValues kv;
        bool scale_given = false;
        for (const auto& [key, opt] : options) {
            if (opt->count() == 0) continue;
            scale_given |= key == "scale";
            kv.emplace_back(key, values.at(key));
        }
        if (!scale_given) kv.emplace(kv.begin(), "scale", default_scale);
        return kv;
    }

    ExperimentSpec spec(const std::string& default_scale, const std::string& name) const
    {
        auto kv = to_kv(default_scale);
        kv.emplace(kv.begin(), "name", name);
        return spec_from_kv(kv);
    }
};

void log_line(const std::string& m) { std::cerr << m << '\n'; }

void print_rows(const std::vector<MetricsRow>& rows)
{
    std::cout << kMetricsHeader << '\n';
    for (const auto& r : rows) std::cout << metrics_to_csv(r) << '\n';
}

void ensure_parent(const fs::path& p)
{
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

template <typename T>
int train_command(const ExperimentSpec& spec, const fs::path& out_dir)
{
    fs::create_directories(out_dir);
    const auto data = load_data(spec);
    std::ofstream hist(out_dir / "history.csv", std::ios::trunc);
    if (!hist) throw IoError("cannot write " + (out_dir / "history.csv").string());
    bool header = false;
    auto net = Network<T>::build(spec.network, spec.seeds.front());
    const auto result = run_experiment_as<T>(
        spec, spec.seeds.front(), data,
        [&](const HistoryRow& h) {
            if (!header) write_history_header(hist, h.lambdas.size());
            header = true;
            write_history_row(hist, h);
            hist.flush();
            std::cerr << "epoch " << h.epoch << "/" << spec.optimizer.epochs << "  loss " << h.train_loss
                      << "  top1 " << h.test_top1 << '\n';
            return true;
        },
        &net);
    save_checkpoint(net, out_dir / "model.ckpt");
    {
        std::ofstream spec_out(out_dir / "spec.txt", std::ios::trunc);
        write_suite(spec_out, {spec});
    }
    {
        std::ofstream m(out_dir / "metrics.csv", std::ios::trunc);
        m << kMetricsHeader << '\n' << metrics_to_csv(result.metrics) << '\n';
    }
    {
        std::ofstream j(out_dir / "metrics.csv.json", std::ios::trunc);
        nlohmann::json sidecar = {{"specs", {{spec.name, spec_to_json(spec)}}},
                                  {"runs", nlohmann::json::array({metrics_to_json(result.metrics)})},
                                  {"scales", nlohmann::json::array({scale_name(spec.scale)})}};
        j << sidecar.dump(2) << '\n';
    }
    print_rows({result.metrics});
    return 0;
}

int run_or_emit(const std::vector<ExperimentSpec>& specs, const std::string& emit, const fs::path& out,
                bool histories)
{
    if (!emit.empty()) {
        ensure_parent(emit);
        std::ofstream os(emit, std::ios::trunc);
        if (!os) throw IoError("cannot write " + emit);
        write_suite(os, specs);
        std::cerr << "wrote " << specs.size() << " specs to " << emit << '\n';
        return 0;
    }
    ensure_parent(out);
    SuiteOptions opts;
    opts.write_histories = histories;
    opts.log = log_line;
    print_rows(run_suite(specs, out, opts));
    return 0;
}

int gradcheck_command(const std::string& selector, std::uint64_t seed, std::size_t seeds)
{
    std::vector<std::string> selectors;
    if (selector == "all")
        selectors = gradcheck_selectors();
    else
        selectors = {selector};
    bool ok = true;
    for (const auto& sel : selectors) {
        for (std::uint64_t s = seed; s < seed + seeds; ++s) {
            const auto r = gradcheck_module(sel, s);
            ok &= r.passed();
            std::cout << (r.passed() ? "ok   " : "FAIL ") << sel << " seed " << s << "  max_rel_err "
                      << std::scientific << std::setprecision(3) << r.worst() << std::defaultfloat << "  checked "
                      << r.checked() << "  nonsmooth " << r.nonsmooth() << '\n';
            for (const auto& g : r.groups)
                std::cout << "       " << std::left << std::setw(16) << g.name << std::right << std::scientific
                          << std::setprecision(3) << g.max_rel_error << std::defaultfloat << "  (" << g.checked
                          << ")\n";
        }
    }
    return ok ? 0 : kExitFailure;
}

int audit_command(const ExperimentSpec& spec, bool json)
{
    const auto net = Network<float>::build(spec.network);
    const auto c = net.param_count();
    if (json) {
        nlohmann::json j = {{"depth", spec.network.depth()},
                            {"attention", attention_name(spec.network.attention.type)},
                            {"classes", spec.network.num_classes},
                            {"total", c.total},
                            {"backbone", c.backbone},
                            {"attention_params", c.attention},
                            {"breakdown", c.breakdown}};
        std::cout << j.dump(2) << '\n';
        return 0;
    }
    std::cout << "depth " << spec.network.depth() << ", attention " << attention_name(spec.network.attention.type)
              << ", " << spec.network.num_classes << " classes\n";
    for (const auto& [section, n] : c.breakdown)
        std::cout << "  " << std::left << std::setw(20) << section << std::right << std::setw(10) << n << '\n';
    std::cout << std::left << std::setw(12) << "backbone" << c.backbone << '\n';
    std::cout << std::left << std::setw(12) << "attention" << '+' << c.attention << '\n';
    std::cout << std::left << std::setw(12) << "total" << c.total << "  (" << std::fixed << std::setprecision(2)
              << static_cast<double>(c.total) / 1e6 << "M)\n";
    return 0;
}

int eval_command(const fs::path& checkpoint, ExperimentSpec spec)
{
    auto net = load_checkpoint<float>(checkpoint);
    spec.network = net.config();
    const auto data = load_data(spec);
    const double top1 = evaluate(net, data.test, data.norm);
    std::cout << "top1 " << std::setprecision(6) << top1 << " on " << data.test.size() << " images\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Channel attention with self-adaptive mix pooling: training and analysis tools"};
    app.require_subcommand(1);

    // train
    auto* train_cmd = app.add_subcommand("train", "train one configuration and save a checkpoint");
    SpecFlags train_flags;
    train_flags.add_common(train_cmd);
    std::string train_out = "runs/train";
    std::string train_name = "train";
    train_cmd->add_option("--out", train_out, "output directory");
    train_cmd->add_option("--name", train_name, "experiment name");

    // suite
    auto* suite_cmd = app.add_subcommand("suite", "run every spec in a spec file (resumable)");
    std::string suite_spec, suite_out = "runs/suite.csv";
    bool suite_no_hist = false;
    suite_cmd->add_option("spec", suite_spec, "spec file")->required();
    suite_cmd->add_option("--out", suite_out, "metrics CSV (a JSON sidecar is written next to it)");
    suite_cmd->add_flag("--no-histories", suite_no_hist, "skip per-run history CSVs");

    // sweep-lambda
    auto* sweep_cmd = app.add_subcommand("sweep-lambda", "fixed-mix runs for each lambda plus the adaptive run");
    SpecFlags sweep_flags;
    sweep_flags.add_common(sweep_cmd);
    std::vector<double> lambdas{0.1, 0.3, 0.5, 0.7, 0.9};
    std::string sweep_out = "runs/sweep_lambda.csv", sweep_emit, sweep_name = "sweep";
    std::string sweep_seeds;
    sweep_cmd->add_option("--lambdas", lambdas, "fixed weights of the max branch")->delimiter(',');
    sweep_cmd->add_option("--seeds", sweep_seeds, "comma-separated seeds (overrides --seed)");
    sweep_cmd->add_option("--out", sweep_out, "metrics CSV");
    sweep_cmd->add_option("--emit-specs", sweep_emit, "write the generated spec file instead of running");
    sweep_cmd->add_option("--name", sweep_name, "name prefix");

    // ablate-reweight
    auto* ablate_cmd = app.add_subcommand("ablate-reweight", "one run per reweighting variant");
    SpecFlags ablate_flags;
    ablate_flags.add_common(ablate_cmd);
    std::string ablate_out = "runs/ablate_reweight.csv", ablate_emit, ablate_name = "ablate", ablate_seeds;
    ablate_cmd->add_option("--seeds", ablate_seeds, "comma-separated seeds (overrides --seed)");
    ablate_cmd->add_option("--out", ablate_out, "metrics CSV");
    ablate_cmd->add_option("--emit-specs", ablate_emit, "write the generated spec file instead of running");
    ablate_cmd->add_option("--name", ablate_name, "name prefix");

    // gradcheck
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of one module");
    std::string grad_selector;
    std::uint64_t grad_seed = 0;
    std::size_t grad_seeds = 1;
    grad_cmd->add_option("selector", grad_selector,
                         "pooling | excitation | reweight:<variant> | spem[:<variant>] | block | all")
        ->required();
    grad_cmd->add_option("--seed", grad_seed, "first seed");
    grad_cmd->add_option("--seeds", grad_seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);

    // audit-params
    auto* audit_cmd = app.add_subcommand("audit-params", "parameter counts by section");
    SpecFlags audit_flags;
    audit_flags.add(audit_cmd, "depth-n", "bottleneck blocks per stage");
    audit_flags.add(audit_cmd, "dataset", "cifar10 or cifar100 (sets the class count)");
    audit_flags.add(audit_cmd, "attention", "none, se or spem");
    audit_flags.add(audit_cmd, "pooling", "gap, fixed:<c> or adaptive");
    audit_flags.add(audit_cmd, "reweight", "reweighting variant");
    audit_flags.add(audit_cmd, "se-reduction", "SE reduction ratio");
    audit_flags.add(audit_cmd, "widths", "stage widths");
    bool audit_json = false;
    audit_cmd->add_flag("--json", audit_json, "print JSON");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "top-1 accuracy of a checkpoint on a test split");
    SpecFlags eval_flags;
    eval_flags.add(eval_cmd, "dataset", "cifar10, cifar100 or synthetic");
    eval_flags.add(eval_cmd, "data-dir", "directory holding the CIFAR binaries");
    eval_flags.add(eval_cmd, "test-subset", "first N test images (0 = all)");
    eval_flags.add(eval_cmd, "train-subset", "training images used for normalisation statistics");
    eval_flags.add(eval_cmd, "synthetic-train", "synthetic training images");
    eval_flags.add(eval_cmd, "synthetic-test", "synthetic test images");
    std::string eval_ckpt;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint written by train")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (*train_cmd) {
            const auto spec = train_flags.spec("desk", train_name);
            if (spec.precision == "double") return train_command<double>(spec, train_out);
            return train_command<float>(spec, train_out);
        }
        if (*suite_cmd) return run_or_emit(load_suite(suite_spec), "", suite_out, !suite_no_hist);
        if (*sweep_cmd) {
            auto base = sweep_flags.spec("desk", sweep_name);
            if (!sweep_seeds.empty()) base = spec_from_kv({{"seeds", sweep_seeds}}, base);
            return run_or_emit(lambda_sweep(base, lambdas), sweep_emit, sweep_out, true);
        }
        if (*ablate_cmd) {
            auto kv = ablate_flags.to_kv("desk");
            kv.emplace(kv.begin(), "attention", "spem");
            kv.emplace(kv.begin(), "name", ablate_name);
            if (!ablate_seeds.empty()) kv.emplace_back("seeds", ablate_seeds);
            return run_or_emit(reweight_ablation(spec_from_kv(kv)), ablate_emit, ablate_out, true);
        }
        if (*grad_cmd) return gradcheck_command(grad_selector, grad_seed, grad_seeds);
        if (*audit_cmd) return audit_command(audit_flags.spec("paper", "audit"), audit_json);
        if (*eval_cmd) return eval_command(eval_ckpt, eval_flags.spec("paper", "eval"));
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}
