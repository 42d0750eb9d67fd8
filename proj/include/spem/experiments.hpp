#pragma once

// Declarative experiment specs, the resumable suite runner and the ablation
// generators.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spem/backbone.hpp"
#include "spem/checkpoint.hpp"
#include "spem/data.hpp"
#include "spem/gradcheck.hpp"
#include "spem/training.hpp"

namespace spem {

class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class DatasetKind { Cifar10, Cifar100, Synthetic };
enum class Scale { Paper, Desk, Tiny };

inline std::string dataset_name(DatasetKind d)
{
    switch (d) {
    case DatasetKind::Cifar10: return "cifar10";
    case DatasetKind::Cifar100: return "cifar100";
    case DatasetKind::Synthetic: return "synthetic";
    }
    return "?";
}

inline DatasetKind parse_dataset(const std::string& s)
{
    if (s == "cifar10") return DatasetKind::Cifar10;
    if (s == "cifar100") return DatasetKind::Cifar100;
    if (s == "synthetic") return DatasetKind::Synthetic;
    throw ConfigError("unknown dataset '" + s + "' (expected cifar10, cifar100 or synthetic)");
}

inline std::string scale_name(Scale s)
{
    switch (s) {
    case Scale::Paper: return "paper";
    case Scale::Desk: return "desk";
    case Scale::Tiny: return "tiny";
    }
    return "?";
}

inline Scale parse_scale(const std::string& s)
{
    if (s == "paper") return Scale::Paper;
    if (s == "desk") return Scale::Desk;
    if (s == "tiny") return Scale::Tiny;
    throw ConfigError("unknown scale '" + s + "' (expected paper, desk or tiny)");
}

struct ExperimentSpec {
    std::string name = "run";
    NetworkConfig network;
    OptimizerConfig optimizer;
    LossConfig loss;
    DatasetKind dataset = DatasetKind::Cifar10;
    std::string data_dir = "data";
    std::size_t train_subset = 0;  // 0 keeps the whole split
    std::size_t test_subset = 0;
    std::size_t synthetic_train = 1000;
    std::size_t synthetic_test = 200;
    double synthetic_noise = 8.0;
    std::uint64_t data_seed = 0;
    bool augment = true;
    std::string precision = "float";
    Scale scale = Scale::Desk;
    std::vector<std::uint64_t> seeds{0};

    void validate() const
    {
        if (name.empty() || name.find_first_of(",\n\r") != std::string::npos)
            throw ConfigError("experiment name must be non-empty and free of commas/newlines");
        network.validate();
        optimizer.validate();
        loss.validate();
        if (precision != "float" && precision != "double") throw ConfigError("precision must be float or double");
        if (seeds.empty()) throw ConfigError("experiment '" + name + "' has no seeds");
        const std::size_t classes = dataset == DatasetKind::Cifar100 ? 100 : dataset == DatasetKind::Cifar10 ? 10 : 0;
        if (classes && network.num_classes != classes)
            throw ConfigError("experiment '" + name + "': " + dataset_name(dataset) + " needs " +
                              std::to_string(classes) + " classes");
    }
};

// Depth, length and data volume for a scale. Everything else is untouched.
inline void apply_scale(ExperimentSpec& s, Scale scale)
{
    s.scale = scale;
    switch (scale) {
    case Scale::Paper:
        s.network.blocks_per_stage = 18;
        s.optimizer.epochs = 164;
        s.train_subset = s.test_subset = 0;
        break;
    case Scale::Desk:
        s.network.blocks_per_stage = 2;
        s.optimizer.epochs = 20;
        s.train_subset = 5000;
        s.test_subset = 1000;
        break;
    case Scale::Tiny:
        s.network.blocks_per_stage = 1;
        s.optimizer.epochs = 2;
        s.train_subset = 256;
        s.test_subset = 128;
        break;
    }
    s.optimizer.schedule = OptimizerConfig::step_schedule(s.optimizer.epochs);
}

using KeyValues = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep)
{
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, sep)) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline double to_double(const std::string& key, const std::string& v)
{
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v)
{
    try {
        std::size_t used = 0;
        if (!v.empty() && v[0] != '-') {
            const auto n = std::stoull(v, &used);
            if (used == v.size()) return n;
        }
    } catch (const std::exception&) {
    }
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
}

inline bool to_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("'" + key + "' expects true/false, got '" + v + "'");
}

inline std::string fmt(double v)
{
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
    return os.str();
}

}  // namespace detail

// Builds a spec from flag-style keys. `scale` is applied first so that every
// explicit key overrides it.
inline ExperimentSpec spec_from_kv(const KeyValues& kv, ExperimentSpec base = {})
{
    ExperimentSpec s = std::move(base);
    std::optional<std::string> schedule;
    bool epochs_set = false;
    for (const auto& [k, v] : kv)
        if (k == "scale") apply_scale(s, parse_scale(v));
    for (const auto& [k, v] : kv) {
        if (k == "scale") continue;
        if (k == "name") s.name = v;
        else if (k == "dataset") {
            s.dataset = parse_dataset(v);
            if (s.dataset == DatasetKind::Cifar100) s.network.num_classes = 100;
            if (s.dataset == DatasetKind::Cifar10) s.network.num_classes = 10;
        } else if (k == "data-dir") s.data_dir = v;
        else if (k == "seed") s.seeds = {detail::to_uint(k, v)};
        else if (k == "seeds") {
            s.seeds.clear();
            for (const auto& item : detail::split(v, ',')) s.seeds.push_back(detail::to_uint(k, item));
        } else if (k == "epochs") {
            s.optimizer.epochs = detail::to_uint(k, v);
            epochs_set = true;
        } else if (k == "depth-n") s.network.blocks_per_stage = detail::to_uint(k, v);
        else if (k == "widths") {
            const auto parts = detail::split(v, ',');
            if (parts.size() != 3) throw ConfigError("'widths' needs three comma-separated values");
            for (std::size_t i = 0; i < 3; ++i) s.network.stage_widths[i] = detail::to_uint(k, parts[i]);
        } else if (k == "classes") s.network.num_classes = detail::to_uint(k, v);
        else if (k == "attention") s.network.attention.type = parse_attention(v);
        else if (k == "se-reduction") s.network.attention.se_reduction = detail::to_uint(k, v);
        else if (k == "pooling") s.network.attention.pooling = PoolingConfig::parse(v);
        else if (k == "reweight") {
            auto r = parse_reweight(v);
            if (!r) throw ConfigError("unknown reweight variant '" + v + "' (expected ours, a-g or none)");
            s.network.attention.reweight = *r;
        } else if (k == "force-identity") s.network.attention.force_identity = detail::to_bool(k, v);
        else if (k == "eta") s.loss.eta = detail::to_double(k, v);
        else if (k == "lr") s.optimizer.lr = detail::to_double(k, v);
        else if (k == "momentum") s.optimizer.momentum = detail::to_double(k, v);
        else if (k == "weight-decay") s.optimizer.weight_decay = detail::to_double(k, v);
        else if (k == "batch-size") s.optimizer.batch_size = detail::to_uint(k, v);
        else if (k == "lr-schedule") schedule = v;
        else if (k == "train-subset") s.train_subset = detail::to_uint(k, v);
        else if (k == "test-subset") s.test_subset = detail::to_uint(k, v);
        else if (k == "synthetic-train") s.synthetic_train = detail::to_uint(k, v);
        else if (k == "synthetic-test") s.synthetic_test = detail::to_uint(k, v);
        else if (k == "synthetic-noise") s.synthetic_noise = detail::to_double(k, v);
        else if (k == "data-seed") s.data_seed = detail::to_uint(k, v);
        else if (k == "augment") s.augment = detail::to_bool(k, v);
        else if (k == "precision") s.precision = v;
        else throw ConfigError("unknown spec key '" + k + "'");
    }
    if (schedule) {
        s.optimizer.schedule.clear();
        for (const auto& item : detail::split(*schedule, ',')) {
            const auto colon = item.find(':');
            if (colon == std::string::npos) throw ConfigError("lr-schedule entries are <epoch>:<multiplier>");
            s.optimizer.schedule.emplace_back(detail::to_uint("lr-schedule", item.substr(0, colon)),
                                              detail::to_double("lr-schedule", item.substr(colon + 1)));
        }
    } else if (epochs_set) {
        s.optimizer.schedule = OptimizerConfig::step_schedule(s.optimizer.epochs);
    }
    s.validate();
    return s;
}

// Fully resolved keys; spec_from_kv(spec_to_kv(s)) reproduces s.
inline KeyValues spec_to_kv(const ExperimentSpec& s)
{
    KeyValues kv;
    auto put = [&](std::string k, std::string v) { kv.emplace_back(std::move(k), std::move(v)); };
    put("name", s.name);
    put("scale", scale_name(s.scale));
    put("dataset", dataset_name(s.dataset));
    put("data-dir", s.data_dir);
    std::string seeds;
    for (std::size_t i = 0; i < s.seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(s.seeds[i]);
    put("seeds", seeds);
    put("epochs", std::to_string(s.optimizer.epochs));
    put("depth-n", std::to_string(s.network.blocks_per_stage));
    put("widths", std::to_string(s.network.stage_widths[0]) + "," + std::to_string(s.network.stage_widths[1]) + "," +
                      std::to_string(s.network.stage_widths[2]));
    put("classes", std::to_string(s.network.num_classes));
    put("attention", attention_name(s.network.attention.type));
    put("se-reduction", std::to_string(s.network.attention.se_reduction));
    put("pooling", s.network.attention.pooling.to_string());
    put("reweight", std::string(reweight_name(s.network.attention.reweight)));
    if (s.network.attention.force_identity) put("force-identity", "true");
    put("eta", detail::fmt(s.loss.eta));
    put("lr", detail::fmt(s.optimizer.lr));
    put("momentum", detail::fmt(s.optimizer.momentum));
    put("weight-decay", detail::fmt(s.optimizer.weight_decay));
    put("batch-size", std::to_string(s.optimizer.batch_size));
    std::string sched;
    for (std::size_t i = 0; i < s.optimizer.schedule.size(); ++i)
        sched += (i ? "," : "") + std::to_string(s.optimizer.schedule[i].first) + ":" +
                 detail::fmt(s.optimizer.schedule[i].second);
    put("lr-schedule", sched);
    put("train-subset", std::to_string(s.train_subset));
    put("test-subset", std::to_string(s.test_subset));
    put("synthetic-train", std::to_string(s.synthetic_train));
    put("synthetic-test", std::to_string(s.synthetic_test));
    put("synthetic-noise", detail::fmt(s.synthetic_noise));
    put("data-seed", std::to_string(s.data_seed));
    put("augment", s.augment ? "true" : "false");
    put("precision", s.precision);
    return kv;
}

// Spec files: `key = value` lines, `#` comments, specs separated by `---`.
inline std::vector<KeyValues> parse_spec_blocks(std::istream& in)
{
    std::vector<KeyValues> blocks(1);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line == "---") {
            if (!blocks.back().empty()) blocks.emplace_back();
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("spec line " + std::to_string(lineno) + ": expected key = value");
        blocks.back().emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    if (blocks.back().empty()) blocks.pop_back();
    return blocks;
}

inline std::vector<ExperimentSpec> parse_suite(std::istream& in)
{
    std::vector<ExperimentSpec> specs;
    std::set<std::string> names;
    for (const auto& block : parse_spec_blocks(in)) {
        specs.push_back(spec_from_kv(block));
        if (!names.insert(specs.back().name).second)
            throw ConfigError("duplicate experiment name '" + specs.back().name + "'");
    }
    return specs;
}

inline std::vector<ExperimentSpec> load_suite(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open spec file " + path.string());
    return parse_suite(in);
}

inline void write_suite(std::ostream& os, const std::vector<ExperimentSpec>& specs)
{
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (i) os << "---\n";
        for (const auto& [k, v] : spec_to_kv(specs[i])) os << k << " = " << v << '\n';
    }
}

// Fixed-mix specs per lambda plus one adaptive spec.
inline std::vector<ExperimentSpec> lambda_sweep(const ExperimentSpec& base, const std::vector<double>& lambdas)
{
    std::vector<ExperimentSpec> out;
    for (double l : lambdas) {
        if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("lambda " + detail::fmt(l) + " outside [0, 1]");
        ExperimentSpec s = base;
        s.network.attention.type = AttentionType::Spem;
        s.network.attention.pooling = PoolingConfig::fixed(l);
        std::ostringstream name;
        name << base.name << "-fixed" << l;
        s.name = name.str();
        out.push_back(std::move(s));
    }
    ExperimentSpec a = base;
    a.network.attention.type = AttentionType::Spem;
    a.network.attention.pooling = PoolingConfig::adaptive();
    a.name = base.name + "-adaptive";
    out.push_back(std::move(a));
    return out;
}

// One spec per reweighting variant, the shared-add-sigmoid form included.
inline std::vector<ExperimentSpec> reweight_ablation(const ExperimentSpec& base)
{
    if (base.network.attention.type != AttentionType::Spem)
        throw ConfigError("reweight ablation needs a SPEM base spec");
    std::vector<ExperimentSpec> out;
    for (auto v : kAllReweightVariants) {
        ExperimentSpec s = base;
        s.network.attention.reweight = v;
        s.name = base.name + "-rw-" + std::string(reweight_name(v));
        out.push_back(std::move(s));
    }
    return out;
}

struct MetricsRow {
    std::string experiment;
    std::uint64_t seed = 0;
    std::string scale;
    std::size_t params_total = 0;
    std::size_t params_attention = 0;
    double best_top1 = 0.0;
    double final_top1 = 0.0;
    std::vector<double> lambdas;
    double wall_time = 0.0;

    // Equality of everything except wall_time, bit for bit.
    bool same_result(const MetricsRow& o) const
    {
        auto bits_equal = [](double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; };
        if (experiment != o.experiment || seed != o.seed || scale != o.scale || params_total != o.params_total ||
            params_attention != o.params_attention || !bits_equal(best_top1, o.best_top1) ||
            !bits_equal(final_top1, o.final_top1) || lambdas.size() != o.lambdas.size())
            return false;
        for (std::size_t i = 0; i < lambdas.size(); ++i)
            if (!bits_equal(lambdas[i], o.lambdas[i])) return false;
        return true;
    }
};

inline const char* kMetricsHeader =
    "experiment,seed,scale,params_total,params_attention,best_top1,final_top1,lambdas,wall_time";

inline std::string metrics_to_csv(const MetricsRow& r)
{
    std::string l;
    for (std::size_t i = 0; i < r.lambdas.size(); ++i) l += (i ? ";" : "") + detail::fmt(r.lambdas[i]);
    std::ostringstream os;
    os << r.experiment << ',' << r.seed << ',' << r.scale << ',' << r.params_total << ',' << r.params_attention << ','
       << detail::fmt(r.best_top1) << ',' << detail::fmt(r.final_top1) << ',' << l << ',' << detail::fmt(r.wall_time);
    return os.str();
}

inline MetricsRow metrics_from_csv(const std::string& line)
{
    std::vector<std::string> f;
    std::string item;
    std::istringstream is(line);
    while (std::getline(is, item, ',')) f.push_back(item);
    if (f.size() == 8) f.emplace_back();  // getline drops an empty trailing field
    if (f.size() != 9) throw FormatError("metrics row has " + std::to_string(f.size()) + " fields: " + line);
    MetricsRow r;
    r.experiment = f[0];
    r.seed = std::stoull(f[1]);
    r.scale = f[2];
    r.params_total = std::stoull(f[3]);
    r.params_attention = std::stoull(f[4]);
    r.best_top1 = std::stod(f[5]);
    r.final_top1 = std::stod(f[6]);
    for (const auto& l : detail::split(f[7], ';')) r.lambdas.push_back(std::stod(l));
    r.wall_time = f[8].empty() ? 0.0 : std::stod(f[8]);
    return r;
}

inline std::vector<MetricsRow> read_metrics(const std::filesystem::path& path)
{
    std::vector<MetricsRow> rows;
    std::ifstream in(path);
    if (!in) return rows;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            if (line != kMetricsHeader) throw FormatError(path.string() + ": unexpected metrics header");
            continue;
        }
        rows.push_back(metrics_from_csv(line));
    }
    return rows;
}

struct RunResult {
    MetricsRow metrics;
    History history;
};

struct DataBundle {
    Dataset train;
    Dataset test;
    Normalization norm;
};

// Loads (and subsets) the data named by a spec. Normalisation constants are
// taken from the training split.
inline DataBundle load_data(const ExperimentSpec& s)
{
    DataBundle b;
    if (s.dataset == DatasetKind::Synthetic) {
        const std::size_t classes = s.network.num_classes;
        auto all = synthetic(s.synthetic_train + s.synthetic_test, classes, s.data_seed, s.synthetic_noise);
        b.train.num_classes = b.test.num_classes = classes;
        b.train.records.assign(all.records.begin(),
                               all.records.begin() + static_cast<std::ptrdiff_t>(s.synthetic_train));
        b.test.records.assign(all.records.begin() + static_cast<std::ptrdiff_t>(s.synthetic_train), all.records.end());
    } else {
        auto splits = load_cifar(s.data_dir, s.dataset == DatasetKind::Cifar10 ? CifarVariant::Cifar10
                                                                                 : CifarVariant::Cifar100);
        b.train = s.train_subset ? splits.train.head(s.train_subset) : std::move(splits.train);
        b.test = s.test_subset ? splits.test.head(s.test_subset) : std::move(splits.test);
    }
    b.norm = Normalization::from_dataset(b.train);
    return b;
}

template <typename T>
RunResult run_experiment_as(const ExperimentSpec& spec, std::uint64_t seed, const DataBundle& data,
                            const EpochCallback& on_epoch = {}, Network<T>* out_net = nullptr)
{
    const auto start = std::chrono::steady_clock::now();
    auto net = Network<T>::build(spec.network, seed);
    TrainConfig tc;
    tc.seed = seed;
    tc.augment.norm = data.norm;
    tc.augment_train = spec.augment;
    RunResult r;
    r.history = train(net, data.train, data.test, spec.optimizer, spec.loss, tc, on_epoch);
    const auto pc = net.param_count();
    r.metrics.experiment = spec.name;
    r.metrics.seed = seed;
    r.metrics.scale = scale_name(spec.scale);
    r.metrics.params_total = pc.total;
    r.metrics.params_attention = pc.attention;
    r.metrics.best_top1 = 0.0;
    for (const auto& h : r.history) r.metrics.best_top1 = std::max(r.metrics.best_top1, h.test_top1);
    r.metrics.final_top1 = r.history.empty() ? 0.0 : r.history.back().test_top1;
    r.metrics.lambdas = net.lambdas();
    r.metrics.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (out_net) *out_net = std::move(net);
    return r;
}

inline RunResult run_experiment(const ExperimentSpec& spec, std::uint64_t seed, const DataBundle& data,
                                const EpochCallback& on_epoch = {})
{
    if (spec.precision == "double") return run_experiment_as<double>(spec, seed, data, on_epoch);
    return run_experiment_as<float>(spec, seed, data, on_epoch);
}

inline nlohmann::json spec_to_json(const ExperimentSpec& s)
{
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : spec_to_kv(s)) j[k] = v;
    return j;
}

inline nlohmann::json metrics_to_json(const MetricsRow& r)
{
    return {{"experiment", r.experiment}, {"seed", r.seed},           {"scale", r.scale},
            {"params_total", r.params_total}, {"params_attention", r.params_attention},
            {"best_top1", r.best_top1},   {"final_top1", r.final_top1}, {"lambdas", r.lambdas},
            {"wall_time", r.wall_time}};
}

struct SuiteOptions {
    bool write_histories = true;
    std::function<void(const std::string&)> log;
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) { return csv.string() + ".json"; }

inline std::filesystem::path history_path(const std::filesystem::path& csv, const std::string& name,
                                          std::uint64_t seed)
{
    auto p = csv;
    p.replace_extension();
    return p.string() + "." + name + ".seed" + std::to_string(seed) + ".history.csv";
}

// Runs every (spec, seed) pair not already present in `output`, appending one
// metrics row per run. Returns the rows of this suite, old and new.
inline std::vector<MetricsRow> run_suite(const std::vector<ExperimentSpec>& specs,
                                         const std::filesystem::path& output, const SuiteOptions& opts = {})
{
    std::set<std::string> names;
    for (const auto& s : specs) {
        s.validate();
        if (!names.insert(s.name).second) throw ConfigError("duplicate experiment name '" + s.name + "'");
    }

    auto existing = read_metrics(output);
    {
        const bool fresh = existing.empty() && (!std::filesystem::exists(output) ||
                                                std::filesystem::file_size(output) == 0);
        std::ofstream probe(output, std::ios::app);
        if (!probe) throw IoError("cannot write results to " + output.string());
        if (fresh) probe << kMetricsHeader << '\n';
        if (!probe.flush()) throw IoError("cannot write results to " + output.string());
    }

    nlohmann::json sidecar = {{"specs", nlohmann::json::object()}, {"runs", nlohmann::json::array()}};
    if (std::ifstream in(sidecar_path(output)); in) {
        try {
            in >> sidecar;
        } catch (const std::exception&) {
            throw FormatError(sidecar_path(output).string() + ": unreadable sidecar");
        }
    }
    for (const auto& s : specs) sidecar["specs"][s.name] = spec_to_json(s);
    auto flush_sidecar = [&] {
        std::set<std::string> scales;
        for (const auto& r : sidecar["runs"]) scales.insert(r["scale"].get<std::string>());
        sidecar["scales"] = scales;
        const auto tmp = sidecar_path(output).string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::trunc);
            if (!out) throw IoError("cannot write " + tmp);
            out << sidecar.dump(2) << '\n';
        }
        std::filesystem::rename(tmp, sidecar_path(output));
    };
    flush_sidecar();

    std::map<std::pair<std::string, std::uint64_t>, MetricsRow> done;
    for (auto& r : existing) done.emplace(std::make_pair(r.experiment, r.seed), r);

    std::vector<MetricsRow> rows;
    std::map<std::string, DataBundle> data_cache;
    for (const auto& spec : specs) {
        for (auto seed : spec.seeds) {
            if (auto it = done.find({spec.name, seed}); it != done.end()) {
                rows.push_back(it->second);
                if (opts.log) opts.log("skip " + spec.name + " seed " + std::to_string(seed) + " (done)");
                continue;
            }
            const std::string data_key = spec.dataset == DatasetKind::Synthetic
                                             ? "synthetic:" + std::to_string(spec.synthetic_train) + ":" +
                                                   std::to_string(spec.synthetic_test) + ":" +
                                                   std::to_string(spec.network.num_classes) + ":" +
                                                   detail::fmt(spec.synthetic_noise) + ":" +
                                                   std::to_string(spec.data_seed)
                                             : dataset_name(spec.dataset) + ":" + spec.data_dir + ":" +
                                                   std::to_string(spec.train_subset) + ":" +
                                                   std::to_string(spec.test_subset);
            auto dit = data_cache.find(data_key);
            if (dit == data_cache.end()) dit = data_cache.emplace(data_key, load_data(spec)).first;
            if (opts.log) opts.log("run " + spec.name + " seed " + std::to_string(seed));

            std::ofstream hist;
            if (opts.write_histories) {
                hist.open(history_path(output, spec.name, seed), std::ios::trunc);
                if (!hist) throw IoError("cannot write history for " + spec.name);
            }
            bool header_written = false;
            auto result = run_experiment(spec, seed, dit->second, [&](const HistoryRow& h) {
                if (hist.is_open()) {
                    if (!header_written) write_history_header(hist, h.lambdas.size());
                    header_written = true;
                    write_history_row(hist, h);
                    hist.flush();
                }
                if (opts.log) {
                    std::ostringstream os;
                    os << "  epoch " << h.epoch << " loss " << h.train_loss << " top1 " << h.test_top1;
                    opts.log(os.str());
                }
                return true;
            });
            if (hist.is_open() && !header_written) write_history_header(hist, 0);

            {
                std::ofstream out(output, std::ios::app);
                const std::string line = metrics_to_csv(result.metrics) + "\n";
                out.write(line.data(), static_cast<std::streamsize>(line.size()));
                if (!out.flush()) throw IoError("failed appending to " + output.string());
            }
            sidecar["runs"].push_back(metrics_to_json(result.metrics));
            flush_sidecar();
            rows.push_back(result.metrics);
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Gradient checks by module selector.

namespace detail {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0,
                                    bool requires_grad = true)
{
    Tensor<double> t(std::move(shape), 0.0, requires_grad);
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

inline SpemParams<double> random_spem_params(std::size_t c, ReweightVariant variant, Rng& rng)
{
    auto p = SpemParams<double>::make(c, variant);
    for (auto* t : {&p.gamma_exc, &p.beta_exc, &p.gamma_rew, &p.beta_rew, &p.gamma_rew_min, &p.beta_rew_min})
        if (t->defined())
            for (auto& v : t->data()) v = rng.uniform(-2.0, 2.0);
    p.mix.p0[0] = rng.uniform(0.3, 1.5);
    p.mix.p1[0] = rng.uniform(0.3, 1.5);
    return p;
}

inline std::vector<NamedTensor> spem_groups(const SpemParams<double>& p, ReweightVariant variant, bool with_mix)
{
    std::vector<NamedTensor> g;
    if (with_mix) {
        g.emplace_back("p0", p.mix.p0);
        g.emplace_back("p1", p.mix.p1);
    }
    g.emplace_back("gamma_exc", p.gamma_exc);
    g.emplace_back("beta_exc", p.beta_exc);
    if (variant != ReweightVariant::NoReweight) {
        g.emplace_back("gamma_rew", p.gamma_rew);
        g.emplace_back("beta_rew", p.beta_rew);
    }
    if (p.gamma_rew_min.defined()) {
        g.emplace_back("gamma_rew_min", p.gamma_rew_min);
        g.emplace_back("beta_rew_min", p.beta_rew_min);
    }
    return g;
}

// Random projection so that every output entry contributes to the loss.
inline std::function<Tensor<double>()> projected(std::function<Tensor<double>()> f, Rng& rng)
{
    auto probe = [&] {
        NoGradGuard g;
        return f();
    }();
    auto weights = random_tensor(probe.shape(), rng, -1.0, 1.0, false);
    return [f = std::move(f), weights] { return sum(f() * weights); };
}

inline Shape random_map_shape(Rng& rng)
{
    return {1 + rng.below(3), 1 + rng.below(5), 2 + rng.below(5), 2 + rng.below(5)};
}

}  // namespace detail

inline const std::vector<std::string>& gradcheck_selectors()
{
    static const std::vector<std::string> s = [] {
        std::vector<std::string> v{"pooling", "excitation", "spem", "block"};
        for (auto r : kAllReweightVariants) v.push_back("reweight:" + std::string(reweight_name(r)));
        return v;
    }();
    return s;
}

// Finite-difference check of one module on a random shape drawn from `seed`.
// Selectors: pooling | excitation | reweight:<variant> | spem | block.
inline GradCheckReport gradcheck_module(const std::string& selector, std::uint64_t seed, double h = kGradCheckStep)
{
    Rng rng = Rng(seed).split(0x9c);
    if (selector == "pooling") {
        auto x = detail::random_tensor(detail::random_map_shape(rng), rng);
        auto mix = MixCoefficient<double>::make(rng.uniform(0.3, 1.5), rng.uniform(0.3, 1.5));
        PoolingStrategy<double> strat = AdaptiveMixPooling<double>{mix};
        auto loss = detail::projected([=] { return mix_pool(x, strat); }, rng);
        return check_gradients(loss, {{"x", x}, {"p0", mix.p0}, {"p1", mix.p1}}, h);
    }
    if (selector == "excitation") {
        const std::size_t n = 1 + rng.below(3), c = 1 + rng.below(6);
        auto u = detail::random_tensor({n, c, 1, 1}, rng);
        auto gamma = detail::random_tensor({c, 1, 1}, rng);
        auto beta = detail::random_tensor({c, 1, 1}, rng);
        auto loss = detail::projected([=] { return excitation(u, gamma, beta); }, rng);
        return check_gradients(loss, {{"u", u}, {"gamma_exc", gamma}, {"beta_exc", beta}}, h);
    }
    if (selector.rfind("reweight:", 0) == 0) {
        auto variant = parse_reweight(selector.substr(9));
        if (!variant) throw UsageError("unknown reweight variant in selector '" + selector + "'");
        const std::size_t n = 1 + rng.below(3), c = 1 + rng.below(6);
        auto fmax = detail::random_tensor({n, c, 1, 1}, rng);
        auto fmin = detail::random_tensor({n, c, 1, 1}, rng);
        auto p = detail::random_spem_params(c, *variant, rng);
        auto loss = detail::projected([=, v = *variant] { return reweight(fmax, fmin, p, v); }, rng);
        auto groups = detail::spem_groups(p, *variant, false);
        groups.erase(groups.begin(), groups.begin() + 2);  // excitation terms are not used here
        groups.insert(groups.begin(), {"f_min", fmin});
        groups.insert(groups.begin(), {"f_max", fmax});
        return check_gradients(loss, groups, h);
    }
    if (selector == "spem" || selector.rfind("spem:", 0) == 0) {
        ReweightVariant variant = ReweightVariant::SharedAddSigmoid;
        if (selector.size() > 4) {
            auto v = parse_reweight(selector.substr(5));
            if (!v) throw UsageError("unknown reweight variant in selector '" + selector + "'");
            variant = *v;
        }
        auto x = detail::random_tensor(detail::random_map_shape(rng), rng);
        auto p = detail::random_spem_params(x.dim(1), variant, rng);
        auto loss = detail::projected(
            [=] { return recalibrate(x, spem_forward(x, p, variant, adaptive_pooling(p))); }, rng);
        auto groups = detail::spem_groups(p, variant, true);
        groups.insert(groups.begin(), {"x", x});
        return check_gradients(loss, groups, h);
    }
    if (selector == "block") {
        const std::size_t n = 2 + rng.below(2), in = 2 + rng.below(4), planes = 1 + rng.below(3);
        const std::size_t stride = 1 + rng.below(2), hw = 4 + rng.below(3);
        AttentionConfig attn;
        attn.type = AttentionType::Spem;
        Rng init = rng.split(1), attn_rng = rng.split(2);
        auto block = std::make_shared<Bottleneck<double>>(Bottleneck<double>::make(in, planes, stride, attn, init, attn_rng));
        auto& sp = block->attention.spem();
        sp = detail::random_spem_params(planes * kBottleneckExpansion, ReweightVariant::SharedAddSigmoid, rng);
        for (auto* bn : {&block->bn1, &block->bn2, &block->bn3}) {
            for (auto& v : bn->gamma.data()) v = rng.uniform(0.5, 1.5);
            for (auto& v : bn->beta.data()) v = rng.uniform(-0.5, 0.5);
        }
        auto x = detail::random_tensor({n, in, hw, hw}, rng);
        auto loss = detail::projected([=] { return block->forward(x, Mode::Train); }, rng);
        std::vector<NamedTensor> groups{{"x", x}};
        for (const auto& p : block->backbone_parameters("")) groups.emplace_back(p.name, p.tensor);
        for (const auto& p : block->attention.parameters("attn.")) groups.emplace_back(p.name, p.tensor);
        return check_gradients(loss, groups, h);
    }
    throw UsageError("unknown gradcheck selector '" + selector + "'");
}

}  // namespace spem
