#pragma once

// Pre-activation bottleneck ResNet for 3 x 32 x 32 inputs with a channel
// attention slot on every residual branch.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spem/attention.hpp"
#include "spem/layers.hpp"
#include "spem/parameters.hpp"
#include "spem/rng.hpp"

namespace spem {

inline constexpr std::size_t kBottleneckExpansion = 4;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSize = 32;

enum class AttentionType { None, SE, Spem };

struct PoolingConfig {
    enum class Kind { Gap, Fixed, Adaptive };
    Kind kind = Kind::Adaptive;
    double max_weight = 0.0;  // only for Fixed

    static PoolingConfig gap() { return {Kind::Gap, 0.0}; }
    static PoolingConfig adaptive() { return {Kind::Adaptive, 0.0}; }
    static PoolingConfig fixed(double c)
    {
        fixed_mix(c);
        return {Kind::Fixed, c};
    }

    // "gap" | "fixed:<c>" | "adaptive"
    static PoolingConfig parse(const std::string& text)
    {
        if (text == "gap") return gap();
        if (text == "adaptive") return adaptive();
        if (text.rfind("fixed:", 0) == 0) {
            const std::string num = text.substr(6);
            std::size_t used = 0;
            double c = 0.0;
            try {
                c = std::stod(num, &used);
            } catch (const std::exception&) {
                throw ConfigError("bad fixed pooling weight '" + num + "'");
            }
            if (used != num.size()) throw ConfigError("bad fixed pooling weight '" + num + "'");
            return fixed(c);
        }
        throw ConfigError("unknown pooling '" + text + "' (expected gap, fixed:<c> or adaptive)");
    }

    std::string to_string() const
    {
        switch (kind) {
        case Kind::Gap: return "gap";
        case Kind::Adaptive: return "adaptive";
        case Kind::Fixed: {
            std::ostringstream os;
            os << "fixed:" << max_weight;
            return os.str();
        }
        }
        return "?";
    }

    bool operator==(const PoolingConfig&) const = default;
};

struct AttentionConfig {
    AttentionType type = AttentionType::None;
    std::size_t se_reduction = 16;
    PoolingConfig pooling;
    ReweightVariant reweight = ReweightVariant::SharedAddSigmoid;
    // Replace the SPEM map by ones while keeping its parameters. Test hook.
    bool force_identity = false;

    bool operator==(const AttentionConfig&) const = default;
};

inline std::string attention_name(AttentionType t)
{
    switch (t) {
    case AttentionType::None: return "none";
    case AttentionType::SE: return "se";
    case AttentionType::Spem: return "spem";
    }
    return "?";
}

inline AttentionType parse_attention(const std::string& s)
{
    if (s == "none") return AttentionType::None;
    if (s == "se") return AttentionType::SE;
    if (s == "spem") return AttentionType::Spem;
    throw ConfigError("unknown attention '" + s + "' (expected none, se or spem)");
}

struct NetworkConfig {
    std::size_t blocks_per_stage = 18;
    std::array<std::size_t, 3> stage_widths{16, 32, 64};
    std::size_t num_classes = 10;
    AttentionConfig attention;

    std::size_t depth() const { return 9 * blocks_per_stage + 2; }

    void validate() const
    {
        if (blocks_per_stage == 0) throw ConfigError("blocks per stage must be positive");
        for (auto w : stage_widths)
            if (w == 0) throw ConfigError("stage widths must be positive");
        if (num_classes < 2) throw ConfigError("need at least two classes");
        if (attention.type == AttentionType::SE && attention.se_reduction == 0)
            throw ConfigError("SE reduction must be >= 1");
    }

    bool operator==(const NetworkConfig&) const = default;
};

// Depth 9n + 2 to blocks per stage n.
inline std::size_t blocks_for_depth(std::size_t depth)
{
    if (depth < 11 || (depth - 2) % 9 != 0)
        throw ConfigError("depth " + std::to_string(depth) + " is not of the form 9n + 2");
    return (depth - 2) / 9;
}

template <typename T>
struct BatchNorm {
    Tensor<T> gamma, beta;
    BatchNormState<T> state;

    static BatchNorm make(std::size_t channels)
    {
        return {make_parameter<T>({channels}, T(1)), make_parameter<T>({channels}, T(0)), BatchNormState<T>(channels)};
    }

    Tensor<T> operator()(const Tensor<T>& x, Mode mode) { return batch_norm(x, gamma, beta, state, mode); }
};

template <typename T>
Tensor<T> kaiming_conv(std::size_t out, std::size_t in, std::size_t k, Rng& rng)
{
    auto w = make_parameter<T>({out, in, k, k}, T(0));
    const double stddev = std::sqrt(2.0 / static_cast<double>(k * k * out));
    for (auto& v : w.data()) v = static_cast<T>(rng.normal(0.0, stddev));
    return w;
}

// Channel attention instance for one block.
template <typename T>
class AttentionUnit {
public:
    AttentionUnit() = default;

    AttentionUnit(const AttentionConfig& cfg, std::size_t channels, Rng& rng) : cfg_(cfg)
    {
        switch (cfg.type) {
        case AttentionType::None: break;
        case AttentionType::SE: se_ = SeParams<T>::make(channels, cfg.se_reduction, rng); break;
        case AttentionType::Spem: spem_ = SpemParams<T>::make(channels, cfg.reweight); break;
        }
    }

    const AttentionConfig& config() const { return cfg_; }
    bool is_spem() const { return spem_.has_value(); }
    const SpemParams<T>& spem() const { return *spem_; }
    SpemParams<T>& spem() { return *spem_; }
    const SeParams<T>& se() const { return *se_; }

    bool adaptive() const { return spem_ && cfg_.pooling.kind == PoolingConfig::Kind::Adaptive; }

    PoolingStrategy<T> strategy() const
    {
        switch (cfg_.pooling.kind) {
        case PoolingConfig::Kind::Gap: return GapPooling{};
        case PoolingConfig::Kind::Fixed: return FixedMixPooling{cfg_.pooling.max_weight};
        case PoolingConfig::Kind::Adaptive: break;
        }
        return adaptive_pooling(*spem_);
    }

    // Attention map for x, or an undefined tensor when there is no attention.
    Tensor<T> map(const Tensor<T>& x) const
    {
        if (se_) return se_forward(x, *se_);
        if (!spem_) return {};
        if (cfg_.force_identity) {
            Shape s = x.shape();
            s[s.size() - 1] = 1;
            s[s.size() - 2] = 1;
            return Tensor<T>(s, T(1));
        }
        return spem_forward(x, *spem_, cfg_.reweight, strategy());
    }

    Tensor<T> apply(const Tensor<T>& x) const
    {
        auto v = map(x);
        return v.defined() ? recalibrate(x, v) : x;
    }

    // Lambda currently used by the pooled embedding (NaN for GAP).
    double lambda() const
    {
        switch (cfg_.pooling.kind) {
        case PoolingConfig::Kind::Gap: return std::nan("");
        case PoolingConfig::Kind::Fixed: return cfg_.pooling.max_weight;
        case PoolingConfig::Kind::Adaptive: break;
        }
        return lambda_value(spem_->mix);
    }

    ParameterList<T> parameters(const std::string& prefix) const
    {
        if (se_) return se_->parameters(prefix);
        if (!spem_) return {};
        auto all = spem_->parameters(prefix);
        if (adaptive()) return all;
        // p0 / p1 only exist for the adaptive strategy.
        ParameterList<T> out;
        for (auto& p : all)
            if (p.decay != DecayPolicy::Penalty) out.push_back(std::move(p));
        return out;
    }

private:
    AttentionConfig cfg_;
    std::optional<SpemParams<T>> spem_;
    std::optional<SeParams<T>> se_;
};

template <typename T>
struct Bottleneck {
    BatchNorm<T> bn1, bn2, bn3;
    Tensor<T> conv1, conv2, conv3;  // 1x1, 3x3 (strided), 1x1
    Tensor<T> shortcut;             // 1x1 projection, undefined for identity
    std::size_t stride = 1;
    AttentionUnit<T> attention;

    static Bottleneck make(std::size_t in, std::size_t planes, std::size_t stride, const AttentionConfig& attn,
                           Rng& rng, Rng& attn_rng)
    {
        const std::size_t out = planes * kBottleneckExpansion;
        Bottleneck b;
        b.stride = stride;
        b.bn1 = BatchNorm<T>::make(in);
        b.conv1 = kaiming_conv<T>(planes, in, 1, rng);
        b.bn2 = BatchNorm<T>::make(planes);
        b.conv2 = kaiming_conv<T>(planes, planes, 3, rng);
        b.bn3 = BatchNorm<T>::make(planes);
        b.conv3 = kaiming_conv<T>(out, planes, 1, rng);
        if (stride != 1 || in != out) b.shortcut = kaiming_conv<T>(out, in, 1, rng);
        b.attention = AttentionUnit<T>(attn, out, attn_rng);
        return b;
    }

    std::size_t out_channels() const { return conv3.dim(0); }

    Tensor<T> forward(const Tensor<T>& x, Mode mode)
    {
        auto h = conv2d(relu(bn1(x, mode)), conv1);
        h = conv2d(relu(bn2(h, mode)), conv2, stride, 1);
        h = conv2d(relu(bn3(h, mode)), conv3);
        h = attention.apply(h);
        auto skip = shortcut.defined() ? conv2d(x, shortcut, stride, 0) : x;
        return h + skip;
    }

    ParameterList<T> backbone_parameters(const std::string& prefix) const
    {
        ParameterList<T> out{
            {prefix + "bn1.gamma", bn1.gamma, ParamGroup::Backbone, DecayPolicy::NoDecay},
            {prefix + "bn1.beta", bn1.beta, ParamGroup::Backbone, DecayPolicy::NoDecay},
            {prefix + "conv1", conv1},
            {prefix + "bn2.gamma", bn2.gamma, ParamGroup::Backbone, DecayPolicy::NoDecay},
            {prefix + "bn2.beta", bn2.beta, ParamGroup::Backbone, DecayPolicy::NoDecay},
            {prefix + "conv2", conv2},
            {prefix + "bn3.gamma", bn3.gamma, ParamGroup::Backbone, DecayPolicy::NoDecay},
            {prefix + "bn3.beta", bn3.beta, ParamGroup::Backbone, DecayPolicy::NoDecay},
            {prefix + "conv3", conv3},
        };
        if (shortcut.defined()) out.push_back({prefix + "shortcut", shortcut});
        return out;
    }
};

struct ParamCount {
    std::size_t total = 0;
    std::size_t backbone = 0;
    std::size_t attention = 0;
    std::vector<std::pair<std::string, std::size_t>> breakdown;  // by section, in network order
};

template <typename T>
class Network {
public:
    static Network build(const NetworkConfig& cfg, std::uint64_t seed = 0)
    {
        cfg.validate();
        Network net;
        net.cfg_ = cfg;
        Rng rng = Rng(seed).split(streams::kInit);
        Rng attn_rng = rng.split(0xa77e);
        net.stem_ = kaiming_conv<T>(cfg.stage_widths[0], kImageChannels, 3, rng);
        std::size_t in = cfg.stage_widths[0];
        for (std::size_t s = 0; s < 3; ++s) {
            for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
                const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
                net.blocks_.push_back(
                    Bottleneck<T>::make(in, cfg.stage_widths[s], stride, cfg.attention, rng, attn_rng));
                in = cfg.stage_widths[s] * kBottleneckExpansion;
            }
        }
        net.final_bn_ = BatchNorm<T>::make(in);
        net.fc_w_ = make_parameter<T>({cfg.num_classes, in}, T(0));
        net.fc_b_ = make_parameter<T>({cfg.num_classes}, T(0));
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (auto& v : net.fc_w_.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        for (auto& v : net.fc_b_.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        return net;
    }

    const NetworkConfig& config() const { return cfg_; }
    std::size_t num_blocks() const { return blocks_.size(); }
    Bottleneck<T>& block(std::size_t i) { return blocks_.at(i); }
    const Bottleneck<T>& block(std::size_t i) const { return blocks_.at(i); }

    // batch: N x 3 x 32 x 32 -> logits N x num_classes. Eval mode records no graph.
    Tensor<T> forward(const Tensor<T>& batch, Mode mode)
    {
        if (batch.rank() != 4 || batch.dim(1) != kImageChannels || batch.dim(2) != kImageSize ||
            batch.dim(3) != kImageSize)
            throw ShapeError("network input must be N x 3 x 32 x 32, got " + to_string(batch.shape()));
        std::optional<NoGradGuard> guard;
        if (mode == Mode::Eval) guard.emplace();
        auto h = conv2d(batch, stem_, 1, 1);
        for (auto& b : blocks_) h = b.forward(h, mode);
        h = relu(final_bn_(h, mode));
        auto pooled = global_avg_pool(h);
        auto flat = reshape(pooled, {batch.dim(0), pooled.numel() / batch.dim(0)});
        return linear(flat, fc_w_, &fc_b_);
    }

    ParameterList<T> parameters() const
    {
        ParameterList<T> out{{"stem", stem_}};
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string prefix = block_prefix(i);
            auto bb = blocks_[i].backbone_parameters(prefix);
            out.insert(out.end(), bb.begin(), bb.end());
            auto at = blocks_[i].attention.parameters(prefix + "attn.");
            out.insert(out.end(), at.begin(), at.end());
        }
        out.push_back({"final_bn.gamma", final_bn_.gamma, ParamGroup::Backbone, DecayPolicy::NoDecay});
        out.push_back({"final_bn.beta", final_bn_.beta, ParamGroup::Backbone, DecayPolicy::NoDecay});
        out.push_back({"fc.weight", fc_w_});
        out.push_back({"fc.bias", fc_b_});
        return out;
    }

    // Running statistics, keyed like parameters.
    std::vector<std::pair<std::string, std::vector<T>*>> buffers()
    {
        std::vector<std::pair<std::string, std::vector<T>*>> out;
        auto add = [&](const std::string& name, BatchNorm<T>& bn) {
            out.emplace_back(name + ".running_mean", &bn.state.running_mean);
            out.emplace_back(name + ".running_var", &bn.state.running_var);
        };
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string prefix = block_prefix(i);
            add(prefix + "bn1", blocks_[i].bn1);
            add(prefix + "bn2", blocks_[i].bn2);
            add(prefix + "bn3", blocks_[i].bn3);
        }
        add("final_bn", final_bn_);
        return out;
    }

    // Adaptive mix coefficients in network order (the ones the loss penalises).
    std::vector<MixCoefficient<T>> mix_coefficients() const
    {
        std::vector<MixCoefficient<T>> out;
        for (const auto& b : blocks_)
            if (b.attention.adaptive()) out.push_back(b.attention.spem().mix);
        return out;
    }

    // One entry per SPEM module in network order.
    std::vector<double> lambdas() const
    {
        std::vector<double> out;
        for (const auto& b : blocks_)
            if (b.attention.is_spem()) out.push_back(b.attention.lambda());
        return out;
    }

    ParamCount param_count() const
    {
        ParamCount c;
        auto add = [&](const std::string& section, std::size_t n, ParamGroup g) {
            if (n == 0) return;
            auto it = std::find_if(c.breakdown.begin(), c.breakdown.end(),
                                   [&](const auto& e) { return e.first == section; });
            if (it != c.breakdown.end())
                it->second += n;
            else
                c.breakdown.emplace_back(section, n);
            (g == ParamGroup::Attention ? c.attention : c.backbone) += n;
            c.total += n;
        };
        for (const auto& p : parameters()) {
            add(section_of(p.name, p.group), p.tensor.numel(), p.group);
        }
        return c;
    }

private:
    static std::string block_prefix(std::size_t i) { return "block" + std::to_string(i) + "."; }

    std::string section_of(const std::string& name, ParamGroup g) const
    {
        if (name.rfind("block", 0) != 0) return name.rfind("stem", 0) == 0 ? "stem" : "head";
        const std::size_t idx = std::stoul(name.substr(5));
        const std::string stage = "stage" + std::to_string(idx / cfg_.blocks_per_stage + 1);
        return g == ParamGroup::Attention ? stage + ".attention" : stage;
    }

    NetworkConfig cfg_;
    Tensor<T> stem_;
    std::vector<Bottleneck<T>> blocks_;
    BatchNorm<T> final_bn_;
    Tensor<T> fc_w_, fc_b_;
};

}  // namespace spem
