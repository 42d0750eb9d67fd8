#pragma once

// SPEM channel attention: pooled embedding -> excitation gate, reweighting
// gate from the max/min statistics, final map = excitation * reweight.
// The SE block is kept alongside as the GAP-based baseline.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <variant>

#include "spem/layers.hpp"
#include "spem/parameters.hpp"
#include "spem/pooling.hpp"
#include "spem/rng.hpp"

namespace spem {

enum class ReweightVariant {
    SharedAddSigmoid,    // sigma(g(f_min) + g(f_max)) with one shared g
    UnsharedAddSigmoid,  // (a) separate g per branch
    SharedAddNoSigmoid,  // (b) no outer sigmoid
    SharedMulSigmoid,    // (c) sigma(g(f_max) * g(f_min))
    SigmoidThenAdd,      // (d) sigma(g(f_max)) + sigma(g(f_min))
    SigmoidThenMul,      // (e) sigma(g(f_max)) * sigma(g(f_min))
    MaxOnly,             // (f)
    MinOnly,             // (g)
    NoReweight,          // all-ones gate
};

inline constexpr std::array<ReweightVariant, 9> kAllReweightVariants = {
    ReweightVariant::SharedAddSigmoid, ReweightVariant::UnsharedAddSigmoid, ReweightVariant::SharedAddNoSigmoid,
    ReweightVariant::SharedMulSigmoid, ReweightVariant::SigmoidThenAdd,     ReweightVariant::SigmoidThenMul,
    ReweightVariant::MaxOnly,          ReweightVariant::MinOnly,            ReweightVariant::NoReweight,
};

inline std::string_view reweight_name(ReweightVariant v)
{
    switch (v) {
    case ReweightVariant::SharedAddSigmoid: return "ours";
    case ReweightVariant::UnsharedAddSigmoid: return "a";
    case ReweightVariant::SharedAddNoSigmoid: return "b";
    case ReweightVariant::SharedMulSigmoid: return "c";
    case ReweightVariant::SigmoidThenAdd: return "d";
    case ReweightVariant::SigmoidThenMul: return "e";
    case ReweightVariant::MaxOnly: return "f";
    case ReweightVariant::MinOnly: return "g";
    case ReweightVariant::NoReweight: return "none";
    }
    return "?";
}

inline std::optional<ReweightVariant> parse_reweight(std::string_view name)
{
    for (auto v : kAllReweightVariants)
        if (reweight_name(v) == name) return v;
    return std::nullopt;
}

// Whether every entry of the variant's gate is a single sigmoid output.
inline bool reweight_is_unit_interval(ReweightVariant v)
{
    return v != ReweightVariant::SharedAddNoSigmoid && v != ReweightVariant::SigmoidThenAdd &&
           v != ReweightVariant::NoReweight;
}

template <typename T>
struct SpemParams {
    MixCoefficient<T> mix;
    Tensor<T> gamma_exc, beta_exc;  // C x 1 x 1
    Tensor<T> gamma_rew, beta_rew;  // shared g_rew, or the max branch when unshared
    Tensor<T> gamma_rew_min, beta_rew_min;  // defined only for the unshared variant

    static SpemParams make(std::size_t channels, ReweightVariant variant = ReweightVariant::SharedAddSigmoid)
    {
        const Shape s{channels, 1, 1};
        SpemParams p;
        p.mix = MixCoefficient<T>::make();
        p.gamma_exc = make_parameter<T>(s, T(0));
        p.beta_exc = make_parameter<T>(s, T(-1));
        p.gamma_rew = make_parameter<T>(s, T(0));
        p.beta_rew = make_parameter<T>(s, T(-1));
        if (variant == ReweightVariant::UnsharedAddSigmoid) {
            p.gamma_rew_min = make_parameter<T>(s, T(0));
            p.beta_rew_min = make_parameter<T>(s, T(-1));
        }
        return p;
    }

    std::size_t channels() const { return gamma_exc.numel(); }

    ParameterList<T> parameters(const std::string& prefix) const
    {
        ParameterList<T> out{
            {prefix + "p0", mix.p0, ParamGroup::Attention, DecayPolicy::Penalty},
            {prefix + "p1", mix.p1, ParamGroup::Attention, DecayPolicy::Penalty},
            {prefix + "gamma_exc", gamma_exc, ParamGroup::Attention, DecayPolicy::Decay},
            {prefix + "beta_exc", beta_exc, ParamGroup::Attention, DecayPolicy::Decay},
            {prefix + "gamma_rew", gamma_rew, ParamGroup::Attention, DecayPolicy::Decay},
            {prefix + "beta_rew", beta_rew, ParamGroup::Attention, DecayPolicy::Decay},
        };
        if (gamma_rew_min.defined()) {
            out.push_back({prefix + "gamma_rew_min", gamma_rew_min, ParamGroup::Attention, DecayPolicy::Decay});
            out.push_back({prefix + "beta_rew_min", beta_rew_min, ParamGroup::Attention, DecayPolicy::Decay});
        }
        return out;
    }
};

namespace detail {

template <typename T>
std::size_t channel_count(const Tensor<T>& t, const char* op)
{
    if (t.rank() < 3) throw ShapeError(std::string(op) + ": expected (N x) C x H x W layout, got " + to_string(t.shape()));
    return t.dim(t.rank() - 3);
}

template <typename T>
void require_channels(const Tensor<T>& param, std::size_t channels, const char* op)
{
    if (!param.defined() || param.numel() != channels)
        throw ShapeError(std::string(op) + ": per-channel parameter of shape " +
                         (param.defined() ? to_string(param.shape()) : std::string("<undefined>")) +
                         " does not match " + std::to_string(channels) + " channels");
}

// gamma * f + beta
template <typename T>
Tensor<T> affine(const Tensor<T>& f, const Tensor<T>& gamma, const Tensor<T>& beta)
{
    return gamma * f + beta;
}

}  // namespace detail

// v_exc = sigmoid(gamma_exc * u + beta_exc), a single sigmoid.
template <typename T>
Tensor<T> excitation(const Tensor<T>& u, const Tensor<T>& gamma_exc, const Tensor<T>& beta_exc)
{
    const std::size_t c = detail::channel_count(u, "excitation");
    detail::require_channels(gamma_exc, c, "excitation");
    detail::require_channels(beta_exc, c, "excitation");
    return sigmoid(detail::affine(u, gamma_exc, beta_exc));
}

template <typename T>
Tensor<T> reweight(const Tensor<T>& f_max, const Tensor<T>& f_min, const SpemParams<T>& p, ReweightVariant variant)
{
    if (f_max.shape() != f_min.shape())
        throw ShapeError("reweight: f_max " + to_string(f_max.shape()) + " and f_min " + to_string(f_min.shape()) +
                         " differ");
    const std::size_t c = detail::channel_count(f_max, "reweight");
    if (variant == ReweightVariant::NoReweight) return ones_like(f_max);
    detail::require_channels(p.gamma_rew, c, "reweight");
    detail::require_channels(p.beta_rew, c, "reweight");

    auto g = [&](const Tensor<T>& f) { return detail::affine(f, p.gamma_rew, p.beta_rew); };
    switch (variant) {
    case ReweightVariant::SharedAddSigmoid:
        return sigmoid(f_min * p.gamma_rew + f_max * p.gamma_rew + p.beta_rew);
    case ReweightVariant::UnsharedAddSigmoid:
        detail::require_channels(p.gamma_rew_min, c, "reweight");
        detail::require_channels(p.beta_rew_min, c, "reweight");
        return sigmoid(detail::affine(f_min, p.gamma_rew_min, p.beta_rew_min) + g(f_max));
    case ReweightVariant::SharedAddNoSigmoid:
        return f_min * p.gamma_rew + f_max * p.gamma_rew + p.beta_rew;
    case ReweightVariant::SharedMulSigmoid:
        return sigmoid(g(f_max) * g(f_min));
    case ReweightVariant::SigmoidThenAdd:
        return sigmoid(g(f_max)) + sigmoid(g(f_min));
    case ReweightVariant::SigmoidThenMul:
        return sigmoid(g(f_max)) * sigmoid(g(f_min));
    case ReweightVariant::MaxOnly:
        return sigmoid(g(f_max));
    case ReweightVariant::MinOnly:
        return sigmoid(g(f_min));
    case ReweightVariant::NoReweight:
        break;
    }
    return ones_like(f_max);
}

// Adaptive strategy bound to the module's own mix coefficient.
template <typename T>
PoolingStrategy<T> adaptive_pooling(const SpemParams<T>& p)
{
    return AdaptiveMixPooling<T>{p.mix};
}

// Attention map v = v_exc * v_rew. f_max and f_min are computed once and feed
// both the pooled embedding and the reweighting gate.
template <typename T>
Tensor<T> spem_forward(const Tensor<T>& x, const SpemParams<T>& params, ReweightVariant variant,
                       const PoolingStrategy<T>& strategy)
{
    auto f_max = global_max_pool(x);
    auto f_min = global_min_pool(x);
    auto u = combine_pooled(x, f_max, f_min, strategy);
    auto v_exc = excitation(u, params.gamma_exc, params.beta_exc);
    auto v_rew = reweight(f_max, f_min, params, variant);
    return v_exc * v_rew;
}

// x'[c, h, w] = x[c, h, w] * v[c]
template <typename T>
Tensor<T> recalibrate(const Tensor<T>& x, const Tensor<T>& v)
{
    const std::size_t c = detail::channel_count(x, "recalibrate");
    if (detail::channel_count(v, "recalibrate") != c || v.dim(v.rank() - 1) != 1 || v.dim(v.rank() - 2) != 1 ||
        (v.rank() == 4 && x.rank() == 4 && v.dim(0) != x.dim(0)))
        throw ShapeError("recalibrate: attention map " + to_string(v.shape()) + " does not match features " +
                         to_string(x.shape()));
    return x * v;
}

template <typename T>
struct SeParams {
    Tensor<T> w1, b1;  // hidden x C, hidden
    Tensor<T> w2, b2;  // C x hidden, C
    std::size_t reduction = 16;

    static std::size_t hidden_width(std::size_t channels, std::size_t reduction)
    {
        return std::max<std::size_t>(1, channels / reduction);
    }

    static SeParams make(std::size_t channels, std::size_t reduction, Rng& rng)
    {
        if (reduction == 0) throw ConfigError("SE reduction must be >= 1");
        const std::size_t hidden = hidden_width(channels, reduction);
        SeParams p;
        p.reduction = reduction;
        p.w1 = make_parameter<T>({hidden, channels}, T(0));
        p.b1 = make_parameter<T>({hidden}, T(0));
        p.w2 = make_parameter<T>({channels, hidden}, T(0));
        p.b2 = make_parameter<T>({channels}, T(0));
        // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) as for a default linear layer.
        const double a1 = 1.0 / std::sqrt(static_cast<double>(channels));
        const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden));
        for (auto& w : p.w1.data()) w = static_cast<T>(rng.uniform(-a1, a1));
        for (auto& b : p.b1.data()) b = static_cast<T>(rng.uniform(-a1, a1));
        for (auto& w : p.w2.data()) w = static_cast<T>(rng.uniform(-a2, a2));
        for (auto& b : p.b2.data()) b = static_cast<T>(rng.uniform(-a2, a2));
        return p;
    }

    ParameterList<T> parameters(const std::string& prefix) const
    {
        return {
            {prefix + "w1", w1, ParamGroup::Attention, DecayPolicy::Decay},
            {prefix + "b1", b1, ParamGroup::Attention, DecayPolicy::Decay},
            {prefix + "w2", w2, ParamGroup::Attention, DecayPolicy::Decay},
            {prefix + "b2", b2, ParamGroup::Attention, DecayPolicy::Decay},
        };
    }
};

// sigmoid(W2 relu(W1 GAP(x) + b1) + b2), shaped like the pooled map.
template <typename T>
Tensor<T> se_forward(const Tensor<T>& x, const SeParams<T>& p)
{
    const std::size_t c = detail::channel_count(x, "se_forward");
    if (p.w1.rank() != 2 || p.w1.dim(1) != c || p.w2.dim(0) != c)
        throw ShapeError("se_forward: weights " + to_string(p.w1.shape()) + "/" + to_string(p.w2.shape()) +
                         " do not match " + std::to_string(c) + " channels");
    auto pooled = global_avg_pool(x);
    const Shape map_shape = pooled.shape();
    const std::size_t n = pooled.numel() / c;
    auto z = reshape(pooled, {n, c});
    auto h = relu(linear(z, p.w1, &p.b1));
    auto s = sigmoid(linear(h, p.w2, &p.b2));
    return reshape(s, map_shape);
}

}  // namespace spem
