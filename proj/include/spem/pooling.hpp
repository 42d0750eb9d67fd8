#pragma once

// Global spatial pooling and the self-adaptive max/min mix.

#include <cmath>
#include <cstddef>
#include <string>
#include <variant>

#include "spem/ops.hpp"

namespace spem {

namespace detail {

struct PlaneLayout {
    std::size_t planes;  // N * C
    std::size_t area;    // H * W
    Shape out_shape;
};

template <typename T>
PlaneLayout plane_layout(const Tensor<T>& x, const char* op)
{
    if (x.rank() != 3 && x.rank() != 4)
        throw ShapeError(std::string(op) + ": expected C x H x W or N x C x H x W, got " + to_string(x.shape()));
    const std::size_t r = x.rank();
    const std::size_t h = x.dim(r - 2), w = x.dim(r - 1);
    if (h == 0 || w == 0) throw ArgumentError(std::string(op) + ": empty spatial plane");
    Shape out = x.shape();
    out[r - 2] = 1;
    out[r - 1] = 1;
    return {x.numel() / (h * w), h * w, out};
}

// First index (row-major) holding the extremum of each plane.
template <typename T, typename Better>
Tensor<T> extremal_pool(const Tensor<T>& x, const char* op, Better better)
{
    const auto layout = plane_layout(x, op);
    Tensor<T> out(layout.out_shape);
    std::vector<std::size_t> arg(layout.planes);
    auto xd = x.data();
    for (std::size_t p = 0; p < layout.planes; ++p) {
        const T* plane = xd.data() + p * layout.area;
        std::size_t best = 0;
        for (std::size_t i = 1; i < layout.area; ++i)
            if (better(plane[i], plane[best])) best = i;
        arg[p] = p * layout.area + best;
        out[p] = plane[best];
    }
    if (needs_grad(x)) {
        auto xn = x.node();
        record<T>(out, {x}, [xn, arg = std::move(arg)](Node<T>& self) {
            auto g = grad_target(xn);
            for (std::size_t p = 0; p < arg.size(); ++p) g[arg[p]] += self.grad[p];
        });
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x)
{
    return detail::extremal_pool(x, "global_max_pool", [](T a, T b) { return a > b; });
}

template <typename T>
Tensor<T> global_min_pool(const Tensor<T>& x)
{
    return detail::extremal_pool(x, "global_min_pool", [](T a, T b) { return a < b; });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x)
{
    const auto layout = detail::plane_layout(x, "global_avg_pool");
    Tensor<T> out(layout.out_shape);
    auto xd = x.data();
    const T inv = T(1) / static_cast<T>(layout.area);
    for (std::size_t p = 0; p < layout.planes; ++p) {
        T s = T(0);
        const T* plane = xd.data() + p * layout.area;
        for (std::size_t i = 0; i < layout.area; ++i) s += plane[i];
        out[p] = s / static_cast<T>(layout.area);
    }
    if (needs_grad(x)) {
        auto xn = x.node();
        const std::size_t area = layout.area;
        record<T>(out, {x}, [xn, area, inv](detail::Node<T>& self) {
            auto g = detail::grad_target(xn);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i / area] * inv;
        });
    }
    return out;
}

// Trainable pair defining the mixing weight lambda = p0^2 / (p0^2 + p1^2).
template <typename T>
struct MixCoefficient {
    Tensor<T> p0;
    Tensor<T> p1;

    static MixCoefficient make(T p0_init = T(0.5), T p1_init = T(0.5))
    {
        return {Tensor<T>::scalar(p0_init, true), Tensor<T>::scalar(p1_init, true)};
    }
};

// Both weights of the mix, each computed by its own quotient.
template <typename T>
struct MixWeights {
    Tensor<T> lambda;      // p0^2 / (p0^2 + p1^2)
    Tensor<T> complement;  // p1^2 / (p0^2 + p1^2)
};

template <typename T>
MixWeights<T> mix_weights(const MixCoefficient<T>& m)
{
    const T a = m.p0.item(), b = m.p1.item();
    if (a * a + b * b == T(0))
        throw DegenerateCoefficientError("mix coefficient p0 = p1 = 0 leaves lambda undefined");
    auto s0 = square(m.p0);
    auto s1 = square(m.p1);
    auto denom = s0 + s1;
    return {s0 / denom, s1 / denom};
}

template <typename T>
Tensor<T> mix_lambda(const MixCoefficient<T>& m)
{
    return mix_weights(m).lambda;
}

// Plain value of lambda for logging.
template <typename T>
double lambda_value(const MixCoefficient<T>& m)
{
    const double a = m.p0.item(), b = m.p1.item();
    return a * a / (a * a + b * b);
}

struct GapPooling {};

struct FixedMixPooling {
    double max_weight;  // weight of the max branch, in [0, 1]
};

template <typename T>
struct AdaptiveMixPooling {
    MixCoefficient<T> mix;
};

template <typename T>
using PoolingStrategy = std::variant<GapPooling, FixedMixPooling, AdaptiveMixPooling<T>>;

inline FixedMixPooling fixed_mix(double c)
{
    if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("fixed mix weight " + std::to_string(c) + " outside [0, 1]");
    return FixedMixPooling{c};
}

// u from already pooled statistics; `x` is only read for GAP.
template <typename T>
Tensor<T> combine_pooled(const Tensor<T>& x, const Tensor<T>& f_max, const Tensor<T>& f_min,
                         const PoolingStrategy<T>& strategy)
{
    if (std::holds_alternative<GapPooling>(strategy)) return global_avg_pool(x);
    if (const auto* fixed = std::get_if<FixedMixPooling>(&strategy)) {
        const T c = static_cast<T>(fixed->max_weight);
        return mul(f_max, c) + mul(f_min, T(1) - c);
    }
    const auto& adaptive = std::get<AdaptiveMixPooling<T>>(strategy);
    auto w = mix_weights(adaptive.mix);
    return w.lambda * f_max + w.complement * f_min;
}

template <typename T>
Tensor<T> mix_pool(const Tensor<T>& x, const PoolingStrategy<T>& strategy)
{
    if (std::holds_alternative<GapPooling>(strategy)) return global_avg_pool(x);
    return combine_pooled(x, global_max_pool(x), global_min_pool(x), strategy);
}

}  // namespace spem
