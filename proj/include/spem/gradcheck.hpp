#pragma once

// Central finite-difference comparison of analytic gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "spem/tensor.hpp"

namespace spem {

inline constexpr double kGradCheckStep = 1e-4;
inline constexpr double kGradCheckTolerance = 1e-4;
// Denominator floor so that gradients that are zero on both sides compare as equal.
inline constexpr double kGradCheckFloor = 1e-6;

struct GradGroupError {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t nonsmooth = 0;  // stencils that straddle a kink; excluded from max_rel_error
};

struct GradCheckReport {
    std::vector<GradGroupError> groups;

    double worst() const
    {
        double w = 0.0;
        for (const auto& g : groups) w = std::max(w, g.max_rel_error);
        return w;
    }

    std::size_t checked() const
    {
        std::size_t n = 0;
        for (const auto& g : groups) n += g.checked;
        return n;
    }

    std::size_t nonsmooth() const
    {
        std::size_t n = 0;
        for (const auto& g : groups) n += g.nonsmooth;
        return n;
    }

    bool passed(double tol = kGradCheckTolerance) const { return worst() < tol; }
};

inline double relative_error(double analytic, double numeric)
{
    const double scale = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
    return std::abs(analytic - numeric) / scale;
}

using NamedTensor = std::pair<std::string, Tensor<double>>;

// `loss` rebuilds the scalar from the current values of the group tensors.
//
// ReLU and max/min pooling are piecewise smooth. When the +-h stencil around
// an element straddles a kink the central difference is meaningless; such
// elements are recognised by the central difference at h disagreeing with the
// one at h/2 (on a smooth piece they agree to O(h^2)) and are counted in
// `nonsmooth` instead of `max_rel_error`.
inline GradCheckReport check_gradients(const std::function<Tensor<double>()>& loss, std::vector<NamedTensor> groups,
                                       double h = kGradCheckStep)
{
    for (auto& [name, t] : groups) t.zero_grad();
    if (auto l = loss(); l.requires_grad()) backward(l);

    GradCheckReport report;
    for (auto& [name, t] : groups) {
        const auto analytic = t.grad_vector();
        GradGroupError err{name, 0.0, 0};
        auto values = t.data();
        auto central = [&](std::size_t i, double step) {
            NoGradGuard guard;
            const double saved = values[i];
            values[i] = saved + step;
            const double plus = loss().item();
            values[i] = saved - step;
            const double minus = loss().item();
            values[i] = saved;
            return (plus - minus) / (2.0 * step);
        };
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double numeric = central(i, h);
            const double e = relative_error(analytic[i], numeric);
            ++err.checked;
            if (e >= kGradCheckTolerance) {
                const double half = central(i, h / 2.0);
                if (relative_error(numeric, half) > 0.1 * kGradCheckTolerance) {
                    ++err.nonsmooth;
                    continue;
                }
            }
            err.max_rel_error = std::max(err.max_rel_error, e);
        }
        report.groups.push_back(err);
    }
    return report;
}

}  // namespace spem
