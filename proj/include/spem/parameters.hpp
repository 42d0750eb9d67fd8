#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "spem/tensor.hpp"

namespace spem {

enum class ParamGroup { Backbone, Attention };

// Per-tensor handling by the optimiser.
enum class DecayPolicy {
    Decay,    // generic weight decay applies
    NoDecay,  // BN affine terms
    Penalty,  // mix coefficients; regularised by the loss penalty instead
};

template <typename T>
struct NamedParameter {
    std::string name;
    Tensor<T> tensor;
    ParamGroup group = ParamGroup::Backbone;
    DecayPolicy decay = DecayPolicy::Decay;
};

template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

template <typename T>
Tensor<T> make_parameter(Shape shape, T fill)
{
    return Tensor<T>(std::move(shape), fill, true);
}

template <typename T>
std::size_t count_scalars(const ParameterList<T>& params)
{
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

}  // namespace spem
