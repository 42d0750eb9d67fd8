#pragma once

// Element-wise arithmetic with numpy-style broadcasting, reductions and the
// activation functions used by the attention modules.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "spem/tensor.hpp"

namespace spem {

enum class BinaryOp { Add, Sub, Mul, Div };

// Right-aligned broadcast; a size-1 axis stretches.
inline Shape broadcast_shape(const Shape& a, const Shape& b)
{
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcast-compatible");
        out[i] = std::max(da, db);
    }
    return out;
}

namespace detail {

// Strides of `shape` laid against `out` with zeros on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out)
{
    const std::size_t offset = out.size() - shape.size();
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t stride = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
        strides[i + offset] = shape[i] == 1 ? 0 : stride;
        stride *= shape[i];
    }
    return strides;
}

// Calls f(out_index, a_index, b_index) for every output element in row-major order.
template <typename F>
void broadcast_for_each(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb, F&& f)
{
    const std::size_t rank = out.size();
    const std::size_t inner = out[rank - 1];
    const std::size_t ia = sa[rank - 1];
    const std::size_t ib = sb[rank - 1];
    std::vector<std::size_t> counter(rank, 0);
    std::size_t base_a = 0;
    std::size_t base_b = 0;
    const std::size_t total = shape_numel(out);
    for (std::size_t o = 0; o < total; o += inner) {
        for (std::size_t k = 0; k < inner; ++k) f(o + k, base_a + k * ia, base_b + k * ib);
        for (std::size_t d = rank - 1; d-- > 0;) {
            ++counter[d];
            base_a += sa[d];
            base_b += sb[d];
            if (counter[d] < out[d]) break;
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

template <typename T>
T apply_binary(BinaryOp op, T a, T b)
{
    switch (op) {
    case BinaryOp::Add: return a + b;
    case BinaryOp::Sub: return a - b;
    case BinaryOp::Mul: return a * b;
    case BinaryOp::Div: return a / b;
    }
    return T(0);
}

}  // namespace detail

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b)
{
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor<T> out(out_shape);
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();

    const bool same = a.shape() == b.shape();
    const auto sa = detail::broadcast_strides(a.shape(), out_shape);
    const auto sb = detail::broadcast_strides(b.shape(), out_shape);
    if (same) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = detail::apply_binary(op, x[i], y[i]);
    } else {
        detail::broadcast_for_each(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
            o[i] = detail::apply_binary(op, x[ia], y[ib]);
        });
    }

    if (needs_grad(a, b)) {
        auto an = a.node();
        auto bn = b.node();
        record<T>(out, {a, b}, [op, an, bn, out_shape, sa, sb, same](detail::Node<T>& self) {
            auto ga = detail::grad_target(an);
            auto gb = detail::grad_target(bn);
            const auto& g = self.grad;
            const auto& x = an->data;
            const auto& y = bn->data;
            auto step = [&](std::size_t i, std::size_t ia, std::size_t ib) {
                switch (op) {
                case BinaryOp::Add:
                    if (!ga.empty()) ga[ia] += g[i];
                    if (!gb.empty()) gb[ib] += g[i];
                    break;
                case BinaryOp::Sub:
                    if (!ga.empty()) ga[ia] += g[i];
                    if (!gb.empty()) gb[ib] -= g[i];
                    break;
                case BinaryOp::Mul:
                    if (!ga.empty()) ga[ia] += g[i] * y[ib];
                    if (!gb.empty()) gb[ib] += g[i] * x[ia];
                    break;
                case BinaryOp::Div:
                    if (!ga.empty()) ga[ia] += g[i] / y[ib];
                    if (!gb.empty()) gb[ib] -= g[i] * x[ia] / (y[ib] * y[ib]);
                    break;
                }
            };
            if (same) {
                for (std::size_t i = 0; i < g.size(); ++i) step(i, i, i);
            } else {
                detail::broadcast_for_each(out_shape, sa, sb, step);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Add, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Sub, a, b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Mul, a, b); }
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Div, a, b); }

template <typename T>
Tensor<T> add(const Tensor<T>& a, T s) { return elementwise(BinaryOp::Add, a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, T s) { return elementwise(BinaryOp::Sub, a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, T s) { return elementwise(BinaryOp::Mul, a, Tensor<T>::scalar(s)); }

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

namespace detail {

// y = f(x) with dy/dx expressed through (x, y).
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& a, Fwd fwd, Deriv deriv)
{
    Tensor<T> out(a.shape());
    auto x = a.data();
    auto y = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
    if (needs_grad(a)) {
        auto an = a.node();
        record<T>(out, {a}, [an, deriv](Node<T>& self) {
            auto ga = grad_target(an);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * deriv(an->data[i], self.data[i]);
        });
    }
    return out;
}

}  // namespace detail

// Numerically stable for large |x|: never forms exp of a positive argument.
template <typename T>
T sigmoid_value(T x)
{
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a)
{
    return detail::unary(a, [](T x) { return sigmoid_value(x); }, [](T, T s) { return s * (T(1) - s); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a)
{
    return detail::unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a)
{
    return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a)
{
    return detail::unary(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a)
{
    T total = T(0);
    for (auto v : a.data()) total += v;
    Tensor<T> out = Tensor<T>::scalar(total);
    if (needs_grad(a)) {
        auto an = a.node();
        record<T>(out, {a}, [an](detail::Node<T>& self) {
            auto ga = detail::grad_target(an);
            for (auto& g : ga) g += self.grad[0];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a)
{
    return mul(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape)
{
    if (shape_numel(shape) != a.numel())
        throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
    Tensor<T> out(std::move(shape), a.to_vector());
    if (needs_grad(a)) {
        auto an = a.node();
        record<T>(out, {a}, [an](detail::Node<T>& self) {
            auto ga = detail::grad_target(an);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> ones_like(const Tensor<T>& a) { return Tensor<T>(a.shape(), T(1)); }

}  // namespace spem
