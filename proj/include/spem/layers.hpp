#pragma once

// Dense layers, convolution, batch normalisation and the classification loss.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "spem/ops.hpp"

namespace spem {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
    std::size_t channels, height, width;
    std::size_t kernel_h, kernel_w;
    std::size_t stride, pad;
    std::size_t out_h, out_w;

    bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && pad == 0; }
    std::size_t col_rows() const { return channels * kernel_h * kernel_w; }
    std::size_t col_cols() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols)
{
    const std::size_t plane = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * plane;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    T* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= static_cast<long>(g.height)) {
                        std::fill(dst, dst + g.out_w, T(0));
                        continue;
                    }
                    const T* src = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? T(0) : src[ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image)
{
    const std::size_t plane = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * plane;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
                    T* dst = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    const T* src = row + oy * g.out_w;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix >= 0 && ix < static_cast<long>(g.width)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x: N x in, weight: out x in, bias: out (optional). Returns N x out.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias = nullptr)
{
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1))
        throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
    const std::size_t n = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
    if (bias && (bias->numel() != out_f))
        throw ShapeError("linear: bias " + to_string(bias->shape()) + " does not match " + std::to_string(out_f) +
                         " outputs");
    Tensor<T> out(Shape{n, out_f});
    detail::ConstMatMap<T> X(x.data().data(), n, in);
    detail::ConstMatMap<T> W(weight.data().data(), out_f, in);
    detail::MatMap<T> Y(out.data().data(), n, out_f);
    Y.noalias() = X * W.transpose();
    if (bias) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out_f; ++j) Y(i, j) += (*bias)[j];
    }
    const bool grad = bias ? needs_grad(x, weight, *bias) : needs_grad(x, weight);
    if (grad) {
        auto xn = x.node();
        auto wn = weight.node();
        auto bn = bias ? bias->node() : nullptr;
        std::vector<Tensor<T>> inputs{x, weight};
        if (bias) inputs.push_back(*bias);
        record<T>(out, inputs, [xn, wn, bn, n, in, out_f](detail::Node<T>& self) {
            detail::ConstMatMap<T> G(self.grad.data(), n, out_f);
            if (auto gx = detail::grad_target(xn); !gx.empty()) {
                detail::ConstMatMap<T> W(wn->data.data(), out_f, in);
                detail::MatMap<T>(gx.data(), n, in).noalias() += G * W;
            }
            if (auto gw = detail::grad_target(wn); !gw.empty()) {
                detail::ConstMatMap<T> X(xn->data.data(), n, in);
                detail::MatMap<T>(gw.data(), out_f, in).noalias() += G.transpose() * X;
            }
            if (bn) {
                if (auto gb = detail::grad_target(bn); !gb.empty())
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < out_f; ++j) gb[j] += G(i, j);
            }
        });
    }
    return out;
}

// Cross-correlation. x: N x C x H x W, weight: K x C x kh x kw. No bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride = 1, std::size_t pad = 0)
{
    if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1))
        throw ShapeError("conv2d: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
    if (stride == 0) throw ArgumentError("conv2d: stride must be >= 1");
    detail::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), stride, pad, 0, 0};
    if (g.height + 2 * pad < g.kernel_h || g.width + 2 * pad < g.kernel_w)
        throw ShapeError("conv2d: kernel " + to_string(weight.shape()) + " larger than padded input " +
                         to_string(x.shape()));
    g.out_h = (g.height + 2 * pad - g.kernel_h) / stride + 1;
    g.out_w = (g.width + 2 * pad - g.kernel_w) / stride + 1;
    const std::size_t n = x.dim(0), k = weight.dim(0);
    const std::size_t in_plane = g.channels * g.height * g.width;
    const std::size_t out_plane = k * g.col_cols();

    Tensor<T> out(Shape{n, k, g.out_h, g.out_w});
    detail::ConstMatMap<T> W(weight.data().data(), k, g.col_rows());
    std::vector<T> cols(g.pointwise() ? 0 : g.col_rows() * g.col_cols());
    for (std::size_t b = 0; b < n; ++b) {
        const T* src = x.data().data() + b * in_plane;
        if (!g.pointwise()) {
            detail::im2col(src, g, cols.data());
            src = cols.data();
        }
        detail::ConstMatMap<T> C(src, g.col_rows(), g.col_cols());
        detail::MatMap<T>(out.data().data() + b * out_plane, k, g.col_cols()).noalias() = W * C;
    }

    if (needs_grad(x, weight)) {
        auto xn = x.node();
        auto wn = weight.node();
        record<T>(out, {x, weight}, [xn, wn, g, n, k, in_plane, out_plane](detail::Node<T>& self) {
            auto gx = detail::grad_target(xn);
            auto gw = detail::grad_target(wn);
            detail::ConstMatMap<T> W(wn->data.data(), k, g.col_rows());
            std::vector<T> cols(g.pointwise() ? 0 : g.col_rows() * g.col_cols());
            std::vector<T> dcols(cols.size());
            for (std::size_t b = 0; b < n; ++b) {
                detail::ConstMatMap<T> G(self.grad.data() + b * out_plane, k, g.col_cols());
                if (!gw.empty()) {
                    const T* src = xn->data.data() + b * in_plane;
                    if (!g.pointwise()) {
                        detail::im2col(src, g, cols.data());
                        src = cols.data();
                    }
                    detail::ConstMatMap<T> C(src, g.col_rows(), g.col_cols());
                    detail::MatMap<T>(gw.data(), k, g.col_rows()).noalias() += G * C.transpose();
                }
                if (!gx.empty()) {
                    if (g.pointwise()) {
                        detail::MatMap<T>(gx.data() + b * in_plane, g.col_rows(), g.col_cols()).noalias() +=
                            W.transpose() * G;
                    } else {
                        detail::MatMap<T>(dcols.data(), g.col_rows(), g.col_cols()).noalias() = W.transpose() * G;
                        detail::col2im_add(dcols.data(), g, gx.data() + b * in_plane);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;

    explicit BatchNormState(std::size_t channels = 0) : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

enum class Mode { Train, Eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

// x: N x C (x H x W). Train mode normalises with batch statistics and folds
// them into `state` as running = 0.9 * running + 0.1 * batch (unbiased variance).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                     Mode mode)
{
    if (x.rank() < 2) throw ShapeError("batch_norm: input needs N x C layout, got " + to_string(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1);
    if (n == 0) throw ArgumentError("batch_norm: zero batch size");
    if (gamma.numel() != c || beta.numel() != c || state.running_mean.size() != c)
        throw ShapeError("batch_norm: parameters do not match " + std::to_string(c) + " channels");
    const std::size_t spatial = x.numel() / (n * c);
    const std::size_t count = n * spatial;
    const T eps = static_cast<T>(kBatchNormEps);

    std::vector<T> mean(c, T(0)), invstd(c, T(0));
    auto xd = x.data();
    if (mode == Mode::Train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T s = T(0);
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = xd.data() + (b * c + ch) * spatial;
                for (std::size_t i = 0; i < spatial; ++i) s += p[i];
            }
            const T mu = s / static_cast<T>(count);
            T v = T(0);
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = xd.data() + (b * c + ch) * spatial;
                for (std::size_t i = 0; i < spatial; ++i) v += (p[i] - mu) * (p[i] - mu);
            }
            const T var = v / static_cast<T>(count);
            mean[ch] = mu;
            invstd[ch] = T(1) / std::sqrt(var + eps);
            const T m = static_cast<T>(kBatchNormMomentum);
            const T unbiased = count > 1 ? v / static_cast<T>(count - 1) : var;
            state.running_mean[ch] = m * state.running_mean[ch] + (T(1) - m) * mu;
            state.running_var[ch] = m * state.running_var[ch] + (T(1) - m) * unbiased;
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = state.running_mean[ch];
            invstd[ch] = T(1) / std::sqrt(state.running_var[ch] + eps);
        }
    }

    Tensor<T> out(x.shape());
    auto yd = out.data();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * spatial;
            const T scale = gamma[ch] * invstd[ch];
            const T shift = beta[ch] - mean[ch] * scale;
            for (std::size_t i = 0; i < spatial; ++i) yd[base + i] = xd[base + i] * scale + shift;
        }
    }

    if (needs_grad(x, gamma, beta)) {
        auto xn = x.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        const bool train = mode == Mode::Train;
        record<T>(out, {x, gamma, beta},
                  [xn, gn, bn, mean, invstd, n, c, spatial, count, train](detail::Node<T>& self) {
                      auto gx = detail::grad_target(xn);
                      auto gg = detail::grad_target(gn);
                      auto gb = detail::grad_target(bn);
                      const auto& dy = self.grad;
                      const auto& xv = xn->data;
                      for (std::size_t ch = 0; ch < c; ++ch) {
                          T sum_dy = T(0), sum_dy_xhat = T(0);
                          for (std::size_t b = 0; b < n; ++b) {
                              const std::size_t base = (b * c + ch) * spatial;
                              for (std::size_t i = 0; i < spatial; ++i) {
                                  const T xhat = (xv[base + i] - mean[ch]) * invstd[ch];
                                  sum_dy += dy[base + i];
                                  sum_dy_xhat += dy[base + i] * xhat;
                              }
                          }
                          if (!gg.empty()) gg[ch] += sum_dy_xhat;
                          if (!gb.empty()) gb[ch] += sum_dy;
                          if (gx.empty()) continue;
                          const T gam = gn->data[ch];
                          const T inv_count = T(1) / static_cast<T>(count);
                          for (std::size_t b = 0; b < n; ++b) {
                              const std::size_t base = (b * c + ch) * spatial;
                              for (std::size_t i = 0; i < spatial; ++i) {
                                  if (train) {
                                      const T xhat = (xv[base + i] - mean[ch]) * invstd[ch];
                                      gx[base + i] += gam * invstd[ch] *
                                                      (dy[base + i] - inv_count * sum_dy - xhat * inv_count * sum_dy_xhat);
                                  } else {
                                      gx[base + i] += gam * invstd[ch] * dy[base + i];
                                  }
                              }
                          }
                      }
                  });
    }
    return out;
}

// Mean softmax cross-entropy. logits: N x K, labels in [0, K).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels)
{
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be N x K, got " + to_string(logits.shape()));
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                         " rows");
    for (int label : labels)
        if (label < 0 || static_cast<std::size_t>(label) >= k)
            throw ArgumentError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                                std::to_string(k) + ")");

    std::vector<T> probs(n * k);
    T total = T(0);
    auto z = logits.data();
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = z.data() + i * k;
        T mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T s = T(0);
        for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
        const T log_s = std::log(s);
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - mx - log_s);
        total += -(row[labels[i]] - mx - log_s);
    }
    Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
    if (needs_grad(logits)) {
        auto ln = logits.node();
        std::vector<int> lab(labels.begin(), labels.end());
        record<T>(out, {logits}, [ln, probs = std::move(probs), lab = std::move(lab), n, k](detail::Node<T>& self) {
            auto g = detail::grad_target(ln);
            const T scale = self.grad[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    const T target = static_cast<std::size_t>(lab[i]) == j ? T(1) : T(0);
                    g[i * k + j] += scale * (probs[i * k + j] - target);
                }
            }
        });
    }
    return out;
}

}  // namespace spem
