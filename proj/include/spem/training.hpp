#pragma once

// Penalised loss, momentum SGD and the epoch loop.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spem/backbone.hpp"
#include "spem/data.hpp"
#include "spem/layers.hpp"
#include "spem/parameters.hpp"
#include "spem/pooling.hpp"

namespace spem {

struct OptimizerConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t epochs = 164;
    std::size_t batch_size = 128;
    // (epoch, multiplier): from that 0-based epoch on the rate is multiplied
    // by the product of every multiplier reached so far.
    std::vector<std::pair<std::size_t, double>> schedule;

    void validate() const
    {
        if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
        if (batch_size == 0) throw ConfigError("batch size must be positive");
    }

    // x0.1 at 50% and again at 75% of training.
    static std::vector<std::pair<std::size_t, double>> step_schedule(std::size_t epochs)
    {
        return {{epochs / 2, 0.1}, {epochs * 3 / 4, 0.1}};
    }

    double lr_at(std::size_t epoch) const
    {
        double r = lr;
        for (const auto& [at, mult] : schedule)
            if (epoch >= at) r *= mult;
        return r;
    }
};

struct LossConfig {
    double eta = 0.1;

    void validate() const
    {
        if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("penalty coefficient must be finite and >= 0");
    }
};

template <typename T>
struct LossTerms {
    Tensor<T> task;     // mean cross-entropy
    Tensor<T> penalty;  // eta * sum (p0^2 + p1^2)
    Tensor<T> total;
};

template <typename T>
LossTerms<T> loss_terms(const Tensor<T>& logits, std::span<const int> labels,
                        std::span<const MixCoefficient<T>> mix_coeffs, const LossConfig& cfg)
{
    cfg.validate();
    LossTerms<T> t;
    t.task = cross_entropy(logits, labels);
    if (mix_coeffs.empty()) {
        t.penalty = Tensor<T>::scalar(T(0));
        t.total = t.task;
        return t;
    }
    Tensor<T> acc;
    for (const auto& m : mix_coeffs) {
        auto term = square(m.p0) + square(m.p1);
        acc = acc.defined() ? acc + term : term;
    }
    t.penalty = mul(acc, static_cast<T>(cfg.eta));
    t.total = t.task + t.penalty;
    return t;
}

// L = L_m + eta * sum over SPEM modules of (p0^2 + p1^2)
template <typename T>
Tensor<T> total_loss(const Tensor<T>& logits, std::span<const int> labels, std::span<const MixCoefficient<T>> mix_coeffs,
                     const LossConfig& cfg)
{
    return loss_terms(logits, labels, mix_coeffs, cfg).total;
}

template <typename T>
class Sgd {
public:
    explicit Sgd(OptimizerConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    const OptimizerConfig& config() const { return cfg_; }

    // v <- momentum * v + (g + wd * p); p <- p - lr * v.
    // Returns how many scalars were updated.
    std::size_t step(const ParameterList<T>& params, double lr)
    {
        if (velocity_.empty()) {
            velocity_.reserve(params.size());
            for (const auto& p : params) velocity_.emplace_back(p.tensor.numel(), T(0));
        }
        if (velocity_.size() != params.size()) throw StateError("parameter list changed between optimiser steps");
        const T mom = static_cast<T>(cfg_.momentum);
        const T rate = static_cast<T>(lr);
        std::size_t touched = 0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto tensor = params[i].tensor;
            if (!tensor.has_grad()) throw StateError("parameter '" + params[i].name + "' has no gradient");
            const T wd = params[i].decay == DecayPolicy::Decay ? static_cast<T>(cfg_.weight_decay) : T(0);
            auto w = tensor.data();
            auto g = tensor.grad();
            auto& v = velocity_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                v[j] = mom * v[j] + (g[j] + wd * w[j]);
                w[j] -= rate * v[j];
            }
            touched += w.size();
        }
        return touched;
    }

    const std::vector<std::vector<T>>& velocity() const { return velocity_; }

private:
    OptimizerConfig cfg_;
    std::vector<std::vector<T>> velocity_;
};

template <typename T>
void zero_grad(const ParameterList<T>& params)
{
    for (auto p : params) p.tensor.zero_grad();
}

struct HistoryRow {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;  // mean task loss over the epoch
    double test_top1 = 0.0;
    std::vector<double> lambdas;

    bool operator==(const HistoryRow&) const = default;
};

using History = std::vector<HistoryRow>;

inline void write_history_header(std::ostream& os, std::size_t num_lambdas)
{
    os << "epoch,train_loss,test_top1";
    for (std::size_t i = 0; i < num_lambdas; ++i) os << ",lambda_" << i;
    os << '\n';
}

inline void write_history_row(std::ostream& os, const HistoryRow& row)
{
    const auto old = os.precision(std::numeric_limits<double>::max_digits10);
    os << row.epoch << ',' << row.train_loss << ',' << row.test_top1;
    for (double l : row.lambdas) os << ',' << l;
    os << '\n';
    os.precision(old);
}

struct TrainConfig {
    std::uint64_t seed = 0;
    AugmentConfig augment;
    bool augment_train = true;
};

// Fills a batch tensor from dataset indices [first, first + count) of `order`.
template <typename T>
Tensor<T> make_batch(const Dataset& data, std::span<const std::size_t> indices, const AugmentConfig& cfg,
                     const std::function<AugmentDraw(std::size_t)>& draw)
{
    Tensor<T> batch({indices.size(), 3, 32, 32});
    auto buf = batch.data();
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const auto& rec = data.records[indices[b]];
        std::span<T> dst = buf.subspan(b * kPixels, kPixels);
        if (draw)
            augment_into<T>(rec, cfg, draw(indices[b]), dst);
        else
            normalize_into<T>(rec, cfg.norm, dst);
    }
    return batch;
}

// Argmax with ties to the lowest class index.
template <typename T>
std::vector<int> predict(const Tensor<T>& logits)
{
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (logits[i * k + j] > logits[i * k + best]) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

inline double top1_accuracy(std::span<const int> predictions, std::span<const int> labels)
{
    if (labels.empty()) throw ArgumentError("accuracy of an empty set");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

template <typename T>
double evaluate(Network<T>& net, const Dataset& data, const Normalization& norm, std::size_t batch_size = 256)
{
    if (data.empty()) throw ArgumentError("evaluate: empty dataset");
    AugmentConfig cfg;
    cfg.norm = norm;
    std::size_t hit = 0;
    std::vector<std::size_t> idx;
    for (std::size_t first = 0; first < data.size(); first += batch_size) {
        const std::size_t count = std::min(batch_size, data.size() - first);
        idx.resize(count);
        for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
        auto logits = net.forward(make_batch<T>(data, idx, cfg, {}), Mode::Eval);
        auto pred = predict(logits);
        for (std::size_t i = 0; i < count; ++i) hit += pred[i] == data.records[first + i].label;
    }
    return static_cast<double>(hit) / static_cast<double>(data.size());
}

// Epoch callback; return false to stop early.
using EpochCallback = std::function<bool(const HistoryRow&)>;

template <typename T>
History train(Network<T>& net, const Dataset& train_set, const Dataset& test_set, const OptimizerConfig& opt,
              const LossConfig& loss_cfg, const TrainConfig& tcfg, const EpochCallback& on_epoch = {})
{
    opt.validate();
    loss_cfg.validate();
    if (train_set.num_classes != net.config().num_classes || test_set.num_classes != net.config().num_classes)
        throw ConfigError("dataset has " + std::to_string(train_set.num_classes) + " classes, network expects " +
                          std::to_string(net.config().num_classes));
    History history;
    if (opt.epochs == 0) return history;
    if (train_set.empty()) throw ArgumentError("train: empty training set");

    const auto params = net.parameters();
    const auto mixes = net.mix_coefficients();
    Sgd<T> sgd(opt);
    const Rng root(tcfg.seed);
    const Rng shuffle_root = root.split(streams::kShuffle);
    const Rng augment_root = root.split(streams::kAugment);

    std::vector<int> labels;
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng shuffle = shuffle_root.split(epoch);
        const auto order = shuffle.permutation(train_set.size());
        const Rng aug_epoch = augment_root.split(epoch);
        std::function<AugmentDraw(std::size_t)> draw;
        if (tcfg.augment_train) {
            draw = [&](std::size_t sample) {
                Rng r = aug_epoch.split(sample);
                return draw_augmentation(tcfg.augment, r);
            };
        }
        const double lr = opt.lr_at(epoch);
        double loss_sum = 0.0;
        for (std::size_t first = 0; first < order.size(); first += opt.batch_size) {
            const std::size_t count = std::min(opt.batch_size, order.size() - first);
            std::span<const std::size_t> idx(order.data() + first, count);
            labels.resize(count);
            for (std::size_t i = 0; i < count; ++i) labels[i] = train_set.records[idx[i]].label;

            zero_grad(params);
            auto logits = net.forward(make_batch<T>(train_set, idx, tcfg.augment, draw), Mode::Train);
            auto terms = loss_terms<T>(logits, labels, mixes, loss_cfg);
            backward(terms.total);
            sgd.step(params, lr);
            loss_sum += static_cast<double>(terms.task.item()) * static_cast<double>(count);
        }
        HistoryRow row;
        row.epoch = epoch + 1;
        row.train_loss = loss_sum / static_cast<double>(order.size());
        row.test_top1 = test_set.empty() ? std::nan("") : evaluate(net, test_set, tcfg.augment.norm);
        row.lambdas = net.lambdas();
        history.push_back(row);
        if (on_epoch && !on_epoch(row)) break;
    }
    return history;
}

}  // namespace spem
