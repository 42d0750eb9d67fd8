#pragma once

// CIFAR binary records, augmentation and synthetic image sets.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "spem/errors.hpp"
#include "spem/rng.hpp"
#include "spem/tensor.hpp"

namespace spem {

inline constexpr std::size_t kPlane = 32 * 32;
inline constexpr std::size_t kPixels = 3 * kPlane;

enum class CifarVariant { Cifar10, Cifar100 };

inline std::size_t record_bytes(CifarVariant v) { return v == CifarVariant::Cifar10 ? 3073 : 3074; }
inline std::size_t class_count(CifarVariant v) { return v == CifarVariant::Cifar10 ? 10 : 100; }

// Pixels in source order: R plane, G plane, B plane, each row-major.
struct ImageRecord {
    int label = 0;
    int coarse_label = 0;  // CIFAR-100 only
    std::array<std::uint8_t, kPixels> pixels{};

    bool operator==(const ImageRecord&) const = default;
};

struct Dataset {
    std::vector<ImageRecord> records;
    std::size_t num_classes = 10;

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }

    Dataset head(std::size_t n) const
    {
        Dataset d;
        d.num_classes = num_classes;
        d.records.assign(records.begin(), records.begin() + static_cast<std::ptrdiff_t>(std::min(n, records.size())));
        return d;
    }

    std::vector<std::size_t> class_histogram() const
    {
        std::vector<std::size_t> h(num_classes, 0);
        for (const auto& r : records) ++h.at(static_cast<std::size_t>(r.label));
        return h;
    }
};

struct CifarSplits {
    Dataset train;
    Dataset test;
};

inline std::vector<ImageRecord> decode_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant,
                                             const std::string& source = "<memory>")
{
    const std::size_t rec = record_bytes(variant);
    if (bytes.size() % rec != 0) {
        throw FormatError(source + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                          std::to_string(rec) + "-byte record; trailing record starts at byte offset " +
                          std::to_string(bytes.size() - bytes.size() % rec));
    }
    const std::size_t classes = class_count(variant);
    std::vector<ImageRecord> out(bytes.size() / rec);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::uint8_t* p = bytes.data() + i * rec;
        auto& r = out[i];
        if (variant == CifarVariant::Cifar100) {
            r.coarse_label = p[0];
            r.label = p[1];
        } else {
            r.label = p[0];
        }
        if (static_cast<std::size_t>(r.label) >= classes)
            throw FormatError(source + ": label " + std::to_string(r.label) + " out of range at byte offset " +
                              std::to_string(i * rec));
        const std::size_t header = rec - kPixels;
        std::copy(p + header, p + rec, r.pixels.begin());
    }
    return out;
}

inline std::vector<std::uint8_t> encode_cifar(std::span<const ImageRecord> records, CifarVariant variant)
{
    const std::size_t rec = record_bytes(variant);
    std::vector<std::uint8_t> out;
    out.reserve(records.size() * rec);
    for (const auto& r : records) {
        if (variant == CifarVariant::Cifar100) out.push_back(static_cast<std::uint8_t>(r.coarse_label));
        out.push_back(static_cast<std::uint8_t>(r.label));
        out.insert(out.end(), r.pixels.begin(), r.pixels.end());
    }
    return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<ImageRecord> load_cifar_file(const std::filesystem::path& path, CifarVariant variant)
{
    auto bytes = read_file(path);
    return decode_cifar(bytes, variant, path.string());
}

// Accepts either the directory holding the .bin files or its parent
// (cifar-10-batches-bin / cifar-100-binary as extracted from the archives).
inline CifarSplits load_cifar(const std::filesystem::path& root, CifarVariant variant)
{
    namespace fs = std::filesystem;
    const bool ten = variant == CifarVariant::Cifar10;
    fs::path dir = root;
    const fs::path nested = root / (ten ? "cifar-10-batches-bin" : "cifar-100-binary");
    if (fs::is_directory(nested)) dir = nested;

    std::vector<fs::path> train_files, test_files;
    if (ten) {
        for (int i = 1; i <= 5; ++i) train_files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
        test_files.push_back(dir / "test_batch.bin");
    } else {
        train_files.push_back(dir / "train.bin");
        test_files.push_back(dir / "test.bin");
    }
    CifarSplits s;
    s.train.num_classes = s.test.num_classes = class_count(variant);
    for (const auto& f : train_files) {
        auto recs = load_cifar_file(f, variant);
        s.train.records.insert(s.train.records.end(), recs.begin(), recs.end());
    }
    for (const auto& f : test_files) {
        auto recs = load_cifar_file(f, variant);
        s.test.records.insert(s.test.records.end(), recs.begin(), recs.end());
    }
    return s;
}

struct Normalization {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> stddev{1.0, 1.0, 1.0};

    static Normalization cifar10() { return {{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}}; }
    static Normalization cifar100() { return {{0.5071, 0.4865, 0.4409}, {0.2673, 0.2564, 0.2762}}; }

    // Per-channel statistics of x / 255 over a dataset.
    static Normalization from_dataset(const Dataset& d)
    {
        if (d.empty()) throw ArgumentError("normalization statistics of an empty dataset");
        Normalization n;
        for (std::size_t c = 0; c < 3; ++c) {
            double s = 0.0, s2 = 0.0;
            for (const auto& r : d.records) {
                for (std::size_t i = 0; i < kPlane; ++i) {
                    const double v = r.pixels[c * kPlane + i] / 255.0;
                    s += v;
                    s2 += v * v;
                }
            }
            const double count = static_cast<double>(d.size() * kPlane);
            n.mean[c] = s / count;
            n.stddev[c] = std::sqrt(std::max(s2 / count - n.mean[c] * n.mean[c], 1e-12));
        }
        return n;
    }
};

struct AugmentConfig {
    std::size_t pad = 4;
    std::size_t crop = 32;
    double flip_prob = 0.5;
    Normalization norm;
};

struct AugmentDraw {
    std::size_t offset_y = 4;
    std::size_t offset_x = 4;
    bool flip = false;
};

// Zero-pad by cfg.pad, take the crop window at (offset_y, offset_x), optionally
// mirror horizontally, then normalise (x / 255 - mean) / std.
template <typename T>
void augment_into(const ImageRecord& r, const AugmentConfig& cfg, const AugmentDraw& draw, std::span<T> out)
{
    if (cfg.crop != 32 || cfg.crop > 32 + 2 * cfg.pad)
        throw ConfigError("augmentation crop must be 32 and fit the padded image");
    if (draw.offset_y > 2 * cfg.pad || draw.offset_x > 2 * cfg.pad)
        throw ArgumentError("crop offset outside the padded image");
    for (std::size_t c = 0; c < 3; ++c) {
        const double scale = 1.0 / (255.0 * cfg.norm.stddev[c]);
        const double shift = -cfg.norm.mean[c] / cfg.norm.stddev[c];
        for (std::size_t y = 0; y < 32; ++y) {
            const long sy = static_cast<long>(y + draw.offset_y) - static_cast<long>(cfg.pad);
            for (std::size_t x = 0; x < 32; ++x) {
                const std::size_t ox = draw.flip ? 31 - x : x;
                const long sx = static_cast<long>(ox + draw.offset_x) - static_cast<long>(cfg.pad);
                double byte = 0.0;
                if (sy >= 0 && sy < 32 && sx >= 0 && sx < 32)
                    byte = r.pixels[c * kPlane + static_cast<std::size_t>(sy) * 32 + static_cast<std::size_t>(sx)];
                out[c * kPlane + y * 32 + x] = static_cast<T>(byte * scale + shift);
            }
        }
    }
}

inline AugmentDraw draw_augmentation(const AugmentConfig& cfg, Rng& rng)
{
    AugmentDraw d;
    d.offset_y = rng.below(2 * cfg.pad + 1);
    d.offset_x = rng.below(2 * cfg.pad + 1);
    d.flip = rng.bernoulli(cfg.flip_prob);
    return d;
}

template <typename T>
Tensor<T> augment(const ImageRecord& r, const AugmentConfig& cfg, Rng& rng)
{
    Tensor<T> out({3, 32, 32});
    augment_into<T>(r, cfg, draw_augmentation(cfg, rng), out.data());
    return out;
}

// Evaluation path: normalisation only.
template <typename T>
void normalize_into(const ImageRecord& r, const Normalization& norm, std::span<T> out)
{
    AugmentConfig cfg;
    cfg.norm = norm;
    augment_into<T>(r, cfg, AugmentDraw{cfg.pad, cfg.pad, false}, out);
}

// Class-conditional Gaussian blobs. Every class owns a colour and a blob
// centre; samples add pixel noise of `noise` (in units of 255) on top.
inline Dataset synthetic(std::size_t num_samples, std::size_t num_classes, std::uint64_t seed, double noise = 8.0)
{
    if (num_classes < 2) throw ArgumentError("synthetic data needs at least two classes");
    if (num_samples < num_classes) throw ArgumentError("synthetic data needs at least one sample per class");
    Rng base = Rng(seed).split(streams::kSynthetic);
    Rng proto_rng = base.split(0);

    std::vector<std::array<double, kPixels>> prototypes(num_classes);
    for (std::size_t k = 0; k < num_classes; ++k) {
        const double cy = proto_rng.uniform(6.0, 26.0), cx = proto_rng.uniform(6.0, 26.0);
        const double radius = proto_rng.uniform(3.0, 7.0);
        std::array<double, 3> colour{};
        for (auto& v : colour) v = proto_rng.uniform(40.0, 215.0);
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t y = 0; y < 32; ++y) {
                for (std::size_t x = 0; x < 32; ++x) {
                    const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                    const double blob = std::exp(-d2 / (2.0 * radius * radius));
                    prototypes[k][c * kPlane + y * 32 + x] = 20.0 + colour[c] * blob;
                }
            }
        }
    }

    Dataset d;
    d.num_classes = num_classes;
    d.records.resize(num_samples);
    Rng sample_rng = base.split(1);
    for (std::size_t i = 0; i < num_samples; ++i) {
        auto& r = d.records[i];
        r.label = static_cast<int>(i % num_classes);
        Rng px = sample_rng.split(i);
        const auto& proto = prototypes[static_cast<std::size_t>(r.label)];
        for (std::size_t j = 0; j < kPixels; ++j) {
            const double v = proto[j] + (noise > 0.0 ? px.normal(0.0, noise) : 0.0);
            r.pixels[j] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    }
    return d;
}

}  // namespace spem
