#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "spem/data.hpp"

using namespace spem;

namespace {

std::vector<std::uint8_t> fixture_bytes(std::size_t records, CifarVariant variant, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<std::uint8_t> bytes;
    for (std::size_t r = 0; r < records; ++r) {
        if (variant == CifarVariant::Cifar100) bytes.push_back(static_cast<std::uint8_t>(rng.below(20)));
        bytes.push_back(static_cast<std::uint8_t>(rng.below(class_count(variant))));
        for (std::size_t i = 0; i < kPixels; ++i) bytes.push_back(static_cast<std::uint8_t>(rng.below(256)));
    }
    return bytes;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b)
{
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST(Cifar, RecordSizes)
{
    EXPECT_EQ(record_bytes(CifarVariant::Cifar10), 3073u);
    EXPECT_EQ(record_bytes(CifarVariant::Cifar100), 3074u);
}

TEST(Cifar, DecodeLayout)
{
    std::vector<std::uint8_t> bytes(3073, 0);
    bytes[0] = 7;
    bytes[1] = 11;             // R(0,0)
    bytes[1 + 1024] = 22;      // G(0,0)
    bytes[1 + 2048 + 33] = 33; // B(1,1)
    const auto recs = decode_cifar(bytes, CifarVariant::Cifar10);
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_EQ(recs[0].label, 7);
    EXPECT_EQ(recs[0].pixels[0], 11);
    EXPECT_EQ(recs[0].pixels[1024], 22);
    EXPECT_EQ(recs[0].pixels[2048 + 32 + 1], 33);
}

TEST(Cifar, RoundTripIsByteIdentical)
{
    for (auto variant : {CifarVariant::Cifar10, CifarVariant::Cifar100}) {
        const auto bytes = fixture_bytes(25, variant, 3);
        const auto recs = decode_cifar(bytes, variant);
        EXPECT_EQ(recs.size(), 25u);
        EXPECT_EQ(encode_cifar(recs, variant), bytes);
    }
}

TEST(Cifar, TruncatedFileReportsOffset)
{
    auto bytes = fixture_bytes(3, CifarVariant::Cifar10, 4);
    bytes.resize(bytes.size() - 100);
    try {
        decode_cifar(bytes, CifarVariant::Cifar10, "batch.bin");
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("offset 6146"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("batch.bin"), std::string::npos);
    }
}

TEST(Cifar, LabelOutOfRange)
{
    auto bytes = fixture_bytes(2, CifarVariant::Cifar10, 5);
    bytes[3073] = 10;
    EXPECT_THROW(decode_cifar(bytes, CifarVariant::Cifar10), FormatError);
}

TEST(Cifar, LoadDirectoryLayout)
{
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "spem_test_cifar";
    fs::remove_all(root);
    const fs::path dir = root / "cifar-10-batches-bin";
    fs::create_directories(dir);
    for (int i = 1; i <= 5; ++i) write_bytes(dir / ("data_batch_" + std::to_string(i) + ".bin"), fixture_bytes(4, CifarVariant::Cifar10, i));
    write_bytes(dir / "test_batch.bin", fixture_bytes(3, CifarVariant::Cifar10, 9));
    const auto splits = load_cifar(root, CifarVariant::Cifar10);
    EXPECT_EQ(splits.train.size(), 20u);
    EXPECT_EQ(splits.test.size(), 3u);
    EXPECT_EQ(splits.train.num_classes, 10u);
    fs::remove(dir / "test_batch.bin");
    EXPECT_THROW(load_cifar(root, CifarVariant::Cifar10), IoError);
    fs::remove_all(root);
}

TEST(Augment, CentreCropWithoutFlipIsNormalisation)
{
    auto data = synthetic(2, 2, 1);
    AugmentConfig cfg;
    cfg.norm = Normalization::cifar10();
    std::vector<double> a(kPixels);
    augment_into<double>(data.records[0], cfg, AugmentDraw{4, 4, false}, a);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < kPlane; ++i) {
            const double expect = (data.records[0].pixels[c * kPlane + i] / 255.0 - cfg.norm.mean[c]) / cfg.norm.stddev[c];
            ASSERT_NEAR(a[c * kPlane + i], expect, 1e-12);
        }
}

TEST(Augment, FlipTwiceIsIdentity)
{
    auto data = synthetic(2, 2, 2);
    AugmentConfig cfg;
    ImageRecord flipped = data.records[1];
    std::vector<double> once(kPixels);
    augment_into<double>(data.records[1], cfg, AugmentDraw{4, 4, true}, once);
    for (std::size_t i = 0; i < kPixels; ++i) flipped.pixels[i] = static_cast<std::uint8_t>(std::lround(once[i] * 255.0));
    std::vector<double> twice(kPixels);
    augment_into<double>(flipped, cfg, AugmentDraw{4, 4, true}, twice);
    for (std::size_t i = 0; i < kPixels; ++i) ASSERT_NEAR(twice[i] * 255.0, data.records[1].pixels[i], 1e-9);
    // a mirrored row reads right to left
    EXPECT_NEAR(once[0] * 255.0, data.records[1].pixels[31], 1e-9);
}

TEST(Augment, ShiftedCropPadsWithZero)
{
    ImageRecord r;
    r.pixels.fill(200);
    AugmentConfig cfg;
    std::vector<double> out(kPixels);
    augment_into<double>(r, cfg, AugmentDraw{0, 8, false}, out);
    // rows 0..3 come from the top padding, columns 28..31 from the right padding
    EXPECT_EQ(out[0], 0.0);
    EXPECT_EQ(out[3 * 32 + 10], 0.0);
    EXPECT_NEAR(out[4 * 32 + 10] * 255.0, 200.0, 1e-9);
    EXPECT_EQ(out[10 * 32 + 28], 0.0);
    EXPECT_THROW(augment_into<double>(r, cfg, AugmentDraw{9, 0, false}, out), ArgumentError);
}

TEST(Augment, DrawsAreDeterministicAndInRange)
{
    AugmentConfig cfg;
    Rng a(7), b(7);
    std::size_t flips = 0;
    for (int i = 0; i < 2000; ++i) {
        const auto da = draw_augmentation(cfg, a), db = draw_augmentation(cfg, b);
        ASSERT_EQ(da.offset_x, db.offset_x);
        ASSERT_EQ(da.offset_y, db.offset_y);
        ASSERT_EQ(da.flip, db.flip);
        ASSERT_LE(da.offset_x, 8u);
        ASSERT_LE(da.offset_y, 8u);
        flips += da.flip;
    }
    EXPECT_GT(flips, 850u);
    EXPECT_LT(flips, 1150u);
}

TEST(Normalization, FromDatasetStatistics)
{
    Dataset d;
    d.records.resize(2);
    d.records[0].pixels.fill(0);
    d.records[1].pixels.fill(255);
    const auto n = Normalization::from_dataset(d);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_NEAR(n.mean[c], 0.5, 1e-12);
        EXPECT_NEAR(n.stddev[c], 0.5, 1e-12);
    }
    EXPECT_THROW(Normalization::from_dataset(Dataset{}), ArgumentError);
}

TEST(Synthetic, BalancedAndDeterministic)
{
    const auto a = synthetic(100, 10, 3), b = synthetic(100, 10, 3), c = synthetic(100, 10, 4);
    EXPECT_EQ(a.records, b.records);
    EXPECT_NE(a.records, c.records);
    for (auto n : a.class_histogram()) EXPECT_EQ(n, 10u);
    EXPECT_THROW(synthetic(5, 10, 0), ArgumentError);
    EXPECT_THROW(synthetic(5, 1, 0), ArgumentError);
    EXPECT_EQ(a.head(7).size(), 7u);
    EXPECT_EQ(a.head(1000).size(), 100u);
}
