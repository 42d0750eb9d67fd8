#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "spem/checkpoint.hpp"
#include "spem/training.hpp"

using namespace spem;

namespace {

NetworkConfig config(std::size_t n, AttentionType type, std::size_t classes = 10)
{
    NetworkConfig c;
    c.blocks_per_stage = n;
    c.num_classes = classes;
    c.attention.type = type;
    return c;
}

NetworkConfig small(AttentionType type)
{
    auto c = config(1, type);
    c.stage_widths = {4, 4, 8};
    return c;
}

Tensor<double> random_images(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    Tensor<double> x({n, 3, 32, 32});
    for (auto& v : x.data()) v = rng.normal();
    return x;
}

std::filesystem::path temp_path(const std::string& name)
{
    return std::filesystem::temp_directory_path() / ("spem_test_" + name);
}

}  // namespace

TEST(NetworkConfig, DepthMapping)
{
    EXPECT_EQ(config(18, AttentionType::None).depth(), 164u);
    EXPECT_EQ(blocks_for_depth(164), 18u);
    EXPECT_EQ(blocks_for_depth(11), 1u);
    EXPECT_THROW(blocks_for_depth(100), ConfigError);
    EXPECT_THROW(blocks_for_depth(2), ConfigError);
    auto bad = config(0, AttentionType::None);
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(PoolingConfig, Parse)
{
    EXPECT_EQ(PoolingConfig::parse("gap").kind, PoolingConfig::Kind::Gap);
    EXPECT_EQ(PoolingConfig::parse("adaptive").kind, PoolingConfig::Kind::Adaptive);
    auto f = PoolingConfig::parse("fixed:0.25");
    EXPECT_EQ(f.kind, PoolingConfig::Kind::Fixed);
    EXPECT_EQ(f.max_weight, 0.25);
    EXPECT_EQ(PoolingConfig::parse(f.to_string()), f);
    EXPECT_THROW(PoolingConfig::parse("fixed:1.5"), ConfigError);
    EXPECT_THROW(PoolingConfig::parse("fixed:abc"), ConfigError);
    EXPECT_THROW(PoolingConfig::parse("max"), ConfigError);
    EXPECT_THROW(parse_attention("cbam"), ConfigError);
}

TEST(ParamAudit, Depth164Cifar10)
{
    const auto plain = Network<float>::build(config(18, AttentionType::None)).param_count();
    const auto spem = Network<float>::build(config(18, AttentionType::Spem)).param_count();
    const auto se = Network<float>::build(config(18, AttentionType::SE)).param_count();
    EXPECT_EQ(plain.total, 1703258u);
    EXPECT_EQ(plain.attention, 0u);
    EXPECT_EQ(spem.attention, 32364u);
    EXPECT_EQ(spem.total, plain.total + 32364u);
    EXPECT_EQ(spem.backbone, plain.total);
    EXPECT_EQ(se.total, 1905362u);
    // 54 SPEM modules, 2 mix scalars + 4 per output channel each
    std::size_t expected = 0;
    for (std::size_t w : {16u, 32u, 64u}) expected += 18 * (2 + 4 * 4 * w);
    EXPECT_EQ(expected, 32364u);
}

TEST(ParamAudit, Cifar100Head)
{
    const auto plain = Network<float>::build(config(18, AttentionType::None, 100)).param_count();
    EXPECT_EQ(plain.total, 1703258u + 90u * 257u);
}

TEST(ParamAudit, FixedPoolingHasNoMixCoefficients)
{
    auto cfg = config(18, AttentionType::Spem);
    cfg.attention.pooling = PoolingConfig::fixed(0.3);
    auto net = Network<float>::build(cfg);
    EXPECT_EQ(net.param_count().attention, 32364u - 54u * 2u);
    EXPECT_TRUE(net.mix_coefficients().empty());
    for (double l : net.lambdas()) EXPECT_FLOAT_EQ(l, 0.3f);
    cfg.attention.pooling = PoolingConfig::gap();
    for (double l : Network<float>::build(cfg).lambdas()) EXPECT_TRUE(std::isnan(l));
}

TEST(ParamAudit, BreakdownSumsToTotal)
{
    auto c = Network<float>::build(config(2, AttentionType::Spem)).param_count();
    std::size_t sum = 0;
    for (const auto& [name, n] : c.breakdown) sum += n;
    EXPECT_EQ(sum, c.total);
    EXPECT_EQ(c.total, c.backbone + c.attention);
}

TEST(Network, ForwardShapesAndErrors)
{
    auto net = Network<double>::build(small(AttentionType::Spem), 1);
    auto y = net.forward(random_images(2, 1), Mode::Train);
    EXPECT_EQ(y.shape(), (Shape{2, 10}));
    EXPECT_TRUE(y.requires_grad());
    Tensor<double> bad({2, 3, 16, 16});
    EXPECT_THROW(net.forward(bad, Mode::Train), ShapeError);
    Tensor<double> bad2({2, 1, 32, 32});
    EXPECT_THROW(net.forward(bad2, Mode::Eval), ShapeError);
}

TEST(Network, EvalLeavesStateAndGraphAlone)
{
    auto net = Network<double>::build(small(AttentionType::SE), 2);
    auto before = net.block(0).bn1.state.running_mean;
    auto y = net.forward(random_images(2, 2), Mode::Eval);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_EQ(net.block(0).bn1.state.running_mean, before);
    net.forward(random_images(2, 2), Mode::Train);
    EXPECT_NE(net.block(0).bn1.state.running_mean, before);
}

TEST(Network, SameSeedSameWeights)
{
    auto a = Network<double>::build(small(AttentionType::SE), 7);
    auto b = Network<double>::build(small(AttentionType::SE), 7);
    auto c = Network<double>::build(small(AttentionType::SE), 8);
    const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].tensor.to_vector(), pb[i].tensor.to_vector()) << pa[i].name;
        any_diff |= pa[i].tensor.to_vector() != pc[i].tensor.to_vector();
    }
    EXPECT_TRUE(any_diff);
}

TEST(Network, ForcedIdentityMatchesPlainBackbone)
{
    auto plain_cfg = small(AttentionType::None);
    auto id_cfg = small(AttentionType::Spem);
    id_cfg.attention.force_identity = true;
    auto plain = Network<double>::build(plain_cfg, 3);
    auto ident = Network<double>::build(id_cfg, 3);
    const auto x = random_images(3, 3);
    EXPECT_EQ(plain.forward(x, Mode::Train).to_vector(), ident.forward(x, Mode::Train).to_vector());
    EXPECT_EQ(plain.forward(x, Mode::Eval).to_vector(), ident.forward(x, Mode::Eval).to_vector());
}

TEST(Network, GradientsReachEveryParameter)
{
    for (auto type : {AttentionType::Spem, AttentionType::SE}) {
        auto net = Network<double>::build(small(type), 4);
        const auto params = net.parameters();
        zero_grad(params);
        auto logits = net.forward(random_images(4, 4), Mode::Train);
        std::vector<int> labels{0, 1, 2, 3};
        auto mixes = net.mix_coefficients();
        backward(total_loss<double>(logits, labels, mixes, LossConfig{}));
        for (const auto& p : params) {
            ASSERT_TRUE(p.tensor.has_grad()) << p.name;
            double norm = 0.0;
            for (double g : p.tensor.grad()) norm += g * g;
            // a single SE hidden unit can be dead under ReLU
            if (type == AttentionType::Spem) EXPECT_GT(norm, 0.0) << p.name;
        }
    }
}

TEST(Network, OptimizerTouchesEveryCountedParameter)
{
    auto net = Network<double>::build(small(AttentionType::Spem), 5);
    const auto params = net.parameters();
    zero_grad(params);
    auto logits = net.forward(random_images(2, 5), Mode::Train);
    std::vector<int> labels{0, 1};
    auto mixes = net.mix_coefficients();
    backward(total_loss<double>(logits, labels, mixes, LossConfig{}));
    Sgd<double> sgd(OptimizerConfig{});
    EXPECT_EQ(sgd.step(params, 0.1), net.param_count().total);
}

TEST(Checkpoint, RoundTripIsBitExact)
{
    auto cfg = small(AttentionType::Spem);
    cfg.attention.reweight = ReweightVariant::UnsharedAddSigmoid;
    auto net = Network<double>::build(cfg, 6);
    // move weights and running stats off their initial values
    const auto params = net.parameters();
    for (auto p : params)
        for (auto& v : p.tensor.data()) v += 0.01;
    net.forward(random_images(4, 6), Mode::Train);

    const auto path = temp_path("ckpt.bin");
    save_checkpoint(net, path);
    auto loaded = load_checkpoint<double>(path);
    EXPECT_EQ(loaded.config(), net.config());
    const auto x = random_images(3, 60);
    EXPECT_EQ(loaded.forward(x, Mode::Eval).to_vector(), net.forward(x, Mode::Eval).to_vector());
    std::filesystem::remove(path);
}

TEST(Checkpoint, FloatNetworkRoundTrip)
{
    auto net = Network<float>::build(small(AttentionType::SE), 7);
    const auto path = temp_path("ckpt_f.bin");
    save_checkpoint(net, path);
    auto loaded = load_checkpoint<float>(path);
    const auto a = net.parameters(), b = loaded.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tensor.to_vector(), b[i].tensor.to_vector());
    std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsDamagedFiles)
{
    auto net = Network<double>::build(small(AttentionType::None), 8);
    const auto path = temp_path("ckpt_bad.bin");
    save_checkpoint(net, path);
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 8);
    EXPECT_THROW(load_checkpoint<double>(path), FormatError);
    {
        std::ofstream out(path, std::ios::trunc);
        out << "not a checkpoint\n";
    }
    EXPECT_THROW(load_checkpoint<double>(path), FormatError);
    std::filesystem::remove(path);
    EXPECT_THROW(load_checkpoint<double>(path), IoError);
}

TEST(Checkpoint, ConfigTextRoundTrip)
{
    auto cfg = small(AttentionType::Spem);
    cfg.attention.pooling = PoolingConfig::fixed(0.75);
    cfg.attention.reweight = ReweightVariant::MinOnly;
    cfg.num_classes = 100;
    EXPECT_EQ(network_config_from_kv(network_config_to_kv(cfg)), cfg);
    EXPECT_THROW(network_config_from_kv("bogus=1"), FormatError);
}
