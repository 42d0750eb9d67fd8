#include <cmath>

#include <gtest/gtest.h>

#include "spem/attention.hpp"
#include "spem/gradcheck.hpp"

using namespace spem;

namespace {

constexpr double kSigmoidMinusOne = 0.2689414213699951;

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 2.0, bool grad = false)
{
    Tensor<double> t(std::move(shape), 0.0, grad);
    for (auto& v : t.data()) v = rng.uniform(-scale, scale);
    return t;
}

void randomize(SpemParams<double>& p, Rng& rng, double scale)
{
    for (auto& np : p.parameters(""))
        for (auto& v : np.tensor.data()) v = rng.uniform(-scale, scale);
}

double sigmoid_ref(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST(ReweightNames, RoundTrip)
{
    for (auto v : kAllReweightVariants) EXPECT_EQ(parse_reweight(reweight_name(v)), v);
    EXPECT_FALSE(parse_reweight("h").has_value());
    EXPECT_EQ(kAllReweightVariants.size(), 9u);
}

TEST(Spem, InitialValues)
{
    auto p = SpemParams<double>::make(4);
    Rng rng(1);
    auto x = random_tensor({4, 5, 5}, rng);
    auto u = mix_pool(x, adaptive_pooling(p));
    auto v_exc = excitation(u, p.gamma_exc, p.beta_exc);
    for (auto v : v_exc.data()) EXPECT_NEAR(v, kSigmoidMinusOne, 1e-7);
    auto v = spem_forward(x, p, ReweightVariant::SharedAddSigmoid, adaptive_pooling(p));
    ASSERT_EQ(v.shape(), (Shape{4, 1, 1}));
    for (auto e : v.data()) EXPECT_NEAR(e, 0.0723295, 1e-7);
}

TEST(Spem, ParameterCounts)
{
    EXPECT_EQ(count_scalars(SpemParams<double>::make(64).parameters("")), 2u + 4u * 64u);
    EXPECT_EQ(count_scalars(SpemParams<double>::make(64, ReweightVariant::UnsharedAddSigmoid).parameters("")),
              2u + 6u * 64u);
    const auto params = SpemParams<double>::make(8).parameters("m.");
    EXPECT_EQ(params[0].name, "m.p0");
    EXPECT_EQ(params[0].decay, DecayPolicy::Penalty);
    EXPECT_EQ(params[2].decay, DecayPolicy::Decay);
}

TEST(Spem, HandComputedReweight)
{
    auto p = SpemParams<double>::make(1);
    p.gamma_rew[0] = 0.5;
    p.beta_rew[0] = 0.1;
    Tensor<double> fmax({1, 1, 1}, 2.0), fmin({1, 1, 1}, -1.0);
    EXPECT_NEAR(reweight(fmax, fmin, p, ReweightVariant::SharedAddSigmoid).item(), sigmoid_ref(0.6), 1e-15);
    EXPECT_NEAR(reweight(fmax, fmin, p, ReweightVariant::SharedAddNoSigmoid).item(), 0.6, 1e-15);
    const double gmax = 1.1, gmin = -0.4;
    EXPECT_NEAR(reweight(fmax, fmin, p, ReweightVariant::SharedMulSigmoid).item(), sigmoid_ref(gmax * gmin), 1e-15);
    EXPECT_NEAR(reweight(fmax, fmin, p, ReweightVariant::SigmoidThenAdd).item(), sigmoid_ref(gmax) + sigmoid_ref(gmin),
                1e-15);
    EXPECT_NEAR(reweight(fmax, fmin, p, ReweightVariant::SigmoidThenMul).item(), sigmoid_ref(gmax) * sigmoid_ref(gmin),
                1e-15);
    EXPECT_NEAR(reweight(fmax, fmin, p, ReweightVariant::MaxOnly).item(), sigmoid_ref(gmax), 1e-15);
    EXPECT_NEAR(reweight(fmax, fmin, p, ReweightVariant::MinOnly).item(), sigmoid_ref(gmin), 1e-15);
    EXPECT_EQ(reweight(fmax, fmin, p, ReweightVariant::NoReweight).item(), 1.0);

    auto pa = SpemParams<double>::make(1, ReweightVariant::UnsharedAddSigmoid);
    pa.gamma_rew[0] = 0.5;
    pa.beta_rew[0] = 0.1;
    pa.gamma_rew_min[0] = -2.0;
    pa.beta_rew_min[0] = 0.3;
    EXPECT_NEAR(reweight(fmax, fmin, pa, ReweightVariant::UnsharedAddSigmoid).item(), sigmoid_ref(1.1 + 2.3), 1e-15);
}

TEST(Spem, UnsharedRequiresSecondPair)
{
    auto p = SpemParams<double>::make(2);
    Tensor<double> f({2, 1, 1}, 1.0);
    EXPECT_THROW(reweight(f, f, p, ReweightVariant::UnsharedAddSigmoid), ShapeError);
}

TEST(Spem, VariantRanges)
{
    Rng rng(2);
    for (auto variant : kAllReweightVariants) {
        auto p = SpemParams<double>::make(6, variant);
        for (int trial = 0; trial < 50; ++trial) {
            randomize(p, rng, 3.0);
            auto x = random_tensor({2, 6, 4, 4}, rng, 5.0);
            auto fmax = global_max_pool(x), fmin = global_min_pool(x);
            auto r = reweight(fmax, fmin, p, variant);
            auto v = spem_forward(x, p, variant, adaptive_pooling(p));
            for (std::size_t i = 0; i < r.numel(); ++i) {
                if (variant == ReweightVariant::NoReweight) {
                    ASSERT_EQ(r[i], 1.0);
                } else if (variant == ReweightVariant::SigmoidThenAdd) {
                    ASSERT_GE(r[i], 0.0);
                    ASSERT_LE(r[i], 2.0);
                } else if (reweight_is_unit_interval(variant)) {
                    ASSERT_GE(r[i], 0.0);
                    ASSERT_LE(r[i], 1.0);
                    ASSERT_GE(v[i], 0.0);
                    ASSERT_LE(v[i], 1.0);
                }
                ASSERT_TRUE(std::isfinite(v[i]));
            }
        }
    }
}

TEST(Spem, ChannelPermutationEquivariance)
{
    Rng rng(3);
    const std::size_t c = 5;
    for (auto variant : kAllReweightVariants) {
        auto p = SpemParams<double>::make(c, variant);
        randomize(p, rng, 1.5);
        auto x = random_tensor({c, 4, 3}, rng);
        const auto perm = rng.permutation(c);

        auto q = SpemParams<double>::make(c, variant);
        q.mix = MixCoefficient<double>::make(p.mix.p0.item(), p.mix.p1.item());
        auto permute_param = [&](const Tensor<double>& src, Tensor<double>& dst) {
            if (!src.defined()) return;
            for (std::size_t i = 0; i < c; ++i) dst[i] = src[perm[i]];
        };
        permute_param(p.gamma_exc, q.gamma_exc);
        permute_param(p.beta_exc, q.beta_exc);
        permute_param(p.gamma_rew, q.gamma_rew);
        permute_param(p.beta_rew, q.beta_rew);
        permute_param(p.gamma_rew_min, q.gamma_rew_min);
        permute_param(p.beta_rew_min, q.beta_rew_min);
        Tensor<double> xp({c, 4, 3});
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < 12; ++j) xp[i * 12 + j] = x[perm[i] * 12 + j];

        const auto v = spem_forward(x, p, variant, adaptive_pooling(p));
        const auto vp = spem_forward(xp, q, variant, adaptive_pooling(q));
        for (std::size_t i = 0; i < c; ++i) ASSERT_EQ(vp[i], v[perm[i]]) << reweight_name(variant);
    }
}

TEST(Spem, GradientsMatchFiniteDifferencesForEveryVariant)
{
    Rng rng(4);
    for (auto variant : kAllReweightVariants) {
        auto p = SpemParams<double>::make(3, variant);
        randomize(p, rng, 1.0);
        auto x = random_tensor({2, 3, 3, 3}, rng, 2.0, true);
        auto w = random_tensor({2, 3, 3, 3}, rng);
        std::vector<NamedTensor> groups{{"x", x}};
        for (auto& np : p.parameters("")) groups.emplace_back(np.name, np.tensor);
        auto report = check_gradients(
            [&] { return sum(recalibrate(x, spem_forward(x, p, variant, adaptive_pooling(p))) * w); }, groups);
        EXPECT_LT(report.worst(), kGradCheckTolerance) << reweight_name(variant);
    }
}

TEST(Spem, ShapeMismatchErrors)
{
    auto p = SpemParams<double>::make(3);
    Tensor<double> x({4, 5, 5});
    EXPECT_THROW(spem_forward(x, p, ReweightVariant::SharedAddSigmoid, adaptive_pooling(p)), ShapeError);
    Tensor<double> y({3, 5, 5}), v({4, 1, 1});
    EXPECT_THROW(recalibrate(y, v), ShapeError);
}

TEST(Recalibrate, OnesMapIsIdentity)
{
    Rng rng(5);
    auto x = random_tensor({2, 3, 4, 4}, rng);
    Tensor<double> ones({3, 1, 1}, 1.0);
    EXPECT_EQ(recalibrate(x, ones).to_vector(), x.to_vector());
}

TEST(Recalibrate, ScalesEachChannel)
{
    Tensor<double> x({2, 1, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor<double> v({2, 1, 1}, {0.5, -1.0});
    EXPECT_EQ(recalibrate(x, v).to_vector(), (std::vector<double>{0.5, 1.0, -3.0, -4.0}));
}

TEST(Se, ZeroWeightsGiveHalf)
{
    Rng rng(6);
    auto p = SeParams<double>::make(32, 16, rng);
    for (auto& np : p.parameters(""))
        for (auto& v : np.tensor.data()) v = 0.0;
    auto x = random_tensor({2, 32, 4, 4}, rng);
    auto s = se_forward(x, p);
    ASSERT_EQ(s.shape(), (Shape{2, 32, 1, 1}));
    for (auto v : s.data()) EXPECT_EQ(v, 0.5);
}

TEST(Se, HandComputedTwoChannels)
{
    Rng rng(7);
    auto p = SeParams<double>::make(2, 1, rng);
    const std::vector<double> w1{1, 0, 0, 1}, b1{0, 0}, w2{2, 0, 0, 3}, b2{0, -1};
    std::copy(w1.begin(), w1.end(), p.w1.data().begin());
    std::copy(b1.begin(), b1.end(), p.b1.data().begin());
    std::copy(w2.begin(), w2.end(), p.w2.data().begin());
    std::copy(b2.begin(), b2.end(), p.b2.data().begin());
    Tensor<double> x({2, 1, 2}, {0.5, 1.5, -1.0, -1.0});  // averages 1 and -1
    auto s = se_forward(x, p);
    EXPECT_NEAR(s[0], sigmoid_ref(2.0), 1e-15);
    EXPECT_NEAR(s[1], sigmoid_ref(-1.0), 1e-15);
}

TEST(Se, HiddenWidthAndErrors)
{
    EXPECT_EQ(SeParams<double>::hidden_width(64, 16), 4u);
    EXPECT_EQ(SeParams<double>::hidden_width(8, 16), 1u);
    Rng rng(8);
    EXPECT_THROW(SeParams<double>::make(8, 0, rng), ConfigError);
    auto p = SeParams<double>::make(8, 2, rng);
    Tensor<double> x({4, 3, 3});
    EXPECT_THROW(se_forward(x, p), ShapeError);
}

TEST(Se, GradientsMatchFiniteDifferences)
{
    Rng rng(9);
    auto p = SeParams<double>::make(4, 2, rng);
    auto x = random_tensor({2, 4, 3, 3}, rng, 2.0, true);
    auto w = random_tensor({2, 4, 1, 1}, rng);
    std::vector<NamedTensor> groups{{"x", x}};
    for (auto& np : p.parameters("")) groups.emplace_back(np.name, np.tensor);
    auto report = check_gradients([&] { return sum(se_forward(x, p) * w); }, groups);
    EXPECT_LT(report.worst(), kGradCheckTolerance);
}
