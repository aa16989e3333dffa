#include <gtest/gtest.h>

#include <random>

#include "hsae/model.hpp"
#include "test_util.hpp"

using namespace hsae;
using hsae::testing::random_model;
using hsae::testing::random_unit;

namespace {

HsaeConfig tiny(Index m_top, Index k) {
    HsaeConfig c;
    c.d = 2;
    c.m_top = m_top;
    c.k = k;
    c.a = 2;
    c.s = 1;
    return c;
}

// Expert of the worked example: pi_down=[[1,0]], pi_up=[[1],[0]], E_j=[[1],[-1]], D_j=[[1,-1]].
ExpertParams<double> worked_expert() {
    ExpertParams<double> ex;
    ex.pi_down = Mat<double>(1, 2);
    ex.pi_down << 1, 0;
    ex.pi_up = Mat<double>(2, 1);
    ex.pi_up << 1, 0;
    ex.E = Mat<double>(2, 1);
    ex.E << 1, -1;
    ex.D = Mat<double>(1, 2);
    ex.D << 1, -1;
    return ex;
}

Vec<double> v2(double a, double b) {
    Vec<double> v(2);
    v << a, b;
    return v;
}

}  // namespace

TEST(ForwardBaseline, IdentityDictionarySelectsMatchingLatent) {
    const HsaeConfig cfg = tiny(2, 1);
    TopLevelParams<double> top{Mat<double>::Identity(2, 2), Mat<double>::Identity(2, 2), {}};
    auto tr = forward_baseline(top, cfg, v2(1, 0));
    EXPECT_EQ(tr.codes.indices, (std::vector<Index>{0}));
    EXPECT_EQ(tr.codes.values, (std::vector<double>{1.0}));
    EXPECT_EQ(tr.x_hat, v2(1, 0));
    tr = forward_baseline(top, cfg, v2(0, 1));
    EXPECT_EQ(tr.codes.indices, (std::vector<Index>{1}));
    EXPECT_EQ(tr.x_hat, v2(0, 1));
    EXPECT_TRUE(tr.experts.empty());
}

TEST(ForwardBaseline, ZeroEncoderTiesToFirstLatent) {
    const HsaeConfig cfg = tiny(2, 1);
    TopLevelParams<double> top{Mat<double>::Zero(2, 2), Mat<double>::Identity(2, 2), {}};
    const auto tr = forward_baseline(top, cfg, v2(1, 0));
    const double leak = 0.01 * (-1.0 / std::sqrt(2.0));
    EXPECT_NEAR(tr.pre_codes[0], -0.00707, 1e-5);
    EXPECT_DOUBLE_EQ(tr.pre_codes[0], leak);
    EXPECT_DOUBLE_EQ(tr.pre_codes[1], leak);
    EXPECT_EQ(tr.codes.indices, (std::vector<Index>{0}));
    EXPECT_DOUBLE_EQ(tr.codes.values[0], leak);
}

TEST(ForwardBaseline, BiasIsSubtractedWhenEnabled) {
    HsaeConfig cfg = tiny(2, 1);
    cfg.use_bias = true;
    TopLevelParams<double> top{Mat<double>::Identity(2, 2), Mat<double>::Identity(2, 2), v2(0, -1)};
    const auto tr = forward_baseline(top, cfg, v2(0, 0));
    EXPECT_EQ(tr.encoder_input, v2(0, 1));
    EXPECT_EQ(tr.codes.indices, (std::vector<Index>{1}));
}

TEST(ForwardBaseline, RejectsDimensionMismatch) {
    const HsaeConfig cfg = tiny(2, 1);
    TopLevelParams<double> top{Mat<double>::Identity(2, 2), Mat<double>::Identity(2, 2), {}};
    EXPECT_THROW(forward_baseline(top, cfg, Vec<double>::Zero(3)), std::invalid_argument);
    top.D = Mat<double>::Identity(3, 2);
    EXPECT_THROW(forward_baseline(top, cfg, v2(1, 0)), std::invalid_argument);
}

TEST(ForwardExpert, WorkedExample) {
    const HsaeConfig cfg = tiny(2, 1);
    const auto ex = worked_expert();
    auto et = forward_expert(ex, cfg, v2(1, 0));
    EXPECT_EQ(et.selected, 0);
    EXPECT_DOUBLE_EQ(et.selected_value, 1.0);
    EXPECT_EQ(et.x_hat_low, v2(1, 0));

    et = forward_expert(ex, cfg, v2(0, 1));
    EXPECT_EQ(et.x_sub[0], 0.0);
    EXPECT_NEAR(et.low_pre_codes[0], -0.00707, 1e-5);
    EXPECT_EQ(et.low_pre_codes[0], et.low_pre_codes[1]);
    EXPECT_EQ(et.selected, 0);
}

TEST(ForwardExpert, ZeroUpProjectionGivesZeroOutput) {
    const HsaeConfig cfg = tiny(2, 1);
    auto ex = worked_expert();
    ex.pi_up.setZero();
    std::mt19937_64 rng(1);
    for (int i = 0; i < 20; ++i) {
        EXPECT_EQ(forward_expert(ex, cfg, random_unit<double>(2, rng)).x_hat_low, Vec<double>::Zero(2));
    }
}

TEST(ForwardHsae, WorkedComposition) {
    const HsaeConfig cfg = tiny(2, 1);
    HsaeModel<double> m = HsaeModel<double>::zeros(cfg);
    m.top.E = Mat<double>::Identity(2, 2);
    m.top.D = Mat<double>::Identity(2, 2);
    m.experts[0] = worked_expert();
    const auto tr = forward_hsae(m, v2(1, 0));
    ASSERT_EQ(tr.experts.size(), 1u);
    EXPECT_EQ(tr.experts[0].expert, 0);
    EXPECT_EQ(tr.x_hat_high, v2(1, 0));
    EXPECT_EQ(tr.x_hat, v2(2, 0));
}

TEST(ForwardHsae, ZeroUpProjectionsMatchBaseline) {
    const HsaeConfig cfg = hsae::testing::small_config();
    auto m = random_model<double>(cfg, 4);
    for (auto& ex : m.experts) ex.pi_up.setZero();
    std::mt19937_64 rng(2);
    for (int i = 0; i < 50; ++i) {
        const Vec<double> x = random_unit<double>(cfg.d, rng);
        EXPECT_EQ(forward_hsae(m, x).x_hat, forward_baseline(m.top, cfg, x).x_hat);
    }
}

TEST(ForwardHsae, AllExpertsActiveEqualsExplicitSum) {
    HsaeConfig cfg = hsae::testing::small_config();
    cfg.k = cfg.m_top;
    const auto m = random_model<double>(cfg, 9);
    std::mt19937_64 rng(3);
    const Vec<double> x = random_unit<double>(cfg.d, rng);
    const auto tr = forward_hsae(m, x);
    Vec<double> expect = m.top.D * tr.codes.to_dense(cfg.m_top);
    for (Index j = 0; j < cfg.m_top; ++j) expect += forward_expert(m.experts[static_cast<std::size_t>(j)], cfg, x).x_hat_low;
    EXPECT_LE((tr.x_hat - expect).norm(), 1e-12);
}

TEST(ForwardHsae, PropertySparsityAdditivityAndLocality) {
    const HsaeConfig cfg = hsae::testing::small_config();
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        auto m = random_model<float>(cfg, 100 + static_cast<std::uint64_t>(trial));
        const Vec<float> x = random_unit<float>(cfg.d, rng);
        const auto tr = forward_hsae(m, x);
        ASSERT_EQ(static_cast<Index>(tr.codes.size()), cfg.k);
        ASSERT_EQ(tr.experts.size(), tr.codes.size());
        Vec<double> sum = tr.x_hat_high.cast<double>();
        for (std::size_t t = 0; t < tr.experts.size(); ++t) {
            const auto& et = tr.experts[t];
            EXPECT_EQ(et.expert, tr.codes.indices[t]);
            ASSERT_GE(et.selected, 0);
            ASSERT_LT(et.selected, cfg.a);
            // the low-level reconstruction uses exactly the selected sublatent
            const auto& ex = m.experts[static_cast<std::size_t>(et.expert)];
            const Vec<float> expect = ex.D.col(et.selected) * et.selected_value;
            EXPECT_LE((et.x_sub_hat - expect).norm(), 1e-6f);
            EXPECT_EQ(et.selected_value, et.low_pre_codes.maxCoeff());
            sum += et.x_hat_low.cast<double>();
        }
        const Vec<double> xh = tr.x_hat.cast<double>();
        EXPECT_LE((xh - sum).norm(), 1e-6 * std::max(1.0, sum.norm()));

        // zeroing inactive experts is invisible
        auto pruned = m;
        for (Index j = 0; j < cfg.m_top; ++j) {
            if (tr.codes.contains(j)) continue;
            auto& ex = pruned.experts[static_cast<std::size_t>(j)];
            ex.pi_down.setZero();
            ex.pi_up.setZero();
            ex.E.setZero();
            ex.D.setZero();
        }
        EXPECT_EQ(forward_hsae(pruned, x).x_hat, tr.x_hat);
    }
}

TEST(ForwardHsae, ZeroExpertsReproduceBaselineBitExactly) {
    const HsaeConfig cfg = hsae::testing::small_config();
    auto m = random_model<float>(cfg, 77);
    for (auto& ex : m.experts) {
        ex.pi_down.setZero();
        ex.pi_up.setZero();
        ex.E.setZero();
        ex.D.setZero();
    }
    std::mt19937_64 rng(8);
    for (int i = 0; i < 100; ++i) {
        const Vec<float> x = random_unit<float>(cfg.d, rng);
        const auto h = forward_hsae(m, x);
        const auto b = forward_baseline(m.top, cfg, x);
        EXPECT_EQ(h.x_hat, b.x_hat);
        EXPECT_EQ(h.codes.indices, b.codes.indices);
    }
}

TEST(FlopBreakdown, ReferenceConfiguration) {
    HsaeConfig cfg;
    cfg.d = 128;
    cfg.m_top = 1024;
    cfg.k = 8;
    cfg.s = 4;
    cfg.a = 16;
    const auto f = flop_breakdown(cfg);
    EXPECT_EQ(f.top_encode, 131072u);
    EXPECT_EQ(f.down_proj + f.up_proj, 8192u);
    EXPECT_EQ(f.low_encode + f.low_decode, 1024u);
    EXPECT_EQ(f.top_decode, 1024u);
    EXPECT_EQ(f.total(), 141312u);
    EXPECT_NEAR(f.top_encode_share(), 0.9275, 1e-4);
}

TEST(FlopBreakdown, ZeroKLeavesOnlyEncoder) {
    HsaeConfig cfg;
    cfg.k = 0;
    const auto f = flop_breakdown(cfg);
    EXPECT_EQ(f.top_encode, static_cast<std::uint64_t>(cfg.m_top * cfg.d));
    EXPECT_EQ(f.down_proj + f.low_encode + f.low_decode + f.up_proj + f.top_decode, 0u);
}

TEST(FlopBreakdown, DoublingSublatentsDoublesOnlyLowTerms) {
    HsaeConfig cfg;
    const auto f1 = flop_breakdown(cfg);
    cfg.a *= 2;
    const auto f2 = flop_breakdown(cfg);
    EXPECT_EQ(f2.low_encode, 2 * f1.low_encode);
    EXPECT_EQ(f2.low_decode, 2 * f1.low_decode);
    EXPECT_EQ(f2.top_encode, f1.top_encode);
    EXPECT_EQ(f2.down_proj, f1.down_proj);
    EXPECT_EQ(f2.up_proj, f1.up_proj);
    EXPECT_EQ(f2.top_decode, f1.top_decode);
}

TEST(FlopBreakdown, InstrumentedForwardMatchesExactly) {
    std::mt19937_64 rng(4);
    for (const auto& [d, m, k, s, a] : std::vector<std::tuple<Index, Index, Index, Index, Index>>{
             {8, 6, 2, 2, 4}, {16, 32, 4, 4, 16}, {128, 1024, 8, 4, 16}}) {
        HsaeConfig cfg;
        cfg.d = d;
        cfg.m_top = m;
        cfg.k = k;
        cfg.s = s;
        cfg.a = a;
        const auto model = init_model<float>(cfg, 1);
        MacCounter mc;
        (void)forward_hsae(model, random_unit<float>(d, rng), &mc);
        EXPECT_EQ(mc.macs, flop_breakdown(cfg).total());
    }
}

TEST(InitModel, DeterministicTiedAndUnitColumns) {
    const HsaeConfig cfg = hsae::testing::small_config();
    const auto a = init_model<float>(cfg, 5), b = init_model<float>(cfg, 5);
    EXPECT_EQ(a.top.D, b.top.D);
    EXPECT_EQ(a.top.E, a.top.D.transpose());
    for (Index j = 0; j < cfg.m_top; ++j) EXPECT_NEAR(a.top.D.col(j).norm(), 1.0f, 1e-6f);
    EXPECT_NE(init_model<float>(cfg, 6).top.D, a.top.D);
}

TEST(HsaeConfig, ValidatesInvariants) {
    HsaeConfig c;
    EXPECT_NO_THROW(c.validate());
    EXPECT_DOUBLE_EQ(c.threshold(), 1.0 / 8.0);
    c.k = c.m_top + 1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = HsaeConfig{};
    c.s = c.d + 1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = HsaeConfig{};
    c.a = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = HsaeConfig{};
    c.lambda1 = -1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}
