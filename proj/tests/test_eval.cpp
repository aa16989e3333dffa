#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "hsae/errors.hpp"
#include "hsae/eval.hpp"
#include "test_util.hpp"

using namespace hsae;
using hsae::testing::TempDir;

TEST(OneMinusEv, Examples) {
    RowMat<float> X(3, 2);
    X << 1, 0, 0, 1, -1, -1;
    EXPECT_DOUBLE_EQ(one_minus_ev(X, X), 0.0);
    // predicting the mean leaves the full variance
    RowMat<float> mean(3, 2);
    mean.rowwise() = X.colwise().mean();
    EXPECT_NEAR(one_minus_ev(X, mean), 1.0, 1e-7);
    EXPECT_NEAR(one_minus_ev(X, RowMat<float>::Zero(3, 2)), 1.0, 1e-7);
    EXPECT_THROW(one_minus_ev(RowMat<float>::Ones(3, 2), RowMat<float>::Ones(3, 2)), UndefinedMetric);
    EXPECT_THROW(one_minus_ev(X, RowMat<float>::Zero(2, 2)), std::invalid_argument);
}

TEST(OneMinusEv, ModelOverload) {
    const auto cfg = hsae::testing::small_config();
    const auto model = hsae::testing::random_model<float>(cfg, 4);
    std::mt19937_64 rng(1);
    std::normal_distribution<float> n(0.0f, 1.0f);
    RowMat<float> X(20, cfg.d);
    for (Index i = 0; i < X.size(); ++i) X.data()[i] = n(rng);
    const auto Xh = reconstruct(model, Architecture::hierarchical, X);
    EXPECT_DOUBLE_EQ(one_minus_ev(model, Architecture::hierarchical, X), one_minus_ev(X, Xh));
    for (Index r = 0; r < X.rows(); ++r) {
        const auto tr = forward_hsae(model, X.row(r).transpose());
        EXPECT_EQ(Vec<float>(Xh.row(r).transpose()), tr.x_hat);
    }
}

TEST(Recovery, PermutedParentsScoreOne) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0.0, 1.0);
    Mat<double> parents(5, 12);
    for (Index i = 0; i < parents.size(); ++i) parents.data()[i] = n(rng);
    Mat<double> dec = Mat<double>::Zero(12, 7);
    const std::vector<Index> where{3, 0, 6, 1, 4};
    for (Index p = 0; p < 5; ++p) dec.col(where[static_cast<std::size_t>(p)]) = 2.5 * parents.row(p).transpose();
    const auto res = recovery_score(dec, parents);
    EXPECT_NEAR(res.mean_max_cosine, 1.0, 1e-12);
    ASSERT_EQ(res.matching.size(), 5u);
    for (Index p = 0; p < 5; ++p) {
        EXPECT_EQ(res.matching[static_cast<std::size_t>(p)].parent, p);
        EXPECT_EQ(res.matching[static_cast<std::size_t>(p)].latent, where[static_cast<std::size_t>(p)]);
    }
}

TEST(Recovery, RandomDecoderScoresLow) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.0, 1.0);
    Mat<double> parents(16, 256), dec(256, 16);
    for (Index i = 0; i < parents.size(); ++i) parents.data()[i] = n(rng);
    for (Index i = 0; i < dec.size(); ++i) dec.data()[i] = n(rng);
    EXPECT_LT(recovery_score(dec, parents).mean_max_cosine, 0.3);
}

TEST(Recovery, NegatedColumnIsNotAMatch) {
    Mat<double> parents = Mat<double>::Identity(2, 3);
    Mat<double> dec = parents.transpose();
    dec.col(1) *= -1.0;
    const auto res = recovery_score(dec, parents);
    EXPECT_LT(res.mean_max_cosine, 1.0);
    // the only latent left for parent 1 is its negation
    EXPECT_NEAR(res.mean_max_cosine, 0.0, 1e-12);
}

TEST(Recovery, ErrorsOnTooFewLatents) {
    EXPECT_THROW(recovery_score(Mat<double>::Identity(4, 2), Mat<double>::Identity(3, 4)), std::invalid_argument);
    EXPECT_THROW(recovery_score(Mat<double>::Identity(5, 3), Mat<double>::Identity(3, 4)), std::invalid_argument);
}

TEST(Recovery, PropertyMatchingIsOneToOneAndBounded) {
    std::mt19937_64 rng(21);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        Mat<double> parents(6, 10), dec(10, 9);
        for (Index i = 0; i < parents.size(); ++i) parents.data()[i] = n(rng);
        for (Index i = 0; i < dec.size(); ++i) dec.data()[i] = n(rng);
        const auto res = recovery_score(dec, parents);
        std::vector<Index> latents;
        for (const auto& m : res.matching) latents.push_back(m.latent);
        std::sort(latents.begin(), latents.end());
        EXPECT_EQ(std::adjacent_find(latents.begin(), latents.end()), latents.end());
        EXPECT_LE(res.mean_max_cosine, 1.0 + 1e-12);
        EXPECT_GE(res.mean_max_cosine, -1.0 - 1e-12);
    }
}

TEST(Divergence, SetExamples) {
    Vec<float> a(32), b(32), c(32);
    for (Index i = 0; i < 32; ++i) {
        a[i] = static_cast<float>(32 - i);           // top 8 = {0..7}
        b[i] = static_cast<float>(i);                // top 8 = {24..31}
        c[i] = static_cast<float>((i + 4) % 32 < 12 ? 100 - i : 0);
    }
    EXPECT_EQ(symmetric_difference_size(top_n_set(a, 8), top_n_set(a, 8)), 0);
    EXPECT_EQ(symmetric_difference_size(top_n_set(a, 8), top_n_set(b, 8)), 16);
    EXPECT_EQ(top_n_set(c, 8), (std::vector<Index>{0, 1, 2, 3, 4, 5, 6, 7}));
    Vec<float> half = a;
    for (Index i = 4; i < 8; ++i) half[i] = 0.0f;
    for (Index i = 20; i < 24; ++i) half[i] = 50.0f;
    EXPECT_EQ(symmetric_difference_size(top_n_set(a, 8), top_n_set(half, 8)), 8);
}

TEST(Divergence, ActiveTopNDropsNonPositiveCodes) {
    SparseCode<float> code;
    code.indices = {1, 4, 6, 9};
    code.values = {0.5f, -0.1f, 2.0f, 0.5f};
    EXPECT_EQ(active_top_n(code, 8), (std::vector<Index>{1, 6, 9}));
    EXPECT_EQ(active_top_n(code, 2), (std::vector<Index>{1, 6}));
    EXPECT_TRUE(active_top_n(code, 0).empty());
}

TEST(Divergence, IdenticalViewsAndSymmetry) {
    const auto cfg = hsae::testing::small_config();
    const auto model = hsae::testing::random_model<float>(cfg, 3);
    std::mt19937_64 rng(5);
    std::normal_distribution<float> n(0.0f, 1.0f);
    RowMat<float> A(30, cfg.d), B(30, cfg.d);
    for (Index i = 0; i < A.size(); ++i) {
        A.data()[i] = n(rng);
        B.data()[i] = n(rng);
    }
    EXPECT_EQ(paired_divergence(model, A, A, 2), 0.0);
    const double ab = paired_divergence(model, A, B, 2);
    EXPECT_EQ(ab, paired_divergence(model, B, A, 2));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 4.0);
    EXPECT_THROW(paired_divergence(model, A, B.topRows(3), 2), std::invalid_argument);
}

TEST(Absorption, MassExamples) {
    EXPECT_DOUBLE_EQ(absorption_from_masses({1.0, 0.0, 0.0}), 0.0);
    EXPECT_DOUBLE_EQ(absorption_from_masses({1.0, 1.0}), 0.5);
    EXPECT_DOUBLE_EQ(absorption_from_masses(std::vector<double>(8, 0.3)), 1.0 - 1.0 / 8.0);
    EXPECT_THROW(absorption_from_masses({0.0, 0.0}), UndefinedMetric);
}

TEST(Absorption, SingleLatentCarriesTheAttribute) {
    Mat<double> codes = Mat<double>::Zero(40, 3);
    std::vector<int> attr(40, 0);
    for (Index i = 0; i < 20; ++i) {
        codes(i, 1) = 1.0 + 0.01 * static_cast<double>(i);
        attr[static_cast<std::size_t>(i)] = 1;
    }
    for (Index i = 20; i < 40; ++i) codes(i, 2) = 0.5;
    const auto det = absorption_from_codes(codes, attr);
    EXPECT_NEAR(det.score, 0.0, 1e-9);
}

TEST(Absorption, SplitAcrossTwoLatentsScoresHalf) {
    Mat<double> codes = Mat<double>::Zero(40, 3);
    std::vector<int> attr(40, 0);
    for (Index i = 0; i < 20; ++i) {
        codes(i, i % 2) = 1.0;
        attr[static_cast<std::size_t>(i)] = 1;
    }
    for (Index i = 20; i < 40; ++i) codes(i, 2) = 1.0;
    EXPECT_NEAR(absorption_from_codes(codes, attr).score, 0.5, 1e-9);
}

TEST(Absorption, InvariantToCodeRescaling) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Mat<double> codes(60, 4);
    std::vector<int> attr(60);
    for (Index i = 0; i < 60; ++i) {
        attr[static_cast<std::size_t>(i)] = i % 3 == 0;
        for (Index j = 0; j < 4; ++j) codes(i, j) = u(rng) + (attr[static_cast<std::size_t>(i)] ? 0.5 * j : 0.0);
    }
    const double base = absorption_from_codes(codes, attr).score;
    Mat<double> scaled = codes;
    scaled.col(0) *= 7.0;
    scaled.col(2) *= 0.1;
    EXPECT_NEAR(absorption_from_codes(scaled, attr).score, base, 1e-8);
}

TEST(Absorption, NeedsBothClasses) {
    Mat<double> codes = Mat<double>::Ones(30, 2);
    std::vector<int> attr(30, 0);
    for (int i = 0; i < 5; ++i) attr[static_cast<std::size_t>(i)] = 1;
    EXPECT_THROW(absorption_from_codes(codes, attr), std::invalid_argument);
    EXPECT_THROW(absorption_from_codes(codes, std::vector<int>(3, 1)), std::invalid_argument);
}

TEST(Absorption, ZeroCodesAreUndefined) {
    Mat<double> codes = Mat<double>::Zero(40, 3);
    std::vector<int> attr(40, 0);
    for (int i = 0; i < 20; ++i) attr[static_cast<std::size_t>(i)] = 1;
    EXPECT_THROW(absorption_from_codes(codes, attr), UndefinedMetric);
    std::vector<std::vector<ConceptDraw>> labels(40);
    for (int i = 0; i < 20; ++i) labels[static_cast<std::size_t>(i)] = {{0, 0, 1.0}};
    EXPECT_THROW(mean_parent_absorption(codes, labels, 1), UndefinedMetric);
}

TEST(FeatureReport, ListsAreSortedAndConsistent) {
    const auto cfg = hsae::testing::small_config();
    const auto model = hsae::testing::random_model<float>(cfg, 9);
    std::mt19937_64 rng(10);
    std::normal_distribution<float> n(0.0f, 1.0f);
    RowMat<float> X(80, cfg.d);
    for (Index i = 0; i < X.size(); ++i) X.data()[i] = n(rng);
    std::vector<std::string> meta;
    for (Index r = 0; r < 80; ++r) meta.push_back("r" + std::to_string(r));
    const auto rep = feature_report(model, X, meta, 5);
    ASSERT_EQ(rep.top.size(), static_cast<std::size_t>(cfg.m_top));
    for (std::size_t j = 0; j < rep.top.size(); ++j) {
        const auto& list = rep.top[j];
        EXPECT_LE(list.size(), 5u);
        for (std::size_t i = 1; i < list.size(); ++i) EXPECT_GE(list[i - 1].value, list[i].value);
        for (const auto& h : list) {
            EXPECT_EQ(h.meta, meta[static_cast<std::size_t>(h.row)]);
            const auto tr = forward_hsae(model, X.row(h.row).transpose());
            EXPECT_TRUE(tr.codes.contains(static_cast<Index>(j)));
        }
        for (std::size_t i = 0; i < rep.sub[j].size(); ++i) {
            for (const auto& h : rep.sub[j][i]) {
                const auto tr = forward_hsae(model, X.row(h.row).transpose());
                bool found = false;
                for (const auto& et : tr.experts)
                    found |= et.expert == static_cast<Index>(j) && et.selected == static_cast<Index>(i);
                EXPECT_TRUE(found);
            }
        }
    }
    std::ostringstream os;
    write_feature_report(os, rep);
    EXPECT_NE(os.str().find("latent 0:"), std::string::npos);
    EXPECT_THROW(feature_report(model, X, {"x"}, 5), std::invalid_argument);
}

TEST(EvalReport, RoundTrip) {
    TempDir dir;
    EvalReport r;
    r.one_minus_ev = 0.123456789012345;
    RecoveryResult rec;
    rec.mean_max_cosine = 0.9;
    rec.matching = {{0, 3, 0.95}, {1, 1, 0.85}};
    r.recovery = rec;
    r.paired_divergence = 1.25;
    r.absorption = 0.2;
    r.dead_fraction = 0.015625;
    {
        std::ofstream os(dir.file("eval.txt"));
        write_eval_report(os, r);
    }
    const auto back = read_eval_report(dir.file("eval.txt"));
    EXPECT_EQ(back.one_minus_ev, r.one_minus_ev);
    ASSERT_TRUE(back.recovery.has_value());
    EXPECT_EQ(back.recovery->mean_max_cosine, 0.9);
    ASSERT_EQ(back.recovery->matching.size(), 2u);
    EXPECT_EQ(back.recovery->matching[0].latent, 3);
    EXPECT_EQ(back.recovery->matching[1].cosine, 0.85);
    EXPECT_EQ(back.paired_divergence, r.paired_divergence);
    EXPECT_EQ(back.absorption, r.absorption);
    EXPECT_EQ(back.dead_fraction, r.dead_fraction);

    EvalReport bare;
    bare.one_minus_ev = 0.5;
    {
        std::ofstream os(dir.file("bare.txt"));
        write_eval_report(os, bare);
    }
    const auto b2 = read_eval_report(dir.file("bare.txt"));
    EXPECT_FALSE(b2.recovery.has_value());
    EXPECT_FALSE(b2.absorption.has_value());

    std::ofstream(dir.file("bad.txt")) << "nonsense = 1\n";
    EXPECT_THROW(read_eval_report(dir.file("bad.txt")), FormatError);
}

TEST(InactiveFraction, CountsNeverSelectedLatents) {
    auto cfg = hsae::testing::small_config();
    auto model = HsaeModel<float>::zeros(cfg);
    model.top.E(0, 0) = 1.0f;
    model.top.E(1, 1) = 1.0f;
    model.top.D(0, 0) = 1.0f;
    model.top.D(1, 1) = 1.0f;
    RowMat<float> X = RowMat<float>::Zero(4, cfg.d);
    X(0, 0) = 1.0f;
    X(1, 1) = 1.0f;
    X(2, 0) = 2.0f;
    X(3, 1) = 3.0f;
    // both tied-negative latents fall back to the lowest indices, so 2..5 stay unselected
    EXPECT_NEAR(inactive_fraction(model, Architecture::flat, X), 4.0 / 6.0, 1e-12);
}

TEST(OneMinusEv, InvariantToRowPermutation) {
    std::mt19937_64 rng(12);
    std::normal_distribution<float> n(0.0f, 1.0f);
    RowMat<float> X(15, 4), Xh(15, 4);
    for (Index i = 0; i < X.size(); ++i) {
        X.data()[i] = n(rng);
        Xh.data()[i] = X.data()[i] + 0.1f * n(rng);
    }
    std::vector<Index> perm(15);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    RowMat<float> P(15, 4), Ph(15, 4);
    for (Index r = 0; r < 15; ++r) {
        P.row(r) = X.row(perm[static_cast<std::size_t>(r)]);
        Ph.row(r) = Xh.row(perm[static_cast<std::size_t>(r)]);
    }
    EXPECT_NEAR(one_minus_ev(P, Ph), one_minus_ev(X, Xh), 1e-12);
}
