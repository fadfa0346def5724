#include <gtest/gtest.h>

#include <numeric>

#include "vf/core/errors.hpp"
#include "vf/stve.hpp"

using namespace vf;

namespace {

// Puts batch-norm running statistics and biases away from their defaults so
// evaluation mode is a nontrivial affine map.
void perturb(nn::ParamStore& store, nn::Rng& rng) {
    for (const auto& [name, v] : store.entries()) {
        ag::Var p = v;
        if (name.ends_with("running_var"))
            p.mutable_value() = (rng.normal_matrix(p.rows(), p.cols()).array().abs() + 0.5).matrix();
        else if (!name.ends_with(".w"))
            p.mutable_value() = rng.normal_matrix(p.rows(), p.cols()) * 0.3;
    }
}

}  // namespace

TEST(Stve, VariantNamesAndWidths) {
    for (const char* n : {"NONE", "TE", "VE", "TVE", "STE", "SVE", "STVE"}) EXPECT_EQ(to_string(parse_variant(n)), n);
    EXPECT_THROW(parse_variant("XYZ"), ConfigError);
    EXPECT_EQ(f2_input_width(Variant::STVE, 8), 39);
    EXPECT_EQ(f2_input_width(Variant::STE, 8), 31);
    EXPECT_EQ(f2_input_width(Variant::SVE, 8), 8);
    EXPECT_EQ(f2_input_width(Variant::TVE, 8), 39);
    EXPECT_EQ(f2_input_width(Variant::TE, 8), 31);
    EXPECT_EQ(f2_input_width(Variant::VE, 8), 8);
    EXPECT_THROW(f2_input_width(Variant::NONE, 8), ConfigError);
    nn::ParamStore store;
    nn::Rng rng(0);
    for (Variant v : {Variant::STVE, Variant::STE, Variant::SVE}) {
        StveFusion f(store, "f" + to_string(v), v, 12, 8, rng);
        EXPECT_EQ(f.f2_stack().in_features(), f2_input_width(v, 8));
        EXPECT_EQ(f.f1_stack().in_features(), 12);
    }
    StveFusion t(store, "tve", Variant::TVE, 12, 8, rng);
    EXPECT_FALSE(t.has_f1());
}

TEST(Stve, TimeEncoding) {
    // 2017-01-04 is a Wednesday
    const HourStamp wed13 = HourStamp::parse("2017-01-04T13:00:00Z");
    const Mat e = encode_time(wed13, 6, 6);
    ASSERT_EQ(e.rows(), 12);
    ASSERT_EQ(e.cols(), kTimeWidth);
    EXPECT_EQ(e(5, 2), 1.0);
    EXPECT_EQ(e(5, 7 + 13), 1.0);
    for (ag::Index r = 0; r < 12; ++r) {
        EXPECT_EQ(e.row(r).sum(), 2.0);
        EXPECT_EQ(e.row(r).head(7).sum(), 1.0);
    }
    // Sunday 2017-01-08 20:00 anchor: rows 15:00 Sun .. 02:00 Mon
    const Mat s = encode_time(HourStamp::parse("2017-01-08T20:00:00Z"), 6, 6);
    for (ag::Index r = 0; r < 12; ++r) {
        const int hour = (15 + static_cast<int>(r)) % 24;
        const int day = r < 9 ? 6 : 0;
        EXPECT_EQ(s(r, day), 1.0) << r;
        EXPECT_EQ(s(r, 7 + hour), 1.0) << r;
    }
}

TEST(Stve, SensorEncodingAndAssembly) {
    EXPECT_TRUE(sensor_encoding(5).isIdentity(0.0));
    nn::Rng rng(1);
    const Mat obs = rng.normal_matrix(6, 4), fc = rng.normal_matrix(6, 4);
    const VibrancyBlock b = assemble_vibrancy(obs, fc);
    ASSERT_EQ(b.rows.rows(), 12);
    EXPECT_EQ(Mat(b.rows.topRows(6)), obs);
    EXPECT_EQ(Mat(b.rows.bottomRows(6)), fc);
    EXPECT_EQ(b.forecast_source, Provenance::Forecaster);
    EXPECT_THROW(assemble_vibrancy(obs, rng.normal_matrix(6, 3)), ShapeError);
}

TEST(Stve, RowwiseMatmulIsBatchIndependent) {
    nn::Rng rng(2);
    const Mat x = rng.normal_matrix(37, 39), w = rng.normal_matrix(39, 8);
    const Mat all = ag::matmul_rowwise(Var::constant(x), Var::constant(w)).value();
    for (ag::Index i = 0; i < x.rows(); ++i)
        EXPECT_EQ(Mat(all.row(i)), ag::matmul_rowwise(Var::constant(x.row(i)), Var::constant(w)).value());
    EXPECT_LT((all - x * w).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Stve, BuildMatchesBruteForceExactly) {
    const int ns = 12, p = 6, q = 6, d = 8;
    nn::Rng rng(3);
    const Mat zs = sensor_encoding(ns);
    const Mat zt = encode_time(HourStamp::parse("2017-03-01T07:00:00Z"), p, q);
    const Mat zv = rng.normal_matrix(p + q, d);
    for (Variant v : {Variant::STVE, Variant::STE, Variant::SVE, Variant::TE, Variant::VE, Variant::TVE}) {
        nn::ParamStore store;
        StveFusion f(store, "stve", v, ns, d, rng);
        perturb(store, rng);
        const STVETensor out = build_stve(zs, zt, zv, f);
        ASSERT_EQ(out.values.shape, (std::vector<std::size_t>{12, 12, 8}));
        ag::NoGradGuard ng;
        const Mat in = f2_input(v, zt, zv);
        for (int s = 0; s < ns; ++s)
            for (int t = 0; t < p + q; ++t) {
                const Mat row2 = f.f2(Var::constant(in.row(t)), false).value();
                Mat expect = row2;
                if (f.has_f1()) expect = f.f1(Var::constant(zs.row(s)), false).value() + row2;
                for (int k = 0; k < d; ++k)
                    ASSERT_EQ(out.values.at({static_cast<std::size_t>(s), static_cast<std::size_t>(t), static_cast<std::size_t>(k)}),
                              expect(0, k))
                        << to_string(v) << " s=" << s << " t=" << t;
            }
    }
}

TEST(Stve, ZeroWeightsGiveZeroTensor) {
    nn::ParamStore store;
    nn::Rng rng(4);
    StveFusion f(store, "stve", Variant::STVE, 4, 3, rng);
    for (const auto& [name, v] : store.entries()) {
        ag::Var p = v;
        if (name.ends_with("running_var"))
            p.mutable_value().setOnes();
        else
            p.mutable_value().setZero();
    }
    const STVETensor out = build_stve(sensor_encoding(4), encode_time(HourStamp{0}, 2, 2), rng.normal_matrix(4, 3), f);
    for (double x : out.values.data) EXPECT_EQ(x, 0.0);
}

TEST(Stve, SensorPermutationPermutesFirstAxis) {
    const int ns = 6, d = 4;
    nn::Rng rng(5);
    nn::ParamStore store;
    StveFusion f(store, "stve", Variant::STVE, ns, d, rng);
    perturb(store, rng);
    std::vector<int> perm(ns);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    Mat zs_perm = Mat::Zero(ns, ns);
    for (int s = 0; s < ns; ++s) zs_perm(s, perm[static_cast<std::size_t>(s)]) = 1.0;
    const Mat zt = encode_time(HourStamp{100}, 3, 3), zv = rng.normal_matrix(6, d);
    const auto base = build_stve(sensor_encoding(ns), zt, zv, f);
    const auto moved = build_stve(zs_perm, zt, zv, f);
    for (int s = 0; s < ns; ++s)
        for (std::size_t t = 0; t < 6; ++t)
            for (std::size_t k = 0; k < static_cast<std::size_t>(d); ++k)
                EXPECT_EQ(moved.values.at({static_cast<std::size_t>(s), t, k}),
                          base.values.at({static_cast<std::size_t>(perm[static_cast<std::size_t>(s)]), t, k}));
}

TEST(Stve, YearOfTimeEncodingRows) {
    const Mat e = encode_time(HourStamp::parse("2017-01-01"), 1, 8759);
    ASSERT_EQ(e.rows(), 8760);
    EXPECT_TRUE((e.rowwise().sum().array() == 2.0).all());
}
