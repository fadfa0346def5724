#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "vf/core/nn.hpp"

using namespace vf;
using ag::Mat;
using ag::Var;

namespace {

Var param(nn::Rng& rng, int r, int c) { return Var(rng.normal_matrix(r, c), true); }

}  // namespace

TEST(Autodiff, ElementwiseAndReductionGradients) {
    nn::Rng rng(1);
    Var a = param(rng, 3, 4), b = param(rng, 3, 4), row = param(rng, 1, 4);
    auto loss = [&] {
        Var x = ag::add(ag::mul(ag::sigmoid(a), ag::tanh(b)), ag::exp(ag::scale(a, 0.3)));
        x = ag::mul_row(ag::add_row(x, row), row);
        x = ag::sub(ag::square(x), ag::abs(ag::add_scalar(b, 0.1)));
        return ag::add(ag::mean(ag::one_minus(x)), ag::sum(ag::relu(x)));
    };
    auto r = oracle::gradcheck(loss, {a, b, row});
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Autodiff, LayoutOpsGradients) {
    nn::Rng rng(2);
    Var a = param(rng, 4, 3), b = param(rng, 4, 2), w = param(rng, 5, 6);
    auto loss = [&] {
        Var c = ag::concat_cols({a, b});                       // 4x5
        Var m = ag::matmul(c, w);                              // 4x6
        Var r = ag::reshape(m, 6, 4);
        Var g = ag::gather_rows(r, {0, 5, 5, 2});
        Var s = ag::concat_rows({ag::slice_rows(g, 1, 2), ag::slice_rows(r, 1, 4)});
        s = ag::add(ag::slice_cols(s, 1, 2), ag::slice_cols(s, 0, 2));
        return ag::sum(ag::square(ag::tanh(s)));
    };
    auto r = oracle::gradcheck(loss, {a, b, w});
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Autodiff, ConvolutionGradients) {
    nn::Rng rng(3);
    ag::ConvShape s{2, 6, 6, 3, 4, 2, 1};
    ASSERT_EQ(s.out_h(), 3);
    Var x = param(rng, 2, s.in_size());
    Var w = param(rng, s.out_c, s.patch());
    Var b = param(rng, 1, s.out_c);
    Var wt = param(rng, s.out_c, s.patch());
    Var bt = param(rng, 1, s.in_c);
    auto loss = [&] {
        Var y = ag::tanh(ag::conv2d(x, w, b, s));
        Var z = ag::conv_transpose2d(y, wt, bt, s);
        return ag::sum(ag::square(z));
    };
    auto r = oracle::gradcheck(loss, {x, w, b, wt, bt});
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Autodiff, ConvTransposeIsAdjointOfConv) {
    nn::Rng rng(4);
    ag::ConvShape s{2, 8, 8, 3, 4, 2, 1};
    Mat w = rng.normal_matrix(s.out_c, s.patch());
    Mat x = rng.normal_matrix(1, s.in_size());
    Mat y = rng.normal_matrix(1, s.out_size());
    Var zero_out = Var::constant(Mat::Zero(1, s.out_c));
    Var zero_in = Var::constant(Mat::Zero(1, s.in_c));
    Mat ax = ag::conv2d(Var::constant(x), Var::constant(w), zero_out, s).value();
    Mat aty = ag::conv_transpose2d(Var::constant(y), Var::constant(w), zero_in, s).value();
    EXPECT_NEAR(ax.cwiseProduct(y).sum(), x.cwiseProduct(aty).sum(), 1e-10);
}

TEST(Autodiff, ConvMatchesDirectLoop) {
    nn::Rng rng(5);
    ag::ConvShape s{1, 5, 5, 2, 3, 1, 1};
    Mat x = rng.normal_matrix(1, s.in_size());
    Mat w = rng.normal_matrix(s.out_c, s.patch());
    Mat y = ag::conv2d(Var::constant(x), Var::constant(w), Var::constant(Mat::Zero(1, 2)), s).value();
    for (int o = 0; o < 2; ++o)
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 5; ++j) {
                double acc = 0;
                for (int ki = 0; ki < 3; ++ki)
                    for (int kj = 0; kj < 3; ++kj) {
                        int ii = i - 1 + ki, jj = j - 1 + kj;
                        if (ii < 0 || jj < 0 || ii >= 5 || jj >= 5) continue;
                        acc += w(o, ki * 3 + kj) * x(0, ii * 5 + jj);
                    }
                EXPECT_NEAR(y(0, (o * 5 + i) * 5 + j), acc, 1e-12);
            }
}

TEST(Autodiff, GraphMixAndBatchNormGradients) {
    nn::Rng rng(6);
    Mat p = rng.normal_matrix(3, 3);
    Var x = param(rng, 6, 4), gamma = param(rng, 1, 4), beta = param(rng, 1, 4);
    Mat rm = rng.normal_matrix(1, 4);
    Mat rv = rng.normal_matrix(1, 4).cwiseAbs();
    auto loss_train = [&] {
        Var y = ag::batch_norm_train(ag::graph_mix(x, p), gamma, beta, 1e-5, nullptr, nullptr);
        return ag::sum(ag::mul(ag::tanh(y), ag::square(y)));
    };
    auto loss_eval = [&] {
        Var y = ag::batch_norm_eval(ag::graph_mix(x, p), gamma, beta, rm, rv, 1e-5);
        return ag::sum(ag::mul(ag::tanh(y), ag::square(y)));
    };
    auto r1 = oracle::gradcheck(loss_train, {x, gamma, beta});
    EXPECT_LT(r1.max_rel_error, 1e-6) << r1.worst;
    auto r2 = oracle::gradcheck(loss_eval, {x, gamma, beta});
    EXPECT_LT(r2.max_rel_error, 1e-6) << r2.worst;
}

TEST(Autodiff, RecurrentCellGradients) {
    nn::Rng rng(7);
    nn::ParamStore store;
    nn::LstmCell lstm(store, "lstm", 3, 4, rng);
    nn::GruCell gru(store, "gru", 4, 5, rng);
    Mat x = rng.normal_matrix(2, 3);
    auto loss = [&] {
        Var h = Var::constant(Mat::Zero(2, 4)), c = Var::constant(Mat::Zero(2, 4));
        Var g = Var::constant(Mat::Zero(2, 5));
        for (int t = 0; t < 3; ++t) {
            std::tie(h, c) = lstm(Var::constant(x * (t + 1)), h, c);
            g = gru(h, g);
        }
        return ag::sum(ag::square(g));
    };
    auto r = oracle::gradcheck(loss, store.trainable());
    EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Autodiff, NoGradGuardSkipsGraph) {
    Var a(Mat::Ones(2, 2), true);
    {
        ag::NoGradGuard guard;
        Var b = ag::scale(a, 2.0);
        EXPECT_FALSE(b.requires_grad());
    }
    EXPECT_TRUE(ag::scale(a, 2.0).requires_grad());
}

TEST(Autodiff, AdamMinimizesQuadratic) {
    Var x(Mat::Constant(1, 3, 5.0), true);
    nn::Adam opt({x}, 0.1);
    for (int i = 0; i < 500; ++i) {
        opt.zero_grad();
        ag::sum(ag::square(ag::add_scalar(x, -1.0))).backward();
        opt.step();
    }
    EXPECT_NEAR(x.value()(0, 0), 1.0, 1e-3);
}

TEST(ParamStore, SaveLoadRoundTripsThroughF32) {
    nn::Rng rng(8);
    nn::ParamStore a, b;
    nn::Linear la(a, "fc", 3, 2, rng);
    nn::Rng rng2(9);
    nn::Linear lb(b, "fc", 3, 2, rng2);
    auto dir = std::filesystem::temp_directory_path() / "vf_paramstore_test";
    std::filesystem::remove_all(dir);
    a.save(dir);
    b.load(dir);
    a.round_to_f32();
    EXPECT_EQ(a.checksum(), b.checksum());
    std::filesystem::remove_all(dir);
}
