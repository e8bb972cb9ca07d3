#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <voxcell/checks.hpp>
#include <voxcell/tensor/checkpoint.hpp>

#include "test_util.hpp"

using namespace voxcell;
using tc::Graph;
using tc::Tensor;

namespace {

Tensor<double> iota(const tc::Shape& shape, double step = 1.0) {
    Tensor<double> t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = step * static_cast<double>(i);
    return t;
}

// Naive transposed correlation and weight gradient, the references for the
// two backward kernels.
void naive_conv_backward(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& gy,
                         const tc::Conv3dGeometry& g, Tensor<double>& gx, Tensor<double>& gw) {
    const long N = long(x.dim(0)), C = long(x.dim(1)), D = long(x.dim(2)), H = long(x.dim(3)), W = long(x.dim(4));
    const long O = long(w.dim(0)), K = long(w.dim(2));
    const long OD = long(gy.dim(2)), OH = long(gy.dim(3)), OW = long(gy.dim(4));
    gx = Tensor<double>(x.shape());
    gw = Tensor<double>(w.shape());
    for (long n = 0; n < N; ++n)
        for (long o = 0; o < O; ++o)
            for (long a = 0; a < OD; ++a)
                for (long b = 0; b < OH; ++b)
                    for (long c = 0; c < OW; ++c) {
                        const double go = gy[std::size_t((((n * O + o) * OD + a) * OH + b) * OW + c)];
                        for (long ci = 0; ci < C; ++ci)
                            for (long kd = 0; kd < K; ++kd)
                                for (long kh = 0; kh < K; ++kh)
                                    for (long kw = 0; kw < K; ++kw) {
                                        const long i = a * g.stride + kd - g.pad_lo, j = b * g.stride + kh - g.pad_lo,
                                                   k = c * g.stride + kw - g.pad_lo;
                                        if (i < 0 || j < 0 || k < 0 || i >= D || j >= H || k >= W) continue;
                                        const auto xi = std::size_t((((n * C + ci) * D + i) * H + j) * W + k);
                                        const auto wi = std::size_t((((o * C + ci) * K + kd) * K + kh) * K + kw);
                                        gx[xi] += go * w[wi];
                                        gw[wi] += go * x[xi];
                                    }
                    }
}

}  // namespace

TEST(Conv3d, AllOnesSum) {
    Graph<double> g;
    const auto y = tc::conv3d<double>(g.constant(Tensor<double>({1, 1, 3, 3, 3}, 1.0)),
                                      g.constant(Tensor<double>({1, 1, 3, 3, 3}, 1.0)), std::nullopt,
                                      tc::Conv3dGeometry::symmetric(1, 0));
    ASSERT_EQ(y.value().size(), 1u);
    EXPECT_EQ(y.value()[0], 27.0);
}

TEST(Conv3d, IdentityKernel) {
    Graph<double> g;
    Tensor<double> k({1, 1, 3, 3, 3}, 0.0);
    k[13] = 1;
    const auto x = iota({2, 1, 4, 5, 3}, 0.5);
    const auto y = tc::conv3d<double>(g.constant(x), g.constant(k), std::nullopt, tc::Conv3dGeometry::symmetric(1, 1));
    EXPECT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.value()[i], x[i]);
}

TEST(Conv3d, OutputExtent) {
    EXPECT_EQ(tc::Conv3dGeometry::symmetric(2, 2).out_extent(30, 5), 15);
    EXPECT_EQ(tc::Conv3dGeometry::symmetric(1, 0).out_extent(7, 3), 5);
    Graph<double> g;
    EXPECT_EQ(error_kind([&] {
                  tc::conv3d<double>(g.constant(Tensor<double>({1, 2, 3, 3, 3})), g.constant(Tensor<double>({1, 3, 3, 3, 3})),
                                     std::nullopt, tc::Conv3dGeometry::symmetric(1, 0));
              }),
              ErrorKind::ShapeMismatch);
}

TEST(Conv3d, BackwardKernelsMatchNaiveReference) {
    std::mt19937_64 rng(12);
    for (int t = 0; t < 12; ++t) {
        const std::size_t k = static_cast<std::size_t>(checks::detail::uniform_int(rng, 1, 4));
        tc::Conv3dGeometry geom{checks::detail::uniform_int(rng, 1, 2), checks::detail::uniform_int(rng, 0, 2),
                                checks::detail::uniform_int(rng, 0, 2)};
        const tc::Shape xs{2, 3, 7, 6, 8};
        if (geom.out_extent(6, long(k)) < 1) continue;
        auto x = checks::detail::param(checks::detail::random_tensor(xs, rng));
        auto w = checks::detail::param(checks::detail::random_tensor({2, 3, k, k, k}, rng));
        Graph<double> g;
        const auto y = tc::conv3d<double>(g.param(x), g.param(w), std::nullopt, geom);
        const auto r = checks::detail::random_tensor(y.shape(), rng);
        tc::ParamList<double> params{&x, &w};
        tc::zero_grads(params);
        g.backward(tc::dot_constant(y, r), &params);
        Tensor<double> gx, gw;
        naive_conv_backward(x.value, w.value, r, geom, gx, gw);
        for (std::size_t i = 0; i < gx.size(); ++i) ASSERT_NEAR(x.grad[i], gx[i], 1e-12);
        for (std::size_t i = 0; i < gw.size(); ++i) ASSERT_NEAR(w.grad[i], gw[i], 1e-11);
    }
}

TEST(Upsample, ConstantAndRamp) {
    Graph<double> g;
    const auto c = tc::trilinear_upsample(g.constant(Tensor<double>({1, 2, 3, 3, 3}, 2.5)), 2);
    EXPECT_EQ(c.shape(), (tc::Shape{1, 2, 6, 6, 6}));
    for (double v : c.value().values()) EXPECT_NEAR(v, 2.5, 1e-15);

    Tensor<double> ramp({1, 1, 4, 3, 3});
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 9; ++j) ramp[i * 9 + j] = static_cast<double>(i);
    const auto u = tc::trilinear_upsample(g.constant(ramp), 2);
    for (std::size_t i = 1; i + 1 < 8; ++i) {
        const double expected = (static_cast<double>(i) + 0.5) / 2 - 0.5;
        for (std::size_t j = 0; j < 36; ++j) EXPECT_NEAR(u.value()[i * 36 + j], expected, 1e-6);
    }
}

TEST(BatchNorm, TrainNormalisesAndUpdatesRunningStats) {
    std::mt19937_64 rng(1);
    Graph<double> g;
    const auto x = checks::detail::random_tensor({3, 2, 4, 4, 4}, rng, 2, 5);
    Tensor<double> rm({2}, 0.0), rv({2}, 1.0);
    const auto y = tc::batch_norm(g.constant(x), g.constant(Tensor<double>({2}, 1.0)), g.constant(Tensor<double>({2}, 0.0)),
                                  rm, rv);
    const std::size_t s = 64;
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0, var = 0, xmean = 0;
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t v = 0; v < s; ++v) {
                mean += y.value()[(n * 2 + c) * s + v];
                xmean += x[(n * 2 + c) * s + v];
            }
        mean /= 3 * s;
        xmean /= 3 * s;
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t v = 0; v < s; ++v) var += std::pow(y.value()[(n * 2 + c) * s + v] - mean, 2);
        var /= 3 * s;
        EXPECT_NEAR(mean, 0, 1e-12);
        EXPECT_NEAR(var, 1, 1e-4);
        EXPECT_NEAR(rm[c], 0.1 * xmean, 1e-12);
    }
}

TEST(BatchNorm, EvalWithUnitStatsIsIdentity) {
    std::mt19937_64 rng(2);
    Graph<double> g;
    const auto x = checks::detail::random_tensor({2, 3, 2, 2, 2}, rng);
    Tensor<double> rm({3}, 0.0), rv({3}, 1.0);
    const auto y = tc::batch_norm(g.constant(x), g.constant(Tensor<double>({3}, 1.0)), g.constant(Tensor<double>({3}, 0.0)),
                                  rm, rv, {.train = false});
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.value()[i], x[i] / std::sqrt(1 + 1e-5), 1e-15);
}

TEST(BatchNorm, SingleValueBatchRejected) {
    Graph<double> g;
    Tensor<double> rm({1}, 0.0), rv({1}, 1.0);
    EXPECT_EQ(error_kind([&] {
                  tc::batch_norm(g.constant(Tensor<double>({1, 1, 1, 1, 1})), g.constant(Tensor<double>({1}, 1.0)),
                                 g.constant(Tensor<double>({1}, 0.0)), rm, rv);
              }),
              ErrorKind::BatchTooSmall);
}

TEST(Elementwise, Activations) {
    Graph<double> g;
    const auto x = g.constant(Tensor<double>({3}, std::vector<double>{-1, 2, -3}));
    const auto l = tc::leaky_relu(x, 0.01);
    EXPECT_DOUBLE_EQ(l.value()[0], -0.01);
    EXPECT_DOUBLE_EQ(l.value()[1], 2);
    EXPECT_EQ(tc::relu(x).value()[2], 0.0);
    EXPECT_DOUBLE_EQ(tc::sigmoid(x).value()[1], 1 / (1 + std::exp(-2.0)));
}

TEST(Linear, IdentityAndZeroWeight) {
    Graph<double> g;
    const auto x = iota({2, 3});
    Tensor<double> eye({3, 3}, 0.0);
    for (std::size_t i = 0; i < 3; ++i) eye[i * 4] = 1;
    const auto y = tc::linear(g.constant(x), g.constant(eye), std::optional(g.constant(Tensor<double>({3}, 0.0))));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y.value()[i], x[i]);
    const auto b = Tensor<double>({3}, std::vector<double>{1, 2, 3});
    const auto z = tc::linear(g.constant(x), g.constant(Tensor<double>({3, 3}, 0.0)), std::optional(g.constant(b)));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(z.value()[i], b[i % 3]);
}

TEST(Losses, ClosedForms) {
    Graph<double> g;
    const auto a = iota({2, 5});
    Tensor<double> b = a;
    EXPECT_EQ(tc::mse_loss(g.constant(a), g.constant(b)).value()[0], 0.0);
    for (auto& v : b.values()) v -= 2;
    EXPECT_DOUBLE_EQ(tc::mse_loss(g.constant(a), g.constant(b)).value()[0], 4.0);

    Tensor<double> logits({1, 3, 2, 2, 2}, -50.0), target({1, 3, 2, 2, 2}, 0.0);
    for (std::size_t v = 0; v < 8; ++v) {
        logits[8 + v] = 50;
        target[8 + v] = 1;
    }
    EXPECT_LT(tc::bce_with_logits(g.constant(logits), g.constant(target)).value()[0], 1e-20);

    const auto r = checks::loss_closed_forms();
    EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Losses, MseGradientIsScaledDifference) {
    std::mt19937_64 rng(3);
    auto p = checks::detail::param(checks::detail::random_tensor({4, 6}, rng));
    const auto t = checks::detail::random_tensor({4, 6}, rng);
    Graph<double> g;
    tc::ParamList<double> params{&p};
    tc::zero_grads(params);
    g.backward(tc::mse_loss(g.param(p), g.constant(t)), &params);
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(p.grad[i], 2 * (p.value[i] - t[i]) / 24, 1e-15);
}

TEST(Adam, FirstStepClosedForm) {
    tc::Parameter<double> p;
    p.value = Tensor<double>({3}, std::vector<double>{1, -2, 0.5});
    p.grad = Tensor<double>({3}, std::vector<double>{0.3, -4, 0});
    const auto before = p.value;
    tc::Adam<double> opt({.lr = 1e-3});
    opt.step({&p});
    for (std::size_t i = 0; i < 3; ++i) {
        const double gi = std::vector<double>{0.3, -4, 0}[i];
        EXPECT_NEAR(p.value[i] - before[i], -1e-3 * gi / (std::abs(gi) + 1e-8), 1e-12);
    }
    EXPECT_EQ(p.value[2], before[2]);
}

TEST(Adam, DescendsOnSquare) {
    tc::Parameter<double> p;
    p.value = Tensor<double>({1}, 1.0);
    tc::Adam<double> opt({.lr = 0.1});
    for (int s = 0; s < 2; ++s) {
        Graph<double> g;
        const auto x = g.param(p);
        p.zero_grad();
        g.backward(tc::mul(x, x), nullptr);
        opt.step({&p});
    }
    EXPECT_LT(p.value[0] * p.value[0], 1.0);
}

TEST(Graph, BackwardIsDeterministicAndRestrictedToTargets) {
    std::mt19937_64 rng(4);
    auto a = checks::detail::param(checks::detail::random_tensor({2, 2, 4, 4, 4}, rng));
    auto w = checks::detail::param(checks::detail::random_tensor({3, 2, 3, 3, 3}, rng));
    const auto run = [&](tc::ParamList<double> targets) {
        tc::ParamList<double> all{&a, &w};
        for (auto* p : all) p->grad = Tensor<double>();
        Graph<double> g;
        const auto y = tc::conv3d<double>(g.param(a), g.param(w), std::nullopt, tc::Conv3dGeometry::symmetric(1, 1));
        g.backward(tc::mse_loss(y, g.constant(Tensor<double>(y.shape(), 0.3))), &targets);
        return std::pair{a.grad, w.grad};
    };
    const auto first = run({&a, &w});
    const auto second = run({&a, &w});
    EXPECT_EQ(first.first, second.first);
    EXPECT_EQ(first.second, second.second);
    const auto only_w = run({&w});
    EXPECT_TRUE(only_w.first.empty());
    EXPECT_EQ(only_w.second, first.second);
}

TEST(Gradcheck, EveryOpPasses) {
    for (const auto& r : checks::gradcheck_suite({.shapes_per_op = 20, .seed = 99, .end_to_end = false}))
        EXPECT_TRUE(r.passed) << r.name << ": " << r.detail;
}

TEST(Checkpoint, RoundTripAndMismatch) {
    std::mt19937_64 rng(5);
    auto a = checks::detail::random_tensor({2, 3}, rng);
    auto b = checks::detail::random_tensor({4}, rng);
    const tc::StateDict<double> state{{"a", &a}, {"b", &b}};
    const auto path = std::filesystem::temp_directory_path() / ("voxcell_ckpt_" + std::to_string(::getpid()));
    tc::save_checkpoint(path.string(), state);

    Tensor<double> a2({2, 3}), b2({4});
    tc::load_checkpoint(path.string(), tc::StateDict<double>{{"a", &a2}, {"b", &b2}});
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a2[i], static_cast<double>(static_cast<float>(a[i])));
    for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(b2[i], static_cast<double>(static_cast<float>(b[i])));

    Tensor<double> wrong({3, 2});
    EXPECT_EQ(error_kind([&] { tc::load_checkpoint(path.string(), tc::StateDict<double>{{"a", &wrong}, {"b", &b2}}); }),
              ErrorKind::ShapeMismatch);
    EXPECT_EQ(error_kind([&] { tc::load_checkpoint(path.string(), tc::StateDict<double>{{"a", &a2}}); }),
              ErrorKind::ShapeMismatch);
    std::filesystem::remove(path);
}
