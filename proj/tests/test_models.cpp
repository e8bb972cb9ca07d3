#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <voxcell/checks.hpp>

#include "test_util.hpp"

using namespace voxcell;
using tc::Graph;
using tc::Tensor;

namespace {

std::vector<const DensityGrid*> ptrs(const std::vector<models::TrainingSample>& s) {
    std::vector<const DensityGrid*> out;
    for (const auto& x : s) out.push_back(&x.density);
    return out;
}

}  // namespace

TEST(Encoder, SpatialTrace) {
    EXPECT_EQ(models::encoder_sides(30), (std::array<int, 5>{30, 15, 15, 15, 8}));
}

TEST(Encoder, PublishedSizeZeroGridAndBatchIndependence) {
    models::VoxelVae<float> vae(models::ModelConfig{}, 1);
    Graph<float> g;
    const auto out = vae.encoder()(g, g.constant(Tensor<float>({2, 1, 30, 30, 30}, 0.0f)), false);
    EXPECT_EQ(out.mu.shape(), (tc::Shape{2, 300}));
    EXPECT_EQ(out.logvar.shape(), (tc::Shape{2, 300}));
    for (std::size_t i = 0; i < 300; ++i) {
        EXPECT_TRUE(std::isfinite(out.mu.value()[i]));
        EXPECT_EQ(out.mu.value()[i], out.mu.value()[300 + i]);
        EXPECT_GE(out.logvar.value()[i], -10.0f);
        EXPECT_LE(out.logvar.value()[i], 10.0f);
    }
    EXPECT_EQ(error_kind([&] { vae.encoder()(g, g.constant(Tensor<float>({1, 1, 20, 20, 20})), false); }),
              ErrorKind::ShapeMismatch);
}

TEST(Decoder, PublishedSizeShapeNonNegativeDeterministic) {
    models::VoxelVae<float> vae(models::ModelConfig{}, 2);
    std::mt19937_64 rng(3);
    const std::vector<models::LatentVector> zs{models::sample_prior(rng), models::sample_prior(rng)};
    const GridSpec spec;
    const auto a = models::decode(vae, std::span<const models::LatentVector>(zs), spec);
    const auto b = models::decode(vae, std::span<const models::LatentVector>(zs), spec);
    ASSERT_EQ(a.size(), 2u);
    EXPECT_EQ(a[0].values.size(), 27000u);
    for (double v : a[0].values) EXPECT_GE(v, 0.0);
    EXPECT_EQ(a[1].values, b[1].values);
}

TEST(UNet, ShapesWithAndWithoutAttention) {
    auto cfg = models::ModelConfig::toy(12, 8);
    cfg.unet_base_channels = 4;
    std::mt19937_64 r1(4), r2(4);
    models::UNet<float> gated(cfg, r1);
    cfg.attention = false;
    models::UNet<float> plain(cfg, r2);
    Graph<float> g;
    const auto x = g.constant(Tensor<float>({2, 1, 12, 12, 12}, 0.5f));
    EXPECT_EQ(gated(g, x, true).shape(), (tc::Shape{2, 101, 12, 12, 12}));
    EXPECT_EQ(plain(g, x, true).shape(), (tc::Shape{2, 101, 12, 12, 12}));
    EXPECT_GT(gated.registry().params.size(), plain.registry().params.size());
}

TEST(UNet, PublishedGridShape) {
    models::ModelConfig cfg;
    std::mt19937_64 rng(5);
    models::UNet<float> unet(cfg, rng);
    Graph<float> g;
    EXPECT_EQ(unet(g, g.constant(Tensor<float>({1, 1, 30, 30, 30}, 0.1f)), false).shape(), (tc::Shape{1, 101, 30, 30, 30}));
}

TEST(Reparameterize, LimitsAndMonteCarloMean) {
    Graph<double> g;
    std::mt19937_64 rng(6);
    const auto mu = checks::detail::random_tensor({1, 50}, rng);
    const auto eps = models::standard_normal<double>({1, 50}, rng);
    const auto z = tc::reparameterize(g.constant(mu), g.constant(Tensor<double>({1, 50}, -10.0)), eps);
    for (std::size_t i = 0; i < 50; ++i) EXPECT_LE(std::abs(z.value()[i] - mu[i]), 0.007 * std::abs(eps[i]) + 1e-15);

    constexpr std::size_t n = 10000;
    Tensor<double> mus({n, 1}, 0.7), logvars({n, 1}, std::log(4.0));
    const auto draws = tc::reparameterize(g.constant(mus), g.constant(logvars), models::standard_normal<double>({n, 1}, rng));
    double mean = 0;
    for (double v : draws.value().values()) mean += v;
    mean /= n;
    EXPECT_LT(std::abs(mean - 0.7), 3 * 2.0 / std::sqrt(double(n)));

    std::mt19937_64 a(9), b(9);
    EXPECT_EQ(models::standard_normal<double>({3, 4}, a), models::standard_normal<double>({3, 4}, b));
}

TEST(VaeLoss, ReducesToReconstructionAndVanishesWhenPerfect) {
    std::mt19937_64 rng(7);
    Graph<double> g;
    const auto m = checks::detail::random_tensor({2, 1, 3, 3, 3}, rng, 0, 1);
    const auto m_hat = checks::detail::random_tensor({2, 1, 3, 3, 3}, rng, 0, 1);
    Tensor<double> target({2, 4, 3, 3, 3}, 0.0), logits({2, 4, 3, 3, 3}, -60.0);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t v = 0; v < 27; ++v) {
            target[(n * 4 + 1) * 27 + v] = 1;
            logits[(n * 4 + 1) * 27 + v] = 60;
        }
    auto flipped = logits;
    for (auto& v : flipped.values()) v = -v;
    const auto zeros = g.constant(Tensor<double>({2, 5}, 0.0));
    const auto noisy = g.constant(checks::detail::random_tensor({2, 5}, rng));

    models::TrainConfig cfg;
    cfg.beta = 0;
    cfg.gamma = 0;
    const auto plain = models::breakdown(
        models::vae_loss(g.constant(m_hat), g.constant(m), noisy, noisy, g.constant(flipped), g.constant(target), cfg));
    EXPECT_EQ(plain.total, plain.reconstruction);

    const auto perfect = models::breakdown(models::vae_loss(g.constant(m), g.constant(m), zeros, zeros, g.constant(logits),
                                                            g.constant(target), models::TrainConfig{}));
    EXPECT_LT(perfect.total, 1e-20);
}

TEST(JointTraining, SmokeDescentAndDeterminism) {
    const auto spec = GridSpec::with_pitch(8);
    const auto data = checks::toy_training_set(4, spec, 3);
    const auto run = [&] {
        const auto cfg = models::ModelConfig::toy(8, 4);
        models::VoxelVae<float> vae(cfg, 1);
        std::mt19937_64 init(2);
        models::UNet<float> unet(cfg, init);
        models::TrainConfig tcfg;
        tcfg.lr = 3e-3;
        tcfg.batch = 4;
        tcfg.seed = 5;
        std::vector<nlohmann::json> records;
        models::train_joint(vae, unet, std::span<const models::TrainingSample>(data), tcfg, 60,
                            [&](const models::StepMetrics& m) {
                                records.push_back(models::to_json_record(m));
                                return true;
                            });
        return records;
    };
    const auto a = run();
    const auto b = run();
    ASSERT_EQ(a.size(), 60u);
    EXPECT_EQ(a, b);
    for (const char* key : {"step", "L_RE", "KL", "L_BCE", "total"}) EXPECT_TRUE(a[0].contains(key)) << key;
    double tail = 0;
    for (std::size_t i = 50; i < 60; ++i) tail += a[i]["L_RE"].get<double>() / 10;
    EXPECT_LT(tail, a[0]["L_RE"].get<double>());
}

TEST(JointTraining, EarlyStopAndEmptyDataset) {
    const auto cfg = models::ModelConfig::toy(8, 4);
    models::VoxelVae<float> vae(cfg, 1);
    std::mt19937_64 init(2);
    models::UNet<float> unet(cfg, init);
    const auto data = checks::toy_training_set(2, GridSpec::with_pitch(8), 4);
    models::TrainConfig tcfg;
    tcfg.batch = 2;
    const auto log = models::train_joint(vae, unet, std::span<const models::TrainingSample>(data), tcfg, 10,
                                         [](const models::StepMetrics& m) { return m.step < 3; });
    EXPECT_EQ(log.size(), 3u);
    EXPECT_EQ(error_kind([&] { models::train_joint(vae, unet, std::span<const models::TrainingSample>(), tcfg, 1); }),
              ErrorKind::EmptyDataset);
}

TEST(JointTraining, GammaCoupling) {
    const auto r = checks::gamma_coupling(17);
    EXPECT_TRUE(r.passed) << r.detail;
}

TEST(JointTraining, EndToEndGradcheck) {
    std::mt19937_64 rng(21);
    EXPECT_LT(checks::end_to_end_gradcheck(rng, 150), 1e-3);
}

TEST(Conditioning, ScaleAndErrors) {
    const models::LatentVector z{{0.5, -1.0, 2.0}};
    EXPECT_EQ(models::condition_scale(z, 1.0), z);
    EXPECT_EQ(models::condition_scale(z, 2.0).values, (std::vector<double>{1.0, -2.0, 4.0}));
    EXPECT_EQ(error_kind([&] { models::condition_scale(z, 0.0); }), ErrorKind::NonPositiveAlpha);
    EXPECT_EQ(error_kind([&] { models::condition_scale(z, -1.0); }), ErrorKind::NonPositiveAlpha);
}

TEST(Conditioning, BiasFreeDecoderScalesWithoutMovingArgmax) {
    auto cfg = models::ModelConfig::toy(8, 6);
    cfg.conditioned = true;
    models::VoxelVae<double> vae(cfg, 8);
    std::mt19937_64 rng(9);
    const auto z = models::sample_prior(rng, 6);
    const auto spec = GridSpec::with_pitch(8);
    const auto one = [&](double alpha) {
        const auto s = models::condition_scale(z, alpha);
        return models::decode(vae, std::span<const models::LatentVector>(&s, 1), spec)[0];
    };
    const auto base = one(1.0);
    const auto doubled = one(2.0);
    for (std::size_t i = 0; i < base.values.size(); ++i) EXPECT_NEAR(doubled.values[i], 2 * base.values[i], 1e-12);
}

TEST(Latent, InterpolationAndPrior) {
    std::mt19937_64 rng(10);
    const auto z1 = models::sample_prior(rng, 300), z2 = models::sample_prior(rng, 300);
    EXPECT_EQ(models::latent_interpolate(z1, z2, 0.0), z1);
    EXPECT_EQ(models::latent_interpolate(z1, z2, 1.0), z2);
    const auto mid = models::latent_interpolate(z1, z2, 0.5);
    double n1 = 0, n2 = 0, nm = 0;
    for (std::size_t i = 0; i < 300; ++i) {
        EXPECT_NEAR(mid.values[i], 0.5 * (z1.values[i] + z2.values[i]), 1e-15);
        n1 += z1.values[i] * z1.values[i];
        n2 += z2.values[i] * z2.values[i];
        nm += mid.values[i] * mid.values[i];
    }
    EXPECT_LE(nm, std::max(n1, n2));

    std::mt19937_64 a(11), b(11);
    EXPECT_EQ(models::sample_prior(a, 300), models::sample_prior(b, 300));
    constexpr int draws = 10000;
    std::vector<double> mean(5, 0.0);
    std::mt19937_64 mc(12);
    for (int d = 0; d < draws; ++d) {
        const auto z = models::sample_prior(mc, 5);
        for (std::size_t i = 0; i < 5; ++i) mean[i] += z.values[i] / draws;
    }
    for (double m : mean) EXPECT_LT(std::abs(m), 3 / std::sqrt(double(draws)));
}

TEST(Discriminator, MixingAndUntrainedGuard) {
    const models::LatentVector real{{1, 2, 3}}, prior{{-1, 0, 5}};
    EXPECT_EQ(models::mix_latents(prior, real, 0.0), real);
    EXPECT_EQ(models::mix_latents(prior, real, 1.0), prior);
    EXPECT_NEAR(models::mix_latents(prior, real, 0.25).values[2], 0.25 * 5 + 0.75 * 3, 1e-15);

    const auto cfg = models::ModelConfig::toy(8, 3);
    models::Discriminator<float> disc(cfg, 1);
    const auto data = checks::toy_training_set(2, GridSpec::with_pitch(8), 6);
    const auto grids = ptrs(data);
    EXPECT_EQ(error_kind([&] { models::discriminator_scores(disc, std::span<const DensityGrid* const>(grids)); }),
              ErrorKind::UntrainedModel);

    models::VoxelVae<float> vae(cfg, 2);
    const auto codes = models::encode(vae, std::span<const DensityGrid* const>(grids));
    const auto losses = models::train_discriminator(disc, vae, std::span<const models::LatentVector>(codes),
                                                    GridSpec::with_pitch(8), {.steps = 5, .batch = 4, .seed = 3});
    EXPECT_EQ(losses.size(), 5u);
    const auto scores = models::discriminator_scores(disc, std::span<const DensityGrid* const>(grids));
    ASSERT_EQ(scores.size(), 2u);
    for (double s : scores) {
        EXPECT_GT(s, 0.0);
        EXPECT_LT(s, 1.0);
    }
}

TEST(Checkpoint, ModelStateRoundTrip) {
    const auto cfg = models::ModelConfig::toy(8, 4);
    models::VoxelVae<float> a(cfg, 1), b(cfg, 2);
    const auto path = std::filesystem::temp_directory_path() / ("voxcell_model_" + std::to_string(::getpid()));
    tc::save_checkpoint(path.string(), a.registry().state);
    tc::load_checkpoint(path.string(), b.registry().state);
    std::mt19937_64 rng(3);
    const auto z = models::sample_prior(rng, 4);
    const auto spec = GridSpec::with_pitch(8);
    EXPECT_EQ(models::decode(a, std::span<const models::LatentVector>(&z, 1), spec)[0].values,
              models::decode(b, std::span<const models::LatentVector>(&z, 1), spec)[0].values);
    std::filesystem::remove(path);
}
