#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include <voxcell/checks.hpp>
#include <voxcell/voxcell.hpp>

using namespace voxcell;
using checks::CheckResult;

namespace {

const GridSpec kToySpec = GridSpec::with_pitch(16);

std::vector<const DensityGrid*> density_ptrs(std::span<const models::TrainingSample> samples) {
    std::vector<const DensityGrid*> out;
    for (const auto& s : samples) out.push_back(&s.density);
    return out;
}

std::vector<const DensityGrid*> grid_ptrs(const std::vector<DensityGrid>& grids) {
    std::vector<const DensityGrid*> out;
    for (const auto& g : grids) out.push_back(&g);
    return out;
}

models::TrainConfig toy_train_config(std::uint64_t seed) {
    models::TrainConfig cfg;
    cfg.lr = 1e-3;
    cfg.batch = 8;
    cfg.seed = seed;
    return cfg;
}

CheckResult autodiff() {
    checks::detail::Stopwatch sw;
    int failed = 0, total = 0;
    std::string first_failure;
    for (const auto& r : checks::gradcheck_suite()) {
        ++total;
        if (!r.passed) {
            ++failed;
            if (first_failure.empty()) first_failure = "; first failure: " + r.name + " (" + r.detail + ")";
        }
    }
    const double secs = sw.seconds();
    return {"autodiff", failed == 0 && secs < 120,
            checks::detail::format(total - failed, "/", total, " op checks pass (20 shapes each, end-to-end and naive conv "
                                                               "included), ",
                                   secs, " s", first_failure),
            secs};
}

struct SmokeRun {
    CheckResult result;
    bool ok = false;
};

/// Joint training of the toy VAE + U-Net on eight samples.
SmokeRun smoke_training(models::VoxelVae<float>& vae, models::UNet<float>& unet,
                        std::span<const models::TrainingSample> data) {
    checks::detail::Stopwatch sw;
    constexpr long kSteps = 300;
    constexpr std::size_t kTail = 20;
    std::vector<double> re;
    std::string error;
    try {
        for (const auto& m : models::train_joint(vae, unet, data, toy_train_config(11), kSteps))
            re.push_back(m.vae.reconstruction);
    } catch (const Error& e) {
        error = e.what();
    }
    const double secs = sw.seconds();
    if (!error.empty() || re.size() < kTail)
        return {{"smoke training", false, "training stopped: " + error, secs}};
    const double initial = re.front();
    const double final_mse = std::accumulate(re.end() - kTail, re.end(), 0.0) / kTail;
    const bool ok = final_mse < 0.25 * initial && secs < 600;
    return {{"smoke training", ok,
             checks::detail::format(data.size(), " samples, ", re.size(), " joint steps: reconstruction MSE ", initial,
                                    " -> ", final_mse, " (mean of last ", kTail, " steps, ratio ", final_mse / initial,
                                    ", limit 0.25), all losses finite, ", secs, " s"),
             secs},
            ok};
}

CheckResult unet_overfit() {
    checks::detail::Stopwatch sw;
    const auto cfg = models::ModelConfig::toy(16, 16);
    const UnitCell cell(LatticeParams{3.1, 3.4, 2.9, 80, 95, 105},
                        {{8, {0, 0, 0}}, {14, {0.5, 0.5, 0.5}}, {3, {0.1, 0.6, 0.3}}});
    const auto sample = make_sample(cell, Representation::RepeatedLattice, 3, kToySpec);
    std::mt19937_64 init(5);
    models::UNet<float> unet(cfg, init);
    const DensityGrid* dp[] = {&sample.density};
    const SpeciesGrid* sp[] = {&sample.species};
    const auto x = models::density_batch<float>(dp);
    const auto target = models::one_hot_batch<float>(sp, cfg.num_classes);
    tc::Adam<float> opt({.lr = 1e-2});
    auto params = unet.registry().params;

    std::size_t labelled = 0;
    for (auto l : sample.species.labels) labelled += l != 0;
    double agreement = 0;
    long step = 0;
    while (step < 2000 && agreement < 0.999) {
        ++step;
        tc::Graph<float> g;
        const auto loss = models::unet_loss(unet(g, g.constant(x), true), g.constant(target));
        tc::zero_grads(params);
        g.backward(loss, &params);
        opt.step(params);
        if (step % 50 == 0) {
            const auto labels = argmax_labels(models::segment_logits(unet, std::span<const DensityGrid* const>(dp, 1))[0]);
            std::size_t same = 0;
            for (std::size_t i = 0; i < labels.labels.size(); ++i) same += labels.labels[i] == sample.species.labels[i];
            agreement = static_cast<double>(same) / static_cast<double>(labels.labels.size());
        }
    }
    return {"U-Net single-sample overfit", agreement >= 0.999,
            checks::detail::format("16^3 repeated-lattice sample (", labelled, " labelled voxels): argmax agreement ",
                                   agreement, " after ", step, " steps (limit 0.999 within 2000)"),
            sw.seconds()};
}

CheckResult conditioning(std::span<const models::TrainingSample> data) {
    checks::detail::Stopwatch sw;
    auto cfg = models::ModelConfig::toy(16, 16);
    cfg.conditioned = true;
    models::VoxelVae<float> vae(cfg, 21);
    std::mt19937_64 init(22);
    models::UNet<float> unet(cfg, init);
    models::train_joint(vae, unet, data, toy_train_config(23), 300);

    const auto ptrs = density_ptrs(data);
    const double dataset_max = models::dataset_max_density(data);
    auto z_fixed = models::encode(vae, std::span<const DensityGrid* const>(ptrs.data(), 1))[0];
    const double own_alpha = models::max_value(data[0].density) / dataset_max;
    for (auto& v : z_fixed.values) v /= own_alpha;
    const auto at_alpha = [&](double alpha) {
        models::LatentVector z = z_fixed;
        for (auto& v : z.values) v *= alpha;
        return models::decode(vae, std::span<const models::LatentVector>(&z, 1), kToySpec)[0];
    };
    const auto argmax = [](const DensityGrid& g) {
        return static_cast<std::size_t>(std::max_element(g.values.begin(), g.values.end()) - g.values.begin());
    };

    bool monotone = true, same_argmax = true;
    double prev = -std::numeric_limits<double>::infinity();
    std::ostringstream maxima;
    maxima.precision(3);
    const auto reference = at_alpha(1.0);
    for (int i = 1; i <= 10; ++i) {
        const double alpha = 0.1 * i;
        const auto grid = at_alpha(alpha);
        const double m = models::max_value(grid);
        monotone = monotone && m >= prev;
        same_argmax = same_argmax && argmax(grid) == argmax(reference);
        prev = m;
        maxima << (i > 1 ? ", " : "") << m / dataset_max;
    }
    return {"conditioning trend", monotone && same_argmax && prev > 0,
            "max density / dataset max over alpha = 0.1..1.0: [" + maxima.str() +
                "]; non-decreasing: " + (monotone ? "yes" : "no") + "; argmax preserved under z * alpha'/alpha: " +
                (same_argmax ? "yes" : "no"),
            sw.seconds()};
}

CheckResult discriminator(models::VoxelVae<float>& vae, std::span<const models::TrainingSample> train,
                          std::span<const models::TrainingSample> test) {
    checks::detail::Stopwatch sw;
    const auto cfg = vae.config();
    const auto train_ptrs = density_ptrs(train);
    const auto real = models::encode(vae, std::span<const DensityGrid* const>(train_ptrs));
    models::Discriminator<float> disc(cfg, 31);
    models::train_discriminator(disc, vae, std::span<const models::LatentVector>(real), kToySpec, {.seed = 32});

    const auto test_ptrs = density_ptrs(test);
    const auto test_codes = models::encode(vae, std::span<const DensityGrid* const>(test_ptrs));
    const auto decoded = models::decode(vae, std::span<const models::LatentVector>(test_codes), kToySpec);
    const double peak = models::dataset_max_density(train);
    std::mt19937_64 rng(33);
    std::vector<DensityGrid> noise;
    for (std::size_t i = 0; i < decoded.size(); ++i) {
        DensityGrid g{kToySpec, std::vector<double>(kToySpec.voxel_count())};
        for (auto& v : g.values) v = checks::detail::uniform(rng, 0, peak);
        noise.push_back(std::move(g));
    }
    std::vector<models::LatentVector> draws;
    for (std::size_t i = 0; i < decoded.size(); ++i) draws.push_back(models::sample_prior(rng, static_cast<std::size_t>(cfg.latent_dim)));
    const auto prior = models::decode(vae, std::span<const models::LatentVector>(draws), kToySpec);
    const auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
    const double real_score = mean(models::discriminator_scores(disc, grid_ptrs(decoded)));
    const double noise_score = mean(models::discriminator_scores(disc, grid_ptrs(noise)));
    const double prior_score = mean(models::discriminator_scores(disc, grid_ptrs(prior)));
    return {"discriminator ordering", real_score > noise_score,
            checks::detail::format("mean score of ", decoded.size(), " decoded test grids ", real_score, " vs ",
                                   noise.size(), " uniform-noise grids ", noise_score, " (decoded prior draws ",
                                   prior_score, ")"),
            sw.seconds()};
}

CheckResult interpolation(models::VoxelVae<float>& vae, std::span<const models::TrainingSample> data) {
    const auto ptrs = density_ptrs(data);
    const auto z = models::encode(vae, std::span<const DensityGrid* const>(ptrs.data(), 2));
    return checks::interpolation_endpoints(vae, z[0], z[1], kToySpec);
}

}  // namespace

int main() {
    std::setvbuf(stdout, nullptr, _IONBF, 0);
    std::vector<CheckResult> results;
    const auto report = [&](CheckResult r) {
        std::printf("%s  %-28s %s [%.1f s]\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str(), r.seconds);
        results.push_back(std::move(r));
    };

    report(checks::voxelizer_oracle());
    report(checks::mass_conservation());
    report(checks::lattice_geometry());
    report(autodiff());
    report(checks::loss_closed_forms());
    report(checks::segmentation_roundtrip());

    const auto all = checks::toy_training_set(12, kToySpec, 41);
    const std::span<const models::TrainingSample> train(all.data(), 8), test(all.data() + 8, 4);
    models::VoxelVae<float> vae(models::ModelConfig::toy(16, 16), 42);
    std::mt19937_64 init(43);
    models::UNet<float> unet(models::ModelConfig::toy(16, 16), init);
    auto smoke = smoke_training(vae, unet, train);
    report(smoke.result);

    report(unet_overfit());
    report(checks::gamma_coupling());
    report(conditioning(train));
    report(discriminator(vae, train, test));
    report(interpolation(vae, train));
    report(checks::metrics_oracles());

    const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.passed; });
    std::printf("%zu/%zu criteria pass\n", results.size() - static_cast<std::size_t>(failed), results.size());
    return failed == 0 ? 0 : 1;
}
