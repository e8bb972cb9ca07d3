#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "../tensor/optim.hpp"
#include "../voxelizer.hpp"
#include "latent.hpp"
#include "networks.hpp"

namespace voxcell::models {

// ---------------------------------------------------------------------------
// Batch assembly

template <typename T>
Tensor<T> density_batch(std::span<const DensityGrid* const> grids) {
    if (grids.empty()) fail(ErrorKind::EmptyDataset, "empty batch");
    const auto s = static_cast<std::size_t>(grids[0]->spec.side_voxels);
    Tensor<T> out({grids.size(), 1, s, s, s});
    const std::size_t v = s * s * s;
    for (std::size_t n = 0; n < grids.size(); ++n) {
        if (grids[n]->values.size() != v) fail(ErrorKind::ShapeMismatch, "grids in a batch must share one size");
        for (std::size_t i = 0; i < v; ++i) out[n * v + i] = static_cast<T>(grids[n]->values[i]);
    }
    return out;
}

template <typename T>
Tensor<T> one_hot_batch(std::span<const SpeciesGrid* const> grids, int num_classes) {
    if (grids.empty()) fail(ErrorKind::EmptyDataset, "empty batch");
    const auto s = static_cast<std::size_t>(grids[0]->spec.side_voxels);
    const std::size_t v = s * s * s, c = static_cast<std::size_t>(num_classes);
    Tensor<T> out({grids.size(), c, s, s, s});
    for (std::size_t n = 0; n < grids.size(); ++n) {
        if (grids[n]->labels.size() != v) fail(ErrorKind::ShapeMismatch, "grids in a batch must share one size");
        for (std::size_t i = 0; i < v; ++i) {
            const std::size_t label = grids[n]->labels[i];
            if (label >= c) fail(ErrorKind::LabelOutOfRange, "label exceeds class count");
            out[(n * c + label) * v + i] = T(1);
        }
    }
    return out;
}

/// One batch row of [N,C,S,S,S] logits as a class-score grid.
template <typename T>
ClassProbGrid class_grid_from_logits(const Tensor<T>& logits, std::size_t row, const GridSpec& spec) {
    const std::size_t c = logits.dim(1), v = spec.voxel_count();
    if (logits.size() / logits.dim(0) != c * v) fail(ErrorKind::ShapeMismatch, "logits do not match the grid spec");
    ClassProbGrid out{spec, static_cast<int>(c), std::vector<float>(c * v)};
    for (std::size_t i = 0; i < c * v; ++i) out.scores[i] = static_cast<float>(logits[row * c * v + i]);
    return out;
}

template <typename T>
DensityGrid density_grid_from_tensor(const Tensor<T>& t, std::size_t row, const GridSpec& spec) {
    const std::size_t v = spec.voxel_count();
    if (t.size() / t.dim(0) != v) fail(ErrorKind::ShapeMismatch, "tensor does not match the grid spec");
    DensityGrid g{spec, std::vector<double>(v)};
    for (std::size_t i = 0; i < v; ++i) g.values[i] = static_cast<double>(t[row * v + i]);
    return g;
}

template <typename T>
Tensor<T> latent_batch(std::span<const LatentVector> zs) {
    if (zs.empty()) fail(ErrorKind::EmptyDataset, "empty latent batch");
    const std::size_t d = zs[0].dim();
    Tensor<T> out({zs.size(), d});
    for (std::size_t n = 0; n < zs.size(); ++n) {
        if (zs[n].dim() != d) fail(ErrorKind::ShapeMismatch, "latent vectors differ in dimension");
        for (std::size_t i = 0; i < d; ++i) out[n * d + i] = static_cast<T>(zs[n].values[i]);
    }
    return out;
}

inline double max_value(const DensityGrid& g) {
    return g.values.empty() ? 0.0 : *std::max_element(g.values.begin(), g.values.end());
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
struct VaeLoss {
    Var<T> reconstruction;
    Var<T> kl;
    Var<T> segmentation;
    Var<T> total;
};

struct LossBreakdown {
    double reconstruction = 0;
    double kl = 0;
    double segmentation = 0;
    double total = 0;
};

template <typename T>
Var<T> segmentation_loss(const Var<T>& logits, const Var<T>& target, SegmentationLoss kind) {
    return kind == SegmentationLoss::SigmoidBce ? tc::bce_with_logits(logits, target)
                                                : tc::softmax_cross_entropy(logits, target);
}

/// L_RE(recon, target) + beta * KL + gamma * L_seg, with each term kept.
template <typename T>
VaeLoss<T> vae_loss(const Var<T>& recon, const Var<T>& target, const Var<T>& mu, const Var<T>& logvar,
                    const Var<T>& seg_logits, const Var<T>& seg_target, const TrainConfig& cfg) {
    VaeLoss<T> l;
    l.reconstruction = tc::mse_loss(recon, target);
    l.kl = tc::kl_diag_gaussian(mu, logvar);
    l.segmentation = segmentation_loss(seg_logits, seg_target, cfg.seg_loss);
    l.total = tc::weighted_sum<T>({l.reconstruction, l.kl, l.segmentation}, {T(1), T(cfg.beta), T(cfg.gamma)});
    return l;
}

template <typename T>
LossBreakdown breakdown(const VaeLoss<T>& l) {
    return {static_cast<double>(l.reconstruction.value()[0]), static_cast<double>(l.kl.value()[0]),
            static_cast<double>(l.segmentation.value()[0]), static_cast<double>(l.total.value()[0])};
}

template <typename T>
Var<T> unet_loss(const Var<T>& seg_logits, const Var<T>& seg_target, SegmentationLoss kind = SegmentationLoss::SigmoidBce) {
    return segmentation_loss(seg_logits, seg_target, kind);
}

// ---------------------------------------------------------------------------
// Joint forward pass

template <typename T>
struct JointForward {
    Var<T> mu, logvar;  // posterior fed to the KL term (normalised when conditioned)
    Var<T> z;
    Var<T> recon;
    Var<T> seg_logits;
    VaeLoss<T> vae;
    Var<T> unet;
};

/// Encoder -> reparameterise -> decoder -> U-Net on the reconstruction, plus
/// both objectives. With `alphas` set, the posterior is divided by each
/// sample's normalised peak density and the decoder input multiplied by it.
template <typename T>
JointForward<T> joint_forward(Graph<T>& g, VoxelVae<T>& vae, UNet<T>& unet, const Tensor<T>& density,
                              const Tensor<T>& one_hot, const Tensor<T>& eps, const TrainConfig& cfg,
                              const std::vector<T>* alphas = nullptr, bool train = true) {
    JointForward<T> f;
    const auto x = g.constant(density);
    auto enc = vae.encoder()(g, x, train);
    f.mu = enc.mu;
    f.logvar = enc.logvar;
    if (alphas) {
        std::vector<T> inv(alphas->size()), shift(alphas->size());
        for (std::size_t n = 0; n < alphas->size(); ++n) inv[n] = T(1) / (*alphas)[n];
        f.mu = tc::scale_rows(enc.mu, inv);
        // logvar of (posterior / alpha) is logvar - 2 ln alpha.
        const std::size_t d = enc.logvar.dim(1);
        Tensor<T> offset(enc.logvar.shape());
        for (std::size_t n = 0; n < alphas->size(); ++n)
            for (std::size_t i = 0; i < d; ++i) offset[n * d + i] = T(-2) * std::log((*alphas)[n]);
        f.logvar = tc::add(enc.logvar, g.constant(std::move(offset)));
    }
    f.z = tc::reparameterize(f.mu, f.logvar, eps);
    const auto dec_in = alphas ? tc::scale_rows(f.z, *alphas) : f.z;
    f.recon = vae.decoder()(g, dec_in);
    f.seg_logits = unet(g, f.recon, train);
    const auto target = g.constant(density);
    const auto seg_target = g.constant(one_hot);
    f.vae = vae_loss(f.recon, target, f.mu, f.logvar, f.seg_logits, seg_target, cfg);
    f.unet = unet_loss(f.seg_logits, seg_target, cfg.seg_loss);
    return f;
}

template <typename T>
Tensor<T> standard_normal(const tc::Shape& shape, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(normal(rng));
    return t;
}

struct StepMetrics {
    long step = 0;
    LossBreakdown vae;
    double unet = 0;
};

inline nlohmann::json to_json_record(const StepMetrics& m) {
    return {{"step", m.step},
            {"L_RE", m.vae.reconstruction},
            {"KL", m.vae.kl},
            {"L_BCE", m.vae.segmentation},
            {"total", m.vae.total},
            {"L_UNet", m.unet}};
}

struct TrainingSample {
    DensityGrid density;
    SpeciesGrid species;
};

/// Joint optimisation: the VAE follows its objective (including the
/// gamma-weighted segmentation term through the U-Net into the decoder), the
/// U-Net follows the segmentation loss alone; each has its own Adam state.
template <typename T>
class JointTrainer {
public:
    JointTrainer(VoxelVae<T>& vae, UNet<T>& unet, TrainConfig cfg, double condition_max_density = 0)
        : vae_(vae),
          unet_(unet),
          cfg_(cfg),
          condition_max_(condition_max_density),
          rng_(cfg.seed ^ 0x9e3779b97f4a7c15ULL),
          vae_opt_({.lr = cfg.lr}),
          unet_opt_({.lr = cfg.lr}) {
        cfg_.validate();
        if (vae.config().conditioned)
            require(condition_max_ > 0, ErrorKind::InvalidArgument, "conditioned training needs the dataset peak density");
    }

    StepMetrics step(std::span<const TrainingSample* const> batch) {
        std::vector<const DensityGrid*> dens;
        std::vector<const SpeciesGrid*> spec;
        std::vector<T> alphas;
        for (const auto* s : batch) {
            dens.push_back(&s->density);
            spec.push_back(&s->species);
            alphas.push_back(T(std::max(max_value(s->density) / std::max(condition_max_, 1e-300), 1e-6)));
        }
        const auto density = density_batch<T>(dens);
        const auto one_hot = one_hot_batch<T>(spec, vae_.config().num_classes);
        const auto eps = standard_normal<T>({batch.size(), static_cast<std::size_t>(vae_.config().latent_dim)}, rng_);

        Graph<T> g;
        const auto f = joint_forward(g, vae_, unet_, density, one_hot, eps, cfg_,
                                     vae_.config().conditioned ? &alphas : nullptr, true);
        StepMetrics m;
        m.step = ++steps_;
        m.vae = breakdown(f.vae);
        m.unet = static_cast<double>(f.unet.value()[0]);
        if (!std::isfinite(m.vae.total) || !std::isfinite(m.unet))
            fail(ErrorKind::NonFiniteLoss, "non-finite loss at step " + std::to_string(m.step) + " (L_RE=" +
                                               std::to_string(m.vae.reconstruction) + ", KL=" + std::to_string(m.vae.kl) +
                                               ", L_BCE=" + std::to_string(m.vae.segmentation) + ")");

        auto vae_params = vae_.registry().params;
        auto unet_params = unet_.registry().params;
        tc::zero_grads(vae_params);
        tc::zero_grads(unet_params);
        g.backward(f.vae.total, &vae_params);
        g.backward(f.unet, &unet_params);
        vae_opt_.step(vae_params);
        unet_opt_.step(unet_params);
        return m;
    }

    long steps() const { return steps_; }

private:
    VoxelVae<T>& vae_;
    UNet<T>& unet_;
    TrainConfig cfg_;
    double condition_max_;
    std::mt19937_64 rng_;
    tc::Adam<T> vae_opt_;
    tc::Adam<T> unet_opt_;
    long steps_ = 0;
};

inline double dataset_max_density(std::span<const TrainingSample> samples) {
    double m = 0;
    for (const auto& s : samples) m = std::max(m, max_value(s.density));
    return m;
}

/// Runs `steps` joint updates over shuffled mini-batches. `on_step` sees
/// every metrics record; returning false stops early.
template <typename T>
std::vector<StepMetrics> train_joint(VoxelVae<T>& vae, UNet<T>& unet, std::span<const TrainingSample> samples,
                                     const TrainConfig& cfg, long steps,
                                     const std::function<bool(const StepMetrics&)>& on_step = {}) {
    if (samples.empty()) fail(ErrorKind::EmptyDataset, "no training samples");
    JointTrainer<T> trainer(vae, unet, cfg, vae.config().conditioned ? dataset_max_density(samples) : 0.0);
    std::mt19937_64 order_rng(cfg.seed);
    std::vector<std::size_t> order(samples.size());
    std::size_t cursor = order.size();
    const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), samples.size());

    std::vector<StepMetrics> log;
    for (long s = 0; s < steps; ++s) {
        std::vector<const TrainingSample*> picked;
        while (picked.size() < batch) {
            if (cursor == order.size()) {
                for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
                for (std::size_t i = order.size(); i > 1; --i) {
                    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
                    std::swap(order[i - 1], order[pick(order_rng)]);
                }
                cursor = 0;
            }
            picked.push_back(&samples[order[cursor++]]);
        }
        log.push_back(trainer.step(picked));
        if (on_step && !on_step(log.back())) break;
    }
    return log;
}

// ---------------------------------------------------------------------------
// Inference

/// Posterior means in evaluation mode (running batch-norm statistics).
template <typename T>
std::vector<LatentVector> encode(VoxelVae<T>& vae, std::span<const DensityGrid* const> grids,
                                 std::vector<LatentVector>* logvars = nullptr) {
    Graph<T> g;
    const auto out = vae.encoder()(g, g.constant(density_batch<T>(grids)), false);
    const std::size_t d = out.mu.dim(1);
    std::vector<LatentVector> zs(grids.size());
    if (logvars) logvars->assign(grids.size(), {});
    for (std::size_t n = 0; n < grids.size(); ++n) {
        zs[n].values.resize(d);
        for (std::size_t i = 0; i < d; ++i) zs[n].values[i] = static_cast<double>(out.mu.value()[n * d + i]);
        if (logvars) {
            (*logvars)[n].values.resize(d);
            for (std::size_t i = 0; i < d; ++i)
                (*logvars)[n].values[i] = static_cast<double>(out.logvar.value()[n * d + i]);
        }
    }
    return zs;
}

template <typename T>
std::vector<DensityGrid> decode(VoxelVae<T>& vae, std::span<const LatentVector> zs, const GridSpec& spec) {
    Graph<T> g;
    const auto out = vae.decoder()(g, g.constant(latent_batch<T>(zs)));
    std::vector<DensityGrid> grids;
    for (std::size_t n = 0; n < zs.size(); ++n) grids.push_back(density_grid_from_tensor(out.value(), n, spec));
    return grids;
}

template <typename T>
std::vector<ClassProbGrid> segment_logits(UNet<T>& unet, std::span<const DensityGrid* const> grids) {
    Graph<T> g;
    const auto out = unet(g, g.constant(density_batch<T>(grids)), false);
    std::vector<ClassProbGrid> result;
    for (std::size_t n = 0; n < grids.size(); ++n)
        result.push_back(class_grid_from_logits(out.value(), n, grids[n]->spec));
    return result;
}

// ---------------------------------------------------------------------------
// Discriminator

struct DiscriminatorTrainConfig {
    long steps = 200;
    int batch = 8;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};

/// Latent mixture lambda * prior_draw + (1 - lambda) * real.
inline LatentVector mix_latents(const LatentVector& prior_draw, const LatentVector& real, double lambda) {
    require(prior_draw.dim() == real.dim(), ErrorKind::ShapeMismatch, "latent vectors differ in dimension");
    if (lambda == 0) return real;
    if (lambda == 1) return prior_draw;
    LatentVector z{std::vector<double>(real.dim())};
    for (std::size_t i = 0; i < real.dim(); ++i) z.values[i] = lambda * prior_draw.values[i] + (1 - lambda) * real.values[i];
    return z;
}

/// Trains the discriminator on decoded latent mixtures with target
/// 1 - lambda, so decoded real codes score near 1 and pure prior draws
/// near 0. Returns the per-step MSE.
template <typename T>
std::vector<double> train_discriminator(Discriminator<T>& disc, VoxelVae<T>& vae, std::span<const LatentVector> real,
                                        const GridSpec& spec, const DiscriminatorTrainConfig& cfg) {
    if (real.empty()) fail(ErrorKind::EmptyDataset, "no real latent codes");
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, real.size() - 1);
    tc::Adam<T> opt({.lr = cfg.lr});
    std::vector<double> losses;
    for (long s = 0; s < cfg.steps; ++s) {
        std::vector<LatentVector> zs;
        Tensor<T> target({static_cast<std::size_t>(cfg.batch), 1});
        for (int b = 0; b < cfg.batch; ++b) {
            const double lambda = unit(rng);
            const auto draw = sample_prior(rng, real[0].dim());
            zs.push_back(mix_latents(draw, real[pick(rng)], lambda));
            target[static_cast<std::size_t>(b)] = T(1 - lambda);
        }
        const auto decoded = decode(vae, std::span<const LatentVector>(zs), spec);
        std::vector<const DensityGrid*> ptrs;
        for (const auto& d : decoded) ptrs.push_back(&d);

        Graph<T> g;
        const auto score = disc(g, g.constant(density_batch<T>(ptrs)), true);
        const auto loss = tc::mse_loss(score, g.constant(target));
        auto params = disc.registry().params;
        tc::zero_grads(params);
        g.backward(loss, &params);
        opt.step(params);
        losses.push_back(static_cast<double>(loss.value()[0]));
    }
    disc.trained = true;
    return losses;
}

template <typename T>
std::vector<double> discriminator_scores(Discriminator<T>& disc, std::span<const DensityGrid* const> grids) {
    if (!disc.trained) fail(ErrorKind::UntrainedModel, "discriminator has not been trained");
    Graph<T> g;
    const auto out = disc(g, g.constant(density_batch<T>(grids)), false);
    std::vector<double> scores;
    for (std::size_t n = 0; n < grids.size(); ++n) scores.push_back(static_cast<double>(out.value()[n]));
    return scores;
}

}  // namespace voxcell::models
