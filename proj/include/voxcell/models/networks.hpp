#pragma once

#include <algorithm>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "../tensor/layers.hpp"
#include "../tensor/losses.hpp"
#include "config.hpp"

namespace voxcell::models {

using tc::Conv3dGeometry;
using tc::Graph;
using tc::Registry;
using tc::Tensor;
using tc::Var;

inline constexpr double kLogvarLimit = 10.0;

/// Spatial extents after each encoder stage, for the given input side.
inline std::array<int, 5> encoder_sides(int grid_side) {
    const auto out = [](int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; };
    std::array<int, 5> sides{grid_side, 0, 0, 0, 0};
    sides[1] = out(sides[0], 5, 2, 2);
    sides[2] = out(sides[1], 3, 1, 1);
    sides[3] = out(sides[2], 3, 1, 1);
    sides[4] = out(sides[3], 3, 2, 1);
    return sides;
}

template <typename T>
struct ConvBnAct {
    tc::Conv3dLayer<T> conv;
    tc::BatchNormLayer<T> bn;

    ConvBnAct() = default;
    ConvBnAct(std::size_t in, std::size_t out, std::size_t k, Conv3dGeometry geom, std::mt19937_64& rng)
        : conv(in, out, k, geom, rng), bn(out) {}

    Var<T> operator()(Graph<T>& g, const Var<T>& x, bool train, T slope) {
        return tc::leaky_relu(bn(g, conv(g, x), train), slope);
    }

    void register_into(Registry<T>& r, const std::string& prefix) {
        conv.register_into(r, prefix + ".conv");
        bn.register_into(r, prefix + ".bn");
    }
};

/// Convolutional trunk: four conv + batch-norm + LeakyReLU stages
/// (k5/s2, k3/s1, k3/s1, k3/s2).
template <typename T>
struct ConvTrunk {
    std::array<ConvBnAct<T>, 4> stages;

    ConvTrunk() = default;
    ConvTrunk(const std::array<int, 4>& ch, std::mt19937_64& rng) {
        const auto c = [&](int i) { return static_cast<std::size_t>(ch[static_cast<std::size_t>(i)]); };
        stages[0] = ConvBnAct<T>(1, c(0), 5, Conv3dGeometry::symmetric(2, 2), rng);
        stages[1] = ConvBnAct<T>(c(0), c(1), 3, Conv3dGeometry::symmetric(1, 1), rng);
        stages[2] = ConvBnAct<T>(c(1), c(2), 3, Conv3dGeometry::symmetric(1, 1), rng);
        stages[3] = ConvBnAct<T>(c(2), c(3), 3, Conv3dGeometry::symmetric(2, 1), rng);
    }

    Var<T> operator()(Graph<T>& g, Var<T> x, bool train, T slope) {
        for (auto& s : stages) x = s(g, x, train, slope);
        return tc::flatten(x);
    }

    void register_into(Registry<T>& r, const std::string& prefix) {
        for (std::size_t i = 0; i < stages.size(); ++i) stages[i].register_into(r, prefix + ".stage" + std::to_string(i));
    }
};

template <typename T>
struct EncoderOutput {
    Var<T> mu;
    Var<T> logvar;
};

template <typename T>
class Encoder {
public:
    Encoder(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg), trunk_(cfg.encoder_channels, rng) {
        const auto side = static_cast<std::size_t>(encoder_sides(cfg.grid_side)[4]);
        const std::size_t flat = static_cast<std::size_t>(cfg.encoder_channels[3]) * side * side * side;
        const auto latent = static_cast<std::size_t>(cfg.latent_dim);
        mu_head_ = tc::LinearLayer<T>(flat, latent, rng);
        logvar_head_ = tc::LinearLayer<T>(flat, latent, rng);
    }

    /// x is [N,1,S,S,S].
    EncoderOutput<T> operator()(Graph<T>& g, const Var<T>& x, bool train) {
        const auto s = static_cast<std::size_t>(cfg_.grid_side);
        const auto& shape = x.shape();
        if (shape.size() != 5 || shape[1] != 1 || shape[2] != s || shape[3] != s || shape[4] != s)
            fail(ErrorKind::ShapeMismatch, "encoder expects [N,1," + std::to_string(s) + "," + std::to_string(s) + "," +
                                               std::to_string(s) + "], got " + tc::shape_str(shape));
        const auto h = trunk_(g, x, train, T(cfg_.leaky_slope));
        return {mu_head_(g, h), tc::clamp(logvar_head_(g, h), T(-kLogvarLimit), T(kLogvarLimit))};
    }

    void register_into(Registry<T>& r, const std::string& prefix) {
        trunk_.register_into(r, prefix + ".trunk");
        mu_head_.register_into(r, prefix + ".mu");
        logvar_head_.register_into(r, prefix + ".logvar");
    }

private:
    ModelConfig cfg_;
    ConvTrunk<T> trunk_;
    tc::LinearLayer<T> mu_head_;
    tc::LinearLayer<T> logvar_head_;
};

/// Affine -> reshape -> three (x2 trilinear upsample, same-padded conv,
/// LeakyReLU) stages -> conv to one channel with ReLU -> trilinear resize
/// to the grid side. With conditioning enabled every layer is bias-free,
/// which makes the decoder positively homogeneous in its input.
template <typename T>
class Decoder {
public:
    Decoder(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
        const bool bias = !cfg.conditioned;
        const auto s0 = static_cast<std::size_t>(cfg.decoder_start_side);
        const auto c0 = static_cast<std::size_t>(cfg.decoder_start_channels);
        fc_ = tc::LinearLayer<T>(static_cast<std::size_t>(cfg.latent_dim), c0 * s0 * s0 * s0, rng, bias);
        std::size_t in = c0;
        for (std::size_t i = 0; i < 3; ++i) {
            const auto out = static_cast<std::size_t>(cfg.decoder_channels[i]);
            const auto k = static_cast<std::size_t>(cfg.decoder_kernels[i]);
            stages_[i] = tc::Conv3dLayer<T>(in, out, k, Conv3dGeometry::same(static_cast<long>(k)), rng, bias);
            in = out;
        }
        const auto kf = static_cast<std::size_t>(cfg.decoder_final_kernel);
        final_ = tc::Conv3dLayer<T>(in, 1, kf, Conv3dGeometry::same(static_cast<long>(kf)), rng, bias);
    }

    /// Side length before the final resize (start side x 8).
    int pre_resize_side() const { return cfg_.decoder_start_side * 8; }

    /// z is [N, latent]; returns [N,1,S,S,S], non-negative.
    Var<T> operator()(Graph<T>& g, const Var<T>& z) {
        if (z.shape().size() != 2 || z.dim(1) != static_cast<std::size_t>(cfg_.latent_dim))
            fail(ErrorKind::ShapeMismatch, "decoder expects [N," + std::to_string(cfg_.latent_dim) + "], got " +
                                               tc::shape_str(z.shape()));
        const std::size_t n = z.dim(0);
        const auto s0 = static_cast<std::size_t>(cfg_.decoder_start_side);
        auto h = tc::reshape(fc_(g, z), {n, static_cast<std::size_t>(cfg_.decoder_start_channels), s0, s0, s0});
        for (auto& stage : stages_) h = tc::leaky_relu(stage(g, tc::trilinear_upsample(h, 2)), T(cfg_.leaky_slope));
        h = tc::relu(final_(g, h));
        const auto side = static_cast<std::size_t>(cfg_.grid_side);
        if (h.dim(2) != side) h = tc::trilinear_resize(h, side, side, side);
        return h;
    }

    void register_into(Registry<T>& r, const std::string& prefix) {
        fc_.register_into(r, prefix + ".fc");
        for (std::size_t i = 0; i < stages_.size(); ++i) stages_[i].register_into(r, prefix + ".stage" + std::to_string(i));
        final_.register_into(r, prefix + ".final");
    }

private:
    ModelConfig cfg_;
    tc::LinearLayer<T> fc_;
    std::array<tc::Conv3dLayer<T>, 3> stages_;
    tc::Conv3dLayer<T> final_;
};

/// Additive attention gate: the skip features are weighted by a sigmoid map
/// computed from the skip and the coarser gating signal.
template <typename T>
struct AttentionGate {
    tc::Conv3dLayer<T> theta_skip;
    tc::Conv3dLayer<T> phi_gate;
    tc::Conv3dLayer<T> psi;

    AttentionGate() = default;
    AttentionGate(std::size_t skip_ch, std::size_t gate_ch, std::mt19937_64& rng) {
        const std::size_t inter = std::max<std::size_t>(1, skip_ch / 2);
        theta_skip = tc::Conv3dLayer<T>(skip_ch, inter, 1, {}, rng, false);
        phi_gate = tc::Conv3dLayer<T>(gate_ch, inter, 1, {}, rng, true);
        psi = tc::Conv3dLayer<T>(inter, 1, 1, {}, rng, true);
    }

    Var<T> operator()(Graph<T>& g, const Var<T>& skip, const Var<T>& gate) {
        auto gated = phi_gate(g, gate);
        gated = tc::trilinear_resize(gated, skip.dim(2), skip.dim(3), skip.dim(4));
        const auto q = tc::relu(tc::add(theta_skip(g, skip), gated));
        return tc::mul_channel_broadcast(skip, tc::sigmoid(psi(g, q)));
    }

    void register_into(Registry<T>& r, const std::string& prefix) {
        theta_skip.register_into(r, prefix + ".theta");
        phi_gate.register_into(r, prefix + ".phi");
        psi.register_into(r, prefix + ".psi");
    }
};

/// Two-level 3-D U-Net: strided-conv downsampling, trilinear upsampling,
/// skip connections (optionally attention-gated), per-voxel class logits.
template <typename T>
class UNet {
public:
    UNet(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
        const auto c = static_cast<std::size_t>(cfg.unet_base_channels);
        const auto same = Conv3dGeometry::symmetric(1, 1);
        const auto down = Conv3dGeometry::symmetric(2, 1);
        enc0_ = {ConvBnAct<T>(1, c, 3, same, rng), ConvBnAct<T>(c, c, 3, same, rng)};
        enc1_ = {ConvBnAct<T>(c, 2 * c, 3, down, rng), ConvBnAct<T>(2 * c, 2 * c, 3, same, rng)};
        bottom_ = {ConvBnAct<T>(2 * c, 4 * c, 3, down, rng), ConvBnAct<T>(4 * c, 4 * c, 3, same, rng)};
        dec1_ = {ConvBnAct<T>(6 * c, 2 * c, 3, same, rng), ConvBnAct<T>(2 * c, 2 * c, 3, same, rng)};
        dec0_ = {ConvBnAct<T>(3 * c, c, 3, same, rng), ConvBnAct<T>(c, c, 3, same, rng)};
        if (cfg.attention) {
            gate1_ = AttentionGate<T>(2 * c, 4 * c, rng);
            gate0_ = AttentionGate<T>(c, 2 * c, rng);
        }
        head_ = tc::Conv3dLayer<T>(c, static_cast<std::size_t>(cfg.num_classes), 1, {}, rng);
    }

    /// density is [N,1,S,S,S]; returns logits [N,classes,S,S,S].
    Var<T> operator()(Graph<T>& g, const Var<T>& density, bool train) {
        const auto& shape = density.shape();
        if (shape.size() != 5 || shape[1] != 1)
            fail(ErrorKind::ShapeMismatch, "U-Net expects [N,1,D,H,W], got " + tc::shape_str(shape));
        const T slope = T(cfg_.leaky_slope);
        auto block = [&](std::pair<ConvBnAct<T>, ConvBnAct<T>>& b, const Var<T>& x) {
            return b.second(g, b.first(g, x, train, slope), train, slope);
        };
        const auto e0 = block(enc0_, density);
        const auto e1 = block(enc1_, e0);
        const auto bottom = block(bottom_, e1);

        auto up1 = tc::trilinear_resize(bottom, e1.dim(2), e1.dim(3), e1.dim(4));
        const auto skip1 = cfg_.attention ? gate1_(g, e1, bottom) : e1;
        const auto d1 = block(dec1_, tc::concat_channels(up1, skip1));

        auto up0 = tc::trilinear_resize(d1, e0.dim(2), e0.dim(3), e0.dim(4));
        const auto skip0 = cfg_.attention ? gate0_(g, e0, d1) : e0;
        const auto d0 = block(dec0_, tc::concat_channels(up0, skip0));
        return head_(g, d0);
    }

    void register_into(Registry<T>& r, const std::string& prefix) {
        auto pair = [&](std::pair<ConvBnAct<T>, ConvBnAct<T>>& b, const std::string& name) {
            b.first.register_into(r, prefix + "." + name + ".a");
            b.second.register_into(r, prefix + "." + name + ".b");
        };
        pair(enc0_, "enc0");
        pair(enc1_, "enc1");
        pair(bottom_, "bottom");
        pair(dec1_, "dec1");
        pair(dec0_, "dec0");
        if (cfg_.attention) {
            gate1_.register_into(r, prefix + ".gate1");
            gate0_.register_into(r, prefix + ".gate0");
        }
        head_.register_into(r, prefix + ".head");
    }

    Registry<T> registry() {
        Registry<T> r;
        register_into(r, "unet");
        return r;
    }

private:
    ModelConfig cfg_;
    std::pair<ConvBnAct<T>, ConvBnAct<T>> enc0_, enc1_, bottom_, dec1_, dec0_;
    AttentionGate<T> gate1_, gate0_;
    tc::Conv3dLayer<T> head_;
};

/// Encoder + decoder pair. Parameters live at fixed addresses: hold the
/// model by reference or pointer once an optimizer has seen it.
template <typename T>
class VoxelVae {
public:
    VoxelVae(const ModelConfig& cfg, std::uint64_t seed)
        : cfg_(validated(cfg)), rng_(seed), encoder_(cfg_, rng_), decoder_(cfg_, rng_) {}
    VoxelVae(const VoxelVae&) = delete;
    VoxelVae& operator=(const VoxelVae&) = delete;

    const ModelConfig& config() const { return cfg_; }
    Encoder<T>& encoder() { return encoder_; }
    Decoder<T>& decoder() { return decoder_; }

    Registry<T> encoder_registry() {
        Registry<T> r;
        encoder_.register_into(r, "encoder");
        return r;
    }
    Registry<T> decoder_registry() {
        Registry<T> r;
        decoder_.register_into(r, "decoder");
        return r;
    }
    Registry<T> registry() {
        Registry<T> r;
        encoder_.register_into(r, "encoder");
        decoder_.register_into(r, "decoder");
        return r;
    }

private:
    static const ModelConfig& validated(const ModelConfig& c) {
        c.validate();
        return c;
    }

    ModelConfig cfg_;
    std::mt19937_64 rng_;
    Encoder<T> encoder_;
    Decoder<T> decoder_;
};

/// Scores how much a density grid looks like a decoded real crystal: an
/// encoder-style trunk, an affine head and a sigmoid.
template <typename T>
class Discriminator {
public:
    Discriminator(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed), trunk_(cfg.encoder_channels, rng_) {
        const auto side = static_cast<std::size_t>(encoder_sides(cfg.grid_side)[4]);
        head_ = tc::LinearLayer<T>(static_cast<std::size_t>(cfg.encoder_channels[3]) * side * side * side, 1, rng_);
    }
    Discriminator(const Discriminator&) = delete;
    Discriminator& operator=(const Discriminator&) = delete;

    /// density [N,1,S,S,S] -> scores [N,1] in (0,1).
    Var<T> operator()(Graph<T>& g, const Var<T>& density, bool train) {
        return tc::sigmoid(head_(g, trunk_(g, density, train, T(cfg_.leaky_slope))));
    }

    Registry<T> registry() {
        Registry<T> r;
        trunk_.register_into(r, "disc.trunk");
        head_.register_into(r, "disc.head");
        return r;
    }

    bool trained = false;

private:
    ModelConfig cfg_;
    std::mt19937_64 rng_;
    ConvTrunk<T> trunk_;
    tc::LinearLayer<T> head_;
};

}  // namespace voxcell::models
