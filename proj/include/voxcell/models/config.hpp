#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "../error.hpp"
#include "../voxelizer.hpp"

namespace voxcell::models {

/// Network shapes. The defaults are the published layer tables at a 30^3
/// grid with a 300-dimensional latent code.
struct ModelConfig {
    int grid_side = 30;
    int latent_dim = 300;
    std::array<int, 4> encoder_channels{16, 32, 64, 128};
    int decoder_start_side = 5;
    int decoder_start_channels = 128;
    std::array<int, 3> decoder_channels{64, 32, 16};
    std::array<int, 3> decoder_kernels{5, 5, 4};
    int decoder_final_kernel = 4;
    int unet_base_channels = 16;
    bool attention = true;
    int num_classes = kNumSpeciesClasses;
    bool conditioned = false;
    float leaky_slope = 0.01f;

    /// Desk-scale variant used for smoke training: same topology, narrow
    /// channels, a small grid at the standard voxel pitch.
    static ModelConfig toy(int grid_side = 16, int latent_dim = 16) {
        ModelConfig c;
        c.grid_side = grid_side;
        c.latent_dim = latent_dim;
        c.encoder_channels = {4, 8, 8, 16};
        c.decoder_start_side = std::max(1, (grid_side + 7) / 8);
        c.decoder_start_channels = 16;
        c.decoder_channels = {8, 8, 4};
        c.unet_base_channels = 4;
        return c;
    }

    void validate() const {
        require(grid_side >= 4, ErrorKind::InvalidArgument, "grid_side must be >= 4");
        require(latent_dim >= 1, ErrorKind::InvalidArgument, "latent_dim must be >= 1");
        require(decoder_start_side >= 1, ErrorKind::InvalidArgument, "decoder_start_side must be >= 1");
        require(num_classes >= 2, ErrorKind::InvalidArgument, "num_classes must be >= 2");
        for (int c : encoder_channels) require(c >= 1, ErrorKind::InvalidArgument, "channel counts must be >= 1");
        for (int c : decoder_channels) require(c >= 1, ErrorKind::InvalidArgument, "channel counts must be >= 1");
        require(unet_base_channels >= 1, ErrorKind::InvalidArgument, "unet_base_channels must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"grid_side", c.grid_side},
                       {"latent_dim", c.latent_dim},
                       {"encoder_channels", c.encoder_channels},
                       {"decoder_start_side", c.decoder_start_side},
                       {"decoder_start_channels", c.decoder_start_channels},
                       {"decoder_channels", c.decoder_channels},
                       {"decoder_kernels", c.decoder_kernels},
                       {"decoder_final_kernel", c.decoder_final_kernel},
                       {"unet_base_channels", c.unet_base_channels},
                       {"attention", c.attention},
                       {"num_classes", c.num_classes},
                       {"conditioned", c.conditioned},
                       {"leaky_slope", c.leaky_slope}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.grid_side = j.value("grid_side", d.grid_side);
    c.latent_dim = j.value("latent_dim", d.latent_dim);
    c.encoder_channels = j.value("encoder_channels", d.encoder_channels);
    c.decoder_start_side = j.value("decoder_start_side", d.decoder_start_side);
    c.decoder_start_channels = j.value("decoder_start_channels", d.decoder_start_channels);
    c.decoder_channels = j.value("decoder_channels", d.decoder_channels);
    c.decoder_kernels = j.value("decoder_kernels", d.decoder_kernels);
    c.decoder_final_kernel = j.value("decoder_final_kernel", d.decoder_final_kernel);
    c.unet_base_channels = j.value("unet_base_channels", d.unet_base_channels);
    c.attention = j.value("attention", d.attention);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.conditioned = j.value("conditioned", d.conditioned);
    c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
}

enum class SegmentationLoss { SigmoidBce, SoftmaxCrossEntropy };

struct TrainConfig {
    double beta = 1e-3;
    double gamma = 0.1;
    double lr = 1e-5;
    int batch = 24;
    std::uint64_t seed = 0;
    SegmentationLoss seg_loss = SegmentationLoss::SigmoidBce;

    void validate() const {
        require(beta >= 0, ErrorKind::InvalidArgument, "beta must be >= 0");
        require(gamma >= 0, ErrorKind::InvalidArgument, "gamma must be >= 0");
        require(lr > 0, ErrorKind::InvalidArgument, "lr must be positive");
        require(batch >= 1, ErrorKind::InvalidArgument, "batch must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"beta", c.beta},
                       {"gamma", c.gamma},
                       {"lr", c.lr},
                       {"batch", c.batch},
                       {"seed", c.seed},
                       {"seg_loss", c.seg_loss == SegmentationLoss::SigmoidBce ? "bce" : "softmax"}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.beta = j.value("beta", d.beta);
    c.gamma = j.value("gamma", d.gamma);
    c.lr = j.value("lr", d.lr);
    c.batch = j.value("batch", d.batch);
    c.seed = j.value("seed", d.seed);
    c.seg_loss = j.value("seg_loss", std::string("bce")) == "softmax" ? SegmentationLoss::SoftmaxCrossEntropy
                                                                       : SegmentationLoss::SigmoidBce;
}

}  // namespace voxcell::models
