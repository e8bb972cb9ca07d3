#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>

#include "checkpoint.hpp"
#include "ops.hpp"

namespace voxcell::tc {

/// Collects trainable parameters and checkpointable state under dotted names.
template <typename T>
struct Registry {
    ParamList<T> params;
    StateDict<T> state;

    void add(const std::string& prefix, Parameter<T>& p) {
        p.name = prefix;
        params.push_back(&p);
        state.push_back({prefix, &p.value});
    }
    void add_buffer(const std::string& name, Tensor<T>& t) { state.push_back({name, &t}); }
};

namespace detail {

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for conv and linear layers.
template <typename T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

}  // namespace detail

template <typename T>
struct Conv3dLayer {
    Parameter<T> weight;
    Parameter<T> bias;
    Conv3dGeometry geometry;
    bool has_bias = true;

    Conv3dLayer() = default;
    Conv3dLayer(std::size_t in, std::size_t out, std::size_t kernel, Conv3dGeometry geom, std::mt19937_64& rng,
                bool with_bias = true)
        : geometry(geom), has_bias(with_bias) {
        const std::size_t fan_in = in * kernel * kernel * kernel;
        weight.value = detail::uniform_init<T>({out, in, kernel, kernel, kernel}, fan_in, rng);
        if (has_bias) bias.value = detail::uniform_init<T>({out}, fan_in, rng);
    }

    std::size_t out_channels() const { return weight.value.dim(0); }
    std::size_t kernel() const { return weight.value.dim(2); }

    Var<T> operator()(Graph<T>& g, const Var<T>& x) {
        std::optional<Var<T>> b;
        if (has_bias) b = g.param(bias);
        return conv3d(x, g.param(weight), b, geometry);
    }

    void register_into(Registry<T>& r, const std::string& prefix) {
        r.add(prefix + ".weight", weight);
        if (has_bias) r.add(prefix + ".bias", bias);
    }
};

template <typename T>
struct BatchNormLayer {
    Parameter<T> scale;
    Parameter<T> shift;
    Tensor<T> running_mean;
    Tensor<T> running_var;

    BatchNormLayer() = default;
    explicit BatchNormLayer(std::size_t channels)
        : running_mean({channels}, T(0)), running_var({channels}, T(1)) {
        scale.value = Tensor<T>({channels}, T(1));
        shift.value = Tensor<T>({channels}, T(0));
    }

    Var<T> operator()(Graph<T>& g, const Var<T>& x, bool train) {
        return batch_norm(x, g.param(scale), g.param(shift), running_mean, running_var, {.train = train});
    }

    void register_into(Registry<T>& r, const std::string& prefix) {
        r.add(prefix + ".scale", scale);
        r.add(prefix + ".shift", shift);
        r.add_buffer(prefix + ".running_mean", running_mean);
        r.add_buffer(prefix + ".running_var", running_var);
    }
};

template <typename T>
struct LinearLayer {
    Parameter<T> weight;
    Parameter<T> bias;
    bool has_bias = true;

    LinearLayer() = default;
    LinearLayer(std::size_t in, std::size_t out, std::mt19937_64& rng, bool with_bias = true) : has_bias(with_bias) {
        weight.value = detail::uniform_init<T>({out, in}, in, rng);
        if (has_bias) bias.value = detail::uniform_init<T>({out}, in, rng);
    }

    Var<T> operator()(Graph<T>& g, const Var<T>& x) {
        std::optional<Var<T>> b;
        if (has_bias) b = g.param(bias);
        return linear(x, g.param(weight), b);
    }

    void register_into(Registry<T>& r, const std::string& prefix) {
        r.add(prefix + ".weight", weight);
        if (has_bias) r.add(prefix + ".bias", bias);
    }
};

}  // namespace voxcell::tc
