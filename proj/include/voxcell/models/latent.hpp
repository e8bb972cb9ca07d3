#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "../error.hpp"

namespace voxcell::models {

struct LatentVector {
    std::vector<double> values;

    std::size_t dim() const { return values.size(); }
    double norm() const {
        double s = 0;
        for (double v : values) s += v * v;
        return std::sqrt(s);
    }
    friend bool operator==(const LatentVector&, const LatentVector&) = default;
};

/// (1 - t) * a + t * b. The endpoints are returned exactly.
inline LatentVector latent_interpolate(const LatentVector& a, const LatentVector& b, double t) {
    require(a.dim() == b.dim(), ErrorKind::ShapeMismatch, "latent vectors differ in dimension");
    require(t >= 0 && t <= 1, ErrorKind::InvalidArgument, "interpolation parameter must lie in [0, 1]");
    if (t == 0) return a;
    if (t == 1) return b;
    LatentVector out{std::vector<double>(a.dim())};
    for (std::size_t i = 0; i < a.dim(); ++i) out.values[i] = (1 - t) * a.values[i] + t * b.values[i];
    return out;
}

/// i.i.d. standard normal entries.
inline LatentVector sample_prior(std::mt19937_64& rng, std::size_t dim = 300) {
    std::normal_distribution<double> normal(0.0, 1.0);
    LatentVector z{std::vector<double>(dim)};
    for (auto& v : z.values) v = normal(rng);
    return z;
}

/// alpha * z, the decoder input of the conditioned model.
inline LatentVector condition_scale(const LatentVector& z, double alpha) {
    if (!(alpha > 0)) fail(ErrorKind::NonPositiveAlpha, "conditioning target must be positive");
    LatentVector out = z;
    for (auto& v : out.values) v *= alpha;
    return out;
}

}  // namespace voxcell::models
