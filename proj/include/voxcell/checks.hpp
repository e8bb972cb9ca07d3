#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "metrics.hpp"
#include "models/training.hpp"
#include "segmenter.hpp"

namespace voxcell::checks {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0;
};

namespace detail {

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

template <typename... Args>
std::string format(Args&&... args) {
    std::ostringstream os;
    os.precision(4);
    (os << ... << args);
    return os.str();
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

template <typename T = double>
tc::Tensor<T> random_tensor(const tc::Shape& shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
    tc::Tensor<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(uniform(rng, lo, hi));
    return t;
}

// Magnitudes in [0.05, 1] with random sign, so kinks at zero are never crossed.
inline tc::Tensor<double> off_zero_tensor(const tc::Shape& shape, std::mt19937_64& rng) {
    tc::Tensor<double> t(shape);
    for (auto& v : t.values()) v = uniform(rng, 0.05, 1.0) * (rng() & 1 ? 1 : -1);
    return t;
}

inline std::vector<PlacedAtom> random_atoms(std::mt19937_64& rng, int count, double lo, double hi, int max_z = 100) {
    std::vector<PlacedAtom> atoms;
    for (int i = 0; i < count; ++i)
        atoms.push_back({uniform_int(rng, 1, max_z), {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)}});
    return atoms;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Voxelizer

/// Brute-force density at voxel centres: every atom, every voxel, no cutoff.
inline DensityGrid brute_force_density(const std::vector<PlacedAtom>& atoms, const GridSpec& spec) {
    DensityGrid g{spec, std::vector<double>(spec.voxel_count(), 0.0)};
    const double norm = 1.0 / (std::pow(spec.sigma, 3) * std::pow(2 * std::numbers::pi, 1.5));
    for (int i = 0; i < spec.side_voxels; ++i)
        for (int j = 0; j < spec.side_voxels; ++j)
            for (int k = 0; k < spec.side_voxels; ++k) {
                const Vec3 c{spec.voxel_center(i), spec.voxel_center(j), spec.voxel_center(k)};
                double v = 0;
                for (const auto& a : atoms)
                    v += a.atomic_number * std::exp(-distance_squared(c, a.cart) / (2 * spec.sigma * spec.sigma));
                g.values[voxel_index(spec, i, j, k)] = norm * v;
            }
    return g;
}

inline CheckResult voxelizer_oracle(int cases = 100, std::uint64_t seed = 101) {
    detail::Stopwatch sw;
    std::mt19937_64 rng(seed);
    const GridSpec spec;
    double worst = 0;  // error / (1e-6 * Zmax)
    double worst_abs = 0;
    for (int c = 0; c < cases; ++c) {
        const auto atoms = detail::random_atoms(rng, detail::uniform_int(rng, 1, 50), -3.0, 13.0);
        int zmax = 0;
        for (const auto& a : atoms) zmax = std::max(zmax, a.atomic_number);
        const auto fast = density_from_atoms(atoms, spec);
        const auto ref = brute_force_density(atoms, spec);
        double err = 0;
        for (std::size_t i = 0; i < ref.values.size(); ++i) err = std::max(err, std::abs(fast.values[i] - ref.values[i]));
        worst = std::max(worst, err / (1e-6 * zmax));
        worst_abs = std::max(worst_abs, err);
    }
    const double secs = sw.seconds();
    return {"voxelizer oracle", worst < 1 && secs < 30,
            detail::format(cases, " cases, max |fast - brute| = ", worst_abs, " (", worst, " x 1e-6*Zmax), ", secs, " s"),
            secs};
}

inline CheckResult mass_conservation(int cases = 50, std::uint64_t seed = 202) {
    detail::Stopwatch sw;
    std::mt19937_64 rng(seed);
    const GridSpec spec;
    const double face = 4 * spec.sigma;
    double worst = 0;
    for (int c = 0; c < cases; ++c) {
        const auto atoms =
            detail::random_atoms(rng, detail::uniform_int(rng, 1, 20), face, spec.box_side - face);
        const auto grid = density_from_atoms(atoms, spec);
        double sum = 0, z = 0;
        for (double v : grid.values) sum += v;
        for (const auto& a : atoms) z += a.atomic_number;
        worst = std::max(worst, std::abs(sum * std::pow(spec.pitch(), 3) / z - 1));
    }
    return {"mass conservation", worst <= 0.01,
            detail::format(cases, " cases, max |mass / sum(Z) - 1| = ", worst), sw.seconds()};
}

// ---------------------------------------------------------------------------
// Lattice

inline LatticeParams random_lattice_params(std::mt19937_64& rng, double min_side, double max_side) {
    for (;;) {
        LatticeParams p{detail::uniform(rng, min_side, max_side), detail::uniform(rng, min_side, max_side),
                        detail::uniform(rng, min_side, max_side), 0, 0, 0};
        std::array<double, 3> ang{};
        for (auto& a : ang) {
            switch (detail::uniform_int(rng, 0, 2)) {
                case 0: a = 60 + detail::uniform(rng, -1, 1); break;
                case 1: a = 120 + detail::uniform(rng, -1, 1); break;
                default: a = detail::uniform(rng, 55, 125); break;
            }
        }
        p.alpha = ang[0];
        p.beta = ang[1];
        p.gamma = ang[2];
        try {
            if (cell_volume(p) / (p.a * p.b * p.c) > 0.2) return p;
        } catch (const Error&) {
        }
    }
}

namespace detail {

// Largest nearest-partner distance between two atom sets of equal size and
// matching species; +inf when the sets differ in size or a partner is missing.
inline double set_distance(const std::vector<PlacedAtom>& a, const std::vector<PlacedAtom>& b) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double worst = 0;
    for (const auto& p : a) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : b)
            if (q.atomic_number == p.atomic_number) best = std::min(best, distance(p.cart, q.cart));
        worst = std::max(worst, best);
    }
    return worst;
}

}  // namespace detail

inline CheckResult lattice_geometry(int cells = 500, std::uint64_t seed = 303) {
    detail::Stopwatch sw;
    std::mt19937_64 rng(seed);
    double round_trip = 0, translation = 0, isometry = 0, orthogonality = 0;
    int near_60 = 0, near_120 = 0;
    for (int c = 0; c < cells; ++c) {
        const auto p = random_lattice_params(rng, 3.0, 9.5);
        for (double a : {p.alpha, p.beta, p.gamma}) {
            near_60 += std::abs(a - 60) <= 1;
            near_120 += std::abs(a - 120) <= 1;
        }
        std::vector<AtomSite> sites;
        const int n = detail::uniform_int(rng, 1, 4);
        for (int i = 0; i < n; ++i)
            sites.push_back({detail::uniform_int(rng, 1, 100),
                             {detail::uniform(rng, 0, 1), detail::uniform(rng, 0, 1), detail::uniform(rng, 0, 1)}});
        const UnitCell cell(p, sites);

        for (int t = 0; t < 4; ++t) {
            const Vec3 f{detail::uniform(rng, -2, 2), detail::uniform(rng, -2, 2), detail::uniform(rng, -2, 2)};
            const Vec3 back = cart_to_frac(cell, frac_to_cart(cell, f));
            for (std::size_t i = 0; i < 3; ++i) round_trip = std::max(round_trip, std::abs(back[i] - f[i]));
        }

        const Vec3 offset{detail::uniform(rng, 0, 1), detail::uniform(rng, 0, 1), detail::uniform(rng, 0, 1)};
        const Vec3 shifted = offset + Vec3{static_cast<double>(detail::uniform_int(rng, -2, 2)),
                                           static_cast<double>(detail::uniform_int(rng, -2, 2)),
                                           static_cast<double>(detail::uniform_int(rng, -2, 2))};
        translation = std::max(translation, detail::set_distance(place_repeated_lattice(cell, offset, 10, 1),
                                                                 place_repeated_lattice(cell, shifted, 10, 1)));

        const Mat3 r = random_rotation(rng());
        const Mat3 rtr = r.transposed() * r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                orthogonality = std::max(orthogonality, std::abs(rtr(i, j) - (i == j ? 1.0 : 0.0)));
        orthogonality = std::max(orthogonality, std::abs(r.determinant() - 1));

        if (cell.max_side() < 10) {
            const auto ref = place_single_cell(cell, Mat3::identity());
            const auto rot = place_single_cell(cell, r);
            for (std::size_t i = 0; i < ref.size(); ++i)
                for (std::size_t j = i + 1; j < ref.size(); ++j)
                    isometry = std::max(isometry, std::abs(distance(ref[i].cart, ref[j].cart) -
                                                           distance(rot[i].cart, rot[j].cart)));
        }
    }
    const bool ok = round_trip <= 1e-12 && translation <= 1e-9 && isometry <= 1e-9 && orthogonality <= 1e-12;
    return {"lattice geometry", ok,
            detail::format(cells, " cells (", near_60, " angles within 1 deg of 60, ", near_120,
                           " of 120): round-trip ", round_trip, ", translation ", translation, " A, isometry ", isometry,
                           " A, orthogonality ", orthogonality),
            sw.seconds()};
}

// ---------------------------------------------------------------------------
// Autodiff

/// Relative error ||analytic - numeric||_inf / ||numeric||_inf of the
/// gradient of `build` with respect to `params`, by central differences.
/// With `max_coords` set, that many coordinates are drawn at random.
template <typename Build>
double gradcheck(const tc::ParamList<double>& params, Build build, std::mt19937_64& rng, std::size_t max_coords = 0,
                 double h = 1e-5) {
    tc::zero_grads(params);
    {
        tc::Graph<double> g;
        const auto loss = build(g);
        g.backward(loss, &params);
    }
    const auto eval = [&] {
        tc::Graph<double> g;
        return build(g).value()[0];
    };
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p]->value.size(); ++i) coords.emplace_back(p, i);
    if (max_coords && coords.size() > max_coords) {
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(max_coords);
    }
    double diff = 0, scale = 0;
    for (const auto& [p, i] : coords) {
        double& v = params[p]->value[i];
        const double saved = v;
        v = saved + h;
        const double up = eval();
        v = saved - h;
        const double down = eval();
        v = saved;
        const double numeric = (up - down) / (2 * h);
        diff = std::max(diff, std::abs(params[p]->grad[i] - numeric));
        scale = std::max(scale, std::abs(numeric));
    }
    return diff / std::max(scale, 1e-12);
}

/// Reduces a tensor-valued result to a scalar with fixed random weights.
inline tc::Var<double> project(const tc::Var<double>& y, std::mt19937_64& rng) {
    return tc::dot_constant(y, detail::random_tensor(y.shape(), rng));
}

struct OpCheck {
    std::string name;
    double tolerance;
    // Runs one randomized case and returns its relative error.
    std::function<double(std::mt19937_64&)> run;
};

namespace detail {

inline tc::Parameter<double> param(tc::Tensor<double> t) {
    tc::Parameter<double> p;
    p.value = std::move(t);
    return p;
}

inline std::size_t dim(std::mt19937_64& rng, int lo, int hi) { return static_cast<std::size_t>(uniform_int(rng, lo, hi)); }

inline tc::Shape volume_shape(std::mt19937_64& rng, int max_c = 3, int lo = 2, int hi = 4) {
    return {dim(rng, 1, 2), dim(rng, 1, max_c), dim(rng, lo, hi), dim(rng, lo, hi), dim(rng, lo, hi)};
}

template <typename F>
double unary_case(std::mt19937_64& rng, F op) {
    auto x = param(off_zero_tensor(volume_shape(rng), rng));
    const auto r = random_tensor(x.value.shape(), rng);
    return gradcheck({&x}, [&](tc::Graph<double>& g) { return tc::dot_constant(op(g.param(x)), r); }, rng);
}

}  // namespace detail

inline std::vector<OpCheck> op_checks() {
    using detail::param;
    using detail::random_tensor;
    using G = tc::Graph<double>;
    std::vector<OpCheck> checks;

    checks.push_back({"conv3d", 1e-4, [](std::mt19937_64& rng) {
                          for (;;) {
                              const std::size_t n = detail::dim(rng, 1, 2), c = detail::dim(rng, 1, 3),
                                                o = detail::dim(rng, 1, 3), k = detail::dim(rng, 1, 3);
                              const tc::Shape xs{n, c, detail::dim(rng, 2, 6), detail::dim(rng, 2, 6), detail::dim(rng, 2, 6)};
                              tc::Conv3dGeometry geom{detail::uniform_int(rng, 1, 2), detail::uniform_int(rng, 0, 1),
                                                      detail::uniform_int(rng, 0, 2)};
                              bool fits = true;
                              for (std::size_t d = 2; d < 5; ++d)
                                  fits = fits && geom.out_extent(static_cast<long>(xs[d]), static_cast<long>(k)) >= 1;
                              if (!fits) continue;
                              auto x = param(random_tensor(xs, rng));
                              auto w = param(random_tensor({o, c, k, k, k}, rng));
                              auto b = param(random_tensor({o}, rng));
                              tc::Tensor<double> r;
                              return gradcheck({&x, &w, &b}, [&](G& g) {
                                  const auto y = tc::conv3d(g.param(x), g.param(w), std::optional(g.param(b)), geom);
                                  if (r.empty()) r = random_tensor(y.shape(), rng);
                                  return tc::dot_constant(y, r);
                              }, rng);
                          }
                      }});
    checks.push_back({"trilinear_upsample", 1e-4, [](std::mt19937_64& rng) {
                          auto x = param(random_tensor(detail::volume_shape(rng, 2, 1, 3), rng));
                          const std::size_t f = detail::dim(rng, 2, 3);
                          tc::Tensor<double> r;
                          return gradcheck({&x}, [&](G& g) {
                              const auto y = tc::trilinear_upsample(g.param(x), f);
                              if (r.empty()) r = random_tensor(y.shape(), rng);
                              return tc::dot_constant(y, r);
                          }, rng);
                      }});
    checks.push_back({"trilinear_resize", 1e-4, [](std::mt19937_64& rng) {
                          auto x = param(random_tensor(detail::volume_shape(rng, 2, 1, 5), rng));
                          const std::size_t a = detail::dim(rng, 1, 7), b = detail::dim(rng, 1, 7), c = detail::dim(rng, 1, 7);
                          tc::Tensor<double> r;
                          return gradcheck({&x}, [&](G& g) {
                              const auto y = tc::trilinear_resize(g.param(x), a, b, c);
                              if (r.empty()) r = random_tensor(y.shape(), rng);
                              return tc::dot_constant(y, r);
                          }, rng);
                      }});
    checks.push_back({"batch_norm (train)", 1e-4, [](std::mt19937_64& rng) {
                          auto x = param(random_tensor(detail::volume_shape(rng), rng));
                          const std::size_t c = x.value.dim(1);
                          auto s = param(random_tensor({c}, rng, 0.5, 1.5));
                          auto t = param(random_tensor({c}, rng));
                          const auto r = random_tensor(x.value.shape(), rng);
                          return gradcheck({&x, &s, &t}, [&](G& g) {
                              tc::Tensor<double> rm({c}, 0.0), rv({c}, 1.0);
                              return tc::dot_constant(tc::batch_norm(g.param(x), g.param(s), g.param(t), rm, rv), r);
                          }, rng);
                      }});
    checks.push_back({"batch_norm (eval)", 1e-6, [](std::mt19937_64& rng) {
                          auto x = param(random_tensor(detail::volume_shape(rng), rng));
                          const std::size_t c = x.value.dim(1);
                          auto s = param(random_tensor({c}, rng, 0.5, 1.5));
                          auto t = param(random_tensor({c}, rng));
                          auto rm0 = random_tensor({c}, rng);
                          auto rv0 = random_tensor({c}, rng, 0.5, 2.0);
                          const auto r = random_tensor(x.value.shape(), rng);
                          return gradcheck({&x, &s, &t}, [&](G& g) {
                              auto rm = rm0, rv = rv0;
                              return tc::dot_constant(
                                  tc::batch_norm(g.param(x), g.param(s), g.param(t), rm, rv, {.train = false}), r);
                          }, rng);
                      }});
    checks.push_back({"leaky_relu", 1e-6, [](std::mt19937_64& rng) {
                          return detail::unary_case(rng, [](const tc::Var<double>& v) { return tc::leaky_relu(v, 0.01); });
                      }});
    checks.push_back({"relu", 1e-6, [](std::mt19937_64& rng) {
                          return detail::unary_case(rng, [](const tc::Var<double>& v) { return tc::relu(v); });
                      }});
    checks.push_back({"sigmoid", 1e-6, [](std::mt19937_64& rng) {
                          return detail::unary_case(rng, [](const tc::Var<double>& v) { return tc::sigmoid(v); });
                      }});
    checks.push_back({"exp", 1e-6, [](std::mt19937_64& rng) {
                          return detail::unary_case(rng, [](const tc::Var<double>& v) { return tc::exp(v); });
                      }});
    checks.push_back({"clamp", 1e-6, [](std::mt19937_64& rng) {
                          return detail::unary_case(rng, [](const tc::Var<double>& v) { return tc::clamp(v, -0.5, 0.5); });
                      }});
    checks.push_back({"linear", 1e-4, [](std::mt19937_64& rng) {
                          const std::size_t n = detail::dim(rng, 1, 4), f = detail::dim(rng, 1, 8), o = detail::dim(rng, 1, 6);
                          auto x = param(random_tensor({n, f}, rng));
                          auto w = param(random_tensor({o, f}, rng));
                          auto b = param(random_tensor({o}, rng));
                          const auto r = random_tensor({n, o}, rng);
                          return gradcheck({&x, &w, &b}, [&](G& g) {
                              return tc::dot_constant(tc::linear(g.param(x), g.param(w), std::optional(g.param(b))), r);
                          }, rng);
                      }});
    checks.push_back({"elementwise add/mul", 1e-6, [](std::mt19937_64& rng) {
                          const auto shape = detail::volume_shape(rng);
                          auto a = param(random_tensor(shape, rng));
                          auto b = param(random_tensor(shape, rng));
                          const auto r = random_tensor(shape, rng);
                          return gradcheck({&a, &b}, [&](G& g) {
                              const auto va = g.param(a), vb = g.param(b);
                              return tc::dot_constant(tc::mul(tc::add(va, vb), vb), r);
                          }, rng);
                      }});
    checks.push_back({"scale_rows / reshape", 1e-6, [](std::mt19937_64& rng) {
                          const auto shape = detail::volume_shape(rng);
                          auto x = param(random_tensor(shape, rng));
                          std::vector<double> f(shape[0]);
                          for (auto& v : f) v = detail::uniform(rng, -2, 2);
                          const auto r = random_tensor({shape[0], x.value.size() / shape[0]}, rng);
                          return gradcheck({&x}, [&](G& g) {
                              return tc::dot_constant(tc::flatten(tc::scale_rows(g.param(x), f)), r);
                          }, rng);
                      }});
    checks.push_back({"concat_channels", 1e-6, [](std::mt19937_64& rng) {
                          auto shape = detail::volume_shape(rng);
                          auto a = param(random_tensor(shape, rng));
                          shape[1] = detail::dim(rng, 1, 3);
                          auto b = param(random_tensor(shape, rng));
                          tc::Tensor<double> r;
                          return gradcheck({&a, &b}, [&](G& g) {
                              const auto y = tc::concat_channels(g.param(a), g.param(b));
                              if (r.empty()) r = random_tensor(y.shape(), rng);
                              return tc::dot_constant(y, r);
                          }, rng);
                      }});
    checks.push_back({"mul_channel_broadcast", 1e-6, [](std::mt19937_64& rng) {
                          auto shape = detail::volume_shape(rng);
                          auto x = param(random_tensor(shape, rng));
                          shape[1] = 1;
                          auto gate = param(random_tensor(shape, rng));
                          const auto r = random_tensor(x.value.shape(), rng);
                          return gradcheck({&x, &gate}, [&](G& g) {
                              return tc::dot_constant(tc::mul_channel_broadcast(g.param(x), g.param(gate)), r);
                          }, rng);
                      }});
    checks.push_back({"mse_loss", 1e-6, [](std::mt19937_64& rng) {
                          const auto shape = detail::volume_shape(rng);
                          auto p = param(random_tensor(shape, rng));
                          auto t = param(random_tensor(shape, rng));
                          return gradcheck({&p, &t}, [&](G& g) { return tc::mse_loss(g.param(p), g.param(t)); }, rng);
                      }});
    checks.push_back({"kl_diag_gaussian", 1e-6, [](std::mt19937_64& rng) {
                          const tc::Shape shape{detail::dim(rng, 1, 4), detail::dim(rng, 1, 10)};
                          auto mu = param(random_tensor(shape, rng, -2, 2));
                          auto lv = param(random_tensor(shape, rng, -2, 2));
                          return gradcheck({&mu, &lv}, [&](G& g) { return tc::kl_diag_gaussian(g.param(mu), g.param(lv)); }, rng);
                      }});
    checks.push_back({"bce_with_logits", 1e-4, [](std::mt19937_64& rng) {
                          const auto shape = detail::volume_shape(rng, 5);
                          auto x = param(random_tensor(shape, rng, -4, 4));
                          auto t = random_tensor(shape, rng, 0, 1);
                          return gradcheck({&x}, [&](G& g) { return tc::bce_with_logits(g.param(x), g.constant(t)); }, rng);
                      }});
    checks.push_back({"softmax_cross_entropy", 1e-4, [](std::mt19937_64& rng) {
                          const auto shape = detail::volume_shape(rng, 5);
                          auto x = param(random_tensor(shape, rng, -4, 4));
                          tc::Tensor<double> t(shape);
                          const std::size_t n = shape[0], c = shape[1], s = t.size() / (n * c);
                          for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t v = 0; v < s; ++v) t[(i * c + detail::dim(rng, 0, static_cast<int>(c) - 1)) * s + v] = 1;
                          return gradcheck({&x}, [&](G& g) { return tc::softmax_cross_entropy(g.param(x), g.constant(t)); }, rng);
                      }});
    checks.push_back({"reparameterize", 1e-6, [](std::mt19937_64& rng) {
                          const tc::Shape shape{detail::dim(rng, 1, 4), detail::dim(rng, 1, 10)};
                          auto mu = param(random_tensor(shape, rng));
                          auto lv = param(random_tensor(shape, rng, -2, 2));
                          const auto eps = random_tensor(shape, rng, -2, 2);
                          const auto r = random_tensor(shape, rng);
                          return gradcheck({&mu, &lv}, [&](G& g) {
                              return tc::dot_constant(tc::reparameterize(g.param(mu), g.param(lv), eps), r);
                          }, rng);
                      }});
    checks.push_back({"weighted_sum", 1e-6, [](std::mt19937_64& rng) {
                          const auto shape = detail::volume_shape(rng);
                          auto a = param(random_tensor(shape, rng));
                          auto b = param(random_tensor(shape, rng));
                          const double wa = detail::uniform(rng, 0, 2), wb = detail::uniform(rng, 0, 2);
                          return gradcheck({&a, &b}, [&](G& g) {
                              const auto va = g.param(a), vb = g.param(b);
                              return tc::weighted_sum<double>({tc::mse_loss(va, vb), tc::kl_diag_gaussian(tc::flatten(va), tc::flatten(vb))},
                                                              {wa, wb});
                          }, rng);
                      }});
    checks.push_back({"conv + batch-norm + LeakyReLU block", 1e-4, [](std::mt19937_64& rng) {
                          const std::size_t c = detail::dim(rng, 1, 3), o = detail::dim(rng, 1, 3);
                          models::ConvBnAct<double> block(c, o, 3, tc::Conv3dGeometry::symmetric(detail::uniform_int(rng, 1, 2), 1), rng);
                          tc::Registry<double> reg;
                          block.register_into(reg, "block");
                          auto x = param(random_tensor({2, c, detail::dim(rng, 3, 5), detail::dim(rng, 3, 5), detail::dim(rng, 3, 5)}, rng));
                          auto params = reg.params;
                          params.push_back(&x);
                          tc::Tensor<double> r;
                          return gradcheck(params, [&](G& g) {
                              const auto y = block(g, g.param(x), true, 0.01);
                              if (r.empty()) r = random_tensor(y.shape(), rng);
                              return tc::dot_constant(y, r);
                          }, rng);
                      }});
    checks.push_back({"attention gate", 1e-4, [](std::mt19937_64& rng) {
                          const std::size_t c = detail::dim(rng, 1, 3), gc = detail::dim(rng, 1, 4), s = detail::dim(rng, 2, 5);
                          models::AttentionGate<double> gate(c, gc, rng);
                          tc::Registry<double> reg;
                          gate.register_into(reg, "gate");
                          auto skip = param(random_tensor({1, c, s, s, s}, rng));
                          const std::size_t cs = (s + 1) / 2;
                          auto sig = param(random_tensor({1, gc, cs, cs, cs}, rng));
                          auto params = reg.params;
                          params.push_back(&skip);
                          params.push_back(&sig);
                          const auto r = random_tensor(skip.value.shape(), rng);
                          return gradcheck(params, [&](G& g) { return tc::dot_constant(gate(g, g.param(skip), g.param(sig)), r); }, rng);
                      }});
    return checks;
}

/// Naive nested-loop cross-correlation, the reference for conv3d.
template <typename T>
tc::Tensor<T> naive_conv3d(const tc::Tensor<T>& x, const tc::Tensor<T>& w, const tc::Conv3dGeometry& g) {
    const long N = static_cast<long>(x.dim(0)), C = static_cast<long>(x.dim(1)), D = static_cast<long>(x.dim(2)),
               H = static_cast<long>(x.dim(3)), W = static_cast<long>(x.dim(4)), O = static_cast<long>(w.dim(0)),
               K = static_cast<long>(w.dim(2));
    const long OD = g.out_extent(D, K), OH = g.out_extent(H, K), OW = g.out_extent(W, K);
    tc::Tensor<T> y({static_cast<std::size_t>(N), static_cast<std::size_t>(O), static_cast<std::size_t>(OD),
                     static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
    for (long n = 0; n < N; ++n)
        for (long o = 0; o < O; ++o)
            for (long a = 0; a < OD; ++a)
                for (long b = 0; b < OH; ++b)
                    for (long c = 0; c < OW; ++c) {
                        T acc = 0;
                        for (long ci = 0; ci < C; ++ci)
                            for (long kd = 0; kd < K; ++kd)
                                for (long kh = 0; kh < K; ++kh)
                                    for (long kw = 0; kw < K; ++kw) {
                                        const long i = a * g.stride + kd - g.pad_lo, j = b * g.stride + kh - g.pad_lo,
                                                   k = c * g.stride + kw - g.pad_lo;
                                        if (i < 0 || j < 0 || k < 0 || i >= D || j >= H || k >= W) continue;
                                        acc += w[static_cast<std::size_t>((((o * C + ci) * K + kd) * K + kh) * K + kw)] *
                                               x[static_cast<std::size_t>((((n * C + ci) * D + i) * H + j) * W + k)];
                                    }
                        y[static_cast<std::size_t>((((n * O + o) * OD + a) * OH + b) * OW + c)] = acc;
                    }
    return y;
}

inline double conv3d_reference_error(std::mt19937_64& rng) {
    for (;;) {
        const std::size_t n = detail::dim(rng, 1, 2), c = detail::dim(rng, 1, 4), o = detail::dim(rng, 1, 4),
                          k = detail::dim(rng, 1, 5);
        const tc::Shape xs{n, c, detail::dim(rng, 3, 10), detail::dim(rng, 3, 10), detail::dim(rng, 3, 10)};
        tc::Conv3dGeometry geom{detail::uniform_int(rng, 1, 2), detail::uniform_int(rng, 0, 2), detail::uniform_int(rng, 0, 2)};
        bool fits = true;
        for (std::size_t d = 2; d < 5; ++d) fits = fits && geom.out_extent(static_cast<long>(xs[d]), static_cast<long>(k)) >= 1;
        if (!fits) continue;
        const auto x = detail::random_tensor<float>(xs, rng);
        const auto w = detail::random_tensor<float>({o, c, k, k, k}, rng);
        tc::Graph<float> g;
        const auto y = tc::conv3d<float>(g.constant(x), g.constant(w), std::nullopt, geom);
        const auto ref = naive_conv3d(x, w, geom);
        double diff = 0, scale = 0;
        for (std::size_t i = 0; i < ref.size(); ++i) {
            diff = std::max(diff, static_cast<double>(std::abs(y.value()[i] - ref[i])));
            scale = std::max(scale, static_cast<double>(std::abs(ref[i])));
        }
        return diff / std::max(scale, 1e-30);
    }
}

/// Whole VAE + U-Net objective on a 6^3 grid with an 8-dimensional latent
/// code, checked on a random subset of parameter coordinates.
inline double end_to_end_gradcheck(std::mt19937_64& rng, std::size_t coords = 300) {
    auto cfg = models::ModelConfig::toy(6, 8);
    models::VoxelVae<double> vae(cfg, rng());
    std::mt19937_64 init(rng());
    models::UNet<double> unet(cfg, init);
    const auto spec = GridSpec::with_pitch(6);
    std::vector<DensityGrid> dens;
    std::vector<SpeciesGrid> species;
    for (int i = 0; i < 2; ++i) {
        const auto atoms = detail::random_atoms(rng, 2, 0.3, 1.7, 20);
        dens.push_back(density_from_atoms(atoms, spec));
        species.push_back(species_from_atoms(atoms, spec));
    }
    const std::vector<const DensityGrid*> dp{&dens[0], &dens[1]};
    const std::vector<const SpeciesGrid*> sp{&species[0], &species[1]};
    const auto x = models::density_batch<double>(dp);
    const auto onehot = models::one_hot_batch<double>(sp, cfg.num_classes);
    const auto eps = detail::random_tensor({2, 8}, rng);
    models::TrainConfig tcfg;
    tcfg.beta = 0.5;
    auto params = vae.registry().params;
    for (auto* p : unet.registry().params) params.push_back(p);
    return gradcheck(params, [&](tc::Graph<double>& g) {
        const auto f = models::joint_forward(g, vae, unet, x, onehot, eps, tcfg);
        return tc::weighted_sum<double>({f.vae.total, f.unet}, {1.0, 1.0});
    }, rng, coords);
}

struct GradcheckOptions {
    int shapes_per_op = 20;
    std::uint64_t seed = 404;
    bool end_to_end = true;
};

inline std::vector<CheckResult> gradcheck_suite(const GradcheckOptions& opt = {}) {
    std::vector<CheckResult> out;
    std::mt19937_64 rng(opt.seed);
    for (const auto& op : op_checks()) {
        detail::Stopwatch sw;
        double worst = 0;
        for (int i = 0; i < opt.shapes_per_op; ++i) worst = std::max(worst, op.run(rng));
        out.push_back({"gradcheck " + op.name, worst < op.tolerance,
                       detail::format(opt.shapes_per_op, " shapes, max rel err ", worst, " (limit ", op.tolerance, ")"),
                       sw.seconds()});
    }
    {
        detail::Stopwatch sw;
        double worst = 0;
        for (int i = 0; i < opt.shapes_per_op; ++i) worst = std::max(worst, conv3d_reference_error(rng));
        out.push_back({"conv3d vs naive reference (f32)", worst < 1e-5,
                       detail::format(opt.shapes_per_op, " shapes, max rel err ", worst, " (limit 1e-05)"), sw.seconds()});
    }
    if (opt.end_to_end) {
        detail::Stopwatch sw;
        const double err = end_to_end_gradcheck(rng);
        out.push_back({"gradcheck end-to-end VAE + U-Net", err < 1e-3,
                       detail::format("6^3 grid, latent 8, max rel err ", err, " (limit 0.001)"), sw.seconds()});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses

inline CheckResult loss_closed_forms() {
    detail::Stopwatch sw;
    tc::Graph<double> g;
    const auto zeros = g.constant(tc::Tensor<double>({3, 7}, 0.0));
    const double kl0 = tc::kl_diag_gaussian(zeros, zeros).value()[0];
    const double kl1 = tc::kl_diag_gaussian(g.constant(tc::Tensor<double>({1, 1}, 1.0)),
                                            g.constant(tc::Tensor<double>({1, 1}, 0.0)))
                           .value()[0];
    const double bce = tc::bce_with_logits(g.constant(tc::Tensor<double>({2, 5, 3, 3, 3}, 0.0)),
                                           g.constant(tc::Tensor<double>({2, 5, 3, 3, 3}, 1.0)))
                           .value()[0];
    const double bce_neg = tc::bce_with_logits(g.constant(tc::Tensor<double>({4}, 0.0)),
                                               g.constant(tc::Tensor<double>({4}, 0.0)))
                               .value()[0];

    std::mt19937_64 rng(505);
    const tc::Shape grid{2, 1, 4, 4, 4}, seg{2, 5, 4, 4, 4};
    models::TrainConfig cfg;
    cfg.beta = 0.37;
    cfg.gamma = 0.1;
    const auto l = models::vae_loss(g.constant(detail::random_tensor(grid, rng)), g.constant(detail::random_tensor(grid, rng)),
                                    g.constant(detail::random_tensor({2, 6}, rng)), g.constant(detail::random_tensor({2, 6}, rng)),
                                    g.constant(detail::random_tensor(seg, rng, -3, 3)),
                                    g.constant(detail::random_tensor(seg, rng, 0, 1)), cfg);
    const auto b = models::breakdown(l);
    const double expected = b.reconstruction + cfg.beta * b.kl + cfg.gamma * b.segmentation;
    const double sum_err = std::abs(b.total - expected) / std::abs(expected);

    const bool ok = kl0 == 0.0 && std::abs(kl1 - 0.5) <= 1e-9 && std::abs(bce - std::log(2.0)) <= 1e-9 &&
                    std::abs(bce_neg - std::log(2.0)) <= 1e-9 && sum_err <= 1e-6;
    return {"loss closed forms", ok,
            detail::format("KL(0,0) = ", kl0, ", KL(1,0) - 0.5 = ", kl1 - 0.5, ", BCE(0) - ln2 = ", bce - std::log(2.0),
                           ", weighted-sum rel err = ", sum_err),
            sw.seconds()};
}

// ---------------------------------------------------------------------------
// Segmentation

/// Random single-cell placements inside the cube whose atoms are pairwise
/// farther apart than `min_separation`.
inline std::vector<PlacedAtom> random_separated_cell(std::mt19937_64& rng, double min_separation, const GridSpec& spec) {
    for (;;) {
        const auto params = random_lattice_params(rng, 3.0, 7.0);
        std::vector<AtomSite> sites;
        const int n = detail::uniform_int(rng, 1, 8);
        for (int i = 0; i < n; ++i)
            sites.push_back({detail::uniform_int(rng, 1, 100),
                             {detail::uniform(rng, 0, 1), detail::uniform(rng, 0, 1), detail::uniform(rng, 0, 1)}});
        const UnitCell cell(params, sites);
        if (!(cell.max_side() < spec.box_side)) continue;
        const auto atoms = place_single_cell(cell, random_rotation(rng()), spec.box_side);
        bool ok = true;
        for (std::size_t i = 0; i < atoms.size() && ok; ++i) {
            for (std::size_t d = 0; d < 3; ++d)
                ok = ok && atoms[i].cart[d] >= 0 && atoms[i].cart[d] <= spec.box_side;
            for (std::size_t j = i + 1; j < atoms.size() && ok; ++j)
                ok = distance(atoms[i].cart, atoms[j].cart) > min_separation;
        }
        if (ok) return atoms;
    }
}

inline CheckResult segmentation_roundtrip(int cells = 50, std::uint64_t seed = 606, double min_separation = 1.2) {
    detail::Stopwatch sw;
    std::mt19937_64 rng(seed);
    const GridSpec spec;
    int count_ok = 0, species_ok = 0, atoms_total = 0;
    double worst_centroid = 0;
    double closest_failure = std::numeric_limits<double>::infinity();
    for (int c = 0; c < cells; ++c) {
        const auto truth = random_separated_cell(rng, min_separation, spec);
        atoms_total += static_cast<int>(truth.size());
        const auto atoms = segment(one_hot_species(species_from_atoms(truth, spec)));
        if (atoms.size() != truth.size()) {
            for (std::size_t i = 0; i < truth.size(); ++i)
                for (std::size_t j = i + 1; j < truth.size(); ++j)
                    closest_failure = std::min(closest_failure, distance(truth[i].cart, truth[j].cart));
            continue;
        }
        ++count_ok;
        bool species = true;
        for (const auto& a : atoms) {
            double best = std::numeric_limits<double>::infinity();
            int z = 0;
            for (const auto& t : truth) {
                const double d = distance(a.centroid, t.cart);
                if (d < best) {
                    best = d;
                    z = t.atomic_number;
                }
            }
            worst_centroid = std::max(worst_centroid, best);
            species = species && z == a.atomic_number;
        }
        species_ok += species;
    }
    const bool ok = count_ok == cells && species_ok == cells && worst_centroid <= 0.29;
    std::string detail = detail::format(cells, " cells / ", atoms_total, " atoms, separation > ", min_separation,
                                        " A: count exact ", count_ok, "/", cells, ", species exact ", species_ok, "/",
                                        cells, ", max centroid error ", worst_centroid, " A");
    if (count_ok < cells)
        detail += detail::format("; failing cells merge 26-adjacent label blobs, closest pair ", closest_failure,
                                 " A (radius-0.5 A blobs can touch below 1 A + sqrt(3) * pitch = ",
                                 1.0 + std::sqrt(3.0) * spec.pitch(), " A)");
    return {"segmentation round-trip", ok, detail, sw.seconds()};
}

// ---------------------------------------------------------------------------
// Metrics

/// Sort-free reference: order statistics by selection, then linear
/// interpolation between neighbouring ranks.
inline double reference_percentile(std::vector<double> v, double p) {
    const double rank = p / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(rank);
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
    const double a = v[lo];
    if (lo + 1 >= v.size()) return a;
    const double b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
    return a + (rank - static_cast<double>(lo)) * (b - a);
}

inline double reference_pearson(const std::vector<double>& a, const std::vector<double>& b) {
    long double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<long double>(a.size());
    mb /= static_cast<long double>(a.size());
    long double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return static_cast<double>(sab / std::sqrt(saa * sbb));
}

inline CheckResult metrics_oracles(std::uint64_t seed = 707) {
    detail::Stopwatch sw;
    std::mt19937_64 rng(seed);

    double shift_err = 0;
    for (int c = 0; c < 20; ++c) {
        std::vector<PlacedAtom> truth;
        for (int i = 0; i < 6; ++i)
            truth.push_back({detail::uniform_int(rng, 1, 100),
                             {2.0 * i + detail::uniform(rng, 0, 0.5), detail::uniform(rng, 0, 10), detail::uniform(rng, 0, 10)}});
        auto pred = truth;
        for (auto& a : pred) a.cart.x += 0.1;
        const auto d = bidirectional_nn_distances(pred, truth);
        for (double v : d.pred_to_truth) shift_err = std::max(shift_err, std::abs(v - 0.1));
        for (double v : d.truth_to_pred) shift_err = std::max(shift_err, std::abs(v - 0.1));
    }

    double pct_err = 0;
    for (int c = 0; c < 50; ++c) {
        std::vector<double> v(static_cast<std::size_t>(detail::uniform_int(rng, 1, 200)));
        for (auto& x : v) x = detail::uniform(rng, -5, 5);
        for (double p : {0.0, 10.0, 50.0, 75.0, 90.0, 99.0, 100.0, detail::uniform(rng, 0, 100)})
            pct_err = std::max(pct_err, std::abs(percentile(v, p) - reference_percentile(v, p)));
    }

    double corr_err = 0;
    for (int c = 0; c < 20; ++c) {
        DensityGrid a{GridSpec::with_pitch(8), std::vector<double>(512)}, b = a;
        for (std::size_t i = 0; i < 512; ++i) {
            a.values[i] = detail::uniform(rng, 0, 3);
            b.values[i] = 0.5 * a.values[i] + detail::uniform(rng, -1, 1);
        }
        corr_err = std::max(corr_err, std::abs(density_correlation(a, b) - reference_pearson(a.values, b.values)));
    }

    const bool ok = shift_err <= 1e-12 && pct_err <= 1e-12 && corr_err <= 1e-12;
    return {"metrics oracles", ok,
            detail::format("shift case |d - 0.1| <= ", shift_err, ", percentile err ", pct_err, ", Pearson err ", corr_err),
            sw.seconds()};
}

// ---------------------------------------------------------------------------
// Models

/// Random small cells at a toy grid, ready for training.
inline std::vector<models::TrainingSample> toy_training_set(int count, const GridSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<models::TrainingSample> out;
    const double max_side = std::min(4.5, spec.box_side * 0.8);
    while (static_cast<int>(out.size()) < count) {
        const auto p = random_lattice_params(rng, 2.5, max_side);
        std::vector<AtomSite> sites;
        const int n = detail::uniform_int(rng, 1, 4);
        for (int i = 0; i < n; ++i)
            sites.push_back({detail::uniform_int(rng, 1, 30),
                             {detail::uniform(rng, 0, 1), detail::uniform(rng, 0, 1), detail::uniform(rng, 0, 1)}});
        const UnitCell cell(p, sites);
        if (!(cell.max_side() < spec.box_side)) continue;
        auto s = make_sample(cell, Representation::SingleCell, rng(), spec);
        out.push_back({std::move(s.density), std::move(s.species)});
    }
    return out;
}

/// Decoder gradients of the joint objective against a VAE-only backward, in
/// f64: identical bits at gamma = 0, different at gamma = 0.1.
inline CheckResult gamma_coupling(std::uint64_t seed = 808) {
    detail::Stopwatch sw;
    const auto cfg = models::ModelConfig::toy(8, 6);
    const auto spec = GridSpec::with_pitch(8);
    const auto data = toy_training_set(2, spec, seed);
    std::vector<const DensityGrid*> dp;
    std::vector<const SpeciesGrid*> sp;
    for (const auto& s : data) {
        dp.push_back(&s.density);
        sp.push_back(&s.species);
    }
    const auto x = models::density_batch<double>(dp);
    const auto onehot = models::one_hot_batch<double>(sp, cfg.num_classes);
    std::mt19937_64 rng(seed);
    const auto eps = models::standard_normal<double>({2, 6}, rng);

    // A decoder whose final ReLU is dead everywhere has zero gradients under
    // any objective, so the comparison starts from a live initialization.
    std::uint64_t model_seed = seed;
    for (;;) {
        ++model_seed;
        models::VoxelVae<double> vae(cfg, model_seed);
        const auto out = models::decode(vae, std::vector<models::LatentVector>{models::LatentVector{std::vector<double>(6, 0.5)}}, spec);
        if (models::max_value(out[0]) > 0) break;
    }

    const auto decoder_grads = [&](double gamma, bool vae_only) {
        models::VoxelVae<double> vae(cfg, model_seed);
        std::mt19937_64 init(seed + 2);
        models::UNet<double> unet(cfg, init);
        models::TrainConfig tcfg;
        tcfg.gamma = gamma;
        auto params = vae.registry().params;
        tc::zero_grads(params);
        tc::Graph<double> g;
        if (vae_only) {
            const auto enc = vae.encoder()(g, g.constant(x), true);
            const auto recon = vae.decoder()(g, tc::reparameterize(enc.mu, enc.logvar, eps));
            const auto loss = tc::weighted_sum<double>({tc::mse_loss(recon, g.constant(x)), tc::kl_diag_gaussian(enc.mu, enc.logvar)},
                                                       {1.0, tcfg.beta});
            g.backward(loss, &params);
        } else {
            const auto f = models::joint_forward(g, vae, unet, x, onehot, eps, tcfg);
            g.backward(f.vae.total, &params);
        }
        std::vector<tc::Tensor<double>> grads;
        for (auto* p : vae.decoder_registry().params) grads.push_back(p->grad);
        return grads;
    };
    const auto reference = decoder_grads(0.0, true);
    const bool equal_at_zero = decoder_grads(0.0, false) == reference;
    const bool differ_at_tenth = decoder_grads(0.1, false) != reference;
    return {"gamma coupling", equal_at_zero && differ_at_tenth,
            detail::format("gamma=0 decoder grads bitwise equal to VAE-only: ", equal_at_zero ? "yes" : "no",
                           "; gamma=0.1 differ: ", differ_at_tenth ? "yes" : "no"),
            sw.seconds()};
}

/// decode(latent_interpolate(z1, z2, t)) at t = 0 and 1 against decode(z1)
/// and decode(z2), compared bit for bit.
template <typename T>
CheckResult interpolation_endpoints(models::VoxelVae<T>& vae, const models::LatentVector& z1,
                                    const models::LatentVector& z2, const GridSpec& spec) {
    detail::Stopwatch sw;
    const auto one = [&](const models::LatentVector& z) {
        return models::decode(vae, std::span<const models::LatentVector>(&z, 1), spec)[0].values;
    };
    const bool start = one(models::latent_interpolate(z1, z2, 0.0)) == one(z1);
    const bool end = one(models::latent_interpolate(z1, z2, 1.0)) == one(z2);
    return {"interpolation endpoints", start && end,
            detail::format("t=0 bit-equal: ", start ? "yes" : "no", ", t=1 bit-equal: ", end ? "yes" : "no"), sw.seconds()};
}

inline CheckResult interpolation_endpoints(std::uint64_t seed = 909) {
    const auto cfg = models::ModelConfig::toy(16, 16);
    models::VoxelVae<float> vae(cfg, seed);
    std::mt19937_64 rng(seed);
    const auto z1 = models::sample_prior(rng, 16), z2 = models::sample_prior(rng, 16);
    return interpolation_endpoints(vae, z1, z2, GridSpec::with_pitch(16));
}

/// Everything that needs no training, in a fixed order.
inline std::vector<CheckResult> selftest(bool quick = false) {
    std::vector<CheckResult> out;
    out.push_back(voxelizer_oracle(quick ? 10 : 100));
    out.push_back(mass_conservation(quick ? 10 : 50));
    out.push_back(lattice_geometry(quick ? 100 : 500));
    for (auto& r : gradcheck_suite({.shapes_per_op = quick ? 4 : 20, .end_to_end = !quick})) out.push_back(std::move(r));
    out.push_back(loss_closed_forms());
    out.push_back(segmentation_roundtrip(quick ? 10 : 50, 606, 1.6));
    out.push_back(metrics_oracles());
    out.push_back(gamma_coupling());
    out.push_back(interpolation_endpoints());
    return out;
}

}  // namespace voxcell::checks
