#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "binary_io.hpp"
#include "error.hpp"
#include "ingest.hpp"
#include "lattice.hpp"

namespace voxcell {

inline constexpr int kNumSpeciesClasses = 101;  // background + Z 1..100
inline constexpr double kSpeciesRadius = 0.5;   // Å

struct GridSpec {
    int side_voxels = 30;
    double box_side = 10.0;  // Å
    double sigma = 1.0;      // Å
    double cutoff_sigmas = 6.0;

    double pitch() const { return box_side / side_voxels; }
    std::size_t voxel_count() const {
        const auto n = static_cast<std::size_t>(side_voxels);
        return n * n * n;
    }
    double voxel_center(int i) const { return (i + 0.5) * pitch(); }

    /// Grid with the standard 1/3 Å pitch and a different voxel count.
    static GridSpec with_pitch(int side_voxels, double pitch = 10.0 / 30.0) {
        GridSpec s;
        s.side_voxels = side_voxels;
        s.box_side = side_voxels * pitch;
        return s;
    }

    void validate() const {
        require(side_voxels >= 2, ErrorKind::InvalidArgument, "side_voxels must be >= 2");
        require(box_side > 0, ErrorKind::InvalidArgument, "box_side must be positive");
        require(sigma > 0, ErrorKind::InvalidArgument, "sigma must be positive");
        require(cutoff_sigmas >= 3, ErrorKind::InvalidArgument, "cutoff_sigmas must be >= 3");
    }
};

// Row-major, z fastest.
inline std::size_t voxel_index(const GridSpec& s, int i, int j, int k) {
    const auto n = static_cast<std::size_t>(s.side_voxels);
    return (static_cast<std::size_t>(i) * n + static_cast<std::size_t>(j)) * n + static_cast<std::size_t>(k);
}

struct DensityGrid {
    GridSpec spec;
    std::vector<double> values;

    double at(int i, int j, int k) const { return values[voxel_index(spec, i, j, k)]; }
};

struct SpeciesGrid {
    GridSpec spec;
    std::vector<std::uint16_t> labels;

    std::uint16_t at(int i, int j, int k) const { return labels[voxel_index(spec, i, j, k)]; }
};

/// Per-voxel class scores, class-major: scores[c * voxels + v].
struct ClassProbGrid {
    GridSpec spec;
    int num_classes = kNumSpeciesClasses;
    std::vector<float> scores;

    float at(int c, std::size_t voxel) const {
        return scores[static_cast<std::size_t>(c) * spec.voxel_count() + voxel];
    }
};

inline double gaussian_normalizer(double sigma) {
    return 1.0 / (sigma * sigma * sigma * std::pow(2.0 * std::numbers::pi, 1.5));
}

namespace detail {

// Voxel indices whose centres lie within `radius` of `x` along one axis.
inline std::pair<int, int> voxel_span(const GridSpec& s, double x, double radius) {
    const double p = s.pitch();
    const double lo = std::ceil((x - radius) / p - 0.5);
    const double hi = std::floor((x + radius) / p - 0.5);
    const int first = static_cast<int>(std::clamp(lo, 0.0, static_cast<double>(s.side_voxels)));
    const int last = static_cast<int>(std::clamp(hi, -1.0, static_cast<double>(s.side_voxels - 1)));
    return {first, last};
}

}  // namespace detail

/// Gaussian density sampled at voxel centres. Contributions farther than
/// cutoff_sigmas * sigma from a voxel centre are dropped.
inline DensityGrid density_from_atoms(const std::vector<PlacedAtom>& atoms, const GridSpec& spec) {
    spec.validate();
    DensityGrid grid{spec, std::vector<double>(spec.voxel_count(), 0.0)};
    const double radius = spec.cutoff_sigmas * spec.sigma;
    const double r2 = radius * radius;
    const double inv_two_var = 1.0 / (2.0 * spec.sigma * spec.sigma);
    const double norm = gaussian_normalizer(spec.sigma);

    std::vector<double> ex, ey, ez, dx2, dy2, dz2;
    for (const auto& atom : atoms) {
        const auto [i0, i1] = detail::voxel_span(spec, atom.cart.x, radius);
        const auto [j0, j1] = detail::voxel_span(spec, atom.cart.y, radius);
        const auto [k0, k1] = detail::voxel_span(spec, atom.cart.z, radius);
        if (i0 > i1 || j0 > j1 || k0 > k1) continue;

        // The Gaussian factorises per axis.
        auto axis = [&](int a, int b, double c, std::vector<double>& e, std::vector<double>& d2) {
            e.resize(static_cast<std::size_t>(b - a + 1));
            d2.resize(e.size());
            for (int t = a; t <= b; ++t) {
                const double d = spec.voxel_center(t) - c;
                d2[static_cast<std::size_t>(t - a)] = d * d;
                e[static_cast<std::size_t>(t - a)] = std::exp(-d * d * inv_two_var);
            }
        };
        axis(i0, i1, atom.cart.x, ex, dx2);
        axis(j0, j1, atom.cart.y, ey, dy2);
        axis(k0, k1, atom.cart.z, ez, dz2);

        const double weight = norm * atom.atomic_number;
        for (int i = i0; i <= i1; ++i) {
            const auto ii = static_cast<std::size_t>(i - i0);
            for (int j = j0; j <= j1; ++j) {
                const auto jj = static_cast<std::size_t>(j - j0);
                const double dij = dx2[ii] + dy2[jj];
                if (dij > r2) continue;
                const double wij = weight * ex[ii] * ey[jj];
                double* row = &grid.values[voxel_index(spec, i, j, 0)];
                for (int k = k0; k <= k1; ++k) {
                    const auto kk = static_cast<std::size_t>(k - k0);
                    if (dij + dz2[kk] <= r2) row[k] += wij * ez[kk];
                }
            }
        }
    }
    return grid;
}

/// Scales densities so an isolated atom peaks at its atomic number (sigma = 1).
inline DensityGrid plot_scaled(const DensityGrid& grid) {
    DensityGrid out = grid;
    const double f = 1.0 / gaussian_normalizer(grid.spec.sigma);
    for (auto& v : out.values) v *= f;
    return out;
}

/// Each voxel takes the atomic number of the nearest atom within 0.5 Å of
/// its centre; ties go to the earlier atom.
inline SpeciesGrid species_from_atoms(const std::vector<PlacedAtom>& atoms, const GridSpec& spec,
                                      double radius = kSpeciesRadius) {
    spec.validate();
    SpeciesGrid grid{spec, std::vector<std::uint16_t>(spec.voxel_count(), 0)};
    std::vector<double> best(spec.voxel_count(), std::numeric_limits<double>::infinity());
    const double r2 = radius * radius;
    for (const auto& atom : atoms) {
        if (atom.atomic_number < 1 || atom.atomic_number >= kNumSpeciesClasses)
            fail(ErrorKind::LabelOutOfRange,
                 "atomic number " + std::to_string(atom.atomic_number) + " has no species class");
        const auto [i0, i1] = detail::voxel_span(spec, atom.cart.x, radius);
        const auto [j0, j1] = detail::voxel_span(spec, atom.cart.y, radius);
        const auto [k0, k1] = detail::voxel_span(spec, atom.cart.z, radius);
        for (int i = i0; i <= i1; ++i)
            for (int j = j0; j <= j1; ++j)
                for (int k = k0; k <= k1; ++k) {
                    const Vec3 c{spec.voxel_center(i), spec.voxel_center(j), spec.voxel_center(k)};
                    const double d2 = distance_squared(c, atom.cart);
                    const auto v = voxel_index(spec, i, j, k);
                    if (d2 <= r2 && d2 < best[v]) {
                        best[v] = d2;
                        grid.labels[v] = static_cast<std::uint16_t>(atom.atomic_number);
                    }
                }
    }
    return grid;
}

inline ClassProbGrid one_hot_species(const SpeciesGrid& grid, int num_classes = kNumSpeciesClasses) {
    ClassProbGrid out{grid.spec, num_classes,
                      std::vector<float>(static_cast<std::size_t>(num_classes) * grid.spec.voxel_count(), 0.0f)};
    const std::size_t voxels = grid.spec.voxel_count();
    for (std::size_t v = 0; v < voxels; ++v) {
        const int label = grid.labels[v];
        if (label >= num_classes)
            fail(ErrorKind::LabelOutOfRange, "label " + std::to_string(label) + " exceeds class count");
        out.scores[static_cast<std::size_t>(label) * voxels + v] = 1.0f;
    }
    return out;
}

struct Sample {
    std::vector<PlacedAtom> atoms;
    DensityGrid density;
    SpeciesGrid species;
};

/// Deterministic in (cell, representation, seed). For the repeated lattice,
/// `origin_offset` selects the cube that starts at a lattice point; otherwise
/// the offset is drawn from the seed.
inline Sample make_sample(const UnitCell& cell, Representation rep, std::uint64_t seed,
                          const GridSpec& spec = {}, bool origin_offset = false) {
    Sample s;
    if (rep == Representation::SingleCell) {
        s.atoms = place_single_cell(cell, random_rotation(seed), spec.box_side);
    } else {
        Vec3 offset;
        if (!origin_offset) {
            std::mt19937_64 rng(seed);
            std::uniform_real_distribution<double> unit(0.0, 1.0);
            offset = {unit(rng), unit(rng), unit(rng)};
        }
        s.atoms = place_repeated_lattice(cell, offset, spec.box_side, spec.cutoff_sigmas * spec.sigma);
    }
    s.density = density_from_atoms(s.atoms, spec);
    s.species = species_from_atoms(s.atoms, spec);
    return s;
}

/// Atoms whose positions lie inside the sampling cube (the evaluation truth
/// for repeated-lattice samples, which carry margin images).
inline std::vector<PlacedAtom> atoms_inside_box(const std::vector<PlacedAtom>& atoms, const GridSpec& spec) {
    std::vector<PlacedAtom> out;
    for (const auto& a : atoms)
        if (a.cart.x >= 0 && a.cart.x <= spec.box_side && a.cart.y >= 0 && a.cart.y <= spec.box_side &&
            a.cart.z >= 0 && a.cart.z <= spec.box_side)
            out.push_back(a);
    return out;
}

// ---------------------------------------------------------------------------
// Grid files: "VXGR", u16 version, u16 dtype (0 = f32, 1 = u16), 3 x u16
// dims, u16 reserved, then the little-endian payload with z fastest.

inline constexpr std::uint16_t kGridFileVersion = 1;
enum class GridDtype : std::uint16_t { F32 = 0, U16 = 1 };

namespace detail {

inline void write_grid_header(io::ByteWriter& w, GridDtype dtype, int n) {
    w.put_bytes("VXGR");
    w.put_u16(kGridFileVersion);
    w.put_u16(static_cast<std::uint16_t>(dtype));
    for (int d = 0; d < 3; ++d) w.put_u16(static_cast<std::uint16_t>(n));
    w.put_u16(0);
}

inline int read_grid_header(io::ByteReader& r, GridDtype expected) {
    if (r.get_bytes(4) != "VXGR") fail(ErrorKind::MalformedFile, "not a grid file (bad magic)");
    if (r.get_u16() != kGridFileVersion) fail(ErrorKind::MalformedFile, "unsupported grid file version");
    const auto dtype = r.get_u16();
    if (dtype != static_cast<std::uint16_t>(expected))
        fail(ErrorKind::MalformedFile, "grid file holds a different dtype than requested");
    const int nx = r.get_u16(), ny = r.get_u16(), nz = r.get_u16();
    r.get_u16();
    if (nx != ny || ny != nz || nx < 2) fail(ErrorKind::MalformedFile, "grid must be a cube of side >= 2");
    return nx;
}

}  // namespace detail

inline std::vector<char> encode_density(const DensityGrid& g) {
    io::ByteWriter w;
    detail::write_grid_header(w, GridDtype::F32, g.spec.side_voxels);
    for (double v : g.values) w.put_f32(static_cast<float>(v));
    return w.bytes();
}

inline std::vector<char> encode_species(const SpeciesGrid& g) {
    io::ByteWriter w;
    detail::write_grid_header(w, GridDtype::U16, g.spec.side_voxels);
    for (auto v : g.labels) w.put_u16(v);
    return w.bytes();
}

inline DensityGrid decode_density(std::vector<char> bytes, double pitch = 10.0 / 30.0) {
    io::ByteReader r(std::move(bytes));
    DensityGrid g;
    g.spec = GridSpec::with_pitch(detail::read_grid_header(r, GridDtype::F32), pitch);
    g.values.resize(g.spec.voxel_count());
    for (auto& v : g.values) v = r.get_f32();
    if (!r.at_end()) fail(ErrorKind::MalformedFile, "trailing bytes after grid payload");
    return g;
}

inline SpeciesGrid decode_species(std::vector<char> bytes, double pitch = 10.0 / 30.0) {
    io::ByteReader r(std::move(bytes));
    SpeciesGrid g;
    g.spec = GridSpec::with_pitch(detail::read_grid_header(r, GridDtype::U16), pitch);
    g.labels.resize(g.spec.voxel_count());
    for (auto& v : g.labels) v = r.get_u16();
    if (!r.at_end()) fail(ErrorKind::MalformedFile, "trailing bytes after grid payload");
    return g;
}

inline void save_density(const std::string& path, const DensityGrid& g) { io::atomic_write(path, encode_density(g)); }
inline void save_species(const std::string& path, const SpeciesGrid& g) { io::atomic_write(path, encode_species(g)); }
inline DensityGrid load_density(const std::string& path, double pitch = 10.0 / 30.0) {
    return decode_density(io::read_file(path), pitch);
}
inline SpeciesGrid load_species(const std::string& path, double pitch = 10.0 / 30.0) {
    return decode_species(io::read_file(path), pitch);
}

}  // namespace voxcell
