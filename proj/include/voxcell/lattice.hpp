#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "error.hpp"
#include "geometry.hpp"

namespace voxcell {

struct AtomSite {
    int atomic_number = 0;
    Vec3 frac;
};

/// An atom positioned in the Cartesian frame of the sampling cube.
struct PlacedAtom {
    int atomic_number = 0;
    Vec3 cart;
};

struct LatticeParams {
    double a = 0, b = 0, c = 0;
    double alpha = 90, beta = 90, gamma = 90;  // degrees
};

/// Rows of the lattice matrix are the lattice vectors: a along x, b in the
/// x-y plane, c completing a right-handed cell.
inline Mat3 lattice_matrix_from_params(const LatticeParams& p) {
    require(p.a > 0 && p.b > 0 && p.c > 0, ErrorKind::InvalidArgument,
            "cell side lengths must be positive");
    for (double ang : {p.alpha, p.beta, p.gamma})
        require(ang > 0 && ang < 180, ErrorKind::DegenerateCell,
                "cell angles must lie strictly between 0 and 180 degrees");

    constexpr double deg = std::numbers::pi / 180.0;
    const double ca = std::cos(p.alpha * deg);
    const double cb = std::cos(p.beta * deg);
    const double cg = std::cos(p.gamma * deg);
    const double sg = std::sin(p.gamma * deg);

    const double vol_term = 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg;
    if (!(vol_term > 1e-10) || !(sg > 1e-6))
        fail(ErrorKind::DegenerateCell, "lattice angles do not span a three-dimensional cell");

    const double cx = p.c * cb;
    const double cy = p.c * (ca - cb * cg) / sg;
    const double cz = p.c * std::sqrt(vol_term) / sg;
    return Mat3::from_rows({p.a, 0, 0}, {p.b * cg, p.b * sg, 0}, {cx, cy, cz});
}

inline double cell_volume(const LatticeParams& p) {
    constexpr double deg = std::numbers::pi / 180.0;
    const double ca = std::cos(p.alpha * deg), cb = std::cos(p.beta * deg),
                 cg = std::cos(p.gamma * deg);
    return p.a * p.b * p.c * std::sqrt(1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg);
}

inline double wrap_unit(double f) {
    double w = f - std::floor(f);
    return w >= 1.0 ? 0.0 : w;
}

class UnitCell {
public:
    UnitCell(const Mat3& lattice, std::vector<AtomSite> sites)
        : lattice_(lattice), inverse_(), sites_(std::move(sites)) {
        if (!(lattice_.determinant() > 1e-9))
            fail(ErrorKind::DegenerateCell, "lattice matrix must have positive determinant");
        inverse_ = lattice_.inverse();
        for (auto& s : sites_) {
            for (std::size_t i = 0; i < 3; ++i) {
                require(std::isfinite(s.frac[i]), ErrorKind::InvalidArgument,
                        "fractional coordinate is not finite");
                s.frac[i] = wrap_unit(s.frac[i]);
            }
            require(s.atomic_number >= 1 && s.atomic_number <= 118, ErrorKind::InvalidArgument,
                    "atomic number out of range");
        }
    }

    UnitCell(const LatticeParams& params, std::vector<AtomSite> sites)
        : UnitCell(lattice_matrix_from_params(params), std::move(sites)) {}

    const Mat3& lattice_matrix() const { return lattice_; }
    const Mat3& inverse_lattice_matrix() const { return inverse_; }
    const std::vector<AtomSite>& sites() const { return sites_; }

    double side(std::size_t i) const { return norm(lattice_.row(i)); }
    double max_side() const { return std::max({side(0), side(1), side(2)}); }

private:
    Mat3 lattice_;
    Mat3 inverse_;
    std::vector<AtomSite> sites_;
};

inline Vec3 frac_to_cart(const UnitCell& cell, const Vec3& frac) {
    return row_times(frac, cell.lattice_matrix());
}

inline Vec3 cart_to_frac(const UnitCell& cell, const Vec3& cart) {
    return row_times(cart, cell.inverse_lattice_matrix());
}

/// Uniform over SO(3) via a uniformly distributed unit quaternion (Shoemake).
inline Mat3 random_rotation(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double u1 = unit(rng), u2 = unit(rng), u3 = unit(rng);
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double w = std::sqrt(1.0 - u1) * std::sin(two_pi * u2);
    double x = std::sqrt(1.0 - u1) * std::cos(two_pi * u2);
    double y = std::sqrt(u1) * std::sin(two_pi * u3);
    double z = std::sqrt(u1) * std::cos(two_pi * u3);
    const double n = std::sqrt(w * w + x * x + y * y + z * z);
    w /= n; x /= n; y /= n; z /= n;

    return Mat3{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
                 2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                 2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}};
}

inline Vec3 atom_centroid(const UnitCell& cell) {
    Vec3 c;
    if (cell.sites().empty()) return c;
    for (const auto& s : cell.sites()) c += frac_to_cart(cell, s.frac);
    return c * (1.0 / static_cast<double>(cell.sites().size()));
}

/// Rotates the atoms about their centroid and moves the centroid to the
/// middle of the sampling cube.
inline std::vector<PlacedAtom> place_single_cell(const UnitCell& cell, const Mat3& rotation,
                                                 double box_side = 10.0) {
    if (!(cell.max_side() < box_side))
        fail(ErrorKind::CellTooLarge, "unit cell does not fit inside the sampling cube");
    const Vec3 centroid = atom_centroid(cell);
    const Vec3 center{box_side / 2, box_side / 2, box_side / 2};
    std::vector<PlacedAtom> out;
    out.reserve(cell.sites().size());
    for (const auto& s : cell.sites())
        out.push_back({s.atomic_number, rotation * (frac_to_cart(cell, s.frac) - centroid) + center});
    return out;
}

/// Every periodic image whose position (after shifting the lattice by
/// -offset_frac) falls in [-margin, box_side + margin]^3, boundaries included.
inline std::vector<PlacedAtom> place_repeated_lattice(const UnitCell& cell, const Vec3& offset_frac,
                                                      double box_side, double margin) {
    require(margin >= 0, ErrorKind::InvalidArgument, "margin must be non-negative");
    const double lo = -margin, hi = box_side + margin;

    // Fractional extent of the padded box: a linear map sends the cube's
    // extrema to its corners.
    Vec3 fmin{1e300, 1e300, 1e300}, fmax{-1e300, -1e300, -1e300};
    for (int corner = 0; corner < 8; ++corner) {
        const Vec3 p{(corner & 1) ? hi : lo, (corner & 2) ? hi : lo, (corner & 4) ? hi : lo};
        const Vec3 f = cart_to_frac(cell, p);
        for (std::size_t i = 0; i < 3; ++i) {
            fmin[i] = std::min(fmin[i], f[i]);
            fmax[i] = std::max(fmax[i], f[i]);
        }
    }

    std::vector<PlacedAtom> out;
    for (const auto& s : cell.sites()) {
        std::array<long, 3> nlo{}, nhi{};
        for (std::size_t i = 0; i < 3; ++i) {
            const double base = s.frac[i] - offset_frac[i];
            nlo[i] = static_cast<long>(std::floor(fmin[i] - base)) - 1;
            nhi[i] = static_cast<long>(std::ceil(fmax[i] - base)) + 1;
        }
        for (long n0 = nlo[0]; n0 <= nhi[0]; ++n0)
            for (long n1 = nlo[1]; n1 <= nhi[1]; ++n1)
                for (long n2 = nlo[2]; n2 <= nhi[2]; ++n2) {
                    const Vec3 f{s.frac.x + static_cast<double>(n0) - offset_frac.x,
                                 s.frac.y + static_cast<double>(n1) - offset_frac.y,
                                 s.frac.z + static_cast<double>(n2) - offset_frac.z};
                    const Vec3 p = frac_to_cart(cell, f);
                    if (p.x >= lo && p.x <= hi && p.y >= lo && p.y <= hi && p.z >= lo && p.z <= hi)
                        out.push_back({s.atomic_number, p});
                }
    }
    return out;
}

}  // namespace voxcell
