#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <voxcell/checks.hpp>
#include <voxcell/lattice.hpp>

#include "test_util.hpp"

using namespace voxcell;

namespace {

double deg(double d) { return d * std::numbers::pi / 180.0; }

bool same_set(std::vector<PlacedAtom> a, std::vector<PlacedAtom> b, double tol) {
    if (a.size() != b.size()) return false;
    for (const auto& p : a) {
        const auto it = std::find_if(b.begin(), b.end(), [&](const PlacedAtom& q) {
            return q.atomic_number == p.atomic_number && distance(p.cart, q.cart) <= tol;
        });
        if (it == b.end()) return false;
        b.erase(it);
    }
    return true;
}

}  // namespace

TEST(LatticeMatrix, CubicIsDiagonal) {
    const Mat3 m = lattice_matrix_from_params({5, 5, 5, 90, 90, 90});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) EXPECT_NEAR(m(i, j), i == j ? 5.0 : 0.0, 1e-14);
    EXPECT_NEAR(m.determinant(), 125.0, 1e-12);
}

TEST(LatticeMatrix, RhombohedralVolumeMatchesClosedForm) {
    const Mat3 m = lattice_matrix_from_params({4, 4, 4, 60, 60, 60});
    const double c = std::cos(deg(60));
    const double expected = 64 * std::sqrt(1 - 3 * c * c + 2 * c * c * c);
    EXPECT_NEAR(m.determinant(), expected, 1e-12 * expected);
    EXPECT_NEAR(cell_volume({4, 4, 4, 60, 60, 60}), expected, 1e-12 * expected);
}

TEST(LatticeMatrix, ConventionAAlongXBInXyPlane) {
    const LatticeParams p{3.1, 4.2, 5.3, 77, 88, 99};
    const Mat3 m = lattice_matrix_from_params(p);
    EXPECT_NEAR(m(0, 1), 0, 1e-15);
    EXPECT_NEAR(m(0, 2), 0, 1e-15);
    EXPECT_NEAR(m(1, 2), 0, 1e-15);
    EXPECT_GT(m.determinant(), 0);
    EXPECT_NEAR(norm(m.row(1)), 4.2, 1e-12);
    EXPECT_NEAR(std::acos(dot(m.row(0), m.row(1)) / (3.1 * 4.2)), deg(99), 1e-12);
    EXPECT_NEAR(std::acos(dot(m.row(1), m.row(2)) / (4.2 * 5.3)), deg(77), 1e-12);
}

TEST(LatticeMatrix, CollapsedCellIsDegenerate) {
    EXPECT_EQ(error_kind([] { lattice_matrix_from_params({5, 5, 5, 90, 90, 179.99999999}); }),
              ErrorKind::DegenerateCell);
    EXPECT_EQ(error_kind([] { lattice_matrix_from_params({5, 5, 5, 120, 120, 120}); }), ErrorKind::DegenerateCell);
}

TEST(FracToCart, CubicAndLatticeVector) {
    const UnitCell cubic(LatticeParams{4, 4, 4, 90, 90, 90}, {});
    const Vec3 c = frac_to_cart(cubic, {0.5, 0.5, 0.5});
    EXPECT_NEAR(c.x, 2, 1e-15);
    EXPECT_NEAR(c.y, 2, 1e-15);
    EXPECT_NEAR(c.z, 2, 1e-15);
    const UnitCell tri(LatticeParams{3, 4, 5, 70, 80, 100}, {});
    const Vec3 a = frac_to_cart(tri, {1, 0, 0});
    EXPECT_EQ(a.x, tri.lattice_matrix()(0, 0));
    EXPECT_EQ(a.y, tri.lattice_matrix()(0, 1));
    EXPECT_EQ(a.z, tri.lattice_matrix()(0, 2));
}

TEST(RandomRotation, OrthogonalDeterministic) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const Mat3 r = random_rotation(seed);
        EXPECT_NEAR(r.determinant(), 1, 1e-12);
        const Mat3 rtr = r.transposed() * r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) EXPECT_NEAR(rtr(i, j), i == j ? 1 : 0, 1e-12);
    }
    const Mat3 a = random_rotation(42), b = random_rotation(42);
    for (int i = 0; i < 9; ++i) EXPECT_EQ(a.m[i], b.m[i]);
}

TEST(RandomRotation, EntriesAverageToZero) {
    constexpr int n = 10000;
    std::array<double, 9> sum{}, sum2{};
    for (int s = 0; s < n; ++s) {
        const Mat3 r = random_rotation(static_cast<std::uint64_t>(s) * 7919 + 1);
        for (int i = 0; i < 9; ++i) {
            sum[i] += r.m[i];
            sum2[i] += r.m[i] * r.m[i];
        }
    }
    for (int i = 0; i < 9; ++i) {
        const double mean = sum[i] / n;
        const double sd = std::sqrt(sum2[i] / n - mean * mean);
        EXPECT_LT(std::abs(mean), 3 * sd / std::sqrt(double(n)));
    }
}

TEST(PlaceSingleCell, SingleAtomAtBoxCenter) {
    const UnitCell cell(LatticeParams{4, 4, 4, 90, 90, 90}, {{8, {0, 0, 0}}});
    const auto atoms = place_single_cell(cell, Mat3::identity());
    ASSERT_EQ(atoms.size(), 1u);
    EXPECT_NEAR(atoms[0].cart.x, 5, 1e-15);
    EXPECT_NEAR(atoms[0].cart.y, 5, 1e-15);
    EXPECT_NEAR(atoms[0].cart.z, 5, 1e-15);
}

TEST(PlaceSingleCell, MatchesHandComputation) {
    const UnitCell cell(LatticeParams{3, 3.5, 4, 90, 100, 90}, {{1, {0.1, 0.2, 0.3}}, {6, {0.6, 0.5, 0.9}}});
    const Mat3 r = random_rotation(9);
    const auto atoms = place_single_cell(cell, r);
    const Mat3& l = cell.lattice_matrix();
    std::array<Vec3, 2> cart;
    for (int s = 0; s < 2; ++s) {
        const Vec3 f = cell.sites()[static_cast<std::size_t>(s)].frac;
        cart[static_cast<std::size_t>(s)] = {f.x * l(0, 0) + f.y * l(1, 0) + f.z * l(2, 0),
                                             f.x * l(0, 1) + f.y * l(1, 1) + f.z * l(2, 1),
                                             f.x * l(0, 2) + f.y * l(1, 2) + f.z * l(2, 2)};
    }
    const Vec3 centroid{(cart[0].x + cart[1].x) / 2, (cart[0].y + cart[1].y) / 2, (cart[0].z + cart[1].z) / 2};
    for (std::size_t s = 0; s < 2; ++s) {
        const Vec3 d = cart[s] - centroid;
        for (int i = 0; i < 3; ++i) {
            const double expected = r(i, 0) * d.x + r(i, 1) * d.y + r(i, 2) * d.z + 5;
            EXPECT_NEAR(atoms[s].cart[static_cast<std::size_t>(i)], expected, 1e-12);
        }
    }
}

TEST(PlaceSingleCell, TooLarge) {
    const UnitCell cell(LatticeParams{10, 4, 4, 90, 90, 90}, {{8, {0, 0, 0}}});
    EXPECT_EQ(error_kind([&] { place_single_cell(cell, Mat3::identity()); }), ErrorKind::CellTooLarge);
}

TEST(PlaceRepeatedLattice, CubicTwentySevenImages) {
    const UnitCell cell(LatticeParams{5, 5, 5, 90, 90, 90}, {{11, {0, 0, 0}}});
    const auto atoms = place_repeated_lattice(cell, {0, 0, 0}, 10, 0);
    EXPECT_EQ(atoms.size(), 27u);
    for (const auto& a : atoms)
        for (std::size_t i = 0; i < 3; ++i) {
            const double q = a.cart[i] / 5;
            EXPECT_NEAR(q, std::round(q), 1e-12);
        }
}

TEST(PlaceRepeatedLattice, LatticeVectorOffsetIsIdentity) {
    const UnitCell cell(LatticeParams{3.3, 4.1, 3.7, 75, 95, 110}, {{8, {0.2, 0.3, 0.4}}, {26, {0.7, 0.1, 0.9}}});
    const auto base = place_repeated_lattice(cell, {0.3, 0.1, 0.6}, 10, 1.5);
    const auto shifted = place_repeated_lattice(cell, {1.3, 0.1, -1.4}, 10, 1.5);
    EXPECT_TRUE(same_set(base, shifted, 1e-9));
}

TEST(PlaceRepeatedLattice, MarginMatchesBruteForce) {
    const UnitCell cell(LatticeParams{3.3, 4.1, 3.7, 75, 95, 110}, {{8, {0.2, 0.3, 0.4}}});
    const double margin = 6;
    const auto atoms = place_repeated_lattice(cell, {0, 0, 0}, 10, margin);
    std::vector<PlacedAtom> brute;
    for (int i = -15; i <= 15; ++i)
        for (int j = -15; j <= 15; ++j)
            for (int k = -15; k <= 15; ++k) {
                const Vec3 p = frac_to_cart(cell, Vec3{0.2 + i, 0.3 + j, 0.4 + k});
                if (p.x >= -margin && p.x <= 10 + margin && p.y >= -margin && p.y <= 10 + margin && p.z >= -margin &&
                    p.z <= 10 + margin)
                    brute.push_back({8, p});
            }
    EXPECT_TRUE(same_set(atoms, brute, 1e-9));
    EXPECT_EQ(error_kind([&] { place_repeated_lattice(cell, {0, 0, 0}, 10, -1); }), ErrorKind::InvalidArgument);
}

TEST(LatticeProperties, RandomCellsIncludingNear60And120) {
    const auto r = checks::lattice_geometry(500, 17);
    EXPECT_TRUE(r.passed) << r.detail;
}
