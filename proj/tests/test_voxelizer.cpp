#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include <voxcell/checks.hpp>
#include <voxcell/voxelizer.hpp>

#include "test_util.hpp"

using namespace voxcell;

namespace {

Vec3 center_of(const GridSpec& s, int i, int j, int k) { return {s.voxel_center(i), s.voxel_center(j), s.voxel_center(k)}; }

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("voxcell_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Density, SingleAtomAtVoxelCenter) {
    const GridSpec spec;
    const auto g = density_from_atoms({{1, center_of(spec, 12, 7, 20)}}, spec);
    EXPECT_NEAR(g.values[voxel_index(spec, 12, 7, 20)], std::pow(2 * std::numbers::pi, -1.5), 1e-15);
    EXPECT_NEAR(g.values[voxel_index(spec, 12, 7, 20)], 0.0634936359342410, 1e-12);
    EXPECT_NEAR(plot_scaled(g).values[voxel_index(spec, 12, 7, 20)], 1.0, 1e-12);
}

TEST(Density, EmptyIsZero) {
    const auto g = density_from_atoms({}, GridSpec{});
    for (double v : g.values) EXPECT_EQ(v, 0.0);
}

TEST(Density, MatchesBruteForceForMixedSpecies) {
    std::mt19937_64 rng(3);
    const GridSpec spec;
    std::vector<PlacedAtom> atoms;
    const int zs[] = {6, 8, 26};
    for (int i = 0; i < 5; ++i)
        atoms.push_back({zs[i % 3], {checks::detail::uniform(rng, -1, 11), checks::detail::uniform(rng, -1, 11),
                                     checks::detail::uniform(rng, -1, 11)}});
    const auto fast = density_from_atoms(atoms, spec);
    const auto ref = checks::brute_force_density(atoms, spec);
    for (std::size_t i = 0; i < ref.values.size(); ++i) EXPECT_NEAR(fast.values[i], ref.values[i], 26e-6);
}

TEST(Density, RemovingAnAtomNeverIncreasesAVoxel) {
    std::mt19937_64 rng(4);
    const auto atoms = checks::detail::random_atoms(rng, 8, 0, 10);
    const GridSpec spec;
    const auto full = density_from_atoms(atoms, spec);
    const auto fewer = density_from_atoms({atoms.begin() + 1, atoms.end()}, spec);
    for (std::size_t i = 0; i < full.values.size(); ++i) EXPECT_LE(fewer.values[i], full.values[i]);
}

TEST(Density, OracleAndMassConservation) {
    const auto oracle = checks::voxelizer_oracle(20, 5);
    EXPECT_TRUE(oracle.passed) << oracle.detail;
    const auto mass = checks::mass_conservation(20, 6);
    EXPECT_TRUE(mass.passed) << mass.detail;
}

TEST(Species, NineteenVoxelNeighborhood) {
    const GridSpec spec;
    const auto g = species_from_atoms({{8, center_of(spec, 15, 15, 15)}}, spec);
    int labelled = 0;
    for (int i = 0; i < spec.side_voxels; ++i)
        for (int j = 0; j < spec.side_voxels; ++j)
            for (int k = 0; k < spec.side_voxels; ++k) {
                const auto l = g.labels[voxel_index(spec, i, j, k)];
                const int manhattan = std::abs(i - 15) + std::abs(j - 15) + std::abs(k - 15);
                const int chebyshev = std::max({std::abs(i - 15), std::abs(j - 15), std::abs(k - 15)});
                EXPECT_EQ(l, chebyshev <= 1 && manhattan <= 2 ? 8 : 0);
                labelled += l != 0;
            }
    EXPECT_EQ(labelled, 19);
}

TEST(Species, EmptyIsBackground) {
    const auto g = species_from_atoms({}, GridSpec{});
    for (auto l : g.labels) EXPECT_EQ(l, 0);
}

TEST(Species, NearestAtomWins) {
    const GridSpec spec;
    const std::vector<PlacedAtom> atoms{{6, {5.0, 5.0, 5.0}}, {8, {5.6, 5.0, 5.0}}};
    const auto g = species_from_atoms(atoms, spec);
    for (int i = 0; i < spec.side_voxels; ++i)
        for (int j = 0; j < spec.side_voxels; ++j)
            for (int k = 0; k < spec.side_voxels; ++k) {
                const Vec3 c = center_of(spec, i, j, k);
                const double d0 = distance(c, atoms[0].cart), d1 = distance(c, atoms[1].cart);
                int expected = 0;
                if (std::min(d0, d1) <= 0.5) expected = d0 <= d1 ? 6 : 8;
                EXPECT_EQ(g.labels[voxel_index(spec, i, j, k)], expected);
            }
}

TEST(Species, PermutationInvariantAwayFromTies) {
    std::mt19937_64 rng(8);
    auto atoms = checks::detail::random_atoms(rng, 12, 0, 10);
    const GridSpec spec;
    const auto a = species_from_atoms(atoms, spec);
    std::reverse(atoms.begin(), atoms.end());
    EXPECT_EQ(species_from_atoms(atoms, spec).labels, a.labels);
}

TEST(Species, OutOfRangeLabel) {
    EXPECT_EQ(error_kind([] { species_from_atoms({{101, {5, 5, 5}}}, GridSpec{}); }), ErrorKind::LabelOutOfRange);
}

TEST(OneHot, ChannelsSumToOne) {
    const GridSpec spec = GridSpec::with_pitch(6);
    SpeciesGrid s{spec, std::vector<std::uint16_t>(spec.voxel_count(), 0)};
    s.labels[17] = 26;
    const auto p = one_hot_species(s);
    const std::size_t v = spec.voxel_count();
    EXPECT_EQ(p.scores[26 * v + 17], 1.0f);
    EXPECT_EQ(p.scores[0 * v + 17], 0.0f);
    for (std::size_t i = 0; i < v; ++i) {
        float sum = 0;
        for (int c = 0; c < p.num_classes; ++c) sum += p.scores[static_cast<std::size_t>(c) * v + i];
        EXPECT_EQ(sum, 1.0f);
        if (i != 17) EXPECT_EQ(p.scores[i], 1.0f);
    }
    s.labels[3] = 40;
    EXPECT_EQ(error_kind([&] { one_hot_species(s, 30); }), ErrorKind::LabelOutOfRange);
}

TEST(MakeSample, DeterministicAndPeriodic) {
    const UnitCell cell(LatticeParams{3.5, 3.9, 4.2, 85, 95, 100}, {{8, {0.1, 0.2, 0.3}}, {22, {0.6, 0.7, 0.4}}});
    const GridSpec spec;
    const auto a = make_sample(cell, Representation::SingleCell, 5, spec);
    const auto b = make_sample(cell, Representation::SingleCell, 5, spec);
    EXPECT_EQ(a.density.values, b.density.values);
    EXPECT_EQ(a.species.labels, b.species.labels);

    const auto r0 = make_sample(cell, Representation::RepeatedLattice, 9, spec, true);
    const auto r1 = density_from_atoms(place_repeated_lattice(cell, {1, 0, 0}, spec.box_side, 6), spec);
    for (std::size_t i = 0; i < r1.values.size(); ++i) EXPECT_NEAR(r0.density.values[i], r1.values[i], 1e-9);
    const auto shifted = make_sample(cell, Representation::RepeatedLattice, 9, spec);
    EXPECT_NE(shifted.density.values, r0.density.values);
}

TEST(MakeSample, RotationsKeepTotalMass) {
    const UnitCell cell(LatticeParams{3.5, 3.9, 4.2, 85, 95, 100}, {{8, {0.1, 0.2, 0.3}}, {22, {0.6, 0.7, 0.4}}});
    const GridSpec spec;
    std::vector<std::vector<double>> grids;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto s = make_sample(cell, Representation::SingleCell, seed, spec);
        double mass = 0;
        for (double v : s.density.values) mass += v;
        EXPECT_NEAR(mass * std::pow(spec.pitch(), 3), 30.0, 0.3);
        grids.push_back(s.density.values);
    }
    EXPECT_NE(grids[0], grids[1]);
    EXPECT_NE(grids[1], grids[2]);
}

TEST(GridFiles, RoundTripAndHeader) {
    std::mt19937_64 rng(10);
    const GridSpec spec;
    const auto atoms = checks::detail::random_atoms(rng, 6, 1, 9, 60);
    const auto density = density_from_atoms(atoms, spec);
    const auto species = species_from_atoms(atoms, spec);
    const auto bytes = encode_density(density);
    ASSERT_EQ(bytes.size(), 16 + 4 * spec.voxel_count());
    EXPECT_EQ(std::string(bytes.data(), 4), "VXGR");

    const auto dpath = temp_path("d.vxg"), spath = temp_path("s.vxg");
    save_density(dpath.string(), density);
    save_species(spath.string(), species);
    const auto d = load_density(dpath.string());
    const auto s = load_species(spath.string());
    ASSERT_EQ(d.values.size(), density.values.size());
    for (std::size_t i = 0; i < d.values.size(); ++i)
        EXPECT_EQ(d.values[i], static_cast<double>(static_cast<float>(density.values[i])));
    EXPECT_EQ(s.labels, species.labels);
    EXPECT_EQ(error_kind([&] { load_density(spath.string()); }), ErrorKind::MalformedFile);
    std::filesystem::remove(dpath);
    std::filesystem::remove(spath);

    auto truncated = bytes;
    truncated.resize(100);
    EXPECT_EQ(error_kind([&] { decode_density(truncated); }), ErrorKind::MalformedFile);
}
