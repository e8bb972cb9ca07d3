#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <voxcell/checks.hpp>
#include <voxcell/segmenter.hpp>

#include "test_util.hpp"

using namespace voxcell;

namespace {

const GridSpec kSmall = GridSpec::with_pitch(6);

SpeciesGrid empty_labels(const GridSpec& spec) { return {spec, std::vector<std::uint16_t>(spec.voxel_count(), 0)}; }

std::vector<std::vector<std::size_t>> reference_components(const SpeciesGrid& labels) {
    const int n = labels.spec.side_voxels;
    std::vector<int> owner(labels.labels.size(), -1);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < labels.labels.size(); ++s) {
        if (!labels.labels[s] || owner[s] >= 0) continue;
        const int id = static_cast<int>(out.size());
        owner[s] = id;
        std::vector<std::size_t> members{s};
        bool grew = true;
        while (grew) {
            grew = false;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    for (int k = 0; k < n; ++k) {
                        const auto v = voxel_index(labels.spec, i, j, k);
                        if (!labels.labels[v] || owner[v] >= 0) continue;
                        for (auto m : members) {
                            const int mi = static_cast<int>(m) / (n * n), mj = static_cast<int>(m) / n % n,
                                      mk = static_cast<int>(m) % n;
                            if (std::max({std::abs(mi - i), std::abs(mj - j), std::abs(mk - k)}) <= 1) {
                                owner[v] = id;
                                members.push_back(v);
                                grew = true;
                                break;
                            }
                        }
                    }
        }
        std::sort(members.begin(), members.end());
        out.push_back(members);
    }
    return out;
}

}  // namespace

TEST(Argmax, RecoversOneHotAndBreaksTiesLow) {
    std::mt19937_64 rng(1);
    auto labels = empty_labels(kSmall);
    for (auto& l : labels.labels) l = static_cast<std::uint16_t>(checks::detail::uniform_int(rng, 0, 100));
    EXPECT_EQ(argmax_labels(one_hot_species(labels)).labels, labels.labels);

    ClassProbGrid uniform{kSmall, 101, std::vector<float>(kSmall.voxel_count() * 101, 0.25f)};
    for (auto l : argmax_labels(uniform).labels) EXPECT_EQ(l, 0);
}

TEST(Argmax, MatchesBruteForce) {
    std::mt19937_64 rng(2);
    const int classes = 7;
    ClassProbGrid p{kSmall, classes, std::vector<float>(kSmall.voxel_count() * classes)};
    for (auto& s : p.scores) s = static_cast<float>(checks::detail::uniform(rng, -3, 3));
    const auto got = argmax_labels(p);
    const std::size_t n = kSmall.voxel_count();
    for (std::size_t v = 0; v < n; ++v) {
        int best = 0;
        for (int c = 1; c < classes; ++c)
            if (p.scores[static_cast<std::size_t>(c) * n + v] > p.scores[static_cast<std::size_t>(best) * n + v]) best = c;
        EXPECT_EQ(got.labels[v], best);
    }
}

TEST(Components, SingleVoxelAndCornerSharing) {
    auto labels = empty_labels(kSmall);
    labels.labels[voxel_index(kSmall, 2, 2, 2)] = 6;
    auto c = connected_components(labels);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c[0].size(), 1u);

    labels.labels[voxel_index(kSmall, 3, 3, 3)] = 8;
    c = connected_components(labels);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c[0].size(), 2u);

    labels.labels[voxel_index(kSmall, 5, 0, 0)] = 1;
    EXPECT_EQ(connected_components(labels).size(), 2u);
}

TEST(Components, MatchesFloodFillReference) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto labels = empty_labels(kSmall);
        for (auto& l : labels.labels)
            if (checks::detail::uniform(rng, 0, 1) < 0.15) l = static_cast<std::uint16_t>(checks::detail::uniform_int(rng, 1, 20));
        EXPECT_EQ(connected_components(labels), reference_components(labels));
    }
}

TEST(MajorityVote, ModeAndTieRule) {
    auto labels = empty_labels(kSmall);
    const auto set = [&](std::vector<int> zs) {
        std::vector<std::size_t> cluster;
        for (std::size_t i = 0; i < zs.size(); ++i) {
            labels.labels[i] = static_cast<std::uint16_t>(zs[i]);
            cluster.push_back(i);
        }
        return cluster;
    };
    EXPECT_EQ(majority_vote(set({8, 8, 6}), labels), 8);
    EXPECT_EQ(majority_vote(set({6, 6, 8, 8}), labels), 6);
    EXPECT_EQ(majority_vote(set({8, 6, 8, 6}), labels), 6);
    EXPECT_EQ(majority_vote(set({26, 26, 26}), labels), 26);
}

TEST(Segment, EmptyAndSingleBlob) {
    const GridSpec spec;
    EXPECT_TRUE(segment(one_hot_species(empty_labels(spec))).empty());

    const Vec3 atom{spec.voxel_center(15), spec.voxel_center(12), spec.voxel_center(9)};
    const auto atoms = segment(one_hot_species(species_from_atoms({{8, atom}}, spec)));
    ASSERT_EQ(atoms.size(), 1u);
    EXPECT_EQ(atoms[0].atomic_number, 8);
    EXPECT_EQ(atoms[0].voxel_count, 19);
    EXPECT_NEAR(atoms[0].centroid.x, atom.x, 1e-9);
    EXPECT_NEAR(atoms[0].centroid.y, atom.y, 1e-9);
    EXPECT_NEAR(atoms[0].centroid.z, atom.z, 1e-9);
}

TEST(Segment, MinClusterVoxelsAndVoxelAccounting) {
    auto labels = empty_labels(kSmall);
    labels.labels[voxel_index(kSmall, 0, 0, 0)] = 3;
    labels.labels[voxel_index(kSmall, 4, 4, 4)] = 9;
    labels.labels[voxel_index(kSmall, 4, 4, 5)] = 9;
    const auto probs = one_hot_species(labels);
    const auto dropped = segment(probs);
    ASSERT_EQ(dropped.size(), 1u);
    EXPECT_EQ(dropped[0].atomic_number, 9);
    EXPECT_EQ(dropped[0].voxel_count, 2);
    EXPECT_EQ(segment(probs, {.min_cluster_voxels = 1}).size(), 2u);
    EXPECT_EQ(error_kind([&] { segment(probs, {.min_cluster_voxels = 0}); }), ErrorKind::InvalidArgument);
}

TEST(Segment, InvariantUnderEqualChannelPermutation) {
    std::mt19937_64 rng(4);
    const auto atoms = checks::detail::random_atoms(rng, 5, 2, 8, 10);
    const auto probs = one_hot_species(species_from_atoms(atoms, GridSpec{}));
    auto swapped = probs;
    const std::size_t n = probs.spec.voxel_count();
    for (std::size_t v = 0; v < n; ++v) std::swap(swapped.scores[50 * n + v], swapped.scores[60 * n + v]);
    const auto a = segment(probs), b = segment(swapped);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].centroid.x, b[i].centroid.x);
}

TEST(Segment, DensityWeightedCentroidNeedsGrid) {
    auto labels = empty_labels(kSmall);
    labels.labels[voxel_index(kSmall, 2, 2, 2)] = 8;
    labels.labels[voxel_index(kSmall, 2, 2, 3)] = 8;
    DensityGrid d{kSmall, std::vector<double>(kSmall.voxel_count(), 0.0)};
    d.values[voxel_index(kSmall, 2, 2, 3)] = 1;
    const auto probs = one_hot_species(labels);
    const auto atoms = segment(probs, {.density_weighted = true}, &d);
    ASSERT_EQ(atoms.size(), 1u);
    EXPECT_NEAR(atoms[0].centroid.z, kSmall.voxel_center(3), 1e-12);
    EXPECT_EQ(error_kind([&] { segment(probs, {.density_weighted = true}); }), ErrorKind::ShapeMismatch);
}

TEST(RoundTrip, ExactAboveBlobContactDistance) {
    const auto r = checks::segmentation_roundtrip(50, 606, 1.6);
    EXPECT_TRUE(r.passed) << r.detail;
}

TEST(RoundTrip, AtomsCloserThanBlobContactMerge) {
    const GridSpec spec;
    const Vec3 a{5, 5, 5};
    const double step = 1.3 / std::sqrt(3.0);
    const Vec3 b{a.x + step, a.y + step, a.z + step};
    const auto atoms = segment(one_hot_species(species_from_atoms({{8, a}, {14, b}}, spec)));
    EXPECT_EQ(atoms.size(), 1u);
}

TEST(AtomText, RoundTripAndJson) {
    const SegmentedAtoms atoms{{8, {1.25, 2.5, 3.125}, 19}, {26, {0.1, 9.9, 5.0}, 7}};
    const auto back = atoms_from_text(atoms_to_text(atoms));
    ASSERT_EQ(back.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back[i].atomic_number, atoms[i].atomic_number);
        EXPECT_EQ(back[i].centroid.x, atoms[i].centroid.x);
        EXPECT_EQ(back[i].centroid.y, atoms[i].centroid.y);
        EXPECT_EQ(back[i].centroid.z, atoms[i].centroid.z);
        EXPECT_EQ(back[i].voxel_count, atoms[i].voxel_count);
    }
    const auto j = atoms_to_json(atoms);
    EXPECT_EQ(j["atoms"][1]["symbol"], "Fe");
    EXPECT_EQ(j["atoms"][0]["voxels"], 19);
    EXPECT_EQ(error_kind([] { atoms_from_text("8 1.0 x\n"); }), ErrorKind::MalformedFile);
}
