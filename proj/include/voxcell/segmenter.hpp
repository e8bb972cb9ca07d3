#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxelizer.hpp"

namespace voxcell {

struct SegmentedAtom {
    int atomic_number = 0;
    Vec3 centroid;
    int voxel_count = 0;
};

using SegmentedAtoms = std::vector<SegmentedAtom>;

/// Per-voxel class of maximal score; ties go to the lower class index.
inline SpeciesGrid argmax_labels(const ClassProbGrid& probs) {
    const std::size_t voxels = probs.spec.voxel_count();
    require(probs.scores.size() == voxels * static_cast<std::size_t>(probs.num_classes), ErrorKind::ShapeMismatch,
            "class scores do not match the grid");
    SpeciesGrid out{probs.spec, std::vector<std::uint16_t>(voxels, 0)};
    std::vector<float> best(probs.scores.begin(), probs.scores.begin() + static_cast<std::ptrdiff_t>(voxels));
    for (int c = 1; c < probs.num_classes; ++c) {
        const float* row = probs.scores.data() + static_cast<std::size_t>(c) * voxels;
        for (std::size_t v = 0; v < voxels; ++v)
            if (row[v] > best[v]) {
                best[v] = row[v];
                out.labels[v] = static_cast<std::uint16_t>(c);
            }
    }
    return out;
}

/// Components of the non-background voxels under 26-connectivity, each a
/// sorted list of linear voxel indices, ordered by their first index.
inline std::vector<std::vector<std::size_t>> connected_components(const SpeciesGrid& labels) {
    const int n = labels.spec.side_voxels;
    const std::size_t voxels = labels.spec.voxel_count();
    std::vector<char> seen(voxels, 0);
    std::vector<std::vector<std::size_t>> clusters;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < voxels; ++start) {
        if (labels.labels[start] == 0 || seen[start]) continue;
        std::vector<std::size_t> members;
        seen[start] = 1;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t v = stack.back();
            stack.pop_back();
            members.push_back(v);
            const int i = static_cast<int>(v / (static_cast<std::size_t>(n) * n));
            const int j = static_cast<int>((v / static_cast<std::size_t>(n)) % static_cast<std::size_t>(n));
            const int k = static_cast<int>(v % static_cast<std::size_t>(n));
            for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj)
                    for (int dk = -1; dk <= 1; ++dk) {
                        const int a = i + di, b = j + dj, c = k + dk;
                        if (a < 0 || b < 0 || c < 0 || a >= n || b >= n || c >= n) continue;
                        const auto w = voxel_index(labels.spec, a, b, c);
                        if (labels.labels[w] == 0 || seen[w]) continue;
                        seen[w] = 1;
                        stack.push_back(w);
                    }
        }
        std::sort(members.begin(), members.end());
        clusters.push_back(std::move(members));
    }
    return clusters;
}

/// Modal non-background label of a cluster; ties go to the smaller Z.
inline int majority_vote(const std::vector<std::size_t>& cluster, const SpeciesGrid& labels) {
    std::map<int, int> counts;
    for (auto v : cluster)
        if (labels.labels[v] != 0) ++counts[labels.labels[v]];
    int best = 0, best_count = 0;
    for (const auto& [z, count] : counts)
        if (count > best_count) {
            best = z;
            best_count = count;
        }
    return best;
}

struct SegmentOptions {
    int min_cluster_voxels = 2;
    bool density_weighted = false;
};

inline Vec3 voxel_center(const GridSpec& spec, std::size_t v) {
    const auto n = static_cast<std::size_t>(spec.side_voxels);
    return {spec.voxel_center(static_cast<int>(v / (n * n))), spec.voxel_center(static_cast<int>((v / n) % n)),
            spec.voxel_center(static_cast<int>(v % n))};
}

/// Argmax, 26-connected components, majority vote and centroid per cluster.
/// `density` is only read when density-weighted centroids are requested.
inline SegmentedAtoms segment(const ClassProbGrid& probs, const SegmentOptions& opt = {},
                              const DensityGrid* density = nullptr) {
    require(opt.min_cluster_voxels >= 1, ErrorKind::InvalidArgument, "min_cluster_voxels must be >= 1");
    if (opt.density_weighted)
        require(density && density->values.size() == probs.spec.voxel_count(), ErrorKind::ShapeMismatch,
                "density-weighted centroids need a matching density grid");
    const auto labels = argmax_labels(probs);
    SegmentedAtoms atoms;
    for (const auto& cluster : connected_components(labels)) {
        if (static_cast<int>(cluster.size()) < opt.min_cluster_voxels) continue;
        Vec3 sum;
        double weight = 0;
        for (auto v : cluster) {
            const double w = opt.density_weighted ? std::max(density->values[v], 0.0) : 1.0;
            sum = sum + voxel_center(probs.spec, v) * w;
            weight += w;
        }
        if (weight <= 0) {
            sum = {};
            for (auto v : cluster) sum = sum + voxel_center(probs.spec, v);
            weight = static_cast<double>(cluster.size());
        }
        atoms.push_back({majority_vote(cluster, labels), sum * (1.0 / weight), static_cast<int>(cluster.size())});
    }
    return atoms;
}

inline std::string atoms_to_text(const SegmentedAtoms& atoms) {
    std::ostringstream os;
    os.precision(17);
    for (const auto& a : atoms)
        os << a.atomic_number << ' ' << a.centroid.x << ' ' << a.centroid.y << ' ' << a.centroid.z << ' ' << a.voxel_count
           << '\n';
    return os.str();
}

inline SegmentedAtoms atoms_from_text(const std::string& text) {
    SegmentedAtoms atoms;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
        std::istringstream ls(line);
        SegmentedAtom a;
        if (!(ls >> a.atomic_number >> a.centroid.x >> a.centroid.y >> a.centroid.z))
            fail(ErrorKind::MalformedFile, "bad atom line: " + line);
        if (!(ls >> a.voxel_count)) a.voxel_count = 0;
        atoms.push_back(a);
    }
    return atoms;
}

inline nlohmann::json atoms_to_json(const SegmentedAtoms& atoms) {
    auto arr = nlohmann::json::array();
    for (const auto& a : atoms)
        arr.push_back({{"Z", a.atomic_number},
                       {"symbol", std::string(element_symbol(a.atomic_number))},
                       {"position", {a.centroid.x, a.centroid.y, a.centroid.z}},
                       {"voxels", a.voxel_count}});
    return {{"atoms", arr}};
}

inline std::vector<PlacedAtom> to_placed(const SegmentedAtoms& atoms) {
    std::vector<PlacedAtom> out;
    for (const auto& a : atoms) out.push_back({a.atomic_number, a.centroid});
    return out;
}

}  // namespace voxcell
