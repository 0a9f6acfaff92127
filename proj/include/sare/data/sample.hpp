#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sare/geom/core.hpp"
#include "sare/geom/kdtree.hpp"

namespace sare {

inline constexpr int kMaxFragments = 50;

struct Fragment {
    int id = 0;
    PointCloud cloud; ///< local frame, centred on the fragment centroid
    double area = 0.0;
};

using AdjacencyMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

struct AssemblySample {
    std::string object_id;
    std::string shape;
    std::uint64_t seed = 0;
    double eps_f = 0.01;
    double eps_adj = 0.02;
    std::vector<Fragment> fragments;
    std::vector<RigidTransform> gt_transforms;
    AdjacencyMatrix adjacency;
    std::vector<std::vector<std::uint8_t>> fracture_labels;

    int k() const noexcept { return static_cast<int>(fragments.size()); }

    /// Fragments posed by their ground-truth transforms.
    std::vector<PointCloud> posed() const {
        std::vector<PointCloud> out;
        out.reserve(fragments.size());
        for (std::size_t i = 0; i < fragments.size(); ++i)
            out.push_back(apply_transform(fragments[i].cloud, gt_transforms[i]));
        return out;
    }
};

inline std::size_t edge_count(const AdjacencyMatrix& a) {
    std::size_t n = 0;
    for (int i = 0; i < a.rows(); ++i)
        for (int j = i + 1; j < a.cols(); ++j) n += a(i, j) != 0;
    return n;
}

/// Throws ValidationError describing the first violated invariant.
inline void validate(const AssemblySample& s) {
    const int k = s.k();
    auto fail = [&](const std::string& why) { throw ValidationError(s.object_id + ": " + why); };
    if (k < 2 || k > kMaxFragments) fail("fragment count out of [2, 50]");
    if (static_cast<int>(s.gt_transforms.size()) != k) fail("gt_transforms size differs from K");
    if (static_cast<int>(s.fracture_labels.size()) != k) fail("fracture_labels size differs from K");
    if (s.adjacency.rows() != k || s.adjacency.cols() != k) fail("adjacency is not K x K");
    for (int i = 0; i < k; ++i) {
        if (s.adjacency(i, i) != 0) fail("adjacency has a non-zero diagonal");
        for (int j = 0; j < k; ++j)
            if (s.adjacency(i, j) != s.adjacency(j, i)) fail("adjacency is not symmetric");
    }
    for (int i = 0; i < k; ++i) {
        const auto& f = s.fragments[i];
        if (f.id != i) fail("fragment ids must be 0..K-1 in order");
        if (f.cloud.empty()) fail("fragment " + std::to_string(i) + " has no points");
        if (f.cloud.normals.size() != f.cloud.points.size()) fail("fragment normals/points size mismatch");
        if (!(f.area > 0.0)) fail("fragment area must be positive");
        if (s.fracture_labels[i].size() != f.cloud.size()) fail("fracture label count mismatch");
        if (!is_rotation(s.gt_transforms[i].rotation)) fail("gt rotation is not proper orthogonal");
    }
}

struct StructureLabels {
    std::vector<std::vector<std::uint8_t>> fracture;
    AdjacencyMatrix adjacency;
    Eigen::MatrixXd min_distance; ///< symmetric inter-fragment surface distance
};

/// Fracture flags and contact graph of world-frame fragments: a point is
/// fracture iff its nearest point on another fragment is within eps_f; a pair
/// is adjacent iff the fragments come closer than eps_adj.
inline StructureLabels label_structure(const std::vector<PointCloud>& posed, double eps_f, double eps_adj) {
    const int k = static_cast<int>(posed.size());
    std::vector<KdTree> trees;
    trees.reserve(k);
    for (const auto& c : posed) trees.emplace_back(c.points);

    StructureLabels out;
    out.fracture.resize(k);
    out.adjacency = AdjacencyMatrix::Zero(k, k);
    out.min_distance = Eigen::MatrixXd::Constant(k, k, std::numeric_limits<double>::infinity());
    const double eps_f2 = eps_f * eps_f;
    for (int i = 0; i < k; ++i) {
        out.fracture[i].assign(posed[i].size(), 0);
        for (std::size_t p = 0; p < posed[i].size(); ++p) {
            for (int j = 0; j < k; ++j) {
                if (j == i) continue;
                double d2 = trees[j].nearest(posed[i].points[p]).sq_dist;
                if (d2 <= eps_f2) out.fracture[i][p] = 1;
                out.min_distance(i, j) = std::min(out.min_distance(i, j), std::sqrt(d2));
            }
        }
    }
    for (int i = 0; i < k; ++i)
        for (int j = i + 1; j < k; ++j) {
            double d = std::min(out.min_distance(i, j), out.min_distance(j, i));
            out.min_distance(i, j) = out.min_distance(j, i) = d;
            out.adjacency(i, j) = out.adjacency(j, i) = d < eps_adj ? 1 : 0;
        }
    for (int i = 0; i < k; ++i) out.min_distance(i, i) = 0.0;
    return out;
}

} // namespace sare
