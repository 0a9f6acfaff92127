#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <tuple>
#include <vector>

#include "sare/geom/core.hpp"
#include "sare/geom/kdtree.hpp"

namespace sare {

namespace detail {

inline double directed_mean_sq(std::span<const Vec3> from, const KdTree& to) {
    double acc = 0.0;
    for (const auto& p : from) acc += to.nearest(p).sq_dist;
    return acc / static_cast<double>(from.size());
}

inline double directed_mean_sq_brute(std::span<const Vec3> from, std::span<const Vec3> to) {
    double acc = 0.0;
    for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) best = std::min(best, (p - q).squaredNorm());
        acc += best;
    }
    return acc / static_cast<double>(from.size());
}

} // namespace detail

/// Symmetric Chamfer distance: sum of both directed means of squared
/// nearest-neighbour distances.
inline double chamfer_distance(std::span<const Vec3> a, std::span<const Vec3> b) {
    if (a.empty() || b.empty()) throw InvalidArgument("chamfer_distance: empty cloud");
    KdTree ta(a), tb(b);
    return detail::directed_mean_sq(a, tb) + detail::directed_mean_sq(b, ta);
}

inline double chamfer_distance_brute(std::span<const Vec3> a, std::span<const Vec3> b) {
    if (a.empty() || b.empty()) throw InvalidArgument("chamfer_distance: empty cloud");
    return detail::directed_mean_sq_brute(a, b) + detail::directed_mean_sq_brute(b, a);
}

inline double chamfer_distance(const PointCloud& a, const PointCloud& b) {
    return chamfer_distance(std::span<const Vec3>(a.points), std::span<const Vec3>(b.points));
}

// ---------------------------------------------------------------------------
// Voxels

struct Bbox {
    Vec3 min = Vec3::Zero();
    Vec3 max = Vec3::Ones();

    static Bbox of(std::span<const Vec3> pts) {
        Bbox b{Vec3::Constant(std::numeric_limits<double>::infinity()),
               Vec3::Constant(-std::numeric_limits<double>::infinity())};
        for (const auto& p : pts) {
            b.min = b.min.cwiseMin(p);
            b.max = b.max.cwiseMax(p);
        }
        return b;
    }

    void extend(const Bbox& o) {
        min = min.cwiseMin(o.min);
        max = max.cwiseMax(o.max);
    }

    /// Grow every axis about the centre by `fraction` of its extent; degenerate
    /// axes get a minimum half-extent of 1e-6.
    Bbox inflated(double fraction) const {
        Vec3 c = 0.5 * (min + max);
        Vec3 h = (0.5 * (max - min) * (1.0 + fraction)).cwiseMax(1e-6);
        return {c - h, c + h};
    }
};

using VoxelIndex = std::tuple<int, int, int>;

struct VoxelSet {
    std::set<VoxelIndex> occupied;
    int resolution = 2;
    Bbox bbox;

    std::size_t size() const noexcept { return occupied.size(); }
    bool contains(const VoxelIndex& v) const { return occupied.count(v) != 0; }
};

/// Cell index of p; out-of-box coordinates clamp to the boundary cells.
inline VoxelIndex voxel_of(const Vec3& p, int resolution, const Bbox& bbox) {
    int idx[3];
    for (int a = 0; a < 3; ++a) {
        double cell = (bbox.max[a] - bbox.min[a]) / resolution;
        double f = std::floor((p[a] - bbox.min[a]) / cell);
        if (!(f >= 0.0)) f = 0.0;
        idx[a] = static_cast<int>(std::min(f, static_cast<double>(resolution - 1)));
    }
    return {idx[0], idx[1], idx[2]};
}

inline VoxelSet voxelize(std::span<const Vec3> pts, int resolution, const Bbox& bbox) {
    if (resolution < 2) throw InvalidArgument("voxelize: resolution must be >= 2");
    for (int a = 0; a < 3; ++a)
        if (!(bbox.min[a] < bbox.max[a])) throw InvalidArgument("voxelize: bbox min must be < max");
    VoxelSet out;
    out.resolution = resolution;
    out.bbox = bbox;
    for (const auto& p : pts) out.occupied.insert(voxel_of(p, resolution, bbox));
    return out;
}

inline VoxelSet voxelize(const PointCloud& cloud, int resolution, const Bbox& bbox) {
    return voxelize(std::span<const Vec3>(cloud.points), resolution, bbox);
}

inline std::size_t intersection_size(const VoxelSet& a, const VoxelSet& b) {
    const VoxelSet& small = a.size() <= b.size() ? a : b;
    const VoxelSet& large = a.size() <= b.size() ? b : a;
    std::size_t n = 0;
    for (const auto& v : small.occupied) n += large.contains(v);
    return n;
}

/// |A ∩ B| / min(|A|, |B|); zero when either set is empty.
inline double overlap_ratio(const VoxelSet& a, const VoxelSet& b) {
    std::size_t denom = std::min(a.size(), b.size());
    return denom == 0 ? 0.0 : static_cast<double>(intersection_size(a, b)) / static_cast<double>(denom);
}

/// Fraction of `from` voxels with an occupied `to` voxel within Chebyshev
/// distance `tolerance`.
inline double coverage_fraction(const VoxelSet& from, const VoxelSet& to, int tolerance) {
    if (from.occupied.empty()) return 0.0;
    std::size_t hit = 0;
    for (const auto& [x, y, z] : from.occupied) {
        bool found = false;
        for (int dx = -tolerance; dx <= tolerance && !found; ++dx)
            for (int dy = -tolerance; dy <= tolerance && !found; ++dy)
                for (int dz = -tolerance; dz <= tolerance && !found; ++dz)
                    found = to.contains({x + dx, y + dy, z + dz});
        hit += found;
    }
    return static_cast<double>(hit) / static_cast<double>(from.size());
}

// ---------------------------------------------------------------------------
// Normals

/// Per-point normal from the smallest-eigenvalue eigenvector of the k-NN
/// covariance, oriented away from the cloud centroid.
inline PointCloud estimate_normals(const PointCloud& cloud, std::size_t k) {
    if (k < 3 || k > cloud.size()) throw InvalidArgument("estimate_normals: k must be in [3, |cloud|]");
    KdTree tree(cloud.points);
    const Vec3 centroid = cloud.centroid();
    PointCloud out;
    out.points = cloud.points;
    out.normals.reserve(cloud.size());
    for (const auto& p : cloud.points) {
        auto hits = tree.knn(p, k);
        Vec3 mean = Vec3::Zero();
        for (const auto& h : hits) mean += cloud.points[h.index];
        mean /= static_cast<double>(hits.size());
        Mat3 cov = Mat3::Zero();
        for (const auto& h : hits) {
            Vec3 d = cloud.points[h.index] - mean;
            cov += d * d.transpose();
        }
        Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
        Vec3 n = es.eigenvectors().col(0).normalized();
        if (n.dot(p - centroid) < 0.0) n = -n;
        out.normals.push_back(n);
    }
    return out;
}

} // namespace sare
