#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "sare/geom/core.hpp"
#include "sare/geom/kdtree.hpp"

namespace sare {

inline constexpr int kDefaultBands = 8;
inline constexpr int kLocalTokenDim = 15;
inline constexpr std::size_t kDefaultNeighbors = 16;

/// Sinusoidal encoding: per axis, per band j, sin and cos of 2^j * (pi/2) * v.
/// The half-period base keeps the map injective on [-1, 1].
inline void fourier_encode(const Vec3& v, int bands, std::span<double> out) {
    std::size_t o = 0;
    for (int a = 0; a < 3; ++a) {
        double w = std::numbers::pi / 2.0;
        for (int j = 0; j < bands; ++j, w *= 2.0) {
            out[o++] = std::sin(w * v[a]);
            out[o++] = std::cos(w * v[a]);
        }
    }
}

inline std::vector<double> fourier_encode(const Vec3& v, int bands) {
    if (bands < 1) throw InvalidArgument("fourier_encode: bands must be >= 1");
    std::vector<double> out(6 * static_cast<std::size_t>(bands));
    fourier_encode(v, bands, out);
    return out;
}

/// Fixed scales mapping raw descriptor components into [-1, 1].
struct LocalTokenScales {
    double radius = 0.1; ///< neighbourhood radius that maps to 1
};

/// Rigid-invariant descriptor of the k-NN neighbourhood of point `query`:
///   [0..2]  covariance eigenvalues (descending) / r^2
///   [3..4]  linearity (l1-l2)/l1 and planarity (l2-l3)/l1
///   [5]     mean neighbour offset along the query normal / r
///   [6]     min(r / radius_scale, 1)
///   [7..14] histogram of neighbour-normal angles to the query normal, 8 bins over [0, pi]
/// with r the distance to the farthest neighbour.
inline std::array<double, kLocalTokenDim> local_token(const PointCloud& cloud, const KdTree& tree, std::size_t query,
                                                       std::size_t k, const LocalTokenScales& scales = {}) {
    if (k > cloud.size() || k < 1) throw InvalidArgument("local_token: k exceeds fragment point count");
    if (!cloud.has_normals()) throw InvalidArgument("local_token: fragment has no normals");
    const Vec3& q = cloud.points[query];
    const Vec3& qn = cloud.normals[query];
    auto hits = tree.knn(q, k);

    Vec3 mean = Vec3::Zero();
    double r2 = 0.0;
    for (const auto& h : hits) {
        mean += cloud.points[h.index];
        r2 = std::max(r2, h.sq_dist);
    }
    mean /= static_cast<double>(hits.size());
    Mat3 cov = Mat3::Zero();
    double offset = 0.0;
    std::array<double, kLocalTokenDim> z{};
    for (const auto& h : hits) {
        Vec3 d = cloud.points[h.index] - mean;
        cov += d * d.transpose();
        offset += (cloud.points[h.index] - q).dot(qn);
        double c = std::clamp(cloud.normals[h.index].dot(qn), -1.0, 1.0);
        int bin = std::min(7, static_cast<int>(std::acos(c) / std::numbers::pi * 8.0));
        z[7 + bin] += 1.0 / static_cast<double>(hits.size());
    }
    cov /= static_cast<double>(hits.size());
    Vec3 ev = Eigen::SelfAdjointEigenSolver<Mat3>(cov, Eigen::EigenvaluesOnly).eigenvalues();
    const double l1 = std::max(ev(2), 0.0), l2 = std::max(ev(1), 0.0), l3 = std::max(ev(0), 0.0);
    const double r = std::sqrt(r2);
    if (r2 > 0.0) {
        z[0] = l1 / r2;
        z[1] = l2 / r2;
        z[2] = l3 / r2;
        z[5] = offset / (static_cast<double>(hits.size()) * r);
    }
    if (l1 > 0.0) {
        z[3] = (l1 - l2) / l1;
        z[4] = (l2 - l3) / l1;
    }
    z[6] = std::min(r / scales.radius, 1.0);
    return z;
}

} // namespace sare
