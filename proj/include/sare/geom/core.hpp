#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "sare/error.hpp"

namespace sare {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Orthogonality/determinant tolerance for rotation matrices.
inline constexpr double kRotationTolerance = 1e-6;

struct PointCloud {
    std::vector<Vec3> points;
    std::vector<Vec3> normals; ///< empty, or one unit normal per point

    std::size_t size() const noexcept { return points.size(); }
    bool empty() const noexcept { return points.empty(); }
    bool has_normals() const noexcept { return !normals.empty(); }

    Vec3 centroid() const {
        Vec3 c = Vec3::Zero();
        for (const auto& p : points) c += p;
        return points.empty() ? c : Vec3(c / static_cast<double>(points.size()));
    }
};

inline bool is_rotation(const Mat3& r, double tol = kRotationTolerance) {
    if (!r.allFinite()) return false;
    return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(r.determinant() - 1.0) <= tol;
}

struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static RigidTransform identity() { return {}; }

    Vec3 operator()(const Vec3& x) const { return rotation * x + translation; }

    /// (this ∘ other)(x) = this(other(x))
    RigidTransform operator*(const RigidTransform& other) const {
        return {rotation * other.rotation, rotation * other.translation + translation};
    }

    RigidTransform inverse() const {
        Mat3 rt = rotation.transpose();
        return {rt, -(rt * translation)};
    }
};

inline PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& t) {
    PointCloud out;
    out.points.reserve(cloud.points.size());
    for (const auto& p : cloud.points) out.points.push_back(t.rotation * p + t.translation);
    out.normals.reserve(cloud.normals.size());
    for (const auto& n : cloud.normals) out.normals.push_back(t.rotation * n);
    return out;
}

inline Mat3 axis_rotation(const Vec3& axis, double radians) {
    return Eigen::AngleAxisd(radians, axis.normalized()).toRotationMatrix();
}

/// Geodesic angle between two rotations, in degrees.
inline double rotation_error_deg(const Mat3& r1, const Mat3& r2) {
    if (!is_rotation(r1) || !is_rotation(r2))
        throw InvalidArgument("rotation_error_deg: input is not a proper rotation");
    // Same angle as acos((tr - 1) / 2), but atan2 keeps full precision near
    // 0 and 180 degrees where acos loses about half the significant digits.
    const Mat3 m = r1.transpose() * r2;
    const double c = std::clamp((m.trace() - 1.0) / 2.0, -1.0, 1.0);
    const double s = 0.5 * Vec3(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)).norm();
    return std::atan2(s, c) * 180.0 / std::numbers::pi;
}

/// Least-squares rigid transform mapping src onto dst (index correspondence).
/// Throws DegenerateGeometry for fewer than 3 points or a collinear source.
inline RigidTransform kabsch_align(std::span<const Vec3> src, std::span<const Vec3> dst) {
    if (src.size() != dst.size())
        throw InvalidArgument("kabsch_align: point counts differ");
    if (src.size() < 3)
        throw DegenerateGeometry("kabsch_align: need at least 3 correspondences");

    const double n = static_cast<double>(src.size());
    Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
    for (std::size_t k = 0; k < src.size(); ++k) {
        cs += src[k];
        cd += dst[k];
    }
    cs /= n;
    cd /= n;

    Mat3 h = Mat3::Zero();
    Mat3 spread = Mat3::Zero(), dst_spread = Mat3::Zero();
    for (std::size_t k = 0; k < src.size(); ++k) {
        Vec3 a = src[k] - cs, b = dst[k] - cd;
        h += a * b.transpose();
        spread += a * a.transpose();
        dst_spread += b * b.transpose();
    }

    Eigen::SelfAdjointEigenSolver<Mat3> es(spread);
    const Vec3 ev = es.eigenvalues(); // ascending
    if (!(ev(2) > 0.0) || ev(1) <= 1e-12 * ev(2))
        throw DegenerateGeometry("kabsch_align: source points are collinear or coincident");
    // A collapsed target leaves the rotation undetermined, so the SVD would
    // hand back an arbitrary one.
    Eigen::SelfAdjointEigenSolver<Mat3> ed(dst_spread, Eigen::EigenvaluesOnly);
    if (!(ed.eigenvalues()(2) > 0.0) || ed.eigenvalues()(1) <= 1e-12 * ed.eigenvalues()(2))
        throw DegenerateGeometry("kabsch_align: target points are collinear or coincident");

    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 u = svd.matrixU(), v = svd.matrixV();
    Mat3 d = Mat3::Identity();
    if ((v * u.transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    Mat3 r = v * d * u.transpose();
    return {r, cd - r * cs};
}

inline RigidTransform kabsch_align(const PointCloud& src, const PointCloud& dst) {
    return kabsch_align(std::span<const Vec3>(src.points), std::span<const Vec3>(dst.points));
}

} // namespace sare
