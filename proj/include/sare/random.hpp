#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Dense>

namespace sare {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Sub-seed for an independent stream; results never depend on scheduling.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stream, std::uint64_t index = 0) {
    return splitmix64(splitmix64(master ^ fnv1a64(stream)) + index);
}

inline double uniform01(Rng& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double gaussian(Rng& rng) {
    return std::normal_distribution<double>(0.0, 1.0)(rng);
}

/// Haar-uniform rotation from a normalized Gaussian quaternion.
inline Eigen::Matrix3d random_rotation(Rng& rng) {
    Eigen::Quaterniond q;
    double n = 0.0;
    do {
        q = Eigen::Quaterniond(gaussian(rng), gaussian(rng), gaussian(rng), gaussian(rng));
        n = q.norm();
    } while (n < 1e-12);
    q.coeffs() /= n;
    return q.toRotationMatrix();
}

inline Eigen::Vector3d random_unit_vector(Rng& rng) {
    Eigen::Vector3d v;
    do {
        v = Eigen::Vector3d(gaussian(rng), gaussian(rng), gaussian(rng));
    } while (v.norm() < 1e-12);
    return v.normalized();
}

} // namespace sare
