#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "sare/geom/core.hpp"
#include "sare/random.hpp"

namespace sare {

/// Farthest point sampling. The first index is a seeded uniform draw; every
/// later pick maximizes the distance to the already selected set (ties go to
/// the lowest index).
inline std::vector<std::size_t> fps_sample(std::span<const Vec3> points, std::size_t m, std::uint64_t seed) {
    if (m < 1 || m > points.size())
        throw InvalidArgument("fps_sample: m must be in [1, |cloud|]");

    Rng rng(seed);
    std::vector<std::size_t> picked;
    picked.reserve(m);
    picked.push_back(std::uniform_int_distribution<std::size_t>(0, points.size() - 1)(rng));

    std::vector<double> dist(points.size(), std::numeric_limits<double>::infinity());
    for (std::size_t s = 1; s < m; ++s) {
        const Vec3& last = points[picked.back()];
        std::size_t best = 0;
        double best_d = -1.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            double d = (points[i] - last).squaredNorm();
            if (d < dist[i]) dist[i] = d;
            if (dist[i] > best_d) {
                best_d = dist[i];
                best = i;
            }
        }
        picked.push_back(best);
        dist[best] = -1.0;
    }
    return picked;
}

inline std::vector<std::size_t> fps_sample(const PointCloud& cloud, std::size_t m, std::uint64_t seed) {
    return fps_sample(std::span<const Vec3>(cloud.points), m, seed);
}

/// Area-proportional split of `total` with a per-entry floor. Largest-remainder
/// rounding; equal remainders resolve toward the lower index.
inline std::vector<std::size_t> allocate_budget(std::span<const double> areas, std::size_t total, std::size_t floor_count) {
    const std::size_t k = areas.size();
    if (k == 0) throw InvalidArgument("allocate_budget: no areas");
    if (total < k * floor_count) throw InvalidArgument("allocate_budget: total below K * floor");
    double sum = 0.0;
    for (double a : areas) {
        if (!(a > 0.0)) throw InvalidArgument("allocate_budget: areas must be positive");
        sum += a;
    }

    const std::size_t free = total - k * floor_count;
    std::vector<std::size_t> out(k, floor_count);
    std::vector<double> frac(k);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < k; ++i) {
        double share = static_cast<double>(free) * areas[i] / sum;
        auto whole = static_cast<std::size_t>(std::floor(share));
        out[i] += whole;
        assigned += whole;
        frac[i] = share - static_cast<double>(whole);
    }
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    // floating error can leave `free - assigned` one above k in pathological cases
    for (std::size_t r = 0; assigned < free; ++r, ++assigned) out[order[r % k]] += 1;
    return out;
}

} // namespace sare
