#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "sare/cond/encoding.hpp"
#include "sare/data/sample.hpp"
#include "sare/geom/sampling.hpp"
#include "sare/random.hpp"

namespace sare {

inline constexpr std::size_t kQueryFloor = 8;

/// Per-fragment query points in fragment-major, FPS order.
struct QuerySet {
    std::vector<std::size_t> budgets;
    std::vector<std::size_t> offsets; ///< first token of each fragment
    std::vector<int> fragment_of;
    std::vector<std::size_t> source_index; ///< index into the fragment's dense cloud
    std::vector<Vec3> points;              ///< input frame
    std::vector<Vec3> normals;
    std::vector<Vec3> gt_targets;          ///< assembled (world) positions
    int anchor = 0;

    std::size_t total() const noexcept { return points.size(); }
    int k() const noexcept { return static_cast<int>(budgets.size()); }

    std::span<const Vec3> fragment_points(int i) const {
        return {points.data() + offsets[i], budgets[i]};
    }
};

/// Anchor = fragment with the largest budget; ties go to the smaller id.
inline int select_anchor(std::span<const std::size_t> budgets) {
    return static_cast<int>(std::max_element(budgets.begin(), budgets.end()) - budgets.begin());
}

inline QuerySet sample_queries(const AssemblySample& s, std::size_t total, std::uint64_t seed,
                               std::size_t floor_count = kQueryFloor) {
    if (total < floor_count * static_cast<std::size_t>(s.k()))
        throw InvalidArgument("sample_queries: M below floor * K");
    std::vector<double> areas;
    for (const auto& f : s.fragments) areas.push_back(f.area);

    QuerySet q;
    q.budgets = allocate_budget(areas, total, floor_count);
    for (int i = 0; i < s.k(); ++i) {
        const auto& cloud = s.fragments[i].cloud;
        if (q.budgets[i] > cloud.size())
            throw InvalidArgument("sample_queries: fragment " + std::to_string(i) + " has fewer points than its budget");
        q.offsets.push_back(q.points.size());
        for (std::size_t idx : fps_sample(cloud, q.budgets[i], derive_seed(seed, "fps", static_cast<std::uint64_t>(i)))) {
            q.fragment_of.push_back(i);
            q.source_index.push_back(idx);
            q.points.push_back(cloud.points[idx]);
            q.normals.push_back(cloud.normals[idx]);
            q.gt_targets.push_back(s.gt_transforms[i](cloud.points[idx]));
        }
    }
    q.anchor = select_anchor(q.budgets);
    return q;
}

/// Rotate query frames the same way `augment` rotates fragments.
inline QuerySet rotate_queries(const QuerySet& q, std::span<const Mat3> rotations) {
    QuerySet out = q;
    for (std::size_t m = 0; m < q.total(); ++m) {
        const Mat3& r = rotations[q.fragment_of[m]];
        out.points[m] = r * q.points[m];
        out.normals[m] = r * q.normals[m];
    }
    return out;
}

/// Local-geometry tokens (M x 15) for every query of a sample.
inline Eigen::MatrixXd query_local_tokens(const AssemblySample& s, const QuerySet& q, std::size_t k = kDefaultNeighbors) {
    Eigen::MatrixXd z(static_cast<Eigen::Index>(q.total()), kLocalTokenDim);
    for (int i = 0; i < s.k(); ++i) {
        const auto& cloud = s.fragments[i].cloud;
        KdTree tree(cloud.points);
        for (std::size_t m = q.offsets[i]; m < q.offsets[i] + q.budgets[i]; ++m) {
            auto tok = local_token(cloud, tree, q.source_index[m], std::min(k, cloud.size()));
            for (int c = 0; c < kLocalTokenDim; ++c) z(static_cast<Eigen::Index>(m), c) = tok[c];
        }
    }
    return z;
}

inline std::vector<std::uint8_t> query_fracture_labels(const AssemblySample& s, const QuerySet& q) {
    std::vector<std::uint8_t> out(q.total());
    for (std::size_t m = 0; m < q.total(); ++m) out[m] = s.fracture_labels[q.fragment_of[m]][q.source_index[m]];
    return out;
}

/// Model-side inputs of the conditioning tokens: raw per-query features
/// [z; gamma(q); gamma(n)] plus the bookkeeping the projection needs.
struct ConditionInputs {
    Eigen::MatrixXd features;            ///< M x (15 + 12 * bands)
    std::vector<int> fragment_of;
    std::vector<std::size_t> budgets;
    std::vector<int> part_index;         ///< per fragment: row of the part-embedding table
    int anchor = 0;
    std::vector<std::uint8_t> anchor_mask;

    std::size_t tokens() const noexcept { return fragment_of.size(); }
    int k() const noexcept { return static_cast<int>(budgets.size()); }
};

/// First K entries of a seeded permutation of [0, table_size).
inline std::vector<int> part_permutation(int k, int table_size, std::uint64_t seed) {
    if (k > table_size) throw InvalidArgument("part_permutation: K exceeds the part-embedding table");
    std::vector<int> perm(table_size);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    perm.resize(k);
    return perm;
}

inline ConditionInputs make_condition_inputs(const QuerySet& q, const Eigen::MatrixXd& local_tokens, int bands,
                                             std::vector<int> part_index) {
    if (local_tokens.rows() != static_cast<Eigen::Index>(q.total()))
        throw InvalidArgument("make_condition_inputs: token count mismatch");
    if (static_cast<int>(part_index.size()) != q.k())
        throw InvalidArgument("make_condition_inputs: part index size differs from K");
    ConditionInputs c;
    const int zd = static_cast<int>(local_tokens.cols());
    const int enc = 6 * bands;
    c.features.resize(static_cast<Eigen::Index>(q.total()), zd + 2 * enc);
    std::vector<double> buf(static_cast<std::size_t>(enc));
    for (std::size_t m = 0; m < q.total(); ++m) {
        auto row = static_cast<Eigen::Index>(m);
        c.features.row(row).head(zd) = local_tokens.row(row);
        fourier_encode(q.points[m], bands, buf);
        for (int j = 0; j < enc; ++j) c.features(row, zd + j) = buf[j];
        fourier_encode(q.normals[m], bands, buf);
        for (int j = 0; j < enc; ++j) c.features(row, zd + enc + j) = buf[j];
    }
    c.fragment_of = q.fragment_of;
    c.budgets = q.budgets;
    c.part_index = std::move(part_index);
    c.anchor = q.anchor;
    c.anchor_mask.resize(q.total());
    for (std::size_t m = 0; m < q.total(); ++m) c.anchor_mask[m] = q.fragment_of[m] == q.anchor;
    return c;
}

} // namespace sare
