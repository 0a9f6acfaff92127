#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sare/data/sample.hpp"
#include "sare/data/shapes.hpp"
#include "sare/random.hpp"

namespace sare {

struct FractureOptions {
    std::size_t surface_points = 20000; ///< outer-surface samples; fracture faces use the same density
    std::size_t interior_points = 20000; ///< volume probes for split balancing
    double min_piece_fraction = 0.01;   ///< smallest piece, as a fraction of the solid's volume
    int max_retries = 50;
    double eps_f = 0.01;
    double eps_adj = 0.02;
};

namespace detail {

struct Plane {
    Vec3 normal;
    double offset; ///< plane: normal . x = offset
    bool positive(const Vec3& x) const { return normal.dot(x) - offset > 0.0; }
};

struct Cell {
    std::vector<std::pair<int, bool>> sides; ///< (plane index, on positive side)
    std::vector<std::uint32_t> probes;
};

inline bool satisfies(const std::vector<Plane>& planes, const Cell& c, const Vec3& x, int skip = -1) {
    for (auto [pi, pos] : c.sides)
        if (pi != skip && planes[pi].positive(x) != pos) return false;
    return true;
}

/// 26-connectivity of probe points on a coarse occupancy grid.
inline bool probes_connected(const std::vector<Vec3>& probes, const std::vector<std::uint32_t>& ids, double radius) {
    constexpr int n = 20;
    std::vector<std::uint8_t> occ(n * n * n, 0);
    auto cell = [&](double v) { return std::clamp(static_cast<int>((v + radius) / (2.0 * radius) * n), 0, n - 1); };
    for (auto id : ids) {
        const Vec3& p = probes[id];
        occ[(cell(p.x()) * n + cell(p.y())) * n + cell(p.z())] = 1;
    }
    std::size_t total = 0, start = occ.size();
    for (std::size_t i = 0; i < occ.size(); ++i)
        if (occ[i]) {
            ++total;
            if (start == occ.size()) start = i;
        }
    if (total == 0) return false;
    std::vector<std::size_t> stack{start};
    occ[start] = 2;
    std::size_t seen = 1;
    while (!stack.empty()) {
        std::size_t c = stack.back();
        stack.pop_back();
        int x = static_cast<int>(c / (n * n)), y = static_cast<int>((c / n) % n), z = static_cast<int>(c % n);
        for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dz = -1; dz <= 1; ++dz) {
                    int a = x + dx, b = y + dy, e = z + dz;
                    if (a < 0 || b < 0 || e < 0 || a >= n || b >= n || e >= n) continue;
                    std::size_t j = (static_cast<std::size_t>(a) * n + b) * n + e;
                    if (occ[j] == 1) {
                        occ[j] = 2;
                        ++seen;
                        stack.push_back(j);
                    }
                }
    }
    return seen == total;
}

} // namespace detail

/// Recursive planar fracture of a catalog solid into exactly K pieces.
///
/// The surface is sampled area-uniformly, then K-1 seeded planes split the
/// solid cell by cell (cells chosen with probability proportional to volume).
/// Every cut face is sampled at the outer-surface density and the samples are
/// shared by the two pieces on either side, with opposite normals. The object
/// is scaled to the unit sphere, then centred on the centroid of all samples;
/// fragments are returned centred in their local frames with ground truth
/// poses, fracture labels and the contact graph.
inline AssemblySample fracture_object(ShapeId shape, int k, std::uint64_t seed, const FractureOptions& opt = {},
                                      std::string object_id = {}) {
    if (k < 2 || k > kMaxFragments) throw InvalidArgument("fracture_object: K must be in [2, 50]");
    const Solid solid(shape);
    const double radius = solid.bounding_radius();
    Rng rng(seed);

    std::vector<Vec3> probes;
    probes.reserve(opt.interior_points);
    while (probes.size() < opt.interior_points) {
        Vec3 x((2.0 * uniform01(rng) - 1.0) * radius, (2.0 * uniform01(rng) - 1.0) * radius,
               (2.0 * uniform01(rng) - 1.0) * radius);
        if (solid.inside(x)) probes.push_back(x);
    }

    std::vector<detail::Plane> planes;
    std::vector<detail::Cell> cells(1);
    cells[0].probes.resize(probes.size());
    for (std::uint32_t i = 0; i < probes.size(); ++i) cells[0].probes[i] = i;
    std::vector<std::vector<std::pair<int, bool>>> face_parent; // parent constraints per plane

    const auto min_probes = static_cast<std::size_t>(
        std::max(8.0, opt.min_piece_fraction * static_cast<double>(probes.size())));
    const bool convex = shape != ShapeId::LPrism;

    for (int split = 0; split + 1 < k; ++split) {
        bool done = false;
        for (int attempt = 0; attempt < opt.max_retries && !done; ++attempt) {
            // volume-weighted cell choice
            std::size_t pick = std::uniform_int_distribution<std::size_t>(0, probes.size() - 1)(rng);
            std::size_t ci = 0;
            for (std::size_t acc = 0; ci < cells.size(); ++ci) {
                acc += cells[ci].probes.size();
                if (pick < acc) break;
            }
            const detail::Cell& cell = cells[ci];
            Vec3 mean = Vec3::Zero();
            for (auto id : cell.probes) mean += probes[id];
            mean /= static_cast<double>(cell.probes.size());
            const Vec3& through = probes[cell.probes[std::uniform_int_distribution<std::size_t>(
                0, cell.probes.size() - 1)(rng)]];
            Vec3 n = random_unit_vector(rng);
            detail::Plane plane{n, n.dot(0.5 * (through + mean))};

            detail::Cell pos, neg;
            for (auto id : cell.probes) (plane.positive(probes[id]) ? pos : neg).probes.push_back(id);
            if (pos.probes.size() < min_probes || neg.probes.size() < min_probes) continue;
            if (!convex && (!detail::probes_connected(probes, pos.probes, radius) ||
                            !detail::probes_connected(probes, neg.probes, radius)))
                continue;

            const int pi = static_cast<int>(planes.size());
            planes.push_back(plane);
            face_parent.push_back(cell.sides);
            pos.sides = neg.sides = cell.sides;
            pos.sides.emplace_back(pi, true);
            neg.sides.emplace_back(pi, false);
            cells[ci] = std::move(pos);
            cells.push_back(std::move(neg));
            done = true;
        }
        if (!done)
            throw GenerationFailure("fracture_object(" + std::string(shape_name(shape)) + ", K=" + std::to_string(k) +
                                    "): no valid split after " + std::to_string(opt.max_retries) + " retries");
    }

    std::vector<PointCloud> world(k);
    auto leaf_of = [&](const Vec3& x, int plane, bool side) -> int {
        for (int c = 0; c < k; ++c) {
            bool has = plane < 0;
            for (auto [p, s] : cells[c].sides)
                if (p == plane && s == side) has = true;
            if (has && detail::satisfies(planes, cells[c], x, plane)) return c;
        }
        return -1;
    };

    for (std::size_t s = 0; s < opt.surface_points; ++s) {
        SurfaceSample smp = solid.sample_surface(rng);
        int c = leaf_of(smp.point, -1, false);
        if (c < 0) continue;
        world[c].points.push_back(smp.point);
        world[c].normals.push_back(smp.normal);
    }

    const double density = static_cast<double>(opt.surface_points) / solid.surface_area();
    for (std::size_t pi = 0; pi < planes.size(); ++pi) {
        const auto& pl = planes[pi];
        const double disk = std::sqrt(std::max(radius * radius - pl.offset * pl.offset, 0.0));
        const Vec3 centre = pl.normal * pl.offset;
        Vec3 u = pl.normal.unitOrthogonal();
        Vec3 v = pl.normal.cross(u);
        const auto trials = static_cast<std::size_t>(std::llround(density * std::numbers::pi * disk * disk));
        detail::Cell parent{face_parent[pi], {}};
        for (std::size_t t = 0; t < trials; ++t) {
            double r = disk * std::sqrt(uniform01(rng));
            double th = 2.0 * std::numbers::pi * uniform01(rng);
            Vec3 x = centre + r * (std::cos(th) * u + std::sin(th) * v);
            if (!solid.inside(x) || !detail::satisfies(planes, parent, x)) continue;
            int cp = leaf_of(x, static_cast<int>(pi), true);
            int cn = leaf_of(x, static_cast<int>(pi), false);
            if (cp < 0 || cn < 0) continue;
            world[cp].points.push_back(x);
            world[cp].normals.push_back(-pl.normal);
            world[cn].points.push_back(x);
            world[cn].normals.push_back(pl.normal);
        }
    }

    const double scale = 1.0 / radius;
    Vec3 centroid = Vec3::Zero();
    std::size_t total = 0;
    for (auto& w : world) {
        if (w.size() < 16)
            throw GenerationFailure("fracture_object: piece with too few surface samples");
        for (auto& p : w.points) {
            p *= scale;
            centroid += p;
        }
        total += w.size();
    }
    centroid /= static_cast<double>(total);

    AssemblySample out;
    out.object_id = std::move(object_id);
    out.shape = std::string(shape_name(shape));
    out.seed = seed;
    out.eps_f = opt.eps_f;
    out.eps_adj = opt.eps_adj;
    for (int i = 0; i < k; ++i) {
        for (auto& p : world[i].points) p -= centroid;
        Fragment f;
        f.id = i;
        f.area = static_cast<double>(world[i].size()) / density * scale * scale;
        const Vec3 c = world[i].centroid();
        f.cloud.normals = world[i].normals;
        f.cloud.points.reserve(world[i].size());
        for (const auto& p : world[i].points) f.cloud.points.push_back(p - c);
        out.fragments.push_back(std::move(f));
        out.gt_transforms.push_back({Mat3::Identity(), c});
    }
    StructureLabels labels = label_structure(world, opt.eps_f, opt.eps_adj);
    out.adjacency = std::move(labels.adjacency);
    out.fracture_labels = std::move(labels.fracture);
    return out;
}

/// Relabel a sample from its fragments in ground-truth pose.
inline void relabel(AssemblySample& s) {
    StructureLabels labels = label_structure(s.posed(), s.eps_f, s.eps_adj);
    s.adjacency = std::move(labels.adjacency);
    s.fracture_labels = std::move(labels.fracture);
}

struct Augmentation {
    std::vector<Mat3> rotations; ///< applied to each fragment's local frame
};

/// Random local-frame rotation of every non-anchor fragment. Ground-truth
/// transforms are updated so the posed fragments are unchanged.
inline AssemblySample augment(const AssemblySample& s, int anchor, std::uint64_t seed, Augmentation* applied = nullptr) {
    if (anchor < 0 || anchor >= s.k()) throw InvalidArgument("augment: anchor out of range");
    Rng rng(seed);
    AssemblySample out = s;
    Augmentation aug;
    aug.rotations.assign(s.k(), Mat3::Identity());
    for (int i = 0; i < s.k(); ++i) {
        if (i == anchor) continue;
        const Mat3 r = random_rotation(rng);
        aug.rotations[i] = r;
        auto& cloud = out.fragments[i].cloud;
        for (auto& p : cloud.points) p = r * p;
        for (auto& n : cloud.normals) n = r * n;
        out.gt_transforms[i].rotation = s.gt_transforms[i].rotation * r.transpose();
        if (cloud.centroid().norm() > 1e-6)
            throw NumericError("augment: fragment " + std::to_string(i) + " lost its centring");
    }
    if (applied) *applied = std::move(aug);
    return out;
}

} // namespace sare
