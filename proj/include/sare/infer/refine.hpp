#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "sare/geom/metrics.hpp"
#include "sare/infer/sampler.hpp"

namespace sare {

struct RefineConfig {
    double edge_threshold = 0.5;
    double overlap_tau = 0.05;
    int resolution = 64;
    int coverage_tolerance = 1; ///< Chebyshev voxel distance
    double coverage_fraction = 0.3;
    int min_component = 2;
    double alpha = 0.5;
    int resample_repeats = 2;   ///< applied on the first half of the time grid
    double fracture_threshold = 0.5;
    double bbox_inflation = 0.05;

    void check() const {
        if (!(overlap_tau > 0.0 && overlap_tau < 1.0)) throw ConfigError("refine: overlap_tau must lie in (0, 1)");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("refine: alpha must lie in [0, 1]");
        if (resolution < 8) throw ConfigError("refine: voxel resolution must be >= 8");
        if (coverage_tolerance < 0) throw ConfigError("refine: coverage tolerance must be >= 0");
        if (!(coverage_fraction >= 0.0 && coverage_fraction <= 1.0))
            throw ConfigError("refine: coverage fraction must lie in [0, 1]");
        if (min_component < 1) throw ConfigError("refine: min component size must be >= 1");
        if (resample_repeats < 1) throw ConfigError("refine: resample repeats must be >= 1");
        if (!(edge_threshold >= 0.0 && edge_threshold <= 1.0) || !(fracture_threshold >= 0.0 && fracture_threshold <= 1.0))
            throw ConfigError("refine: thresholds must lie in [0, 1]");
        if (!(bbox_inflation >= 0.0)) throw ConfigError("refine: bbox inflation must be >= 0");
    }
};

enum class RefineMode { Repaint, Freeze, OracleAdjacency };

inline const char* mode_name(RefineMode m) {
    switch (m) {
    case RefineMode::Repaint: return "repaint";
    case RefineMode::Freeze: return "freeze";
    case RefineMode::OracleAdjacency: return "oracle-adjacency";
    }
    return "?";
}

inline RefineMode parse_mode(const std::string& s) {
    if (s == "repaint") return RefineMode::Repaint;
    if (s == "freeze") return RefineMode::Freeze;
    if (s == "oracle-adjacency" || s == "oracle") return RefineMode::OracleAdjacency;
    throw ConfigError("unknown refine mode '" + s + "' (expected repaint, freeze or oracle-adjacency)");
}

using Edge = std::pair<int, int>; ///< undirected, first < second

inline std::vector<Edge> candidate_edges(const MatT<double>& scores, double threshold) {
    if (scores.rows() != scores.cols()) throw InvalidArgument("candidate_edges: scores must be square");
    std::vector<Edge> e;
    for (int i = 0; i < scores.rows(); ++i)
        for (int j = i + 1; j < scores.cols(); ++j)
            if (scores(i, j) > threshold) e.emplace_back(i, j);
    return e;
}

/// Dense fracture flags: a point inherits the decision of its nearest query
/// token on the same fragment (both in the fragment's own frame).
inline std::vector<std::vector<std::uint8_t>> dense_fracture_flags(const AssemblySample& s, const QuerySet& q,
                                                                   const VecT<double>& f_probs, double threshold) {
    std::vector<std::vector<std::uint8_t>> flags(static_cast<std::size_t>(s.k()));
    for (int i = 0; i < s.k(); ++i) {
        const auto& cloud = s.fragments[i].cloud;
        flags[i].assign(cloud.size(), 0);
        if (f_probs.size() == 0) continue;
        auto qp = q.fragment_points(i);
        KdTree tree(qp);
        for (std::size_t p = 0; p < cloud.size(); ++p) {
            auto hit = tree.nearest(cloud.points[p]);
            flags[i][p] = f_probs(static_cast<Eigen::Index>(q.offsets[i] + hit.index)) > threshold;
        }
    }
    return flags;
}

struct EdgeCheck {
    Edge edge;
    double overlap = 0.0;
    double cover_ij = 0.0;
    double cover_ji = 0.0;
    bool kept = false;
    std::string reason; ///< "kept", "overlap", "coverage", "no-fracture-voxels"
};

/// Voxel occupancy used for the overlap test. Each point is first pushed one
/// voxel inward along its normal, so two pieces that merely touch along a
/// shared face do not register as interpenetrating.
inline VoxelSet solid_voxels(const PointCloud& c, int resolution, const Bbox& bbox) {
    const double cell = (bbox.max - bbox.min).maxCoeff() / resolution;
    std::vector<Vec3> pts(c.size());
    for (std::size_t p = 0; p < c.size(); ++p)
        pts[p] = c.has_normals() ? Vec3(c.points[p] - cell * c.normals[p]) : c.points[p];
    return voxelize(pts, resolution, bbox);
}

inline Bbox assembly_bbox(const std::vector<PointCloud>& parts, double inflation) {
    Bbox bb = Bbox::of(parts.front().points);
    for (const auto& p : parts) bb.extend(Bbox::of(p.points));
    return bb.inflated(inflation);
}

inline std::vector<EdgeCheck> verify_edges(const std::vector<PointCloud>& parts,
                                           const std::vector<std::vector<std::uint8_t>>& fracture_flags,
                                           const std::vector<Edge>& candidates, const RefineConfig& cfg) {
    cfg.check();
    std::vector<EdgeCheck> out;
    if (candidates.empty()) return out;
    const Bbox bb = assembly_bbox(parts, cfg.bbox_inflation);
    std::vector<std::optional<VoxelSet>> solid(parts.size()), frac(parts.size());
    auto solid_of = [&](int i) -> const VoxelSet& {
        if (!solid[i]) solid[i] = solid_voxels(parts[i], cfg.resolution, bb);
        return *solid[i];
    };
    auto frac_of = [&](int i) -> const VoxelSet& {
        if (!frac[i]) {
            std::vector<Vec3> pts;
            for (std::size_t p = 0; p < parts[i].size(); ++p)
                if (fracture_flags[i][p]) pts.push_back(parts[i].points[p]);
            frac[i] = voxelize(pts, cfg.resolution, bb);
        }
        return *frac[i];
    };
    for (auto [i, j] : candidates) {
        EdgeCheck c;
        c.edge = {std::min(i, j), std::max(i, j)};
        c.overlap = overlap_ratio(solid_of(c.edge.first), solid_of(c.edge.second));
        if (c.overlap > cfg.overlap_tau) {
            c.reason = "overlap";
        } else {
            const VoxelSet& fi = frac_of(c.edge.first);
            const VoxelSet& fj = frac_of(c.edge.second);
            if (fi.size() == 0 || fj.size() == 0) {
                c.reason = "no-fracture-voxels";
            } else {
                c.cover_ij = coverage_fraction(fi, fj, cfg.coverage_tolerance);
                c.cover_ji = coverage_fraction(fj, fi, cfg.coverage_tolerance);
                c.kept = c.cover_ij >= cfg.coverage_fraction && c.cover_ji >= cfg.coverage_fraction;
                c.reason = c.kept ? "kept" : "coverage";
            }
        }
        out.push_back(c);
    }
    return out;
}

inline std::vector<Edge> kept_edges(const std::vector<EdgeCheck>& checks) {
    std::vector<Edge> e;
    for (const auto& c : checks)
        if (c.kept) e.push_back(c.edge);
    return e;
}

struct StableMask {
    std::vector<std::uint8_t> tokens;        ///< per query token
    std::vector<std::vector<int>> components; ///< kept components, sorted fragment ids
    std::vector<std::uint8_t> fragments;     ///< per fragment

    std::size_t size() const { return static_cast<std::size_t>(std::count(tokens.begin(), tokens.end(), 1)); }
    bool empty() const { return size() == 0; }
};

/// Union-find over kept edges; components with at least `min_size`
/// fragments contribute all of their tokens.
inline StableMask stable_mask(const std::vector<Edge>& kept, const std::vector<int>& fragment_of, int k, int min_size) {
    std::vector<int> parent(static_cast<std::size_t>(k));
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
    for (auto [i, j] : kept) {
        if (i < 0 || j < 0 || i >= k || j >= k) throw InvalidArgument("stable_mask: edge index out of range");
        int a = find(i), b = find(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
    std::vector<std::vector<int>> groups(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) groups[find(i)].push_back(i);
    StableMask m;
    m.fragments.assign(static_cast<std::size_t>(k), 0);
    for (auto& g : groups)
        if (!g.empty() && static_cast<int>(g.size()) >= min_size) {
            for (int f : g) m.fragments[f] = 1;
            m.components.push_back(g);
        }
    m.tokens.resize(fragment_of.size());
    for (std::size_t t = 0; t < fragment_of.size(); ++t) m.tokens[t] = m.fragments[fragment_of[t]];
    return m;
}

/// x_known(t) = (1 - t) x_ref + t eps.
inline MatT<double> known_state(const MatT<double>& x_ref, const MatT<double>& eps, double t) {
    return (1.0 - t) * x_ref + t * eps;
}

/// Pull masked rows toward x_known(t) with strength alpha.
inline void blend(MatT<double>& x, const MatT<double>& x_known, const std::vector<std::uint8_t>& mask, double alpha) {
    for (Eigen::Index m = 0; m < x.rows(); ++m) {
        if (!mask[m]) continue;
        if (alpha == 1.0) {
            x.row(m) = x_known.row(m);
        } else {
            x.row(m) = (1.0 - alpha) * x.row(m) + alpha * x_known.row(m);
        }
    }
}

/// Observer called right after every blend: (step index, t, state, x_known).
using BlendObserver = std::function<void(int, double, const MatT<double>&, const MatT<double>&)>;

struct RepaintOptions {
    double alpha = 0.5;
    int repeats = 2; ///< per step on the first half of the grid
    int steps = kDefaultSteps;
};

/// Second-pass sampling that keeps the masked tokens on the noisy line
/// between x_ref and this trajectory's own start. With an empty mask every
/// operation matches euler_sample, so the result is bitwise identical.
inline SampleResult repaint_sample(const VelocityField& field, const InferenceInputs& in, const MatT<double>& x_ref,
                                   const std::vector<std::uint8_t>& mask, const RepaintOptions& opt, std::uint64_t seed,
                                   const BlendObserver& observer = {}) {
    if (mask.size() != in.queries.total()) throw InvalidArgument("repaint_sample: mask length differs from M");
    if (x_ref.rows() != static_cast<Eigen::Index>(mask.size())) throw InvalidArgument("repaint_sample: x_ref shape");
    const auto& anchor = in.cond.anchor_mask;
    const bool active = std::any_of(mask.begin(), mask.end(), [](auto v) { return v != 0; });
    const auto grid = time_grid(opt.steps);
    const int readout_from = opt.steps - std::min(kStructureReadoutSteps, opt.steps);

    SampleResult r;
    r.eps = initial_state(in.queries, anchor, seed);
    MatT<double> x = r.eps;
    Rng renoise(derive_seed(seed, "renoise"));
    StructureReadout readout;
    for (int i = 0; i < opt.steps; ++i) {
        const double t = grid[i], s = grid[i + 1];
        const int repeats = active && 2 * i < opt.steps ? opt.repeats : 1;
        for (int rep = 0; rep < repeats; ++rep) {
            if (active) {
                MatT<double> xk = known_state(x_ref, r.eps, t);
                blend(x, xk, mask, opt.alpha);
                if (observer) observer(i, t, x, xk);
            }
            auto f = euler_step(field, x, t, t - s, anchor, i);
            if (rep + 1 < repeats) {
                // jump back from s to t along the forward noising kernel
                const double keep = (1.0 - t) / (1.0 - s);
                const double sigma = std::sqrt(std::max(0.0, t * t - std::pow((1.0 - t) * s / (1.0 - s), 2)));
                for (Eigen::Index m = 0; m < x.rows(); ++m) {
                    if (anchor[m]) continue;
                    for (int a = 0; a < 3; ++a) x(m, a) = keep * x(m, a) + sigma * gaussian(renoise);
                }
            } else if (i >= readout_from) {
                readout.add(f);
            }
        }
    }
    r.x0_hat = std::move(x);
    r.f_probs = readout.f_probs();
    r.a_scores = readout.a_scores();
    auto poses = recover_poses(in.queries, r.x0_hat);
    r.transforms = std::move(poses.transforms);
    r.degenerate = std::move(poses.degenerate);
    return r;
}

struct RefineReport {
    RefineMode mode = RefineMode::Repaint;
    RefineConfig config;
    std::vector<Edge> candidates;
    std::vector<double> candidate_scores;
    std::vector<EdgeCheck> checks;
    std::vector<Edge> kept;
    std::vector<std::vector<int>> components;
    std::size_t mask_tokens = 0;
};

struct RefineOutcome {
    SampleResult result;
    RefineReport report;
};

/// One verification-plus-resampling round on top of a first-pass sample.
/// `gt_adjacency` is required only in oracle-adjacency mode.
inline RefineOutcome refine_pipeline(const VelocityField& field, const AssemblySample& s, const InferenceInputs& in,
                                     const SampleResult& first, const RefineConfig& cfg, RefineMode mode, int steps,
                                     std::uint64_t seed, const AdjacencyMatrix* gt_adjacency = nullptr) {
    cfg.check();
    RefineOutcome out;
    RefineReport& rep = out.report;
    rep.mode = mode;
    rep.config = cfg;

    MatT<double> scores = first.a_scores;
    if (mode == RefineMode::OracleAdjacency) {
        if (!gt_adjacency) throw InvalidArgument("refine_pipeline: oracle mode needs the ground-truth adjacency");
        scores = gt_adjacency->cast<double>();
    }
    if (scores.size() == 0) scores = MatT<double>::Zero(s.k(), s.k()); // adjacency head disabled
    rep.candidates = candidate_edges(scores, cfg.edge_threshold);
    for (auto [i, j] : rep.candidates) rep.candidate_scores.push_back(scores(i, j));

    const auto parts = assemble(s, first.transforms).parts;
    const auto flags = dense_fracture_flags(s, in.queries, first.f_probs, cfg.fracture_threshold);
    rep.checks = verify_edges(parts, flags, rep.candidates, cfg);
    rep.kept = kept_edges(rep.checks);
    const StableMask mask = stable_mask(rep.kept, in.queries.fragment_of, s.k(), cfg.min_component);
    rep.components = mask.components;
    rep.mask_tokens = mask.size();

    RepaintOptions opt;
    opt.steps = steps;
    opt.alpha = mode == RefineMode::Freeze ? 1.0 : cfg.alpha;
    opt.repeats = mode == RefineMode::Freeze ? 1 : cfg.resample_repeats;
    out.result = repaint_sample(field, in, first.x0_hat, mask.tokens, opt, seed);
    if (mode == RefineMode::Freeze)
        for (int i = 0; i < s.k(); ++i)
            if (mask.fragments[i]) {
                out.result.transforms[i] = first.transforms[i];
                out.result.degenerate[i] = first.degenerate[i];
            }
    return out;
}

} // namespace sare
