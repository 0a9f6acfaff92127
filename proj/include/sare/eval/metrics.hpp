#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "sare/data/sample.hpp"
#include "sare/geom/kdtree.hpp"
#include "sare/geom/metrics.hpp"
#include "sare/infer/sampler.hpp"

namespace sare::eval {

inline constexpr double kPartAccuracyThreshold = 0.01;

/// Re-express predictions in the ground-truth gauge by matching the anchor:
/// every prediction is left-multiplied by T_gt[anchor] * T_pred[anchor]^-1.
inline std::vector<RigidTransform> gauge_align(const std::vector<RigidTransform>& pred,
                                               const std::vector<RigidTransform>& gt, int anchor) {
    if (pred.size() != gt.size()) throw InvalidArgument("gauge_align: transform counts differ");
    if (anchor < 0 || anchor >= static_cast<int>(pred.size())) throw InvalidArgument("gauge_align: anchor out of range");
    const RigidTransform align = gt[anchor] * pred[anchor].inverse();
    std::vector<RigidTransform> out;
    out.reserve(pred.size());
    for (const auto& p : pred) out.push_back(align * p);
    return out;
}

struct PoseRmse {
    double rot_deg = 0.0;
    double trans = 0.0;
};

/// Root-mean-square geodesic rotation error and translation error. Callers
/// align the gauge first.
inline PoseRmse pose_rmse(const std::vector<RigidTransform>& pred, const std::vector<RigidTransform>& gt) {
    if (pred.size() != gt.size() || pred.empty()) throw InvalidArgument("pose_rmse: need equal, non-empty lists");
    double r2 = 0.0, t2 = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = rotation_error_deg(pred[i].rotation, gt[i].rotation);
        r2 += r * r;
        t2 += (pred[i].translation - gt[i].translation).squaredNorm();
    }
    const auto n = static_cast<double>(pred.size());
    return {std::sqrt(r2 / n), std::sqrt(t2 / n)};
}

/// Per-fragment Chamfer distance between the predicted and true placements.
inline std::vector<double> fragment_chamfer(const AssemblySample& s, const std::vector<RigidTransform>& pred) {
    std::vector<double> cd;
    for (int i = 0; i < s.k(); ++i) {
        auto a = apply_transform(s.fragments[i].cloud, pred[i]);
        auto b = apply_transform(s.fragments[i].cloud, s.gt_transforms[i]);
        cd.push_back(chamfer_distance(a, b));
    }
    return cd;
}

inline double part_accuracy(const std::vector<double>& fragment_cd, double threshold = kPartAccuracyThreshold) {
    if (fragment_cd.empty()) throw InvalidArgument("part_accuracy: no fragments");
    const auto ok = std::count_if(fragment_cd.begin(), fragment_cd.end(), [&](double c) { return c < threshold; });
    return static_cast<double>(ok) / static_cast<double>(fragment_cd.size());
}

inline double part_accuracy(const AssemblySample& s, const std::vector<RigidTransform>& pred,
                            double threshold = kPartAccuracyThreshold) {
    return part_accuracy(fragment_chamfer(s, pred), threshold);
}

inline double object_chamfer(const AssemblySample& s, const std::vector<RigidTransform>& pred) {
    return chamfer_distance(assemble(s, pred).object, assemble(s, s.gt_transforms).object);
}

/// A_ij = 1 iff some point of part i lies closer than `threshold` to part j.
inline AdjacencyMatrix induce_adjacency(const std::vector<PointCloud>& parts, double threshold) {
    const auto k = static_cast<Eigen::Index>(parts.size());
    AdjacencyMatrix a = AdjacencyMatrix::Zero(k, k);
    std::vector<KdTree> trees;
    trees.reserve(parts.size());
    for (const auto& p : parts) trees.emplace_back(p.points);
    const double t2 = threshold * threshold;
    for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = i + 1; j < k; ++j) {
            // query from the smaller cloud into the larger one's tree
            const auto [from, to] = parts[i].size() <= parts[j].size() ? std::pair{i, j} : std::pair{j, i};
            for (const auto& p : parts[from].points)
                if (trees[to].nearest(p).sq_dist < t2) {
                    a(i, j) = a(j, i) = 1;
                    break;
                }
        }
    return a;
}

struct Prf {
    double precision = 1.0;
    double recall = 1.0;
    double f1 = 1.0;
    std::size_t tp = 0, fp = 0, fn = 0;
    bool empty_prediction = false; ///< precision set to 1 by convention
};

inline Prf prf_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
    Prf r;
    r.tp = tp;
    r.fp = fp;
    r.fn = fn;
    r.empty_prediction = tp + fp == 0;
    r.precision = r.empty_prediction ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    r.recall = tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    r.f1 = r.precision + r.recall > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

/// Edge-set agreement counted over the upper triangle.
inline Prf adjacency_prf(const AdjacencyMatrix& pred, const AdjacencyMatrix& gt) {
    if (pred.rows() != gt.rows() || pred.cols() != gt.cols() || pred.rows() != pred.cols())
        throw InvalidArgument("adjacency_prf: matrices must be square and the same size");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (Eigen::Index i = 0; i < gt.rows(); ++i)
        for (Eigen::Index j = i + 1; j < gt.cols(); ++j) {
            tp += pred(i, j) && gt(i, j);
            fp += pred(i, j) && !gt(i, j);
            fn += !pred(i, j) && gt(i, j);
        }
    return prf_from_counts(tp, fp, fn);
}

inline AdjacencyMatrix threshold_scores(const MatT<double>& scores, double threshold) {
    AdjacencyMatrix a = AdjacencyMatrix::Zero(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i)
        for (Eigen::Index j = 0; j < scores.cols(); ++j) a(i, j) = i != j && scores(i, j) > threshold;
    return a;
}

struct ObjectMetrics {
    std::string object_id;
    int k = 0;
    double rmse_rot_deg = 0.0;
    double rmse_trans = 0.0;
    double pa = 0.0;
    double object_cd = 0.0;
    std::optional<Prf> predicted; ///< absent when the adjacency head is off
    Prf induced;
    int degenerate = 0;
};

struct EvalOptions {
    double pa_threshold = kPartAccuracyThreshold;
    double edge_threshold = 0.5;
    std::optional<double> induce_threshold; ///< defaults to the sample's eps_adj
};

inline ObjectMetrics evaluate_object(const AssemblySample& s, const std::vector<RigidTransform>& pred, int anchor,
                                     const MatT<double>& a_scores, const std::vector<std::uint8_t>& degenerate,
                                     const EvalOptions& opt = {}) {
    ObjectMetrics m;
    m.object_id = s.object_id;
    m.k = s.k();
    const auto aligned = gauge_align(pred, s.gt_transforms, anchor);
    const auto rm = pose_rmse(aligned, s.gt_transforms);
    m.rmse_rot_deg = rm.rot_deg;
    m.rmse_trans = rm.trans;
    m.pa = part_accuracy(s, aligned, opt.pa_threshold);
    m.object_cd = object_chamfer(s, aligned);
    if (a_scores.size() > 0) m.predicted = adjacency_prf(threshold_scores(a_scores, opt.edge_threshold), s.adjacency);
    m.induced = adjacency_prf(induce_adjacency(assemble(s, aligned).parts, opt.induce_threshold.value_or(s.eps_adj)),
                              s.adjacency);
    m.degenerate = static_cast<int>(std::count(degenerate.begin(), degenerate.end(), 1));
    return m;
}

// ---------------------------------------------------------------------------
// Baselines computed on the same objects

/// Uniform random rotation per fragment, zero translation.
inline std::vector<RigidTransform> random_pose_baseline(const AssemblySample& s, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<RigidTransform> t;
    for (int i = 0; i < s.k(); ++i) t.push_back({random_rotation(rng), Vec3::Zero()});
    return t;
}

inline AdjacencyMatrix all_edges(int k) {
    AdjacencyMatrix a = AdjacencyMatrix::Ones(k, k);
    a.diagonal().setZero();
    return a;
}

// ---------------------------------------------------------------------------
// Aggregation

/// (lo, hi] in percent; the first bin also includes 0.
struct PaBin {
    double lo, hi;
    std::string label() const {
        auto f = [](double v) { return std::to_string(static_cast<int>(v)); };
        return f(lo) + "-" + f(hi);
    }
    bool contains(double pa_percent) const {
        constexpr double slack = 1e-9; // 100 * (19/20) must land in the 90-95 bin
        const bool above = lo == 0.0 ? pa_percent >= -slack : pa_percent > lo + slack;
        return above && pa_percent <= hi + slack;
    }
};

/// (lo, hi] PA bins in percent; the final bin closes the partition at 100.
inline std::vector<PaBin> default_pa_bins() {
    return {{0, 50}, {50, 60}, {60, 70}, {70, 80}, {80, 90}, {90, 95}, {95, 100}};
}

inline std::vector<int> default_k_bins() { return {2, 3, 4, 5, 6, 10, 20, 50}; } // inclusive upper edges

inline constexpr double kHardSubsetPa = 0.95;

struct Aggregate {
    std::size_t count = 0;
    double pa = 0, rmse_rot_deg = 0, rmse_trans = 0, object_cd = 0;
    std::optional<Prf> predicted_micro;
    Prf induced_micro;
};

inline Aggregate aggregate(const std::vector<const ObjectMetrics*>& rows) {
    Aggregate a;
    a.count = rows.size();
    if (rows.empty()) return a;
    std::size_t tp = 0, fp = 0, fn = 0, itp = 0, ifp = 0, ifn = 0;
    bool has_pred = true;
    for (const auto* r : rows) {
        a.pa += r->pa;
        a.rmse_rot_deg += r->rmse_rot_deg;
        a.rmse_trans += r->rmse_trans;
        a.object_cd += r->object_cd;
        if (r->predicted) {
            tp += r->predicted->tp;
            fp += r->predicted->fp;
            fn += r->predicted->fn;
        } else {
            has_pred = false;
        }
        itp += r->induced.tp;
        ifp += r->induced.fp;
        ifn += r->induced.fn;
    }
    const auto n = static_cast<double>(rows.size());
    a.pa /= n;
    a.rmse_rot_deg /= n;
    a.rmse_trans /= n;
    a.object_cd /= n;
    if (has_pred) a.predicted_micro = prf_from_counts(tp, fp, fn);
    a.induced_micro = prf_from_counts(itp, ifp, ifn);
    return a;
}

struct BinRow {
    std::string label;
    Aggregate before;
    std::optional<Aggregate> after; ///< paired refine run
    std::optional<double> delta_pa_pp;
};

struct MetricsReport {
    Aggregate overall;
    std::vector<BinRow> k_bins;  ///< populated bins only
    std::vector<BinRow> pa_bins; ///< binned on first-pass PA; populated bins only
    std::optional<BinRow> hard_subset;
    std::optional<Aggregate> overall_after;
};

namespace detail {

inline BinRow make_row(std::string label, const std::vector<std::size_t>& idx, const std::vector<ObjectMetrics>& before,
                       const std::vector<ObjectMetrics>* after) {
    BinRow row;
    row.label = std::move(label);
    std::vector<const ObjectMetrics*> b, a;
    for (auto i : idx) {
        b.push_back(&before[i]);
        if (after) a.push_back(&(*after)[i]);
    }
    row.before = aggregate(b);
    if (after) {
        row.after = aggregate(a);
        row.delta_pa_pp = 100.0 * (row.after->pa - row.before.pa);
    }
    return row;
}

} // namespace detail

/// Bins by K and by first-pass PA. When `after` is given it must list the
/// same objects in the same order; deltas are after minus before in points.
inline MetricsReport binned_report(const std::vector<ObjectMetrics>& before, const std::vector<ObjectMetrics>* after = nullptr,
                                   const std::vector<int>& k_edges = default_k_bins(),
                                   const std::vector<PaBin>& pa_bins = default_pa_bins()) {
    if (before.empty()) throw InvalidArgument("binned_report: no objects");
    if (after) {
        if (after->size() != before.size()) throw InvalidArgument("binned_report: paired runs differ in size");
        for (std::size_t i = 0; i < before.size(); ++i)
            if ((*after)[i].object_id != before[i].object_id)
                throw InvalidArgument("binned_report: paired runs list different objects");
    }
    MetricsReport rep;
    std::vector<std::size_t> all(before.size());
    std::iota(all.begin(), all.end(), 0);
    auto overall = detail::make_row("all", all, before, after);
    rep.overall = overall.before;
    rep.overall_after = overall.after;

    int lo = 1; // K >= 2 always
    for (int hi : k_edges) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < before.size(); ++i)
            if (before[i].k > lo && before[i].k <= hi) idx.push_back(i);
        if (!idx.empty())
            rep.k_bins.push_back(detail::make_row(lo + 1 == hi ? std::to_string(hi) : std::to_string(lo + 1) + "-" + std::to_string(hi),
                                                  idx, before, after));
        lo = hi;
    }
    for (const auto& bin : pa_bins) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < before.size(); ++i)
            if (bin.contains(100.0 * before[i].pa)) idx.push_back(i);
        if (!idx.empty()) rep.pa_bins.push_back(detail::make_row(bin.label(), idx, before, after));
    }
    std::vector<std::size_t> hard;
    for (std::size_t i = 0; i < before.size(); ++i)
        if (before[i].pa <= kHardSubsetPa) hard.push_back(i);
    if (!hard.empty()) rep.hard_subset = detail::make_row("pa<=95", hard, before, after);
    return rep;
}

} // namespace sare::eval
