#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "sare/cond/queries.hpp"
#include "sare/flow/model.hpp"

namespace sare {

using flow::MatT;
using flow::VecT;

inline constexpr int kDefaultSteps = 50;
inline constexpr int kStructureReadoutSteps = 5;

/// What a velocity field reports at one (x, t). Head logits are optional;
/// oracle fields used in tests leave them empty.
struct FieldOutput {
    MatT<double> velocity;
    VecT<double> fracture_logits;
    MatT<double> adjacency_logits;
};

using VelocityField = std::function<FieldOutput(const MatT<double>& x, double t)>;

/// The trained network as a field over one object's conditioning tokens.
/// Evaluation runs in the parameters' scalar type.
template <class T>
VelocityField model_field(const flow::Params<T>& params, const ConditionInputs& cond) {
    return [&params, &cond](const MatT<double>& x, double t) {
        auto out = flow::forward(params, MatT<T>(x.cast<T>()), static_cast<T>(t), cond);
        FieldOutput f;
        f.velocity = out.velocity.template cast<double>();
        f.fracture_logits = out.fracture_logits.template cast<double>();
        f.adjacency_logits = out.adjacency_logits.template cast<double>();
        return f;
    };
}

/// Uniform grid 1 = t_0 > t_1 > ... > t_steps = 0.
inline std::vector<double> time_grid(int steps) {
    if (steps < 1) throw InvalidArgument("time_grid: steps must be >= 1");
    std::vector<double> g(static_cast<std::size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i) g[i] = 1.0 - static_cast<double>(i) / steps;
    g.back() = 0.0;
    return g;
}

/// One Euler step from t to t - dt with the anchor velocity clamped.
inline FieldOutput euler_step(const VelocityField& field, MatT<double>& x, double t, double dt,
                              const std::vector<std::uint8_t>& anchor_mask, int step_index) {
    FieldOutput f = field(x, t);
    if (f.velocity.rows() != x.rows() || f.velocity.cols() != 3)
        throw InvalidArgument("euler_step: velocity field returned the wrong shape");
    flow::clamp_anchor(f.velocity, anchor_mask);
    x -= dt * f.velocity;
    if (!x.allFinite()) throw NumericError("sampler: non-finite state at step " + std::to_string(step_index));
    return f;
}

/// Running mean of head sigmoids over the final steps of a trajectory.
struct StructureReadout {
    VecT<double> f_sum;
    MatT<double> a_sum;
    int count = 0;

    void add(const FieldOutput& f) {
        if (f.fracture_logits.size() > 0) {
            VecT<double> s = f.fracture_logits.unaryExpr([](double v) { return flow::nn::sigmoid(v); });
            f_sum = f_sum.size() ? VecT<double>(f_sum + s) : s;
        }
        if (f.adjacency_logits.size() > 0) {
            MatT<double> s = f.adjacency_logits.unaryExpr([](double v) { return flow::nn::sigmoid(v); });
            s.diagonal().setZero();
            a_sum = a_sum.size() ? MatT<double>(a_sum + s) : s;
        }
        ++count;
    }
    VecT<double> f_probs() const { return count && f_sum.size() ? VecT<double>(f_sum / count) : VecT<double>(); }
    MatT<double> a_scores() const { return count && a_sum.size() ? MatT<double>(a_sum / count) : MatT<double>(); }
};

struct Trajectory {
    MatT<double> x0_hat;
    VecT<double> f_probs;
    MatT<double> a_scores;
};

/// Integrates from `x_start` at t = 1 down to t = 0.
inline Trajectory euler_integrate(const VelocityField& field, const MatT<double>& x_start, int steps,
                                  const std::vector<std::uint8_t>& anchor_mask) {
    const auto grid = time_grid(steps);
    const int readout_from = steps - std::min(kStructureReadoutSteps, steps);
    MatT<double> x = x_start;
    StructureReadout readout;
    for (int i = 0; i < steps; ++i) {
        auto f = euler_step(field, x, grid[i], grid[i] - grid[i + 1], anchor_mask, i);
        if (i >= readout_from) readout.add(f);
    }
    return {x, readout.f_probs(), readout.a_scores()};
}

/// Standard normal start whose anchor rows sit at the anchor's input-frame
/// queries, so the clamped anchor never moves.
inline MatT<double> initial_state(const QuerySet& q, const std::vector<std::uint8_t>& anchor_mask, std::uint64_t seed) {
    Rng rng(seed);
    MatT<double> eps(static_cast<Eigen::Index>(q.total()), 3);
    for (Eigen::Index m = 0; m < eps.rows(); ++m)
        for (int a = 0; a < 3; ++a) eps(m, a) = gaussian(rng);
    for (Eigen::Index m = 0; m < eps.rows(); ++m)
        if (anchor_mask[m]) eps.row(m) = q.points[m].transpose();
    return eps;
}

struct PoseRecovery {
    std::vector<RigidTransform> transforms;
    std::vector<std::uint8_t> degenerate; ///< 1 where the fit fell back to identity
};

/// Per fragment, the rigid map from input-frame queries onto their slice of x0_hat.
inline PoseRecovery recover_poses(const QuerySet& q, const MatT<double>& x0_hat) {
    if (x0_hat.rows() != static_cast<Eigen::Index>(q.total()))
        throw InvalidArgument("recover_poses: x0_hat row count differs from the query count");
    PoseRecovery r;
    for (int i = 0; i < q.k(); ++i) {
        std::vector<Vec3> dst(q.budgets[i]);
        for (std::size_t j = 0; j < q.budgets[i]; ++j) dst[j] = x0_hat.row(static_cast<Eigen::Index>(q.offsets[i] + j)).transpose();
        try {
            r.transforms.push_back(kabsch_align(q.fragment_points(i), dst));
            r.degenerate.push_back(0);
        } catch (const DegenerateGeometry&) {
            r.transforms.push_back(RigidTransform::identity());
            r.degenerate.push_back(1);
        }
    }
    return r;
}

struct Assembly {
    std::vector<PointCloud> parts;
    PointCloud object;
};

inline Assembly assemble(const AssemblySample& s, const std::vector<RigidTransform>& transforms) {
    if (static_cast<int>(transforms.size()) != s.k()) throw InvalidArgument("assemble: one transform per fragment");
    Assembly a;
    for (int i = 0; i < s.k(); ++i) {
        a.parts.push_back(apply_transform(s.fragments[i].cloud, transforms[i]));
        const auto& p = a.parts.back();
        a.object.points.insert(a.object.points.end(), p.points.begin(), p.points.end());
        a.object.normals.insert(a.object.normals.end(), p.normals.begin(), p.normals.end());
    }
    return a;
}

/// Queries, conditioning tokens and the seed of one object at inference.
struct InferenceInputs {
    QuerySet queries;
    ConditionInputs cond;
};

inline InferenceInputs prepare_inference(const AssemblySample& s, const flow::ModelConfig& mc, std::size_t tokens,
                                         std::uint64_t seed, std::size_t neighbors = kDefaultNeighbors) {
    InferenceInputs in;
    in.queries = sample_queries(s, tokens, derive_seed(seed, "queries"));
    auto z = query_local_tokens(s, in.queries, neighbors);
    in.cond = make_condition_inputs(in.queries, z, mc.bands,
                                    part_permutation(in.queries.k(), mc.max_parts, derive_seed(seed, "parts")));
    return in;
}

struct SampleResult {
    MatT<double> x0_hat;
    MatT<double> eps; ///< trajectory start (anchor rows hold input-frame queries)
    VecT<double> f_probs;
    MatT<double> a_scores;
    std::vector<RigidTransform> transforms;
    std::vector<std::uint8_t> degenerate;
};

inline SampleResult euler_sample(const VelocityField& field, const InferenceInputs& in, int steps, std::uint64_t seed) {
    if (steps < 1) throw InvalidArgument("euler_sample: steps must be >= 1");
    SampleResult r;
    r.eps = initial_state(in.queries, in.cond.anchor_mask, seed);
    auto traj = euler_integrate(field, r.eps, steps, in.cond.anchor_mask);
    r.x0_hat = std::move(traj.x0_hat);
    r.f_probs = std::move(traj.f_probs);
    r.a_scores = std::move(traj.a_scores);
    auto poses = recover_poses(in.queries, r.x0_hat);
    r.transforms = std::move(poses.transforms);
    r.degenerate = std::move(poses.degenerate);
    return r;
}

} // namespace sare
