#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "sare/cond/queries.hpp"
#include "sare/flow/model.hpp"

namespace sare::flow {

/// Everything about one training object that does not change between steps.
/// Queries live in the stored input frame; each step rotates them afresh.
struct TrainingItem {
    std::string object_id;
    QuerySet queries;
    Eigen::MatrixXd local_tokens; ///< rigid-invariant, so shared by every augmentation
    StructureTargets target;
    MatT<double> x0;              ///< M x 3 assembled queries in the anchor's frame
};

/// Assembled query targets expressed in the anchor fragment's local frame.
inline MatT<double> anchor_gauge_targets(const AssemblySample& s, const QuerySet& q) {
    const RigidTransform to_anchor = s.gt_transforms[q.anchor].inverse();
    MatT<double> x0(static_cast<Eigen::Index>(q.total()), 3);
    for (std::size_t m = 0; m < q.total(); ++m) x0.row(static_cast<Eigen::Index>(m)) = to_anchor(q.gt_targets[m]).transpose();
    return x0;
}

inline TrainingItem prepare_item(const AssemblySample& s, std::size_t tokens, std::uint64_t seed,
                                 std::size_t neighbors = kDefaultNeighbors) {
    TrainingItem it;
    it.object_id = s.object_id;
    it.queries = sample_queries(s, tokens, seed);
    it.local_tokens = query_local_tokens(s, it.queries, neighbors);
    it.target.fracture = query_fracture_labels(s, it.queries);
    it.target.adjacency = s.adjacency;
    it.x0 = anchor_gauge_targets(s, it.queries);
    return it;
}

struct TrainConfig {
    int epochs = 30;
    double lr = 1e-4;
    double warmup_steps = 0;    ///< linear ramp from 0 to lr
    bool cosine_decay = false;  ///< decay to 10% of lr over the run
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip = 1.0;     ///< global-norm clip; <= 0 disables
    LossWeights weights{};
    bool augment = true;
    double divergence_threshold = 1e6;
    std::uint64_t seed = 0;
};

struct StepRecord {
    int epoch = 0; ///< 1-based
    std::size_t step = 0;
    LossBreakdown loss;
};

struct EpochRecord {
    int epoch = 0;
    double l_rf = 0, l_f = 0, l_a = 0, total = 0;
};

/// Decoupled-weight-decay Adam on a flat parameter vector.
template <class T>
class AdamW {
public:
    AdamW(const Params<T>& p, const TrainConfig& cfg)
        : cfg_(cfg), m_(p.data().size(), 0.0), v_(p.data().size(), 0.0), decay_(p.data().size(), 0) {
        for (const auto& s : p.layout().specs)
            std::fill_n(decay_.begin() + static_cast<std::ptrdiff_t>(s.offset), static_cast<std::size_t>(s.rows) * s.cols,
                        static_cast<std::uint8_t>(s.decay));
    }

    void step(Params<T>& p, const Params<T>& g, double lr) {
        ++t_;
        double clip = 1.0;
        if (cfg_.grad_clip > 0.0) {
            double sq = 0.0;
            for (T v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
            const double norm = std::sqrt(sq);
            if (norm > cfg_.grad_clip) clip = cfg_.grad_clip / norm;
        }
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        auto& w = p.data();
        const auto& gd = g.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = clip * static_cast<double>(gd[i]);
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * gi;
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * gi * gi;
            double upd = (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg_.adam_eps);
            if (decay_[i]) upd += cfg_.weight_decay * static_cast<double>(w[i]);
            if (lr != 0.0) w[i] -= static_cast<T>(lr * upd); // lr = 0 must not flip -0.0 to +0.0
        }
    }

    std::size_t steps() const noexcept { return t_; }

private:
    TrainConfig cfg_;
    std::vector<double> m_, v_;
    std::vector<std::uint8_t> decay_;
    std::size_t t_ = 0;
};

inline double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
    double lr = cfg.lr;
    if (cfg.warmup_steps > 0 && static_cast<double>(step) < cfg.warmup_steps)
        lr *= (static_cast<double>(step) + 1.0) / cfg.warmup_steps;
    if (cfg.cosine_decay && total_steps > 1) {
        const double u = static_cast<double>(step) / static_cast<double>(total_steps - 1);
        lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
    }
    return lr;
}

/// Random draws behind one training step, from the non-anchor poses
/// down to the Gaussian endpoint.
template <class T>
struct StepInputs {
    ConditionInputs cond;
    FlowBatch<T> batch;
};

template <class T>
StepInputs<T> draw_step(const TrainingItem& it, const ModelConfig& mc, bool augment_poses, std::uint64_t seed) {
    Rng rng(seed);
    const QuerySet& q = it.queries;
    std::vector<Mat3> rot(static_cast<std::size_t>(q.k()), Mat3::Identity());
    if (augment_poses)
        for (int i = 0; i < q.k(); ++i)
            if (i != q.anchor) rot[i] = random_rotation(rng);
    const QuerySet posed = augment_poses ? rotate_queries(q, rot) : q;

    StepInputs<T> s;
    s.cond = make_condition_inputs(posed, it.local_tokens, mc.bands, part_permutation(q.k(), mc.max_parts, rng()));
    const T t = static_cast<T>(1.0 - uniform01(rng)); // (0, 1]
    MatT<T> x0 = it.x0.template cast<T>();
    MatT<T> x1(x0.rows(), 3);
    for (Eigen::Index m = 0; m < x1.rows(); ++m) {
        if (s.cond.anchor_mask[m]) {
            x1.row(m) = x0.row(m);
        } else {
            for (int a = 0; a < 3; ++a) x1(m, a) = static_cast<T>(gaussian(rng));
        }
    }
    s.batch = interpolate<T>(x0, x1, t);
    return s;
}

using StepCallback = std::function<void(const StepRecord&)>;
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Single-object steps over a seeded per-epoch shuffle. Returns per-epoch
/// mean losses; `on_step` sees every step's breakdown.
template <class T>
std::vector<EpochRecord> train(Params<T>& params, const std::vector<TrainingItem>& items, const TrainConfig& cfg,
                               const StepCallback& on_step = {}, const EpochCallback& on_epoch = {}) {
    if (items.empty()) throw InvalidArgument("train: empty dataset");
    if (cfg.epochs < 0 || !(cfg.lr >= 0.0)) throw InvalidArgument("train: epochs and lr must be non-negative");
    AdamW<T> opt(params, cfg);
    std::vector<EpochRecord> curve;
    const std::size_t total_steps = static_cast<std::size_t>(cfg.epochs) * items.size();
    std::size_t step = 0;
    std::vector<std::size_t> order(items.size());
    for (int e = 1; e <= cfg.epochs; ++e) {
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(cfg.seed, "epoch", static_cast<std::uint64_t>(e)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochRecord rec;
        rec.epoch = e;
        for (std::size_t idx : order) {
            auto in = draw_step<T>(items[idx], params.config(), cfg.augment, derive_seed(cfg.seed, "step", step));
            GradientResult<T> r;
            try {
                r = loss_and_gradient(params, in.batch, in.cond, items[idx].target, cfg.weights);
            } catch (const NumericError& err) {
                throw TrainingDiverged(e, std::string("non-finite values during training: ") + err.what());
            }
            if (!(r.loss.total <= cfg.divergence_threshold))
                throw TrainingDiverged(e, "total loss " + std::to_string(r.loss.total) + " exceeds divergence threshold");
            opt.step(params, r.grad, scheduled_lr(cfg, step, total_steps));
            if (on_step) on_step({e, step, r.loss});
            rec.l_rf += r.loss.l_rf;
            rec.l_f += r.loss.l_f;
            rec.l_a += r.loss.l_a;
            rec.total += r.loss.total;
            ++step;
        }
        const auto n = static_cast<double>(items.size());
        rec.l_rf /= n;
        rec.l_f /= n;
        rec.l_a /= n;
        rec.total /= n;
        curve.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    return curve;
}

} // namespace sare::flow
