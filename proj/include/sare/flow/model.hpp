#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sare/cond/queries.hpp"
#include "sare/flow/params.hpp"

namespace sare::flow {

// ---------------------------------------------------------------------------
// Elementwise pieces

namespace nn {

template <class T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <class T>
T silu(T x) {
    return x * sigmoid(x);
}

template <class T>
T silu_grad(T x) {
    T s = sigmoid(x);
    return s * (T(1) + x * (T(1) - s));
}

inline constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)

template <class T>
MatT<T> gelu(const MatT<T>& x) {
    const T c = static_cast<T>(kGeluC), a = static_cast<T>(0.044715);
    return (T(0.5) * x.array() * (T(1) + (c * (x.array() + a * x.array().cube())).tanh())).matrix();
}

template <class T>
MatT<T> gelu_grad(const MatT<T>& x) {
    const T c = static_cast<T>(kGeluC), a = static_cast<T>(0.044715);
    auto th = (c * (x.array() + a * x.array().cube())).tanh().eval();
    return (T(0.5) * (T(1) + th) +
            T(0.5) * x.array() * (T(1) - th.square()) * c * (T(1) + T(3) * a * x.array().square()))
        .matrix();
}

/// Y = X W^T + b
template <class T, class W, class B>
MatT<T> linear(const MatT<T>& x, const W& w, const B& b) {
    MatT<T> y = x * w.transpose();
    y.rowwise() += b.col(0).transpose();
    return y;
}

/// Accumulates dW and db; writes dX when requested.
template <class T, class W>
void linear_backward(const MatT<T>& x, const MatT<T>& dy, const W& w, Eigen::Map<MatT<T>> dw, Eigen::Map<MatT<T>> db,
                     MatT<T>* dx) {
    dw.noalias() += dy.transpose() * x;
    db.col(0) += dy.colwise().sum().transpose();
    if (dx) dx->noalias() = dy * w;
}

inline constexpr double kLayerNormEps = 1e-6;

/// Row-wise layer norm without affine parameters; `inv_std` receives 1/sigma.
template <class T>
MatT<T> layer_norm(const MatT<T>& x, VecT<T>& inv_std) {
    const auto d = static_cast<T>(x.cols());
    VecT<T> mean = x.rowwise().sum() / d;
    MatT<T> y = x.colwise() - mean;
    VecT<T> var = y.array().square().rowwise().sum() / d;
    inv_std = (var.array() + static_cast<T>(kLayerNormEps)).rsqrt();
    y = y.array().colwise() * inv_std.array();
    return y;
}

template <class T>
MatT<T> layer_norm_backward(const MatT<T>& y, const VecT<T>& inv_std, const MatT<T>& dy) {
    const auto d = static_cast<T>(y.cols());
    VecT<T> mdy = dy.rowwise().sum() / d;
    VecT<T> mdyy = (dy.array() * y.array()).rowwise().sum() / d;
    MatT<T> dx = dy.colwise() - mdy;
    dx -= (y.array().colwise() * mdyy.array()).matrix();
    return dx.array().colwise() * inv_std.array();
}

/// Numerically stable binary cross-entropy on a logit.
inline double bce_with_logit(double x, double y) {
    return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
}

} // namespace nn

// ---------------------------------------------------------------------------
// Conditioning tokens

/// c_m = proj([z; gamma(q); gamma(n)]) + part_embed[part_index[frag(m)]] (+ anchor_embed on anchor tokens).
template <class T>
MatT<T> build_conditions(const Params<T>& p, const ConditionInputs& cond) {
    const Layout& L = p.layout();
    if (cond.features.cols() != p[L.phi_w].cols())
        throw InvalidArgument("build_conditions: feature width " + std::to_string(cond.features.cols()) +
                              " does not match projection input " + std::to_string(p[L.phi_w].cols()));
    if (cond.fragment_of.size() != static_cast<std::size_t>(cond.features.rows()) ||
        cond.anchor_mask.size() != cond.fragment_of.size())
        throw InvalidArgument("build_conditions: token bookkeeping size mismatch");
    MatT<T> f = cond.features.template cast<T>();
    MatT<T> c = nn::linear<T>(f, p[L.phi_w], p[L.phi_b]);
    auto table = p[L.part_embed];
    auto anchor = p[L.anchor_embed];
    for (Eigen::Index m = 0; m < c.rows(); ++m) {
        int part = cond.part_index.at(cond.fragment_of[m]);
        if (part < 0 || part >= table.rows()) throw InvalidArgument("build_conditions: part index out of range");
        c.row(m) += table.row(part);
        if (cond.anchor_mask[m]) c.row(m) += anchor.col(0).transpose();
    }
    return c;
}

// ---------------------------------------------------------------------------
// Forward

template <class T>
struct BlockTape {
    MatT<T> h_in, n1, a1, qkv, o, att, h_mid, n2, a2, u2, g2, m;
    VecT<T> inv1, inv2;
    std::vector<MatT<T>> probs; ///< per head, M x M
    VecT<T> mod;                ///< 6D modulation vector
};

template <class T>
struct HeadTape {
    MatT<T> hn, fu, fg;          // fracture head
    VecT<T> inv;
    MatT<T> pooled, pin, au, ag; // adjacency head (ordered pairs)
    std::vector<std::pair<int, int>> pairs;
    std::vector<T> counts;
};

template <class T>
struct Tape {
    MatT<T> features, xe, h0;
    VecT<T> tf, tu1, ta1, temb, s;
    std::vector<BlockTape<T>> blocks;
    MatT<T> nf, final_in;
    VecT<T> inv_f, final_mod;
    HeadTape<T> heads;
};

template <class T>
struct Outputs {
    MatT<T> velocity;         ///< M x 3, before the anchor clamp
    MatT<T> hidden;           ///< M x D after block structural_layer
    VecT<T> fracture_logits;  ///< M (empty when the head is off)
    MatT<T> adjacency_logits; ///< K x K symmetric, zero diagonal (empty when off)
};

/// [x, gamma(x)] with `bands` sinusoid bands (no half-period: x_t is unbounded).
template <class T>
MatT<T> encode_state(const MatT<T>& x, int bands) {
    MatT<T> out(x.rows(), 3 + 6 * bands);
    out.leftCols(3) = x;
    for (int a = 0; a < 3; ++a) {
        T w = static_cast<T>(std::numbers::pi / 2.0);
        for (int j = 0; j < bands; ++j, w *= T(2)) {
            out.col(3 + a * 2 * bands + 2 * j) = (w * x.col(a).array()).sin().matrix();
            out.col(3 + a * 2 * bands + 2 * j + 1) = (w * x.col(a).array()).cos().matrix();
        }
    }
    return out;
}

template <class T>
VecT<T> timestep_features(T t, int freqs) {
    VecT<T> f(2 * freqs);
    for (int k = 0; k < freqs; ++k) {
        double w = std::exp(-std::log(10000.0) * k / freqs);
        double arg = 1000.0 * static_cast<double>(t) * w;
        f(k) = static_cast<T>(std::cos(arg));
        f(freqs + k) = static_cast<T>(std::sin(arg));
    }
    return f;
}

namespace detail {

template <class T>
void check_finite(const MatT<T>& m, const char* what) {
    if (!m.allFinite()) throw NumericError(std::string("forward: non-finite ") + what);
}

/// Fracture and adjacency logits from the structural-layer hidden state.
template <class T>
void run_heads(const Params<T>& p, const MatT<T>& hidden, const std::vector<int>& fragment_of, int k,
               HeadTape<T>& tp, Outputs<T>& out) {
    const Layout& L = p.layout();
    const auto& cfg = p.config();
    if (!cfg.fracture_head && !cfg.adjacency_head) return;
    tp.hn = nn::layer_norm<T>(hidden, tp.inv);
    if (cfg.fracture_head) {
        tp.fu = nn::linear<T>(tp.hn, p[L.frac_w1], p[L.frac_b1]);
        tp.fg = nn::gelu<T>(tp.fu);
        out.fracture_logits = nn::linear<T>(tp.fg, p[L.frac_w2], p[L.frac_b2]).col(0);
    }
    if (cfg.adjacency_head) {
        const int d = static_cast<int>(hidden.cols());
        tp.pooled = MatT<T>::Zero(k, d);
        tp.counts.assign(k, T(0));
        for (Eigen::Index m = 0; m < hidden.rows(); ++m) {
            tp.pooled.row(fragment_of[m]) += tp.hn.row(m);
            tp.counts[fragment_of[m]] += T(1);
        }
        for (int i = 0; i < k; ++i) tp.pooled.row(i) /= std::max(tp.counts[i], T(1));
        tp.pairs.clear();
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j)
                if (i != j) tp.pairs.emplace_back(i, j);
        tp.pin.resize(static_cast<Eigen::Index>(tp.pairs.size()), 3 * d);
        for (std::size_t r = 0; r < tp.pairs.size(); ++r) {
            auto [i, j] = tp.pairs[r];
            auto row = static_cast<Eigen::Index>(r);
            tp.pin.row(row).segment(0, d) = tp.pooled.row(i);
            tp.pin.row(row).segment(d, d) = tp.pooled.row(j);
            tp.pin.row(row).segment(2 * d, d) = tp.pooled.row(i).cwiseProduct(tp.pooled.row(j));
        }
        tp.au = nn::linear<T>(tp.pin, p[L.adj_w1], p[L.adj_b1]);
        tp.ag = nn::gelu<T>(tp.au);
        VecT<T> score = nn::linear<T>(tp.ag, p[L.adj_w2], p[L.adj_b2]).col(0);
        out.adjacency_logits = MatT<T>::Zero(k, k);
        for (std::size_t r = 0; r < tp.pairs.size(); ++r) {
            auto [i, j] = tp.pairs[r];
            out.adjacency_logits(i, j) += T(0.5) * score(static_cast<Eigen::Index>(r));
            out.adjacency_logits(j, i) += T(0.5) * score(static_cast<Eigen::Index>(r));
        }
    }
}

} // namespace detail

/// Structural heads on a hidden state; A logits are (s_ij + s_ji) / 2.
template <class T>
Outputs<T> structural_heads(const Params<T>& p, const MatT<T>& hidden, const std::vector<int>& fragment_of, int k) {
    HeadTape<T> tp;
    Outputs<T> out;
    detail::run_heads(p, hidden, fragment_of, k, tp, out);
    return out;
}

/// Velocity field v(x_t, t | C) plus the structural-layer hidden state and
/// head logits. Pass a tape to enable `backward`.
template <class T>
Outputs<T> forward(const Params<T>& p, const MatT<T>& x_t, T t, const ConditionInputs& cond, Tape<T>* tape = nullptr) {
    const Layout& L = p.layout();
    const ModelConfig& cfg = p.config();
    const auto m_tokens = static_cast<Eigen::Index>(cond.tokens());
    if (x_t.rows() != m_tokens || x_t.cols() != 3) throw InvalidArgument("forward: x_t must be M x 3");
    if (!x_t.allFinite() || !std::isfinite(static_cast<double>(t))) throw NumericError("forward: non-finite input");

    Tape<T> local;
    Tape<T>& tp = tape ? *tape : local;
    const int d = cfg.width, heads = cfg.heads, dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    // timestep embedding
    tp.tf = timestep_features<T>(t, cfg.time_freqs);
    tp.tu1 = p[L.t_w1] * tp.tf + p[L.t_b1].col(0);
    tp.ta1 = tp.tu1.unaryExpr([](T v) { return nn::silu(v); });
    tp.temb = p[L.t_w2] * tp.ta1 + p[L.t_b2].col(0);
    tp.s = tp.temb.unaryExpr([](T v) { return nn::silu(v); });

    MatT<T> h = build_conditions(p, cond);
    tp.xe = encode_state<T>(x_t, cfg.x_bands);
    h += nn::linear<T>(tp.xe, p[L.x_w], p[L.x_b]);
    h.rowwise() += tp.temb.transpose();
    if (tape) tp.h0 = h;

    Outputs<T> out;
    tp.blocks.resize(cfg.blocks);
    for (int b = 0; b < cfg.blocks; ++b) {
        const BlockIds& ids = L.block[b];
        BlockTape<T>& bt = tp.blocks[b];
        bt.mod = p[ids.mod_w] * tp.s + p[ids.mod_b].col(0);
        auto shift1 = bt.mod.segment(0, d), scale1 = bt.mod.segment(d, d), gate1 = bt.mod.segment(2 * d, d);
        auto shift2 = bt.mod.segment(3 * d, d), scale2 = bt.mod.segment(4 * d, d), gate2 = bt.mod.segment(5 * d, d);

        if (tape) bt.h_in = h;
        bt.n1 = nn::layer_norm<T>(h, bt.inv1);
        bt.a1 = (bt.n1.array().rowwise() * (T(1) + scale1.array()).transpose()).matrix();
        bt.a1.rowwise() += shift1.transpose();
        bt.qkv = nn::linear<T>(bt.a1, p[ids.qkv_w], p[ids.qkv_b]);
        bt.o.resize(m_tokens, d);
        bt.probs.resize(heads);
        for (int hd = 0; hd < heads; ++hd) {
            auto q = bt.qkv.middleCols(hd * dh, dh);
            auto kk = bt.qkv.middleCols(d + hd * dh, dh);
            auto v = bt.qkv.middleCols(2 * d + hd * dh, dh);
            MatT<T>& pr = bt.probs[hd];
            pr.noalias() = (q * kk.transpose()) * scale;
            VecT<T> mx = pr.rowwise().maxCoeff();
            pr = (pr.colwise() - mx).array().exp().matrix();
            VecT<T> sum = pr.rowwise().sum();
            pr = pr.array().colwise() / sum.array();
            bt.o.middleCols(hd * dh, dh).noalias() = pr * v;
        }
        bt.att = nn::linear<T>(bt.o, p[ids.out_w], p[ids.out_b]);
        h += (bt.att.array().rowwise() * gate1.array().transpose()).matrix();

        if (tape) bt.h_mid = h;
        bt.n2 = nn::layer_norm<T>(h, bt.inv2);
        bt.a2 = (bt.n2.array().rowwise() * (T(1) + scale2.array()).transpose()).matrix();
        bt.a2.rowwise() += shift2.transpose();
        bt.u2 = nn::linear<T>(bt.a2, p[ids.fc1_w], p[ids.fc1_b]);
        bt.g2 = nn::gelu<T>(bt.u2);
        bt.m = nn::linear<T>(bt.g2, p[ids.fc2_w], p[ids.fc2_b]);
        h += (bt.m.array().rowwise() * gate2.array().transpose()).matrix();

        if (b + 1 == cfg.structural_layer) out.hidden = h;
        if (!tape) bt = BlockTape<T>{};
    }

    tp.final_mod = p[L.final_mod_w] * tp.s + p[L.final_mod_b].col(0);
    auto fshift = tp.final_mod.segment(0, d), fscale = tp.final_mod.segment(d, d);
    tp.nf = nn::layer_norm<T>(h, tp.inv_f);
    tp.final_in = (tp.nf.array().rowwise() * (T(1) + fscale.array()).transpose()).matrix();
    tp.final_in.rowwise() += fshift.transpose();
    out.velocity = nn::linear<T>(tp.final_in, p[L.head_w], p[L.head_b]);
    detail::check_finite(out.velocity, "velocity");

    detail::run_heads(p, out.hidden, cond.fragment_of, cond.k(), tp.heads, out);
    return out;
}

/// Zero the predicted velocity of anchor tokens.
template <class T>
void clamp_anchor(MatT<T>& v, const std::vector<std::uint8_t>& anchor_mask) {
    for (Eigen::Index m = 0; m < v.rows(); ++m)
        if (anchor_mask[m]) v.row(m).setZero();
}

// ---------------------------------------------------------------------------
// Flow batch and loss

template <class T>
struct FlowBatch {
    MatT<T> x0, x1, x_t, v_t;
    T t{};
};

template <class T>
FlowBatch<T> interpolate(const MatT<T>& x0, const MatT<T>& x1, T t) {
    if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) throw InvalidArgument("interpolate: shape mismatch");
    if (!(t > T(0) && t <= T(1))) throw InvalidArgument("interpolate: t must lie in (0, 1]");
    FlowBatch<T> b;
    b.x0 = x0;
    b.x1 = x1;
    b.t = t;
    b.x_t = (T(1) - t) * x0 + t * x1;
    b.v_t = x1 - x0;
    return b;
}

struct LossBreakdown {
    double l_rf = 0.0;
    double l_f = 0.0;
    double l_a = 0.0;
    double lambda_f = 0.01;
    double lambda_a = 0.01;
    double total = 0.0;
};

struct LossWeights {
    double lambda_f = 0.01;
    double lambda_a = 0.01;
};

/// Structural supervision for one object.
struct StructureTargets {
    std::vector<std::uint8_t> fracture; ///< per token
    AdjacencyMatrix adjacency;          ///< K x K
};

/// l_rf: MSE over non-anchor tokens after the anchor clamp; l_F, l_A: mean
/// BCE over tokens and over unordered fragment pairs.
template <class T>
LossBreakdown total_loss(const Outputs<T>& out, const FlowBatch<T>& batch, const StructureTargets& target,
                         const std::vector<std::uint8_t>& anchor_mask, const LossWeights& w) {
    LossBreakdown lb;
    lb.lambda_f = w.lambda_f;
    lb.lambda_a = w.lambda_a;
    double acc = 0.0;
    std::size_t n = 0;
    for (Eigen::Index m = 0; m < batch.v_t.rows(); ++m) {
        if (anchor_mask[m]) continue;
        for (int a = 0; a < 3; ++a) {
            double r = static_cast<double>(out.velocity(m, a)) - static_cast<double>(batch.v_t(m, a));
            acc += r * r;
        }
        n += 3;
    }
    lb.l_rf = n ? acc / static_cast<double>(n) : 0.0;
    if (out.fracture_logits.size() > 0) {
        double s = 0.0;
        for (Eigen::Index m = 0; m < out.fracture_logits.size(); ++m)
            s += nn::bce_with_logit(static_cast<double>(out.fracture_logits(m)), target.fracture[m]);
        lb.l_f = s / static_cast<double>(out.fracture_logits.size());
    }
    if (out.adjacency_logits.size() > 0) {
        double s = 0.0;
        std::size_t pairs = 0;
        for (Eigen::Index i = 0; i < out.adjacency_logits.rows(); ++i)
            for (Eigen::Index j = i + 1; j < out.adjacency_logits.cols(); ++j, ++pairs)
                s += nn::bce_with_logit(static_cast<double>(out.adjacency_logits(i, j)), target.adjacency(i, j));
        lb.l_a = pairs ? s / static_cast<double>(pairs) : 0.0;
    }
    lb.total = lb.l_rf + lb.lambda_f * lb.l_f + lb.lambda_a * lb.l_a;
    return lb;
}

// ---------------------------------------------------------------------------
// Backward

namespace detail {

/// Gradient of the weighted structural losses with respect to the hidden
/// state the heads read (before their layer norm).
template <class T>
MatT<T> head_backward(const Params<T>& p, const Outputs<T>& out, const HeadTape<T>& tp,
                      const std::vector<int>& fragment_of, const StructureTargets& target, const LossWeights& w,
                      Params<T>& g) {
    const Layout& L = p.layout();
    const auto& cfg = p.config();
    const Eigen::Index m_tokens = tp.hn.rows(), d = tp.hn.cols();
    MatT<T> dhn = MatT<T>::Zero(m_tokens, d);
    if (cfg.fracture_head) {
        MatT<T> df(m_tokens, 1);
        const double coef = w.lambda_f / static_cast<double>(m_tokens);
        for (Eigen::Index m = 0; m < m_tokens; ++m)
            df(m, 0) = static_cast<T>(
                coef * (nn::sigmoid(static_cast<double>(out.fracture_logits(m))) - target.fracture[m]));
        MatT<T> dfg, dx;
        nn::linear_backward<T>(tp.fg, df, p[L.frac_w2], g[L.frac_w2], g[L.frac_b2], &dfg);
        MatT<T> dfu = (dfg.array() * nn::gelu_grad<T>(tp.fu).array()).matrix();
        nn::linear_backward<T>(tp.hn, dfu, p[L.frac_w1], g[L.frac_w1], g[L.frac_b1], &dx);
        dhn += dx;
    }
    if (cfg.adjacency_head) {
        const auto k = tp.pooled.rows();
        const double pairs = static_cast<double>(k * (k - 1)) / 2.0;
        MatT<T> ds(static_cast<Eigen::Index>(tp.pairs.size()), 1);
        for (std::size_t r = 0; r < tp.pairs.size(); ++r) {
            auto [i, j] = tp.pairs[r];
            const int a = std::min(i, j), b = std::max(i, j);
            const double dl =
                w.lambda_a / pairs * (nn::sigmoid(static_cast<double>(out.adjacency_logits(a, b))) - target.adjacency(a, b));
            ds(static_cast<Eigen::Index>(r), 0) = static_cast<T>(0.5 * dl);
        }
        MatT<T> dag, dpin;
        nn::linear_backward<T>(tp.ag, ds, p[L.adj_w2], g[L.adj_w2], g[L.adj_b2], &dag);
        MatT<T> dau = (dag.array() * nn::gelu_grad<T>(tp.au).array()).matrix();
        nn::linear_backward<T>(tp.pin, dau, p[L.adj_w1], g[L.adj_w1], g[L.adj_b1], &dpin);
        MatT<T> dpool = MatT<T>::Zero(k, d);
        for (std::size_t r = 0; r < tp.pairs.size(); ++r) {
            auto [i, j] = tp.pairs[r];
            auto row = dpin.row(static_cast<Eigen::Index>(r));
            dpool.row(i) += row.segment(0, d) + row.segment(2 * d, d).cwiseProduct(tp.pooled.row(j));
            dpool.row(j) += row.segment(d, d) + row.segment(2 * d, d).cwiseProduct(tp.pooled.row(i));
        }
        for (Eigen::Index m = 0; m < m_tokens; ++m) {
            const int f = fragment_of[m];
            dhn.row(m) += dpool.row(f) / std::max(tp.counts[f], T(1));
        }
    }
    return nn::layer_norm_backward<T>(tp.hn, tp.inv, dhn);
}

/// Backward through the adaLN modulation. Writes dshift and dscale, and dn for the normalised input.
template <class T>
void modulation_backward(const MatT<T>& n, const MatT<T>& da, const VecT<T>& scale, Eigen::Ref<VecT<T>> dshift,
                         Eigen::Ref<VecT<T>> dscale, MatT<T>& dn) {
    dshift = da.colwise().sum().transpose();
    dscale = (da.array() * n.array()).colwise().sum().transpose();
    dn = (da.array().rowwise() * (T(1) + scale.array()).transpose()).matrix();
}

} // namespace detail

/// Reverse pass for one forward call recorded in `tape`. Accumulates into a
/// fresh gradient with the same layout as `p`.
template <class T>
Params<T> backward(const Params<T>& p, const Tape<T>& tp, const Outputs<T>& out, const FlowBatch<T>& batch,
                   const ConditionInputs& cond, const StructureTargets& target, const LossWeights& w) {
    const Layout& L = p.layout();
    const ModelConfig& cfg = p.config();
    const int d = cfg.width, heads = cfg.heads, dh_ = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh_));
    const Eigen::Index m_tokens = out.velocity.rows();
    Params<T> g = p.zeros_like();

    // velocity MSE over non-anchor tokens
    std::size_t n = 0;
    for (auto a : cond.anchor_mask) n += a ? 0 : 3;
    MatT<T> dv = MatT<T>::Zero(m_tokens, 3);
    if (n > 0) {
        const T coef = static_cast<T>(2.0 / static_cast<double>(n));
        for (Eigen::Index m = 0; m < m_tokens; ++m)
            if (!cond.anchor_mask[m]) dv.row(m) = coef * (out.velocity.row(m) - batch.v_t.row(m));
    }

    VecT<T> ds = VecT<T>::Zero(d);
    MatT<T> dfin;
    nn::linear_backward<T>(tp.final_in, dv, p[L.head_w], g[L.head_w], g[L.head_b], &dfin);
    VecT<T> dfmod(2 * d);
    MatT<T> dnf;
    detail::modulation_backward<T>(tp.nf, dfin, tp.final_mod.segment(d, d), dfmod.segment(0, d), dfmod.segment(d, d),
                                   dnf);
    g[L.final_mod_w].noalias() += dfmod * tp.s.transpose();
    g[L.final_mod_b].col(0) += dfmod;
    ds.noalias() += p[L.final_mod_w].transpose() * dfmod;
    MatT<T> dh = nn::layer_norm_backward<T>(tp.nf, tp.inv_f, dnf);

    MatT<T> dhead;
    if (cfg.fracture_head || cfg.adjacency_head)
        dhead = detail::head_backward(p, out, tp.heads, cond.fragment_of, target, w, g);

    for (int b = cfg.blocks - 1; b >= 0; --b) {
        if (b + 1 == cfg.structural_layer && dhead.size() > 0) dh += dhead;
        const BlockIds& ids = L.block[b];
        const BlockTape<T>& bt = tp.blocks[b];
        VecT<T> dmod(6 * d);
        const VecT<T> scale1 = bt.mod.segment(d, d), gate1 = bt.mod.segment(2 * d, d);
        const VecT<T> scale2 = bt.mod.segment(4 * d, d), gate2 = bt.mod.segment(5 * d, d);

        // MLP branch
        dmod.segment(5 * d, d) = (dh.array() * bt.m.array()).colwise().sum().transpose();
        MatT<T> dm = (dh.array().rowwise() * gate2.array().transpose()).matrix();
        MatT<T> dg2, da2, dn2;
        nn::linear_backward<T>(bt.g2, dm, p[ids.fc2_w], g[ids.fc2_w], g[ids.fc2_b], &dg2);
        MatT<T> du2 = (dg2.array() * nn::gelu_grad<T>(bt.u2).array()).matrix();
        nn::linear_backward<T>(bt.a2, du2, p[ids.fc1_w], g[ids.fc1_w], g[ids.fc1_b], &da2);
        detail::modulation_backward<T>(bt.n2, da2, scale2, dmod.segment(3 * d, d), dmod.segment(4 * d, d), dn2);
        dh += nn::layer_norm_backward<T>(bt.n2, bt.inv2, dn2);

        // attention branch
        dmod.segment(2 * d, d) = (dh.array() * bt.att.array()).colwise().sum().transpose();
        MatT<T> datt = (dh.array().rowwise() * gate1.array().transpose()).matrix();
        MatT<T> dout;
        nn::linear_backward<T>(bt.o, datt, p[ids.out_w], g[ids.out_w], g[ids.out_b], &dout);
        MatT<T> dqkv(m_tokens, 3 * d);
        for (int hd = 0; hd < heads; ++hd) {
            auto q = bt.qkv.middleCols(hd * dh_, dh_);
            auto kk = bt.qkv.middleCols(d + hd * dh_, dh_);
            auto v = bt.qkv.middleCols(2 * d + hd * dh_, dh_);
            const MatT<T>& pr = bt.probs[hd];
            auto dout_h = dout.middleCols(hd * dh_, dh_);
            MatT<T> dp = dout_h * v.transpose();
            dqkv.middleCols(2 * d + hd * dh_, dh_).noalias() = pr.transpose() * dout_h;
            VecT<T> rs = (dp.array() * pr.array()).rowwise().sum();
            MatT<T> dsc = (pr.array() * (dp.colwise() - rs).array()).matrix() * scale;
            dqkv.middleCols(hd * dh_, dh_).noalias() = dsc * kk;
            dqkv.middleCols(d + hd * dh_, dh_).noalias() = dsc.transpose() * q;
        }
        MatT<T> da1, dn1;
        nn::linear_backward<T>(bt.a1, dqkv, p[ids.qkv_w], g[ids.qkv_w], g[ids.qkv_b], &da1);
        detail::modulation_backward<T>(bt.n1, da1, scale1, dmod.segment(0, d), dmod.segment(d, d), dn1);
        dh += nn::layer_norm_backward<T>(bt.n1, bt.inv1, dn1);

        g[ids.mod_w].noalias() += dmod * tp.s.transpose();
        g[ids.mod_b].col(0) += dmod;
        ds.noalias() += p[ids.mod_w].transpose() * dmod;
    }

    // route the token gradient back into each input that fed the first block
    MatT<T> features = cond.features.template cast<T>();
    nn::linear_backward<T>(features, dh, p[L.phi_w], g[L.phi_w], g[L.phi_b], nullptr);
    nn::linear_backward<T>(tp.xe, dh, p[L.x_w], g[L.x_w], g[L.x_b], nullptr);
    auto gpart = g[L.part_embed];
    auto ganchor = g[L.anchor_embed];
    for (Eigen::Index m = 0; m < m_tokens; ++m) {
        gpart.row(cond.part_index[cond.fragment_of[m]]) += dh.row(m);
        if (cond.anchor_mask[m]) ganchor.col(0) += dh.row(m).transpose();
    }
    VecT<T> dtemb = dh.colwise().sum().transpose();
    dtemb.array() += ds.array() * tp.temb.unaryExpr([](T v) { return nn::silu_grad(v); }).array();
    g[L.t_w2].noalias() += dtemb * tp.ta1.transpose();
    g[L.t_b2].col(0) += dtemb;
    VecT<T> dtu1 = (p[L.t_w2].transpose() * dtemb).array() * tp.tu1.unaryExpr([](T v) { return nn::silu_grad(v); }).array();
    g[L.t_w1].noalias() += dtu1 * tp.tf.transpose();
    g[L.t_b1].col(0) += dtu1;
    return g;
}

template <class T>
struct GradientResult {
    Params<T> grad;
    LossBreakdown loss;
    Outputs<T> outputs;
};

/// Runs the batch forward and back and returns the loss with its gradient. A non-finite gradient
/// entry raises NumericError naming the parameter.
template <class T>
GradientResult<T> loss_and_gradient(const Params<T>& p, const FlowBatch<T>& batch, const ConditionInputs& cond,
                                    const StructureTargets& target, const LossWeights& w) {
    Tape<T> tape;
    GradientResult<T> r;
    r.outputs = forward(p, batch.x_t, batch.t, cond, &tape);
    r.loss = total_loss(r.outputs, batch, target, cond.anchor_mask, w);
    if (!std::isfinite(r.loss.total)) throw NumericError("loss is not finite");
    r.grad = backward(p, tape, r.outputs, batch, cond, target, w);
    const auto& gd = r.grad.data();
    for (std::size_t i = 0; i < gd.size(); ++i)
        if (!std::isfinite(static_cast<double>(gd[i])))
            throw NumericError("non-finite gradient at " + r.grad.path_of(i));
    return r;
}

} // namespace sare::flow
