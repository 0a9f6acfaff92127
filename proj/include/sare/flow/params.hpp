#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sare/cond/encoding.hpp"
#include "sare/error.hpp"
#include "sare/random.hpp"

namespace sare::flow {

template <class T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using VecT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
    int blocks = 4;
    int width = 128;
    int heads = 4;
    int structural_layer = 4; ///< 1-based block whose output feeds the structural heads
    int mlp_ratio = 4;
    int head_hidden = 64;
    int bands = kDefaultBands;
    int x_bands = 4;      ///< Fourier bands of the x_t encoding
    int time_freqs = 16;  ///< sinusoid pairs of the timestep embedding
    int max_parts = 50;   ///< part-embedding table size
    int token_dim = kLocalTokenDim;
    bool fracture_head = true;
    bool adjacency_head = true;

    int condition_features() const { return token_dim + 2 * 6 * bands; }
    int x_features() const { return 3 + 6 * x_bands; }

    void check() const {
        if (blocks < 1 || width < 1 || heads < 1 || width % heads != 0)
            throw InvalidArgument("ModelConfig: width must be a positive multiple of heads");
        if (structural_layer < 1 || structural_layer > blocks)
            throw InvalidArgument("ModelConfig: structural_layer must be in [1, blocks]");
        if (mlp_ratio < 1 || head_hidden < 1 || bands < 1 || x_bands < 0 || time_freqs < 1 || max_parts < 2)
            throw InvalidArgument("ModelConfig: non-positive size");
    }
};

struct TensorSpec {
    std::string name;
    std::size_t offset = 0;
    int rows = 0;
    int cols = 0;
    bool decay = false; ///< subject to weight decay
};

struct BlockIds {
    std::size_t mod_w, mod_b, qkv_w, qkv_b, out_w, out_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Named slices of one flat parameter vector.
struct Layout {
    ModelConfig config;
    std::vector<TensorSpec> specs;
    std::size_t total = 0;

    std::size_t phi_w, phi_b, part_embed, anchor_embed, x_w, x_b;
    std::size_t t_w1, t_b1, t_w2, t_b2;
    std::vector<BlockIds> block;
    std::size_t final_mod_w, final_mod_b, head_w, head_b;
    std::size_t frac_w1, frac_b1, frac_w2, frac_b2;
    std::size_t adj_w1, adj_b1, adj_w2, adj_b2;

    explicit Layout(const ModelConfig& c) : config(c) {
        c.check();
        const int d = c.width, f = c.mlp_ratio * c.width, hh = c.head_hidden;
        phi_w = add("cond.proj.weight", d, c.condition_features(), true);
        phi_b = add("cond.proj.bias", d, 1);
        part_embed = add("cond.part_embed", c.max_parts, d);
        anchor_embed = add("cond.anchor_embed", d, 1);
        x_w = add("xenc.weight", d, c.x_features(), true);
        x_b = add("xenc.bias", d, 1);
        t_w1 = add("time.fc1.weight", d, 2 * c.time_freqs, true);
        t_b1 = add("time.fc1.bias", d, 1);
        t_w2 = add("time.fc2.weight", d, d, true);
        t_b2 = add("time.fc2.bias", d, 1);
        for (int b = 0; b < c.blocks; ++b) {
            const std::string p = "blocks." + std::to_string(b) + ".";
            BlockIds ids{};
            ids.mod_w = add(p + "mod.weight", 6 * d, d, true);
            ids.mod_b = add(p + "mod.bias", 6 * d, 1);
            ids.qkv_w = add(p + "attn.qkv.weight", 3 * d, d, true);
            ids.qkv_b = add(p + "attn.qkv.bias", 3 * d, 1);
            ids.out_w = add(p + "attn.out.weight", d, d, true);
            ids.out_b = add(p + "attn.out.bias", d, 1);
            ids.fc1_w = add(p + "mlp.fc1.weight", f, d, true);
            ids.fc1_b = add(p + "mlp.fc1.bias", f, 1);
            ids.fc2_w = add(p + "mlp.fc2.weight", d, f, true);
            ids.fc2_b = add(p + "mlp.fc2.bias", d, 1);
            block.push_back(ids);
        }
        final_mod_w = add("final.mod.weight", 2 * d, d, true);
        final_mod_b = add("final.mod.bias", 2 * d, 1);
        head_w = add("final.velocity.weight", 3, d, true);
        head_b = add("final.velocity.bias", 3, 1);
        frac_w1 = add("heads.fracture.fc1.weight", hh, d, true);
        frac_b1 = add("heads.fracture.fc1.bias", hh, 1);
        frac_w2 = add("heads.fracture.fc2.weight", 1, hh, true);
        frac_b2 = add("heads.fracture.fc2.bias", 1, 1);
        adj_w1 = add("heads.adjacency.fc1.weight", hh, 3 * d, true);
        adj_b1 = add("heads.adjacency.fc1.bias", hh, 1);
        adj_w2 = add("heads.adjacency.fc2.weight", 1, hh, true);
        adj_b2 = add("heads.adjacency.fc2.bias", 1, 1);
    }

private:
    std::size_t add(std::string name, int rows, int cols, bool decay = false) {
        specs.push_back({std::move(name), total, rows, cols, decay});
        total += static_cast<std::size_t>(rows) * cols;
        return specs.size() - 1;
    }
};

/// Flat parameter (or gradient) vector viewed through a shared Layout.
template <class T>
class Params {
public:
    Params() = default;
    explicit Params(std::shared_ptr<const Layout> layout)
        : layout_(std::move(layout)), data_(layout_->total, T(0)) {}

    const Layout& layout() const { return *layout_; }
    std::shared_ptr<const Layout> layout_ptr() const { return layout_; }
    const ModelConfig& config() const { return layout_->config; }

    std::vector<T>& data() noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }

    Eigen::Map<MatT<T>> operator[](std::size_t id) {
        const auto& s = layout_->specs[id];
        return {data_.data() + s.offset, s.rows, s.cols};
    }
    Eigen::Map<const MatT<T>> operator[](std::size_t id) const {
        const auto& s = layout_->specs[id];
        return {data_.data() + s.offset, s.rows, s.cols};
    }

    Params zeros_like() const { return Params(layout_); }

    template <class U>
    Params<U> cast() const {
        Params<U> out(layout_);
        for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
        return out;
    }

    /// Name of the tensor holding flat index `i` plus the element offset.
    std::string path_of(std::size_t i) const {
        for (const auto& s : layout_->specs)
            if (i >= s.offset && i < s.offset + static_cast<std::size_t>(s.rows) * s.cols)
                return s.name + "[" + std::to_string(i - s.offset) + "]";
        return "?";
    }

private:
    std::shared_ptr<const Layout> layout_;
    std::vector<T> data_;
};

/// Seeded initialisation: Xavier-uniform projections, N(0, 0.02) embeddings,
/// zero modulation and zero velocity head (every block starts as identity).
template <class T>
Params<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    auto layout = std::make_shared<const Layout>(config);
    Params<T> p(layout);
    Rng rng(seed);
    for (std::size_t id = 0; id < layout->specs.size(); ++id) {
        const auto& s = layout->specs[id];
        auto m = p[id];
        const bool is_bias = s.cols == 1 && !s.decay;
        if (id == layout->part_embed || id == layout->anchor_embed || id == layout->t_w1 || id == layout->t_w2) {
            for (int i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(0.02 * gaussian(rng));
        } else if (s.decay) {
            const double bound = std::sqrt(6.0 / (s.rows + s.cols));
            for (int i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(bound * (2.0 * uniform01(rng) - 1.0));
        } else if (is_bias) {
            m.setZero();
        }
    }
    for (const auto& b : layout->block) {
        p[b.mod_w].setZero();
        p[b.mod_b].setZero();
    }
    p[layout->final_mod_w].setZero();
    p[layout->final_mod_b].setZero();
    p[layout->head_w].setZero();
    p[layout->head_b].setZero();
    return p;
}

} // namespace sare::flow
