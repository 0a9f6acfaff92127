#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <queue>
#include <span>
#include <vector>

#include "sare/geom/core.hpp"

namespace sare {

/// Static 3-d tree over a borrowed point array. Exact nearest and k-nearest
/// queries; the referenced points must outlive the tree.
class KdTree {
public:
    struct Hit {
        std::uint32_t index = 0;
        double sq_dist = std::numeric_limits<double>::infinity();
    };

    KdTree() = default;

    explicit KdTree(std::span<const Vec3> points) : points_(points) {
        order_.resize(points.size());
        for (std::uint32_t i = 0; i < order_.size(); ++i) order_[i] = i;
        nodes_.reserve(2 * points.size() / kLeafSize + 2);
        if (!points.empty()) build(0, static_cast<std::uint32_t>(order_.size()));
    }

    std::size_t size() const noexcept { return points_.size(); }

    Hit nearest(const Vec3& q) const {
        Hit best;
        if (!nodes_.empty()) search_nearest(0, q, best);
        return best;
    }

    /// k nearest points, closest first. Ties are ordered by index.
    std::vector<Hit> knn(const Vec3& q, std::size_t k) const {
        k = std::min(k, points_.size());
        std::vector<Hit> heap;
        heap.reserve(k + 1);
        if (k > 0 && !nodes_.empty()) search_knn(0, q, k, heap);
        std::sort(heap.begin(), heap.end(), closer);
        return heap;
    }

private:
    static constexpr std::uint32_t kLeafSize = 8;

    struct Node {
        std::uint32_t begin, end;   // range in order_
        std::int32_t left = -1, right = -1;
        int axis = -1;              // -1 for leaves
        double split = 0.0;
        Vec3 lo, hi;                // bounding box
    };

    static bool closer(const Hit& a, const Hit& b) {
        return a.sq_dist < b.sq_dist || (a.sq_dist == b.sq_dist && a.index < b.index);
    }

    std::int32_t build(std::uint32_t begin, std::uint32_t end) {
        Node node;
        node.begin = begin;
        node.end = end;
        node.lo = Vec3::Constant(std::numeric_limits<double>::infinity());
        node.hi = -node.lo;
        for (std::uint32_t i = begin; i < end; ++i) {
            node.lo = node.lo.cwiseMin(points_[order_[i]]);
            node.hi = node.hi.cwiseMax(points_[order_[i]]);
        }
        auto id = static_cast<std::int32_t>(nodes_.size());
        nodes_.push_back(node);
        if (end - begin <= kLeafSize) return id;

        int axis = 0;
        (node.hi - node.lo).maxCoeff(&axis);
        std::uint32_t mid = begin + (end - begin) / 2;
        std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                         [&](std::uint32_t a, std::uint32_t b) { return points_[a][axis] < points_[b][axis]; });
        nodes_[id].axis = axis;
        nodes_[id].split = points_[order_[mid]][axis];
        std::int32_t l = build(begin, mid);
        std::int32_t r = build(mid, end);
        nodes_[id].left = l;
        nodes_[id].right = r;
        return id;
    }

    static double box_sq_dist(const Node& n, const Vec3& q) {
        Vec3 d = (n.lo - q).cwiseMax(q - n.hi).cwiseMax(0.0);
        return d.squaredNorm();
    }

    void search_nearest(std::int32_t id, const Vec3& q, Hit& best) const {
        const Node& n = nodes_[id];
        if (box_sq_dist(n, q) > best.sq_dist) return;
        if (n.axis < 0) {
            for (std::uint32_t i = n.begin; i < n.end; ++i) {
                Hit h{order_[i], (points_[order_[i]] - q).squaredNorm()};
                if (closer(h, best)) best = h;
            }
            return;
        }
        bool go_left = q[n.axis] < n.split;
        search_nearest(go_left ? n.left : n.right, q, best);
        search_nearest(go_left ? n.right : n.left, q, best);
    }

    void search_knn(std::int32_t id, const Vec3& q, std::size_t k, std::vector<Hit>& heap) const {
        const Node& n = nodes_[id];
        if (heap.size() == k && box_sq_dist(n, q) > heap.front().sq_dist) return;
        if (n.axis < 0) {
            for (std::uint32_t i = n.begin; i < n.end; ++i) {
                Hit h{order_[i], (points_[order_[i]] - q).squaredNorm()};
                if (heap.size() < k) {
                    heap.push_back(h);
                    std::push_heap(heap.begin(), heap.end(), closer);
                } else if (closer(h, heap.front())) {
                    std::pop_heap(heap.begin(), heap.end(), closer);
                    heap.back() = h;
                    std::push_heap(heap.begin(), heap.end(), closer);
                }
            }
            return;
        }
        bool go_left = q[n.axis] < n.split;
        search_knn(go_left ? n.left : n.right, q, k, heap);
        search_knn(go_left ? n.right : n.left, q, k, heap);
    }

    std::span<const Vec3> points_;
    std::vector<std::uint32_t> order_;
    std::vector<Node> nodes_;
};

} // namespace sare
