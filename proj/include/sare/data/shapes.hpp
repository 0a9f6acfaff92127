#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <string_view>

#include "sare/geom/core.hpp"
#include "sare/random.hpp"

namespace sare {

enum class ShapeId { Cube, Sphere, Cylinder, Ellipsoid, LPrism };

inline constexpr std::array<ShapeId, 5> kShapeCatalog{ShapeId::Cube, ShapeId::Sphere, ShapeId::Cylinder,
                                                      ShapeId::Ellipsoid, ShapeId::LPrism};

inline std::string_view shape_name(ShapeId s) {
    switch (s) {
    case ShapeId::Cube: return "cube";
    case ShapeId::Sphere: return "sphere";
    case ShapeId::Cylinder: return "cylinder";
    case ShapeId::Ellipsoid: return "ellipsoid";
    case ShapeId::LPrism: return "L-prism";
    }
    return "?";
}

inline ShapeId parse_shape(std::string_view name) {
    for (auto s : kShapeCatalog)
        if (shape_name(s) == name) return s;
    throw InvalidArgument("unknown shape '" + std::string(name) + "'");
}

struct SurfaceSample {
    Vec3 point;
    Vec3 normal;
};

/// Closed solid in its canonical frame (centred near the origin, extent ~1).
class Solid {
public:
    explicit Solid(ShapeId id) : id_(id) {}

    ShapeId id() const noexcept { return id_; }

    /// Radius of a ball about the origin that contains the solid.
    double bounding_radius() const {
        switch (id_) {
        case ShapeId::Cube: return std::sqrt(3.0);
        case ShapeId::Sphere: return 1.0;
        case ShapeId::Cylinder: return std::sqrt(2.0);
        case ShapeId::Ellipsoid: return kEllipsoidAxes[0];
        case ShapeId::LPrism: return std::sqrt(2.25);
        }
        return 0.0;
    }

    double surface_area() const {
        using std::numbers::pi;
        switch (id_) {
        case ShapeId::Cube: return 24.0;
        case ShapeId::Sphere: return 4.0 * pi;
        case ShapeId::Cylinder: return 6.0 * pi;
        case ShapeId::Ellipsoid: {
            // Knud Thomsen approximation, relative error < 1.1%
            const double p = 1.6075;
            auto [a, b, c] = kEllipsoidAxes;
            double m = (std::pow(a * b, p) + std::pow(a * c, p) + std::pow(b * c, p)) / 3.0;
            return 4.0 * pi * std::pow(m, 1.0 / p);
        }
        case ShapeId::LPrism: return 14.0;
        }
        return 0.0;
    }

    bool inside(const Vec3& x) const {
        switch (id_) {
        case ShapeId::Cube: return x.cwiseAbs().maxCoeff() <= 1.0;
        case ShapeId::Sphere: return x.squaredNorm() <= 1.0;
        case ShapeId::Cylinder: return std::abs(x.z()) <= 1.0 && x.head<2>().squaredNorm() <= 1.0;
        case ShapeId::Ellipsoid: {
            auto [a, b, c] = kEllipsoidAxes;
            return (x.x() * x.x()) / (a * a) + (x.y() * x.y()) / (b * b) + (x.z() * x.z()) / (c * c) <= 1.0;
        }
        case ShapeId::LPrism: return std::abs(x.z()) <= 0.5 && in_l(x.x(), x.y());
        }
        return false;
    }

    /// Area-uniform surface point with outward unit normal.
    SurfaceSample sample_surface(Rng& rng) const {
        switch (id_) {
        case ShapeId::Cube: {
            int face = std::uniform_int_distribution<int>(0, 5)(rng);
            int axis = face / 2;
            double sign = (face % 2) ? 1.0 : -1.0;
            Vec3 p(2.0 * uniform01(rng) - 1.0, 2.0 * uniform01(rng) - 1.0, 2.0 * uniform01(rng) - 1.0);
            p[axis] = sign;
            Vec3 n = Vec3::Zero();
            n[axis] = sign;
            return {p, n};
        }
        case ShapeId::Sphere: {
            Vec3 u = random_unit_vector(rng);
            return {u, u};
        }
        case ShapeId::Cylinder: {
            double pick = uniform01(rng) * 6.0; // side 4π, caps π each (in units of π)
            double theta = 2.0 * std::numbers::pi * uniform01(rng);
            if (pick < 4.0) {
                Vec3 n(std::cos(theta), std::sin(theta), 0.0);
                return {Vec3(n.x(), n.y(), 2.0 * uniform01(rng) - 1.0), n};
            }
            double r = std::sqrt(uniform01(rng));
            double z = pick < 5.0 ? 1.0 : -1.0;
            return {Vec3(r * std::cos(theta), r * std::sin(theta), z), Vec3(0.0, 0.0, z)};
        }
        case ShapeId::Ellipsoid: {
            auto [a, b, c] = kEllipsoidAxes;
            const double gmax = std::max({b * c, a * c, a * b});
            for (;;) {
                Vec3 u = random_unit_vector(rng);
                double g = std::sqrt(std::pow(b * c * u.x(), 2) + std::pow(a * c * u.y(), 2) +
                                     std::pow(a * b * u.z(), 2));
                if (uniform01(rng) * gmax <= g) {
                    Vec3 p(a * u.x(), b * u.y(), c * u.z());
                    Vec3 n(p.x() / (a * a), p.y() / (b * b), p.z() / (c * c));
                    return {p, n.normalized()};
                }
            }
        }
        case ShapeId::LPrism: {
            // side walls: perimeter 8 x height 1; caps: area 3 each
            double pick = uniform01(rng) * 14.0;
            if (pick >= 8.0) {
                double z = pick < 11.0 ? 0.5 : -0.5;
                for (;;) {
                    double x = 2.0 * uniform01(rng) - 1.0, y = 2.0 * uniform01(rng) - 1.0;
                    if (in_l(x, y)) return {Vec3(x, y, z), Vec3(0.0, 0.0, z > 0 ? 1.0 : -1.0)};
                }
            }
            static constexpr std::array<std::array<double, 2>, 6> poly{
                {{-1, -1}, {1, -1}, {1, 0}, {0, 0}, {0, 1}, {-1, 1}}};
            double s = pick; // arc length along the counter-clockwise boundary
            for (std::size_t e = 0; e < poly.size(); ++e) {
                auto p0 = poly[e], p1 = poly[(e + 1) % poly.size()];
                double len = std::hypot(p1[0] - p0[0], p1[1] - p0[1]);
                if (s <= len || e + 1 == poly.size()) {
                    double f = std::min(s / len, 1.0);
                    double x = p0[0] + f * (p1[0] - p0[0]), y = p0[1] + f * (p1[1] - p0[1]);
                    Vec3 n((p1[1] - p0[1]) / len, -(p1[0] - p0[0]) / len, 0.0);
                    return {Vec3(x, y, uniform01(rng) - 0.5), n};
                }
                s -= len;
            }
        }
        }
        throw InvalidArgument("sample_surface: unknown shape");
    }

private:
    static constexpr std::array<double, 3> kEllipsoidAxes{1.0, 0.7, 0.5};

    static bool in_l(double x, double y) {
        if (x < -1.0 || x > 1.0 || y < -1.0 || y > 1.0) return false;
        return y <= 0.0 || x <= 0.0;
    }

    ShapeId id_;
};

} // namespace sare
