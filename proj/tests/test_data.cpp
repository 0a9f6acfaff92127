#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "sare/data/fracture.hpp"
#include "sare/data/io.hpp"

using namespace sare;
namespace fs = std::filesystem;

namespace {

FractureOptions light_options() {
    FractureOptions o;
    o.surface_points = 4000;
    o.interior_points = 4000;
    return o;
}

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("sare_test_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Seeded subset of `n` points (or all of them) from each fragment in GT pose.
std::vector<PointCloud> downsample_posed(const AssemblySample& s, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<PointCloud> out;
    for (const auto& c : s.posed()) {
        std::vector<std::size_t> idx(c.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(std::min(n, idx.size()));
        PointCloud d;
        for (auto i : idx) d.points.push_back(c.points[i]);
        out.push_back(std::move(d));
    }
    return out;
}

// O(N^2) nearest-distance labelling with the same comparison rules.
StructureLabels brute_force_labels(const std::vector<PointCloud>& posed, double eps_f, double eps_adj) {
    const int k = static_cast<int>(posed.size());
    StructureLabels out;
    out.adjacency = AdjacencyMatrix::Zero(k, k);
    out.fracture.resize(k);
    Eigen::MatrixXd gap = Eigen::MatrixXd::Constant(k, k, std::numeric_limits<double>::infinity());
    for (int i = 0; i < k; ++i) {
        out.fracture[i].assign(posed[i].size(), 0);
        for (std::size_t p = 0; p < posed[i].size(); ++p)
            for (int j = 0; j < k; ++j) {
                if (i == j) continue;
                double best = std::numeric_limits<double>::infinity();
                for (const auto& q : posed[j].points) best = std::min(best, (posed[i].points[p] - q).squaredNorm());
                if (best <= eps_f * eps_f) out.fracture[i][p] = 1;
                gap(i, j) = std::min(gap(i, j), std::sqrt(best));
            }
    }
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j)
            if (i != j) out.adjacency(i, j) = std::min(gap(i, j), gap(j, i)) < eps_adj;
    return out;
}

} // namespace

TEST(Fracture, CubeWithOneCutIsAContactPair) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto s = fracture_object(ShapeId::Cube, 2, seed);
        ASSERT_EQ(s.k(), 2);
        EXPECT_NO_THROW(validate(s));
        EXPECT_EQ(s.adjacency(0, 1), 1);
        EXPECT_EQ(s.adjacency(1, 0), 1);
        EXPECT_EQ(s.adjacency(0, 0), 0);
    }
}

TEST(Fracture, FracturePointsOfOneCutLieOnAPlane) {
    const auto s = fracture_object(ShapeId::Cube, 2, 11);
    std::vector<Vec3> pts;
    const auto posed = s.posed();
    for (int i = 0; i < 2; ++i)
        for (std::size_t p = 0; p < posed[i].size(); ++p)
            if (s.fracture_labels[i][p]) pts.push_back(posed[i].points[p]);
    ASSERT_GT(pts.size(), 50u);
    Vec3 c = Vec3::Zero();
    for (const auto& p : pts) c += p;
    c /= static_cast<double>(pts.size());
    Mat3 cov = Mat3::Zero();
    for (const auto& p : pts) cov += (p - c) * (p - c).transpose();
    const Vec3 normal = Eigen::SelfAdjointEigenSolver<Mat3>(cov).eigenvectors().col(0);
    for (const auto& p : pts) EXPECT_LE(std::abs(normal.dot(p - c)), s.eps_f);
}

TEST(Fracture, FiveFragmentsFormAConnectedContactGraph) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto s = fracture_object(kShapeCatalog[seed % kShapeCatalog.size()], 5, seed);
        ASSERT_EQ(s.k(), 5);
        // Union-find over contact edges must leave one component.
        std::vector<int> parent{0, 1, 2, 3, 4};
        std::function<int(int)> find = [&](int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
        for (int i = 0; i < 5; ++i) {
            EXPECT_GT(s.adjacency.row(i).cast<int>().sum(), 0) << "seed " << seed << " fragment " << i;
            for (int j = 0; j < 5; ++j)
                if (s.adjacency(i, j)) parent[find(i)] = find(j);
        }
        for (int i = 1; i < 5; ++i) EXPECT_EQ(find(i), find(0)) << "seed " << seed;
    }
}

TEST(Fracture, InvariantsOnGeneratedSamples) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const int k = 2 + static_cast<int>(seed % 7);
        const auto s = fracture_object(kShapeCatalog[seed % kShapeCatalog.size()], k, seed);
        ASSERT_NO_THROW(validate(s));
        Vec3 sum = Vec3::Zero();
        std::size_t n = 0;
        for (const auto& c : s.posed()) {
            for (const auto& p : c.points) sum += p;
            n += c.size();
        }
        EXPECT_LT((sum / static_cast<double>(n)).norm(), 1e-6) << "global centroid";
        for (const auto& f : s.fragments) {
            EXPECT_LT(f.cloud.centroid().norm(), 1e-6) << "fragment centring";
            for (const auto& nrm : f.cloud.normals) ASSERT_NEAR(nrm.norm(), 1.0, 1e-6);
        }
        // A_ij = 1 iff i or j has a fracture point whose nearest other-fragment point is on the partner.
        const auto posed = s.posed();
        std::vector<KdTree> trees;
        for (const auto& c : posed) trees.emplace_back(c.points);
        AdjacencyMatrix via_labels = AdjacencyMatrix::Zero(k, k);
        for (int i = 0; i < k; ++i)
            for (std::size_t p = 0; p < posed[i].size(); ++p) {
                if (!s.fracture_labels[i][p]) continue;
                for (int j = 0; j < k; ++j)
                    if (j != i && trees[j].nearest(posed[i].points[p]).sq_dist <= s.eps_f * s.eps_f)
                        via_labels(i, j) = via_labels(j, i) = 1;
            }
        EXPECT_EQ(via_labels, s.adjacency) << "seed " << seed;
    }
}

TEST(Fracture, RejectsOutOfRangeCounts) {
    EXPECT_THROW(fracture_object(ShapeId::Sphere, 1, 0), InvalidArgument);
    EXPECT_THROW(fracture_object(ShapeId::Sphere, 51, 0), InvalidArgument);
    EXPECT_THROW(parse_shape("teapot"), InvalidArgument);
}

TEST(Fracture, SameSeedSameSample) {
    const auto a = fracture_object(ShapeId::Ellipsoid, 4, 99, light_options());
    const auto b = fracture_object(ShapeId::Ellipsoid, 4, 99, light_options());
    ASSERT_EQ(a.k(), b.k());
    for (int i = 0; i < a.k(); ++i) EXPECT_EQ(a.fragments[i].cloud.points, b.fragments[i].cloud.points);
    EXPECT_EQ(a.adjacency, b.adjacency);
}

// -- Labelling ---------------------------------------------------------------

TEST(Labels, MatchBruteForceOnDownsamples) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto s = fracture_object(kShapeCatalog[seed % 5], 2 + static_cast<int>(seed % 5), seed, light_options());
        const auto posed = downsample_posed(s, 500, seed);
        const auto fast = label_structure(posed, s.eps_f, s.eps_adj);
        const auto slow = brute_force_labels(posed, s.eps_f, s.eps_adj);
        ASSERT_EQ(fast.adjacency, slow.adjacency) << "seed " << seed;
        ASSERT_EQ(fast.fracture, slow.fracture) << "seed " << seed;
    }
}

TEST(Labels, SeparatedFragmentsHaveNoContact) {
    const auto s = fracture_object(ShapeId::Cube, 2, 3, light_options());
    auto posed = s.posed();
    // Push fragment 1 away along the line between centroids.
    const Vec3 dir = (posed[1].centroid() - posed[0].centroid()).normalized();
    for (auto& p : posed[1].points) p += 10.0 * s.eps_adj * dir + 2.0 * dir;
    const auto l = label_structure(posed, s.eps_f, s.eps_adj);
    EXPECT_EQ(l.adjacency(0, 1), 0);
    for (const auto& f : l.fracture) EXPECT_EQ(std::count(f.begin(), f.end(), 1), 0);

    const auto touching = label_structure(s.posed(), s.eps_f, s.eps_adj);
    EXPECT_EQ(touching.adjacency(0, 1), 1);
}

// -- Augmentation ------------------------------------------------------------

TEST(Augment, DeterministicAnchorUntouchedAndPosesConsistent) {
    const auto s = fracture_object(ShapeId::LPrism, 4, 5, light_options());
    const int anchor = 2;
    const auto a = augment(s, anchor, 17), b = augment(s, anchor, 17);
    for (int i = 0; i < s.k(); ++i) EXPECT_EQ(a.fragments[i].cloud.points, b.fragments[i].cloud.points);
    EXPECT_EQ(a.fragments[anchor].cloud.points, s.fragments[anchor].cloud.points);
    EXPECT_EQ(a.gt_transforms[anchor].rotation, s.gt_transforms[anchor].rotation);

    const auto before = s.posed(), after = a.posed();
    for (int i = 0; i < s.k(); ++i) {
        EXPECT_TRUE(is_rotation(a.gt_transforms[i].rotation));
        EXPECT_LT(a.fragments[i].cloud.centroid().norm(), 1e-6);
        for (std::size_t p = 0; p < before[i].size(); ++p)
            ASSERT_LT((before[i].points[p] - after[i].points[p]).norm(), 1e-9);
    }
    bool moved = false;
    for (int i = 0; i < s.k(); ++i)
        if (i != anchor) moved |= (a.fragments[i].cloud.points[0] - s.fragments[i].cloud.points[0]).norm() > 1e-6;
    EXPECT_TRUE(moved);
    EXPECT_THROW(augment(s, 4, 1), InvalidArgument);
}

// -- Serialisation -----------------------------------------------------------

TEST(SampleIo, RoundTripWithinFloatPrecision) {
    const auto s = fracture_object(ShapeId::Cylinder, 3, 8, light_options());
    const auto dir = scratch_dir("roundtrip");
    write_sample(dir / s.object_id, s);
    const auto r = read_sample(dir / s.object_id);
    ASSERT_EQ(r.k(), 3);
    EXPECT_EQ(r.object_id, s.object_id);
    EXPECT_EQ(r.adjacency, s.adjacency);
    EXPECT_EQ(r.fracture_labels, s.fracture_labels);
    for (int i = 0; i < 3; ++i) {
        EXPECT_NEAR(r.fragments[i].area, s.fragments[i].area, 1e-12);
        EXPECT_LT((r.gt_transforms[i].rotation - s.gt_transforms[i].rotation).norm(), 1e-12);
        ASSERT_EQ(r.fragments[i].cloud.size(), s.fragments[i].cloud.size());
        for (std::size_t p = 0; p < s.fragments[i].cloud.size(); ++p) {
            ASSERT_LT((r.fragments[i].cloud.points[p] - s.fragments[i].cloud.points[p]).norm(), 1e-6);
            ASSERT_LT((r.fragments[i].cloud.normals[p] - s.fragments[i].cloud.normals[p]).norm(), 1e-6);
        }
    }
}

TEST(SampleIo, TruncatedFragmentNamesTheSection) {
    const auto s = fracture_object(ShapeId::Cube, 2, 4, light_options());
    const auto dir = scratch_dir("truncated") / s.object_id;
    write_sample(dir, s);
    const auto bin = dir / "frag_1.bin";
    fs::resize_file(bin, fs::file_size(bin) - 7);
    try {
        read_sample(dir);
        FAIL() << "expected a parse error";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.kind(), ParseError::Kind::Truncated);
        EXPECT_NE(std::string(e.what()).find("labels"), std::string::npos) << e.what();
    }
}

TEST(SampleIo, VersionAndSchemaErrorsAreDistinct) {
    const auto s = fracture_object(ShapeId::Cube, 2, 4, light_options());
    const auto dir = scratch_dir("schema") / s.object_id;
    write_sample(dir, s);
    const auto manifest = io::read_json(dir / "manifest.json");

    auto m = manifest;
    m["format_version"] = "7";
    io::write_text(dir / "manifest.json", m.dump());
    try {
        read_sample(dir);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.kind(), ParseError::Kind::Version);
    }

    m = manifest;
    m.erase("K");
    io::write_text(dir / "manifest.json", m.dump());
    try {
        read_sample(dir);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.kind(), ParseError::Kind::Schema);
    }

    io::write_text(dir / "manifest.json", "{not json");
    EXPECT_THROW(read_sample(dir), ParseError);
}

TEST(SampleIo, AsymmetricAdjacencyOnDiskIsRejected) {
    const auto s = fracture_object(ShapeId::Sphere, 3, 6, light_options());
    const auto dir = scratch_dir("asym") / s.object_id;
    write_sample(dir, s);
    auto m = io::read_json(dir / "manifest.json");
    m["adjacency_edges"] = json::array({json::array({0, 1})}); // directed edge without its mirror
    io::write_text(dir / "manifest.json", m.dump());
    EXPECT_THROW(read_sample(dir), ValidationError);
}

TEST(SampleIo, ImportXyzDerivesLabels) {
    const auto s = fracture_object(ShapeId::Cube, 2, 12, light_options());
    const auto dir = scratch_dir("xyz");
    const auto posed = s.posed();
    for (int i = 0; i < 2; ++i) {
        std::ofstream os(dir / ("part_" + std::to_string(i) + ".xyz"));
        for (const auto& p : posed[i].points) os << p.x() << " " << p.y() << " " << p.z() << "\n";
    }
    const auto r = import_xyz(dir, "imported");
    ASSERT_EQ(r.k(), 2);
    EXPECT_NO_THROW(validate(r));
    EXPECT_EQ(r.adjacency(0, 1), 1);
    for (int i = 0; i < 2; ++i) EXPECT_LT(r.fragments[i].cloud.centroid().norm(), 1e-6);
}
