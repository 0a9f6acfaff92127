#include <gtest/gtest.h>

#include <cstring>

#include "sare/data/fracture.hpp"
#include "sare/flow/train.hpp"
#include "sare/infer/refine.hpp"

using namespace sare;

namespace {

FractureOptions light() {
    FractureOptions o;
    o.surface_points = 6000;
    o.interior_points = 4000;
    return o;
}

flow::ModelConfig tiny_model() {
    flow::ModelConfig c;
    c.blocks = 2;
    c.width = 16;
    c.heads = 2;
    c.structural_layer = 1;
    c.head_hidden = 8;
    c.max_parts = 8;
    return c;
}

VelocityField straight_line_oracle(const MatT<double>& x0) {
    return [x0](const MatT<double>& x, double t) {
        FieldOutput f;
        f.velocity = (x - x0) / t;
        return f;
    };
}

PointCloud blob(std::uint64_t seed, const Vec3& centre, std::size_t n = 400) {
    Rng rng(seed);
    PointCloud c;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3 d(gaussian(rng), gaussian(rng), gaussian(rng));
        c.points.push_back(centre + 0.1 * d.normalized());
        c.normals.push_back(d.normalized());
    }
    return c;
}

std::vector<std::uint8_t> all_on(const PointCloud& c) { return std::vector<std::uint8_t>(c.size(), 1); }

} // namespace

TEST(CandidateEdges, ThresholdExamples) {
    EXPECT_TRUE(candidate_edges(MatT<double>::Zero(4, 4), 0.5).empty());
    EXPECT_EQ(candidate_edges(MatT<double>::Ones(4, 4), 0.5).size(), 6u);
    MatT<double> s(3, 3);
    s << 0, 0.4, 0.6, 0.4, 0, 0.2, 0.6, 0.2, 0;
    EXPECT_EQ(candidate_edges(s, 0.5), (std::vector<Edge>{{0, 2}}));
    EXPECT_THROW(candidate_edges(MatT<double>::Zero(2, 3), 0.5), InvalidArgument);
}

TEST(Verify, CoLocatedIdenticalCloudsAreRejected) {
    const auto c = blob(1, Vec3::Zero());
    const auto checks = verify_edges({c, c}, {all_on(c), all_on(c)}, {{0, 1}}, RefineConfig{});
    ASSERT_EQ(checks.size(), 1u);
    EXPECT_EQ(checks[0].overlap, 1.0);
    EXPECT_FALSE(checks[0].kept);
    EXPECT_EQ(checks[0].reason, "overlap");
}

TEST(Verify, DistantCloudsFailCoverage) {
    RefineConfig cfg;
    // Two 0.2-wide blobs 2 units apart: the bbox is about 2.3 wide, so one
    // voxel is ~0.036 and the gap spans dozens of voxels.
    const auto a = blob(2, Vec3::Zero()), b = blob(3, Vec3(2, 0, 0));
    const auto checks = verify_edges({a, b}, {all_on(a), all_on(b)}, {{0, 1}}, cfg);
    EXPECT_EQ(checks[0].overlap, 0.0);
    EXPECT_EQ(checks[0].cover_ij, 0.0);
    EXPECT_EQ(checks[0].reason, "coverage");
    const auto none = verify_edges({a, b}, {std::vector<std::uint8_t>(a.size()), all_on(b)}, {{0, 1}}, cfg);
    EXPECT_EQ(none[0].reason, "no-fracture-voxels");
}

TEST(Verify, OverlapRatioIsSymmetricAndBounded) {
    const auto s = fracture_object(ShapeId::Cube, 4, 9, light());
    const auto parts = s.posed();
    std::vector<Edge> all;
    std::vector<Edge> flipped;
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) {
            all.emplace_back(i, j);
            flipped.emplace_back(j, i);
        }
    const auto a = verify_edges(parts, s.fracture_labels, all, RefineConfig{});
    const auto b = verify_edges(parts, s.fracture_labels, flipped, RefineConfig{});
    for (std::size_t e = 0; e < a.size(); ++e) {
        EXPECT_EQ(a[e].overlap, b[e].overlap);
        EXPECT_EQ(a[e].edge, b[e].edge);
        EXPECT_GE(a[e].overlap, 0.0);
        EXPECT_LE(a[e].overlap, 1.0);
    }
}

TEST(Verify, GroundTruthContactsAreRetained) {
    int kept = 0;
    const int trials = 20;
    for (int seed = 0; seed < trials; ++seed) {
        const auto s = fracture_object(kShapeCatalog[seed % kShapeCatalog.size()], 2, 500 + seed, light());
        ASSERT_EQ(s.adjacency(0, 1), 1);
        kept += verify_edges(s.posed(), s.fracture_labels, {{0, 1}}, RefineConfig{})[0].kept;
    }
    EXPECT_GE(kept, 19);
}

TEST(StableMask, ComponentsAndMinimumSize) {
    const std::vector<int> frag = {0, 0, 1, 2, 3, 3, 4};
    const auto m = stable_mask({{0, 1}, {2, 3}}, frag, 5, 2);
    EXPECT_EQ(m.components, (std::vector<std::vector<int>>{{0, 1}, {2, 3}}));
    EXPECT_EQ(m.tokens, (std::vector<std::uint8_t>{1, 1, 1, 1, 1, 1, 0}));
    EXPECT_EQ(m.size(), 6u);

    const auto chain = stable_mask({{0, 1}, {1, 2}}, frag, 5, 3);
    EXPECT_EQ(chain.components, (std::vector<std::vector<int>>{{0, 1, 2}}));
    EXPECT_TRUE(stable_mask({{0, 1}}, frag, 5, 3).empty());
    EXPECT_TRUE(stable_mask({}, frag, 5, 2).empty());
    EXPECT_EQ(stable_mask({}, frag, 5, 1).size(), frag.size()) << "singletons count when the minimum is 1";
    EXPECT_THROW(stable_mask({{0, 5}}, frag, 5, 2), InvalidArgument);
}

TEST(Blend, AlphaOneCopiesAlphaZeroKeeps) {
    Rng rng(4);
    MatT<double> x(6, 3), known(6, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        x.data()[i] = gaussian(rng);
        known.data()[i] = gaussian(rng);
    }
    const std::vector<std::uint8_t> mask = {1, 0, 1, 0, 0, 1};
    MatT<double> y = x;
    blend(y, known, mask, 1.0);
    for (Eigen::Index m = 0; m < 6; ++m) EXPECT_EQ(y.row(m), mask[m] ? known.row(m) : x.row(m));
    MatT<double> z = x;
    blend(z, known, mask, 0.0);
    EXPECT_EQ(z, x);
    MatT<double> h = x;
    blend(h, known, mask, 0.5);
    EXPECT_LT((h.row(0) - 0.5 * (x.row(0) + known.row(0))).norm(), 1e-15);

    const MatT<double> ref = MatT<double>::Ones(2, 3), eps = MatT<double>::Zero(2, 3);
    EXPECT_EQ(known_state(ref, eps, 1.0), eps);
    EXPECT_EQ(known_state(ref, eps, 0.0), ref);
}

namespace {

struct RefineFixture {
    AssemblySample s;
    InferenceInputs in;
    MatT<double> x0;
    SampleResult first;
};

RefineFixture refine_fixture(std::uint64_t seed, int k) {
    RefineFixture f;
    f.s = augment(fracture_object(kShapeCatalog[seed % kShapeCatalog.size()], k, seed, light(), "obj"), 0, seed);
    f.in = prepare_inference(f.s, tiny_model(), 192, seed);
    f.x0 = flow::anchor_gauge_targets(f.s, f.in.queries);
    f.first = euler_sample(straight_line_oracle(f.x0), f.in, 8, seed);
    const auto labels = query_fracture_labels(f.s, f.in.queries);
    f.first.f_probs = VecT<double>(static_cast<Eigen::Index>(labels.size()));
    for (std::size_t m = 0; m < labels.size(); ++m) f.first.f_probs(static_cast<Eigen::Index>(m)) = labels[m];
    f.first.a_scores = f.s.adjacency.cast<double>();
    return f;
}

} // namespace

TEST(Repaint, AlphaOneHoldsMaskedRowsOnTheKnownLine) {
    const auto f = refine_fixture(21, 3);
    const auto p = flow::init_params<double>(tiny_model(), 2);
    std::vector<std::uint8_t> mask(f.in.queries.total(), 0);
    for (std::size_t m = 0; m < mask.size(); m += 3) mask[m] = !f.in.cond.anchor_mask[m];
    RepaintOptions opt;
    opt.alpha = 1.0;
    opt.steps = 12;
    int observed = 0;
    repaint_sample(model_field(p, f.in.cond), f.in, f.first.x0_hat, mask, opt, 9,
                   [&](int, double, const MatT<double>& x, const MatT<double>& known) {
                       ++observed;
                       for (Eigen::Index m = 0; m < x.rows(); ++m)
                           if (mask[m]) {
                               ASSERT_EQ(x.row(m), known.row(m));
                           }
                   });
    EXPECT_EQ(observed, 6 * 2 + 6) << "first half of the grid runs each step twice";
}

TEST(Repaint, EmptyMaskIsBitwisePlainSampling) {
    const auto f = refine_fixture(22, 4);
    const auto p = flow::init_params<double>(tiny_model(), 3);
    const auto field = model_field(p, f.in.cond);
    const auto plain = euler_sample(field, f.in, 10, 31);
    RepaintOptions opt;
    opt.steps = 10;
    const auto again = repaint_sample(field, f.in, f.first.x0_hat, std::vector<std::uint8_t>(f.in.queries.total(), 0), opt, 31);
    EXPECT_EQ(std::memcmp(plain.x0_hat.data(), again.x0_hat.data(), sizeof(double) * plain.x0_hat.size()), 0);
    EXPECT_EQ(plain.a_scores, again.a_scores);
    EXPECT_EQ(plain.f_probs, again.f_probs);
    EXPECT_THROW(repaint_sample(field, f.in, f.first.x0_hat, {1, 0}, opt, 31), InvalidArgument);
}

TEST(Repaint, OracleFieldStillLandsOnTarget) {
    const auto f = refine_fixture(23, 4);
    std::vector<std::uint8_t> mask(f.in.queries.total(), 0);
    for (std::size_t m = 0; m < mask.size(); ++m) mask[m] = f.in.queries.fragment_of[m] % 2;
    RepaintOptions opt;
    opt.steps = 20;
    opt.repeats = 3;
    const auto r = repaint_sample(straight_line_oracle(f.x0), f.in, f.x0, mask, opt, 5);
    EXPECT_LT((r.x0_hat - f.x0).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(RefinePipeline, OracleModeKeepsGroundTruthContacts) {
    const auto f = refine_fixture(24, 3);
    RefineConfig cfg;
    EXPECT_THROW(refine_pipeline(straight_line_oracle(f.x0), f.s, f.in, f.first, cfg, RefineMode::OracleAdjacency, 8, 1),
                 InvalidArgument);
    const auto out = refine_pipeline(straight_line_oracle(f.x0), f.s, f.in, f.first, cfg, RefineMode::OracleAdjacency, 8, 1,
                                     &f.s.adjacency);
    EXPECT_EQ(out.report.candidates.size(), edge_count(f.s.adjacency));
    EXPECT_FALSE(out.report.kept.empty());
    EXPECT_GT(out.report.mask_tokens, 0u);
    EXPECT_LT((out.result.x0_hat - f.x0).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(RefinePipeline, FreezeCopiesStablePoses) {
    const auto f = refine_fixture(25, 4);
    auto first = f.first;
    // Perturb the first pass so copied and re-estimated poses differ.
    for (auto& t : first.transforms) t.translation += Vec3(1e-3, 0, 0);
    const auto p = flow::init_params<double>(tiny_model(), 4);
    const auto out = refine_pipeline(model_field(p, f.in.cond), f.s, f.in, first, RefineConfig{}, RefineMode::Freeze, 6, 2);
    ASSERT_FALSE(out.report.components.empty());
    for (const auto& comp : out.report.components)
        for (int i : comp) EXPECT_EQ(out.result.transforms[i].translation, first.transforms[i].translation);
}

TEST(RefinePipeline, HeadlessModelLeavesNothingToVerify) {
    auto f = refine_fixture(26, 3);
    f.first.a_scores.resize(0, 0);
    const auto p = flow::init_params<double>(tiny_model(), 5);
    const auto out = refine_pipeline(model_field(p, f.in.cond), f.s, f.in, f.first, RefineConfig{}, RefineMode::Repaint, 6, 7);
    EXPECT_TRUE(out.report.candidates.empty());
    EXPECT_EQ(out.report.mask_tokens, 0u);
    EXPECT_EQ(out.result.x0_hat, euler_sample(model_field(p, f.in.cond), f.in, 6, 7).x0_hat);
}

TEST(RefineConfigChecks, RejectsOutOfRangeValues) {
    RefineConfig c;
    EXPECT_NO_THROW(c.check());
    c.overlap_tau = 1.0;
    EXPECT_THROW(c.check(), ConfigError);
    c = RefineConfig{};
    c.alpha = 1.5;
    EXPECT_THROW(c.check(), ConfigError);
    c = RefineConfig{};
    c.resample_repeats = 0;
    EXPECT_THROW(c.check(), ConfigError);
    EXPECT_EQ(parse_mode("freeze"), RefineMode::Freeze);
    EXPECT_EQ(std::string(mode_name(parse_mode("oracle-adjacency"))), "oracle-adjacency");
    EXPECT_THROW(parse_mode("paint"), ConfigError);
}
