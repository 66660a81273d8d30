#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "../support.hpp"

namespace pqr {
namespace {

const Prompt& concept_prompt() {
    static const Prompt p = Prompt::parse("a photo of <v> triangle");
    return p;
}

TEST(Extract, IsBitwiseDeterministicAndLeavesLatentUntouched) {
    const Backbone m = test::tiny_backbone();
    const AdapterParams a = test::random_adapters(m, 3);
    const Latent z = seed_noise(m.config(), 4), copy = z;
    ExtractionConfig cfg;
    const auto x = extract(m, z, concept_prompt(), &a, cfg), y = extract(m, z, concept_prompt(), &a, cfg);
    EXPECT_EQ(x.first.per_layer, y.first.per_layer);
    EXPECT_EQ(x.second.per_layer, y.second.per_layer);
    EXPECT_TRUE(bitwise_equal(z.data, copy.data));
}

TEST(Extract, DefaultsSelectDeepestSelfAttentionAndAllCrossAttention) {
    const ExtractionConfig cfg;
    EXPECT_EQ(cfg.t, 999);
    EXPECT_FALSE(cfg.add_noise);
    const Backbone m = test::tiny_backbone();
    const auto [f, maps] = extract(m, seed_noise(m.config(), 1), concept_prompt(), nullptr, cfg);
    std::vector<std::string> sa, ca;
    for (const auto& [id, _] : f.per_layer) sa.push_back(id);
    for (const auto& [id, _] : maps.per_layer) ca.push_back(id);
    EXPECT_EQ(sa, std::vector<std::string>{"sa1"});
    EXPECT_EQ(ca, (std::vector<std::string>{"ca0", "ca1"}));
    EXPECT_EQ(f.source_t, 999);
}

TEST(Extract, EmptySelfAttentionSelectionStillProducesMaps) {
    const Backbone m = test::tiny_backbone();
    ExtractionConfig cfg;
    cfg.sa_layers.clear();
    const auto [f, maps] = extract(m, seed_noise(m.config(), 1), concept_prompt(), nullptr, cfg);
    EXPECT_TRUE(f.per_layer.empty());
    EXPECT_EQ(maps.per_layer.size(), 2u);
}

TEST(Extract, CrossAttentionMapIsConceptColumnWithinUnitInterval) {
    const Backbone m = test::tiny_backbone();
    const Latent z = seed_noise(m.config(), 5);
    const auto [f, maps] = extract(m, z, concept_prompt(), nullptr, ExtractionConfig{});
    const auto cap = m.predict_noise(z, 999, concept_prompt(), nullptr, true);
    for (const auto& l : *cap.captured) {
        if (!is_cross_attention(l.id)) continue;
        const FeatureMap& map = maps.per_layer.at(l.id);
        EXPECT_EQ(map.h, l.h);
        EXPECT_TRUE(bitwise_equal(map.data, Mat(l.attention.col(*concept_prompt().concept_index))));
        EXPECT_GE(map.data.minCoeff(), 0.0);
        EXPECT_LE(map.data.maxCoeff(), 1.0);
    }
}

TEST(Extract, AddNoiseUsesSeededForwardDiffusion) {
    const Backbone m = test::tiny_backbone();
    const Latent z = seed_noise(m.config(), 5);
    ExtractionConfig cfg;
    cfg.t = 400;
    cfg.add_noise = true;
    cfg.noise_seed = 12;
    const Latent noised = forward_diffuse(z, 400, seed_noise(m.config(), 12), m.schedule());
    ExtractionConfig clean = cfg;
    clean.add_noise = false;
    EXPECT_EQ(extract(m, z, concept_prompt(), nullptr, cfg).first.per_layer,
              extract(m, noised, concept_prompt(), nullptr, clean).first.per_layer);
}

TEST(Extract, RejectsMisclassifiedLayersAndConceptlessPrompt) {
    const Backbone m = test::tiny_backbone();
    ExtractionConfig cfg;
    cfg.sa_layers = {"ca0"};
    EXPECT_THROW(extract(m, seed_noise(m.config(), 1), concept_prompt(), nullptr, cfg), InvalidArgument);
    EXPECT_THROW(extract(m, seed_noise(m.config(), 1), Prompt::parse("a red circle"), nullptr, ExtractionConfig{}),
                 InvalidArgument);
}

TEST(ExtractReference, EqualsExtractOnRawPixelsUnderIdentityAutoencoder) {
    const Backbone m = test::tiny_backbone();
    const Image x = test::random_image(8, 8, 3);
    const auto a = extract_reference(m, x, concept_prompt(), nullptr, ExtractionConfig{});
    const auto b = extract(m, Latent(8, 8, 3, Space::latent, x.data), concept_prompt(), nullptr, ExtractionConfig{});
    EXPECT_EQ(a.first.per_layer, b.first.per_layer);
    EXPECT_EQ(a.second.per_layer, b.second.per_layer);
}

CrossAttnMaps single_map(int h, int w, const Mat& values) {
    CrossAttnMaps m;
    m.per_layer["ca0"] = FeatureMap{h, w, values};
    return m;
}

TEST(ObjectMask, ConstantMapFallsBackToAllOnes) {
    const ObjectMask m = object_mask(single_map(4, 4, Mat::Constant(16, 1, 0.3)), 0.5);
    EXPECT_TRUE(m.degenerate);
    EXPECT_EQ(m.area(), 16);
}

TEST(ObjectMask, MedianQuantileKeepsCeilingOfHalfWithRowMajorTies) {
    Mat v(15, 1);
    for (int i = 0; i < 15; ++i) v(i, 0) = i % 3 == 0 ? 0.9 : 0.1;
    const ObjectMask m = object_mask(single_map(3, 5, v), 0.5);
    EXPECT_EQ(m.area(), 8);
    for (int i = 0; i < 15; i += 3) EXPECT_EQ(m.mask.data(i, 0), 1.0);
    // Three more of the tied low values, earliest first.
    EXPECT_EQ(m.mask.data(1, 0), 1.0);
    EXPECT_EQ(m.mask.data(2, 0), 1.0);
    EXPECT_EQ(m.mask.data(4, 0), 1.0);
    EXPECT_EQ(m.mask.data(5, 0), 0.0);
}

TEST(ObjectMask, BrightSquareIsRecoveredAtMatchingQuantile) {
    Mat v = Mat::Constant(64, 1, 0.05);
    for (int r = 2; r < 5; ++r)
        for (int c = 3; c < 6; ++c) v(r * 8 + c, 0) = 0.7;
    const ObjectMask m = object_mask(single_map(8, 8, v), 1.0 - 9.0 / 64.0);
    for (int i = 0; i < 64; ++i) EXPECT_EQ(m.mask.data(i, 0), v(i, 0) > 0.5 ? 1.0 : 0.0) << i;
}

TEST(ObjectMask, AveragesLayersAtFinestResolution) {
    CrossAttnMaps maps = single_map(4, 4, Mat::Zero(16, 1));
    maps.per_layer["ca1"] = FeatureMap{2, 2, Mat::Zero(4, 1)};
    maps.per_layer["ca0"].data(5, 0) = 1.0;
    const ObjectMask m = object_mask(maps, 15.0 / 16.0);
    EXPECT_EQ(m.mask.h, 4);
    EXPECT_EQ(m.area(), 1);
    EXPECT_EQ(m.mask.data(5, 0), 1.0);
}

// ----------------------------------------------------------------- losses

MatchSet identity_matches(int h, int w) {
    MatchSet m;
    m.h = h;
    m.w = w;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            m.pairs.push_back({Coord{r, c}, Coord{r, c}});
            m.scores.push_back(1.0);
        }
    m.requested = h * w;
    return m;
}

TEST(LossSA, ZeroForIdenticalFeaturesAndIdentityMatches) {
    AppearanceFeatures f;
    f.per_layer["sa1"] = FeatureMap{4, 4, test::random_mat(16, 6, 1)};
    EXPECT_EQ(loss_sa(f, f, identity_matches(4, 4)), 0.0);
}

TEST(LossSA, OrthogonalUnitDescriptorsGiveTwo) {
    AppearanceFeatures a, b;
    a.per_layer["sa1"] = FeatureMap{1, 1, (Mat(1, 2) << 1, 0).finished()};
    b.per_layer["sa1"] = FeatureMap{1, 1, (Mat(1, 2) << 0, 1).finished()};
    EXPECT_EQ(loss_sa(a, b, identity_matches(1, 1)), 2.0);
}

TEST(LossCA, WorkedExample) {
    CrossAttnMaps a = single_map(1, 1, Mat::Constant(1, 1, 0.8)), b = single_map(1, 1, Mat::Constant(1, 1, 0.3));
    EXPECT_NEAR(loss_ca(a, b, identity_matches(1, 1)), 0.25, 1e-15);
    EXPECT_EQ(loss_ca(a, a, identity_matches(1, 1)), 0.0);
}

/// Independent bilinear sampler: value of `f` (h x w grid, row-major
/// locations) at continuous pixel-centre coordinates, clamped at the border.
double bilinear(const FeatureMap& f, int ch, double y, double x) {
    y = std::min(std::max(y, 0.0), double(f.h - 1));
    x = std::min(std::max(x, 0.0), double(f.w - 1));
    const int y0 = int(std::floor(y)), x0 = int(std::floor(x));
    const int y1 = std::min(y0 + 1, f.h - 1), x1 = std::min(x0 + 1, f.w - 1);
    const double fy = y - y0, fx = x - x0;
    auto at = [&](int r, int c) { return f.data(r * f.w + c, ch); };
    return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

double oracle_dift(const std::map<std::string, FeatureMap>& ref, const std::map<std::string, FeatureMap>& gen,
                   const MatchSet& m) {
    double total = 0;
    for (const auto& [id, rf] : ref) {
        const FeatureMap& gf = gen.at(id);
        double layer = 0;
        for (const auto& [p, q] : m.pairs) {
            const double py = (p.row + 0.5) * rf.h / m.h - 0.5, px = (p.col + 0.5) * rf.w / m.w - 0.5;
            const double qy = (q.row + 0.5) * gf.h / m.h - 0.5, qx = (q.col + 0.5) * gf.w / m.w - 0.5;
            for (Eigen::Index ch = 0; ch < rf.data.cols(); ++ch) {
                const double d = bilinear(gf, int(ch), qy, qx) - bilinear(rf, int(ch), py, px);
                layer += d * d;
            }
        }
        total += layer / double(m.pairs.size());
    }
    return total / double(ref.size());
}

MatchSet random_matches(int h, int w, int n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> r(0, h - 1), c(0, w - 1);
    MatchSet m;
    m.h = h;
    m.w = w;
    m.requested = n;
    for (int i = 0; i < n; ++i) {
        m.pairs.push_back({Coord{r(rng), c(rng)}, Coord{r(rng), c(rng)}});
        m.scores.push_back(0.0);
    }
    return m;
}

TEST(LossSA, MatchesScalarLoopOracleAcrossResolutions) {
    const MatchSet m = random_matches(8, 8, 13, 4);
    AppearanceFeatures a, b;
    a.per_layer["sa0"] = FeatureMap{8, 8, test::random_mat(64, 5, 1)};
    b.per_layer["sa0"] = FeatureMap{8, 8, test::random_mat(64, 5, 2)};
    a.per_layer["sa1"] = FeatureMap{4, 4, test::random_mat(16, 3, 3)};
    b.per_layer["sa1"] = FeatureMap{4, 4, test::random_mat(16, 3, 4)};
    EXPECT_NEAR(loss_sa(a, b, m), oracle_dift(a.per_layer, b.per_layer, m), 1e-12);
}

TEST(LossCA, MatchesScalarLoopOracleAcrossResolutions) {
    const MatchSet m = random_matches(8, 8, 9, 5);
    CrossAttnMaps a, b;
    a.per_layer["ca0"] = FeatureMap{8, 8, test::random_mat(64, 1, 5).cwiseAbs()};
    b.per_layer["ca0"] = FeatureMap{8, 8, test::random_mat(64, 1, 6).cwiseAbs()};
    a.per_layer["ca1"] = FeatureMap{4, 4, test::random_mat(16, 1, 7).cwiseAbs()};
    b.per_layer["ca1"] = FeatureMap{4, 4, test::random_mat(16, 1, 8).cwiseAbs()};
    EXPECT_NEAR(loss_ca(a, b, m), oracle_dift(a.per_layer, b.per_layer, m), 1e-12);
}

TEST(LossSA, EmptyMatchSetRaises) {
    AppearanceFeatures f;
    f.per_layer["sa1"] = FeatureMap{2, 2, Mat::Zero(4, 1)};
    MatchSet empty;
    empty.h = empty.w = 2;
    EXPECT_THROW(loss_sa(f, f, empty), EmptyMatch);
}

TEST(LossLDM, PerfectStubGivesZeroAndOffsetStubGivesSquare) {
    const NoiseSchedule s = ScheduleSpec{}.build();
    const Latent z0 = Latent(3, 3, 2, Space::latent, test::random_mat(9, 2, 1));
    const LdmDraw draw = draw_ldm(s, 3, 3, 2, 42);
    const auto perfect = loss_ldm_graph(z0, draw, s, [&](const Latent&, int) { return ag::Var::constant(draw.eps.data); });
    EXPECT_EQ(perfect.scalar(), 0.0);
    const double c = 0.3;
    const auto offset = loss_ldm_graph(z0, draw, s, [&](const Latent&, int) {
        return ag::Var::constant((draw.eps.data.array() + c).matrix());
    });
    EXPECT_NEAR(offset.scalar(), c * c, 1e-15);
}

TEST(LossLDM, StubSeesForwardDiffusedLatentAtDrawnTimestep) {
    const NoiseSchedule s = ScheduleSpec{}.build();
    const Latent z0 = Latent(2, 2, 1, Space::latent, test::random_mat(4, 1, 1));
    const LdmDraw draw = draw_ldm(s, 2, 2, 1, 9);
    (void)loss_ldm_graph(z0, draw, s, [&](const Latent& zt, int t) {
        EXPECT_EQ(t, draw.t);
        EXPECT_TRUE(bitwise_equal(zt.data, forward_diffuse(z0, draw.t, draw.eps, s).data));
        return ag::Var::constant(draw.eps.data);
    });
}

TEST(LossLDM, FixedSeedIsReproducible) {
    const Backbone m = test::tiny_backbone();
    const Image x = test::random_image(8, 8, 2);
    EXPECT_EQ(loss_ldm(m, x, concept_prompt(), nullptr, 5), loss_ldm(m, x, concept_prompt(), nullptr, 5));
    EXPECT_NE(loss_ldm(m, x, concept_prompt(), nullptr, 5), loss_ldm(m, x, concept_prompt(), nullptr, 6));
}

TEST(Combine, WorkedExamples) {
    EXPECT_EQ(combine(0.2, 0.3, 0.5, Lambdas{1, 1, 1}).combined, 1.0);
    EXPECT_EQ(combine(0.2, 0.3, 0.5, Lambdas{0, 0, 0}).combined, 0.0);
    const LossReport r = combine(1.5, 0.25, 2.0, Lambdas{0.5, 2, 3});
    EXPECT_EQ(r.combined, 0.5 * 1.5 + 2 * 0.25 + 3 * 2.0);
    EXPECT_THROW(combine(std::nan(""), 0, 0, Lambdas{}), NumericalFailure);
}

TEST(Combine, DefaultWeightsAreOne) {
    const Lambdas l;
    EXPECT_EQ(l.sa, 1.0);
    EXPECT_EQ(l.ca, 1.0);
    EXPECT_EQ(l.ldm, 1.0);
}

} // namespace
} // namespace pqr
