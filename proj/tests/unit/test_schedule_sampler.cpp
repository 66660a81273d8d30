#include <cmath>

#include <gtest/gtest.h>

#include "../support.hpp"

namespace pqr {
namespace {

Latent scalar_latent(double v) {
    Latent z(1, 1, 1, Space::latent);
    z.data(0, 0) = v;
    return z;
}

TEST(ForwardDiffuse, MatchesWorkedScalarExample) {
    const NoiseSchedule s(std::vector<double>{0.75});
    ASSERT_DOUBLE_EQ(s.alpha_bar(0), 0.25);
    const double oracle = std::sqrt(0.25) * 1.0 + std::sqrt(1.0 - 0.25) * 2.0;
    const Latent out = forward_diffuse(scalar_latent(1.0), 0, scalar_latent(2.0), s);
    EXPECT_NEAR(out.data(0, 0), 2.2320508, 1e-7);
    EXPECT_DOUBLE_EQ(out.data(0, 0), oracle);
}

TEST(ForwardDiffuse, UnitAlphaBarReturnsInputExactly) {
    // A beta below double resolution makes alpha_bar exactly 1.
    const NoiseSchedule s(std::vector<double>{1e-300});
    ASSERT_EQ(s.alpha_bar(0), 1.0);
    const Latent x0 = Latent(2, 2, 3, Space::latent, test::random_mat(4, 3, 1));
    const Latent eps = Latent(2, 2, 3, Space::latent, test::random_mat(4, 3, 2));
    EXPECT_TRUE(bitwise_equal(forward_diffuse(x0, 0, eps, s).data, x0.data));
}

TEST(ForwardDiffuse, ZeroNoiseScalesByRootAlphaBar) {
    const NoiseSchedule s = ScheduleSpec{}.build();
    const Latent x0 = Latent(2, 2, 3, Space::latent, test::random_mat(4, 3, 3));
    const Latent eps(2, 2, 3, Space::latent);
    for (int t : {0, 400, 999}) {
        const Latent out = forward_diffuse(x0, t, eps, s);
        for (Eigen::Index i = 0; i < x0.data.size(); ++i)
            EXPECT_DOUBLE_EQ(out.data.data()[i], std::sqrt(s.alpha_bar(t)) * x0.data.data()[i]);
    }
}

TEST(ForwardDiffuse, RejectsShapeMismatchAndBadTimestep) {
    const NoiseSchedule s = ScheduleSpec{}.build();
    EXPECT_THROW(forward_diffuse(Latent(2, 2, 3), 0, Latent(2, 2, 4), s), InvalidArgument);
    EXPECT_THROW(forward_diffuse(Latent(2, 2, 3), 1000, Latent(2, 2, 3), s), InvalidArgument);
}

TEST(NoiseSchedule, AlphaBarsStrictlyDecreasing) {
    const NoiseSchedule s = ScheduleSpec{}.build();
    ASSERT_EQ(s.num_train_steps(), 1000);
    for (int t = 1; t < s.num_train_steps(); ++t) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1)) << "t=" << t;
    EXPECT_GT(s.alpha_bars().back(), 0.0);
}

TEST(NoiseSchedule, RejectsInvalidBetas) {
    EXPECT_THROW(NoiseSchedule(std::vector<double>{}), InvalidArgument);
    EXPECT_THROW(NoiseSchedule(std::vector<double>{0.0}), InvalidArgument);
    EXPECT_THROW(NoiseSchedule(std::vector<double>{1.0}), InvalidArgument);
}

TEST(Sampler, InferenceTimestepsEndAtLastIndex) {
    const NoiseSchedule s = ScheduleSpec{}.build();
    EXPECT_EQ(inference_timesteps(s, 1), std::vector<int>{999});
    const auto ts = inference_timesteps(s, 4);
    EXPECT_EQ(ts, (std::vector<int>{249, 499, 749, 999}));
}

TEST(Sampler, RejectsZeroSteps) {
    const Backbone m = test::tiny_backbone();
    SamplerConfig c;
    c.num_inference_steps = 0;
    EXPECT_THROW(sample(m, Prompt::parse("a red circle"), c, nullptr), InvalidArgument);
}

TEST(Sampler, TrajectoryLengthIsStepsPlusOne) {
    const Backbone m = test::tiny_backbone();
    SamplerConfig c;
    c.num_inference_steps = 5;
    const auto traj = sample_trajectory(m, Prompt::parse("a red circle"), c, nullptr);
    EXPECT_EQ(traj.size(), 6u);
    EXPECT_TRUE(bitwise_equal(traj.back().data, seed_noise(m.config(), c.seed).data));
}

TEST(Sampler, SameSeedIsDeterministicAndSeedsDiffer) {
    const Backbone m = test::tiny_backbone();
    const Prompt p = Prompt::parse("a red circle");
    SamplerConfig c;
    c.num_inference_steps = 4;
    c.guidance_scale = 3.0;
    const Latent a = sample(m, p, c, nullptr), b = sample(m, p, c, nullptr);
    EXPECT_TRUE(bitwise_equal(a.data, b.data));
    c.seed = 1;
    EXPECT_GT(l2_distance(a, sample(m, p, c, nullptr)), 0.0);
}

TEST(Sampler, SingleStepMatchesHandRolledUpdate) {
    const Backbone m = test::tiny_backbone();
    const Prompt p = Prompt::parse("a blue square");
    SamplerConfig c;
    c.num_inference_steps = 1;
    c.seed = 11;
    const Latent zT = seed_noise(m.config(), c.seed);
    const Mat eps = m.predict_noise(zT, 999, p, nullptr, false).eps_pred.data;
    const double ab = m.schedule().alpha_bar(999);
    const Latent out = sample(m, p, c, nullptr);
    for (Eigen::Index i = 0; i < zT.data.size(); ++i) {
        const double x0 = (zT.data.data()[i] - std::sqrt(1.0 - ab) * eps.data()[i]) / std::sqrt(ab);
        EXPECT_NEAR(out.data.data()[i], x0, 1e-12 * std::max(1.0, std::abs(x0)));
    }
}

TEST(Sampler, GuidanceOneSkipsUnconditionalPass) {
    const Backbone m = test::tiny_backbone();
    const Prompt p = Prompt::parse("a blue square");
    const Latent z = seed_noise(m.config(), 3);
    const Mat direct = m.predict_noise(z, 500, p, nullptr, false).eps_pred.data;
    EXPECT_TRUE(bitwise_equal(detail::guided_eps(m, z, 500, p, nullptr, 1.0), direct));
}

TEST(Inversion, RoundTripOnToyModel) {
    const Backbone& m = test::fixture_backbone();
    const auto spec = corpus::enumerate_concepts(0)[3];
    const auto r = corpus::render(spec, 5);
    const Prompt p = Prompt::parse(corpus::describe(corpus::fill_template("a photo of [V] {shape}", r.attributes), r.attributes));
    const Latent z0 = m.encode(r.image);
    SamplerConfig c;
    const auto inv = invert(m, z0, p, nullptr, c.num_inference_steps);
    ASSERT_EQ(inv.size(), static_cast<size_t>(c.num_inference_steps) + 1);
    const Latent back = denoise_from(m, inv.back(), p, c, nullptr);
    EXPECT_LE(relative_l2_error(back, z0), 5e-2);
}

} // namespace
} // namespace pqr
