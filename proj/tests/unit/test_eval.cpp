#include <cmath>

#include <gtest/gtest.h>

#include "../support.hpp"

namespace pqr {
namespace {

/// Looks up a fixed embedding by the image's top-left red value.
class TableEmbedder : public TextImageEmbedder {
public:
    explicit TableEmbedder(std::vector<Vec> table, Vec text = Vec()) : table_(std::move(table)), text_(std::move(text)) {}
    std::string name() const override { return "table"; }
    Vec embed_image(const Image& img) const override { return table_.at(static_cast<size_t>(std::lround(img.data(0, 0)))); }
    Vec embed_text(const Prompt&) const override { return text_; }

private:
    std::vector<Vec> table_;
    Vec text_;
};

Image tagged(int tag) {
    Image img(2, 2, 3, Space::pixel);
    img.data(0, 0) = tag;
    return img;
}

Vec vec(std::initializer_list<double> v) {
    Vec out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

TEST(ImageAlignment, SelfSimilarityIsOne) {
    const HistogramMomentEmbedder e;
    const Image x = corpus::render(corpus::enumerate_concepts(0)[2], 3).image;
    EXPECT_NEAR(image_alignment({x}, {x}, e), 1.0, 1e-12);
}

TEST(ImageAlignment, OrthogonalEmbeddingsGiveZero) {
    const TableEmbedder e({vec({1, 0}), vec({0, 1})});
    EXPECT_EQ(image_alignment({tagged(0)}, {tagged(1)}, e), 0.0);
}

TEST(ImageAlignment, TwoByTwoSetIsMeanOfPairwiseCosines) {
    const std::vector<Vec> table = {vec({1, 0, 0}), vec({0.6, 0.8, 0}), vec({0, 0, 1}), vec({0.5, 0.5, std::sqrt(0.5)})};
    const TableEmbedder e(table);
    double oracle = 0;
    for (int g : {0, 1})
        for (int r : {2, 3}) {
            double dot = 0, ng = 0, nr = 0;
            for (int k = 0; k < 3; ++k) {
                dot += table[g](k) * table[r](k);
                ng += table[g](k) * table[g](k);
                nr += table[r](k) * table[r](k);
            }
            oracle += dot / std::sqrt(ng * nr) / 4.0;
        }
    EXPECT_NEAR(image_alignment({tagged(0), tagged(1)}, {tagged(2), tagged(3)}, e), oracle, 1e-15);
}

TEST(TextAlignment, ConstantAndOrthogonalStubs) {
    const Prompt p = Prompt::parse("a red circle");
    EXPECT_NEAR(text_alignment({tagged(0), tagged(1)}, p, TableEmbedder({vec({0, 2}), vec({0, 3})}, vec({0, 1}))), 1.0, 1e-15);
    EXPECT_EQ(text_alignment({tagged(0)}, p, TableEmbedder({vec({1, 0})}, vec({0, 1}))), 0.0);
}

TEST(TextAlignment, FixtureMatchesScalarLoop) {
    const Vec t = vec({0.2, 0.9, 0.1});
    const std::vector<Vec> table = {vec({1, 2, 3}), vec({-1, 0.5, 0}), vec({0.3, 0.3, 0.9})};
    const TableEmbedder e(table, t);
    double oracle = 0;
    for (const auto& v : table) {
        double dot = 0, nv = 0, nt = 0;
        for (int k = 0; k < 3; ++k) {
            dot += v(k) * t(k);
            nv += v(k) * v(k);
            nt += t(k) * t(k);
        }
        oracle += dot / std::sqrt(nv * nt) / 3.0;
    }
    EXPECT_NEAR(text_alignment({tagged(0), tagged(1), tagged(2)}, Prompt::parse("a red circle"), e), oracle, 1e-15);
}

TEST(PairedReport, WinRatesMatchHandCountOnFiveQueries) {
    // Image alignment per query: without vs with.
    //   q0 0.8 -> 0.9 win, q1 0.5 -> 0.4 loss, q2 0.6 -> 0.6 tie, q3 0.0 -> 0.6 win, q4 1.0 -> 0.8 loss  => 2/5
    // Text alignment is constant, so every query ties => 0/5.
    const std::vector<Vec> table = {vec({1, 0}), vec({0.8, 0.6}), vec({0.9, std::sqrt(1 - 0.81)}), vec({0.5, std::sqrt(0.75)}),
                                    vec({0.4, std::sqrt(0.84)}), vec({0.6, 0.8}), vec({0, 1})};
    const TableEmbedder e(table, vec({1, 1}));
    std::vector<SuiteQuery> qs;
    for (int i = 0; i < 5; ++i) qs.push_back({"q" + std::to_string(i), Prompt::parse("a red circle"), 0, {tagged(0)}});
    // Cosine with reference (1,0) is the first coordinate; index = tag.
    auto with_first = [&](double c) {
        for (size_t i = 0; i < table.size(); ++i)
            if (std::abs(table[i](0) - c) < 1e-12) return tagged(static_cast<int>(i));
        throw std::logic_error("no table entry");
    };
    const std::vector<Image> without = {with_first(0.8), with_first(0.5), with_first(0.6), with_first(0.0), with_first(1.0)};
    const std::vector<Image> with = {with_first(0.9), with_first(0.4), with_first(0.6), with_first(0.6), with_first(0.8)};
    const TableEmbedder text_stub({vec({1, 1}), vec({1, 1}), vec({1, 1}), vec({1, 1}), vec({1, 1}), vec({1, 1}), vec({1, 1})},
                                  vec({1, 1}));
    const PairedReport p = evaluate_paired(qs, without, with, e, text_stub);
    EXPECT_DOUBLE_EQ(p.image_win_rate, 2.0 / 5.0);
    EXPECT_DOUBLE_EQ(p.text_win_rate, 0.0);
    EXPECT_EQ(p.with.rows.size(), 5u);
    EXPECT_NEAR(p.without.image_alignment.mean, (0.8 + 0.5 + 0.6 + 0.0 + 1.0) / 5, 1e-12);
    EXPECT_NEAR(p.with.image_alignment.mean, (0.9 + 0.4 + 0.6 + 0.6 + 0.8) / 5, 1e-12);
}

TEST(PairedReport, CsvHasBothArmsPerQuery) {
    const TableEmbedder e({vec({1, 0})}, vec({1, 0}));
    std::vector<SuiteQuery> qs = {{"a", Prompt::parse("a red circle"), 0, {tagged(0)}},
                                  {"b", Prompt::parse("a red circle"), 1, {tagged(0)}}};
    const std::string csv = to_csv(evaluate_paired(qs, {tagged(0), tagged(0)}, {tagged(0), tagged(0)}, e, e));
    EXPECT_EQ(csv.substr(0, csv.find('\n')),
              "query,image_alignment_without,image_alignment_with,text_alignment_without,text_alignment_with");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(EvaluateSuite, IdenticalArmsGiveZeroDeltasAndOneRowPerQuery) {
    const Backbone m = test::tiny_backbone();
    const AdapterParams a = test::random_adapters(m, 1);
    SamplerConfig sc;
    sc.num_inference_steps = 3;
    std::vector<SuiteQuery> qs;
    for (int i = 0; i < 3; ++i)
        qs.push_back({"q" + std::to_string(i), Prompt::parse("a photo of <v> circle"), static_cast<uint64_t>(i),
                      {test::random_image(8, 8, 100 + static_cast<uint64_t>(i))}});
    const std::vector<AdapterParams> arms(3, a);
    const PairedReport p = evaluate_suite(m, qs, arms, arms, sc, HistogramMomentEmbedder{}, AttributeEmbedder{});
    ASSERT_EQ(p.with.rows.size(), 3u);
    for (size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(p.with.rows[i].image_alignment, p.without.rows[i].image_alignment);
        EXPECT_EQ(p.with.rows[i].text_alignment, p.without.rows[i].text_alignment);
    }
    EXPECT_EQ(p.image_win_rate, 0.0);
}

TEST(EvaluateSuite, RejectsMismatchedCheckpoints) {
    const Backbone m = test::tiny_backbone();
    std::vector<SuiteQuery> qs = {{"q", Prompt::parse("a photo of <v> circle"), 0, {test::random_image(8, 8, 1)}}};
    EXPECT_THROW(evaluate_suite(m, qs, {test::random_adapters(m, 1, 2)}, {test::random_adapters(m, 1, 3)}, SamplerConfig{},
                                HistogramMomentEmbedder{}, AttributeEmbedder{}),
                 InvalidArgument);
}

TEST(Embedders, OutputsAreUnitNormAcrossCorpus) {
    const HistogramMomentEmbedder h;
    const AttributeEmbedder a;
    const auto plan = corpus::plan_corpus(corpus::CorpusConfig{});
    for (const auto& row : plan.rows) {
        const Image img = corpus::render(plan.concept_spec(row.concept_id), row.seed).image;
        EXPECT_NEAR(h.embed_image(img).norm(), 1.0, 1e-6);
        EXPECT_NEAR(a.embed_image(img).norm(), 1.0, 1e-6);
        EXPECT_NEAR(a.embed_text(Prompt::parse(corpus::describe(row.caption, row.attributes))).norm(), 1.0, 1e-6);
    }
    EXPECT_NEAR(h.embed_image(test::random_image(16, 16, 4)).norm(), 1.0, 1e-6);
}

TEST(AttributeEmbedder, RecoversAttributesOfCleanRenders) {
    const AttributeEmbedder a;
    int total = 0, correct = 0;
    for (const auto& spec : corpus::enumerate_concepts(0)) {
        const auto r = corpus::render(spec, 3);
        const auto attrs = a.recover(r.image);
        auto argmax = [](const Vec& v) {
            Eigen::Index i;
            v.maxCoeff(&i);
            return static_cast<size_t>(i);
        };
        const bool ok = words::shapes[argmax(attrs.shape)] == r.attributes.shape &&
                        words::colors[argmax(attrs.color)] == r.attributes.color &&
                        words::textures[argmax(attrs.texture)] == r.attributes.texture &&
                        words::backgrounds[argmax(attrs.background)] == r.attributes.background;
        correct += ok;
        ++total;
    }
    EXPECT_GE(double(correct) / total, 0.95);
}

TEST(AttributeEmbedder, CaptionOfRenderAlignsBetterThanWrongCaption) {
    const AttributeEmbedder a;
    const auto r = corpus::render(corpus::enumerate_concepts(0)[7], 2);
    const Prompt right = Prompt::parse(corpus::describe("a photo of [V] " + r.attributes.shape, r.attributes));
    corpus::Attributes wrong = r.attributes;
    wrong.color = wrong.color == "red" ? "blue" : "red";
    wrong.background = wrong.background == "white" ? "black" : "white";
    const Prompt bad = Prompt::parse(corpus::describe("a photo of [V] " + wrong.shape, wrong));
    EXPECT_GT(text_alignment({r.image}, right, a), text_alignment({r.image}, bad, a));
}

TEST(MeanStd, PopulationStatistics) {
    const MeanStd m = mean_std({1, 2, 3, 4});
    EXPECT_DOUBLE_EQ(m.mean, 2.5);
    EXPECT_DOUBLE_EQ(m.std, std::sqrt(1.25));
}

} // namespace
} // namespace pqr
