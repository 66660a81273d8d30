#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "../support.hpp"

namespace fs = std::filesystem;

namespace pqr {
namespace {

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("pqr_unit_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

TEST(Render, SameSpecAndSeedGiveIdenticalPngBytes) {
    const fs::path dir = scratch_dir("render");
    const auto spec = corpus::enumerate_concepts(0)[11];
    write_png(dir / "a.png", corpus::render(spec, 42).image);
    write_png(dir / "b.png", corpus::render(spec, 42).image);
    EXPECT_EQ(file_bytes(dir / "a.png"), file_bytes(dir / "b.png"));
    fs::remove_all(dir);
}

TEST(Render, AttributeColorIsRequestedRgb) {
    for (const auto& spec : corpus::enumerate_concepts(3)) {
        const auto r = corpus::render(spec, 1);
        EXPECT_EQ(r.attributes.color, spec.color);
        EXPECT_EQ(r.attributes.rgb, corpus::color_rgb(spec.color));
        EXPECT_EQ(r.attributes.shape, spec.shape);
        EXPECT_EQ(r.attributes.texture, spec.texture);
    }
}

TEST(Render, SolidObjectCentreHasRequestedColor) {
    corpus::ConceptSpec spec;
    spec.shape = "square";
    spec.color = "green";
    spec.position_jitter = 0;
    const auto r = corpus::render(spec, 0);
    const int cy = static_cast<int>(r.attributes.center_row), cx = static_cast<int>(r.attributes.center_col);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(r.image.at(cy, cx, k), corpus::color_rgb("green")[static_cast<size_t>(k)], 0.5 / 255.0);
}

TEST(Render, DifferentSeedsKeepAttributesButMoveJitter) {
    auto spec = corpus::enumerate_concepts(0)[4];
    spec.backgrounds = {"gray"};
    const auto a = corpus::render(spec, 1), b = corpus::render(spec, 2);
    EXPECT_EQ(a.attributes.shape, b.attributes.shape);
    EXPECT_EQ(a.attributes.color, b.attributes.color);
    EXPECT_EQ(a.attributes.texture, b.attributes.texture);
    EXPECT_EQ(a.attributes.background, b.attributes.background);
    EXPECT_GT((a.image.data - b.image.data).cwiseAbs().sum(), 0.0);
}

TEST(Corpus, ManifestRowCountAndPlaceholders) {
    corpus::CorpusConfig cfg;
    cfg.n_concepts = 7;
    cfg.images_per_concept = 3;
    const auto d = corpus::plan_corpus(cfg);
    EXPECT_EQ(d.rows.size(), 21u);
    EXPECT_EQ(d.concepts.size(), 7u);
    for (const auto& r : d.rows) EXPECT_NE(r.caption.find(corpus::concept_placeholder), std::string::npos) << r.caption;
}

TEST(Corpus, ReloadReproducesDataset) {
    const fs::path dir = scratch_dir("corpus");
    corpus::CorpusConfig cfg;
    cfg.n_concepts = 3;
    cfg.images_per_concept = 2;
    cfg.seed = 9;
    const auto made = corpus::make_corpus(cfg, dir);
    const auto loaded = corpus::load_corpus(dir);
    EXPECT_EQ(made, loaded);
    for (const auto& r : loaded.rows) {
        const Image disk = loaded.load_image(r);
        const Image fresh = corpus::render(loaded.concept_spec(r.concept_id), r.seed).image;
        EXPECT_LE((disk.data - fresh.data).cwiseAbs().maxCoeff(), 0.5 / 255.0 + 1e-12);
    }
    fs::remove_all(dir);
}

TEST(Corpus, RejectsTemplatesWithoutConceptSlotAndTooManyConcepts) {
    corpus::CorpusConfig cfg;
    cfg.caption_templates = {"a photo of {shape}"};
    EXPECT_THROW(corpus::plan_corpus(cfg), InvalidArgument);
    cfg = corpus::CorpusConfig{};
    cfg.n_concepts = 1000;
    EXPECT_THROW(corpus::plan_corpus(cfg), InvalidArgument);
}

TEST(Corpus, LoadingMissingManifestIsIoError) {
    EXPECT_THROW(corpus::load_corpus(fs::temp_directory_path() / "pqr_definitely_missing"), IoError);
}

TEST(Checkpoint, AdapterRoundTripIsExactAtStoragePrecision) {
    const fs::path dir = scratch_dir("ckpt");
    const Backbone m = test::tiny_backbone();
    const AdapterParams a = quantize_like_checkpoint(test::random_adapters(m, 5));
    save_adapters(dir / "a", a, {{"concept_id", "c001"}});
    const auto loaded = load_adapters(dir / "a");
    EXPECT_TRUE(loaded.params.bitwise_equal(a));
    EXPECT_EQ(loaded.metadata["concept_id"], "c001");
    fs::remove_all(dir);
}

TEST(Checkpoint, BackboneRoundTripPreservesPredictions) {
    const fs::path dir = scratch_dir("bb");
    const Backbone m = quantize_like_checkpoint(test::tiny_backbone());
    save_backbone(dir / "b", m, ScheduleSpec{});
    const auto loaded = load_backbone(dir / "b");
    const Latent z = seed_noise(m.config(), 2);
    const Prompt p = Prompt::parse("a photo of <v> ring");
    EXPECT_TRUE(bitwise_equal(m.predict_noise(z, 10, p, nullptr, false).eps_pred.data,
                              loaded.model.predict_noise(z, 10, p, nullptr, false).eps_pred.data));
    fs::remove_all(dir);
}

TEST(Checkpoint, MissingDirectoryIsIoError) {
    EXPECT_THROW(load_backbone(fs::temp_directory_path() / "pqr_missing_backbone"), IoError);
}

// ----------------------------------------------------------------- config

TEST(Config, DottedOverrideCreatesNestedFields) {
    nlohmann::json j = nlohmann::json::object();
    apply_override(j, "refine.lambdas.ca=0");
    apply_override(j, "refine.prompt=a photo of <v> ring");
    apply_override(j, "refine.sampler.guidance_scale=2.5");
    EXPECT_EQ(j["refine"]["lambdas"]["ca"], 0);
    EXPECT_EQ(j["refine"]["prompt"], "a photo of <v> ring");
    EXPECT_EQ(j["refine"]["sampler"]["guidance_scale"], 2.5);
    EXPECT_THROW(apply_override(j, "no_equals_sign"), ConfigError);
}

TEST(Config, RefineDefaultsAppearInSnapshot) {
    const nlohmann::json raw = {{"prompt", "a photo of <v> circle"}};
    const RefineConfig c = refine_config_from(Section(raw, "refine"));
    const nlohmann::json snap = to_json_value(c);
    EXPECT_EQ(snap["lambdas"]["sa"], 1.0);
    EXPECT_EQ(snap["lambdas"]["ca"], 1.0);
    EXPECT_EQ(snap["lambdas"]["ldm"], 1.0);
    EXPECT_EQ(snap["num_updates"], 1);
    EXPECT_EQ(snap["extraction"]["t"], 999);
    const RefineConfig again = refine_config_from(Section(snap, "refine"));
    EXPECT_EQ(to_json_value(again), snap);
}

TEST(Config, ErrorsCarryFieldPath) {
    auto path_of_error = [](const nlohmann::json& raw) {
        try {
            (void)refine_config_from(Section(raw, "refine"));
        } catch (const ConfigError& e) {
            return e.path();
        }
        return std::string("no error");
    };
    EXPECT_EQ(path_of_error(nlohmann::json::object()), "refine.prompt");
    EXPECT_EQ(path_of_error({{"prompt", "a photo of ring"}}), "refine.prompt");
    EXPECT_EQ(path_of_error({{"prompt", "a photo of <v> ring"}, {"learning_rate", "fast"}}), "refine.learning_rate");
    EXPECT_EQ(path_of_error({{"prompt", "a photo of <v> ring"}, {"lambdas", {{"sa", -1}}}}), "refine.lambdas.sa");
    EXPECT_EQ(path_of_error({{"prompt", "a photo of <v> ring"}, {"matching", {{"sampling", "weird"}}}}),
              "refine.matching.sampling");
    EXPECT_EQ(path_of_error({{"prompt", "a photo of <v> unicorn"}}), "refine.prompt");
}

} // namespace
} // namespace pqr
