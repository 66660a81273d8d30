#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pqr/image_io.hpp"
#include "pqr/tensor.hpp"
#include "pqr/vocab.hpp"

namespace pqr::corpus {

using RGB = std::array<double, 3>;

inline RGB color_rgb(const std::string& name) {
    if (name == "red") return {0.85, 0.10, 0.10};
    if (name == "green") return {0.10, 0.70, 0.20};
    if (name == "blue") return {0.15, 0.25, 0.90};
    if (name == "yellow") return {0.95, 0.85, 0.10};
    if (name == "purple") return {0.55, 0.15, 0.70};
    if (name == "orange") return {0.95, 0.50, 0.05};
    if (name == "white") return {1.0, 1.0, 1.0};
    if (name == "gray") return {0.5, 0.5, 0.5};
    if (name == "black") return {0.0, 0.0, 0.0};
    if (name == "cyan") return {0.55, 0.90, 0.95};
    throw InvalidArgument("unknown color '" + name + "'");
}

struct ConceptSpec {
    std::string id;
    std::string shape = "circle";
    std::string color = "red";
    std::string texture = "solid";
    double size_min = 12.0; // half-extent in pixels
    double size_max = 17.0;
    double position_jitter = 7.0;
    std::vector<std::string> backgrounds = words::backgrounds;

    bool operator==(const ConceptSpec&) const = default;

    void validate() const {
        auto has = [](const std::vector<std::string>& v, const std::string& s) {
            return std::find(v.begin(), v.end(), s) != v.end();
        };
        require(has(words::shapes, shape), "concept: unknown shape '" + shape + "'");
        require(has(words::colors, color), "concept: unknown color '" + color + "'");
        require(has(words::textures, texture), "concept: unknown texture '" + texture + "'");
        require(size_min > 0 && size_max >= size_min, "concept: bad size range");
        require(position_jitter >= 0, "concept: negative position jitter");
        require(!backgrounds.empty(), "concept: no backgrounds");
        for (const auto& b : backgrounds) require(has(words::backgrounds, b), "concept: unknown background '" + b + "'");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ConceptSpec, id, shape, color, texture, size_min, size_max, position_jitter, backgrounds)

/// Ground truth for one rendered image.
struct Attributes {
    std::string shape;
    std::string color;
    RGB rgb{};
    std::string texture;
    std::string background;
    double center_row = 0;
    double center_col = 0;
    double size = 0;

    bool operator==(const Attributes&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Attributes, shape, color, rgb, texture, background, center_row, center_col, size)

struct Rendered {
    Image image;
    Attributes attributes;
};

/// Membership of a shape-local offset (dy, dx) for half-extent s.
inline bool inside_shape(const std::string& shape, double dy, double dx, double s) {
    if (shape == "circle") return dx * dx + dy * dy <= s * s;
    if (shape == "square") return std::abs(dx) <= 0.85 * s && std::abs(dy) <= 0.85 * s;
    if (shape == "diamond") return std::abs(dx) + std::abs(dy) <= 1.1 * s;
    if (shape == "ring") {
        const double r2 = dx * dx + dy * dy;
        return r2 <= s * s && r2 >= 0.3 * s * s;
    }
    if (shape == "triangle") {
        // Apex up, base at +0.8s.
        if (dy > 0.8 * s || dy < -s) return false;
        const double half_width = (dy + s) / 1.8;
        return std::abs(dx) <= half_width;
    }
    throw InvalidArgument("unknown shape '" + shape + "'");
}

inline RGB texture_color(const std::string& texture, const RGB& base, double y, double x) {
    if (texture == "solid") return base;
    if (texture == "striped") {
        const bool light = std::fmod(std::floor((x + y) / 4.0), 2.0) != 0.0;
        if (!light) return base;
        return {0.35 * base[0] + 0.65, 0.35 * base[1] + 0.65, 0.35 * base[2] + 0.65};
    }
    if (texture == "dotted") {
        const double fy = std::fmod(y, 8.0) - 4.0, fx = std::fmod(x, 8.0) - 4.0;
        if (fy * fy + fx * fx > 4.5) return base;
        return {0.3 * base[0], 0.3 * base[1], 0.3 * base[2]};
    }
    throw InvalidArgument("unknown texture '" + texture + "'");
}

/// Deterministic 4x4-supersampled rendering of one concept instance.
inline Rendered render(const ConceptSpec& spec, uint64_t seed, int height = 64, int width = 64) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Attributes a;
    a.shape = spec.shape;
    a.color = spec.color;
    a.rgb = color_rgb(spec.color);
    a.texture = spec.texture;
    a.size = spec.size_min + (spec.size_max - spec.size_min) * unit(rng);
    a.center_row = height / 2.0 + spec.position_jitter * (2.0 * unit(rng) - 1.0);
    a.center_col = width / 2.0 + spec.position_jitter * (2.0 * unit(rng) - 1.0);
    a.background = spec.backgrounds[static_cast<size_t>(unit(rng) * double(spec.backgrounds.size())) % spec.backgrounds.size()];
    const RGB bg = color_rgb(a.background);

    constexpr int ss = 4;
    Image img(height, width, 3, Space::pixel);
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c) {
            RGB acc{0, 0, 0};
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double y = r + (sy + 0.5) / ss, x = c + (sx + 0.5) / ss;
                    const double dy = y - a.center_row, dx = x - a.center_col;
                    const RGB px = inside_shape(a.shape, dy, dx, a.size) ? texture_color(a.texture, a.rgb, dy, dx) : bg;
                    for (int k = 0; k < 3; ++k) acc[static_cast<size_t>(k)] += px[static_cast<size_t>(k)];
                }
            for (int k = 0; k < 3; ++k) img.at(r, c, k) = acc[static_cast<size_t>(k)] / (ss * ss);
        }
    // Quantize to the 8-bit grid so in-memory images equal their PNG round trip.
    img.data = img.data.unaryExpr([](double v) { return std::round(v * 255.0) / 255.0; });
    return {std::move(img), a};
}

inline constexpr const char* concept_placeholder = "[V]";

inline const std::vector<std::string>& default_caption_templates() {
    static const std::vector<std::string> t = {"a photo of [V] {shape} on {background} background",
                                               "[V] {shape} on {background} background", "a photo of [V] {shape}"};
    return t;
}

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

/// Fills {shape}/{color}/{texture}/{background} slots; leaves [V] in place.
inline std::string fill_template(const std::string& tmpl, const Attributes& a) {
    std::string s = replace_all(tmpl, "{shape}", a.shape);
    s = replace_all(s, "{color}", a.color);
    s = replace_all(s, "{texture}", a.texture);
    return replace_all(s, "{background}", a.background);
}

/// Caption with the concept slot spelled out as attributes ("red striped"),
/// as used for backbone training.
inline std::string describe(const std::string& caption, const Attributes& a) {
    return replace_all(caption, concept_placeholder, a.color + " " + a.texture);
}

/// Caption with the concept slot bound to the learned concept token.
inline std::string personalize(const std::string& caption) {
    return replace_all(caption, concept_placeholder, words::concept_token);
}

struct Row {
    std::string path; // relative to the corpus root
    std::string concept_id;
    std::string caption;
    uint64_t seed = 0;
    Attributes attributes;

    bool operator==(const Row&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Row, path, concept_id, caption, seed, attributes)

struct Dataset {
    std::filesystem::path root;
    uint64_t seed = 0;
    int image_h = 64;
    int image_w = 64;
    std::vector<std::string> templates;
    std::vector<ConceptSpec> concepts;
    std::vector<Row> rows;

    bool operator==(const Dataset& o) const {
        return seed == o.seed && image_h == o.image_h && image_w == o.image_w && templates == o.templates &&
               concepts == o.concepts && rows == o.rows;
    }

    Image load_image(const Row& row) const { return read_png(root / row.path); }

    std::vector<const Row*> rows_for(const std::string& concept_id) const {
        std::vector<const Row*> out;
        for (const auto& r : rows)
            if (r.concept_id == concept_id) out.push_back(&r);
        return out;
    }

    const ConceptSpec& concept_spec(const std::string& id) const {
        for (const auto& c : concepts)
            if (c.id == id) return c;
        throw InvalidArgument("unknown concept '" + id + "'");
    }
};

/// Every (shape, color, texture) combination, in a seed-dependent order.
inline std::vector<ConceptSpec> enumerate_concepts(uint64_t seed) {
    std::vector<ConceptSpec> all;
    for (const auto& s : words::shapes)
        for (const auto& c : words::colors)
            for (const auto& t : words::textures) {
                ConceptSpec spec;
                spec.shape = s;
                spec.color = c;
                spec.texture = t;
                all.push_back(spec);
            }
    std::mt19937_64 rng(seed);
    std::shuffle(all.begin(), all.end(), rng);
    for (size_t i = 0; i < all.size(); ++i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "c%03zu", i);
        all[i].id = buf;
    }
    return all;
}

struct CorpusConfig {
    int n_concepts = 40;
    int images_per_concept = 5;
    std::vector<std::string> caption_templates = default_caption_templates();
    uint64_t seed = 0;
    int image_h = 64;
    int image_w = 64;
};

inline nlohmann::json to_manifest(const Dataset& d) {
    return {{"version", 1},       {"seed", d.seed},         {"image_h", d.image_h}, {"image_w", d.image_w},
            {"templates", d.templates}, {"concepts", d.concepts}, {"rows", d.rows}};
}

/// Builds the dataset in memory (images are rendered on demand by `write`).
inline Dataset plan_corpus(const CorpusConfig& cfg) {
    require(cfg.n_concepts >= 1, "corpus: n_concepts must be >= 1");
    require(cfg.images_per_concept >= 1, "corpus: images_per_concept must be >= 1");
    require(!cfg.caption_templates.empty(), "corpus: no caption templates");
    for (const auto& t : cfg.caption_templates)
        require(t.find(concept_placeholder) != std::string::npos, "corpus: caption template lacks the [V] slot: " + t);
    auto all = enumerate_concepts(cfg.seed);
    require(static_cast<size_t>(cfg.n_concepts) <= all.size(), "corpus: more concepts requested than combinations exist");
    Dataset d;
    d.seed = cfg.seed;
    d.image_h = cfg.image_h;
    d.image_w = cfg.image_w;
    d.templates = cfg.caption_templates;
    d.concepts.assign(all.begin(), all.begin() + cfg.n_concepts);
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    for (const auto& spec : d.concepts) {
        for (int i = 0; i < cfg.images_per_concept; ++i) {
            Row row;
            row.concept_id = spec.id;
            row.seed = rng();
            row.path = "images/" + spec.id + "_" + std::to_string(i) + ".png";
            row.attributes = render(spec, row.seed, cfg.image_h, cfg.image_w).attributes;
            const auto& tmpl = d.templates[static_cast<size_t>(i) % d.templates.size()];
            row.caption = fill_template(tmpl, row.attributes);
            d.rows.push_back(std::move(row));
        }
    }
    return d;
}

/// Renders every row into `root/images` and writes `root/manifest.json`.
inline Dataset make_corpus(const CorpusConfig& cfg, const std::filesystem::path& root) {
    Dataset d = plan_corpus(cfg);
    d.root = root;
    std::error_code ec;
    std::filesystem::create_directories(root / "images", ec);
    if (ec) throw IoError("cannot create " + (root / "images").string() + ": " + ec.message());
    for (const auto& row : d.rows) {
        const auto& spec = d.concept_spec(row.concept_id);
        write_png(root / row.path, render(spec, row.seed, d.image_h, d.image_w).image);
    }
    const auto tmp = root / "manifest.json.tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << to_manifest(d).dump(2) << "\n";
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, root / "manifest.json");
    return d;
}

inline Dataset load_corpus(const std::filesystem::path& root) {
    std::ifstream in(root / "manifest.json");
    if (!in) throw IoError("missing corpus manifest " + (root / "manifest.json").string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed corpus manifest: ") + e.what());
    }
    Dataset d;
    d.root = root;
    d.seed = j.at("seed").get<uint64_t>();
    d.image_h = j.at("image_h").get<int>();
    d.image_w = j.at("image_w").get<int>();
    d.templates = j.at("templates").get<std::vector<std::string>>();
    d.concepts = j.at("concepts").get<std::vector<ConceptSpec>>();
    d.rows = j.at("rows").get<std::vector<Row>>();
    return d;
}

} // namespace pqr::corpus
