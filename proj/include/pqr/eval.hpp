#pragma once

// Alignment metrics over pluggable embedders:
//   image alignment  mean cosine over all (generated, reference) pairs
//   text alignment   mean cosine between the prompt and each generated image
// Two deterministic desk-scale embedders are provided. Both return unit
// vectors; zero-information inputs still map to a unit vector via a fixed
// bias component.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pqr/corpus.hpp"
#include "pqr/sampler.hpp"

namespace pqr {

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::string name() const = 0;
    virtual Vec embed_image(const Image& image) const = 0;
};

class TextImageEmbedder : public Embedder {
public:
    virtual Vec embed_text(const Prompt& prompt) const = 0;
};

namespace detail {

inline Vec unit(Vec v) {
    const double n = v.norm();
    require(n > 0.0 && std::isfinite(n), "embedder produced a zero or non-finite vector");
    return v / n;
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

/// Per-channel median of the outer frame of the image.
inline corpus::RGB border_color(const Image& img, int frame = 4) {
    corpus::RGB out{};
    for (int k = 0; k < 3; ++k) {
        std::vector<double> v;
        for (int r = 0; r < img.h; ++r)
            for (int c = 0; c < img.w; ++c)
                if (r < frame || c < frame || r >= img.h - frame || c >= img.w - frame) v.push_back(clamp01(img.at(r, c, k)));
        auto mid = v.begin() + static_cast<long>(v.size() / 2);
        std::nth_element(v.begin(), mid, v.end());
        out[static_cast<size_t>(k)] = *mid;
    }
    return out;
}

inline double color_dist2(const corpus::RGB& a, const corpus::RGB& b) {
    double s = 0;
    for (size_t k = 0; k < 3; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return s;
}

/// Soft foreground weight per pixel: distance from the border color, ramped.
inline Mat foreground_weights(const Image& img, const corpus::RGB& bg) {
    Mat w(img.h, img.w);
    for (int r = 0; r < img.h; ++r)
        for (int c = 0; c < img.w; ++c) {
            corpus::RGB px{clamp01(img.at(r, c, 0)), clamp01(img.at(r, c, 1)), clamp01(img.at(r, c, 2))};
            w(r, c) = clamp01((std::sqrt(color_dist2(px, bg)) - 0.1) / 0.2);
        }
    return w;
}

struct Moments {
    double mass = 0, cy = 0, cx = 0;
    double mu20 = 0, mu02 = 0, mu11 = 0, mu30 = 0, mu03 = 0, mu21 = 0, mu12 = 0, mu40 = 0, mu04 = 0, mu22 = 0;
};

inline Moments moments(const Mat& w) {
    Moments m;
    for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) {
            m.mass += w(r, c);
            m.cy += w(r, c) * (r + 0.5);
            m.cx += w(r, c) * (c + 0.5);
        }
    if (m.mass <= 0) return m;
    m.cy /= m.mass;
    m.cx /= m.mass;
    for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) {
            const double v = w(r, c), y = r + 0.5 - m.cy, x = c + 0.5 - m.cx;
            m.mu20 += v * x * x;
            m.mu02 += v * y * y;
            m.mu11 += v * x * y;
            m.mu30 += v * x * x * x;
            m.mu03 += v * y * y * y;
            m.mu21 += v * x * x * y;
            m.mu12 += v * x * y * y;
            m.mu40 += v * x * x * x * x;
            m.mu04 += v * y * y * y * y;
            m.mu22 += v * x * x * y * y;
        }
    return m;
}

/// Softmax of -d / tau over a list of squared distances.
inline Vec soft_assign(const std::vector<double>& d2, double tau) {
    Vec p(static_cast<Eigen::Index>(d2.size()));
    const double lo = *std::min_element(d2.begin(), d2.end());
    for (size_t i = 0; i < d2.size(); ++i) p(static_cast<Eigen::Index>(i)) = std::exp(-(d2[i] - lo) / tau);
    return p / p.sum();
}

} // namespace detail

/// Per-channel soft color histograms concatenated with normalized central
/// moments of the foreground (pixels that differ from the border color).
class HistogramMomentEmbedder : public Embedder {
public:
    explicit HistogramMomentEmbedder(int bins = 8, double moment_weight = 1.0) : bins_(bins), moment_weight_(moment_weight) {
        require(bins >= 2, "HistogramMomentEmbedder: bins must be >= 2");
    }

    std::string name() const override { return "histogram-moments"; }

    Vec embed_image(const Image& img) const override {
        require(img.c == 3 && img.h > 0 && img.w > 0, "embed_image: expected a non-empty RGB image");
        Vec v = Vec::Zero(3 * bins_ + 8);
        const double n = double(img.h) * img.w;
        for (int k = 0; k < 3; ++k)
            for (int r = 0; r < img.h; ++r)
                for (int c = 0; c < img.w; ++c) {
                    // Linear (tent) binning keeps the histogram continuous in pixel values.
                    const double x = detail::clamp01(img.at(r, c, k)) * (bins_ - 1);
                    const int b0 = std::min(static_cast<int>(std::floor(x)), bins_ - 2);
                    const double f = x - b0;
                    v(k * bins_ + b0) += (1 - f) / n;
                    v(k * bins_ + b0 + 1) += f / n;
                }
        const Mat fg = detail::foreground_weights(img, detail::border_color(img));
        const auto m = detail::moments(fg);
        const Eigen::Index o = 3 * bins_;
        if (m.mass > 1e-9) {
            const double a2 = m.mass * m.mass, a25 = std::pow(m.mass, 2.5);
            v(o + 0) = moment_weight_ * std::sqrt(m.mass / n);
            v(o + 1) = moment_weight_ * 4.0 * m.mu20 / a2;
            v(o + 2) = moment_weight_ * 4.0 * m.mu02 / a2;
            v(o + 3) = moment_weight_ * 4.0 * m.mu11 / a2;
            v(o + 4) = moment_weight_ * 10.0 * m.mu30 / a25;
            v(o + 5) = moment_weight_ * 10.0 * m.mu03 / a25;
            v(o + 6) = moment_weight_ * 10.0 * m.mu21 / a25;
            v(o + 7) = moment_weight_ * 10.0 * m.mu12 / a25;
        }
        return detail::unit(std::move(v));
    }

private:
    int bins_;
    double moment_weight_;
};

/// Bag-of-attributes embedder over the closed caption vocabulary. Text is
/// one-hot per attribute group for the words present; images get soft
/// attribute scores recovered from pixels.
class AttributeEmbedder : public TextImageEmbedder {
public:
    AttributeEmbedder() {
        for (const auto& s : words::shapes) {
            corpus::ConceptSpec spec;
            spec.shape = s;
            spec.color = "red";
            spec.texture = "solid";
            spec.size_min = spec.size_max = 14.5;
            spec.position_jitter = 0.0;
            spec.backgrounds = {"white"};
            shape_prototypes_.push_back(shape_descriptor(corpus::render(spec, 0).image));
        }
    }

    std::string name() const override { return "attribute-bag"; }

    static constexpr double bias = 0.25;

    static Eigen::Index dims() {
        return static_cast<Eigen::Index>(words::shapes.size() + words::colors.size() + words::textures.size() +
                                         words::backgrounds.size() + 1);
    }

    Vec embed_text(const Prompt& prompt) const override {
        prompt.validate();
        const auto& vocab = Vocabulary::standard();
        Vec v = Vec::Zero(dims());
        for (int id : prompt.token_ids) {
            const std::string& w = vocab.token(id);
            Eigen::Index off = 0;
            for (const auto* group : {&words::shapes, &words::colors, &words::textures, &words::backgrounds}) {
                auto it = std::find(group->begin(), group->end(), w);
                if (it != group->end()) v(off + (it - group->begin())) = 1.0;
                off += static_cast<Eigen::Index>(group->size());
            }
        }
        v(dims() - 1) = bias;
        return detail::unit(std::move(v));
    }

    Vec embed_image(const Image& img) const override {
        require(img.c == 3 && img.h > 0 && img.w > 0, "embed_image: expected a non-empty RGB image");
        const Attrs a = recover(img);
        Vec v(dims());
        v << a.shape, a.color, a.texture, a.background, Vec::Constant(1, bias);
        return detail::unit(std::move(v));
    }

    /// Soft attribute scores; each group sums to 1 (or 0 when no object is found).
    struct Attrs {
        Vec shape, color, texture, background;
        double foreground_mass = 0;
    };

    Attrs recover(const Image& img) const {
        Attrs a;
        a.shape = Vec::Zero(static_cast<Eigen::Index>(words::shapes.size()));
        a.color = Vec::Zero(static_cast<Eigen::Index>(words::colors.size()));
        a.texture = Vec::Zero(static_cast<Eigen::Index>(words::textures.size()));

        const corpus::RGB bg = detail::border_color(img);
        std::vector<double> d2;
        for (const auto& b : words::backgrounds) d2.push_back(detail::color_dist2(bg, corpus::color_rgb(b)));
        a.background = detail::soft_assign(d2, background_tau);

        const Mat fg = detail::foreground_weights(img, bg);
        a.foreground_mass = fg.sum();
        if (a.foreground_mass < 4.0) return a;

        // Per-pixel soft assignment over (color, variant) where the variants are
        // the base color and the striped-light / dotted-dark shades.
        const size_t nc = words::colors.size();
        Vec variant = Vec::Zero(3);
        for (int r = 0; r < img.h; ++r)
            for (int c = 0; c < img.w; ++c) {
                const double w = fg(r, c);
                if (w <= 0) continue;
                corpus::RGB px{detail::clamp01(img.at(r, c, 0)), detail::clamp01(img.at(r, c, 1)), detail::clamp01(img.at(r, c, 2))};
                std::vector<double> dd;
                for (size_t k = 0; k < nc; ++k) {
                    const auto base = corpus::color_rgb(words::colors[k]);
                    dd.push_back(detail::color_dist2(px, base));
                    dd.push_back(detail::color_dist2(px, corpus::texture_color("striped", base, 0.0, 4.0)));
                    dd.push_back(detail::color_dist2(px, corpus::texture_color("dotted", base, 4.0, 4.0)));
                }
                const Vec p = detail::soft_assign(dd, pixel_tau);
                for (size_t k = 0; k < nc; ++k)
                    for (int s = 0; s < 3; ++s) {
                        a.color(static_cast<Eigen::Index>(k)) += w * p(static_cast<Eigen::Index>(3 * k + s));
                        variant(s) += w * p(static_cast<Eigen::Index>(3 * k + s));
                    }
            }
        a.color /= a.color.sum();
        variant /= variant.sum();
        // Light and dark shade fractions against each texture's expected pair;
        // dots cover a small area, so the dark fraction is scaled up.
        const std::array<std::array<double, 2>, 3> profile = {{{0.0, 0.0}, {0.5, 0.0}, {0.0, 0.05}}};
        std::vector<double> td;
        for (const auto& pr : profile) {
            const double dl = variant(1) - pr[0], dd = 5.0 * (variant(2) - pr[1]);
            td.push_back(dl * dl + dd * dd);
        }
        a.texture = detail::soft_assign(td, texture_tau);

        const Vec d = shape_descriptor(img);
        std::vector<double> sd;
        for (const auto& p : shape_prototypes_) sd.push_back((d - p).squaredNorm());
        a.shape = detail::soft_assign(sd, shape_tau);
        return a;
    }

    /// Scale- and translation-invariant shape features of the foreground:
    /// spread, vertical skew, fourth-order anisotropy, and center occupancy.
    static Vec shape_descriptor(const Image& img) {
        const Mat fg = detail::foreground_weights(img, detail::border_color(img));
        const auto m = detail::moments(fg);
        Vec d = Vec::Zero(4);
        if (m.mass < 1e-9) return d;
        const double a2 = m.mass * m.mass;
        d(0) = 6.0 * (m.mu20 + m.mu02) / a2;
        d(1) = 10.0 * m.mu03 / std::pow(m.mass, 2.5);
        d(2) = m.mu22 > 0 ? 0.5 * std::log((m.mu40 + m.mu04) / (2.0 * m.mu22)) : 0.0;
        const double rad = 0.3 * std::sqrt(m.mass / M_PI);
        double in = 0, cnt = 0;
        for (Eigen::Index r = 0; r < fg.rows(); ++r)
            for (Eigen::Index c = 0; c < fg.cols(); ++c) {
                const double y = r + 0.5 - m.cy, x = c + 0.5 - m.cx;
                if (x * x + y * y <= rad * rad) {
                    in += fg(r, c);
                    cnt += 1;
                }
            }
        d(3) = cnt > 0 ? in / cnt : 0.0;
        return d;
    }

    static constexpr double background_tau = 0.05;
    static constexpr double pixel_tau = 0.02;
    static constexpr double texture_tau = 0.005;
    static constexpr double shape_tau = 0.05;

private:
    std::vector<Vec> shape_prototypes_;
};

inline double cosine_similarity(const Vec& a, const Vec& b) {
    require(a.size() == b.size(), "cosine: dimension mismatch");
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.dot(b) / (na * nb);
}

inline double image_alignment(const std::vector<Image>& generated, const std::vector<Image>& references, const Embedder& e) {
    require(!generated.empty() && !references.empty(), "image_alignment: image sets must be non-empty");
    std::vector<Vec> g, r;
    for (const auto& x : generated) g.push_back(e.embed_image(x));
    for (const auto& x : references) r.push_back(e.embed_image(x));
    double s = 0;
    for (const auto& a : g)
        for (const auto& b : r) s += cosine_similarity(a, b);
    return s / (double(g.size()) * double(r.size()));
}

inline double text_alignment(const std::vector<Image>& generated, const Prompt& prompt, const TextImageEmbedder& e) {
    require(!generated.empty(), "text_alignment: image set must be non-empty");
    const Vec t = e.embed_text(prompt);
    double s = 0;
    for (const auto& x : generated) s += cosine_similarity(t, e.embed_image(x));
    return s / double(generated.size());
}

struct MeanStd {
    double mean = 0;
    double std = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
    require(!v.empty(), "mean_std: empty sample");
    MeanStd m;
    for (double x : v) m.mean += x;
    m.mean /= double(v.size());
    for (double x : v) m.std += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(m.std / double(v.size()));
    return m;
}

struct SuiteQuery {
    std::string id;
    Prompt prompt;
    uint64_t seed = 0;
    std::vector<Image> references;
};

struct AlignmentRow {
    std::string query_id;
    double image_alignment = 0;
    double text_alignment = 0;
};

struct AlignmentReport {
    MeanStd image_alignment;
    MeanStd text_alignment;
    std::vector<AlignmentRow> rows;
    std::string image_embedder;
    std::string text_embedder;
};

struct PairedReport {
    AlignmentReport without; // unrefined arm
    AlignmentReport with;    // refined arm
    double image_win_rate = 0;
    double text_win_rate = 0;
};

inline AlignmentReport alignment_report(const std::vector<SuiteQuery>& queries, const std::vector<Image>& generated,
                                        const Embedder& image_e, const TextImageEmbedder& text_e) {
    require(!queries.empty(), "evaluate: at least one query is required");
    require(generated.size() == queries.size(), "evaluate: one generated image per query is required");
    AlignmentReport r;
    r.image_embedder = image_e.name();
    r.text_embedder = text_e.name();
    std::vector<double> ia, ta;
    for (size_t i = 0; i < queries.size(); ++i) {
        AlignmentRow row{queries[i].id, image_alignment({generated[i]}, queries[i].references, image_e),
                         text_alignment({generated[i]}, queries[i].prompt, text_e)};
        ia.push_back(row.image_alignment);
        ta.push_back(row.text_alignment);
        r.rows.push_back(std::move(row));
    }
    r.image_alignment = mean_std(ia);
    r.text_alignment = mean_std(ta);
    return r;
}

/// Paired report from already generated arms (same query order).
inline PairedReport evaluate_paired(const std::vector<SuiteQuery>& queries, const std::vector<Image>& without,
                                    const std::vector<Image>& with, const Embedder& image_e, const TextImageEmbedder& text_e) {
    PairedReport p;
    p.without = alignment_report(queries, without, image_e, text_e);
    p.with = alignment_report(queries, with, image_e, text_e);
    int wi = 0, wt = 0;
    for (size_t i = 0; i < queries.size(); ++i) {
        wi += p.with.rows[i].image_alignment > p.without.rows[i].image_alignment;
        wt += p.with.rows[i].text_alignment > p.without.rows[i].text_alignment;
    }
    p.image_win_rate = double(wi) / double(queries.size());
    p.text_win_rate = double(wt) / double(queries.size());
    return p;
}

/// Generates both arms with identical (prompt, seed) per query and compares
/// them. `before[i]` / `after[i]` are the adapters of query i in each arm.
inline PairedReport evaluate_suite(const Backbone& model, const std::vector<SuiteQuery>& queries,
                                   const std::vector<AdapterParams>& before, const std::vector<AdapterParams>& after,
                                   const SamplerConfig& sampler, const Embedder& image_e, const TextImageEmbedder& text_e) {
    require(!queries.empty(), "evaluate_suite: at least one query is required");
    require(before.size() == queries.size() && after.size() == queries.size(),
            "evaluate_suite: one adapter set per query and arm is required");
    std::vector<Image> g0, g1;
    for (size_t i = 0; i < queries.size(); ++i) {
        require(before[i].same_layout(after[i]), "evaluate_suite: checkpoint mismatch between arms for query " + queries[i].id);
        SamplerConfig sc = sampler;
        sc.seed = queries[i].seed;
        g0.push_back(model.decode(sample(model, queries[i].prompt, sc, &before[i])));
        g1.push_back(model.decode(sample(model, queries[i].prompt, sc, &after[i])));
    }
    return evaluate_paired(queries, g0, g1, image_e, text_e);
}

inline nlohmann::json to_json_value(const AlignmentReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows)
        rows.push_back({{"query", row.query_id}, {"image_alignment", row.image_alignment}, {"text_alignment", row.text_alignment}});
    return {{"image_alignment", {{"mean", r.image_alignment.mean}, {"std", r.image_alignment.std}}},
            {"text_alignment", {{"mean", r.text_alignment.mean}, {"std", r.text_alignment.std}}},
            {"embedders", {{"image", r.image_embedder}, {"text", r.text_embedder}}},
            {"rows", std::move(rows)}};
}

inline nlohmann::json to_json_value(const PairedReport& p) {
    return {{"without", to_json_value(p.without)},
            {"with", to_json_value(p.with)},
            {"win_rate", {{"image_alignment", p.image_win_rate}, {"text_alignment", p.text_win_rate}}}};
}

inline std::string to_csv(const PairedReport& p) {
    std::string s = "query,image_alignment_without,image_alignment_with,text_alignment_without,text_alignment_with\n";
    char buf[256];
    for (size_t i = 0; i < p.without.rows.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g", p.without.rows[i].image_alignment,
                      p.with.rows[i].image_alignment, p.without.rows[i].text_alignment, p.with.rows[i].text_alignment);
        s += p.without.rows[i].query_id + "," + buf + "\n";
    }
    return s;
}

} // namespace pqr
