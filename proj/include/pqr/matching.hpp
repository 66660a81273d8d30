#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pqr/features.hpp"

namespace pqr {

struct Coord {
    int row = 0;
    int col = 0;
    bool operator==(const Coord&) const = default;
};

struct MatchSet {
    std::vector<std::pair<Coord, Coord>> pairs; // (reference, generated)
    std::vector<double> scores;                 // cosine similarity of each pair
    int h = 0;                                  // descriptor grid resolution
    int w = 0;
    int requested = 0;

    size_t size() const { return pairs.size(); }
    bool truncated() const { return static_cast<int>(pairs.size()) < requested; }
    bool operator==(const MatchSet&) const = default;
};

inline nlohmann::json to_json_value(const MatchSet& m) {
    nlohmann::json pairs = nlohmann::json::array();
    for (size_t i = 0; i < m.pairs.size(); ++i) {
        const auto& [r, g] = m.pairs[i];
        pairs.push_back({{"ref", {r.row, r.col}}, {"gen", {g.row, g.col}}, {"score", m.scores[i]}});
    }
    return {{"resolution", {m.h, m.w}}, {"requested", m.requested}, {"pairs", std::move(pairs)}};
}

enum class SamplingMode { all_masked, uniform_masked };

struct MatchConfig {
    int n = 256;
    std::string descriptor_layer = "sa0";
    int descriptor_t = 999;
    SamplingMode sampling = SamplingMode::all_masked;
    uint64_t seed = 0;
    bool cycle_consistency = false;

    void validate() const { require(n >= 1, "matching: n must be >= 1"); }
};

/// Cosine similarity with an explicit left-to-right accumulation, so equal
/// inputs always give bit-identical scores. Zero vectors score 0.
inline double cosine(const double* a, const double* b, Eigen::Index d, Eigen::Index stride_a, Eigen::Index stride_b) {
    double dot = 0, na = 0, nb = 0;
    for (Eigen::Index k = 0; k < d; ++k) {
        const double x = a[k * stride_a], y = b[k * stride_b];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace detail {

/// Row-major copy so each location's descriptor is contiguous.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Best match of reference location `i` among all generated locations;
/// the first (smallest row-major index) maximizer wins.
inline std::pair<int, double> best_match(const RowMat& ref, int i, const RowMat& gen) {
    int best = 0;
    double best_s = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < gen.rows(); ++j) {
        const double s = cosine(ref.row(i).data(), gen.row(j).data(), ref.cols(), 1, 1);
        if (s > best_s) {
            best_s = s;
            best = static_cast<int>(j);
        }
    }
    return {best, best_s};
}

} // namespace detail

/// Descriptor grid for correspondence search: the designated layer's
/// activations from a capture pass at descriptor_t. Computed without
/// gradient tracking.
inline FeatureMap dift_descriptors(const Backbone& model, const Latent& z, const Prompt& prompt,
                                   const AdapterParams* adapters, const MatchConfig& config) {
    const auto& ids = instrumented_layers();
    require(std::find(ids.begin(), ids.end(), config.descriptor_layer) != ids.end(),
            "matching: unknown descriptor layer '" + config.descriptor_layer + "'");
    model.schedule().check_t(config.descriptor_t);
    auto out = model.predict_noise(z, config.descriptor_t, prompt, adapters, true);
    for (const auto& l : *out.captured)
        if (l.id == config.descriptor_layer) return FeatureMap{l.h, l.w, l.activations};
    throw InvalidArgument("matching: descriptor layer was not captured");
}

/// Descriptor field taken from an existing capture (used when the feature
/// pass and the descriptor pass share a timestep).
inline FeatureMap descriptors_from(const std::vector<LayerTrace>& layers, const std::string& id) {
    for (const auto& l : layers)
        if (l.id == id) return FeatureMap{l.h, l.w, l.activations.value()};
    throw InvalidArgument("matching: unknown descriptor layer '" + id + "'");
}

/// Reference -> generated nearest-neighbor correspondences under cosine
/// similarity. Up to config.n reference points are drawn from the mask.
inline MatchSet match(const FeatureMap& desc_ref, const FeatureMap& desc_gen, const Grid& mask_ref,
                      const MatchConfig& config) {
    config.validate();
    require(desc_ref.data.cols() == desc_gen.data.cols(), "match: descriptor widths differ");
    require(desc_ref.h == desc_gen.h && desc_ref.w == desc_gen.w, "match: descriptor grids differ in resolution");
    require(desc_ref.data.rows() == static_cast<Eigen::Index>(desc_ref.h) * desc_ref.w &&
                desc_gen.data.rows() == static_cast<Eigen::Index>(desc_gen.h) * desc_gen.w,
            "match: descriptor grid shape mismatch");

    // Mask may be at a different resolution than the descriptors; sample it
    // at each descriptor cell's center.
    std::vector<int> candidates;
    for (int r = 0; r < desc_ref.h; ++r)
        for (int c = 0; c < desc_ref.w; ++c) {
            int mr = r, mc = c;
            if (mask_ref.h != desc_ref.h || mask_ref.w != desc_ref.w) {
                mr = std::min(mask_ref.h - 1, static_cast<int>((r + 0.5) * mask_ref.h / desc_ref.h));
                mc = std::min(mask_ref.w - 1, static_cast<int>((c + 0.5) * mask_ref.w / desc_ref.w));
            }
            if (mask_ref.at(mr, mc, 0) > 0.5) candidates.push_back(r * desc_ref.w + c);
        }
    if (candidates.empty()) throw EmptyMask("match: reference mask is empty");

    std::vector<int> chosen;
    const size_t n = static_cast<size_t>(config.n);
    if (candidates.size() <= n) {
        chosen = candidates;
    } else if (config.sampling == SamplingMode::all_masked) {
        for (size_t i = 0; i < n; ++i) chosen.push_back(candidates[i * candidates.size() / n]);
    } else {
        std::mt19937_64 rng(config.seed);
        std::vector<int> pool = candidates;
        std::shuffle(pool.begin(), pool.end(), rng);
        chosen.assign(pool.begin(), pool.begin() + static_cast<long>(n));
        std::sort(chosen.begin(), chosen.end());
    }

    const detail::RowMat ref = desc_ref.data, gen = desc_gen.data;
    MatchSet out;
    out.h = desc_ref.h;
    out.w = desc_ref.w;
    out.requested = config.n;
    for (int i : chosen) {
        auto [j, s] = detail::best_match(ref, i, gen);
        if (config.cycle_consistency && detail::best_match(gen, j, ref).first != i) continue;
        out.pairs.push_back({Coord{i / desc_ref.w, i % desc_ref.w}, Coord{j / desc_gen.w, j % desc_gen.w}});
        out.scores.push_back(s);
    }
    return out;
}

} // namespace pqr
