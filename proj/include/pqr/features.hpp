#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "pqr/model.hpp"
#include "pqr/sampler.hpp"

namespace pqr {

/// A per-location field on an h x w grid, stored (h*w) x d.
struct FeatureMap {
    int h = 0;
    int w = 0;
    Mat data;

    bool operator==(const FeatureMap& o) const { return h == o.h && w == o.w && bitwise_equal(data, o.data); }
};

struct AppearanceFeatures {
    std::map<std::string, FeatureMap> per_layer;
    int source_t = 0;
};

struct CrossAttnMaps {
    std::map<std::string, FeatureMap> per_layer; // d == 1, values in [0,1]
    int source_t = 0;
};

struct ExtractionConfig {
    int t = 999;
    std::vector<std::string> sa_layers = {"sa1"};
    std::vector<std::string> ca_layers = {"ca0", "ca1"};
    bool add_noise = false;
    uint64_t noise_seed = 0;

    void validate(const NoiseSchedule& schedule) const {
        schedule.check_t(t);
        const auto& ids = instrumented_layers();
        for (const auto& l : sa_layers)
            require(std::find(ids.begin(), ids.end(), l) != ids.end() && !is_cross_attention(l),
                    "extraction: '" + l + "' is not a self-attention layer");
        for (const auto& l : ca_layers)
            require(std::find(ids.begin(), ids.end(), l) != ids.end() && is_cross_attention(l),
                    "extraction: '" + l + "' is not a cross-attention layer");
    }
};

/// Bilinear interpolation weights (align_corners = false) for sampling an
/// src_h x src_w grid at continuous positions (row, col) given in that grid's
/// pixel coordinates. Returns an n x (src_h*src_w) operator.
inline Mat bilinear_operator(const std::vector<std::pair<double, double>>& positions, int src_h, int src_w) {
    Mat s = Mat::Zero(static_cast<Eigen::Index>(positions.size()), static_cast<Eigen::Index>(src_h) * src_w);
    for (size_t i = 0; i < positions.size(); ++i) {
        const double y = std::clamp(positions[i].first, 0.0, double(src_h - 1));
        const double x = std::clamp(positions[i].second, 0.0, double(src_w - 1));
        const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
        const int y1 = std::min(y0 + 1, src_h - 1), x1 = std::min(x0 + 1, src_w - 1);
        const double fy = y - y0, fx = x - x0;
        const auto row = static_cast<Eigen::Index>(i);
        s(row, y0 * src_w + x0) += (1 - fy) * (1 - fx);
        s(row, y0 * src_w + x1) += (1 - fy) * fx;
        s(row, y1 * src_w + x0) += fy * (1 - fx);
        s(row, y1 * src_w + x1) += fy * fx;
    }
    return s;
}

/// Position of cell (r, c) of an h x w grid expressed in a dst_h x dst_w grid.
inline std::pair<double, double> rescale_coord(int r, int c, int h, int w, int dst_h, int dst_w) {
    return {(r + 0.5) * double(dst_h) / h - 0.5, (c + 0.5) * double(dst_w) / w - 0.5};
}

/// Resize operator from src grid to dst grid, (dst_h*dst_w) x (src_h*src_w).
inline Mat resize_operator(int src_h, int src_w, int dst_h, int dst_w) {
    std::vector<std::pair<double, double>> pos;
    pos.reserve(static_cast<size_t>(dst_h) * dst_w);
    for (int r = 0; r < dst_h; ++r)
        for (int c = 0; c < dst_w; ++c) pos.push_back(rescale_coord(r, c, dst_h, dst_w, src_h, src_w));
    return bilinear_operator(pos, src_h, src_w);
}

/// Differentiable features of one capture pass.
struct FeatureGraph {
    std::map<std::string, std::pair<FeatureMap, ag::Var>> sa; // FeatureMap carries h, w only
    std::map<std::string, std::pair<FeatureMap, ag::Var>> ca; // (h*w) x 1
    std::vector<LayerTrace> layers;
    int source_t = 0;
};

inline Latent extraction_input(const Backbone& model, const Latent& z, const ExtractionConfig& config) {
    if (!config.add_noise) return z;
    Latent eps = seed_noise(model.config(), config.noise_seed);
    return forward_diffuse(z, config.t, eps, model.schedule());
}

/// One capture pass under already-bound weights.
inline FeatureGraph extract_graph(const Backbone& model, const Latent& z, const Prompt& prompt, const BoundWeights& w,
                                  const ExtractionConfig& config) {
    config.validate(model.schedule());
    prompt.validate();
    require(config.ca_layers.empty() || prompt.concept_index.has_value(),
            "extract: prompt has no concept token but cross-attention maps were requested");
    model.check_latent(z);
    const Latent input = extraction_input(model, z, config);
    GraphOutput g = model.forward_graph(ag::Var::constant(input.data), config.t, prompt, w, true);
    FeatureGraph f;
    f.source_t = config.t;
    for (const auto& layer : g.layers) {
        FeatureMap shape{layer.h, layer.w, Mat()};
        if (std::find(config.sa_layers.begin(), config.sa_layers.end(), layer.id) != config.sa_layers.end())
            f.sa.emplace(layer.id, std::make_pair(shape, layer.activations));
        if (std::find(config.ca_layers.begin(), config.ca_layers.end(), layer.id) != config.ca_layers.end())
            f.ca.emplace(layer.id, std::make_pair(shape, ag::col(layer.attention, *prompt.concept_index)));
    }
    f.layers = std::move(g.layers);
    return f;
}

inline AppearanceFeatures appearance_values(const FeatureGraph& g) {
    AppearanceFeatures a;
    a.source_t = g.source_t;
    for (const auto& [id, p] : g.sa) a.per_layer[id] = FeatureMap{p.first.h, p.first.w, p.second.value()};
    return a;
}

inline CrossAttnMaps cross_attention_values(const FeatureGraph& g) {
    CrossAttnMaps m;
    m.source_t = g.source_t;
    for (const auto& [id, p] : g.ca) m.per_layer[id] = FeatureMap{p.first.h, p.first.w, p.second.value()};
    return m;
}

/// Appearance features and concept cross-attention maps from a single
/// denoising pass. `z` is not modified.
inline std::pair<AppearanceFeatures, CrossAttnMaps> extract(const Backbone& model, const Latent& z, const Prompt& prompt,
                                                            const AdapterParams* adapters, const ExtractionConfig& config) {
    FeatureGraph g = extract_graph(model, z, prompt, model.bind(adapters), config);
    return {appearance_values(g), cross_attention_values(g)};
}

inline std::pair<AppearanceFeatures, CrossAttnMaps> extract_reference(const Backbone& model, const Image& x_ref,
                                                                      const Prompt& ref_prompt, const AdapterParams* adapters,
                                                                      const ExtractionConfig& config) {
    return extract(model, model.encode(x_ref), ref_prompt, adapters, config);
}

struct ObjectMask {
    Grid mask;              // h x w x 1, entries 0 or 1
    bool degenerate = false; // constant map: all-ones fallback
    int area() const { return static_cast<int>(mask.data.sum()); }
};

/// Averages the layers' maps at the finest layer resolution and keeps the
/// ceil((1 - q) * N) highest locations, ties broken by row-major order.
inline ObjectMask object_mask(const CrossAttnMaps& maps, double threshold_quantile) {
    require(!maps.per_layer.empty(), "object_mask: no cross-attention maps");
    require(threshold_quantile > 0.0 && threshold_quantile < 1.0, "object_mask: quantile must lie in (0,1)");
    int h = 0, w = 0;
    for (const auto& [_, m] : maps.per_layer)
        if (m.h * m.w > h * w) {
            h = m.h;
            w = m.w;
        }
    Vec avg = Vec::Zero(static_cast<Eigen::Index>(h) * w);
    for (const auto& [_, m] : maps.per_layer) {
        if (m.h == h && m.w == w) avg += m.data.col(0);
        else avg += resize_operator(m.h, m.w, h, w) * m.data.col(0);
    }
    avg /= double(maps.per_layer.size());

    ObjectMask out;
    out.mask = Grid(h, w, 1, Space::latent);
    if (avg.maxCoeff() - avg.minCoeff() <= 1e-12) {
        out.mask.data.setOnes();
        out.degenerate = true;
        return out;
    }
    const int n = h * w;
    const int keep = std::clamp(static_cast<int>(std::ceil((1.0 - threshold_quantile) * n - 1e-9)), 0, n);
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return avg(a) > avg(b); });
    for (int i = 0; i < keep; ++i) out.mask.data(order[static_cast<size_t>(i)], 0) = 1.0;
    return out;
}

} // namespace pqr
