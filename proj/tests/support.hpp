#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "pqr/pqr.hpp"

namespace pqr::test {

inline std::filesystem::path data_dir() { return PQR_TEST_DATA_DIR; }

inline std::filesystem::path fixture_backbone_path() { return data_dir() / "backbone"; }

/// The checked-in toy backbone, loaded once per process.
inline const Backbone& fixture_backbone() {
    static const LoadedBackbone loaded = load_backbone(fixture_backbone_path());
    return loaded.model;
}

/// A small untrained model on 8x8 pixels with an identity autoencoder.
inline ModelConfig tiny_config() {
    ModelConfig c;
    c.image_h = 8;
    c.image_w = 8;
    c.vae = VaeKind::identity;
    c.d0 = 8;
    c.d1 = 8;
    c.d_text = 8;
    c.heads = 2;
    c.time_dim = 4;
    return c;
}

inline Backbone tiny_backbone(uint64_t seed = 7, ModelConfig cfg = tiny_config()) {
    ScheduleSpec s;
    return Backbone(cfg, s.build(), init_denoiser_weights(cfg, seed), Autoencoder::identity(cfg));
}

inline Image random_image(int h, int w, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(h, w, 3, Space::pixel);
    for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data.data()[i] = u(rng);
    return img;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

/// Composite adapters with nonzero low-rank factors so every parameter
/// carries gradient.
inline AdapterParams random_adapters(const Backbone& model, uint64_t seed, int rank = 2) {
    AdapterInit init;
    init.rank = rank;
    init.b_init_scale = 0.05;
    init.seed = seed;
    return init_adapters(model.weights(), init);
}

inline std::string shape_prompt(const std::string& shape, const std::string& tail = "") {
    return "a photo of <v> " + shape + (tail.empty() ? "" : " " + tail);
}

} // namespace pqr::test
