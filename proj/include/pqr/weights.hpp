#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pqr/tensor.hpp"
#include "pqr/vocab.hpp"

namespace pqr {

enum class VaeKind { patch, identity };

inline const char* to_string(VaeKind k) { return k == VaeKind::patch ? "patch" : "identity"; }

/// Architecture of the desk-scale backbone. Two resolutions, each with an
/// optional convolution, one self-attention and one cross-attention block.
struct ModelConfig {
    int image_h = 64;
    int image_w = 64;
    int image_c = 3;
    VaeKind vae = VaeKind::patch;
    int patch = 4;
    int latent_c = 4;
    int d0 = 24;
    int d1 = 32;
    int d_text = 16;
    int heads = 2;
    int time_dim = 16;
    bool mlp = true;
    bool conv = true; // 3x3 residual convolution at the start of each level and before the output
    int vocab_size = Vocabulary::standard().size();

    int latent_h() const { return vae == VaeKind::patch ? image_h / patch : image_h; }
    int latent_w() const { return vae == VaeKind::patch ? image_w / patch : image_w; }
    int latent_channels() const { return vae == VaeKind::patch ? latent_c : image_c; }

    void validate() const {
        require(image_h > 0 && image_w > 0 && image_c > 0, "model: image dims must be positive");
        if (vae == VaeKind::patch) {
            require(patch >= 1 && image_h % patch == 0 && image_w % patch == 0,
                    "model: image dims must be divisible by the patch size");
            require(latent_c >= 1 && latent_c <= patch * patch * image_c, "model: bad latent channel count");
        }
        require(latent_h() % 2 == 0 && latent_w() % 2 == 0, "model: latent dims must be even");
        require(heads >= 1 && d0 % heads == 0 && d1 % heads == 0, "model: widths must divide into heads");
        require(d_text >= 1 && time_dim >= 2 && time_dim % 2 == 0, "model: bad text/time widths");
        require(vocab_size >= 2, "model: vocabulary too small");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"image_h", c.image_h}, {"image_w", c.image_w}, {"image_c", c.image_c},
         {"vae", to_string(c.vae)}, {"patch", c.patch}, {"latent_c", c.latent_c},
         {"d0", c.d0}, {"d1", c.d1}, {"d_text", c.d_text}, {"heads", c.heads},
         {"time_dim", c.time_dim}, {"mlp", c.mlp}, {"conv", c.conv}, {"vocab_size", c.vocab_size}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.image_h = j.value("image_h", d.image_h);
    c.image_w = j.value("image_w", d.image_w);
    c.image_c = j.value("image_c", d.image_c);
    const std::string vae = j.value("vae", std::string("patch"));
    require(vae == "patch" || vae == "identity", "model.vae must be 'patch' or 'identity'");
    c.vae = vae == "patch" ? VaeKind::patch : VaeKind::identity;
    c.patch = j.value("patch", d.patch);
    c.latent_c = j.value("latent_c", d.latent_c);
    c.d0 = j.value("d0", d.d0);
    c.d1 = j.value("d1", d.d1);
    c.d_text = j.value("d_text", d.d_text);
    c.heads = j.value("heads", d.heads);
    c.time_dim = j.value("time_dim", d.time_dim);
    c.mlp = j.value("mlp", d.mlp);
    c.conv = j.value("conv", d.conv);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
}

/// Named parameter tensors. Iteration order is the lexicographic name order,
/// which is also the on-disk order.
class Weights {
public:
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const Mat& at(const std::string& name) const {
        auto it = tensors_.find(name);
        require(it != tensors_.end(), "unknown weight '" + name + "'");
        return it->second;
    }
    Mat& at(const std::string& name) {
        auto it = tensors_.find(name);
        require(it != tensors_.end(), "unknown weight '" + name + "'");
        return it->second;
    }
    void set(const std::string& name, Mat m) { tensors_[name] = std::move(m); }

    const std::map<std::string, Mat>& tensors() const { return tensors_; }
    std::map<std::string, Mat>& tensors() { return tensors_; }

    size_t parameter_count() const {
        size_t n = 0;
        for (const auto& [_, m] : tensors_) n += static_cast<size_t>(m.size());
        return n;
    }

    bool bitwise_equal(const Weights& o) const {
        if (tensors_.size() != o.tensors_.size()) return false;
        for (const auto& [k, m] : tensors_) {
            auto it = o.tensors_.find(k);
            if (it == o.tensors_.end() || !pqr::bitwise_equal(m, it->second)) return false;
        }
        return true;
    }

private:
    std::map<std::string, Mat> tensors_;
};

/// Names of the attention projections that low-rank adapters may target.
inline std::vector<std::string> attention_projection_names() {
    std::vector<std::string> names;
    for (const char* layer : {"sa0", "ca0", "sa1", "ca1"}) {
        for (const char* p : {"q", "k", "v", "o"}) names.push_back(std::string(layer) + "." + p);
    }
    return names;
}

namespace detail {
inline Mat gaussian(Eigen::Index r, Eigen::Index c, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, stddev);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = nd(rng);
    return m;
}
} // namespace detail

inline Weights init_denoiser_weights(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    Weights w;
    auto dense = [&](const std::string& name, int in, int out, double gain = 1.0) {
        w.set(name + ".w", detail::gaussian(in, out, gain / std::sqrt(double(in)), rng));
    };
    auto bias = [&](const std::string& name, int out) { w.set(name + ".b", Mat::Zero(1, out)); };

    const int c = cfg.latent_channels();
    dense("time", cfg.time_dim, cfg.d0);
    bias("time", cfg.d0);
    dense("time1", cfg.d0, cfg.d1);
    dense("in", c, cfg.d0);
    bias("in", cfg.d0);
    const int widths[2] = {cfg.d0, cfg.d1};
    for (int l = 0; l < 2; ++l) {
        const int d = widths[l];
        const std::string sa = "sa" + std::to_string(l);
        const std::string ca = "ca" + std::to_string(l);
        for (const char* p : {"q", "k", "v"}) w.set(sa + "." + p, detail::gaussian(d, d, 1.0 / std::sqrt(double(d)), rng));
        w.set(sa + ".o", detail::gaussian(d, d, 0.5 / std::sqrt(double(d)), rng));
        w.set(ca + ".q", detail::gaussian(d, d, 1.0 / std::sqrt(double(d)), rng));
        w.set(ca + ".k", detail::gaussian(cfg.d_text, d, 1.0 / std::sqrt(double(cfg.d_text)), rng));
        w.set(ca + ".v", detail::gaussian(cfg.d_text, d, 1.0 / std::sqrt(double(cfg.d_text)), rng));
        w.set(ca + ".o", detail::gaussian(d, d, 0.5 / std::sqrt(double(d)), rng));
        if (cfg.conv) {
            dense("conv" + std::to_string(l), 9 * d, d, 0.5);
            bias("conv" + std::to_string(l), d);
        }
        if (cfg.mlp) {
            const std::string m = "mlp" + std::to_string(l);
            dense(m + ".fc1", d, 2 * d);
            bias(m + ".fc1", 2 * d);
            dense(m + ".fc2", 2 * d, d, 0.5);
            bias(m + ".fc2", d);
        }
    }
    dense("down", cfg.d0, cfg.d1);
    bias("down", cfg.d1);
    dense("up", cfg.d1, cfg.d0);
    bias("up", cfg.d0);
    if (cfg.conv) {
        dense("conv2", 9 * cfg.d0, cfg.d0, 0.5);
        bias("conv2", cfg.d0);
    }
    dense("out", cfg.d0, c, 0.5);
    bias("out", c);
    w.set("text.emb", detail::gaussian(cfg.vocab_size, cfg.d_text, 1.0, rng));
    return w;
}

} // namespace pqr
