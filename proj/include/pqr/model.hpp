#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pqr/adapters.hpp"
#include "pqr/autoencoder.hpp"
#include "pqr/autograd.hpp"
#include "pqr/schedule.hpp"
#include "pqr/vocab.hpp"
#include "pqr/weights.hpp"

namespace pqr {

/// Ids of the instrumented attention layers, shallow to deep.
inline const std::vector<std::string>& instrumented_layers() {
    static const std::vector<std::string> ids = {"sa0", "ca0", "sa1", "ca1"};
    return ids;
}

inline bool is_cross_attention(const std::string& id) { return id.rfind("ca", 0) == 0; }

/// One instrumented layer's capture inside a differentiation graph.
/// `activations` is the hidden state leaving the attention block (h*w x d);
/// `attention` holds head-averaged softmax weights (h*w x tokens) for
/// cross-attention layers and is invalid for self-attention layers.
struct LayerTrace {
    std::string id;
    int h = 0;
    int w = 0;
    ag::Var activations;
    ag::Var attention;
};

struct GraphOutput {
    ag::Var eps;
    std::vector<LayerTrace> layers; // empty unless capture was requested
};

/// Plain-value capture returned by predict_noise.
struct CapturedLayer {
    std::string id;
    int h = 0;
    int w = 0;
    Mat activations;
    Mat attention;
};

struct DenoiserOutput {
    Latent eps_pred;
    std::optional<std::vector<CapturedLayer>> captured;
};

namespace detail {

inline Mat timestep_embedding(int t, int dim) {
    const int half = dim / 2;
    Mat e(1, dim);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        e(0, i) = std::sin(double(t) * freq);
        e(0, half + i) = std::cos(double(t) * freq);
    }
    return e;
}

/// Fixed 2-D sinusoidal position code, half the channels for rows and half
/// for columns.
inline Mat position_embedding(int h, int w, int dim) {
    Mat p = Mat::Zero(static_cast<Eigen::Index>(h) * w, dim);
    const int half = dim / 2;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            for (int i = 0; i + 1 < half; i += 2) {
                const double f = std::pow(100.0, -double(i) / double(half));
                p(r * w + c, i) = std::sin(r * f);
                p(r * w + c, i + 1) = std::cos(r * f);
                p(r * w + c, half + i) = std::sin(c * f);
                p(r * w + c, half + i + 1) = std::cos(c * f);
            }
        }
    return p * 0.5;
}

/// 2x2 average pooling over an h x w grid as a (h/2*w/2) x (h*w) operator.
inline Mat pool_operator(int h, int w) {
    const int oh = h / 2, ow = w / 2;
    Mat s = Mat::Zero(static_cast<Eigen::Index>(oh) * ow, static_cast<Eigen::Index>(h) * w);
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) s(r * ow + c, (2 * r + dy) * w + 2 * c + dx) = 0.25;
    return s;
}

/// Nearest-neighbor 2x upsampling as a (h*w) x (h/2*w/2) operator.
inline Mat upsample_operator(int h, int w) {
    const int ih = h / 2, iw = w / 2;
    Mat s = Mat::Zero(static_cast<Eigen::Index>(h) * w, static_cast<Eigen::Index>(ih) * iw);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) s(r * w + c, (r / 2) * iw + c / 2) = 1.0;
    return s;
}

} // namespace detail

/// Weight tensors placed into a graph, with adapters already composed.
struct BoundWeights {
    std::map<std::string, ag::Var> vars;
    std::optional<ag::Var> concept_row;

    const ag::Var& operator[](const std::string& name) const {
        auto it = vars.find(name);
        require(it != vars.end(), "missing weight '" + name + "'");
        return it->second;
    }

    static BoundWeights constant(const Weights& w) {
        BoundWeights b;
        for (const auto& [k, m] : w.tensors()) b.vars.emplace(k, ag::Var::constant(m));
        return b;
    }

    /// All denoiser weights as trainable parameters (backbone training).
    static BoundWeights trainable(const Weights& w) {
        BoundWeights b;
        for (const auto& [k, m] : w.tensors()) {
            if (k.rfind("vae.", 0) == 0) continue;
            b.vars.emplace(k, ag::Var::parameter(m));
        }
        return b;
    }

    static BoundWeights with_adapters(const Weights& w, const AdapterVars& a) {
        BoundWeights b = constant(w);
        for (const auto& [name, ab] : a.low_rank) {
            auto it = b.vars.find(name);
            require(it != b.vars.end(), "adapters: unknown projection '" + name + "'");
            it->second = ag::add(it->second, ag::matmul(ab.first, ab.second));
        }
        b.concept_row = a.token_vec;
        return b;
    }
};

/// Two-level attention denoiser. Each level runs
///   self-attention -> cross-attention -> (optional) MLP
/// with pre-normalization and residual connections; levels are joined by
/// 2x2 pooling on the way down and nearest upsampling plus a skip on the way up.
class Denoiser {
public:
    Denoiser() = default;
    explicit Denoiser(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        h0_ = cfg.latent_h();
        w0_ = cfg.latent_w();
        pos0_ = detail::position_embedding(h0_, w0_, cfg.d0);
        pos1_ = detail::position_embedding(h0_ / 2, w0_ / 2, cfg.d1);
        pool_ = detail::pool_operator(h0_, w0_);
        up_ = detail::upsample_operator(h0_, w0_);
    }

    const ModelConfig& config() const { return cfg_; }

    GraphOutput forward(const ag::Var& z, int t, const Prompt& prompt, const BoundWeights& w, bool capture,
                        const Vocabulary& vocab = Vocabulary::standard()) const {
        require(z.rows() == static_cast<Eigen::Index>(h0_) * w0_ && z.cols() == cfg_.latent_channels(),
                "denoiser: latent shape does not match the model configuration");
        using namespace ag;
        GraphOutput out;

        Var text = encode_text(prompt, w, vocab);
        Var temb0 = silu(add(matmul(Var::constant(pqr::detail::timestep_embedding(t, cfg_.time_dim)), w["time.w"]), w["time.b"]));
        Var temb1 = matmul(temb0, w["time1.w"]);

        Var h = add_row(matmul(z, w["in.w"]), w["in.b"]);
        h = add_row(add(h, Var::constant(pos0_)), temb0);
        h = level(h, text, w, 0, h0_, w0_, capture, out);
        Var skip = h;

        Var d = add_row(matmul(left_apply(pool_, h), w["down.w"]), w["down.b"]);
        d = add_row(add(d, Var::constant(pos1_)), temb1);
        d = level(d, text, w, 1, h0_ / 2, w0_ / 2, capture, out);

        Var u = add(add_row(matmul(left_apply(up_, d), w["up.w"]), w["up.b"]), skip);
        if (cfg_.conv) u = add(u, conv3x3(u, w, "conv2", h0_, w0_));
        out.eps = add_row(matmul(u, w["out.w"]), w["out.b"]);
        return out;
    }

private:
    ag::Var encode_text(const Prompt& prompt, const BoundWeights& w, const Vocabulary& vocab) const {
        const int concept_id = vocab.concept_id();
        if (!w.concept_row) return ag::select_rows(w["text.emb"], prompt.token_ids);
        std::vector<ag::Var> rows;
        rows.reserve(prompt.token_ids.size());
        for (int id : prompt.token_ids) {
            rows.push_back(id == concept_id ? *w.concept_row : ag::select_rows(w["text.emb"], {id}));
        }
        return ag::stack_rows(rows);
    }

    struct AttentionResult {
        ag::Var out;
        ag::Var weights; // head-averaged
    };

    AttentionResult attention(const ag::Var& xq, const ag::Var& xkv, const std::string& prefix,
                              const BoundWeights& w, bool want_weights) const {
        using namespace ag;
        Var q = matmul(xq, w[prefix + ".q"]);
        Var k = matmul(xkv, w[prefix + ".k"]);
        Var v = matmul(xkv, w[prefix + ".v"]);
        const Eigen::Index dh = q.cols() / cfg_.heads;
        const double s = 1.0 / std::sqrt(double(dh));
        std::vector<Var> heads;
        Var avg;
        for (int hd = 0; hd < cfg_.heads; ++hd) {
            Var a = softmax_rows(scale(matmul_nt(col_block(q, hd * dh, dh), col_block(k, hd * dh, dh)), s));
            heads.push_back(matmul(a, col_block(v, hd * dh, dh)));
            if (want_weights) avg = avg.valid() ? add(avg, a) : a;
        }
        AttentionResult r;
        r.out = matmul(heads.size() == 1 ? heads.front() : concat_cols(heads), w[prefix + ".o"]);
        if (want_weights) r.weights = cfg_.heads == 1 ? avg : scale(avg, 1.0 / cfg_.heads);
        return r;
    }

    static ag::Var conv3x3(const ag::Var& h, const BoundWeights& w, const std::string& name, int gh, int gw) {
        using namespace ag;
        return add_row(matmul(im2col3x3(silu(layer_norm_rows(h)), gh, gw), w[name + ".w"]), w[name + ".b"]);
    }

    ag::Var level(ag::Var h, const ag::Var& text, const BoundWeights& w, int l, int gh, int gw, bool capture,
                  GraphOutput& out) const {
        using namespace ag;
        const std::string sa = "sa" + std::to_string(l);
        const std::string ca = "ca" + std::to_string(l);

        if (cfg_.conv) h = add(h, conv3x3(h, w, "conv" + std::to_string(l), gh, gw));

        Var hn = layer_norm_rows(h);
        Var self = attention(hn, hn, sa, w, false).out;
        h = add(h, self);
        if (capture) out.layers.push_back({sa, gh, gw, self, Var()});

        auto cross = attention(layer_norm_rows(h), text, ca, w, true);
        h = add(h, cross.out);
        if (capture) out.layers.push_back({ca, gh, gw, h, cross.weights});

        if (cfg_.mlp) {
            const std::string m = "mlp" + std::to_string(l);
            Var f = silu(add_row(matmul(layer_norm_rows(h), w[m + ".fc1.w"]), w[m + ".fc1.b"]));
            h = add(h, add_row(matmul(f, w[m + ".fc2.w"]), w[m + ".fc2.b"]));
        }
        return h;
    }

    ModelConfig cfg_;
    int h0_ = 0;
    int w0_ = 0;
    Mat pos0_, pos1_, pool_, up_;
};

/// A loaded desk-scale diffusion model. Immutable after construction; every
/// query method is const and thread-safe.
class Backbone {
public:
    Backbone() = default;
    Backbone(ModelConfig cfg, NoiseSchedule schedule, Weights weights, Autoencoder vae)
        : cfg_(cfg), schedule_(std::move(schedule)), weights_(std::move(weights)), vae_(std::move(vae)),
          denoiser_(cfg) {
        for (const auto& name : required_weight_names()) require(weights_.contains(name), "backbone: missing weight '" + name + "'");
    }

    const ModelConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const Weights& weights() const { return weights_; }
    const Autoencoder& vae() const { return vae_; }
    const Denoiser& denoiser() const { return denoiser_; }

    std::vector<std::string> required_weight_names() const {
        std::vector<std::string> names = {"time.w", "time.b", "time1.w", "in.w", "in.b", "down.w", "down.b",
                                          "up.w", "up.b", "out.w", "out.b", "text.emb"};
        for (const auto& p : attention_projection_names()) names.push_back(p);
        return names;
    }

    int instrumented_layer_count() const { return static_cast<int>(instrumented_layers().size()); }

    Latent encode(const Image& x) const { return vae_.encode(x); }
    Image decode(const Latent& z) const { return vae_.decode(z); }

    BoundWeights bind(const AdapterParams* adapters, AdapterVars* vars_out = nullptr, bool trainable = false) const {
        if (!adapters) return BoundWeights::constant(weights_);
        adapters->validate(weights_);
        AdapterVars v = AdapterVars::bind(*adapters, trainable);
        BoundWeights b = BoundWeights::with_adapters(weights_, v);
        if (vars_out) *vars_out = std::move(v);
        return b;
    }

    void check_latent(const Latent& z) const {
        require(z.h == cfg_.latent_h() && z.w == cfg_.latent_w() && z.c == cfg_.latent_channels(),
                "latent shape does not match the model configuration");
    }

    GraphOutput forward_graph(const ag::Var& z, int t, const Prompt& prompt, const BoundWeights& w, bool capture) const {
        schedule_.check_t(t);
        prompt.validate();
        return denoiser_.forward(z, t, prompt, w, capture);
    }

    /// eps_theta(z, t, prompt) under the given adapters (nullptr for none).
    DenoiserOutput predict_noise(const Latent& z, int t, const Prompt& prompt, const AdapterParams* adapters,
                                 bool capture) const {
        check_latent(z);
        BoundWeights w = bind(adapters);
        GraphOutput g = forward_graph(ag::Var::constant(z.data), t, prompt, w, capture);
        DenoiserOutput out{Latent(z.h, z.w, z.c, Space::latent, g.eps.value()), std::nullopt};
        if (capture) {
            std::vector<CapturedLayer> layers;
            for (const auto& l : g.layers)
                layers.push_back({l.id, l.h, l.w, l.activations.value(), l.attention.valid() ? l.attention.value() : Mat()});
            out.captured = std::move(layers);
        }
        return out;
    }

private:
    ModelConfig cfg_;
    NoiseSchedule schedule_;
    Weights weights_;
    Autoencoder vae_;
    Denoiser denoiser_;
};

} // namespace pqr
