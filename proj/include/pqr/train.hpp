#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pqr/checkpoint.hpp"
#include "pqr/losses.hpp"

namespace pqr {

struct TrainingExample {
    Image image;
    Prompt prompt;
};

struct BackboneTrainConfig {
    ModelConfig model;
    ScheduleSpec schedule;
    int steps = 8000;
    int batch_size = 4;
    double learning_rate = 3e-3;
    double cond_dropout = 0.1; // fraction of examples trained with the null prompt
    bool cosine_decay = true;  // learning rate follows a half cosine down to 5% of its start
    uint64_t seed = 0;
};

struct BackboneTrainResult {
    Backbone model;
    std::vector<double> curve;
    double vae_round_trip_mse = 0; // mean squared pixel error of decode(encode(x)) over the training images
};

/// Mean squared pixel error of an encode/decode round trip.
inline double vae_round_trip_mse(const Backbone& model, const std::vector<Image>& images) {
    require(!images.empty(), "vae_round_trip_mse: no images");
    double total = 0;
    for (const auto& img : images) total += (model.decode(model.encode(img)).data - img.data).squaredNorm() / double(img.data.size());
    return total / double(images.size());
}

namespace detail {

struct Adam {
    double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    int step = 0;
    std::map<std::string, Mat> m, v;

    void update(Weights& w, const std::map<std::string, Mat>& grads) {
        ++step;
        const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
        for (const auto& [name, g] : grads) {
            auto& mm = m[name];
            auto& vv = v[name];
            if (mm.size() == 0) {
                mm = Mat::Zero(g.rows(), g.cols());
                vv = Mat::Zero(g.rows(), g.cols());
            }
            mm = b1 * mm + (1 - b1) * g;
            vv = b2 * vv + (1 - b2) * g.cwiseProduct(g);
            w.at(name).array() -= lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
        }
    }
};

} // namespace detail

/// Trains the denoiser on noise prediction over the examples' latents. The
/// autoencoder is fitted first (patch configuration) and then held fixed.
/// The returned model is already rounded to checkpoint precision.
inline BackboneTrainResult train_backbone(const std::vector<TrainingExample>& examples, const BackboneTrainConfig& cfg) {
    require(!examples.empty(), "train_backbone: no training examples");
    require(cfg.steps >= 1 && cfg.batch_size >= 1, "train_backbone: steps and batch_size must be >= 1");
    cfg.model.validate();
    const NoiseSchedule schedule = cfg.schedule.build();

    std::vector<Image> images;
    for (const auto& e : examples) images.push_back(e.image);
    Autoencoder vae = cfg.model.vae == VaeKind::patch ? Autoencoder::fit(cfg.model, images) : Autoencoder::identity(cfg.model);
    std::vector<Latent> latents;
    for (const auto& img : images) latents.push_back(vae.encode(img));

    Weights weights = init_denoiser_weights(cfg.model, cfg.seed);
    const Denoiser denoiser(cfg.model);
    const Prompt null_prompt{{Vocabulary::standard().null_id()}, std::nullopt};
    detail::Adam adam;
    adam.lr = cfg.learning_rate;
    std::mt19937_64 rng(cfg.seed + 1);
    std::uniform_int_distribution<size_t> pick(0, examples.size() - 1);
    std::uniform_int_distribution<int> pick_t(0, schedule.num_train_steps() - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    BackboneTrainResult result;
    for (int step = 0; step < cfg.steps; ++step) {
        BoundWeights bound = BoundWeights::trainable(weights);
        ag::Var total;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const size_t i = pick(rng);
            LdmDraw draw;
            draw.t = pick_t(rng);
            draw.eps = seed_noise(cfg.model, rng());
            const Prompt& p = unit(rng) < cfg.cond_dropout ? null_prompt : examples[i].prompt;
            ag::Var l = loss_ldm_graph(latents[i], draw, schedule, [&](const Latent& z_t, int t) {
                return denoiser.forward(ag::Var::constant(z_t.data), t, p, bound, false).eps;
            });
            total = total.valid() ? ag::add(total, l) : l;
        }
        total = ag::scale(total, 1.0 / cfg.batch_size);
        if (!std::isfinite(total.scalar()))
            throw NumericalFailure("train_backbone: non-finite loss at step " + std::to_string(step));
        ag::backward(total);
        std::map<std::string, Mat> grads;
        for (const auto& [name, var] : bound.vars) grads.emplace(name, var.grad());
        if (cfg.cosine_decay)
            adam.lr = cfg.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(M_PI * step / double(cfg.steps))));
        adam.update(weights, grads);
        result.curve.push_back(total.scalar());
    }
    result.model = quantize_like_checkpoint(Backbone(cfg.model, schedule, std::move(weights), std::move(vae)));
    result.vae_round_trip_mse = vae_round_trip_mse(result.model, images);
    return result;
}

struct TrainConfig {
    double learning_rate = 0.1;
    int steps = 300;
    int batch_size = 1;
    uint64_t seed = 0;
    int rank = 4;

    void validate() const {
        require(learning_rate > 0.0 && std::isfinite(learning_rate), "train: learning_rate must be positive");
        require(steps >= 1, "train: steps must be >= 1");
        require(batch_size >= 1, "train: batch_size must be >= 1");
        require(rank >= 1, "train: rank must be >= 1");
    }
};

struct PersonalizeResult {
    AdapterParams adapters;
    AdapterParams initial;
    std::vector<double> curve;
};

/// Class noun following the concept token, e.g. "square" in "a photo of <v> square".
inline std::string class_word_of(const Prompt& p, const Vocabulary& vocab = Vocabulary::standard()) {
    if (p.concept_index && *p.concept_index + 1 < static_cast<int>(p.token_ids.size())) {
        const std::string& w = vocab.token(p.token_ids[static_cast<size_t>(*p.concept_index + 1)]);
        for (const auto& s : words::shapes)
            if (s == w) return w;
    }
    return words::shapes.front();
}

/// First-stage personalization: SGD on L_LDM over the reference images with
/// the reference prompt, tuning only the adapters.
inline PersonalizeResult personalize_base(const Backbone& model, const std::vector<Image>& images,
                                          const Prompt& reference_prompt, AdapterKind kind, const TrainConfig& cfg) {
    cfg.validate();
    require(!images.empty(), "personalize_base: at least one reference image is required");
    reference_prompt.validate();
    require(reference_prompt.concept_index.has_value(), "personalize_base: reference prompt lacks the concept token");

    std::vector<Latent> latents;
    for (const auto& img : images) latents.push_back(model.encode(img));

    AdapterInit init;
    init.kind = kind;
    init.rank = cfg.rank;
    init.class_word = class_word_of(reference_prompt);
    init.seed = cfg.seed;
    PersonalizeResult result;
    result.initial = quantize_like_checkpoint(init_adapters(model.weights(), init));
    AdapterParams params = result.initial;

    std::mt19937_64 rng(cfg.seed + 7);
    std::uniform_int_distribution<size_t> pick(0, latents.size() - 1);
    for (int step = 0; step < cfg.steps; ++step) {
        AdapterVars vars;
        BoundWeights bound = model.bind(&params, &vars, true);
        ag::Var total;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const size_t i = pick(rng);
            const Latent& z0 = latents[i];
            const LdmDraw draw = draw_ldm(model.schedule(), z0.h, z0.w, z0.c, rng());
            ag::Var l = loss_ldm_graph(model, z0, reference_prompt, bound, draw);
            total = total.valid() ? ag::add(total, l) : l;
        }
        total = ag::scale(total, 1.0 / cfg.batch_size);
        if (!std::isfinite(total.scalar()))
            throw NumericalFailure("personalize_base: non-finite loss at step " + std::to_string(step));
        ag::backward(total);
        params = gradient_step(params, vars.gradients(params), cfg.learning_rate);
        result.curve.push_back(total.scalar());
    }
    result.adapters = quantize_like_checkpoint(params);
    return result;
}

} // namespace pqr
