#pragma once

// Per-query refinement for one fixed (prompt, seed):
//   (A) reference features from x_ref
//   (B) sample z_gen, then generated-side descriptors
//   (C) reference -> generated correspondences inside the object mask
//   (D) L_SA, L_CA, L_LDM, combined, and gradient steps on the adapters
// With T_feature_steps > 1 the feature losses are averaged over T evenly
// spaced trajectory points: the reference side comes from inversion, the
// generated side from its own sampling trajectory.

#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pqr/checkpoint.hpp"
#include "pqr/losses.hpp"

namespace pqr {

/// Prompt conditioning the L_LDM term.
enum class LdmPrompt { target, reference };

inline const char* to_string(LdmPrompt p) { return p == LdmPrompt::target ? "target" : "reference"; }

inline LdmPrompt ldm_prompt_from_string(const std::string& s) {
    if (s == "target") return LdmPrompt::target;
    if (s == "reference") return LdmPrompt::reference;
    throw InvalidArgument("unknown ldm_prompt '" + s + "'");
}

struct RefineConfig {
    Prompt prompt;
    uint64_t seed = 0;
    double learning_rate = 1e-4;
    int num_updates = 1;
    int T_feature_steps = 1;
    Lambdas lambdas;
    ExtractionConfig extraction;
    MatchConfig matching;
    SamplerConfig sampler; // sampler.seed is replaced by `seed`
    double mask_quantile = 0.5;
    uint64_t ldm_seed = 0;
    LdmPrompt ldm_prompt = LdmPrompt::target;
    int inversion_fixed_point_iterations = 4;
    std::optional<Grid> mask_override; // replaces the cross-attention object mask

    SamplerConfig sampler_config() const {
        SamplerConfig s = sampler;
        s.seed = seed;
        return s;
    }

    void validate(const Backbone& model) const {
        require(learning_rate > 0.0 && std::isfinite(learning_rate), "refine: learning_rate must be positive");
        require(num_updates >= 1, "refine: num_updates must be >= 1");
        require(T_feature_steps >= 1, "refine: T_feature_steps must be >= 1");
        require(T_feature_steps <= sampler.num_inference_steps,
                "refine: T_feature_steps must not exceed the sampler's num_inference_steps");
        for (double l : {lambdas.sa, lambdas.ca, lambdas.ldm})
            require(std::isfinite(l) && l >= 0.0, "refine: lambdas must be finite and nonnegative");
        require(mask_quantile > 0.0 && mask_quantile < 1.0, "refine: mask_quantile must lie in (0,1)");
        require(inversion_fixed_point_iterations >= 0, "refine: inversion_fixed_point_iterations must be >= 0");
        prompt.validate();
        require(prompt.concept_index.has_value(), "refine: prompt must contain the concept token");
        extraction.validate(model.schedule());
        matching.validate();
        model.schedule().check_t(matching.descriptor_t);
        sampler.validate();
    }
};

/// Reference and generated state at one trajectory point, frozen for the update.
struct FeatureStep {
    int trajectory_index = 0;
    ExtractionConfig extraction; // generated-side capture settings
    Latent z_gen;
    AppearanceFeatures f_ref;
    CrossAttnMaps m_ref;
    ObjectMask mask;
    MatchSet matches;
};

struct Evaluation {
    LossReport report;
    std::optional<AdapterParams> gradients;
};

/// The combined refinement loss as a function of the adapters, with
/// correspondences, reference features and the L_LDM draw held fixed.
class RefineObjective {
public:
    RefineObjective(const Backbone& model, Prompt prompt, Latent z_ref, Prompt ldm_prompt, Lambdas lambdas,
                    std::vector<FeatureStep> steps, LdmDraw draw)
        : model_(&model), prompt_(std::move(prompt)), z_ref_(std::move(z_ref)), ldm_prompt_(std::move(ldm_prompt)),
          lambdas_(lambdas), steps_(std::move(steps)), draw_(std::move(draw)) {
        require(!steps_.empty(), "RefineObjective: at least one feature step is required");
    }

    const std::vector<FeatureStep>& steps() const { return steps_; }
    const LdmDraw& draw() const { return draw_; }
    const Lambdas& lambdas() const { return lambdas_; }

    void redraw(uint64_t seed) { draw_ = draw_ldm(model_->schedule(), z_ref_.h, z_ref_.w, z_ref_.c, seed); }

    Evaluation evaluate(const AdapterParams& adapters, bool want_gradients) const {
        AdapterVars vars;
        const BoundWeights bound = model_->bind(&adapters, &vars, want_gradients);
        const double inv_t = 1.0 / double(steps_.size());
        ag::Var l_sa, l_ca;
        for (const auto& s : steps_) {
            const FeatureGraph g = extract_graph(*model_, s.z_gen, prompt_, bound, s.extraction);
            ag::Var sa = ag::scale(loss_sa_graph(s.f_ref, g, s.matches), inv_t);
            ag::Var ca = ag::scale(loss_ca_graph(s.m_ref, g, s.matches), inv_t);
            l_sa = l_sa.valid() ? ag::add(l_sa, sa) : sa;
            l_ca = l_ca.valid() ? ag::add(l_ca, ca) : ca;
        }
        const ag::Var l_ldm = loss_ldm_graph(*model_, z_ref_, ldm_prompt_, bound, draw_);

        Evaluation out;
        out.report = combine(l_sa.scalar(), l_ca.scalar(), l_ldm.scalar(), lambdas_);
        if (!want_gradients) return out;

        ag::Var total;
        auto accumulate = [&](double lambda, const ag::Var& term) {
            if (lambda == 0.0) return;
            ag::Var weighted = ag::scale(term, lambda);
            total = total.valid() ? ag::add(total, weighted) : weighted;
        };
        accumulate(lambdas_.sa, l_sa);
        accumulate(lambdas_.ca, l_ca);
        accumulate(lambdas_.ldm, l_ldm);
        if (!total.valid()) {
            out.gradients = adapters.zeros_like();
            return out;
        }
        ag::backward(total);
        out.gradients = vars.gradients(adapters);
        return out;
    }

private:
    const Backbone* model_;
    Prompt prompt_;
    Latent z_ref_;
    Prompt ldm_prompt_;
    Lambdas lambdas_;
    std::vector<FeatureStep> steps_;
    LdmDraw draw_;
};

struct RefineTimings {
    double prepare = 0;
    double update = 0;
    double regenerate = 0;
};

struct RefineResult {
    AdapterParams adapters_before;
    AdapterParams adapters_after;
    Image image_before;
    Image image_after;
    LossReport report;       // at the adapters before the first update
    LossReport report_after; // recomputed after the last update with the same matches and draw
    MatchSet matches;        // correspondences of the first feature step
    ObjectMask mask;
    bool aborted = false;
    std::string abort_reason;
    double wall_time = 0;
    RefineTimings timings;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Trajectory indices of T evenly spaced points starting at the clean end.
inline std::vector<int> feature_step_indices(int T, int steps) {
    std::vector<int> ks;
    for (int i = 0; i < T; ++i) ks.push_back(i * steps / T);
    return ks;
}

/// Descriptors for one side: taken from the capture pass itself when the
/// descriptor pass would be identical, otherwise from a separate pass.
inline FeatureMap side_descriptors(const Backbone& model, const Latent& z, const Prompt& prompt,
                                   const AdapterParams& adapters, const ExtractionConfig& ext, const MatchConfig& mc,
                                   const std::vector<LayerTrace>& layers) {
    if (!ext.add_noise && ext.t == mc.descriptor_t) return descriptors_from(layers, mc.descriptor_layer);
    return dift_descriptors(model, z, prompt, &adapters, mc);
}

inline FeatureStep prepare_step(const Backbone& model, const AdapterParams& adapters, const Prompt& ref_prompt,
                                const Latent& z_ref, const Prompt& prompt, const Latent& z_gen, ExtractionConfig ext,
                                MatchConfig mc, int index, const RefineConfig& config) {
    FeatureStep s;
    s.trajectory_index = index;
    s.extraction = ext;
    s.z_gen = z_gen;
    const BoundWeights bound = model.bind(&adapters);
    const FeatureGraph ref = extract_graph(model, z_ref, ref_prompt, bound, ext);
    s.f_ref = appearance_values(ref);
    s.m_ref = cross_attention_values(ref);
    const FeatureMap d_ref = side_descriptors(model, z_ref, ref_prompt, adapters, ext, mc, ref.layers);

    const FeatureGraph gen = extract_graph(model, z_gen, prompt, bound, ext);
    const FeatureMap d_gen = side_descriptors(model, z_gen, prompt, adapters, ext, mc, gen.layers);

    if (config.mask_override) {
        s.mask.mask = *config.mask_override;
    } else {
        CrossAttnMaps all = s.m_ref;
        if (all.per_layer.empty()) {
            // No CA layers requested for the loss: the mask still needs the concept maps.
            ExtractionConfig mask_ext = ext;
            mask_ext.sa_layers.clear();
            mask_ext.ca_layers = {"ca0", "ca1"};
            all = cross_attention_values(extract_graph(model, z_ref, ref_prompt, bound, mask_ext));
        }
        s.mask = object_mask(all, config.mask_quantile);
    }
    s.matches = match(d_ref, d_gen, s.mask.mask, mc);
    if (s.matches.pairs.empty()) throw EmptyMatch("refine: no correspondences survived matching");
    return s;
}

} // namespace detail

/// Steps (A)-(C): frozen reference features, generated latent(s), matches and
/// the L_LDM draw. `z_gen_trajectory` is filled with the sampling trajectory.
inline RefineObjective prepare_objective(const Backbone& model, const AdapterParams& adapters, const Image& x_ref,
                                         const Prompt& ref_prompt, const RefineConfig& config,
                                         std::vector<Latent>& z_gen_trajectory) {
    config.validate(model);
    ref_prompt.validate();
    require(ref_prompt.concept_index.has_value(), "refine: reference prompt must contain the concept token");
    adapters.validate(model.weights());

    const Latent z_ref = model.encode(x_ref);
    z_gen_trajectory = sample_trajectory(model, config.prompt, config.sampler_config(), &adapters);
    const int S = config.sampler.num_inference_steps;
    const auto ks = detail::feature_step_indices(config.T_feature_steps, S);

    std::vector<Latent> ref_trajectory;
    if (config.T_feature_steps > 1) {
        InversionConfig ic;
        ic.num_steps = S;
        ic.fixed_point_iterations = config.inversion_fixed_point_iterations;
        ref_trajectory = invert(model, z_ref, ref_prompt, &adapters, ic);
    }
    const auto ts = inference_timesteps(model.schedule(), S);

    std::vector<FeatureStep> steps;
    for (int k : ks) {
        if (k == 0) {
            steps.push_back(detail::prepare_step(model, adapters, ref_prompt, z_ref, config.prompt, z_gen_trajectory.front(),
                                                 config.extraction, config.matching, 0, config));
            continue;
        }
        ExtractionConfig ext = config.extraction;
        ext.t = ts[static_cast<size_t>(k - 1)];
        ext.add_noise = false;
        MatchConfig mc = config.matching;
        mc.descriptor_t = ext.t;
        steps.push_back(detail::prepare_step(model, adapters, ref_prompt, ref_trajectory[static_cast<size_t>(k)], config.prompt,
                                             z_gen_trajectory[static_cast<size_t>(k)], ext, mc, k, config));
    }
    const Prompt ldm_prompt = config.ldm_prompt == LdmPrompt::target ? config.prompt : ref_prompt;
    LdmDraw draw = draw_ldm(model.schedule(), z_ref.h, z_ref.w, z_ref.c, config.ldm_seed);
    return RefineObjective(model, config.prompt, z_ref, ldm_prompt, config.lambdas, std::move(steps), std::move(draw));
}

/// Runs refinement for one query. Only the returned adapter copy changes;
/// `model` and `adapters` are untouched. An empty object mask (or an empty
/// match set) aborts with the baseline image and `aborted` set.
inline RefineResult refine_query(const Backbone& model, const AdapterParams& adapters, const Image& x_ref,
                                 const Prompt& ref_prompt, const RefineConfig& config) {
    const auto t_start = std::chrono::steady_clock::now();
    RefineResult r;
    r.adapters_before = adapters;
    r.adapters_after = adapters;

    std::vector<Latent> traj;
    std::optional<RefineObjective> objective;
    try {
        objective.emplace(prepare_objective(model, adapters, x_ref, ref_prompt, config, traj));
    } catch (const EmptyMask& e) {
        r.aborted = true;
        r.abort_reason = e.what();
    } catch (const EmptyMatch& e) {
        r.aborted = true;
        r.abort_reason = e.what();
    }
    if (r.aborted) {
        if (traj.empty()) traj = sample_trajectory(model, config.prompt, config.sampler_config(), &adapters);
        r.image_before = model.decode(traj.front());
        r.image_after = r.image_before;
        r.timings.prepare = detail::seconds_since(t_start);
        r.wall_time = r.timings.prepare;
        return r;
    }
    r.image_before = model.decode(traj.front());
    r.matches = objective->steps().front().matches;
    r.mask = objective->steps().front().mask;
    r.timings.prepare = detail::seconds_since(t_start);

    const auto t_update = std::chrono::steady_clock::now();
    AdapterParams params = adapters;
    for (int u = 0; u < config.num_updates; ++u) {
        if (u > 0) objective->redraw(config.ldm_seed + static_cast<uint64_t>(u));
        Evaluation ev = objective->evaluate(params, true);
        if (u == 0) r.report = ev.report;
        params = gradient_step(params, *ev.gradients, config.learning_rate);
    }
    r.adapters_after = std::move(params);
    r.report_after = objective->evaluate(r.adapters_after, false).report;
    r.timings.update = detail::seconds_since(t_update);

    const auto t_regen = std::chrono::steady_clock::now();
    r.image_after = model.decode(sample(model, config.prompt, config.sampler_config(), &r.adapters_after));
    r.timings.regenerate = detail::seconds_since(t_regen);
    r.wall_time = detail::seconds_since(t_start);
    return r;
}

/// Multi-timestep variant: features from `T` evenly spaced trajectory points.
inline RefineResult refine_query_multiT(const Backbone& model, const AdapterParams& adapters, const Image& x_ref,
                                        const Prompt& ref_prompt, RefineConfig config, int T) {
    require(T >= 1, "refine_query_multiT: T must be >= 1");
    require(T <= config.sampler.num_inference_steps, "refine_query_multiT: T exceeds the sampler's num_inference_steps");
    config.T_feature_steps = T;
    return refine_query(model, adapters, x_ref, ref_prompt, config);
}

inline nlohmann::json to_json_value(const RefineResult& r) {
    return {{"report", to_json_value(r.report)},
            {"report_after", to_json_value(r.report_after)},
            {"aborted", r.aborted},
            {"abort_reason", r.abort_reason},
            {"num_matches", r.matches.size()},
            {"mask_area", r.mask.mask.data.size() ? r.mask.area() : 0},
            {"mask_degenerate", r.mask.degenerate},
            {"timings", {{"wall_time", r.wall_time},
                         {"prepare", r.timings.prepare},
                         {"update", r.timings.update},
                         {"regenerate", r.timings.regenerate}}}};
}

} // namespace pqr
