#pragma once

// JSON <-> configuration structs. Readers report the dotted path of the
// offending field on any type or range error.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pqr/refine.hpp"
#include "pqr/train.hpp"
#include "pqr/corpus.hpp"

namespace pqr {

class ConfigError : public InvalidArgument {
public:
    ConfigError(std::string path, const std::string& what)
        : InvalidArgument(path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

/// A view of one JSON object at a known dotted path.
class Section {
public:
    Section(const nlohmann::json& j, std::string path) : j_(&j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    std::string path_of(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    bool has(const std::string& key) const { return j_->contains(key) && !(*j_)[key].is_null(); }
    const nlohmann::json& raw() const { return *j_; }

    template <class T>
    T get(const std::string& key, const T& fallback) const {
        if (!has(key)) return fallback;
        return convert<T>(key);
    }

    template <class T>
    T required(const std::string& key) const {
        if (!has(key)) throw ConfigError(path_of(key), "required field is missing");
        return convert<T>(key);
    }

    Section sub(const std::string& key) const {
        static const nlohmann::json empty = nlohmann::json::object();
        if (!has(key)) return Section(empty, path_of(key));
        return Section((*j_)[key], path_of(key));
    }

    void check(bool cond, const std::string& key, const std::string& what) const {
        if (!cond) throw ConfigError(path_of(key), what);
    }

private:
    template <class T>
    T convert(const std::string& key) const {
        try {
            return (*j_)[key].get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path_of(key), std::string("wrong type: ") + e.what());
        }
    }

    const nlohmann::json* j_;
    std::string path_;
};

inline Prompt prompt_field(const Section& s, const std::string& key) {
    const auto text = s.required<std::string>(key);
    try {
        Prompt p = Prompt::parse(text);
        p.validate();
        return p;
    } catch (const InvalidArgument& e) {
        throw ConfigError(s.path_of(key), e.what());
    }
}

inline SamplerConfig sampler_from(const Section& s) {
    SamplerConfig c;
    c.num_inference_steps = s.get("num_inference_steps", c.num_inference_steps);
    c.seed = s.get<uint64_t>("seed", c.seed);
    c.guidance_scale = s.get("guidance_scale", c.guidance_scale);
    s.check(c.num_inference_steps >= 1, "num_inference_steps", "must be >= 1");
    s.check(c.guidance_scale >= 0.0, "guidance_scale", "must be >= 0");
    return c;
}

inline nlohmann::json to_json_value(const SamplerConfig& c) {
    return {{"num_inference_steps", c.num_inference_steps}, {"seed", c.seed}, {"guidance_scale", c.guidance_scale}};
}

inline ExtractionConfig extraction_from(const Section& s) {
    ExtractionConfig c;
    c.t = s.get("t", c.t);
    c.sa_layers = s.get("sa_layers", c.sa_layers);
    c.ca_layers = s.get("ca_layers", c.ca_layers);
    c.add_noise = s.get("add_noise", c.add_noise);
    c.noise_seed = s.get<uint64_t>("noise_seed", c.noise_seed);
    const auto& ids = instrumented_layers();
    for (const auto& l : c.sa_layers)
        s.check(std::find(ids.begin(), ids.end(), l) != ids.end() && !is_cross_attention(l), "sa_layers",
                "'" + l + "' is not a self-attention layer");
    for (const auto& l : c.ca_layers)
        s.check(std::find(ids.begin(), ids.end(), l) != ids.end() && is_cross_attention(l), "ca_layers",
                "'" + l + "' is not a cross-attention layer");
    s.check(c.t >= 0, "t", "must be >= 0");
    return c;
}

inline nlohmann::json to_json_value(const ExtractionConfig& c) {
    return {{"t", c.t}, {"sa_layers", c.sa_layers}, {"ca_layers", c.ca_layers}, {"add_noise", c.add_noise}, {"noise_seed", c.noise_seed}};
}

inline MatchConfig matching_from(const Section& s) {
    MatchConfig c;
    c.n = s.get("n", c.n);
    c.descriptor_layer = s.get("descriptor_layer", c.descriptor_layer);
    c.descriptor_t = s.get("descriptor_t", c.descriptor_t);
    const auto mode = s.get<std::string>("sampling", "all_masked");
    s.check(mode == "all_masked" || mode == "uniform_masked", "sampling", "must be 'all_masked' or 'uniform_masked'");
    c.sampling = mode == "all_masked" ? SamplingMode::all_masked : SamplingMode::uniform_masked;
    c.seed = s.get<uint64_t>("seed", c.seed);
    c.cycle_consistency = s.get("cycle_consistency", c.cycle_consistency);
    const auto& ids = instrumented_layers();
    s.check(std::find(ids.begin(), ids.end(), c.descriptor_layer) != ids.end(), "descriptor_layer", "unknown layer");
    s.check(c.n >= 1, "n", "must be >= 1");
    s.check(c.descriptor_t >= 0, "descriptor_t", "must be >= 0");
    return c;
}

inline nlohmann::json to_json_value(const MatchConfig& c) {
    return {{"n", c.n},
            {"descriptor_layer", c.descriptor_layer},
            {"descriptor_t", c.descriptor_t},
            {"sampling", c.sampling == SamplingMode::all_masked ? "all_masked" : "uniform_masked"},
            {"seed", c.seed},
            {"cycle_consistency", c.cycle_consistency}};
}

inline Lambdas lambdas_from(const Section& s) {
    Lambdas l;
    l.sa = s.get("sa", l.sa);
    l.ca = s.get("ca", l.ca);
    l.ldm = s.get("ldm", l.ldm);
    for (const char* k : {"sa", "ca", "ldm"}) {
        const double v = s.get(k, 0.0);
        s.check(std::isfinite(v) && v >= 0.0, k, "must be finite and >= 0");
    }
    return l;
}

inline nlohmann::json to_json_value(const Lambdas& l) { return {{"sa", l.sa}, {"ca", l.ca}, {"ldm", l.ldm}}; }

/// Refinement settings; `prompt` is required.
inline RefineConfig refine_config_from(const Section& s) {
    RefineConfig c;
    c.prompt = prompt_field(s, "prompt");
    s.check(c.prompt.concept_index.has_value(), "prompt", "must contain the concept token <v>");
    c.seed = s.get<uint64_t>("seed", c.seed);
    c.learning_rate = s.get("learning_rate", c.learning_rate);
    s.check(c.learning_rate > 0.0 && std::isfinite(c.learning_rate), "learning_rate", "must be positive");
    c.num_updates = s.get("num_updates", c.num_updates);
    s.check(c.num_updates >= 1, "num_updates", "must be >= 1");
    c.T_feature_steps = s.get("T_feature_steps", c.T_feature_steps);
    s.check(c.T_feature_steps >= 1, "T_feature_steps", "must be >= 1");
    c.lambdas = lambdas_from(s.sub("lambdas"));
    c.extraction = extraction_from(s.sub("extraction"));
    c.matching = matching_from(s.sub("matching"));
    c.sampler = sampler_from(s.sub("sampler"));
    s.check(c.T_feature_steps <= c.sampler.num_inference_steps, "T_feature_steps",
            "must not exceed sampler.num_inference_steps");
    c.mask_quantile = s.get("mask_quantile", c.mask_quantile);
    s.check(c.mask_quantile > 0.0 && c.mask_quantile < 1.0, "mask_quantile", "must lie in (0,1)");
    c.ldm_seed = s.get<uint64_t>("ldm_seed", c.ldm_seed);
    try {
        c.ldm_prompt = ldm_prompt_from_string(s.get<std::string>("ldm_prompt", to_string(c.ldm_prompt)));
    } catch (const InvalidArgument& e) {
        throw ConfigError(s.path_of("ldm_prompt"), e.what());
    }
    c.inversion_fixed_point_iterations = s.get("inversion_fixed_point_iterations", c.inversion_fixed_point_iterations);
    s.check(c.inversion_fixed_point_iterations >= 0, "inversion_fixed_point_iterations", "must be >= 0");
    return c;
}

inline nlohmann::json to_json_value(const RefineConfig& c) {
    return {{"prompt", c.prompt.text()},
            {"seed", c.seed},
            {"learning_rate", c.learning_rate},
            {"num_updates", c.num_updates},
            {"T_feature_steps", c.T_feature_steps},
            {"lambdas", to_json_value(c.lambdas)},
            {"extraction", to_json_value(c.extraction)},
            {"matching", to_json_value(c.matching)},
            {"sampler", to_json_value(c.sampler)},
            {"mask_quantile", c.mask_quantile},
            {"ldm_seed", c.ldm_seed},
            {"ldm_prompt", to_string(c.ldm_prompt)},
            {"inversion_fixed_point_iterations", c.inversion_fixed_point_iterations}};
}

inline TrainConfig train_config_from(const Section& s) {
    TrainConfig c;
    c.learning_rate = s.get("learning_rate", c.learning_rate);
    s.check(c.learning_rate > 0.0 && std::isfinite(c.learning_rate), "learning_rate", "must be positive");
    c.steps = s.get("steps", c.steps);
    s.check(c.steps >= 1, "steps", "must be >= 1");
    c.batch_size = s.get("batch_size", c.batch_size);
    s.check(c.batch_size >= 1, "batch_size", "must be >= 1");
    c.seed = s.get<uint64_t>("seed", c.seed);
    c.rank = s.get("rank", c.rank);
    s.check(c.rank >= 1, "rank", "must be >= 1");
    return c;
}

inline nlohmann::json to_json_value(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"steps", c.steps}, {"batch_size", c.batch_size}, {"seed", c.seed}, {"rank", c.rank}};
}

inline ModelConfig model_config_from(const Section& s) {
    try {
        ModelConfig c = s.raw().get<ModelConfig>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(s.path_of(""), std::string("wrong type: ") + e.what());
    } catch (const ConfigError&) {
        throw;
    } catch (const InvalidArgument& e) {
        throw ConfigError(s.path_of(""), e.what());
    }
}

inline ScheduleSpec schedule_from(const Section& s) {
    ScheduleSpec c;
    c.num_train_steps = s.get("num_train_steps", c.num_train_steps);
    c.beta_start = s.get("beta_start", c.beta_start);
    c.beta_end = s.get("beta_end", c.beta_end);
    s.check(c.num_train_steps >= 2, "num_train_steps", "must be >= 2");
    s.check(c.beta_start > 0.0 && c.beta_start < 1.0, "beta_start", "must lie in (0,1)");
    s.check(c.beta_end >= c.beta_start && c.beta_end < 1.0, "beta_end", "must lie in [beta_start,1)");
    return c;
}

inline BackboneTrainConfig backbone_train_config_from(const Section& s) {
    BackboneTrainConfig c;
    c.model = model_config_from(s.sub("model"));
    c.schedule = schedule_from(s.sub("schedule"));
    c.steps = s.get("steps", c.steps);
    s.check(c.steps >= 1, "steps", "must be >= 1");
    c.batch_size = s.get("batch_size", c.batch_size);
    s.check(c.batch_size >= 1, "batch_size", "must be >= 1");
    c.learning_rate = s.get("learning_rate", c.learning_rate);
    s.check(c.learning_rate > 0.0, "learning_rate", "must be positive");
    c.cond_dropout = s.get("cond_dropout", c.cond_dropout);
    s.check(c.cond_dropout >= 0.0 && c.cond_dropout <= 1.0, "cond_dropout", "must lie in [0,1]");
    c.cosine_decay = s.get("cosine_decay", c.cosine_decay);
    c.seed = s.get<uint64_t>("seed", c.seed);
    return c;
}

inline nlohmann::json to_json_value(const BackboneTrainConfig& c) {
    return {{"model", c.model},        {"schedule", c.schedule},       {"steps", c.steps},
            {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate}, {"cond_dropout", c.cond_dropout},
            {"cosine_decay", c.cosine_decay}, {"seed", c.seed}};
}

inline corpus::CorpusConfig corpus_config_from(const Section& s) {
    corpus::CorpusConfig c;
    c.n_concepts = s.get("n_concepts", c.n_concepts);
    s.check(c.n_concepts >= 1, "n_concepts", "must be >= 1");
    c.images_per_concept = s.get("images_per_concept", c.images_per_concept);
    s.check(c.images_per_concept >= 1, "images_per_concept", "must be >= 1");
    c.caption_templates = s.get("caption_templates", c.caption_templates);
    for (const auto& t : c.caption_templates)
        s.check(t.find(corpus::concept_placeholder) != std::string::npos, "caption_templates", "template lacks the [V] slot: " + t);
    c.seed = s.get<uint64_t>("seed", c.seed);
    c.image_h = s.get("image_h", c.image_h);
    c.image_w = s.get("image_w", c.image_w);
    return c;
}

inline nlohmann::json to_json_value(const corpus::CorpusConfig& c) {
    return {{"n_concepts", c.n_concepts}, {"images_per_concept", c.images_per_concept},
            {"caption_templates", c.caption_templates}, {"seed", c.seed}, {"image_h", c.image_h}, {"image_w", c.image_w}};
}

/// Sets `path` (dot separated) in `j` to `value`, creating objects on the way.
inline void set_dotted(nlohmann::json& j, const std::string& path, nlohmann::json value) {
    require(!path.empty(), "override: empty path");
    nlohmann::json* cur = &j;
    size_t start = 0;
    while (true) {
        const size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        require(!key.empty(), "override: malformed path '" + path + "'");
        if (!cur->is_object()) throw ConfigError(path.substr(0, start ? start - 1 : 0), "cannot descend into a non-object");
        if (dot == std::string::npos) {
            (*cur)[key] = std::move(value);
            return;
        }
        cur = &(*cur)[key];
        if (cur->is_null()) *cur = nlohmann::json::object();
        start = dot + 1;
    }
}

/// Parses "a.b.c=value"; the value is read as JSON when possible, otherwise as a string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like path=value");
    const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    set_dotted(j, path, std::move(value));
}

} // namespace pqr
