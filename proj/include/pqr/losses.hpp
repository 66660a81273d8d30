#pragma once

// Refinement objective pieces:
//   L_SA  = || F_ref - F_gen ||_DIFT   over self-attention features
//   L_CA  = || M_ref - M_gen ||_DIFT   over concept cross-attention maps
//   L_LDM = || eps - eps_theta(z_t^ref, t, p) ||^2
//   L     = lambda_SA L_SA + lambda_CA L_CA + lambda_LDM L_LDM
//
// ||.||_DIFT is the squared L2 distance between the two fields sampled at the
// matched reference / generated coordinates, averaged over pairs and then
// over layers. Coordinates live on the descriptor grid and are rescaled
// bilinearly to each layer's resolution.

#include <cmath>
#include <map>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "pqr/features.hpp"
#include "pqr/matching.hpp"

namespace pqr {

struct Lambdas {
    double sa = 1.0;
    double ca = 1.0;
    double ldm = 1.0;

    bool operator==(const Lambdas&) const = default;
};

struct LossReport {
    double l_sa = 0;
    double l_ca = 0;
    double l_ldm = 0;
    Lambdas lambdas;
    double combined = 0;
};

inline nlohmann::json to_json_value(const LossReport& r) {
    return {{"l_sa", r.l_sa},
            {"l_ca", r.l_ca},
            {"l_ldm", r.l_ldm},
            {"lambdas", {{"sa", r.lambdas.sa}, {"ca", r.lambdas.ca}, {"ldm", r.lambdas.ldm}}},
            {"combined", r.combined},
            {"dift_norm", {{"reduction", "mean over pairs, then mean over layers"}, {"per_pair", "squared L2"}}}};
}

inline LossReport combine(double l_sa, double l_ca, double l_ldm, const Lambdas& lambdas) {
    for (double v : {l_sa, l_ca, l_ldm, lambdas.sa, lambdas.ca, lambdas.ldm})
        if (!std::isfinite(v)) throw NumericalFailure("combine: non-finite loss or weight");
    LossReport r{l_sa, l_ca, l_ldm, lambdas, 0.0};
    r.combined = lambdas.sa * l_sa + lambdas.ca * l_ca + lambdas.ldm * l_ldm;
    return r;
}

namespace detail {

inline Mat match_sampler(const MatchSet& matches, bool reference_side, int layer_h, int layer_w) {
    std::vector<std::pair<double, double>> pos;
    pos.reserve(matches.size());
    for (const auto& [ref, gen] : matches.pairs) {
        const Coord& c = reference_side ? ref : gen;
        pos.push_back(rescale_coord(c.row, c.col, matches.h, matches.w, layer_h, layer_w));
    }
    return bilinear_operator(pos, layer_h, layer_w);
}

/// Differentiable DIFT norm between constant reference fields and generated
/// fields held as graph variables.
inline ag::Var dift_norm(const std::map<std::string, FeatureMap>& ref,
                         const std::map<std::string, std::pair<FeatureMap, ag::Var>>& gen, const MatchSet& matches) {
    if (matches.pairs.empty()) throw EmptyMatch("DIFT norm over an empty match set");
    require(ref.size() == gen.size(), "DIFT norm: layer sets differ");
    if (ref.empty()) return ag::scalar_const(0.0);
    const double n = static_cast<double>(matches.size());
    ag::Var total;
    for (const auto& [id, rf] : ref) {
        auto it = gen.find(id);
        require(it != gen.end(), "DIFT norm: layer '" + id + "' missing on the generated side");
        const auto& [gshape, gvar] = it->second;
        require(gshape.h == rf.h && gshape.w == rf.w && gvar.cols() == rf.data.cols(), "DIFT norm: layer shapes differ");
        Mat r = match_sampler(matches, true, rf.h, rf.w) * rf.data;
        ag::Var g = ag::left_apply(match_sampler(matches, false, rf.h, rf.w), gvar);
        ag::Var term = ag::scale(ag::sum_squares(ag::sub(g, ag::Var::constant(std::move(r)))), 1.0 / n);
        total = total.valid() ? ag::add(total, term) : term;
    }
    return ag::scale(total, 1.0 / double(ref.size()));
}

inline std::map<std::string, std::pair<FeatureMap, ag::Var>> as_constants(const std::map<std::string, FeatureMap>& m) {
    std::map<std::string, std::pair<FeatureMap, ag::Var>> out;
    for (const auto& [id, f] : m) out.emplace(id, std::make_pair(FeatureMap{f.h, f.w, Mat()}, ag::Var::constant(f.data)));
    return out;
}

} // namespace detail

inline ag::Var loss_sa_graph(const AppearanceFeatures& f_ref, const FeatureGraph& gen, const MatchSet& matches) {
    return detail::dift_norm(f_ref.per_layer, gen.sa, matches);
}

inline ag::Var loss_ca_graph(const CrossAttnMaps& m_ref, const FeatureGraph& gen, const MatchSet& matches) {
    return detail::dift_norm(m_ref.per_layer, gen.ca, matches);
}

inline double loss_sa(const AppearanceFeatures& f_ref, const AppearanceFeatures& f_gen, const MatchSet& matches) {
    return detail::dift_norm(f_ref.per_layer, detail::as_constants(f_gen.per_layer), matches).scalar();
}

inline double loss_ca(const CrossAttnMaps& m_ref, const CrossAttnMaps& m_gen, const MatchSet& matches) {
    return detail::dift_norm(m_ref.per_layer, detail::as_constants(m_gen.per_layer), matches).scalar();
}

/// The (t, eps) pair a seeded L_LDM evaluation uses.
struct LdmDraw {
    int t = 0;
    Latent eps;
};

inline LdmDraw draw_ldm(const NoiseSchedule& schedule, int h, int w, int c, uint64_t seed) {
    std::mt19937_64 rng(seed);
    LdmDraw d;
    d.t = static_cast<int>(std::uniform_int_distribution<int>(0, schedule.num_train_steps() - 1)(rng));
    d.eps = Latent(h, w, c, Space::latent);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (Eigen::Index i = 0; i < d.eps.data.size(); ++i) d.eps.data.data()[i] = nd(rng);
    return d;
}

/// Mean squared noise-prediction error for one draw. `eps_fn(z_t, t)` returns
/// the predicted noise as a graph variable.
template <class EpsFn>
ag::Var loss_ldm_graph(const Latent& z0, const LdmDraw& draw, const NoiseSchedule& schedule, EpsFn&& eps_fn) {
    const Latent z_t = forward_diffuse(z0, draw.t, draw.eps, schedule);
    ag::Var pred = eps_fn(z_t, draw.t);
    require(pred.rows() == draw.eps.data.rows() && pred.cols() == draw.eps.data.cols(), "loss_ldm: prediction shape mismatch");
    return ag::mean_squares(ag::sub(pred, ag::Var::constant(draw.eps.data)));
}

inline ag::Var loss_ldm_graph(const Backbone& model, const Latent& z0, const Prompt& prompt, const BoundWeights& w,
                              const LdmDraw& draw) {
    return loss_ldm_graph(z0, draw, model.schedule(), [&](const Latent& z_t, int t) {
        return model.forward_graph(ag::Var::constant(z_t.data), t, prompt, w, false).eps;
    });
}

inline double loss_ldm(const Backbone& model, const Image& x_ref, const Prompt& prompt, const AdapterParams* adapters,
                       uint64_t rng_seed) {
    const Latent z0 = model.encode(x_ref);
    const LdmDraw draw = draw_ldm(model.schedule(), z0.h, z0.w, z0.c, rng_seed);
    return loss_ldm_graph(model, z0, prompt, model.bind(adapters), draw).scalar();
}

} // namespace pqr
