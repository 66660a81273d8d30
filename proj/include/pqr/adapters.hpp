#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pqr/autograd.hpp"
#include "pqr/weights.hpp"

namespace pqr {

enum class AdapterKind { token_embedding, low_rank, composite };

inline const char* to_string(AdapterKind k) {
    switch (k) {
        case AdapterKind::token_embedding: return "token_embedding";
        case AdapterKind::low_rank: return "low_rank";
        case AdapterKind::composite: return "composite";
    }
    return "unknown";
}

inline AdapterKind adapter_kind_from_string(const std::string& s) {
    if (s == "token_embedding") return AdapterKind::token_embedding;
    if (s == "low_rank") return AdapterKind::low_rank;
    if (s == "composite") return AdapterKind::composite;
    throw InvalidArgument("unknown adapter kind '" + s + "'");
}

/// Factor pair for W_eff = W + a * b, with a: in x r and b: r x out.
struct LowRankDelta {
    Mat a;
    Mat b;
};

/// Tunable personalization parameters. The same type carries gradients.
struct AdapterParams {
    AdapterKind kind = AdapterKind::token_embedding;
    std::optional<Mat> token_vec; // 1 x d_text
    std::map<std::string, LowRankDelta> low_rank;
    int rank = 0;

    size_t parameter_count() const {
        size_t n = token_vec ? static_cast<size_t>(token_vec->size()) : 0;
        for (const auto& [_, d] : low_rank) n += static_cast<size_t>(d.a.size() + d.b.size());
        return n;
    }

    bool all_finite() const {
        if (token_vec && !token_vec->allFinite()) return false;
        for (const auto& [_, d] : low_rank)
            if (!d.a.allFinite() || !d.b.allFinite()) return false;
        return true;
    }

    bool same_layout(const AdapterParams& o) const {
        if (token_vec.has_value() != o.token_vec.has_value()) return false;
        if (token_vec && (token_vec->rows() != o.token_vec->rows() || token_vec->cols() != o.token_vec->cols()))
            return false;
        if (low_rank.size() != o.low_rank.size()) return false;
        for (const auto& [name, d] : low_rank) {
            auto it = o.low_rank.find(name);
            if (it == o.low_rank.end()) return false;
            if (d.a.rows() != it->second.a.rows() || d.a.cols() != it->second.a.cols() ||
                d.b.rows() != it->second.b.rows() || d.b.cols() != it->second.b.cols())
                return false;
        }
        return true;
    }

    bool bitwise_equal(const AdapterParams& o) const {
        if (kind != o.kind || rank != o.rank || !same_layout(o)) return false;
        if (token_vec && !pqr::bitwise_equal(*token_vec, *o.token_vec)) return false;
        for (const auto& [name, d] : low_rank) {
            const auto& e = o.low_rank.at(name);
            if (!pqr::bitwise_equal(d.a, e.a) || !pqr::bitwise_equal(d.b, e.b)) return false;
        }
        return true;
    }

    /// Flattened view in a fixed order: token vector, then each delta's a and b
    /// by projection name.
    std::vector<double*> flat_refs() {
        std::vector<double*> out;
        if (token_vec)
            for (Eigen::Index i = 0; i < token_vec->size(); ++i) out.push_back(token_vec->data() + i);
        for (auto& [_, d] : low_rank) {
            for (Eigen::Index i = 0; i < d.a.size(); ++i) out.push_back(d.a.data() + i);
            for (Eigen::Index i = 0; i < d.b.size(); ++i) out.push_back(d.b.data() + i);
        }
        return out;
    }

    std::vector<double> flatten() const {
        auto copy = *this;
        std::vector<double> out;
        for (double* p : copy.flat_refs()) out.push_back(*p);
        return out;
    }

    AdapterParams zeros_like() const {
        AdapterParams z = *this;
        if (z.token_vec) z.token_vec->setZero();
        for (auto& [_, d] : z.low_rank) {
            d.a.setZero();
            d.b.setZero();
        }
        return z;
    }

    /// Checks the invariants and shape compatibility with the base weights.
    void validate(const Weights& base) const {
        require(token_vec.has_value() || !low_rank.empty(), "adapters: no tunable set present");
        if (kind == AdapterKind::token_embedding)
            require(token_vec && low_rank.empty(), "adapters: token_embedding kind must carry only a token vector");
        if (kind == AdapterKind::low_rank)
            require(!token_vec && !low_rank.empty(), "adapters: low_rank kind must carry only low-rank deltas");
        if (token_vec) {
            const Mat& emb = base.at("text.emb");
            require(token_vec->rows() == 1 && token_vec->cols() == emb.cols(),
                    "adapters: token vector width does not match the text embedding");
        }
        if (!low_rank.empty()) require(rank >= 1, "adapters: rank must be >= 1");
        for (const auto& [name, d] : low_rank) {
            require(base.contains(name), "adapters: unknown projection '" + name + "'");
            const Mat& w = base.at(name);
            require(d.a.rows() == w.rows() && d.a.cols() == rank && d.b.rows() == rank && d.b.cols() == w.cols(),
                    "adapters: factor shapes incompatible with projection '" + name + "'");
        }
    }
};

struct AdapterInit {
    AdapterKind kind = AdapterKind::composite;
    int rank = 4;
    std::vector<std::string> projections = attention_projection_names();
    std::string class_word = "square";
    double token_jitter = 1e-2;
    double b_init_scale = 0.0; // LoRA convention: b starts at zero
    uint64_t seed = 0;
};

/// Concept token initialized at the class noun's embedding plus a small
/// deterministic perturbation; low-rank `a` Gaussian, `b` zero by default.
inline AdapterParams init_adapters(const Weights& base, const AdapterInit& init,
                                   const Vocabulary& vocab = Vocabulary::standard()) {
    std::mt19937_64 rng(init.seed);
    AdapterParams p;
    p.kind = init.kind;
    if (init.kind != AdapterKind::low_rank) {
        const Mat& emb = base.at("text.emb");
        Mat row = emb.row(vocab.id(init.class_word));
        row += detail::gaussian(1, row.cols(), init.token_jitter, rng);
        p.token_vec = row;
    }
    if (init.kind != AdapterKind::token_embedding) {
        require(init.rank >= 1, "adapters: rank must be >= 1");
        p.rank = init.rank;
        for (const auto& name : init.projections) {
            const Mat& w = base.at(name);
            LowRankDelta d;
            d.a = detail::gaussian(w.rows(), init.rank, 1.0 / std::sqrt(double(w.rows())), rng);
            d.b = init.b_init_scale == 0.0 ? Mat::Zero(init.rank, w.cols())
                                           : detail::gaussian(init.rank, w.cols(), init.b_init_scale, rng);
            p.low_rank.emplace(name, std::move(d));
        }
    }
    return p;
}

/// Effective weights with the adapters folded in. `base` is not modified.
inline Weights apply(const AdapterParams& adapters, const Weights& base,
                     const Vocabulary& vocab = Vocabulary::standard()) {
    adapters.validate(base);
    Weights out = base;
    if (adapters.token_vec) out.at("text.emb").row(vocab.concept_id()) = adapters.token_vec->row(0);
    for (const auto& [name, d] : adapters.low_rank) out.at(name) += d.a * d.b;
    return out;
}

/// Plain SGD: returns adapters - lr * grads.
inline AdapterParams gradient_step(const AdapterParams& adapters, const AdapterParams& grads, double lr) {
    require(lr >= 0.0 && std::isfinite(lr), "gradient_step: learning rate must be finite and nonnegative");
    require(adapters.same_layout(grads), "gradient_step: gradient layout does not match adapters");
    if (!grads.all_finite()) throw NumericalFailure("gradient_step: non-finite gradient");
    AdapterParams out = adapters;
    if (out.token_vec) *out.token_vec -= lr * *grads.token_vec;
    for (auto& [name, d] : out.low_rank) {
        const auto& g = grads.low_rank.at(name);
        d.a -= lr * g.a;
        d.b -= lr * g.b;
    }
    return out;
}

/// Adapters placed into a differentiation graph.
struct AdapterVars {
    std::optional<ag::Var> token_vec;
    std::map<std::string, std::pair<ag::Var, ag::Var>> low_rank;

    static AdapterVars bind(const AdapterParams& p, bool trainable) {
        auto mk = [trainable](const Mat& m) { return trainable ? ag::Var::parameter(m) : ag::Var::constant(m); };
        AdapterVars v;
        if (p.token_vec) v.token_vec = mk(*p.token_vec);
        for (const auto& [name, d] : p.low_rank) v.low_rank.emplace(name, std::make_pair(mk(d.a), mk(d.b)));
        return v;
    }

    /// Gradients collected after ag::backward, shaped like `like`.
    AdapterParams gradients(const AdapterParams& like) const {
        AdapterParams g = like;
        if (g.token_vec) *g.token_vec = token_vec->grad();
        for (auto& [name, d] : g.low_rank) {
            const auto& [a, b] = low_rank.at(name);
            d.a = a.grad();
            d.b = b.grad();
        }
        return g;
    }
};

} // namespace pqr
