#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "pqr/pqr.hpp"

namespace pqr::test {

struct OraclePair {
    int ref, gen;
    double score;
};

inline double oracle_cosine(const Mat& a, int i, const Mat& b, int j) {
    double dot = 0, na = 0, nb = 0;
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
        dot += a(i, k) * b(j, k);
        na += a(i, k) * a(i, k);
        nb += b(j, k) * b(j, k);
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Exhaustive scan: every masked reference location in row-major order
/// against every generated location; the earliest maximizer wins.
inline std::vector<OraclePair> brute_force(const FeatureMap& ref, const FeatureMap& gen, const Grid& mask) {
    std::vector<OraclePair> out;
    for (int i = 0; i < ref.h * ref.w; ++i) {
        if (mask.data(i, 0) <= 0.5) continue;
        int best = -1;
        double best_s = 0;
        for (int j = 0; j < gen.h * gen.w; ++j) {
            const double s = oracle_cosine(ref.data, i, gen.data, j);
            if (best < 0 || s > best_s) {
                best = j;
                best_s = s;
            }
        }
        out.push_back({i, best, best_s});
    }
    return out;
}

inline FeatureMap random_field(int h, int w, int d, std::mt19937_64& rng, bool coarse) {
    FeatureMap f{h, w, Mat(h * w, d)};
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_int_distribution<int> small(-1, 1);
    for (Eigen::Index i = 0; i < f.data.size(); ++i) f.data.data()[i] = coarse ? small(rng) : n(rng);
    return f;
}

inline Grid full_mask(int h, int w) {
    Grid g(h, w, 1);
    g.data.setOnes();
    return g;
}

struct GradientCheck {
    double worst_relative_error = 0;
    size_t probed = 0;
    size_t analytic = 0;
};

/// Central finite differences of the combined loss against the analytic
/// gradient for every adapter parameter.
inline GradientCheck check_gradients(const RefineObjective& obj, AdapterParams at, double h) {
    const AdapterParams grad = *obj.evaluate(at, true).gradients;
    const std::vector<double> g = grad.flatten();
    GradientCheck out;
    out.analytic = g.size();
    auto probe = [&](Mat& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i, ++out.probed) {
            const double keep = m.data()[i];
            m.data()[i] = keep + h;
            const double up = obj.evaluate(at, false).report.combined;
            m.data()[i] = keep - h;
            const double down = obj.evaluate(at, false).report.combined;
            m.data()[i] = keep;
            const double fd = (up - down) / (2 * h);
            const double gi = g[out.probed];
            const double err = std::abs(fd - gi) / std::max({std::abs(fd), std::abs(gi), 1e-6});
            out.worst_relative_error = std::max(out.worst_relative_error, err);
        }
    };
    if (at.token_vec) probe(*at.token_vec);
    for (auto& [_, d] : at.low_rank) {
        probe(d.a);
        probe(d.b);
    }
    return out;
}

} // namespace pqr::test
