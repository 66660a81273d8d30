#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <string>

#include "pqr/errors.hpp"

namespace pqr {

/// Dense row-per-location matrix: rows index spatial positions (or tokens),
/// columns index channels.
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

enum class Space { pixel, latent };

inline const char* to_string(Space s) { return s == Space::pixel ? "pixel" : "latent"; }

/// An H x W x C real grid stored as (H*W) x C, locations in row-major order.
/// Images (space = pixel) hold RGB in [0,1]; latents are the denoiser's domain.
struct Grid {
    int h = 0;
    int w = 0;
    int c = 0;
    Space space = Space::latent;
    Mat data;

    Grid() = default;
    Grid(int h_, int w_, int c_, Space s = Space::latent)
        : h(h_), w(w_), c(c_), space(s), data(Mat::Zero(static_cast<Eigen::Index>(h_) * w_, c_)) {}
    Grid(int h_, int w_, int c_, Space s, Mat d) : h(h_), w(w_), c(c_), space(s), data(std::move(d)) {
        require(data.rows() == static_cast<Eigen::Index>(h) * w && data.cols() == c,
                "grid data does not match its declared shape");
    }

    int locations() const { return h * w; }
    double& at(int row, int col, int ch) { return data(static_cast<Eigen::Index>(row) * w + col, ch); }
    double at(int row, int col, int ch) const { return data(static_cast<Eigen::Index>(row) * w + col, ch); }

    bool same_shape(const Grid& o) const { return h == o.h && w == o.w && c == o.c; }
    bool all_finite() const { return data.allFinite(); }
};

using Latent = Grid;
using Image = Grid;

inline double l2_distance(const Grid& a, const Grid& b) {
    require(a.same_shape(b), "l2_distance: shape mismatch");
    return (a.data - b.data).norm();
}

inline double relative_l2_error(const Grid& approx, const Grid& ref) {
    const double denom = ref.data.norm();
    return l2_distance(approx, ref) / (denom > 0.0 ? denom : 1.0);
}

inline bool bitwise_equal(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        if (std::memcmp(a.data() + i, b.data() + i, sizeof(double)) != 0) return false;
    }
    return true;
}

inline bool bitwise_equal(const Grid& a, const Grid& b) {
    return a.same_shape(b) && a.space == b.space && bitwise_equal(a.data, b.data);
}

} // namespace pqr
