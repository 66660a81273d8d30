#pragma once

#include <vector>

#include <Eigen/Eigenvalues>

#include "pqr/tensor.hpp"
#include "pqr/weights.hpp"

namespace pqr {

/// Linear patch autoencoder: each p x p x C pixel patch maps to one latent
/// location via a principal-subspace projection fitted on a corpus. The
/// identity variant passes pixels through unchanged.
class Autoencoder {
public:
    Autoencoder() = default;

    static Autoencoder identity(const ModelConfig& cfg) {
        Autoencoder ae;
        ae.cfg_ = cfg;
        return ae;
    }

    /// Fits the top-`latent_c` principal directions of all patches and scales
    /// latents to unit average variance.
    static Autoencoder fit(const ModelConfig& cfg, const std::vector<Image>& images) {
        cfg.validate();
        require(cfg.vae == VaeKind::patch, "Autoencoder::fit requires a patch configuration");
        require(!images.empty(), "Autoencoder::fit: no images");
        Autoencoder ae;
        ae.cfg_ = cfg;
        const int p = cfg.patch * cfg.patch * cfg.image_c;
        Mat patches(0, p);
        std::vector<Mat> blocks;
        for (const auto& img : images) blocks.push_back(ae.to_patches(img));
        Eigen::Index total = 0;
        for (const auto& b : blocks) total += b.rows();
        patches.resize(total, p);
        Eigen::Index off = 0;
        for (const auto& b : blocks) {
            patches.middleRows(off, b.rows()) = b;
            off += b.rows();
        }
        ae.mean_ = patches.colwise().mean();
        Mat centered = patches.rowwise() - ae.mean_.row(0);
        Mat cov = centered.transpose() * centered / double(std::max<Eigen::Index>(1, total - 1));
        Eigen::SelfAdjointEigenSolver<Mat> es(cov);
        // Eigenvalues ascend; take the last k columns in descending order.
        const int k = cfg.latent_c;
        ae.basis_.resize(p, k);
        double var = 0.0;
        for (int j = 0; j < k; ++j) {
            Vec v = es.eigenvectors().col(p - 1 - j);
            Eigen::Index imax = 0;
            v.cwiseAbs().maxCoeff(&imax);
            if (v(imax) < 0) v = -v;
            ae.basis_.col(j) = v;
            var += std::max(0.0, es.eigenvalues()(p - 1 - j));
        }
        var /= k;
        ae.scale_ = var > 0 ? 1.0 / std::sqrt(var) : 1.0;
        return ae;
    }

    const ModelConfig& config() const { return cfg_; }
    bool is_identity() const { return cfg_.vae == VaeKind::identity; }

    Latent encode(const Image& x) const {
        check_image(x);
        if (is_identity()) return Latent(x.h, x.w, x.c, Space::latent, x.data);
        Mat z = ((to_patches(x).rowwise() - mean_.row(0)) * basis_) * scale_;
        return Latent(cfg_.latent_h(), cfg_.latent_w(), cfg_.latent_c, Space::latent, std::move(z));
    }

    Image decode(const Latent& z) const {
        require(z.h == cfg_.latent_h() && z.w == cfg_.latent_w() && z.c == cfg_.latent_channels(),
                "decode: latent dimensions do not match the model configuration");
        if (is_identity()) return Image(z.h, z.w, z.c, Space::pixel, z.data);
        Mat patches = (z.data / scale_) * basis_.transpose();
        patches.rowwise() += mean_.row(0);
        return from_patches(patches);
    }

    void store(Weights& w) const {
        if (is_identity()) return;
        w.set("vae.mean", mean_);
        w.set("vae.basis", basis_);
        w.set("vae.scale", Mat::Constant(1, 1, scale_));
    }

    static Autoencoder load(const ModelConfig& cfg, const Weights& w) {
        if (cfg.vae == VaeKind::identity) return identity(cfg);
        Autoencoder ae;
        ae.cfg_ = cfg;
        ae.mean_ = w.at("vae.mean");
        ae.basis_ = w.at("vae.basis");
        ae.scale_ = w.at("vae.scale")(0, 0);
        const int p = cfg.patch * cfg.patch * cfg.image_c;
        require(ae.mean_.cols() == p && ae.basis_.rows() == p && ae.basis_.cols() == cfg.latent_c,
                "autoencoder tensors do not match the model configuration");
        return ae;
    }

private:
    void check_image(const Image& x) const {
        require(x.h == cfg_.image_h && x.w == cfg_.image_w && x.c == cfg_.image_c,
                "encode: image dimensions do not match the model configuration");
    }

    Mat to_patches(const Image& x) const {
        check_image(x);
        const int ps = cfg_.patch;
        const int lh = x.h / ps, lw = x.w / ps;
        Mat out(static_cast<Eigen::Index>(lh) * lw, ps * ps * x.c);
        for (int r = 0; r < lh; ++r)
            for (int c = 0; c < lw; ++c) {
                int k = 0;
                for (int dy = 0; dy < ps; ++dy)
                    for (int dx = 0; dx < ps; ++dx)
                        for (int ch = 0; ch < x.c; ++ch) out(r * lw + c, k++) = x.at(r * ps + dy, c * ps + dx, ch);
            }
        return out;
    }

    Image from_patches(const Mat& patches) const {
        const int ps = cfg_.patch;
        const int lh = cfg_.latent_h(), lw = cfg_.latent_w();
        Image img(cfg_.image_h, cfg_.image_w, cfg_.image_c, Space::pixel);
        for (int r = 0; r < lh; ++r)
            for (int c = 0; c < lw; ++c) {
                int k = 0;
                for (int dy = 0; dy < ps; ++dy)
                    for (int dx = 0; dx < ps; ++dx)
                        for (int ch = 0; ch < img.c; ++ch) img.at(r * ps + dy, c * ps + dx, ch) = patches(r * lw + c, k++);
            }
        return img;
    }

    ModelConfig cfg_;
    Mat mean_;
    Mat basis_;
    double scale_ = 1.0;
};

} // namespace pqr
