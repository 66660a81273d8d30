#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Var is a handle to a node in a dynamically built graph. Nodes created
// from constants never record a backward closure, so a pass that involves no
// parameters costs the same as plain Eigen arithmetic plus one allocation per
// op.

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "pqr/tensor.hpp"

namespace pqr::ag {

struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Mat& grad_buffer() {
        if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Var constant(Mat v) {
        auto n = std::make_shared<Node>();
        n->value = std::move(v);
        return Var(std::move(n));
    }

    static Var parameter(Mat v) {
        auto n = std::make_shared<Node>();
        n->value = std::move(v);
        n->requires_grad = true;
        return Var(std::move(n));
    }

    bool valid() const { return node_ != nullptr; }
    const Mat& value() const { return node_->value; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    bool requires_grad() const { return node_->requires_grad; }
    double scalar() const { return node_->value(0, 0); }

    /// Gradient accumulated by backward(); zeros if the node was unreachable.
    Mat grad() const {
        if (node_->grad.size() == 0) return Mat::Zero(rows(), cols());
        return node_->grad;
    }

    Node& node() const { return *node_; }
    const std::shared_ptr<Node>& ptr() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make(Mat value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& in : inputs) {
        if (in.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
        n->parents.reserve(inputs.size());
        for (auto& in : inputs) n->parents.push_back(in.ptr());
        n->backward_fn = std::move(fn);
    }
    return Var(std::move(n));
}

inline void accumulate(const std::shared_ptr<Node>& p, const Mat& g) {
    if (p->requires_grad) p->grad_buffer() += g;
}

} // namespace detail

/// Seeds d(out)/d(out) = 1 and propagates to every reachable parameter.
/// `out` must be 1x1.
inline void backward(const Var& out) {
    require(out.rows() == 1 && out.cols() == 1, "backward: output must be a scalar");
    if (!out.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{&out.node(), 0}};
    seen.insert(&out.node());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    out.node().grad_buffer().setConstant(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
}

inline Var matmul(const Var& a, const Var& b) {
    require(a.cols() == b.rows(), "matmul: inner dimensions differ");
    return detail::make(a.value() * b.value(), {a, b}, [](Node& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        if (a->requires_grad) a->grad_buffer().noalias() += n.grad * b->value.transpose();
        if (b->requires_grad) b->grad_buffer().noalias() += a->value.transpose() * n.grad;
    });
}

/// a * b^T without materializing the transpose as a graph node.
inline Var matmul_nt(const Var& a, const Var& b) {
    require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
    return detail::make(a.value() * b.value().transpose(), {a, b}, [](Node& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        if (a->requires_grad) a->grad_buffer().noalias() += n.grad * b->value;
        if (b->requires_grad) b->grad_buffer().noalias() += n.grad.transpose() * a->value;
    });
}

/// Constant linear operator applied on the left: S * a.
inline Var left_apply(const Mat& s, const Var& a) {
    require(s.cols() == a.rows(), "left_apply: dimension mismatch");
    auto op = std::make_shared<Mat>(s);
    return detail::make(s * a.value(), {a}, [op](Node& n) {
        detail::accumulate(n.parents[0], op->transpose() * n.grad);
    });
}

inline Var add(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    return detail::make(a.value() + b.value(), {a, b}, [](Node& n) {
        detail::accumulate(n.parents[0], n.grad);
        detail::accumulate(n.parents[1], n.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    return detail::make(a.value() - b.value(), {a, b}, [](Node& n) {
        detail::accumulate(n.parents[0], n.grad);
        detail::accumulate(n.parents[1], -n.grad);
    });
}

inline Var mul(const Var& a, const Var& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
    return detail::make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        if (a->requires_grad) a->grad_buffer() += n.grad.cwiseProduct(b->value);
        if (b->requires_grad) b->grad_buffer() += n.grad.cwiseProduct(a->value);
    });
}

inline Var scale(const Var& a, double s) {
    return detail::make(a.value() * s, {a}, [s](Node& n) { detail::accumulate(n.parents[0], n.grad * s); });
}

/// Adds a 1 x C row to every row of a.
inline Var add_row(const Var& a, const Var& row) {
    require(row.rows() == 1 && row.cols() == a.cols(), "add_row: bias shape mismatch");
    Mat v = a.value();
    v.rowwise() += row.value().row(0);
    return detail::make(std::move(v), {a, row}, [](Node& n) {
        detail::accumulate(n.parents[0], n.grad);
        detail::accumulate(n.parents[1], n.grad.colwise().sum());
    });
}

inline Var silu(const Var& a) {
    const Mat& x = a.value();
    Mat sig = (1.0 + (-x.array()).exp()).inverse().matrix();
    Mat y = x.cwiseProduct(sig);
    return detail::make(std::move(y), {a}, [sig = std::move(sig)](Node& n) {
        const Mat& x = n.parents[0]->value;
        Mat d = (sig.array() * (1.0 + x.array() * (1.0 - sig.array()))).matrix();
        detail::accumulate(n.parents[0], n.grad.cwiseProduct(d));
    });
}

inline Mat softmax_rows_value(const Mat& x) {
    Mat y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        y.row(r) = (x.row(r).array() - m).exp().matrix();
        y.row(r) /= y.row(r).sum();
    }
    return y;
}

inline Var softmax_rows(const Var& a) {
    return detail::make(softmax_rows_value(a.value()), {a}, [](Node& n) {
        const Mat& y = n.value;
        Vec dot = n.grad.cwiseProduct(y).rowwise().sum();
        Mat g = y.cwiseProduct(n.grad - dot.replicate(1, y.cols()));
        detail::accumulate(n.parents[0], g);
    });
}

/// Per-row standardization without affine parameters.
inline Var layer_norm_rows(const Var& a, double eps = 1e-5) {
    const Mat& x = a.value();
    const Eigen::Index c = x.cols();
    Vec mean = x.rowwise().mean();
    Mat centered = x - mean.replicate(1, c);
    Vec inv_std = ((centered.array().square().rowwise().sum() / double(c)) + eps).rsqrt().matrix();
    Mat xhat = centered.cwiseProduct(inv_std.replicate(1, c));
    Mat y = xhat;
    return detail::make(std::move(y), {a}, [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
        const Eigen::Index c = xhat.cols();
        Vec g_mean = n.grad.rowwise().mean();
        Vec gx_mean = n.grad.cwiseProduct(xhat).rowwise().mean();
        Mat g = (n.grad - g_mean.replicate(1, c) - xhat.cwiseProduct(gx_mean.replicate(1, c)));
        g = g.cwiseProduct(inv_std.replicate(1, c));
        detail::accumulate(n.parents[0], g);
    });
}

inline Var col_block(const Var& a, Eigen::Index start, Eigen::Index count) {
    require(start >= 0 && start + count <= a.cols(), "col_block: range out of bounds");
    return detail::make(a.value().middleCols(start, count), {a}, [start, count](Node& n) {
        auto& p = n.parents[0];
        if (p->requires_grad) p->grad_buffer().middleCols(start, count) += n.grad;
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    Eigen::Index cols = 0;
    for (const auto& p : parts) {
        require(p.rows() == parts.front().rows(), "concat_cols: row mismatch");
        cols += p.cols();
    }
    Mat v(parts.front().rows(), cols);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        v.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return detail::make(std::move(v), parts, [](Node& n) {
        Eigen::Index off = 0;
        for (auto& p : n.parents) {
            const Eigen::Index c = p->value.cols();
            if (p->requires_grad) p->grad_buffer() += n.grad.middleCols(off, c);
            off += c;
        }
    });
}

inline Var stack_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), "stack_rows: no inputs");
    Eigen::Index rows = 0;
    for (const auto& p : parts) {
        require(p.cols() == parts.front().cols(), "stack_rows: column mismatch");
        rows += p.rows();
    }
    Mat v(rows, parts.front().cols());
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        v.middleRows(off, p.rows()) = p.value();
        off += p.rows();
    }
    return detail::make(std::move(v), parts, [](Node& n) {
        Eigen::Index off = 0;
        for (auto& p : n.parents) {
            const Eigen::Index r = p->value.rows();
            if (p->requires_grad) p->grad_buffer() += n.grad.middleRows(off, r);
            off += r;
        }
    });
}

/// Gathers rows by index; the backward pass scatter-adds.
inline Var select_rows(const Var& a, const std::vector<int>& idx) {
    Mat v(static_cast<Eigen::Index>(idx.size()), a.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] >= 0 && idx[i] < a.rows(), "select_rows: index out of range");
        v.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
    }
    return detail::make(std::move(v), {a}, [idx](Node& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        Mat& g = p->grad_buffer();
        for (size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    });
}

/// 3x3 neighborhoods of an (h*w) x d grid with zero padding, as an
/// (h*w) x (9*d) matrix; block k holds offset (k / 3 - 1, k % 3 - 1).
inline Var im2col3x3(const Var& a, int h, int w) {
    require(a.rows() == static_cast<Eigen::Index>(h) * w, "im2col3x3: grid shape mismatch");
    const Eigen::Index d = a.cols();
    Mat v = Mat::Zero(a.rows(), 9 * d);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int k = 0; k < 9; ++k) {
                const int rr = r + k / 3 - 1, cc = c + k % 3 - 1;
                if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
                v.block(r * w + c, k * d, 1, d) = a.value().row(rr * w + cc);
            }
    return detail::make(std::move(v), {a}, [h, w, d](Node& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        Mat& g = p->grad_buffer();
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
                for (int k = 0; k < 9; ++k) {
                    const int rr = r + k / 3 - 1, cc = c + k % 3 - 1;
                    if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
                    g.row(rr * w + cc) += n.grad.block(r * w + c, k * d, 1, d);
                }
    });
}

inline Var col(const Var& a, Eigen::Index j) { return col_block(a, j, 1); }

/// Sum of squared entries, returned as 1x1.
inline Var sum_squares(const Var& a) {
    Mat v(1, 1);
    v(0, 0) = a.value().squaredNorm();
    return detail::make(std::move(v), {a}, [](Node& n) {
        detail::accumulate(n.parents[0], n.parents[0]->value * (2.0 * n.grad(0, 0)));
    });
}

inline Var mean_squares(const Var& a) {
    return scale(sum_squares(a), 1.0 / static_cast<double>(a.value().size()));
}

inline Var scalar_const(double v) { return Var::constant(Mat::Constant(1, 1, v)); }

} // namespace pqr::ag
