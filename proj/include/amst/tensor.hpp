#pragma once

#include "amst/common.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace amst {

// Reverse-mode autograd over dense double matrices. Graphs are built
// dynamically as shared_ptr DAGs and freed when the loss root goes out of
// scope. All math is 64-bit so finite-difference checks are meaningful.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Mat val;
    Mat grad;
    bool requires_grad{false};
    std::vector<Var> inputs;
    std::function<void(Node&)> backward_fn;

    Eigen::Index rows() const { return val.rows(); }
    Eigen::Index cols() const { return val.cols(); }

    void ensure_grad() {
        if (grad.rows() != val.rows() || grad.cols() != val.cols()) {
            grad = Mat::Zero(val.rows(), val.cols());
        }
    }

    double scalar() const {
        if (val.size() != 1) fail("shape", "scalar() on non-1x1 node");
        return val(0, 0);
    }
};

inline Var constant(Mat m) {
    auto n = std::make_shared<Node>();
    n->val = std::move(m);
    return n;
}

inline Var scalar_const(double v) { return constant(Mat::Constant(1, 1, v)); }

// A leaf with requires_grad set: model parameters.
inline Var leaf(Mat m) {
    auto n = std::make_shared<Node>();
    n->val = std::move(m);
    n->requires_grad = true;
    return n;
}

namespace detail {

inline Var make_node(Mat val, std::vector<Var> inputs, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs) {
        if (in->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) n->backward_fn = std::move(bw);
    return n;
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a->rows() != b->rows() || a->cols() != b->cols()) {
        fail("shape", std::string(op) + ": operand shapes differ");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// arithmetic

inline Var matmul(const Var& a, const Var& b) {
    if (a->cols() != b->rows()) fail("shape", "matmul: inner dimensions differ");
    Mat out = a->val * b->val;
    return detail::make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.noalias() += n.grad * b->val.transpose();
        }
        if (b->requires_grad) {
            b->ensure_grad();
            b->grad.noalias() += a->val.transpose() * n.grad;
        }
    });
}

inline Var add(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "add");
    return detail::make_node(a->val + b->val, {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad += n.grad;
        }
        if (b->requires_grad) {
            b->ensure_grad();
            b->grad += n.grad;
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "sub");
    return detail::make_node(a->val - b->val, {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad += n.grad;
        }
        if (b->requires_grad) {
            b->ensure_grad();
            b->grad -= n.grad;
        }
    });
}

// A + row broadcast over all rows (bias add); row is 1xC.
inline Var add_rowvec(const Var& a, const Var& row) {
    if (row->rows() != 1 || row->cols() != a->cols()) fail("shape", "add_rowvec: bad row vector");
    Mat out = a->val.rowwise() + row->val.row(0);
    return detail::make_node(std::move(out), {a, row}, [a, row](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad += n.grad;
        }
        if (row->requires_grad) {
            row->ensure_grad();
            row->grad += n.grad.colwise().sum();
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "mul");
    return detail::make_node(a->val.cwiseProduct(b->val), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.array() += n.grad.array() * b->val.array();
        }
        if (b->requires_grad) {
            b->ensure_grad();
            b->grad.array() += n.grad.array() * a->val.array();
        }
    });
}

// A scaled per-row by a Bx1 column (soft gates over embeddings).
inline Var mul_colvec(const Var& a, const Var& col) {
    if (col->cols() != 1 || col->rows() != a->rows()) fail("shape", "mul_colvec: bad column vector");
    Mat out = a->val.array().colwise() * col->val.col(0).array();
    return detail::make_node(std::move(out), {a, col}, [a, col](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.array() += n.grad.array().colwise() * col->val.col(0).array();
        }
        if (col->requires_grad) {
            col->ensure_grad();
            col->grad.col(0) += n.grad.cwiseProduct(a->val).rowwise().sum();
        }
    });
}

// alpha * A + beta, elementwise.
inline Var affine(const Var& a, double alpha, double beta) {
    Mat out = (a->val.array() * alpha + beta).matrix();
    return detail::make_node(std::move(out), {a}, [a, alpha](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad += alpha * n.grad;
        }
    });
}

inline Var scale(const Var& a, double s) { return affine(a, s, 0.0); }
inline Var one_minus(const Var& a) { return affine(a, -1.0, 1.0); }

// max(a, floor) elementwise; gradient passes only where a > floor.
inline Var clamp_min(const Var& a, double floor) {
    Mat out = a->val.cwiseMax(floor);
    return detail::make_node(std::move(out), {a}, [a, floor](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad.array() += n.grad.array() * (a->val.array() > floor).cast<double>();
    });
}

// 1/a elementwise.
inline Var reciprocal_(const Var& a) {
    Mat out = a->val.cwiseInverse();
    return detail::make_node(std::move(out), {a}, [a](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad.array() -= n.grad.array() * n.val.array().square();
    });
}

// ---------------------------------------------------------------------------
// nonlinearities

inline Var tanh_(const Var& a) {
    Mat out = a->val.array().tanh().matrix();
    return detail::make_node(std::move(out), {a}, [a](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad.array() += n.grad.array() * (1.0 - n.val.array().square());
    });
}

inline Var sigmoid_(const Var& a) {
    Mat out = (1.0 / (1.0 + (-a->val.array()).exp())).matrix();
    return detail::make_node(std::move(out), {a}, [a](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad.array() += n.grad.array() * n.val.array() * (1.0 - n.val.array());
    });
}

inline Var relu_(const Var& a) {
    Mat out = a->val.cwiseMax(0.0);
    return detail::make_node(std::move(out), {a}, [a](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad.array() += n.grad.array() * (a->val.array() > 0.0).cast<double>();
    });
}

// ---------------------------------------------------------------------------
// row-wise softmax / normalization

inline Mat softmax_rows_value(const Mat& z) {
    Mat p(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double m = z.row(r).maxCoeff();
        Eigen::ArrayXd e = (z.row(r).array() - m).exp();
        p.row(r) = (e / e.sum()).matrix();
    }
    return p;
}

inline Var softmax_rows(const Var& z) {
    Mat p = softmax_rows_value(z->val);
    return detail::make_node(std::move(p), {z}, [z](Node& n) {
        if (!z->requires_grad) return;
        z->ensure_grad();
        for (Eigen::Index r = 0; r < n.val.rows(); ++r) {
            const double dot = n.grad.row(r).dot(n.val.row(r));
            z->grad.row(r).array() +=
                (n.grad.row(r).array() - dot) * n.val.row(r).array();
        }
    });
}

inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    if (gamma->rows() != 1 || gamma->cols() != x->cols()) fail("shape", "layer_norm: bad gamma");
    if (beta->rows() != 1 || beta->cols() != x->cols()) fail("shape", "layer_norm: bad beta");
    const auto R = x->rows();
    const auto C = x->cols();
    Mat xhat(R, C);
    Eigen::VectorXd inv_sigma(R);
    Mat out(R, C);
    for (Eigen::Index r = 0; r < R; ++r) {
        const double mu = x->val.row(r).mean();
        const double var = (x->val.row(r).array() - mu).square().mean();
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma(r) = is;
        xhat.row(r) = ((x->val.row(r).array() - mu) * is).matrix();
        out.row(r) = xhat.row(r).cwiseProduct(gamma->val.row(0)) + beta->val.row(0);
    }
    return detail::make_node(std::move(out), {x, gamma, beta},
                             [x, gamma, beta, xhat, inv_sigma](Node& n) {
        if (gamma->requires_grad) {
            gamma->ensure_grad();
            gamma->grad += (n.grad.array() * xhat.array()).colwise().sum().matrix();
        }
        if (beta->requires_grad) {
            beta->ensure_grad();
            beta->grad += n.grad.colwise().sum();
        }
        if (x->requires_grad) {
            x->ensure_grad();
            for (Eigen::Index r = 0; r < n.val.rows(); ++r) {
                Eigen::ArrayXd dxhat =
                    n.grad.row(r).transpose().array() * gamma->val.row(0).transpose().array();
                const double m1 = dxhat.mean();
                const double m2 = (dxhat * xhat.row(r).transpose().array()).mean();
                x->grad.row(r).array() +=
                    (inv_sigma(r) * (dxhat - m1 - xhat.row(r).transpose().array() * m2)).transpose();
            }
        }
    });
}

// ---------------------------------------------------------------------------
// shape plumbing

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) fail("shape", "concat_rows: no parts");
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts[0]->cols();
    for (const auto& p : parts) {
        if (p->cols() != cols) fail("shape", "concat_rows: column mismatch");
        rows += p->rows();
    }
    Mat out(rows, cols);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        out.middleRows(r, p->rows()) = p->val;
        r += p->rows();
    }
    return detail::make_node(std::move(out), parts, [parts](Node& n) {
        Eigen::Index r = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) {
                p->ensure_grad();
                p->grad += n.grad.middleRows(r, p->rows());
            }
            r += p->rows();
        }
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) fail("shape", "concat_cols: no parts");
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts[0]->rows();
    for (const auto& p : parts) {
        if (p->rows() != rows) fail("shape", "concat_cols: row mismatch");
        cols += p->cols();
    }
    Mat out(rows, cols);
    Eigen::Index c = 0;
    for (const auto& p : parts) {
        out.middleCols(c, p->cols()) = p->val;
        c += p->cols();
    }
    return detail::make_node(std::move(out), parts, [parts](Node& n) {
        Eigen::Index c = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) {
                p->ensure_grad();
                p->grad += n.grad.middleCols(c, p->cols());
            }
            c += p->cols();
        }
    });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a->rows()) fail("shape", "slice_rows: out of range");
    Mat out = a->val.middleRows(start, count);
    return detail::make_node(std::move(out), {a}, [a, start, count](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad.middleRows(start, count) += n.grad;
    });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a->cols()) fail("shape", "slice_cols: out of range");
    Mat out = a->val.middleCols(start, count);
    return detail::make_node(std::move(out), {a}, [a, start, count](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad.middleCols(start, count) += n.grad;
    });
}

// Row gather; also serves as embedding lookup on a parameter table.
inline Var gather_rows(const Var& a, std::vector<int> idx) {
    Mat out(static_cast<Eigen::Index>(idx.size()), a->cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a->rows()) fail("shape", "gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = a->val.row(idx[i]);
    }
    return detail::make_node(std::move(out), {a}, [a, idx = std::move(idx)](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            a->grad.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
        }
    });
}

inline Var transpose_(const Var& a) {
    return detail::make_node(a->val.transpose(), {a}, [a](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad += n.grad.transpose();
    });
}

// out(i,0) = A(rows[i], cols[i])
inline Var pick_entries(const Var& a, std::vector<std::pair<int, int>> at) {
    Mat out(static_cast<Eigen::Index>(at.size()), 1);
    for (std::size_t i = 0; i < at.size(); ++i) {
        const auto [r, c] = at[i];
        if (r < 0 || r >= a->rows() || c < 0 || c >= a->cols()) {
            fail("shape", "pick_entries: index out of range");
        }
        out(static_cast<Eigen::Index>(i), 0) = a->val(r, c);
    }
    return detail::make_node(std::move(out), {a}, [a, at = std::move(at)](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < at.size(); ++i) {
            a->grad(at[i].first, at[i].second) += n.grad(static_cast<Eigen::Index>(i), 0);
        }
    });
}

// ---------------------------------------------------------------------------
// reductions

inline Var sum_all(const Var& a) {
    Mat out = Mat::Constant(1, 1, a->val.sum());
    return detail::make_node(std::move(out), {a}, [a](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad.array() += n.grad(0, 0);
    });
}

inline Var mean_all(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a->val.size());
    Mat out = Mat::Constant(1, 1, a->val.sum() * inv);
    return detail::make_node(std::move(out), {a}, [a, inv](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad.array() += n.grad(0, 0) * inv;
    });
}

// Row-wise sums over columns: NxC -> Nx1.
inline Var sum_cols(const Var& a) {
    Mat out = a->val.rowwise().sum();
    return detail::make_node(std::move(out), {a}, [a](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad += n.grad.replicate(1, a->cols());
    });
}

// Column means over rows: NxC -> 1xC (mean pooling).
inline Var mean_rows(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a->rows());
    Mat out = a->val.colwise().sum() * inv;
    return detail::make_node(std::move(out), {a}, [a, inv](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        a->grad += (n.grad * inv).replicate(a->rows(), 1);
    });
}

// Elementwise max across equal-shaped inputs; gradient routes to the first
// argmax input per entry.
inline Var max_elemwise(const std::vector<Var>& parts) {
    if (parts.empty()) fail("shape", "max_elemwise: no parts");
    for (const auto& p : parts) detail::check_same_shape(parts[0], p, "max_elemwise");
    const auto rows = parts[0]->rows();
    const auto cols = parts[0]->cols();
    Mat out = parts[0]->val;
    std::vector<int> arg(static_cast<std::size_t>(rows * cols), 0);
    for (std::size_t k = 1; k < parts.size(); ++k) {
        for (Eigen::Index i = 0; i < out.size(); ++i) {
            if (parts[k]->val.data()[i] > out.data()[i]) {
                out.data()[i] = parts[k]->val.data()[i];
                arg[static_cast<std::size_t>(i)] = static_cast<int>(k);
            }
        }
    }
    return detail::make_node(std::move(out), parts, [parts, arg = std::move(arg)](Node& n) {
        for (Eigen::Index i = 0; i < n.val.size(); ++i) {
            Node& src = *parts[static_cast<std::size_t>(arg[static_cast<std::size_t>(i)])];
            if (!src.requires_grad) continue;
            src.ensure_grad();
            src.grad.data()[i] += n.grad.data()[i];
        }
    });
}

// Column-wise max over rows: NxC -> 1xC, gradient routed to the argmax row.
inline Var maxpool_cols(const Var& a) {
    const auto C = a->cols();
    Mat out(1, C);
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(C));
    for (Eigen::Index c = 0; c < C; ++c) {
        Eigen::Index r = 0;
        out(0, c) = a->val.col(c).maxCoeff(&r);
        arg[static_cast<std::size_t>(c)] = r;
    }
    return detail::make_node(std::move(out), {a}, [a, arg = std::move(arg)](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (Eigen::Index c = 0; c < n.val.cols(); ++c) {
            a->grad(arg[static_cast<std::size_t>(c)], c) += n.grad(0, c);
        }
    });
}

// ---------------------------------------------------------------------------
// fused losses (from logits, numerically stable)

enum class Reduction { sum, mean };

inline Var cross_entropy_rows(const Var& logits, std::vector<int> targets, Reduction red) {
    const auto R = logits->rows();
    if (static_cast<Eigen::Index>(targets.size()) != R) fail("shape", "cross_entropy_rows: target count");
    Mat p = softmax_rows_value(logits->val);
    double total = 0.0;
    for (Eigen::Index r = 0; r < R; ++r) {
        const int t = targets[static_cast<std::size_t>(r)];
        if (t < 0 || t >= logits->cols()) fail("shape", "cross_entropy_rows: target out of range");
        total -= safe_log(p(r, t));
    }
    const double s = red == Reduction::mean ? 1.0 / static_cast<double>(R) : 1.0;
    Mat out = Mat::Constant(1, 1, total * s);
    return detail::make_node(std::move(out), {logits},
                             [logits, targets = std::move(targets), p = std::move(p), s](Node& n) {
        if (!logits->requires_grad) return;
        logits->ensure_grad();
        const double g = n.grad(0, 0) * s;
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
            logits->grad.row(r) += g * p.row(r);
            logits->grad(r, targets[static_cast<std::size_t>(r)]) -= g;
        }
    });
}

// -sum_k T(r,k) log softmax(logits)(r,k), summed/averaged over rows.
// T is a fixed target distribution (rows need not be normalized).
inline Var cross_entropy_soft_rows(const Var& logits, Mat target, Reduction red) {
    const auto R = logits->rows();
    if (target.rows() != R || target.cols() != logits->cols()) {
        fail("shape", "cross_entropy_soft_rows: target shape");
    }
    Mat p = softmax_rows_value(logits->val);
    double total = 0.0;
    for (Eigen::Index r = 0; r < R; ++r) {
        for (Eigen::Index c = 0; c < p.cols(); ++c) {
            if (target(r, c) != 0.0) total -= target(r, c) * safe_log(p(r, c));
        }
    }
    const double s = red == Reduction::mean ? 1.0 / static_cast<double>(R) : 1.0;
    Mat out = Mat::Constant(1, 1, total * s);
    return detail::make_node(std::move(out), {logits},
                             [logits, target = std::move(target), p = std::move(p), s](Node& n) {
        if (!logits->requires_grad) return;
        logits->ensure_grad();
        const double g = n.grad(0, 0) * s;
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
            const double mass = target.row(r).sum();
            logits->grad.row(r) += g * (mass * p.row(r) - target.row(r));
        }
    });
}

// Entropy of softmax(logits) per row, summed/averaged. dH/dz_j = -p_j(log p_j + H).
inline Var entropy_of_softmax_rows(const Var& logits, Reduction red) {
    const auto R = logits->rows();
    Mat p = softmax_rows_value(logits->val);
    Eigen::VectorXd h(R);
    double total = 0.0;
    for (Eigen::Index r = 0; r < R; ++r) {
        double hr = 0.0;
        for (Eigen::Index c = 0; c < p.cols(); ++c) {
            if (p(r, c) > 0.0) hr -= p(r, c) * std::log(p(r, c));
        }
        h(r) = hr;
        total += hr;
    }
    const double s = red == Reduction::mean ? 1.0 / static_cast<double>(R) : 1.0;
    Mat out = Mat::Constant(1, 1, total * s);
    return detail::make_node(std::move(out), {logits},
                             [logits, p = std::move(p), h = std::move(h), s](Node& n) {
        if (!logits->requires_grad) return;
        logits->ensure_grad();
        const double g = n.grad(0, 0) * s;
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
            logits->grad.row(r).array() +=
                g * (-(p.row(r).array()) * (p.row(r).array().max(kProbFloor).log() + h(r)));
        }
    });
}

// ---------------------------------------------------------------------------
// fused multi-head self-attention over packed sequences
//
// q,k,v are (sum_s len_s) x d with sequences stored contiguously; head h uses
// columns [h*dk, (h+1)*dk). Computes softmax(Q Kt / sqrt(dk)) V per sequence
// and head. Attention probabilities are cached for the backward pass.
inline Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads,
                               std::vector<Eigen::Index> offsets,
                               std::vector<Eigen::Index> lens) {
    detail::check_same_shape(q, k, "multihead_attention");
    detail::check_same_shape(q, v, "multihead_attention");
    const auto d = q->cols();
    if (heads <= 0 || d % heads != 0) fail("shape", "multihead_attention: heads must divide width");
    const auto dk = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

    Mat out = Mat::Zero(q->rows(), d);
    auto probs = std::make_shared<std::vector<Mat>>();
    probs->reserve(offsets.size() * static_cast<std::size_t>(heads));
    for (std::size_t s = 0; s < offsets.size(); ++s) {
        const auto o = offsets[s];
        const auto n = lens[s];
        for (int h = 0; h < heads; ++h) {
            const auto c0 = static_cast<Eigen::Index>(h) * dk;
            Mat scores = q->val.block(o, c0, n, dk) * k->val.block(o, c0, n, dk).transpose() * inv_sqrt;
            Mat p = softmax_rows_value(scores);
            out.block(o, c0, n, dk).noalias() = p * v->val.block(o, c0, n, dk);
            probs->push_back(std::move(p));
        }
    }
    return detail::make_node(
        std::move(out), {q, k, v},
        [q, k, v, heads, dk, inv_sqrt, offsets = std::move(offsets), lens = std::move(lens),
         probs](Node& n) {
            q->ensure_grad();
            k->ensure_grad();
            v->ensure_grad();
            std::size_t pi = 0;
            for (std::size_t s = 0; s < offsets.size(); ++s) {
                const auto o = offsets[s];
                const auto len = lens[s];
                for (int h = 0; h < heads; ++h, ++pi) {
                    const auto c0 = static_cast<Eigen::Index>(h) * dk;
                    const Mat& p = (*probs)[pi];
                    const auto dout = n.grad.block(o, c0, len, dk);
                    v->grad.block(o, c0, len, dk).noalias() += p.transpose() * dout;
                    Mat dp = dout * v->val.block(o, c0, len, dk).transpose();
                    Mat ds(len, len);
                    for (Eigen::Index r = 0; r < len; ++r) {
                        const double dot = dp.row(r).dot(p.row(r));
                        ds.row(r) = ((dp.row(r).array() - dot) * p.row(r).array()).matrix();
                    }
                    ds *= inv_sqrt;
                    q->grad.block(o, c0, len, dk).noalias() += ds * k->val.block(o, c0, len, dk);
                    k->grad.block(o, c0, len, dk).noalias() += ds.transpose() * q->val.block(o, c0, len, dk);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// backward driver

inline void backward(const Var& root) {
    if (root->val.size() != 1) fail("shape", "backward: root must be a 1x1 scalar");
    if (!root->requires_grad) return;

    // Iterative post-order DFS; deterministic given graph construction order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next].get();
            ++next;
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad(0, 0) = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && node->grad.size() != 0) {
            node->backward_fn(*node);
        }
    }
}

}  // namespace amst
