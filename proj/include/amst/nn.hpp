#pragma once

#include "amst/rng.hpp"
#include "amst/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace amst {

struct NamedParam {
    std::string name;
    Var var;
};

// Flat, ordered parameter registry. Registration order defines optimizer
// state order, checkpoint tensor order, and digest order.
class ParamRegistry {
public:
    Var add(const std::string& name, Mat init) {
        for (const auto& p : params_) {
            if (p.name == name) fail("param", "duplicate parameter name: " + name);
        }
        Var v = leaf(std::move(init));
        params_.push_back({name, v});
        return v;
    }

    const std::vector<NamedParam>& all() const { return params_; }

    std::vector<Var> vars() const {
        std::vector<Var> out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.push_back(p.var);
        return out;
    }

    void zero_grad() {
        for (auto& p : params_) {
            if (p.var->grad.size() != 0) p.var->grad.setZero();
        }
    }

    std::size_t count_values() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p.var->val.size());
        return n;
    }

    // Digest over names and exact parameter bytes; order-sensitive.
    std::uint64_t digest() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& p : params_) {
            h = fnv1a(p.name, h);
            h = fnv1a_bytes(p.var->val.data(),
                      static_cast<std::size_t>(p.var->val.size()) * sizeof(double), h);
        }
        return h;
    }

private:
    std::vector<NamedParam> params_;
};

inline Mat normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    Mat m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
        for (Eigen::Index r = 0; r < rows; ++r) {
            m(r, c) = rng.normal(0.0, stddev);
        }
    }
    return m;
}

inline Mat xavier_init(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    return normal_init(rows, cols, 1.0 / std::sqrt(static_cast<double>(rows)), rng);
}

struct Linear {
    Var w;  // in x out
    Var b;  // 1 x out

    Linear() = default;
    Linear(ParamRegistry& reg, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng)
        : w(reg.add(name + ".w", xavier_init(in, out, rng))),
          b(reg.add(name + ".b", Mat::Zero(1, out))) {}

    Var operator()(const Var& x) const { return add_rowvec(matmul(x, w), b); }

    Eigen::Index out_dim() const { return w->cols(); }
};

struct Embedding {
    Var table;  // vocab x dim

    Embedding() = default;
    Embedding(ParamRegistry& reg, const std::string& name, Eigen::Index vocab, Eigen::Index dim,
              Rng& rng, double stddev = 0.1)
        : table(reg.add(name, normal_init(vocab, dim, stddev, rng))) {}

    Var rows(const std::vector<int>& ids) const { return gather_rows(table, ids); }

    Eigen::Index dim() const { return table->cols(); }
    Eigen::Index vocab() const { return table->rows(); }
};

// Single-direction LSTM cell; gate order i, f, g, o. Forget-gate bias starts
// at 1 so early training does not flush state.
struct LstmCell {
    Var w;  // (in + hidden) x 4*hidden
    Var b;  // 1 x 4*hidden
    Eigen::Index hidden{0};

    LstmCell() = default;
    LstmCell(ParamRegistry& reg, const std::string& name, Eigen::Index in, Eigen::Index hid, Rng& rng)
        : hidden(hid) {
        w = reg.add(name + ".w", xavier_init(in + hid, 4 * hid, rng));
        Mat bias = Mat::Zero(1, 4 * hid);
        bias.middleCols(hid, hid).setOnes();
        b = reg.add(name + ".b", std::move(bias));
    }

    struct State {
        Var h;
        Var c;
    };

    State initial(Eigen::Index batch) const {
        return {constant(Mat::Zero(batch, hidden)), constant(Mat::Zero(batch, hidden))};
    }

    State step(const Var& x, const State& prev) const {
        Var z = concat_cols({x, prev.h});
        Var gates = add_rowvec(matmul(z, w), b);
        Var i = sigmoid_(slice_cols(gates, 0, hidden));
        Var f = sigmoid_(slice_cols(gates, hidden, hidden));
        Var g = tanh_(slice_cols(gates, 2 * hidden, hidden));
        Var o = sigmoid_(slice_cols(gates, 3 * hidden, hidden));
        Var c = add(mul(f, prev.c), mul(i, g));
        Var h = mul(o, tanh_(c));
        return {h, c};
    }
};

// ---------------------------------------------------------------------------
// optimizers

class AdamOptimizer {
public:
    AdamOptimizer(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i] = Mat::Zero(params_[i]->rows(), params_[i]->cols());
            v_[i] = Mat::Zero(params_[i]->rows(), params_[i]->cols());
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Node& p = *params_[i];
            if (p.grad.size() == 0) continue;
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
            v_[i] = (beta2_ * v_[i].array() + (1.0 - beta2_) * p.grad.array().square()).matrix();
            p.val.array() -=
                lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
        }
    }

    void zero_grad() {
        for (auto& p : params_) {
            if (p->grad.size() != 0) p->grad.setZero();
        }
    }

private:
    std::vector<Var> params_;
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    long t_{0};
    std::vector<Mat> m_;
    std::vector<Mat> v_;
};

// Plain gradient descent; used where update direction must be exactly the
// gradient direction.
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<Var> params, double lr) : params_(std::move(params)), lr_(lr) {}

    void step() {
        for (auto& p : params_) {
            if (p->grad.size() == 0) continue;
            p->val -= lr_ * p->grad;
        }
    }

    void zero_grad() {
        for (auto& p : params_) {
            if (p->grad.size() != 0) p->grad.setZero();
        }
    }

private:
    std::vector<Var> params_;
    double lr_;
};

}  // namespace amst
