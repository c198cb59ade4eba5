#include "testutil.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace amst;
using namespace amst::testutil;

namespace {

// Wraps a single-op graph over leaf matrices and FD-checks it.
void check_op(const std::string& name, const std::vector<std::pair<Eigen::Index, Eigen::Index>>& shapes,
              const std::function<Var(const std::vector<Var>&)>& build, double scale = 1.0) {
    Rng rng(fnv1a(name));
    std::vector<NamedParam> params;
    std::vector<Var> leaves;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        Var v = leaf(random_mat(shapes[i].first, shapes[i].second, rng, scale));
        leaves.push_back(v);
        params.push_back({name + std::to_string(i), v});
    }
    auto r = finite_diff_check(params, [&] { return build(leaves); });
    INFO(name << " worst: " << r.worst);
    CHECK(r.max_rel_err < 1e-6);
}

}  // namespace

TEST_CASE("autograd primitives match finite differences") {
    check_op("matmul", {{3, 4}, {4, 5}}, [](const std::vector<Var>& v) {
        return mean_all(matmul(v[0], v[1]));
    });
    check_op("add_mul", {{3, 4}, {3, 4}}, [](const std::vector<Var>& v) {
        return mean_all(mul(add(v[0], v[1]), sub(v[0], v[1])));
    });
    check_op("add_rowvec", {{4, 3}, {1, 3}}, [](const std::vector<Var>& v) {
        return mean_all(add_rowvec(v[0], v[1]));
    });
    check_op("mul_colvec", {{4, 3}, {4, 1}}, [](const std::vector<Var>& v) {
        return mean_all(mul_colvec(tanh_(v[0]), sigmoid_(v[1])));
    });
    check_op("affine_relu", {{4, 4}}, [](const std::vector<Var>& v) {
        return mean_all(relu_(affine(v[0], 0.7, -0.1)));
    });
    check_op("softmax_rows", {{3, 5}}, [](const std::vector<Var>& v) {
        return mean_all(mul(softmax_rows(v[0]), v[0]));
    });
    check_op("layer_norm", {{4, 6}, {1, 6}, {1, 6}}, [](const std::vector<Var>& v) {
        return mean_all(mul(layer_norm_rows(v[0], v[1], v[2]), v[0]));
    });
    check_op("concat_slice", {{3, 4}, {2, 4}}, [](const std::vector<Var>& v) {
        Var c = concat_rows({v[0], v[1]});
        return mean_all(mul(slice_rows(c, 1, 3), slice_rows(c, 2, 3)));
    });
    check_op("concat_cols_slice", {{3, 2}, {3, 3}}, [](const std::vector<Var>& v) {
        Var c = concat_cols({v[0], v[1]});
        return mean_all(tanh_(slice_cols(c, 1, 3)));
    });
    check_op("gather_rows", {{6, 3}}, [](const std::vector<Var>& v) {
        return mean_all(tanh_(gather_rows(v[0], {0, 2, 2, 5})));
    });
    check_op("transpose", {{3, 4}}, [](const std::vector<Var>& v) {
        return mean_all(matmul(v[0], transpose_(v[0])));
    });
    check_op("pick_entries", {{4, 4}}, [](const std::vector<Var>& v) {
        return sum_all(pick_entries(softmax_rows(v[0]), {{0, 1}, {2, 3}, {3, 3}}));
    });
    check_op("maxpool", {{5, 4}}, [](const std::vector<Var>& v) {
        return mean_all(maxpool_cols(tanh_(v[0])));
    });
    check_op("mean_rows", {{5, 4}}, [](const std::vector<Var>& v) {
        return mean_all(mul(mean_rows(v[0]), mean_rows(sigmoid_(v[0]))));
    });
    check_op("sum_cols_reciprocal", {{4, 5}}, [](const std::vector<Var>& v) {
        Var g = sigmoid_(v[0]);
        return mean_all(mul_colvec(tanh_(v[0]), reciprocal_(clamp_min(sum_cols(g), 1.0))));
    });
}

TEST_CASE("fused losses match finite differences") {
    check_op("ce_rows", {{4, 6}}, [](const std::vector<Var>& v) {
        return cross_entropy_rows(v[0], {1, 0, 5, 2}, Reduction::mean);
    });
    check_op("ce_soft", {{3, 5}}, [](const std::vector<Var>& v) {
        Mat t(3, 5);
        t << 0.2, 0.3, 0.5, 0, 0, 0, 0, 1, 0, 0, 0.1, 0.1, 0.2, 0.3, 0.3;
        return cross_entropy_soft_rows(v[0], t, Reduction::sum);
    });
    check_op("entropy_softmax", {{4, 5}}, [](const std::vector<Var>& v) {
        return entropy_of_softmax_rows(v[0], Reduction::mean);
    });
}

TEST_CASE("multihead attention matches finite differences") {
    // Two packed sequences of lengths 3 and 2, width 4, 2 heads.
    check_op("mha", {{5, 4}, {5, 4}, {5, 4}}, [](const std::vector<Var>& v) {
        Var out = multihead_attention(v[0], v[1], v[2], 2, {0, 3}, {3, 2});
        return mean_all(mul(out, out));
    });
}

TEST_CASE("softmax rows normalize") {
    Rng rng(3);
    Mat z = random_mat(7, 9, rng, 3.0);
    Mat p = softmax_rows_value(z);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        CHECK(std::abs(p.row(r).sum() - 1.0) < 1e-12);
        CHECK(p.row(r).minCoeff() >= 0.0);
    }
}

TEST_CASE("backward accumulates across shared subgraphs") {
    Var a = leaf(Mat::Constant(1, 1, 3.0));
    Var b = mul(a, a);      // a^2
    Var c = add(b, b);      // 2 a^2 -> d/da = 4a = 12
    backward(c);
    CHECK(a->grad(0, 0) == Catch::Approx(12.0).epsilon(1e-12));
}

TEST_CASE("scalar helpers follow the clamped-log convention") {
    CHECK(entropy({0.5, 0.5}) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(entropy({1.0, 0.0}) == 0.0);  // 0 log 0 = 0
    CHECK(cross_entropy_onehot({0.8, 0.2}, 0) == Catch::Approx(-std::log(0.8)).epsilon(1e-12));
    CHECK(std::isfinite(cross_entropy_onehot({1.0, 0.0}, 1)));  // clamped, not -inf
}

TEST_CASE("adam and sgd update parameters deterministically") {
    auto make = [] {
        Var p = leaf(Mat::Constant(2, 2, 1.0));
        return p;
    };
    Var p1 = make();
    Var p2 = make();
    auto run = [](const Var& p, auto& opt) {
        for (int i = 0; i < 5; ++i) {
            Var loss = mean_all(mul(p, p));
            if (p->grad.size() != 0) p->grad.setZero();
            backward(loss);
            opt.step();
        }
    };
    AdamOptimizer a1({p1}, 0.1);
    AdamOptimizer a2({p2}, 0.1);
    run(p1, a1);
    run(p2, a2);
    CHECK(p1->val == p2->val);
    CHECK(p1->val(0, 0) < 1.0);
}
