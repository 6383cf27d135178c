#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "dcr/tape.hpp"
#include "dcr/tensor.hpp"
#include "doctest.h"

using namespace dcr;

namespace {

Tensor seeded_tensor(Shape shape, uint64_t seed, double lo = -2.0, double hi = 2.0) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("tensor invariants") {
    Tensor t(Shape{2, 3}, 1.5);
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(Tensor(Shape{0, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0}), DimensionError);
    CHECK(!t.grad.has_value());
    t.ensure_grad();
    CHECK(t.grad->size() == 6);
    CHECK(t.all_finite());
    t.data[0] = std::nan("");
    CHECK(!t.all_finite());
}

TEST_CASE("layer_norm: constant row normalizes to zero") {
    const Tensor x = Tensor::from({1, 3}, {1, 1, 1});
    const Tensor g(Shape{3}, 1.0), b(Shape{3}, 0.0);
    const Tensor y = kernels::layer_norm(x, g, b, 1e-5);
    for (double v : y.data) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("layer_norm: two-point row at eps=0") {
    const Tensor x = Tensor::from({1, 2}, {0, 2});
    const Tensor g(Shape{2}, 1.0), b(Shape{2}, 0.0);
    const Tensor y = kernels::layer_norm(x, g, b, 0.0);
    CHECK(y.data[0] == doctest::Approx(-1.0));
    CHECK(y.data[1] == doctest::Approx(1.0));
}

TEST_CASE("layer_norm: affine row statistics against direct computation") {
    const Tensor x = Tensor::from({1, 4}, {3, 5, 7, 9});
    const Tensor g(Shape{4}, 2.0), b(Shape{4}, 1.0);
    const double eps = 1e-5;
    const Tensor y = kernels::layer_norm(x, g, b, eps);
    // direct mean/var oracle
    const double mean = (3 + 5 + 7 + 9) / 4.0;
    double var = 0.0;
    for (double v : {3.0, 5.0, 7.0, 9.0}) var += (v - mean) * (v - mean) / 4.0;
    const double inv = 1.0 / std::sqrt(var + eps);
    double ymean = 0.0;
    for (double v : y.data) ymean += v / 4.0;
    CHECK(ymean == doctest::Approx(1.0).epsilon(1e-9));
    double yvar = 0.0;
    for (double v : y.data) yvar += (v - ymean) * (v - ymean) / 4.0;
    CHECK(yvar == doctest::Approx(4.0 * var * inv * inv).epsilon(1e-9));
    // expected entries
    for (int i = 0; i < 4; ++i)
        CHECK(y.data[i] == doctest::Approx(2.0 * (x.data[i] - mean) * inv + 1.0));
    CHECK_THROWS_AS(kernels::layer_norm(x, Tensor(Shape{3}, 1.0), b, eps), DimensionError);
}

TEST_CASE("softmax_rows: symmetry, stability, ratios") {
    const Tensor a = kernels::softmax_rows(Tensor::from({1, 2}, {0, 0}));
    CHECK(a.data[0] == doctest::Approx(0.5));
    const Tensor b = kernels::softmax_rows(Tensor::from({1, 2}, {1000, 1000}));
    CHECK(b.data[0] == doctest::Approx(0.5));
    CHECK(b.all_finite());
    const Tensor c = kernels::softmax_rows(Tensor::from({1, 2}, {0, std::log(3.0)}));
    CHECK(c.data[0] == doctest::Approx(0.25));
    CHECK(c.data[1] == doctest::Approx(0.75));
    // rows sum to one
    const Tensor r = kernels::softmax_rows(seeded_tensor({5, 7}, 11));
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 7; ++j) s += r.data[i * 7 + j];
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("backward: linear and quadratic basics") {
    Tensor x = Tensor::from({3}, {1, 2, 3});
    x.requires_grad = true;
    {
        Tape tape;
        const Var y = tape.sum_all(tape.leaf(x));
        tape.backward(y);
        for (double g : *x.grad) CHECK(g == 1.0);
    }
    Tensor s = Tensor::scalar(3.0);
    s.requires_grad = true;
    {
        Tape tape;
        const Var v = tape.leaf(s);
        const Var y = tape.mse(v, tape.constant(Tensor::scalar(0.0)));  // y = s^2
        tape.backward(y);
        CHECK((*s.grad)[0] == doctest::Approx(6.0));
    }
}

TEST_CASE("backward: shared subexpressions accumulate once per use") {
    Tensor x = Tensor::scalar(2.0);
    x.requires_grad = true;
    Tape tape;
    const Var v = tape.leaf(x);
    const Var w = tape.add(v, v);   // 2x
    const Var y = tape.sum_all(tape.add(w, v));  // 3x
    tape.backward(y);
    CHECK((*x.grad)[0] == doctest::Approx(3.0));
}

TEST_CASE("backward: state errors") {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(Var{}), StateError);
    Tensor x = Tensor::from({2}, {1, 2});
    x.requires_grad = true;
    Tape t2;
    const Var y = t2.sum_all(t2.leaf(x));
    t2.backward(y);
    CHECK_THROWS_AS(t2.backward(y), StateError);
    Tape t3;
    const Var y3 = t3.sum_all(t3.leaf(x));
    CHECK_THROWS_AS(t3.backward(y3, Tensor(Shape{2}, 1.0)), DimensionError);
}

TEST_CASE("no gradient leaks into frozen tensors") {
    Tensor frozen = Tensor::from({2, 2}, {1, 2, 3, 4});
    frozen.requires_grad = false;
    Tensor live = Tensor::from({2, 2}, {5, 6, 7, 8});
    live.requires_grad = true;
    Tape tape;
    const Var y = tape.sum_all(tape.matmul(tape.leaf(frozen), tape.leaf(live)));
    tape.backward(y);
    CHECK(!frozen.grad.has_value());
    CHECK(live.grad.has_value());
}

TEST_CASE("graph is topologically ordered") {
    Tensor x = seeded_tensor({3, 3}, 5);
    Tape tape;
    const Var a = tape.leaf(x);
    const Var b = tape.gelu(a);
    const Var c = tape.matmul(a, b);
    tape.sum_all(c);
    for (size_t id = 0; id < tape.node_count(); ++id)
        for (int32_t in : tape.node_inputs(static_cast<int32_t>(id)))
            CHECK(in < static_cast<int32_t>(id));
}

TEST_CASE("finite_diff_check: quadratic, composed, constant") {
    // sum of squares: central differences are exact up to rounding
    const Tensor x0 = Tensor::from({2}, {1, -2});
    const double e1 = finite_diff_check(
        [](Tape& t, Var v) { return t.sum_all(t.mse(v, t.constant(Tensor(Shape{2}, 0.0)))); }, x0, 1e-5);
    CHECK(e1 <= 1e-8);

    // layer_norm (random affine) composed with sum
    const Tensor x1 = seeded_tensor({2, 5}, 42);
    const double e2 = finite_diff_check(
        [](Tape& t, Var v) {
            return t.sum_all(t.layer_norm(v, t.constant(seeded_tensor({5}, 43)),
                                          t.constant(seeded_tensor({5}, 44)), 1e-5));
        },
        x1, 1e-5);
    CHECK(e2 <= 1e-5);

    // constant function: both sides zero
    const double e3 = finite_diff_check(
        [](Tape& t, Var v) { return t.constant(Tensor::scalar(7.0)); (void)v; }, x0, 1e-5);
    CHECK(e3 == 0.0);

    CHECK_THROWS_AS(finite_diff_check(
        [](Tape& t, Var v) { return t.sum_all(v); }, x0, 0.0), ParameterError);
}

TEST_CASE("gradient correctness across the op set") {
    // every differentiable op against central differences on seeded inputs
    const double h = 1e-5;
    const double tol = 1e-5;
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        const Tensor x = seeded_tensor({3, 4}, seed);
        const Tensor other = seeded_tensor({3, 4}, seed + 100);
        const Tensor w = seeded_tensor({4, 3}, seed + 200);
        const Tensor target = seeded_tensor({3, 3}, seed + 300, 0.0, 1.0);

        // a linear ballast term keeps every coordinate's gradient away from 0,
        // so the relative-error metric stays conditioned; op-gradient errors
        // still surface in the numerator
        auto check = [&](const char* name, const std::function<Var(Tape&, Var)>& f, const Tensor& at) {
            const auto ballasted = [&f](Tape& t, Var v) {
                return t.add(f(t, v), t.scale(t.sum_all(v), 10.0));
            };
            const double err = finite_diff_check(ballasted, at, h);
            INFO(name << " seed " << seed << " err " << err);
            CHECK(err <= tol);
        };

        check("add", [&](Tape& t, Var v) {
            return t.mse(t.add(v, t.constant(other)), t.constant(Tensor(Shape{3, 4}, 0.25)));
        }, x);
        check("scale", [&](Tape& t, Var v) {
            return t.mse(t.scale(v, -1.7), t.constant(Tensor(Shape{3, 4}, 0.25)));
        }, x);
        check("matmul_lhs", [&](Tape& t, Var v) {
            return t.mse(t.matmul(v, t.constant(w)), t.constant(target));
        }, x);
        check("matmul_rhs", [&](Tape& t, Var v) {
            return t.mse(t.matmul(t.constant(x), v), t.constant(target));
        }, w);
        check("transpose", [&](Tape& t, Var v) {
            return t.mse(t.transpose(v), t.constant(Tensor(Shape{4, 3}, 0.1)));
        }, x);
        check("gelu", [&](Tape& t, Var v) {
            return t.mse(t.gelu(v), t.constant(Tensor(Shape{3, 4}, 0.2)));
        }, x);
        check("softmax_rows", [&](Tape& t, Var v) {
            return t.mse(t.softmax_rows(v), t.constant(Tensor(Shape{3, 4}, 0.25)));
        }, x);
        check("layer_norm_x", [&](Tape& t, Var v) {
            return t.mse(t.layer_norm(v, t.constant(seeded_tensor({4}, 7)), t.constant(seeded_tensor({4}, 8)), 1e-5),
                         t.constant(Tensor(Shape{3, 4}, 0.3)));
        }, x);
        check("layer_norm_gamma", [&](Tape& t, Var v) {
            return t.mse(t.layer_norm(t.constant(x), v, t.constant(seeded_tensor({4}, 8)), 1e-5),
                         t.constant(Tensor(Shape{3, 4}, 0.3)));
        }, seeded_tensor({4}, 7));
        check("layer_norm_beta", [&](Tape& t, Var v) {
            return t.mse(t.layer_norm(t.constant(x), t.constant(seeded_tensor({4}, 7)), v, 1e-5),
                         t.constant(Tensor(Shape{3, 4}, 0.3)));
        }, seeded_tensor({4}, 8));
        check("reshape", [&](Tape& t, Var v) {
            return t.mse(t.reshape(v, {4, 3}), t.constant(Tensor(Shape{4, 3}, 0.4)));
        }, x);
        check("slice_last", [&](Tape& t, Var v) {
            return t.mse(t.slice_last(v, 1, 2), t.constant(Tensor(Shape{3, 2}, 0.4)));
        }, x);
        check("slice_rows", [&](Tape& t, Var v) {
            return t.mse(t.slice_rows(v, 1, 2), t.constant(Tensor(Shape{2, 4}, 0.4)));
        }, x);
        check("gather_rows", [&](Tape& t, Var v) {
            return t.mse(t.gather_rows(v, {2, 0, 2}), t.constant(Tensor(Shape{3, 4}, 0.1)));
        }, x);
        check("bias_add_x", [&](Tape& t, Var v) {
            return t.mse(t.bias_add(v, t.constant(seeded_tensor({4}, 9))),
                         t.constant(Tensor(Shape{3, 4}, 0.2)));
        }, x);
        check("bias_add_b", [&](Tape& t, Var v) {
            return t.mse(t.bias_add(t.constant(x), v), t.constant(Tensor(Shape{3, 4}, 0.2)));
        }, seeded_tensor({4}, 9));
        check("mean_all", [&](Tape& t, Var v) { return t.mean_all(t.gelu(v)); }, x);
        check("sum_all", [&](Tape& t, Var v) { return t.scale(t.sum_all(t.gelu(v)), 0.3); }, x);
        check("mse_lhs", [&](Tape& t, Var v) { return t.mse(v, t.constant(other)); }, x);
        check("mse_rhs", [&](Tape& t, Var v) { return t.mse(t.constant(other), v); }, x);
        check("cross_entropy_ls", [&](Tape& t, Var v) {
            return t.cross_entropy_ls(v, {0, 2, 1}, 0.1);
        }, seeded_tensor({3, 4}, seed + 400));
        check("kl_soft_targets", [&](Tape& t, Var v) {
            return t.kl_soft_targets(v, seeded_tensor({3, 4}, seed + 500), 4.0);
        }, seeded_tensor({3, 4}, seed + 401));
        check("row_blend", [&](Tape& t, Var v) {
            return t.mse(t.row_blend(t.constant(other), v, {0.3, 0.8, 0.5}),
                         t.constant(Tensor(Shape{3, 4}, 0.2)));
        }, x);
    }
}

TEST_CASE("rank-3 ops: batched matmul, bcast add, mean over tokens") {
    const double h = 1e-5, tol = 1e-5;
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        const Tensor x3 = seeded_tensor({2, 3, 4}, seed);
        const Tensor w = seeded_tensor({4, 5}, seed + 1);
        const Tensor y3 = seeded_tensor({2, 4, 3}, seed + 2);

        auto check = [&](const std::function<Var(Tape&, Var)>& f, const Tensor& at) {
            const auto ballasted = [&f](Tape& t, Var v) {
                return t.add(f(t, v), t.scale(t.sum_all(v), 10.0));
            };
            const double err = finite_diff_check(ballasted, at, h);
            CHECK(err <= tol);
        };

        check([&](Tape& t, Var v) {
            return t.mse(t.matmul(v, t.constant(w)), t.constant(Tensor(Shape{2, 3, 5}, 0.2)));
        }, x3);
        check([&](Tape& t, Var v) {
            return t.mse(t.matmul(t.constant(x3), v), t.constant(Tensor(Shape{2, 3, 3}, 0.2)));
        }, y3);
        check([&](Tape& t, Var v) {
            return t.mse(t.transpose(v), t.constant(Tensor(Shape{2, 4, 3}, 0.2)));
        }, x3);
        check([&](Tape& t, Var v) {
            return t.mse(t.bcast0_add(t.constant(x3), v), t.constant(Tensor(Shape{2, 3, 4}, 0.2)));
        }, seeded_tensor({3, 4}, seed + 3));
        check([&](Tape& t, Var v) {
            return t.mse(t.mean_axis1(v), t.constant(Tensor(Shape{2, 4}, 0.2)));
        }, x3);
    }
}

TEST_CASE("composed micro-graph matches finite differences") {
    // LN -> matmul -> softmax -> cross-entropy
    for (uint64_t seed = 1; seed <= 3; ++seed) {
        const Tensor x = seeded_tensor({4, 6}, seed);
        const Tensor w = seeded_tensor({6, 5}, seed + 50);
        const double err = finite_diff_check(
            [&](Tape& t, Var v) {
                Tensor g(Shape{6}, 1.0), b(Shape{6}, 0.0);
                const Var h = t.layer_norm(v, t.constant(g), t.constant(b), 1e-5);
                const Var logits = t.matmul(h, t.constant(w));
                return t.cross_entropy_ls(logits, {0, 3, 2, 4}, 0.1);
            },
            x, 1e-5);
        CHECK(err <= 1e-5);
    }
}

TEST_CASE("determinism: identical seeds give bit-identical forward/backward") {
    auto run = [](uint64_t seed) {
        Tensor x = seeded_tensor({4, 4}, seed);
        x.requires_grad = true;
        Tape tape;
        const Var v = tape.leaf(x);
        const Var y = tape.mse(tape.gelu(tape.matmul(v, v)), tape.constant(Tensor(Shape{4, 4}, 0.1)));
        tape.backward(y);
        return std::make_pair(tape.val(y).data[0], *x.grad);
    };
    const auto [y1, g1] = run(77);
    const auto [y2, g2] = run(77);
    CHECK(y1 == y2);
    CHECK(g1 == g2);
}

TEST_CASE("mse values") {
    const Tensor a = Tensor::from({2}, {1, -1});
    const Tensor b = Tensor::from({2}, {0, 0});
    CHECK(kernels::mse(a, b) == doctest::Approx(1.0));
    CHECK_THROWS_AS(kernels::mse(a, Tensor(Shape{3}, 0.0)), DimensionError);
}

TEST_CASE("cross entropy with label smoothing: uniform logits") {
    const Tensor logits(Shape{2, 4}, 0.0);
    const double loss = kernels::cross_entropy_ls(logits, std::vector<int>{1, 2}, 0.1);
    CHECK(loss == doctest::Approx(std::log(4.0)));
    CHECK_THROWS_AS(kernels::cross_entropy_ls(logits, std::vector<int>{1}, 0.1), DimensionError);
    CHECK_THROWS_AS(kernels::cross_entropy_ls(logits, std::vector<int>{1, 9}, 0.1), ParameterError);
}
