#include <cmath>
#include <functional>

#include "doctest.h"
#include "mpot/tape.hpp"

using namespace mpot;
using mpot::ad::Tape;
using mpot::ad::Var;

namespace {

// Central-difference check of d(sum of f(x)) / dx over every coordinate.
void check_gradients(const Matrix& x,
                     const std::function<Var(Tape&, Var)>& f,
                     double tol = 1e-6, double h = 1e-6) {
    Tape t;
    Var p = t.param(x);
    Var loss = t.sum(f(t, p));
    t.backward(loss);
    const Matrix analytic = t.grad(p);

    for (size_t i = 0; i < x.data.size(); ++i) {
        Matrix xp = x, xm = x;
        xp.data[i] += h;
        xm.data[i] -= h;
        Tape tp, tm;
        const double lp = tp.value(tp.sum(f(tp, tp.param(xp))))(0, 0);
        const double lm = tm.value(tm.sum(f(tm, tm.param(xm))))(0, 0);
        const double fd = (lp - lm) / (2 * h);
        const double scale = std::max({1.0, std::abs(fd), std::abs(analytic.data[i])});
        CHECK(std::abs(fd - analytic.data[i]) / scale < tol);
    }
}

Matrix rand_mat(int r, int c, uint64_t seed, double sd = 1.0) {
    Rng rng(seed);
    return random_normal(r, c, rng, sd);
}

}  // namespace

TEST_CASE("elementwise op gradients") {
    const Matrix x = rand_mat(3, 4, 1);
    const Matrix y = rand_mat(3, 4, 2);
    check_gradients(x, [&](Tape& t, Var p) { return t.add(p, t.constant(y)); });
    check_gradients(x, [&](Tape& t, Var p) { return t.sub(t.constant(y), p); });
    check_gradients(x, [&](Tape& t, Var p) { return t.mul(p, t.constant(y)); });
    check_gradients(x, [&](Tape& t, Var p) {
        return t.div(t.constant(y), t.add_scalar(t.mul(p, p), 1.0));
    });
    check_gradients(x, [&](Tape& t, Var p) { return t.scale(t.neg(p), -1.7); });
    check_gradients(x, [&](Tape& t, Var p) { return t.exp_(t.scale(p, 0.3)); });
    check_gradients(x, [&](Tape& t, Var p) {
        return t.log_(t.add_scalar(t.mul(p, p), 0.5));
    });
    check_gradients(x, [&](Tape& t, Var p) { return t.sigmoid_(p); });
    check_gradients(x, [&](Tape& t, Var p) { return t.tanh_(p); });
    check_gradients(x, [&](Tape& t, Var p) {
        return t.pow_scalar(t.sigmoid_(p), 2.5);
    });
}

TEST_CASE("clamp gradient passes only strictly inside the interval") {
    Matrix x(1, 3);
    x(0, 0) = -2.0;
    x(0, 1) = 0.2;
    x(0, 2) = 3.0;
    Tape t;
    Var p = t.param(x);
    t.backward(t.sum(t.clamp_(p, -1.0, 1.0)));
    CHECK(t.grad(p)(0, 0) == 0.0);
    CHECK(t.grad(p)(0, 1) == 1.0);
    CHECK(t.grad(p)(0, 2) == 0.0);
}

TEST_CASE("matmul and transpose gradients") {
    const Matrix a = rand_mat(3, 5, 3), b = rand_mat(5, 2, 4);
    check_gradients(a, [&](Tape& t, Var p) { return t.matmul(p, t.constant(b)); });
    check_gradients(b, [&](Tape& t, Var p) { return t.matmul(t.constant(a), p); });
    check_gradients(a, [&](Tape& t, Var p) {
        return t.matmul(t.transpose(p), t.constant(a));
    });
}

TEST_CASE("broadcast gradients") {
    const Matrix m = rand_mat(4, 3, 5);
    const Matrix row = rand_mat(1, 3, 6), col = rand_mat(4, 1, 7);
    check_gradients(m, [&](Tape& t, Var p) { return t.add_rowvec(p, t.constant(row)); });
    check_gradients(row, [&](Tape& t, Var p) { return t.add_rowvec(t.constant(m), p); });
    check_gradients(m, [&](Tape& t, Var p) { return t.add_colvec(p, t.constant(col)); });
    check_gradients(col, [&](Tape& t, Var p) { return t.add_colvec(t.constant(m), p); });
    check_gradients(m, [&](Tape& t, Var p) { return t.mul_rowvec(p, t.constant(row)); });
    check_gradients(row, [&](Tape& t, Var p) { return t.mul_rowvec(t.constant(m), p); });
    check_gradients(m, [&](Tape& t, Var p) { return t.mul_colvec(p, t.constant(col)); });
    check_gradients(col, [&](Tape& t, Var p) { return t.mul_colvec(t.constant(m), p); });
}

TEST_CASE("log-sum-exp reductions") {
    const Matrix m = rand_mat(4, 3, 8, 2.0);
    check_gradients(m, [&](Tape& t, Var p) { return t.lse_rows(p); });
    check_gradients(m, [&](Tape& t, Var p) { return t.lse_cols(p); });

    // value check against direct evaluation
    Tape t;
    const Matrix lr = t.value(t.lse_rows(t.constant(m)));
    for (int i = 0; i < 4; ++i) {
        double s = 0;
        for (int j = 0; j < 3; ++j) s += std::exp(m(i, j));
        CHECK(lr(i, 0) == doctest::Approx(std::log(s)).epsilon(1e-12));
    }
}

TEST_CASE("lse is stable for large magnitudes") {
    Matrix m(1, 2);
    m(0, 0) = 800.0;
    m(0, 1) = 790.0;
    Tape t;
    const double v = t.value(t.lse_rows(t.constant(m)))(0, 0);
    CHECK(std::isfinite(v));
    CHECK(v == doctest::Approx(800.0 + std::log(1 + std::exp(-10.0))).epsilon(1e-12));
}

TEST_CASE("slicing, concatenation and block sums") {
    const Matrix m = rand_mat(3, 6, 9);
    check_gradients(m, [&](Tape& t, Var p) { return t.slice_cols(p, 2, 3); });
    check_gradients(m, [&](Tape& t, Var p) {
        return t.hcat({t.slice_cols(p, 0, 2), t.scale(t.slice_cols(p, 3, 2), 2.0)});
    });
    check_gradients(m, [&](Tape& t, Var p) { return t.block_sum_cols(p, 3); });

    Tape t;
    const Matrix bs = t.value(t.block_sum_cols(t.constant(m), 2));
    REQUIRE(bs.cols == 3);
    CHECK(bs(1, 0) == doctest::Approx(m(1, 0) + m(1, 1)));
    CHECK(bs(2, 2) == doctest::Approx(m(2, 4) + m(2, 5)));
}

TEST_CASE("row normalization and softmax gradients") {
    const Matrix m = rand_mat(4, 5, 10);
    check_gradients(m, [&](Tape& t, Var p) { return t.l2_normalize_rows(p); });
    check_gradients(m, [&](Tape& t, Var p) {
        return t.mul(t.softmax_rows(p), t.constant(rand_mat(4, 5, 11)));
    });

    Tape t;
    const Matrix sm = t.value(t.softmax_rows(t.constant(m)));
    for (int i = 0; i < 4; ++i) {
        double s = 0;
        for (int j = 0; j < 5; ++j) s += sm(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("bilinear upsample hand values and gradients") {
    // one channel storing the 2x2 grid [[0,1],[2,3]]
    Matrix m(4, 1);
    m.data = {0, 1, 2, 3};
    Tape t;
    const Matrix up = t.value(t.upsample_bilinear(t.constant(m), 2, 2, 4, 4));
    REQUIRE(up.rows == 16);
    CHECK(up(0, 0) == doctest::Approx(0.0));   // corners preserved
    CHECK(up(3, 0) == doctest::Approx(1.0));
    CHECK(up(12, 0) == doctest::Approx(2.0));
    CHECK(up(15, 0) == doctest::Approx(3.0));
    CHECK(up(1, 0) == doctest::Approx(1.0 / 3));  // linear along the top row
    CHECK(up(5, 0) == doctest::Approx(2.0 / 3 + 1.0 / 3));  // interior bilinear

    const Matrix chan = rand_mat(4, 2, 12);
    check_gradients(chan, [&](Tape& tt, Var p) {
        return tt.upsample_bilinear(p, 2, 2, 3, 5);
    });

    // identity when sizes match; constants stay constant
    const Matrix cm(6, 1, 0.7);
    Tape t2;
    CHECK(max_abs_diff(t2.value(t2.upsample_bilinear(t2.constant(chan), 2, 2, 2, 2)), chan) == 0.0);
    const Matrix cup = t2.value(t2.upsample_bilinear(t2.constant(cm), 2, 3, 8, 9));
    for (double v : cup.data) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("detach blocks gradient flow") {
    const Matrix m = rand_mat(2, 2, 13);
    Tape t;
    Var p = t.param(m);
    Var loss = t.sum(t.mul(t.detach(p), p));
    t.backward(loss);
    // with detach, d/dp (const * p) = const = value of p
    CHECK(max_abs_diff(t.grad(p), m) < 1e-12);
}

TEST_CASE("gradients accumulate across fan-out") {
    const Matrix m = rand_mat(2, 3, 14);
    check_gradients(m, [&](Tape& t, Var p) {
        Var a = t.sigmoid_(p);
        return t.add(t.mul(a, p), t.scale(a, 0.5));
    });
}
