#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "promptseg/tensor.hpp"

#include <cmath>
#include <functional>
#include <vector>

using namespace promptseg;

namespace {

Mat random_mat(Rng& rng, int r, int c, double scale = 1.0) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(-scale, scale);
    return m;
}

// builds a fresh tape over `inputs` and reduces the op under test to a scalar
using ScalarFn = std::function<Val(Tape&, const std::vector<Val>&)>;

double eval_scalar(const std::vector<Mat>& inputs, const ScalarFn& f) {
    Tape t;
    std::vector<Val> vs;
    for (const Mat& m : inputs) vs.push_back(t.leaf(m));
    return t.value(f(t, vs))(0, 0);
}

// max relative error between analytic and central-difference gradients
double fd_max_rel_err(const std::vector<Mat>& inputs, const ScalarFn& f,
                      double eps = 1e-6) {
    Tape t;
    std::vector<Val> vs;
    for (const Mat& m : inputs) vs.push_back(t.leaf(m));
    Val out = f(t, vs);
    REQUIRE(t.value(out).size() == 1);
    t.backward(out);
    std::vector<Mat> analytic;
    for (Val v : vs) analytic.push_back(t.grad(v));

    double worst = 0;
    for (size_t i = 0; i < inputs.size(); ++i)
        for (int r = 0; r < inputs[i].rows(); ++r)
            for (int c = 0; c < inputs[i].cols(); ++c) {
                std::vector<Mat> plus = inputs, minus = inputs;
                plus[i](r, c) += eps;
                minus[i](r, c) -= eps;
                double num = (eval_scalar(plus, f) - eval_scalar(minus, f)) / (2 * eps);
                double ana = analytic[i](r, c);
                double rel = std::abs(ana - num) / std::max(std::abs(ana) + std::abs(num), 1e-4);
                worst = std::max(worst, rel);
            }
    return worst;
}

}  // namespace

TEST_CASE("leaf and constant values round-trip") {
    Rng rng(1);
    Mat m = random_mat(rng, 3, 4);
    Tape t;
    Val a = t.leaf(m);
    Val c = t.constant(m);
    CHECK(t.value(a) == m);
    CHECK(t.requires_grad(a));
    CHECK_FALSE(t.requires_grad(c));
}

TEST_CASE("elementwise op values") {
    Tape t;
    Mat a(1, 3), b(1, 3);
    a << 1, 2, 3;
    b << 4, 5, 6;
    Val va = t.leaf(a), vb = t.leaf(b);
    CHECK(t.value(t.add(va, vb)) == Mat((Mat(1, 3) << 5, 7, 9).finished()));
    CHECK(t.value(t.sub(va, vb)) == Mat((Mat(1, 3) << -3, -3, -3).finished()));
    CHECK(t.value(t.mul(va, vb)) == Mat((Mat(1, 3) << 4, 10, 18).finished()));
    CHECK(t.value(t.affine(va, 2.0, 1.0)) == Mat((Mat(1, 3) << 3, 5, 7).finished()));
}

TEST_CASE("pointwise activations hit known values") {
    Tape t;
    Mat x(1, 3);
    x << 0.0, 1.0, -1.0;
    Val v = t.leaf(x);
    Mat s = t.value(t.sigmoid(v));
    CHECK(s(0, 0) == doctest::Approx(0.5));
    CHECK(s(0, 1) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
    Mat g = t.value(t.gelu(v));
    CHECK(g(0, 0) == 0.0);
    // x * Phi(x) at x = 1
    CHECK(g(0, 1) == doctest::Approx(0.5 * (1.0 + std::erf(1.0 / M_SQRT2))));
    CHECK(g(0, 2) == doctest::Approx(-0.5 * (1.0 + std::erf(-1.0 / M_SQRT2))));
}

TEST_CASE("softmax rows sum to one and layernorm normalizes") {
    Rng rng(2);
    Mat x = random_mat(rng, 4, 6, 3.0);
    Tape t;
    Val v = t.leaf(x);
    Mat sm = t.value(t.softmax_rows(v));
    for (int r = 0; r < sm.rows(); ++r)
        CHECK(sm.row(r).sum() == doctest::Approx(1.0));
    Mat ln = t.value(t.layernorm_rows(v));
    for (int r = 0; r < ln.rows(); ++r) {
        CHECK(ln.row(r).mean() == doctest::Approx(0.0).epsilon(1e-9));
        double var = (ln.row(r).array() - ln.row(r).mean()).square().mean();
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("bce with logits equals ln 2 at zero logits") {
    Tape t;
    Mat z = Mat::Zero(3, 5);
    Mat target = Mat::Zero(3, 5);
    target(0, 0) = 1;
    Val loss = t.bce_logits_mean(t.leaf(z), target);
    CHECK(t.value(loss)(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("bce with logits is stable at extreme logits") {
    Tape t;
    Mat z(1, 2);
    z << 500.0, -500.0;
    Mat target(1, 2);
    target << 1.0, 0.0;
    Val loss = t.bce_logits_mean(t.leaf(z), target);
    CHECK(std::isfinite(t.value(loss)(0, 0)));
    CHECK(t.value(loss)(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("conv2d matches a naive reference") {
    Rng rng(3);
    const int cin = 2, h = 5, w = 6, cout = 3, k = 3, stride = 2, pad = 1;
    Mat x = random_mat(rng, cin, h * w);
    Mat wt = random_mat(rng, cout, cin * k * k);
    Mat b = random_mat(rng, cout, 1);
    Tape t;
    Val out = t.conv2d(t.leaf(x), t.leaf(wt), t.leaf(b), cin, h, w, cout, k, stride, pad);
    const int oh = (h + 2 * pad - k) / stride + 1;
    const int ow = (w + 2 * pad - k) / stride + 1;
    const Mat& got = t.value(out);
    REQUIRE(got.rows() == cout);
    REQUIRE(got.cols() == oh * ow);
    for (int co = 0; co < cout; ++co)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double acc = b(co, 0);
                for (int ci = 0; ci < cin; ++ci)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            int iy = oy * stride + ky - pad;
                            int ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += wt(co, (ci * k + ky) * k + kx) * x(ci, iy * w + ix);
                        }
                CHECK(got(co, oy * ow + ox) == doctest::Approx(acc).epsilon(1e-12));
            }
}

TEST_CASE("upsample2x repeats pixels") {
    Tape t;
    Mat x(1, 4);
    x << 1, 2, 3, 4;  // 2x2 map
    Mat up = t.value(t.upsample2x(t.leaf(x), 1, 2, 2));
    Mat expect(1, 16);
    expect << 1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4;
    CHECK(up == expect);
}

TEST_CASE("gradients agree with central differences per op") {
    Rng rng(4);
    auto two = [&](int r1, int c1, int r2, int c2) {
        return std::vector<Mat>{random_mat(rng, r1, c1), random_mat(rng, r2, c2)};
    };
    auto one = [&](int r, int c, double s = 1.0) {
        return std::vector<Mat>{random_mat(rng, r, c, s)};
    };

    CHECK(fd_max_rel_err(two(3, 4, 3, 4), [](Tape& t, const std::vector<Val>& v) {
              return t.sum(t.add(v[0], v[1]));
          }) < 1e-6);
    CHECK(fd_max_rel_err(two(3, 4, 3, 4), [](Tape& t, const std::vector<Val>& v) {
              return t.sum(t.mul(v[0], v[1]));
          }) < 1e-6);
    CHECK(fd_max_rel_err(two(2, 3, 2, 3), [](Tape& t, const std::vector<Val>& v) {
              // keep the denominator away from zero
              return t.sum(t.div(v[0], t.affine(t.sigmoid(v[1]), 1.0, 0.5)));
          }) < 1e-5);
    CHECK(fd_max_rel_err(two(3, 4, 4, 5), [](Tape& t, const std::vector<Val>& v) {
              return t.sum(t.matmul(v[0], v[1]));
          }) < 1e-6);
    CHECK(fd_max_rel_err(two(3, 4, 5, 4), [](Tape& t, const std::vector<Val>& v) {
              return t.sum(t.matmul_nt(v[0], v[1]));
          }) < 1e-6);
    CHECK(fd_max_rel_err(two(3, 4, 1, 4), [](Tape& t, const std::vector<Val>& v) {
              return t.sum(t.mul(t.add_rowvec(v[0], v[1]), v[0]));
          }) < 1e-6);
    CHECK(fd_max_rel_err(two(3, 4, 1, 4), [](Tape& t, const std::vector<Val>& v) {
              return t.sum(t.mul_rowvec(v[0], v[1]));
          }) < 1e-6);
    CHECK(fd_max_rel_err(one(4, 3), [](Tape& t, const std::vector<Val>& v) {
              return t.sum(t.mul(t.transpose(v[0]), t.transpose(v[0])));
          }) < 1e-6);
    CHECK(fd_max_rel_err(one(3, 5, 2.0), [](Tape& t, const std::vector<Val>& v) {
              return t.mean(t.gelu(v[0]));
          }) < 1e-5);
    CHECK(fd_max_rel_err(one(3, 5, 3.0), [](Tape& t, const std::vector<Val>& v) {
              return t.mean(t.sigmoid(v[0]));
          }) < 1e-5);
    CHECK(fd_max_rel_err(one(3, 5, 2.0), [](Tape& t, const std::vector<Val>& v) {
              // weighted reduction exercises off-diagonal softmax jacobian
              Mat w(3, 5);
              for (int r = 0; r < 3; ++r)
                  for (int c = 0; c < 5; ++c) w(r, c) = 0.1 * (r + 1) * (c + 1);
              return t.sum(t.mul(t.softmax_rows(v[0]), t.constant(w)));
          }) < 1e-5);
    CHECK(fd_max_rel_err(one(3, 6, 2.0), [](Tape& t, const std::vector<Val>& v) {
              Mat w(3, 6);
              for (int r = 0; r < 3; ++r)
                  for (int c = 0; c < 6; ++c) w(r, c) = 0.05 * (r + 2) * (c + 1);
              return t.sum(t.mul(t.layernorm_rows(v[0]), t.constant(w)));
          }) < 1e-4);
    CHECK(fd_max_rel_err(one(4, 6), [](Tape& t, const std::vector<Val>& v) {
              return t.sum(t.mul(t.slice_cols(v[0], 1, 3), t.slice_cols(v[0], 2, 3)));
          }) < 1e-6);
    CHECK(fd_max_rel_err(one(5, 3), [](Tape& t, const std::vector<Val>& v) {
              return t.sum(t.mul(t.slice_rows(v[0], 1, 2), t.slice_rows(v[0], 3, 2)));
          }) < 1e-6);
    CHECK(fd_max_rel_err(two(3, 2, 3, 4), [](Tape& t, const std::vector<Val>& v) {
              Val cat = t.concat_cols(v[0], v[1]);
              return t.sum(t.mul(cat, cat));
          }) < 1e-6);
    CHECK(fd_max_rel_err(one(2, 6, 2.0), [](Tape& t, const std::vector<Val>& v) {
              Mat target = Mat::Zero(2, 6);
              target(0, 1) = 1;
              target(1, 4) = 1;
              return t.bce_logits_mean(v[0], target);
          }) < 1e-5);

    // conv + upsample chain
    std::vector<Mat> conv_in = {random_mat(rng, 2, 16), random_mat(rng, 3, 2 * 9),
                                random_mat(rng, 3, 1)};
    CHECK(fd_max_rel_err(conv_in, [](Tape& t, const std::vector<Val>& v) {
              Val y = t.conv2d(v[0], v[1], v[2], 2, 4, 4, 3, 3, 1, 1);
              Val u = t.upsample2x(y, 3, 4, 4);
              return t.sum(t.mul(u, u));
          }) < 1e-5);
}

TEST_CASE("backward skips branches without gradient demand") {
    Rng rng(5);
    Mat a = random_mat(rng, 2, 2), b = random_mat(rng, 2, 2);
    Tape t;
    Val va = t.leaf(a);       // trainable
    Val vb = t.constant(b);   // frozen
    Val frozen_chain = t.mul(vb, vb);
    CHECK_FALSE(t.requires_grad(frozen_chain));
    Val mixed = t.mul(va, frozen_chain);
    CHECK(t.requires_grad(mixed));
    Val out = t.sum(mixed);
    t.backward(out);
    CHECK(t.grad(va).size() == 4);
    CHECK(t.grad(vb).size() == 0);  // never allocated
}

TEST_CASE("matmul counts multiply-accumulates") {
    Tape t;
    Mat a = Mat::Ones(3, 4), b = Mat::Ones(4, 5);
    t.matmul(t.leaf(a), t.leaf(b));
    CHECK(t.stats.total_madds == 3 * 4 * 5);
}

TEST_CASE("second backward on a fresh tape reproduces gradients") {
    Rng rng(6);
    Mat x = random_mat(rng, 3, 3);
    auto run = [&]() {
        Tape t;
        Val v = t.leaf(x);
        Val out = t.sum(t.mul(t.gelu(v), v));
        t.backward(out);
        return Mat(t.grad(v));
    };
    CHECK(run() == run());
}
