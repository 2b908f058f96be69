#include <cmath>

#include "doctest.h"
#include "fewshot/gradcheck.hpp"
#include "fewshot/graph.hpp"
#include "test_util.hpp"

using namespace fewshot;
using testutil::rand_labels;
using testutil::rand_positive;
using testutil::rand_signed;
using testutil::randn;

namespace {
constexpr double kEps = 1e-5;
constexpr double kTol = 1e-4;  // layer-op tolerance for f64 central differences
}  // namespace

TEST_SUITE("graph_core") {
  TEST_CASE("backward on a consumed tape throws") {
    Graph<double> g;
    Var x = g.input(Tensor<double>::scalar(2.0), true);
    Var y = g.mul(x, x);
    g.backward(y);
    CHECK(g.grad(x)[0] == doctest::Approx(4.0));
    CHECK_THROWS_AS(g.backward(y), ContractError);
  }

  TEST_CASE("backward requires a scalar root") {
    Graph<double> g;
    Var x = g.input(Tensor<double>({2, 2}), true);
    Var y = g.relu(x);
    CHECK_THROWS_AS(g.backward(y), ContractError);
  }

  TEST_CASE("parameter gradients accumulate across tapes until zeroed") {
    ParameterStore<double> store;
    auto& p = store.add_param("p", Tensor<double>({2}, {1.0, 2.0}));
    for (int pass = 0; pass < 2; ++pass) {
      Graph<double> g;
      Var v = g.param(p);
      g.backward(g.sum(v));
    }
    CHECK(p.grad[0] == doctest::Approx(2.0));
    CHECK(p.grad[1] == doctest::Approx(2.0));
    store.zero_grad();
    CHECK(p.grad[0] == 0.0);
  }

  TEST_CASE("using one parameter twice on a tape sums both contributions") {
    ParameterStore<double> store;
    auto& p = store.add_param("p", Tensor<double>({1}, {3.0}));
    Graph<double> g;
    Var a = g.param(p);
    Var b = g.param(p);
    g.backward(g.sum(g.mul(a, b)));  // d(p^2)/dp = 2p
    CHECK(p.grad[0] == doctest::Approx(6.0));
  }

  TEST_CASE("constants receive no gradient") {
    Graph<double> g;
    Var c = g.constant(Tensor<double>({2}, {1.0, 2.0}));
    Var x = g.input(Tensor<double>({2}, {3.0, 4.0}), true);
    g.backward(g.sum(g.mul(x, c)));
    CHECK(g.grad(c).numel() == 0);
    CHECK(g.grad(x)[0] == doctest::Approx(1.0));
    CHECK(g.grad(x)[1] == doctest::Approx(2.0));
  }
}

TEST_SUITE("graph_elementwise") {
  TEST_CASE("binary ops: finite differences on both operands, with broadcast") {
    Rng rng(100);
    for (int inst = 0; inst < 3; ++inst) {
      auto a0 = rand_signed<double>(rng, {2, 3}, 0.3, 1.5);
      auto bfull = rand_signed<double>(rng, {2, 3}, 0.3, 1.5);
      auto bsuf = rand_signed<double>(rng, {3}, 0.3, 1.5);
      auto bscalar = rand_signed<double>(rng, {}, 0.3, 1.5);

      auto check_both = [&](auto opname, auto make) {
        (void)opname;
        for (const Tensor<double>* bptr : {&bfull, &bsuf, &bscalar}) {
          const Tensor<double> bcopy = *bptr;
          // d/da
          double err = finite_diff_check<double>(
              [&](Graph<double>& g, Var x) {
                return g.sum(make(g, x, g.constant(bcopy)));
              },
              a0, kEps);
          CHECK(err < kTol);
          // d/db
          err = finite_diff_check<double>(
              [&](Graph<double>& g, Var x) {
                return g.sum(make(g, g.constant(a0), x));
              },
              bcopy, kEps);
          CHECK(err < kTol);
        }
      };
      check_both("add", [](Graph<double>& g, Var a, Var b) { return g.add(a, b); });
      check_both("sub", [](Graph<double>& g, Var a, Var b) { return g.sub(a, b); });
      check_both("mul", [](Graph<double>& g, Var a, Var b) { return g.mul(a, b); });
      check_both("div", [](Graph<double>& g, Var a, Var b) { return g.divide(a, b); });
    }
  }

  TEST_CASE("broadcast requires a suffix shape") {
    Graph<double> g;
    Var a = g.input(Tensor<double>({2, 3}), false);
    Var b = g.input(Tensor<double>({2}), false);
    CHECK_THROWS_AS(g.add(a, b), DimensionError);
  }

  TEST_CASE("broadcast backward sums over leading dims") {
    Graph<double> g;
    Var a = g.input(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}), false);
    Var b = g.input(Tensor<double>({3}, {1.0, 1.0, 1.0}), true);
    g.backward(g.sum(g.mul(a, b)));
    CHECK(g.grad(b)[0] == doctest::Approx(5.0));   // 1 + 4
    CHECK(g.grad(b)[1] == doctest::Approx(7.0));   // 2 + 5
    CHECK(g.grad(b)[2] == doctest::Approx(9.0));   // 3 + 6
  }

  TEST_CASE("unary ops pass finite differences") {
    Rng rng(200);
    for (int inst = 0; inst < 3; ++inst) {
      auto xs = rand_signed<double>(rng, {3, 4}, 0.2, 2.0);
      auto xp = rand_positive<double>(rng, {3, 4});
      CHECK(finite_diff_check<double>(
                [](Graph<double>& g, Var x) { return g.sum(g.relu(x)); }, xs, kEps) < kTol);
      CHECK(finite_diff_check<double>(
                [](Graph<double>& g, Var x) { return g.sum(g.exp(x)); }, xs, kEps) < kTol);
      CHECK(finite_diff_check<double>(
                [](Graph<double>& g, Var x) { return g.sum(g.log(x)); }, xp, kEps) < kTol);
      CHECK(finite_diff_check<double>(
                [](Graph<double>& g, Var x) { return g.sum(g.sqrt(x)); }, xp, kEps) < kTol);
      CHECK(finite_diff_check<double>(
                [](Graph<double>& g, Var x) { return g.sum(g.affine(x, 2.5, -1.0)); }, xs,
                kEps) < kTol);
    }
  }

  TEST_CASE("relu zeroes negatives and keeps positives") {
    Graph<double> g;
    Var x = g.input(Tensor<double>({4}, {-2.0, -0.5, 0.0, 3.0}), false);
    const auto& y = g.value(g.relu(x));
    CHECK(y[0] == 0.0);
    CHECK(y[1] == 0.0);
    CHECK(y[2] == 0.0);
    CHECK(y[3] == 3.0);
  }
}

TEST_SUITE("graph_structure") {
  TEST_CASE("reshape and concat pass finite differences") {
    Rng rng(300);
    auto x = randn<double>(rng, {2, 6});
    auto other = randn<double>(rng, {2, 3});
    CHECK(finite_diff_check<double>(
              [](Graph<double>& g, Var v) {
                return g.sum(g.mul(g.reshape(v, {3, 4}), g.reshape(v, {3, 4})));
              },
              x, kEps) < kTol);
    for (size_t axis : {size_t(0), size_t(1)}) {
      auto b = randn<double>(rng, axis == 0 ? std::vector<size_t>{4, 3}
                                            : std::vector<size_t>{2, 5});
      auto a = randn<double>(rng, {2, 3});
      CHECK(finite_diff_check<double>(
                [&](Graph<double>& g, Var v) {
                  Var c = g.concat(v, g.constant(b), axis);
                  return g.sum(g.mul(c, c));
                },
                a, kEps) < kTol);
      CHECK(finite_diff_check<double>(
                [&](Graph<double>& g, Var v) {
                  Var c = g.concat(g.constant(a), v, axis);
                  return g.sum(g.mul(c, c));
                },
                b, kEps) < kTol);
    }
  }

  TEST_CASE("concat forward layout") {
    Graph<double> g;
    Var a = g.input(Tensor<double>({2, 2}, {1, 2, 3, 4}), false);
    Var b = g.input(Tensor<double>({2, 1}, {9, 8}), false);
    const auto& c = g.value(g.concat(a, b, 1));
    CHECK(c.shape() == std::vector<size_t>{2, 3});
    CHECK(c[2] == 9.0);
    CHECK(c[5] == 8.0);
    CHECK_THROWS_AS(g.concat(a, g.input(Tensor<double>({3, 1}), false), 1), DimensionError);
  }

  TEST_CASE("take_rows gathers and scatter-adds, repeated rows accumulate") {
    Graph<double> g;
    Var x = g.input(Tensor<double>({3, 2}, {1, 2, 3, 4, 5, 6}), true);
    Var t = g.take_rows(x, {2, 0, 2});
    const auto& tv = g.value(t);
    CHECK(tv.shape() == std::vector<size_t>{3, 2});
    CHECK(tv[0] == 5.0);
    CHECK(tv[4] == 5.0);
    g.backward(g.sum(t));
    CHECK(g.grad(x)[0] == 1.0);  // row 0 taken once
    CHECK(g.grad(x)[2] == 0.0);  // row 1 never taken
    CHECK(g.grad(x)[4] == 2.0);  // row 2 taken twice

    Rng rng(42);
    auto xr = randn<double>(rng, {4, 3});
    CHECK(finite_diff_check<double>(
              [](Graph<double>& g2, Var v) {
                Var tr = g2.take_rows(v, {1, 1, 3, 0});
                return g2.sum(g2.mul(tr, tr));
              },
              xr, kEps) < kTol);
  }

  TEST_CASE("take_rows rejects out-of-range rows") {
    Graph<double> g;
    Var x = g.input(Tensor<double>({3, 2}), false);
    CHECK_THROWS_AS(g.take_rows(x, {3}), DimensionError);
  }
}

TEST_SUITE("graph_reductions") {
  TEST_CASE("sum/mean/axis reductions pass finite differences") {
    Rng rng(400);
    for (int inst = 0; inst < 3; ++inst) {
      auto x = randn<double>(rng, {2, 3, 4});
      CHECK(finite_diff_check<double>(
                [](Graph<double>& g, Var v) { return g.sum(g.mul(v, v)); }, x, kEps) < kTol);
      CHECK(finite_diff_check<double>(
                [](Graph<double>& g, Var v) { return g.mean(g.mul(v, v)); }, x, kEps) < kTol);
      for (size_t axis = 0; axis < 3; ++axis) {
        CHECK(finite_diff_check<double>(
                  [axis](Graph<double>& g, Var v) {
                    Var s = g.sum_axis(v, axis);
                    return g.sum(g.mul(s, s));
                  },
                  x, kEps) < kTol);
        CHECK(finite_diff_check<double>(
                  [axis](Graph<double>& g, Var v) {
                    Var s = g.mean_axis(v, axis);
                    return g.sum(g.mul(s, s));
                  },
                  x, kEps) < kTol);
        CHECK(finite_diff_check<double>(
                  [axis](Graph<double>& g, Var v) {
                    Var s = g.max_axis(v, axis);
                    return g.sum(g.mul(s, s));
                  },
                  x, kEps) < kTol);
      }
    }
  }

  TEST_CASE("sum_axis values match brute force") {
    Graph<double> g;
    Var x = g.input(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}), false);
    const auto& s0 = g.value(g.sum_axis(x, 0));
    CHECK(s0.shape() == std::vector<size_t>{3});
    CHECK(s0[0] == 5.0);
    CHECK(s0[2] == 9.0);
    const auto& m1 = g.value(g.mean_axis(x, 1));
    CHECK(m1.shape() == std::vector<size_t>{2});
    CHECK(m1[0] == doctest::Approx(2.0));
    CHECK(m1[1] == doctest::Approx(5.0));
  }

  TEST_CASE("max_axis ties route gradient to the first row-major element") {
    Graph<double> g;
    Var x = g.input(Tensor<double>({1, 4}, {2.0, 7.0, 7.0, 1.0}), true);
    Var m = g.max_axis(x, 1);
    CHECK(g.value(m)[0] == 7.0);
    g.backward(g.sum(m));
    CHECK(g.grad(x)[1] == 1.0);
    CHECK(g.grad(x)[2] == 0.0);
  }
}

TEST_SUITE("graph_matmul") {
  TEST_CASE("matmul matches brute force") {
    Rng rng(500);
    auto a = randn<double>(rng, {3, 4});
    auto b = randn<double>(rng, {4, 5});
    Graph<double> g;
    const auto& c = g.value(g.matmul(g.input(a, false), g.input(b, false)));
    for (size_t i = 0; i < 3; ++i) {
      for (size_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (size_t k = 0; k < 4; ++k) acc += a[i * 4 + k] * b[k * 5 + j];
        CHECK(c[i * 5 + j] == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("matmul passes finite differences on both operands") {
    Rng rng(501);
    for (int inst = 0; inst < 3; ++inst) {
      auto a = randn<double>(rng, {3, 4});
      auto b = randn<double>(rng, {4, 2});
      CHECK(finite_diff_check<double>(
                [&](Graph<double>& g, Var v) {
                  Var c = g.matmul(v, g.constant(b));
                  return g.sum(g.mul(c, c));
                },
                a, kEps) < kTol);
      CHECK(finite_diff_check<double>(
                [&](Graph<double>& g, Var v) {
                  Var c = g.matmul(g.constant(a), v);
                  return g.sum(g.mul(c, c));
                },
                b, kEps) < kTol);
    }
  }

  TEST_CASE("matmul rejects incompatible shapes") {
    Graph<double> g;
    Var a = g.input(Tensor<double>({2, 3}), false);
    Var b = g.input(Tensor<double>({4, 2}), false);
    CHECK_THROWS_AS(g.matmul(a, b), DimensionError);
  }
}

TEST_SUITE("graph_softmax") {
  TEST_CASE("softmax rows sum to one and shift invariance holds") {
    Rng rng(600);
    auto x = randn<double>(rng, {4, 6}, 3.0);
    Graph<double> g;
    const auto& y = g.value(g.softmax_rows(g.input(x, false)));
    for (size_t b = 0; b < 4; ++b) {
      double s = 0;
      for (size_t c = 0; c < 6; ++c) s += y[b * 6 + c];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    auto shifted = x;
    for (size_t b = 0; b < 4; ++b)
      for (size_t c = 0; c < 6; ++c) shifted[b * 6 + c] += 100.0;
    Graph<double> g2;
    const auto& y2 = g2.value(g2.softmax_rows(g2.input(shifted, false)));
    for (size_t i = 0; i < y.numel(); ++i) CHECK(y2[i] == doctest::Approx(y[i]).epsilon(1e-9));
  }

  TEST_CASE("softmax passes finite differences") {
    Rng rng(601);
    for (int inst = 0; inst < 3; ++inst) {
      auto x = randn<double>(rng, {3, 5});
      CHECK(finite_diff_check<double>(
                [](Graph<double>& g, Var v) {
                  Var y = g.softmax_rows(v);
                  return g.sum(g.mul(y, y));
                },
                x, kEps) < kTol);
    }
  }

  TEST_CASE("cross entropy of uniform logits equals ln C") {
    Graph<double> g;
    Var x = g.input(Tensor<double>({3, 7}), false);  // all zeros -> uniform
    Var l = g.softmax_cross_entropy(x, {0, 3, 6});
    CHECK(g.value(l)[0] == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  }

  TEST_CASE("cross entropy matches the composite softmax->log->nll graph") {
    Rng rng(602);
    const size_t B = 4, C = 5;
    auto x = randn<double>(rng, {B, C}, 2.0);
    auto targets = rand_labels(rng, B, int(C));
    Tensor<double> onehot({B, C});
    for (size_t b = 0; b < B; ++b) onehot[b * C + size_t(targets[b])] = 1.0;

    Graph<double> gf;
    Var xf = gf.input(x, true);
    Var lf = gf.softmax_cross_entropy(xf, targets);
    gf.backward(lf);

    Graph<double> gc;
    Var xc = gc.input(x, true);
    Var probs = gc.softmax_rows(xc);
    Var picked = gc.mul(gc.log(probs), gc.constant(onehot));
    Var lc = gc.scale(gc.sum(picked), -1.0 / double(B));
    gc.backward(lc);

    CHECK(gf.value(lf)[0] == doctest::Approx(gc.value(lc)[0]).epsilon(1e-12));
    for (size_t i = 0; i < B * C; ++i)
      CHECK(gf.grad(xf)[i] == doctest::Approx(gc.grad(xc)[i]).epsilon(1e-9));
  }

  TEST_CASE("cross entropy passes finite differences") {
    Rng rng(603);
    for (int inst = 0; inst < 3; ++inst) {
      auto x = randn<double>(rng, {4, 6}, 2.0);
      auto targets = rand_labels(rng, 4, 6);
      CHECK(finite_diff_check<double>(
                [&](Graph<double>& g, Var v) { return g.softmax_cross_entropy(v, targets); },
                x, kEps) < kTol);
    }
  }

  TEST_CASE("cross entropy validates targets") {
    Graph<double> g;
    Var x = g.input(Tensor<double>({2, 3}), false);
    CHECK_THROWS_AS(g.softmax_cross_entropy(x, {0, 3}), LabelError);
    CHECK_THROWS_AS(g.softmax_cross_entropy(x, {0}), DimensionError);
  }
}

TEST_SUITE("graph_conv") {
  TEST_CASE("conv2d matches direct convolution") {
    Rng rng(700);
    const size_t B = 2, C = 2, H = 5, W = 6, O = 3;
    for (size_t stride : {size_t(1), size_t(2)}) {
      for (size_t pad : {size_t(0), size_t(1)}) {
        if ((H + 2 * pad - 3) % stride != 0 || (W + 2 * pad - 3) % stride != 0) continue;
        auto x = randn<double>(rng, {B, C, H, W});
        auto w = randn<double>(rng, {O, C, 3, 3});
        auto bias = randn<double>(rng, {O});
        Graph<double> g;
        const auto& out =
            g.value(g.conv2d(g.input(x, false), g.input(w, false), g.input(bias, false),
                             stride, pad));
        const size_t Ho = (H + 2 * pad - 3) / stride + 1;
        const size_t Wo = (W + 2 * pad - 3) / stride + 1;
        REQUIRE(out.shape() == std::vector<size_t>{B, O, Ho, Wo});
        for (size_t b = 0; b < B; ++b)
          for (size_t o = 0; o < O; ++o)
            for (size_t oy = 0; oy < Ho; ++oy)
              for (size_t ox = 0; ox < Wo; ++ox) {
                double acc = bias[o];
                for (size_t c = 0; c < C; ++c)
                  for (size_t ky = 0; ky < 3; ++ky)
                    for (size_t kx = 0; kx < 3; ++kx) {
                      const long iy = long(oy * stride + ky) - long(pad);
                      const long ix = long(ox * stride + kx) - long(pad);
                      if (iy < 0 || iy >= long(H) || ix < 0 || ix >= long(W)) continue;
                      acc += x.at({b, c, size_t(iy), size_t(ix)}) * w.at({o, c, ky, kx});
                    }
                CHECK(out.at({b, o, oy, ox}) == doctest::Approx(acc).epsilon(1e-10));
              }
      }
    }
  }

  TEST_CASE("conv2d passes finite differences on input, weight, bias") {
    Rng rng(701);
    const size_t B = 2, C = 2, H = 4, W = 4, O = 3;
    auto x = randn<double>(rng, {B, C, H, W});
    auto w = randn<double>(rng, {O, C, 3, 3}, 0.5);
    auto bias = randn<double>(rng, {O});
    auto loss = [](Graph<double>& g, Var y) { return g.sum(g.mul(y, y)); };
    CHECK(finite_diff_check<double>(
              [&](Graph<double>& g, Var v) {
                return loss(g, g.conv2d(v, g.constant(w), g.constant(bias), 1, 1));
              },
              x, kEps) < kTol);
    CHECK(finite_diff_check<double>(
              [&](Graph<double>& g, Var v) {
                return loss(g, g.conv2d(g.constant(x), v, g.constant(bias), 1, 1));
              },
              w, kEps) < kTol);
    CHECK(finite_diff_check<double>(
              [&](Graph<double>& g, Var v) {
                return loss(g, g.conv2d(g.constant(x), g.constant(w), v, 1, 1));
              },
              bias, kEps) < kTol);
    // stride 2, pad 0 on a 5x5 input: (5-3)/2+1 = 2
    auto x5 = randn<double>(rng, {1, 2, 5, 5});
    CHECK(finite_diff_check<double>(
              [&](Graph<double>& g, Var v) {
                return loss(g, g.conv2d(v, g.constant(w), g.constant(bias), 2, 0));
              },
              x5, kEps) < kTol);
  }

  TEST_CASE("conv2d rejects non-integral output sizes and bad shapes") {
    Graph<double> g;
    Var x = g.input(Tensor<double>({1, 2, 4, 4}), false);
    Var w = g.input(Tensor<double>({3, 2, 3, 3}), false);
    Var b = g.input(Tensor<double>({3}), false);
    CHECK_THROWS_AS(g.conv2d(x, w, b, 2, 0), DimensionError);  // (4-3)%2 != 0
    Var wbad = g.input(Tensor<double>({3, 5, 3, 3}), false);
    CHECK_THROWS_AS(g.conv2d(x, wbad, b, 1, 1), DimensionError);
    CHECK_THROWS_AS(g.conv2d(x, w, b, 3, 1), DimensionError);
  }
}

TEST_SUITE("graph_batchnorm") {
  TEST_CASE("training mode normalizes to zero mean unit variance") {
    Rng rng(800);
    const size_t B = 4, C = 3, H = 5, W = 5;
    auto x = randn<double>(rng, {B, C, H, W}, 2.5);
    Tensor<double> rm({C}), rv = Tensor<double>::full({C}, 1.0);
    Graph<double> g;
    Var scale = g.input(Tensor<double>::full({C}, 1.0), false);
    Var shift = g.input(Tensor<double>({C}), false);
    const auto& y =
        g.value(g.batch_norm2d(g.input(x, false), scale, shift, rm, rv, true, 0.1, 1e-5));
    const size_t n = B * H * W;
    for (size_t c = 0; c < C; ++c) {
      double mean = 0, var = 0;
      for (size_t b = 0; b < B; ++b)
        for (size_t p = 0; p < H * W; ++p) mean += y[(b * C + c) * H * W + p];
      mean /= double(n);
      for (size_t b = 0; b < B; ++b)
        for (size_t p = 0; p < H * W; ++p) {
          const double d = y[(b * C + c) * H * W + p] - mean;
          var += d * d;
        }
      var /= double(n);
      CHECK(std::abs(mean) < 1e-10);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // eps shrinks it slightly
    }
  }

  TEST_CASE("running stats follow the update rule") {
    const size_t B = 2, C = 1, H = 2, W = 2;
    Tensor<double> x({B, C, H, W}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor<double> rm = Tensor<double>::full({C}, 10.0);
    Tensor<double> rv = Tensor<double>::full({C}, 4.0);
    Graph<double> g;
    Var scale = g.input(Tensor<double>::full({C}, 1.0), false);
    Var shift = g.input(Tensor<double>({C}), false);
    g.batch_norm2d(g.input(x, false), scale, shift, rm, rv, true, 0.1, 1e-5);
    // batch mean 4.5, biased batch var = mean((x-4.5)^2) = 5.25
    CHECK(rm[0] == doctest::Approx(0.9 * 10.0 + 0.1 * 4.5).epsilon(1e-12));
    CHECK(rv[0] == doctest::Approx(0.9 * 4.0 + 0.1 * 5.25).epsilon(1e-12));
  }

  TEST_CASE("eval mode uses running stats and leaves them untouched") {
    const size_t C = 2;
    Tensor<double> x({1, C, 1, 2}, {2.0, 4.0, -1.0, 1.0});
    Tensor<double> rm({C}, {1.0, -2.0});
    Tensor<double> rv({C}, {4.0, 1.0});
    Graph<double> g;
    Var scale = g.input(Tensor<double>({C}, {2.0, 0.5}), false);
    Var shift = g.input(Tensor<double>({C}, {1.0, 0.0}), false);
    const auto& y = g.value(
        g.batch_norm2d(g.input(x, false), scale, shift, rm, rv, false, 0.1, 1e-5));
    CHECK(y[0] == doctest::Approx(2.0 * (2.0 - 1.0) / std::sqrt(4.0 + 1e-5) + 1.0));
    CHECK(y[2] == doctest::Approx(0.5 * (-1.0 + 2.0) / std::sqrt(1.0 + 1e-5)));
    CHECK(rm[0] == 1.0);
    CHECK(rv[1] == 1.0);
  }

  TEST_CASE("degenerate training batch throws") {
    Tensor<double> rm({1}), rv({1});
    Graph<double> g;
    Var x = g.input(Tensor<double>({1, 1, 1, 1}), false);
    Var scale = g.input(Tensor<double>::full({1}, 1.0), false);
    Var shift = g.input(Tensor<double>({1}), false);
    CHECK_THROWS_AS(g.batch_norm2d(x, scale, shift, rm, rv, true, 0.1, 1e-5), DimensionError);
  }

  TEST_CASE("batchnorm passes finite differences in both modes") {
    Rng rng(801);
    const size_t B = 3, C = 2, H = 2, W = 2;
    for (bool train : {true, false}) {
      auto x = randn<double>(rng, {B, C, H, W});
      auto sc = rand_positive<double>(rng, {C});
      auto sh = randn<double>(rng, {C});
      Tensor<double> rm0 = randn<double>(rng, {C});
      Tensor<double> rv0 = rand_positive<double>(rng, {C});
      auto loss = [](Graph<double>& g, Var y) { return g.sum(g.mul(y, y)); };
      // d/dx. Fresh running-stat copies per evaluation: train mode mutates them.
      CHECK(finite_diff_check<double>(
                [&](Graph<double>& g, Var v) {
                  Tensor<double> rm = rm0, rv = rv0;
                  return loss(g, g.batch_norm2d(v, g.constant(sc), g.constant(sh), rm, rv,
                                                train, 0.1, 1e-5));
                },
                x, kEps) < kTol);
      CHECK(finite_diff_check<double>(
                [&](Graph<double>& g, Var v) {
                  Tensor<double> rm = rm0, rv = rv0;
                  return loss(g, g.batch_norm2d(g.constant(x), v, g.constant(sh), rm, rv,
                                                train, 0.1, 1e-5));
                },
                sc, kEps) < kTol);
      CHECK(finite_diff_check<double>(
                [&](Graph<double>& g, Var v) {
                  Tensor<double> rm = rm0, rv = rv0;
                  return loss(g, g.batch_norm2d(g.constant(x), g.constant(sc), v, rm, rv,
                                                train, 0.1, 1e-5));
                },
                sh, kEps) < kTol);
    }
  }
}

TEST_SUITE("graph_pooling") {
  TEST_CASE("maxpool2x2 values and tie-breaking") {
    Graph<double> g;
    Tensor<double> x({1, 1, 2, 4}, {5.0, 5.0, 1.0, 2.0,  //
                                    3.0, 4.0, 2.0, 2.0});
    Var xv = g.input(x, true);
    Var y = g.maxpool2x2(xv);
    const auto& yv = g.value(y);
    REQUIRE(yv.shape() == std::vector<size_t>{1, 1, 1, 2});
    CHECK(yv[0] == 5.0);
    CHECK(yv[1] == 2.0);
    g.backward(g.sum(y));
    CHECK(g.grad(xv)[0] == 1.0);  // first 5 in row-major window order wins
    CHECK(g.grad(xv)[1] == 0.0);
    // window [1,2;2,2]: the tied max 2 first appears at (0,3) in row-major order
    CHECK(g.grad(xv)[2] == 0.0);
    CHECK(g.grad(xv)[3] == 1.0);
    CHECK(g.grad(xv)[6] == 0.0);
    CHECK(g.grad(xv)[7] == 0.0);
  }

  TEST_CASE("maxpool2x2 rejects odd spatial dims") {
    Graph<double> g;
    Var x = g.input(Tensor<double>({1, 1, 3, 4}), false);
    CHECK_THROWS_AS(g.maxpool2x2(x), DimensionError);
  }

  TEST_CASE("maxpool and global_avg_pool pass finite differences") {
    Rng rng(900);
    auto x = randn<double>(rng, {2, 3, 4, 4});
    CHECK(finite_diff_check<double>(
              [](Graph<double>& g, Var v) {
                Var y = g.maxpool2x2(v);
                return g.sum(g.mul(y, y));
              },
              x, kEps) < kTol);
    CHECK(finite_diff_check<double>(
              [](Graph<double>& g, Var v) {
                Var y = g.global_avg_pool(v);
                return g.sum(g.mul(y, y));
              },
              x, kEps) < kTol);
  }

  TEST_CASE("global_avg_pool computes spatial means into [B,C]") {
    Graph<double> g;
    Tensor<double> x({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
    const auto& y = g.value(g.global_avg_pool(g.input(x, false)));
    REQUIRE(y.shape() == std::vector<size_t>{1, 2});
    CHECK(y[0] == doctest::Approx(2.5));
    CHECK(y[1] == doctest::Approx(25.0));
  }
}

TEST_SUITE("graph_similarity") {
  TEST_CASE("pairwise_cosine matches brute force") {
    Rng rng(1000);
    const size_t B = 3, d = 5, N = 4;
    const double eps = 1e-8;
    auto f = randn<double>(rng, {B, d});
    auto w = randn<double>(rng, {N, d});
    Graph<double> g;
    const auto& c = g.value(g.pairwise_cosine(g.input(f, false), g.input(w, false), eps));
    for (size_t b = 0; b < B; ++b) {
      for (size_t j = 0; j < N; ++j) {
        double dot = 0, fn = 0, wn = 0;
        for (size_t k = 0; k < d; ++k) {
          dot += f[b * d + k] * w[j * d + k];
          fn += f[b * d + k] * f[b * d + k];
          wn += w[j * d + k] * w[j * d + k];
        }
        const double expect = dot / (std::sqrt(fn) * std::sqrt(wn) + eps);
        CHECK(c[b * N + j] == doctest::Approx(expect).epsilon(1e-12));
        CHECK(std::abs(c[b * N + j]) <= 1.0 + 1e-12);
      }
    }
  }

  TEST_CASE("pairwise_cosine is eps-guarded at zero vectors") {
    Graph<double> g;
    Tensor<double> f({1, 3});  // zero row
    Tensor<double> w({2, 3}, {1, 0, 0, 0, 2, 0});
    const auto& c = g.value(g.pairwise_cosine(g.input(f, false), g.input(w, false), 1e-8));
    CHECK(c[0] == 0.0);
    CHECK(c[1] == 0.0);
  }

  TEST_CASE("pairwise_cosine passes finite differences on both operands") {
    Rng rng(1001);
    for (int inst = 0; inst < 3; ++inst) {
      auto f = rand_signed<double>(rng, {3, 4}, 0.3, 1.5);
      auto w = rand_signed<double>(rng, {5, 4}, 0.3, 1.5);
      CHECK(finite_diff_check<double>(
                [&](Graph<double>& g, Var v) {
                  Var c = g.pairwise_cosine(v, g.constant(w), 1e-8);
                  return g.sum(g.mul(c, c));
                },
                f, kEps) < kTol);
      CHECK(finite_diff_check<double>(
                [&](Graph<double>& g, Var v) {
                  Var c = g.pairwise_cosine(g.constant(f), v, 1e-8);
                  return g.sum(g.mul(c, c));
                },
                w, kEps) < kTol);
    }
  }

  TEST_CASE("pairwise_sqdist matches brute force") {
    Rng rng(1002);
    const size_t B = 4, d = 6, N = 3;
    auto f = randn<double>(rng, {B, d});
    auto p = randn<double>(rng, {N, d});
    Graph<double> g;
    const auto& D = g.value(g.pairwise_sqdist(g.input(f, false), g.input(p, false)));
    for (size_t b = 0; b < B; ++b)
      for (size_t j = 0; j < N; ++j) {
        double acc = 0;
        for (size_t k = 0; k < d; ++k) {
          const double diff = f[b * d + k] - p[j * d + k];
          acc += diff * diff;
        }
        CHECK(D[b * N + j] == doctest::Approx(acc).epsilon(1e-10));
      }
  }

  TEST_CASE("pairwise_sqdist passes finite differences on both operands") {
    Rng rng(1003);
    for (int inst = 0; inst < 3; ++inst) {
      auto f = randn<double>(rng, {3, 4});
      auto p = randn<double>(rng, {2, 4});
      CHECK(finite_diff_check<double>(
                [&](Graph<double>& g, Var v) {
                  Var dm = g.pairwise_sqdist(v, g.constant(p));
                  return g.sum(g.mul(dm, dm));
                },
                f, kEps) < kTol);
      CHECK(finite_diff_check<double>(
                [&](Graph<double>& g, Var v) {
                  Var dm = g.pairwise_sqdist(g.constant(f), v);
                  return g.sum(g.mul(dm, dm));
                },
                p, kEps) < kTol);
    }
  }

  TEST_CASE("class_means matches per-coordinate arithmetic mean and backpropagates") {
    Rng rng(1100);
    const size_t S = 10, d = 4, N = 3;
    auto f = randn<double>(rng, {S, d});
    std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 0, 1, 2};
    Graph<double> g;
    Var fv = g.input(f, true);
    Var m = g.class_means(fv, labels, N);
    const auto& mv = g.value(m);
    REQUIRE(mv.shape() == std::vector<size_t>{N, d});
    for (size_t c = 0; c < N; ++c) {
      for (size_t k = 0; k < d; ++k) {
        double acc = 0;
        int cnt = 0;
        for (size_t s = 0; s < S; ++s)
          if (labels[s] == int(c)) {
            acc += f[s * d + k];
            ++cnt;
          }
        CHECK(mv[c * d + k] == doctest::Approx(acc / cnt).epsilon(1e-12));
      }
    }
    g.backward(g.sum(m));
    // each sample's gradient is 1/count(class)
    CHECK(g.grad(fv)[0] == doctest::Approx(1.0 / 4.0));   // label 0, count 4
    CHECK(g.grad(fv)[1 * d] == doctest::Approx(1.0 / 3.0));  // label 1, count 3

    CHECK(finite_diff_check<double>(
              [&](Graph<double>& g2, Var v) {
                Var mm = g2.class_means(v, labels, N);
                return g2.sum(g2.mul(mm, mm));
              },
              f, kEps) < kTol);
  }

  TEST_CASE("class_means rejects empty classes and bad labels") {
    Graph<double> g;
    Var f = g.input(Tensor<double>({2, 2}), false);
    CHECK_THROWS_AS(g.class_means(f, {0, 0}, 2), ContractError);
    CHECK_THROWS_AS(g.class_means(f, {0, 5}, 2), LabelError);
  }
}
