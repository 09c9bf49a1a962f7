#include "faststamp/adam.hpp"
#include "faststamp/ops.hpp"
#include "faststamp/rng.hpp"
#include "faststamp/tape.hpp"
#include "faststamp/tensor.hpp"

#include <doctest.h>

#include "testutil.hpp"

#include <cmath>
#include <cstring>

using namespace faststamp;
using testutil::gradient_check;
using testutil::random_tensor;

namespace {

/// Brute-force full convolution oracle: out[o,.,.] = sum_i corr(x[i], K[o][i]).
/// Used to cross-check depthwise+pointwise composition.
Tensor<double> full_conv_oracle(const Tensor<double>& x,
                                const std::vector<std::vector<Tensor<double>>>& K,
                                const Tensor<double>& bias, int stride, int pad) {
  const int cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int cout = static_cast<int>(K.size());
  const int k = K[0][0].dim(1);
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  Tensor<double> out({cout, Ho, Wo});
  auto& o = out.array_mut();
  for (int oc = 0; oc < cout; ++oc)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        double acc = bias(oc);
        for (int ic = 0; ic < cin; ++ic)
          for (int u = 0; u < k; ++u)
            for (int v = 0; v < k; ++v) {
              int iy = oy * stride - pad + u, ix = ox * stride - pad + v;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += K[oc][ic](0, u, v) * x(ic, iy, ix);
            }
        o[(static_cast<std::int64_t>(oc) * Ho + oy) * Wo + ox] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("tensor shape and storage invariants") {
  Tensor<double> t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK_THROWS_AS(Tensor<double>({2, 0, 4}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, ArrayX<double>::Zero(5)), std::invalid_argument);

  // copies share storage until mutation
  Tensor<double> a = Tensor<double>::full({4}, 1.0);
  Tensor<double> b = a;
  b.array_mut()[0] = 7.0;
  CHECK(a(0) == 1.0);
  CHECK(b(0) == 7.0);
}

TEST_CASE("conv2d_depthwise forward examples") {
  // all-ones 3x3 image and kernel, same padding: center 9, corners 4
  auto x = Tensor<double>::full({1, 3, 3}, 1.0);
  auto k = Tensor<double>::full({1, 3, 3}, 1.0);
  auto y = conv2d_depthwise(x, k, 1, 1);
  CHECK(y(0, 1, 1) == doctest::Approx(9.0));
  CHECK(y(0, 0, 0) == doctest::Approx(4.0));
  CHECK(y(0, 0, 2) == doctest::Approx(4.0));
  CHECK(y(0, 2, 0) == doctest::Approx(4.0));
  CHECK(y(0, 2, 2) == doctest::Approx(4.0));

  // delta kernel is the identity
  Rng rng(7);
  auto xi = random_tensor(rng, {2, 5, 6});
  auto kd = Tensor<double>::zeros({2, 3, 3});
  kd.array_mut()[4] = 1.0;
  kd.array_mut()[13] = 1.0;
  auto yi = conv2d_depthwise(xi, kd, 1, 1);
  CHECK((yi.array() - xi.array()).abs().maxCoeff() == doctest::Approx(0.0));

  // stride-2 shape arithmetic
  auto y2 = conv2d_depthwise(Tensor<double>::zeros({1, 4, 4}), kd = Tensor<double>::zeros({1, 3, 3}), 2, 1);
  CHECK(y2.shape() == Shape{1, 2, 2});
  auto y3 = conv2d_depthwise(Tensor<double>::zeros({1, 5, 5}), Tensor<double>::zeros({1, 3, 3}), 2, 1);
  CHECK(y3.shape() == Shape{1, 3, 3});

  // channel mismatch rejected
  CHECK_THROWS_AS(conv2d_depthwise(Tensor<double>::zeros({2, 4, 4}),
                                   Tensor<double>::zeros({3, 3, 3}), 1, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(conv2d_depthwise(Tensor<double>::zeros({1, 4, 4}),
                                   Tensor<double>::zeros({1, 3, 3}), 1, 0),
                  std::invalid_argument);
}

TEST_CASE("conv2d_pointwise forward examples") {
  // identity weights, zero bias
  Rng rng(8);
  auto x = random_tensor(rng, {3, 4, 4});
  auto wI = Tensor<double>::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = conv2d_pointwise(x, wI, Tensor<double>::zeros({3}));
  CHECK((y.array() - x.array()).abs().maxCoeff() == doctest::Approx(0.0));

  // two constant channels, row [3,4], bias 1 -> 3*1+4*2+1 = 12
  Tensor<double> x2({2, 2, 2});
  x2.array_mut().head(4).setConstant(1.0);
  x2.array_mut().tail(4).setConstant(2.0);
  auto w = Tensor<double>::from_values({1, 2}, {3, 4});
  auto y2 = conv2d_pointwise(x2, w, Tensor<double>::full({1}, 1.0));
  CHECK(y2.array().minCoeff() == doctest::Approx(12.0));
  CHECK(y2.array().maxCoeff() == doctest::Approx(12.0));

  // 1x1 case
  auto y3 = conv2d_pointwise(Tensor<double>::full({1, 1, 1}, 0.5),
                             Tensor<double>::from_values({1, 1}, {2.0}),
                             Tensor<double>::zeros({1}));
  CHECK(y3(0, 0, 0) == doctest::Approx(1.0));

  CHECK_THROWS_AS(conv2d_pointwise(x2, Tensor<double>::zeros({1, 3}), Tensor<double>::zeros({1})),
                  std::invalid_argument);
}

TEST_CASE("linear forward examples") {
  auto x = Tensor<double>::from_values({2}, {1, 1});
  auto w = Tensor<double>::from_values({2, 2}, {1, 2, 3, 4});
  auto y = linear(x, w, Tensor<double>::zeros({2}));
  CHECK(y(0) == doctest::Approx(3.0));
  CHECK(y(1) == doctest::Approx(7.0));

  auto wi = Tensor<double>::from_values({2, 2}, {1, 0, 0, 1});
  auto yi = linear(x, wi, Tensor<double>::zeros({2}));
  CHECK(yi(0) == doctest::Approx(1.0));

  // message-upsampler sizing: 256x128 weight matrix has 32768 entries
  Tensor<double> wbig({256, 128});
  CHECK(wbig.size() == 32768);

  CHECK_THROWS_AS(linear(x, Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({2})),
                  std::invalid_argument);
}

TEST_CASE("batchnorm forward examples") {
  // infer with mean 0 / var 1 and identity affine is a no-op up to eps
  Rng rng(9);
  auto x = random_tensor(rng, {2, 3, 3});
  auto ones = Tensor<double>::full({2}, 1.0);
  auto zeros = Tensor<double>::zeros({2});
  auto y = batchnorm<double>(x, ones, zeros, zeros, ones, 1e-5, BnMode::Infer);
  CHECK((y.array() - x.array()).abs().maxCoeff() < 1e-4);

  // constant channel in train mode collapses to the shift
  auto xc = Tensor<double>::full({1, 4, 4}, 3.7);
  auto y2 = batchnorm<double>(xc, Tensor<double>::full({1}, 2.0), Tensor<double>::full({1}, 0.25),
                              Tensor<double>::zeros({1}), Tensor<double>::full({1}, 1.0), 1e-5,
                              BnMode::Train);
  CHECK(y2.array().abs().maxCoeff() == doctest::Approx(0.25));

  // scale 2, shift 3, mean 1, var 1, input 2 -> ~5
  auto y3 = batchnorm<double>(Tensor<double>::full({1, 1, 1}, 2.0), Tensor<double>::full({1}, 2.0),
                              Tensor<double>::full({1}, 3.0), Tensor<double>::full({1}, 1.0),
                              Tensor<double>::full({1}, 1.0), 1e-12, BnMode::Infer);
  CHECK(y3(0, 0, 0) == doctest::Approx(5.0).epsilon(1e-5));

  CHECK_THROWS_AS(batchnorm<double>(x, ones, zeros, zeros, Tensor<double>::full({2}, -1.0), 1e-5,
                                    BnMode::Infer),
                  std::invalid_argument);

  // train mode reports batch statistics
  BatchStats<double> st;
  batchnorm<double>(x, ones, zeros, zeros, ones, 1e-5, BnMode::Train, nullptr, &st);
  auto seg = x.array().head(9);
  CHECK(st.mean[0] == doctest::Approx(seg.sum() / 9.0));
  CHECK(st.var[0] == doctest::Approx((seg - seg.sum() / 9.0).square().sum() / 9.0));
}

TEST_CASE("activation examples and ranges") {
  auto x = Tensor<double>::from_values({2}, {-1.5, 2.0});
  auto r = relu(x);
  CHECK(r(0) == 0.0);
  CHECK(r(1) == 2.0);
  CHECK(tanh_act(Tensor<double>::zeros({1}))(0) == 0.0);
  CHECK(tanh_act(Tensor<double>::full({1}, 1.0))(0) == doctest::Approx(0.7615941559557649));

  Rng rng(10);
  auto big = random_tensor(rng, {1, 8, 8}, -50, 50);
  auto t = tanh_act(big);
  CHECK(t.array().maxCoeff() < 1.0);
  CHECK(t.array().minCoeff() > -1.0);
  CHECK(relu(big).array().minCoeff() >= 0.0);
}

TEST_CASE("upsample_nn_2d examples") {
  auto x = Tensor<double>::from_values({1, 2, 2}, {1, 2, 3, 4});
  auto y = upsample_nn_2d(x, 2);
  std::vector<double> expect = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (int i = 0; i < 16; ++i) CHECK(y.array()[i] == expect[static_cast<std::size_t>(i)]);

  auto y1 = upsample_nn_2d(x, 1);
  CHECK((y1.array() - x.array()).abs().maxCoeff() == 0.0);

  auto big = upsample_nn_2d(Tensor<double>::zeros({1, 16, 16}), 8);
  CHECK(big.shape() == Shape{1, 128, 128});

  CHECK_THROWS_AS(upsample_nn_2d(x, 0), std::invalid_argument);
}

TEST_CASE("upsample then avgpool reproduces input exactly") {
  Rng rng(11);
  for (int f : {1, 2, 4, 8}) {
    auto x = random_tensor(rng, {3, 6, 5});
    auto y = avgpool2d(upsample_nn_2d(x, f), f);
    CHECK(std::memcmp(x.array().data(), y.array().data(), sizeof(double) * x.size()) == 0);
  }
}

TEST_CASE("concat_channels examples and round-trip") {
  Rng rng(12);
  auto a = random_tensor(rng, {1, 2, 2});
  auto b = random_tensor(rng, {1, 2, 2});
  auto c = concat_channels(a, b);
  CHECK(c.shape() == Shape{2, 2, 2});
  CHECK(c(0, 1, 1) == a(0, 1, 1));
  CHECK(c(1, 0, 1) == b(0, 0, 1));

  auto big = concat_channels(Tensor<double>::zeros({64, 8, 8}), Tensor<double>::zeros({64, 8, 8}));
  CHECK(big.shape() == Shape{128, 8, 8});

  auto ra = slice_channels(c, 0, 1);
  auto rb = slice_channels(c, 1, 1);
  CHECK((ra.array() - a.array()).abs().maxCoeff() == 0.0);
  CHECK((rb.array() - b.array()).abs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(concat_channels(a, Tensor<double>::zeros({1, 3, 2})), std::invalid_argument);
}

TEST_CASE("backward basic examples") {
  // loss = sum(relu(x)), x = [-1, 2] -> grad [0, 1]
  {
    GradTape<double> tape;
    auto x = Tensor<double>::from_values({2}, {-1, 2});
    x.requires_grad = true;
    tape.watch(x);
    auto loss = sum(relu(x, &tape), &tape);
    auto g = backward(tape, loss);
    CHECK(g.grad(x)[0] == 0.0);
    CHECK(g.grad(x)[1] == 1.0);
  }
  // loss = sum(tanh(x)) at x=0 -> grad 1 per element
  {
    GradTape<double> tape;
    auto x = Tensor<double>::zeros({3});
    x.requires_grad = true;
    tape.watch(x);
    auto loss = sum(tanh_act(x, &tape), &tape);
    auto g = backward(tape, loss);
    for (int i = 0; i < 3; ++i) CHECK(g.grad(x)[i] == doctest::Approx(1.0));
  }
  // non-scalar loss rejected
  {
    GradTape<double> tape;
    auto x = Tensor<double>::zeros({3});
    x.requires_grad = true;
    tape.watch(x);
    auto y = relu(x, &tape);
    CHECK_THROWS_AS(backward(tape, y), std::invalid_argument);
  }
  // unreached watched parameter gets a zero gradient
  {
    GradTape<double> tape;
    auto x = Tensor<double>::from_values({2}, {1, 2});
    auto p = Tensor<double>::full({3}, 5.0);
    x.requires_grad = p.requires_grad = true;
    tape.watch(x);
    tape.watch(p);
    auto loss = sum(x, &tape);
    auto g = backward(tape, loss);
    CHECK(g.grad(p).size() == 3);
    CHECK(g.grad(p).abs().maxCoeff() == 0.0);
  }
}

TEST_CASE("gradient checks: every differentiable op") {
  Rng rng(100);

  SUBCASE("elementwise and reductions") {
    auto a = random_tensor(rng, {2, 3, 4}, -2, 2, 0.02);
    auto b = random_tensor(rng, {2, 3, 4}, -2, 2, 0.02);
    gradient_check({a, b}, [](const auto& in, GradTape<double>* t) {
      auto s = add(in[0], in[1], t);
      auto d = sub(s, mul(in[0], in[1], t), t);
      auto e = scale(abs_val(d, t), 0.7, t);
      return mean(e, t);
    });
  }
  SUBCASE("activations") {
    auto a = random_tensor(rng, {20}, -2, 2, 0.05);
    gradient_check({a}, [](const auto& in, GradTape<double>* t) {
      auto r = relu(in[0], t);
      auto s = sigmoid(tanh_act(in[0], t), t);
      return mean(add(r, s, t), t);
    });
  }
  SUBCASE("min_scalar and clamp") {
    auto a = random_tensor(rng, {16}, 0.1, 0.9);
    gradient_check({a}, [](const auto& in, GradTape<double>* t) {
      return mean(add(min_scalar(in[0], 0.55, t), clamp01_st(in[0], t), t), t);
    });
  }
  SUBCASE("linear") {
    auto x = random_tensor(rng, {6});
    auto w = random_tensor(rng, {4, 6});
    auto b = random_tensor(rng, {4});
    gradient_check({x, w, b}, [](const auto& in, GradTape<double>* t) {
      return mean(linear(in[0], in[1], in[2], t), t);
    });
  }
  SUBCASE("depthwise conv stride 1 and 2") {
    for (int stride : {1, 2}) {
      auto x = random_tensor(rng, {2, 6, 6});
      auto k = random_tensor(rng, {2, 3, 3});
      gradient_check({x, k}, [stride](const auto& in, GradTape<double>* t) {
        return mean(conv2d_depthwise(in[0], in[1], stride, 1, t), t);
      });
    }
  }
  SUBCASE("pointwise conv") {
    auto x = random_tensor(rng, {3, 4, 4});
    auto w = random_tensor(rng, {5, 3});
    auto b = random_tensor(rng, {5});
    gradient_check({x, w, b}, [](const auto& in, GradTape<double>* t) {
      auto y = conv2d_pointwise(in[0], in[1], in[2], t);
      return mean(mul(y, y, t), t);
    });
  }
  SUBCASE("batchnorm train and infer") {
    auto x = random_tensor(rng, {2, 4, 4});
    auto gm = random_tensor(rng, {2}, 0.5, 1.5);
    auto bt = random_tensor(rng, {2}, -0.5, 0.5);
    gradient_check({x, gm, bt}, [](const auto& in, GradTape<double>* t) {
      auto y = batchnorm<double>(in[0], in[1], in[2], Tensor<double>::zeros({2}),
                                 Tensor<double>::full({2}, 1.0), 1e-5, BnMode::Train, t);
      return mean(mul(y, y, t), t);
    });
    auto rm = random_tensor(rng, {2}, -0.3, 0.3);
    auto rv = random_tensor(rng, {2}, 0.5, 1.5);
    gradient_check({x, gm, bt}, [rm, rv](const auto& in, GradTape<double>* t) {
      auto y = batchnorm<double>(in[0], in[1], in[2], rm, rv, 1e-5, BnMode::Infer, t);
      return mean(mul(y, y, t), t);
    });
  }
  SUBCASE("upsample avgpool concat slice reshape") {
    auto a = random_tensor(rng, {2, 4, 4});
    auto b = random_tensor(rng, {1, 8, 8});
    gradient_check({a, b}, [](const auto& in, GradTape<double>* t) {
      auto up = upsample_nn_2d(in[0], 2, t);
      auto cat = concat_channels(up, in[1], t);
      auto sl = slice_channels(cat, 1, 2, t);
      auto pooled = avgpool2d(sl, 2, t);
      auto flat = reshape(pooled, {2 * 4 * 4}, t);
      return mean(flat, t);
    });
  }
  SUBCASE("round_st passes gradient through") {
    auto a = random_tensor(rng, {8}, 0.2, 3.0);
    GradTape<double> tape;
    a.requires_grad = true;
    tape.watch(a);
    auto loss = mean(round_st(scale(a, 2.0, &tape), &tape), &tape);
    auto g = backward(tape, loss);
    for (int i = 0; i < 8; ++i) CHECK(g.grad(a)[i] == doctest::Approx(2.0 / 8));
  }
}

TEST_CASE("separable composition equals brute-force full convolution") {
  Rng rng(200);
  const int cin = 3, cout = 4, k = 3;
  for (int stride : {1, 2}) {
    auto x = random_tensor(rng, {cin, 6, 6});
    auto dk = random_tensor(rng, {cin, k, k});
    auto pw = random_tensor(rng, {cout, cin});
    auto bias = random_tensor(rng, {cout});

    auto composed = conv2d_pointwise(conv2d_depthwise(x, dk, stride, 1), pw, bias);

    // equivalent full kernel: K[o][i] = pw[o,i] * dk[i]
    std::vector<std::vector<Tensor<double>>> K(cout);
    for (int o = 0; o < cout; ++o)
      for (int i = 0; i < cin; ++i) {
        Tensor<double> kk({1, k, k});
        kk.array_mut() = dk.array().segment(static_cast<Eigen::Index>(i) * k * k, k * k) *
                         pw(o * cin + i);
        K[o].push_back(kk);
      }
    auto full = full_conv_oracle(x, K, bias, stride, 1);
    REQUIRE(full.shape() == composed.shape());
    CHECK((full.array() - composed.array()).abs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("backward determinism: identical runs give bit-identical gradients") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = random_tensor(rng, {2, 8, 8});
    auto k = random_tensor(rng, {2, 3, 3});
    auto w = random_tensor(rng, {3, 2});
    auto b = random_tensor(rng, {3});
    GradTape<double> tape;
    for (auto* t : {&x, &k, &w, &b}) {
      t->requires_grad = true;
      tape.watch(*t);
    }
    auto y = conv2d_pointwise(conv2d_depthwise(x, k, 2, 1, &tape), w, b, &tape);
    auto loss = mean(mul(y, y, &tape), &tape);
    auto g = backward(tape, loss);
    ArrayX<double> all(g.grad(x).size() + g.grad(k).size() + g.grad(w).size() + g.grad(b).size());
    all << g.grad(x), g.grad(k), g.grad(w), g.grad(b);
    return all;
  };
  auto g1 = run(42), g2 = run(42);
  CHECK(std::memcmp(g1.data(), g2.data(), sizeof(double) * static_cast<std::size_t>(g1.size())) == 0);
}

TEST_CASE("adam optimizer") {
  AdamConfig<double> cfg;
  cfg.lr = 0.1;

  // zero gradient leaves parameters unchanged
  {
    auto p = Tensor<double>::full({3}, 1.5);
    AdamState<double> st;
    adam_step(p, ArrayX<double>(ArrayX<double>::Zero(3)), st, cfg);
    CHECK(p.array().isApproxToConstant(1.5));
  }
  // one step with g=1 from fresh state moves by ~lr (bias-corrected)
  {
    auto p = Tensor<double>::full({1}, 2.0);
    AdamState<double> st;
    adam_step(p, ArrayX<double>(ArrayX<double>::Ones(1)), st, cfg);
    CHECK(p(0) == doctest::Approx(2.0 - 0.1).epsilon(1e-6));
  }
  // moments stay finite for bounded gradients over many steps
  {
    auto p = Tensor<double>::full({4}, 0.5);
    AdamState<double> st;
    Rng rng(77);
    for (int i = 0; i < 10000; ++i) {
      ArrayX<double> g(4);
      for (int j = 0; j < 4; ++j) g[j] = rng.uniform(-3, 3);
      adam_step(p, g, st, cfg);
    }
    CHECK(st.m.allFinite());
    CHECK(st.v.allFinite());
    CHECK(p.array().allFinite());
  }
  // shape mismatch rejected
  {
    auto p = Tensor<double>::full({3}, 1.0);
    AdamState<double> st;
    CHECK_THROWS_AS(adam_step(p, ArrayX<double>(ArrayX<double>::Zero(2)), st, cfg), std::invalid_argument);
  }
}
