#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "mad/rng.hpp"
#include "mad/tensor.hpp"

using namespace mad;

namespace {

template <typename F>
std::string thrown_kind(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return "<none>";
}

// Reference convolution: plain septuple loop, padded taps contribute an
// explicit zero operand so the floating-point op sequence is fixed.
std::vector<double> conv_ref(const std::vector<double>& x, const std::vector<double>& k, int B,
                             int C, int H, int W, int O, int KH, int KW, int stride, int dil,
                             int pad, int& OH, int& OW) {
  OH = (H + 2 * pad - dil * (KH - 1) - 1) / stride + 1;
  OW = (W + 2 * pad - dil * (KW - 1) - 1) / stride + 1;
  std::vector<double> y(static_cast<size_t>(B) * O * OH * OW, 0.0);
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int ki = 0; ki < KH; ++ki)
              for (int kj = 0; kj < KW; ++kj) {
                const int iy = oy * stride - pad + ki * dil;
                const int ix = ox * stride - pad + kj * dil;
                double xv = 0.0;
                if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                  xv = x[((static_cast<size_t>(b) * C + c) * H + iy) * W + ix];
                acc += xv * k[((static_cast<size_t>(o) * C + c) * KH + ki) * KW + kj];
              }
          y[((static_cast<size_t>(b) * O + o) * OH + oy) * OW + ox] = acc;
        }
  return y;
}

}  // namespace

TEST_CASE("rng streams are deterministic and independent") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

  SECTION("fork depends only on seed and stream index") {
    Rng p1(7), p2(7);
    p1.uniform();
    p1.normal();  // consuming the parent must not shift the fork
    Rng f1 = p1.fork(3), f2 = p2.fork(3);
    for (int i = 0; i < 20; ++i) REQUIRE(f1.next_u64() == f2.next_u64());
    Rng g = p2.fork(4);
    REQUIRE(g.next_u64() != p2.fork(3).next_u64());
  }

  SECTION("uniform lies in [0,1) and has sane mean") {
    Rng r(1);
    double s = 0.0;
    for (int i = 0; i < 20000; ++i) {
      double u = r.uniform();
      REQUIRE(u >= 0.0);
      REQUIRE(u < 1.0);
      s += u;
    }
    REQUIRE(std::abs(s / 20000 - 0.5) < 0.01);
  }

  SECTION("normal has near-standard moments") {
    Rng r(2);
    double s = 0.0, s2 = 0.0;
    const int n = 50000;
    for (int i = 0; i < n; ++i) {
      double v = r.normal();
      s += v;
      s2 += v * v;
    }
    REQUIRE(std::abs(s / n) < 0.02);
    REQUIRE(std::abs(s2 / n - 1.0) < 0.03);
  }

  SECTION("shuffle is a deterministic permutation") {
    std::vector<int> v1{0, 1, 2, 3, 4, 5, 6, 7}, v2 = v1, sorted = v1;
    Rng r1(9), r2(9);
    r1.shuffle(v1.begin(), v1.end());
    r2.shuffle(v2.begin(), v2.end());
    REQUIRE(v1 == v2);
    std::sort(v2.begin(), v2.end());
    REQUIRE(v2 == sorted);
    REQUIRE(v1 != sorted);  // 8 elements: identity permutation would be suspect
  }
}

TEST_CASE("tensor construction and shape checks") {
  Tensor z = Tensor::zeros({2, 3});
  REQUIRE(z.numel() == 6);
  REQUIRE(z.shape() == Shape{2, 3});

  REQUIRE(thrown_kind([] { Tensor::zeros({2, 0}); }) == errkind::kShape);
  REQUIRE(thrown_kind([] { Tensor::from_values({2, 2}, {1.0, 2.0, 3.0}); }) == errkind::kShape);

  SECTION("same seed gives bitwise-identical init") {
    Rng r1(5), r2(5);
    Tensor a = Tensor::kaiming({4, 9}, 9, r1);
    Tensor b = Tensor::kaiming({4, 9}, 9, r2);
    REQUIRE(std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)) == 0);
  }

  SECTION("kaiming bound is sqrt(6/fan_in)") {
    Rng r(11);
    const int fan_in = 24;
    Tensor a = Tensor::kaiming({10, 24}, fan_in, r);
    const double bound = std::sqrt(6.0 / fan_in);
    double mx = 0.0;
    for (double v : a.values()) mx = std::max(mx, std::abs(v));
    REQUIRE(mx <= bound);
    REQUIRE(mx > 0.5 * bound);  // 240 draws: max should land in the upper half
  }
}

TEST_CASE("elementwise ops forward and backward") {
  Tape tape;
  Tensor a = Tensor::from_values({2, 2}, {1.0, -2.0, 3.0, 0.0}).set_requires_grad();
  Tensor b = Tensor::from_values({2, 2}, {0.5, 4.0, -1.0, 2.0}).set_requires_grad();

  SECTION("add/sub/mul hand values") {
    Tensor s = add(tape, a, b);
    REQUIRE(s.values() == std::vector<double>{1.5, 2.0, 2.0, 2.0});
    Tensor d = sub(tape, a, b);
    REQUIRE(d.values() == std::vector<double>{0.5, -6.0, 4.0, -2.0});
    Tensor m = mul(tape, a, b);
    REQUIRE(m.values() == std::vector<double>{0.5, -8.0, -3.0, 0.0});
    Tensor loss = sum_all(tape, m);
    tape.backward(loss);
    REQUIRE(a.grad_view() == std::vector<double>{0.5, 4.0, -1.0, 2.0});
    REQUIRE(b.grad_view() == std::vector<double>{1.0, -2.0, 3.0, 0.0});
  }

  SECTION("shape mismatch throws") {
    Tensor c = Tensor::zeros({3});
    REQUIRE(thrown_kind([&] { add(tape, a, c); }) == errkind::kShape);
  }

  SECTION("relu keeps positives, zero grad at zero") {
    Tensor y = relu(tape, a);
    REQUIRE(y.values() == std::vector<double>{1.0, 0.0, 3.0, 0.0});
    Tensor loss = sum_all(tape, y);
    tape.backward(loss);
    REQUIRE(a.grad_view() == std::vector<double>{1.0, 0.0, 1.0, 0.0});
  }

  SECTION("scalar ops") {
    Tensor y = mul_scalar(tape, add_scalar(tape, a, 1.0), 2.0);
    REQUIRE(y.values() == std::vector<double>{4.0, -2.0, 8.0, 2.0});
    Tensor loss = sum_all(tape, y);
    tape.backward(loss);
    REQUIRE(a.grad_view() == std::vector<double>{2.0, 2.0, 2.0, 2.0});
  }
}

TEST_CASE("linear matches hand-computed product") {
  Tape tape;
  Tensor x = Tensor::from_values({1, 2}, {1.0, 2.0}).set_requires_grad();
  Tensor w = Tensor::from_values({2, 1}, {0.5, 1.5}).set_requires_grad();
  Tensor b = Tensor::from_values({1}, {0.0}).set_requires_grad();
  Tensor y = linear(tape, x, w, b);
  REQUIRE(y.shape() == Shape{1, 1});
  REQUIRE(y.scalar() == 3.5);

  Tensor loss = sum_all(tape, y);
  tape.backward(loss);
  REQUIRE(x.grad_view() == std::vector<double>{0.5, 1.5});
  REQUIRE(w.grad_view() == std::vector<double>{1.0, 2.0});
  REQUIRE(b.grad_view() == std::vector<double>{1.0});
}

TEST_CASE("linear gradient passes finite differences") {
  Rng rng(3);
  Tensor x = Tensor::uniform({3, 5}, -1, 1, rng).set_requires_grad();
  Tensor w = Tensor::uniform({5, 4}, -1, 1, rng).set_requires_grad();
  Tensor b = Tensor::uniform({4}, -1, 1, rng).set_requires_grad();
  Tensor c = Tensor::uniform({3, 4}, -1, 1, rng);  // fixed upstream weights

  auto eval = [&]() {
    Tape t;
    Tensor y = mul(t, linear(t, x, w, b), c);
    return sum_all(t, y).scalar();
  };
  {
    Tape t;
    Tensor y = mul(t, linear(t, x, w, b), c);
    Tensor loss = sum_all(t, y);
    t.backward(loss);
  }
  REQUIRE(finite_difference_check(eval, x, 1e-5) < 1e-6);
  REQUIRE(finite_difference_check(eval, w, 1e-5) < 1e-6);
  REQUIRE(finite_difference_check(eval, b, 1e-5) < 1e-6);
}

TEST_CASE("conv2d forward is bitwise equal to the nested-loop reference") {
  struct Case {
    int B, C, H, W, O, KH, KW, stride, dil, pad;
  };
  const Case cases[] = {
      {1, 1, 5, 5, 1, 3, 3, 1, 1, 0},  {2, 3, 8, 8, 4, 3, 3, 2, 1, 1},
      {1, 2, 9, 7, 3, 3, 3, 1, 2, 2},  {2, 4, 6, 6, 2, 1, 1, 1, 1, 0},
      {1, 3, 10, 10, 5, 3, 3, 2, 3, 3}};
  int idx = 0;
  for (const auto& cs : cases) {
    CAPTURE(idx);
    Rng rng(100 + idx);
    Tensor x = Tensor::uniform({cs.B, cs.C, cs.H, cs.W}, -1, 1, rng);
    Tensor k = Tensor::uniform({cs.O, cs.C, cs.KH, cs.KW}, -1, 1, rng);
    Tape tape;
    Tensor y = conv2d(tape, x, k, cs.stride, cs.dil, cs.pad);
    int OH = 0, OW = 0;
    auto ref = conv_ref(x.values(), k.values(), cs.B, cs.C, cs.H, cs.W, cs.O, cs.KH, cs.KW,
                        cs.stride, cs.dil, cs.pad, OH, OW);
    REQUIRE(y.shape() == Shape{cs.B, cs.O, OH, OW});
    REQUIRE(std::memcmp(y.data(), ref.data(), ref.size() * sizeof(double)) == 0);
    ++idx;
  }
}

TEST_CASE("conv2d gradients pass finite differences") {
  Rng rng(17);
  Tensor x = Tensor::uniform({2, 2, 6, 6}, -1, 1, rng).set_requires_grad();
  Tensor k = Tensor::uniform({3, 2, 3, 3}, -1, 1, rng).set_requires_grad();
  Tensor c = Tensor::uniform({2, 3, 3, 3}, -1, 1, rng);  // matches stride-2 pad-1 output

  auto eval = [&]() {
    Tape t;
    Tensor y = mul(t, conv2d(t, x, k, 2, 1, 1), c);
    return sum_all(t, y).scalar();
  };
  {
    Tape t;
    Tensor loss = sum_all(t, mul(t, conv2d(t, x, k, 2, 1, 1), c));
    t.backward(loss);
  }
  REQUIRE(finite_difference_check(eval, x, 1e-5) < 1e-6);
  REQUIRE(finite_difference_check(eval, k, 1e-5) < 1e-6);

  SECTION("dilated variant") {
    Tensor k2 = Tensor::uniform({2, 2, 3, 3}, -1, 1, rng).set_requires_grad();
    Tensor c2 = Tensor::uniform({2, 2, 6, 6}, -1, 1, rng);
    auto eval2 = [&]() {
      Tape t;
      return sum_all(t, mul(t, conv2d(t, x, k2, 1, 2, 2), c2)).scalar();
    };
    x.clear_grad();  // drop the gradient accumulated by the enclosing body
    {
      Tape t;
      Tensor loss = sum_all(t, mul(t, conv2d(t, x, k2, 1, 2, 2), c2));
      t.backward(loss);
    }
    REQUIRE(finite_difference_check(eval2, x, 1e-5) < 1e-6);
    REQUIRE(finite_difference_check(eval2, k2, 1e-5) < 1e-6);
  }
}

TEST_CASE("channel_bias adds per-channel and routes gradients") {
  Tape tape;
  Tensor x = Tensor::from_values({1, 2, 1, 2}, {1, 2, 3, 4}).set_requires_grad();
  Tensor b = Tensor::from_values({2}, {10, 20}).set_requires_grad();
  Tensor y = channel_bias(tape, x, b);
  REQUIRE(y.values() == std::vector<double>{11, 12, 23, 24});
  Tensor loss = sum_all(tape, y);
  tape.backward(loss);
  REQUIRE(b.grad_view() == std::vector<double>{2.0, 2.0});
  REQUIRE(x.grad_view() == std::vector<double>{1, 1, 1, 1});
}

TEST_CASE("grad_reverse is identity forward and scales backward by -mu") {
  Tensor x = Tensor::from_values({3}, {1.0, -2.0, 3.0}).set_requires_grad();
  Tensor c = Tensor::from_values({3}, {2.0, 5.0, -1.0});

  SECTION("mu = 0.5") {
    Tape tape;
    Tensor y = grad_reverse(tape, x, 0.5);
    REQUIRE(std::memcmp(y.data(), x.data(), 3 * sizeof(double)) == 0);
    Tensor loss = sum_all(tape, mul(tape, y, c));
    tape.backward(loss);
    // d loss/dy = c, reversed: dx = -0.5 * c
    REQUIRE(x.grad_view() == std::vector<double>{-1.0, -2.5, 0.5});
  }

  SECTION("mu = 0 blocks the gradient but keeps the forward value") {
    Tape tape;
    Tensor y = grad_reverse(tape, x, 0.0);
    Tensor loss = sum_all(tape, mul(tape, y, c));
    tape.backward(loss);
    REQUIRE(loss.scalar() == 1.0 * 2.0 + (-2.0) * 5.0 + 3.0 * (-1.0));
    REQUIRE(x.grad_view() == std::vector<double>{0.0, 0.0, 0.0});
  }

  SECTION("negative mu rejected") {
    Tape tape;
    REQUIRE(thrown_kind([&] { grad_reverse(tape, x, -1.0); }) == errkind::kContract);
  }
}

TEST_CASE("detach stops gradient flow") {
  Tape tape;
  Tensor x = Tensor::from_values({2}, {3.0, 4.0}).set_requires_grad();
  Tensor y = mul(tape, x, x);       // d/dx = 2x if connected
  Tensor z = detach(y);
  Tensor w = mul(tape, z, x);       // only the direct x factor differentiates
  Tensor loss = sum_all(tape, w);
  tape.backward(loss);
  REQUIRE(x.grad_view() == std::vector<double>{9.0, 16.0});  // z values, not 3x^2
}

TEST_CASE("reshape preserves data and round-trips gradients") {
  Tape tape;
  Tensor x = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad();
  Tensor y = reshape(tape, x, {3, 2});
  REQUIRE(y.values() == x.values());
  REQUIRE(thrown_kind([&] { reshape(tape, x, {4, 2}); }) == errkind::kShape);
  Tensor c = Tensor::from_values({3, 2}, {1, 10, 100, 1000, 10000, 100000});
  Tensor loss = sum_all(tape, mul(tape, y, c));
  tape.backward(loss);
  REQUIRE(x.grad_view() == c.values());
}

TEST_CASE("pooling ops") {
  SECTION("global_avg_pool hand value and gradient") {
    Tape tape;
    Tensor x = Tensor::from_values({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40}).set_requires_grad();
    Tensor y = global_avg_pool(tape, x);
    REQUIRE(y.shape() == Shape{1, 2});
    REQUIRE(y.values() == std::vector<double>{2.5, 25.0});
    Tensor loss = sum_all(tape, y);
    tape.backward(loss);
    for (double g : x.grad_view()) REQUIRE(g == 0.25);
  }

  SECTION("region_avg_pool means over the requested cells") {
    Tape tape;
    Tensor x = Tensor::from_values({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad();
    std::vector<PoolRegion> regions{{0, 0, 2, 0, 2}, {0, 1, 2, 2, 3}};
    Tensor y = region_avg_pool(tape, x, regions);
    REQUIRE(y.shape() == Shape{2, 1});
    REQUIRE(y.values() == std::vector<double>{(1.0 + 2 + 4 + 5) / 4, 6.0});
    Tensor loss = sum_all(tape, y);
    tape.backward(loss);
    REQUIRE(x.grad_view() == std::vector<double>{0.25, 0.25, 0.0, 0.25, 0.25, 1.0});
  }

  SECTION("degenerate regions are rejected") {
    Tape tape;
    Tensor x = Tensor::zeros({1, 1, 2, 2});
    REQUIRE(thrown_kind([&] {
              region_avg_pool(tape, x, {{0, 1, 1, 0, 2}});
            }) == errkind::kContract);
    REQUIRE(thrown_kind([&] {
              region_avg_pool(tape, x, {{0, 0, 3, 0, 2}});
            }) == errkind::kContract);
  }
}

TEST_CASE("gather_rows accumulates gradients for repeated indices") {
  Tape tape;
  Tensor x = Tensor::from_values({3, 2}, {1, 2, 3, 4, 5, 6}).set_requires_grad();
  Tensor y = gather_rows(tape, x, {1, 1, 2});
  REQUIRE(y.values() == std::vector<double>{3, 4, 3, 4, 5, 6});
  Tensor loss = sum_all(tape, y);
  tape.backward(loss);
  REQUIRE(x.grad_view() == std::vector<double>{0, 0, 2, 2, 1, 1});
}

TEST_CASE("softmax rows") {
  SECTION("rows sum to one; shift invariance") {
    Rng rng(23);
    Tensor x = Tensor::uniform({6, 5}, -3, 3, rng);
    Tape tape;
    Tensor p = softmax_rows(tape, x);
    for (int n = 0; n < 6; ++n) {
      double s = 0.0;
      for (int k = 0; k < 5; ++k) s += p.data()[n * 5 + k];
      REQUIRE(std::abs(s - 1.0) < 1e-12);
    }
    Tensor shifted = Tensor::zeros({6, 5});
    for (size_t i = 0; i < x.numel(); ++i) shifted.data()[i] = x.data()[i] + 7.5;
    Tensor p2 = softmax_rows(tape, shifted);
    for (size_t i = 0; i < p.numel(); ++i)
      REQUIRE(std::abs(p.data()[i] - p2.data()[i]) < 1e-13);
  }

  SECTION("gradient passes finite differences") {
    Rng rng(29);
    Tensor x = Tensor::uniform({4, 3}, -2, 2, rng).set_requires_grad();
    Tensor c = Tensor::uniform({4, 3}, -1, 1, rng);
    auto eval = [&]() {
      Tape t;
      return sum_all(t, mul(t, softmax_rows(t, x), c)).scalar();
    };
    {
      Tape t;
      Tensor loss = sum_all(t, mul(t, softmax_rows(t, x), c));
      t.backward(loss);
    }
    REQUIRE(finite_difference_check(eval, x, 1e-5) < 1e-6);
  }
}

TEST_CASE("softmax_map matches softmax_rows pixelwise") {
  Rng rng(31);
  Tensor x = Tensor::uniform({2, 4, 3, 3}, -2, 2, rng).set_requires_grad();
  Tape tape;
  Tensor pm = softmax_map(tape, x);
  // per-pixel channel distributions sum to one
  for (int b = 0; b < 2; ++b)
    for (int px = 0; px < 9; ++px) {
      double s = 0.0;
      for (int c = 0; c < 4; ++c) s += pm.data()[(static_cast<size_t>(b) * 4 + c) * 9 + px];
      REQUIRE(std::abs(s - 1.0) < 1e-12);
    }

  Tensor c = Tensor::uniform({2, 4, 3, 3}, -1, 1, rng);
  auto eval = [&]() {
    Tape t;
    return sum_all(t, mul(t, softmax_map(t, x), c)).scalar();
  };
  {
    Tape t;
    Tensor loss = sum_all(t, mul(t, softmax_map(t, x), c));
    t.backward(loss);
  }
  REQUIRE(finite_difference_check(eval, x, 1e-5) < 1e-6);
}

TEST_CASE("cross-entropy hand values") {
  SECTION("uniform two-way logits give ln 2") {
    Tape tape;
    Tensor z = Tensor::from_values({1, 2}, {0.0, 0.0}).set_requires_grad();
    Tensor l = cross_entropy_rows(tape, z, {0});
    REQUIRE(l.scalar() == Catch::Approx(std::log(2.0)).epsilon(1e-14));
  }

  SECTION("logits [2,0], true class 0") {
    Tape tape;
    Tensor z = Tensor::from_values({1, 2}, {2.0, 0.0}).set_requires_grad();
    Tensor l = cross_entropy_rows(tape, z, {0});
    REQUIRE(l.scalar() == Catch::Approx(std::log(1.0 + std::exp(-2.0))).epsilon(1e-13));
    tape.backward(l);
    // grad = softmax - onehot
    const double p0 = std::exp(2.0) / (std::exp(2.0) + 1.0);
    REQUIRE(z.grad_view()[0] == Catch::Approx(p0 - 1.0).epsilon(1e-13));
    REQUIRE(z.grad_view()[1] == Catch::Approx(1.0 - p0).epsilon(1e-13));
  }

  SECTION("batch mean and label validation") {
    Tape tape;
    Tensor z = Tensor::from_values({2, 2}, {0.0, 0.0, 0.0, 0.0});
    Tensor l = cross_entropy_rows(tape, z, {0, 1});
    REQUIRE(l.scalar() == Catch::Approx(std::log(2.0)).epsilon(1e-14));
    REQUIRE(thrown_kind([&] { cross_entropy_rows(tape, z, {0, 2}); }) == errkind::kContract);
    REQUIRE(thrown_kind([&] { cross_entropy_rows(tape, z, {0}); }) == errkind::kShape);
  }

  SECTION("map form equals row form when the plane is one pixel") {
    Rng rng(37);
    Tensor z4 = Tensor::uniform({3, 4, 1, 1}, -2, 2, rng);
    Tensor z2 = Tensor::from_values({3, 4}, z4.values());
    Tape tape;
    double a = cross_entropy_map(tape, z4, {0, 3, 1}).scalar();
    double b = cross_entropy_rows(tape, z2, {0, 3, 1}).scalar();
    REQUIRE(a == b);
  }

  SECTION("map gradient passes finite differences") {
    Rng rng(41);
    Tensor z = Tensor::uniform({2, 3, 2, 2}, -2, 2, rng).set_requires_grad();
    std::vector<int> labels{2, 0};
    auto eval = [&]() {
      Tape t;
      return cross_entropy_map(t, z, labels).scalar();
    };
    {
      Tape t;
      Tensor loss = cross_entropy_map(t, z, labels);
      t.backward(loss);
    }
    REQUIRE(finite_difference_check(eval, z, 1e-5) < 1e-6);
  }
}

TEST_CASE("mse hand value and gradient") {
  Tape tape;
  Tensor p = Tensor::from_values({2}, {1.0, 3.0}).set_requires_grad();
  Tensor q = Tensor::from_values({2}, {0.0, 1.0});
  Tensor l = mse(tape, p, q);
  REQUIRE(l.scalar() == (1.0 + 4.0) / 2.0);
  tape.backward(l);
  REQUIRE(p.grad_view() == std::vector<double>{1.0, 2.0});
}

TEST_CASE("reductions") {
  Tape tape;
  Tensor x = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad();
  REQUIRE(sum_all(tape, x).scalar() == 21.0);
  REQUIRE(mean_all(tape, x).scalar() == 3.5);
  Tensor rs = row_sums(tape, x);
  REQUIRE(rs.values() == std::vector<double>{6.0, 15.0});
  Tensor loss = sum_all(tape, mul(tape, rs, Tensor::from_values({2}, {1.0, 10.0})));
  tape.backward(loss);
  REQUIRE(x.grad_view() == std::vector<double>{1, 1, 1, 10, 10, 10});
}

TEST_CASE("activations pass finite differences") {
  Rng rng(43);
  Tensor x = Tensor::uniform({3, 4}, -2, 2, rng).set_requires_grad();
  Tensor c = Tensor::uniform({3, 4}, -1, 1, rng);

  auto run = [&](auto op) {
    auto eval = [&]() {
      Tape t;
      return sum_all(t, mul(t, op(t, x), c)).scalar();
    };
    x.clear_grad();
    {
      Tape t;
      Tensor loss = sum_all(t, mul(t, op(t, x), c));
      t.backward(loss);
    }
    return finite_difference_check(eval, x, 1e-5);
  };

  REQUIRE(run([](Tape& t, const Tensor& v) { return sigmoid(t, v); }) < 1e-6);
  REQUIRE(run([](Tape& t, const Tensor& v) { return mad::tanh(t, v); }) < 1e-6);
}

TEST_CASE("tape contracts") {
  SECTION("backward needs a scalar") {
    Tape tape;
    Tensor x = Tensor::from_values({2}, {1, 2}).set_requires_grad();
    Tensor y = mul(tape, x, x);
    REQUIRE(thrown_kind([&] { tape.backward(y); }) == errkind::kShape);
  }

  SECTION("a tape cannot run backward twice") {
    Tape tape;
    Tensor x = Tensor::from_values({1}, {2.0}).set_requires_grad();
    Tensor y = mul(tape, x, x);
    Tensor l = sum_all(tape, y);
    tape.backward(l);
    REQUIRE(thrown_kind([&] { tape.backward(l); }) == errkind::kContract);
    REQUIRE(thrown_kind([&] { mul(tape, x, x); }) == errkind::kContract);
  }

  SECTION("non-finite op output is reported with the op name") {
    Tape tape;
    Tensor x = Tensor::from_values({1}, {1e308}).set_requires_grad();
    std::string msg;
    try {
      add(tape, x, x);
    } catch (const Error& e) {
      msg = e.what();
      REQUIRE(e.kind() == errkind::kNumeric);
    }
    REQUIRE(msg.find("add") != std::string::npos);
  }

  SECTION("gradient accumulates across two uses of one tensor") {
    Tape tape;
    Tensor x = Tensor::from_values({1}, {3.0}).set_requires_grad();
    Tensor y = add(tape, mul(tape, x, x), x);  // x^2 + x, d/dx = 2x + 1 = 7
    Tensor l = sum_all(tape, y);
    tape.backward(l);
    REQUIRE(x.grad_view()[0] == 7.0);
  }
}

TEST_CASE("sgd with momentum follows the reference recurrence") {
  ParamGroup g;
  g.role = Role::kTaskHead;
  Tensor w = g.add("w", Tensor::from_values({1}, {0.0}));

  // constant gradient 1, lr 1, momentum 0.9:
  // v1=1 w1=-1; v2=1.9 w2=-2.9; v3=2.71 w3=-5.61
  w.grad()[0] = 1.0;
  sgd_update(g, 1.0, 0.9);
  REQUIRE(w.values()[0] == -1.0);
  w.grad()[0] = 1.0;
  sgd_update(g, 1.0, 0.9);
  REQUIRE(w.values()[0] == -2.9);
  w.grad()[0] = 1.0;
  sgd_update(g, 1.0, 0.9);
  REQUIRE(w.values()[0] == Catch::Approx(-5.61).margin(1e-15));

  SECTION("gradients are cleared by the update") { REQUIRE_FALSE(w.has_grad()); }
}

TEST_CASE("sgd edge cases") {
  SECTION("lr 0 leaves weights untouched") {
    ParamGroup g;
    Tensor w = g.add("w", Tensor::from_values({2}, {1.5, -2.5}));
    w.grad()[0] = 3.0;
    w.grad()[1] = -4.0;
    sgd_update(g, 0.0, 0.9);
    REQUIRE(w.values() == std::vector<double>{1.5, -2.5});
  }

  SECTION("zero momentum reduces to plain gradient descent") {
    ParamGroup g;
    Tensor w = g.add("w", Tensor::from_values({1}, {1.0}));
    w.grad()[0] = 0.5;
    sgd_update(g, 0.1, 0.0);
    REQUIRE(w.values()[0] == 1.0 - 0.1 * 0.5);
  }

  SECTION("updating without a gradient is an error naming the parameter") {
    ParamGroup g;
    g.add("conv1.weight", Tensor::zeros({2}));
    std::string msg;
    try {
      sgd_update(g, 0.1, 0.9);
    } catch (const Error& e) {
      msg = e.what();
      REQUIRE(e.kind() == errkind::kContract);
    }
    REQUIRE(msg.find("conv1.weight") != std::string::npos);
  }
}

TEST_CASE("a small training step is bitwise reproducible") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    ParamGroup g;
    Tensor w1 = g.add("w1", Tensor::kaiming({3, 8}, 3, rng));
    Tensor b1 = g.add("b1", Tensor::zeros({8}));
    Tensor w2 = g.add("w2", Tensor::kaiming({8, 2}, 8, rng));
    Tensor b2 = g.add("b2", Tensor::zeros({2}));
    Tensor x = Tensor::uniform({4, 3}, -1, 1, rng);
    std::vector<int> labels{0, 1, 1, 0};
    for (int step = 0; step < 5; ++step) {
      Tape t;
      Tensor h = relu(t, linear(t, x, w1, b1));
      Tensor z = linear(t, h, w2, b2);
      Tensor loss = cross_entropy_rows(t, z, labels);
      t.backward(loss);
      sgd_update(g, 0.05, 0.9);
    }
    std::vector<double> flat;
    for (auto& p : g.params)
      flat.insert(flat.end(), p.value.values().begin(), p.value.values().end());
    return flat;
  };
  auto a = run(77), b = run(77), c = run(78);
  REQUIRE(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
  REQUIRE(a != c);
}

TEST_CASE("frozen one-liner cases") {
  Tape tape;

  SECTION("all-ones 3x3 convolution sums to 9") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(tape, x, k, 1, 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    REQUIRE(y.scalar() == 9.0);

    Tensor yp = conv2d(tape, x, k, 1, 1, 1);
    REQUIRE(yp.shape() == Shape{1, 1, 3, 3});
    REQUIRE(yp.data()[4] == 9.0);  // center tap sees the full kernel
    REQUIRE(yp.data()[0] == 4.0);  // corner sees a 2x2 overlap
  }

  SECTION("sigmoid at 0 is one half") {
    Tensor x = Tensor::from_values({1}, {0.0});
    REQUIRE(sigmoid(tape, x).scalar() == 0.5);
  }

  SECTION("mse of a tensor with itself is zero") {
    Tensor x = Tensor::from_values({3}, {1.0, -2.0, 3.0});
    REQUIRE(mse(tape, x, x).scalar() == 0.0);
  }
}

TEST_CASE("finite_difference_check flags a wrong gradient") {
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}).set_requires_grad();
  auto eval = [&]() {
    Tape t;
    return sum_all(t, mul(t, x, x)).scalar();
  };
  {
    Tape t;
    Tensor loss = sum_all(t, mul(t, x, x));
    t.backward(loss);
  }
  REQUIRE(finite_difference_check(eval, x, 1e-5) < 1e-9);
  x.grad()[0] += 0.5;  // corrupt one coordinate
  REQUIRE(finite_difference_check(eval, x, 1e-5) > 0.05);
}
