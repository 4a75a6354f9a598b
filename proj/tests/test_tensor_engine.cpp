#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dvat/autograd.hpp"
#include "dvat/gradcheck.hpp"
#include "dvat/gradcheck_suite.hpp"
#include "dvat/ops.hpp"
#include "dvat/rng.hpp"

using namespace dvat;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<T> t(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Direct seven-loop convolution with zero padding.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>* b, std::size_t stride,
                          std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = k.dim(0), K = k.dim(2);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Tensor<double> out({B, O, Ho, Wo});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t xx = 0; xx < Wo; ++xx) {
          double s = b ? (*b)[o] : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < K; ++i)
              for (std::size_t j = 0; j < K; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                s += x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                     k.data[((o * C + c) * K + i) * K + j];
              }
          out.at(n, o, y, xx) = s;
        }
  return out;
}

// Half-pixel bilinear resize evaluated pointwise.
Tensor<double> naive_resize(const Tensor<double>& x, std::size_t ho, std::size_t wo) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<double> out({B, C, ho, wo});
  const auto src = [](std::size_t d, std::size_t in, std::size_t outn) {
    double s = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx) {
          const double sy = src(y, H, ho), sx = src(xx, W, wo);
          const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
          const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
          const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
          out.at(n, c, y, xx) = (1 - fy) * ((1 - fx) * x.at(n, c, y0, x0) + fx * x.at(n, c, y0, x1)) +
                                fy * ((1 - fx) * x.at(n, c, y1, x0) + fx * x.at(n, c, y1, x1));
        }
  return out;
}

void expect_near(const Tensor<double>& a, const Tensor<double>& b, double tol) {
  ASSERT_EQ(a.shape, b.shape);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], tol) << "at " << i;
}

}  // namespace

TEST(Oracle, Conv2dMatchesDirectLoops) {
  std::uint64_t seed = 1;
  for (std::size_t stride : {1, 2, 3})
    for (std::size_t pad : {0, 1, 2})
      for (std::size_t K : {1, 3, 5}) {
        const auto x = random_tensor<double>({2, 3, 9, 8}, seed++);
        const auto k = random_tensor<double>({4, 3, K, K}, seed++);
        const auto b = random_tensor<double>({4}, seed++);
        Tape<double> tape;
        const auto y = ops::conv2d(tape.constant(x), tape.constant(k), tape.constant(b), stride, pad);
        expect_near(y.value(), naive_conv(x, k, &b, stride, pad), 1e-12);
        const auto y0 = ops::conv2d(tape.constant(x), tape.constant(k), stride, pad);
        expect_near(y0.value(), naive_conv(x, k, nullptr, stride, pad), 1e-12);
      }
}

TEST(Oracle, DenseMatchesMatrixProduct) {
  const auto x = random_tensor<double>({3, 7}, 2), w = random_tensor<double>({5, 7}, 3), b = random_tensor<double>({5}, 4);
  Tape<double> tape;
  const auto y = ops::dense(tape.constant(x), tape.constant(w), tape.constant(b)).value();
  ASSERT_EQ(y.shape, (Shape{3, 5}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t o = 0; o < 5; ++o) {
      double s = b[o];
      for (std::size_t f = 0; f < 7; ++f) s += x[i * 7 + f] * w[o * 7 + f];
      EXPECT_NEAR(y[i * 5 + o], s, 1e-12);
    }
}

TEST(Oracle, BilinearResizeMatchesPointwiseFormula) {
  const auto x = random_tensor<double>({2, 2, 7, 9}, 5);
  for (auto [ho, wo] : std::vector<std::pair<std::size_t, std::size_t>>{{7, 9}, {3, 4}, {14, 18}, {10, 5}, {1, 1}}) {
    Tape<double> tape;
    expect_near(ops::bilinear_resize(tape.constant(x), ho, wo).value(), naive_resize(x, ho, wo), 1e-12);
  }
}

TEST(Oracle, ResizeToSameSizeIsIdentity) {
  const auto x = random_tensor<float>({1, 1, 28, 28}, 6, 0, 1);
  Tape<float> tape;
  EXPECT_EQ(ops::bilinear_resize(tape.constant(x), 28, 28).value(), x);
}

TEST(Oracle, CrossEntropyMatchesLongDoubleReference) {
  const auto z = random_tensor<double>({4, 6}, 7, -30, 30);
  const std::vector<int> y = {0, 5, 2, 3};
  Tape<double> tape;
  const double loss = ops::softmax_cross_entropy(tape.constant(z), y).value()[0];
  long double ref = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    long double m = z[i * 6];
    for (std::size_t j = 0; j < 6; ++j) m = std::max<long double>(m, z[i * 6 + j]);
    long double s = 0;
    for (std::size_t j = 0; j < 6; ++j) s += std::exp(static_cast<long double>(z[i * 6 + j]) - m);
    ref += m + std::log(s) - z[i * 6 + static_cast<std::size_t>(y[i])];
  }
  EXPECT_NEAR(loss, static_cast<double>(ref / 4), 1e-12);
}

TEST(CrossEntropy, LargeLogitsStayFinite) {
  Tensor<float> z({1, 3}, std::vector<float>{1000.f, -1000.f, 0.f});
  Tape<float> tape;
  auto zv = tape.leaf(z, true);
  auto loss = ops::softmax_cross_entropy(zv, std::vector<int>{1});
  tape.backward(loss);
  EXPECT_NEAR(loss.value()[0], 2000.f, 1e-2);
  const auto g = zv.grad();
  EXPECT_NEAR(g[0], 1.f, 1e-6);
  EXPECT_NEAR(g[1], -1.f, 1e-6);
}

TEST(CrossEntropy, ConfidentCorrectClassStillHasGradient) {
  // The loss underflows in float arithmetic, yet the gradient must not vanish.
  Tensor<float> z({1, 3}, std::vector<float>{30.f, 0.f, 0.f});
  Tape<float> tape;
  auto zv = tape.leaf(z, true);
  tape.backward(ops::softmax_cross_entropy(zv, std::vector<int>{0}));
  const auto g = zv.grad();
  EXPECT_LT(g[0], 0.f);
  EXPECT_GT(g[1], 0.f);
  EXPECT_FLOAT_EQ(g[0], -(g[1] + g[2]));
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverBatch) {
  const auto z = random_tensor<double>({2, 4}, 8);
  Tape<double> tape;
  auto zv = tape.leaf(z, true);
  const std::vector<int> y = {1, 3};
  tape.backward(ops::softmax_cross_entropy(zv, y));
  const auto g = zv.grad();
  for (std::size_t i = 0; i < 2; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) s += std::exp(z[i * 4 + j]);
    for (std::size_t j = 0; j < 4; ++j) {
      const double p = std::exp(z[i * 4 + j]) / s - (static_cast<int>(j) == y[i] ? 1.0 : 0.0);
      EXPECT_NEAR(g[i * 4 + j], p / 2, 1e-12);
    }
  }
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Tensor<double> x({3}, std::vector<double>{-1.0, 0.0, 2.0});
  Tape<double> tape;
  auto xv = tape.leaf(x, true);
  tape.backward(ops::sum(ops::relu(xv)));
  EXPECT_EQ(xv.grad().data, (std::vector<double>{0.0, 0.0, 1.0}));
}

TEST(Pad2d, MarginGradientsAreDiscarded) {
  const auto x = random_tensor<double>({1, 1, 3, 3}, 9);
  Tape<double> tape;
  auto xv = tape.leaf(x, true);
  auto y = ops::pad2d(xv, ops::Padding{1, 2, 0, 3});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 6, 6}));
  tape.backward(ops::sum(y));
  for (double g : xv.grad().data) EXPECT_EQ(g, 1.0);
  Tape<double> t2;
  EXPECT_THROW(ops::pad2d(t2.constant(x), -1L, 0L, 0L, 0L), ConfigError);
}

TEST(GradCheck, EveryOpAndFullModelPassInDouble) {
  const auto cases = run_gradcheck_suite({});
  ASSERT_GE(cases.size(), 5u * 20u);
  std::size_t model_cases = 0;
  for (const auto& c : cases) {
    EXPECT_LT(c.result.max_rel_error, 1e-5) << c.name;
    EXPECT_GE(c.result.coords_checked, std::min<std::size_t>(20, 1)) << c.name;
    model_cases += c.name.rfind("model", 0) == 0;
  }
  EXPECT_EQ(model_cases, 5u);
}

TEST(GradCheck, EachCheckUsesTwentyCoordinatesWhenAvailable) {
  for (const auto& c : run_gradcheck_suite({})) {
    if (c.name.rfind("model", 0) == 0 || c.name.rfind("conv2d/input", 0) == 0) {
      EXPECT_EQ(c.result.coords_checked, 20u) << c.name;
    }
  }
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A deliberately broken op: forward x^2, backward claims 3x.
  const ScalarGraph<double> broken = [](Tape<double>& tape, const Var<double>& x) {
    Tensor<double> y = x.value();
    for (auto& v : y.data) v *= v;
    const std::size_t ix = x.id();
    const Tensor<double> xv = x.value();
    Var<double> out = tape.record(std::move(y), x.requires_grad(), [ix, xv](Tape<double>& t, std::size_t self) {
      for (std::size_t i = 0; i < xv.size(); ++i) t.grad_buffer(ix)[i] += 3.0 * xv[i] * t.grad_buffer(self)[i];
    });
    return ops::sum(out);
  };
  const auto r = finite_diff_check<double>(broken, random_tensor<double>({5}, 10), 1e-5, 5);
  EXPECT_GT(r.max_rel_error, 0.1);
}

TEST(Backward, IsLinearInTheUpstreamGradient) {
  // grad(a f + b g) == a grad f + b grad g for a shared input.
  const auto x = random_tensor<double>({2, 2, 6, 6}, 11);
  const auto k = random_tensor<double>({3, 2, 3, 3}, 12);
  const auto w = random_tensor<double>({2, 3, 6, 6}, 13);
  const auto grad_of = [&](double a, double b) {
    Tape<double> tape;
    auto xv = tape.leaf(x, true);
    auto f = ops::sum(ops::mul(ops::relu(ops::conv2d(xv, tape.constant(k), 1, 1)), tape.constant(w)));
    auto g = ops::sum(ops::tanh(ops::bilinear_resize(xv, 9, 4)));
    tape.backward(ops::add(ops::scale(f, a), ops::scale(g, b)));
    return xv.grad();
  };
  const auto gf = grad_of(1, 0), gg = grad_of(0, 1), mix = grad_of(2.5, -0.75);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(mix[i], 2.5 * gf[i] - 0.75 * gg[i], 1e-12);
}

TEST(Backward, SharedSubgraphAccumulates) {
  Tensor<double> x({1}, std::vector<double>{3.0});
  Tape<double> tape;
  auto xv = tape.leaf(x, true);
  tape.backward(ops::sum(ops::mul(xv, xv)));
  EXPECT_DOUBLE_EQ(xv.grad()[0], 6.0);
}

TEST(Tape, ErrorsAreExplicit) {
  Tape<double> tape;
  auto v = tape.leaf(random_tensor<double>({2}, 14), true);
  EXPECT_THROW(tape.backward(v), AutogradError);
  auto s = ops::sum(v);
  tape.backward(s);
  EXPECT_THROW(tape.backward(s), AutogradError);
  Tape<double> other;
  EXPECT_THROW(other.backward(s), AutogradError);
  Var<double> detached;
  EXPECT_THROW(detached.value(), AutogradError);
  EXPECT_THROW(ops::add(v, other.leaf(random_tensor<double>({2}, 15))), AutogradError);
}

TEST(Tape, ShapeMismatchIsAConfigError) {
  Tape<double> tape;
  EXPECT_THROW(ops::add(tape.constant(Tensor<double>({2})), tape.constant(Tensor<double>({3}))), ConfigError);
  EXPECT_THROW(ops::conv2d(tape.constant(Tensor<double>({1, 2, 5, 5})), tape.constant(Tensor<double>({1, 3, 3, 3})), 1, 0),
               ConfigError);
}

TEST(Determinism, FloatForwardIsBitReproducible) {
  const auto x = random_tensor<float>({2, 3, 12, 12}, 16);
  const auto k = random_tensor<float>({4, 3, 3, 3}, 17);
  Tape<float> t1, t2;
  EXPECT_EQ(ops::conv2d(t1.constant(x), t1.constant(k), 2, 1).value(), ops::conv2d(t2.constant(x), t2.constant(k), 2, 1).value());
}
