#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dvat/gradcheck.hpp"
#include "dvat/network.hpp"
#include "dvat/ops.hpp"
#include "dvat/rng.hpp"
#include "dvat/transforms.hpp"

namespace dvat {

struct GradCheckSuiteConfig {
  std::size_t shapes = 5;
  std::size_t coords = 20;
  double h = 1e-5;
  std::uint64_t seed = 0;
};

struct GradCheckCase {
  std::string name;  // "<op>[/<argument>] <shape>"
  GradCheckResult result;
};

namespace detail {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Keeps probes at least `gap` away from 0 so ReLU kinks are never straddled.
inline Tensor<double> away_from_zero(Tensor<double> t, double gap) {
  for (auto& v : t.data)
    if (std::abs(v) < gap) v = v < 0 ? v - gap : v + gap;
  return t;
}

inline std::string shape_text(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace detail

// Central finite-difference checks in double precision for every differentiable op
// (with respect to each differentiable argument) and for the loss of every zoo
// architecture behind a fixed input-diversity transform. Each op output is reduced
// to a scalar through a random linear functional.
inline std::vector<GradCheckCase> run_gradcheck_suite(const GradCheckSuiteConfig& cfg = {}) {
  using T = double;
  std::vector<GradCheckCase> out;
  Rng rng(cfg.seed);
  const auto check = [&](const std::string& name, const Tensor<T>& x, const ScalarGraph<T>& f) {
    out.push_back({name + " " + detail::shape_text(x.shape), finite_diff_check<T>(f, x, cfg.h, cfg.coords, rng.next_u64())});
  };
  // Reduces y to sum(y * w) with a fixed random w of y's shape.
  const auto functional = [](Tape<T>& tape, const Var<T>& y, std::uint64_t seed) {
    Rng wr(seed);
    return ops::sum(ops::mul(y, tape.constant(detail::random_tensor(y.shape(), wr))));
  };

  for (std::size_t s = 0; s < cfg.shapes; ++s) {
    const auto B = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const auto C = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const auto H = static_cast<std::size_t>(rng.uniform_int(5, 9));
    const auto W = static_cast<std::size_t>(rng.uniform_int(5, 9));
    const auto K = static_cast<std::size_t>(rng.uniform_int(2, 5));
    const std::uint64_t ws = rng.next_u64();
    const Shape img{B, C, H, W};
    const Tensor<T> x = detail::random_tensor(img, rng);
    const Tensor<T> other = detail::random_tensor(img, rng);
    const auto lin = [&](auto op) {
      return ScalarGraph<T>([=](Tape<T>& t, const Var<T>& v) { return functional(t, op(t, v), ws); });
    };

    check("add", x, lin([&](Tape<T>& t, const Var<T>& v) { return ops::add(v, t.constant(other)); }));
    check("sub", x, lin([&](Tape<T>& t, const Var<T>& v) { return ops::sub(t.constant(other), v); }));
    check("mul", x, lin([&](Tape<T>& t, const Var<T>& v) { return ops::mul(v, t.constant(other)); }));
    check("scale", x, lin([](Tape<T>&, const Var<T>& v) { return ops::scale(v, 1.7); }));
    check("add_scalar", x, lin([](Tape<T>&, const Var<T>& v) { return ops::add_scalar(v, -0.3); }));
    check("sum", x, ScalarGraph<T>([](Tape<T>&, const Var<T>& v) { return ops::scale(ops::sum(v), 0.5); }));
    check("relu", detail::away_from_zero(x, 1e-3), lin([](Tape<T>&, const Var<T>& v) { return ops::relu(v); }));
    check("tanh", x, lin([](Tape<T>&, const Var<T>& v) { return ops::tanh(v); }));

    const std::size_t O = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const std::size_t k = std::min<std::size_t>({3, H, W});
    const std::size_t stride = static_cast<std::size_t>(rng.uniform_int(1, 2));
    const std::size_t pad = static_cast<std::size_t>(rng.uniform_int(0, 1));
    const Tensor<T> kern = detail::random_tensor({O, C, k, k}, rng);
    const Tensor<T> bias = detail::random_tensor({O}, rng);
    check("conv2d/input", x, lin([&](Tape<T>& t, const Var<T>& v) {
            return ops::conv2d(v, t.constant(kern), t.constant(bias), stride, pad);
          }));
    check("conv2d/kernel", kern, lin([&](Tape<T>& t, const Var<T>& v) {
            return ops::conv2d(t.constant(x), v, t.constant(bias), stride, pad);
          }));
    check("conv2d/bias", bias, lin([&](Tape<T>& t, const Var<T>& v) {
            return ops::conv2d(t.constant(x), t.constant(kern), v, stride, pad);
          }));
    check("conv2d_nobias/input", x, lin([&](Tape<T>& t, const Var<T>& v) {
            return ops::conv2d(v, t.constant(kern), stride, pad);
          }));

    const std::size_t F = C * H;
    const Tensor<T> feat = detail::random_tensor({B, F}, rng);
    const Tensor<T> dw = detail::random_tensor({K, F}, rng);
    const Tensor<T> db = detail::random_tensor({K}, rng);
    check("dense/input", feat, lin([&](Tape<T>& t, const Var<T>& v) { return ops::dense(v, t.constant(dw), t.constant(db)); }));
    check("dense/weight", dw, lin([&](Tape<T>& t, const Var<T>& v) { return ops::dense(t.constant(feat), v, t.constant(db)); }));
    check("dense/bias", db, lin([&](Tape<T>& t, const Var<T>& v) { return ops::dense(t.constant(feat), t.constant(dw), v); }));
    check("global_avg_pool", x, lin([](Tape<T>&, const Var<T>& v) { return ops::global_avg_pool(v); }));

    std::vector<int> labels(B);
    for (auto& y : labels) y = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(K) - 1));
    const Tensor<T> logits = detail::random_tensor({B, K}, rng, -3.0, 3.0);
    check("softmax_cross_entropy", logits, ScalarGraph<T>([=](Tape<T>&, const Var<T>& v) {
            return ops::softmax_cross_entropy(v, labels);
          }));
    check("label_margin", logits, lin([=](Tape<T>&, const Var<T>& v) { return ops::label_margin(v, labels); }));

    const auto rh = static_cast<std::size_t>(rng.uniform_int(2, 2 * static_cast<std::int64_t>(H)));
    const auto rw = static_cast<std::size_t>(rng.uniform_int(2, 2 * static_cast<std::int64_t>(W)));
    check("bilinear_resize", x, lin([=](Tape<T>&, const Var<T>& v) { return ops::bilinear_resize(v, rh, rw); }));
    const ops::Padding padding{static_cast<std::size_t>(rng.uniform_int(0, 3)), static_cast<std::size_t>(rng.uniform_int(0, 3)),
                               static_cast<std::size_t>(rng.uniform_int(0, 3)), static_cast<std::size_t>(rng.uniform_int(0, 3))};
    check("pad2d", x, lin([=](Tape<T>&, const Var<T>& v) { return ops::pad2d(v, padding); }));

    DiversityConfig div;
    div.p = 1.0;
    div.r_low = std::max(H, W);
    div.r_high = div.r_low + 3;
    const Tensor<T> square = detail::random_tensor({B, C, div.r_low, div.r_low}, rng, 0.0, 1.0);
    const TransformInstance inst = sample_transform(div, rng);
    check("apply_transform", square, lin([=](Tape<T>&, const Var<T>& v) { return apply_transform(v, inst, div); }));
  }

  // Full model loss behind the transform, one architecture per shape.
  const char* archs[] = {"A", "B", "C", "D"};
  for (std::size_t s = 0; s < cfg.shapes; ++s) {
    const auto B = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const auto C = static_cast<std::size_t>(rng.uniform_int(1, 2));
    const auto size = static_cast<std::size_t>(rng.uniform_int(12, 28));
    const std::string arch = archs[s % 4];
    const Model<T> model = build_network<T>(zoo_spec(arch, C, size, 10), rng.next_u64());
    DiversityConfig div;
    div.p = 1.0;
    div.r_low = size;
    div.r_high = size + 3;
    const TransformInstance inst = sample_transform(div, rng);
    std::vector<int> labels(B);
    for (auto& y : labels) y = static_cast<int>(rng.uniform_int(0, 9));
    const Tensor<T> x = detail::random_tensor({B, C, size, size}, rng, 0.0, 1.0);
    check("model" + arch + "+transform+loss", x, ScalarGraph<T>([&model, inst, div, labels](Tape<T>& t, const Var<T>& v) {
            return ops::softmax_cross_entropy(forward(model, t, apply_transform(v, inst, div)), labels);
          }));
  }
  return out;
}

}  // namespace dvat
