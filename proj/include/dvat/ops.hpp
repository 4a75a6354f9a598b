#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dvat/autograd.hpp"
#include "dvat/error.hpp"
#include "dvat/tensor.hpp"

// Differentiable ops over Var. Every op records its output on the tape of its
// inputs; inputs must share a tape.
namespace dvat::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

template <typename T>
Tape<T>& same_tape(std::initializer_list<const Var<T>*> vars) {
  Tape<T>* tape = nullptr;
  for (const Var<T>* v : vars) {
    if (!v->attached()) throw AutogradError("detached tensor passed to op");
    if (tape && v->tape() != tape) throw AutogradError("op inputs live on different tapes");
    tape = v->tape();
  }
  return *tape;
}

template <typename T>
void require_rank(const Var<T>& v, std::size_t rank, const char* op, const char* arg) {
  if (v.shape().size() != rank) {
    throw ConfigError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                      ", got shape " + shape_str(v.shape()));
  }
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
}

// Source sample positions and weights for one axis of a half-pixel bilinear resize.
struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline AxisTaps bilinear_taps(std::size_t in, std::size_t out) {
  AxisTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    t.lo[d] = lo;
    t.hi[d] = std::min(lo + 1, in - 1);
    t.frac[d] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape<T>({&a, &b});
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ia, ib](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       for (std::size_t id : {ia, ib}) {
                         auto& gi = t.grad_buffer(id);
                         if (gi.empty()) continue;
                         for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                       }
                     });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape<T>({&a, &b});
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ia, ib](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       if (auto& ga = t.grad_buffer(ia); !ga.empty())
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                       if (auto& gb = t.grad_buffer(ib); !gb.empty())
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                     });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape<T>({&a, &b});
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [ia, ib](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       const auto& av = t.value_of(ia).data;
                       const auto& bv = t.value_of(ib).data;
                       if (auto& ga = t.grad_buffer(ia); !ga.empty())
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                       if (auto& gb = t.grad_buffer(ib); !gb.empty())
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                     });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tape<T>& tape = detail::same_tape<T>({&a});
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= s;
  const std::size_t ia = a.id();
  return tape.record(std::move(out), a.requires_grad(), [ia, s](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tape<T>& tape = detail::same_tape<T>({&a});
  Tensor<T> out = a.value();
  for (auto& v : out.data) v += s;
  const std::size_t ia = a.id();
  return tape.record(std::move(out), a.requires_grad(), [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tape<T>& tape = detail::same_tape<T>({&a});
  T acc = T(0);
  for (T v : a.value().data) acc += v;
  const std::size_t ia = a.id();
  return tape.record(Tensor<T>({1}, acc), a.requires_grad(), [ia](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(self)[0];
    for (auto& gi : t.grad_buffer(ia)) gi += g;
  });
}

// relu with subgradient 0 at 0.
template <typename T>
Var<T> relu(const Var<T>& a) {
  Tape<T>& tape = detail::same_tape<T>({&a});
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  const std::size_t ia = a.id();
  return tape.record(std::move(out), a.requires_grad(), [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& x = t.value_of(ia).data;
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T(0)) ga[i] += g[i];
  });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  Tape<T>& tape = detail::same_tape<T>({&a});
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = std::tanh(v);
  const std::size_t ia = a.id();
  return tape.record(std::move(out), a.requires_grad(), [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const auto& y = t.value_of(self).data;
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

// ---------------------------------------------------------------------------
// Layers

namespace detail {

template <typename T>
Var<T> conv2d_impl(const Var<T>& input, const Var<T>& kernel, const Var<T>* bias, std::size_t stride,
                   std::size_t padding) {
  Tape<T>& tape = bias ? detail::same_tape<T>({&input, &kernel, bias}) : detail::same_tape<T>({&input, &kernel});
  detail::require_rank(input, 4, "conv2d", "input");
  detail::require_rank(kernel, 4, "conv2d", "kernel");
  if (bias) detail::require_rank(*bias, 1, "conv2d", "bias");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  const std::size_t B = is[0], Cin = is[1], H = is[2], W = is[3];
  const std::size_t Cout = ks[0], kh = ks[2], kw = ks[3];
  if (ks[1] != Cin) {
    throw ConfigError("conv2d: input channels " + std::to_string(Cin) + " != kernel in-channels " +
                      std::to_string(ks[1]));
  }
  if (bias && bias->shape()[0] != Cout) {
    throw ConfigError("conv2d: bias length " + std::to_string(bias->shape()[0]) +
                      " != out-channels " + std::to_string(Cout));
  }
  if (kh > H + 2 * padding) {
    throw ConfigError("conv2d: kernel height " + std::to_string(kh) + " exceeds padded height " +
                      std::to_string(H + 2 * padding));
  }
  if (kw > W + 2 * padding) {
    throw ConfigError("conv2d: kernel width " + std::to_string(kw) + " exceeds padded width " +
                      std::to_string(W + 2 * padding));
  }
  const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;
  const std::size_t K = Cin * kh * kw, P = Ho * Wo;

  const auto im2col = [=](const T* img, T* cols) {
    for (std::size_t ci = 0; ci < Cin; ++ci)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          T* row = cols + ((ci * kh + ky) * kw + kx) * P;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                      static_cast<std::ptrdiff_t>(padding);
            T* dst = row + oy * Wo;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
              std::fill_n(dst, Wo, T(0));
              continue;
            }
            const T* src = img + (ci * H + static_cast<std::size_t>(iy)) * W;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(padding);
              dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) ? T(0) : src[ix];
            }
          }
        }
  };

  const bool need_kernel_grad = kernel.requires_grad();
  auto all_cols = std::make_shared<std::vector<T>>(need_kernel_grad ? B * K * P : K * P);
  Tensor<T> out({B, Cout, Ho, Wo});
  const auto& xv = input.value().data;
  detail::MapC<T> wmat(kernel.value().data.data(), Cout, K);
  for (std::size_t b = 0; b < B; ++b) {
    T* cols = all_cols->data() + (need_kernel_grad ? b * K * P : 0);
    im2col(xv.data() + b * Cin * H * W, cols);
    detail::MapM<T> o(out.data.data() + b * Cout * P, Cout, P);
    o.noalias() = wmat * detail::MapC<T>(cols, K, P);
    if (bias)
      for (std::size_t co = 0; co < Cout; ++co) o.row(co).array() += bias->value().data[co];
  }
  if (!need_kernel_grad) all_cols.reset();

  const std::size_t ii = input.id(), ik = kernel.id();
  const std::optional<std::size_t> ib = bias ? std::optional(bias->id()) : std::nullopt;
  const bool rg = input.requires_grad() || kernel.requires_grad() || (bias && bias->requires_grad());
  return tape.record(std::move(out), rg, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (ib && !t.grad_buffer(*ib).empty()) {
      auto& gb = t.grad_buffer(*ib);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Cout; ++co) {
          const T* gp = g.data() + (b * Cout + co) * P;
          T acc = T(0);
          for (std::size_t p = 0; p < P; ++p) acc += gp[p];
          gb[co] += acc;
        }
    }
    if (auto& gk = t.grad_buffer(ik); !gk.empty()) {
      detail::MapM<T> gw(gk.data(), Cout, K);
      for (std::size_t b = 0; b < B; ++b) {
        detail::MapC<T> go(g.data() + b * Cout * P, Cout, P);
        detail::MapC<T> cols(all_cols->data() + b * K * P, K, P);
        gw.noalias() += go * cols.transpose();
      }
    }
    if (auto& gi = t.grad_buffer(ii); !gi.empty()) {
      detail::MapC<T> w(t.value_of(ik).data.data(), Cout, K);
      detail::RowMat<T> dcols(K, P);
      for (std::size_t b = 0; b < B; ++b) {
        detail::MapC<T> go(g.data() + b * Cout * P, Cout, P);
        dcols.noalias() = w.transpose() * go;
        T* dimg = gi.data() + b * Cin * H * W;
        for (std::size_t ci = 0; ci < Cin; ++ci)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const T* row = dcols.data() + ((ci * kh + ky) * kw + kx) * P;
              for (std::size_t oy = 0; oy < Ho; ++oy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                          static_cast<std::ptrdiff_t>(padding);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                T* dst = dimg + (ci * H + static_cast<std::size_t>(iy)) * W;
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                            static_cast<std::ptrdiff_t>(padding);
                  if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) dst[ix] += row[oy * Wo + ox];
                }
              }
            }
      }
    }
  });
}

}  // namespace detail

// Cross-correlation (no kernel flip). input [B,Cin,H,W], kernel [Cout,Cin,kh,kw], bias [Cout].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, std::size_t stride,
              std::size_t padding) {
  return detail::conv2d_impl(input, kernel, &bias, stride, padding);
}

// Bias-free variant: zero input maps to zero output.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, std::size_t stride, std::size_t padding) {
  return detail::conv2d_impl<T>(input, kernel, nullptr, stride, padding);
}

// Affine map: input [B,F], weight [O,F], bias [O] -> [B,O].
template <typename T>
Var<T> dense(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  Tape<T>& tape = detail::same_tape<T>({&input, &weight, &bias});
  detail::require_rank(input, 2, "dense", "input");
  detail::require_rank(weight, 2, "dense", "weight");
  detail::require_rank(bias, 1, "dense", "bias");
  const std::size_t B = input.shape()[0], F = input.shape()[1];
  const std::size_t O = weight.shape()[0];
  if (weight.shape()[1] != F) {
    throw ConfigError("dense: input features " + std::to_string(F) + " != weight in-features " +
                      std::to_string(weight.shape()[1]));
  }
  if (bias.shape()[0] != O) {
    throw ConfigError("dense: bias length " + std::to_string(bias.shape()[0]) +
                      " != out-features " + std::to_string(O));
  }
  Tensor<T> out({B, O});
  detail::MapM<T> o(out.data.data(), B, O);
  detail::MapC<T> x(input.value().data.data(), B, F);
  detail::MapC<T> w(weight.value().data.data(), O, F);
  o.noalias() = x * w.transpose();
  const auto& bv = bias.value().data;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < O; ++j) out[b * O + j] += bv[j];

  const std::size_t ii = input.id(), iw = weight.id(), ib = bias.id();
  const bool rg = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
  return tape.record(std::move(out), rg, [=](Tape<T>& t, std::size_t self) {
    const auto& gbuf = t.grad_buffer(self);
    detail::MapC<T> g(gbuf.data(), B, O);
    if (auto& gi = t.grad_buffer(ii); !gi.empty()) {
      detail::MapM<T> dx(gi.data(), B, F);
      dx.noalias() += g * detail::MapC<T>(t.value_of(iw).data.data(), O, F);
    }
    if (auto& gw = t.grad_buffer(iw); !gw.empty()) {
      detail::MapM<T> dw(gw.data(), O, F);
      dw.noalias() += g.transpose() * detail::MapC<T>(t.value_of(ii).data.data(), B, F);
    }
    if (auto& gb = t.grad_buffer(ib); !gb.empty()) {
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < O; ++j) gb[j] += gbuf[b * O + j];
    }
  });
}

// [B,C,H,W] -> [B,C], mean over the spatial extent.
template <typename T>
Var<T> global_avg_pool(const Var<T>& a) {
  Tape<T>& tape = detail::same_tape<T>({&a});
  detail::require_rank(a, 4, "global_avg_pool", "input");
  const Shape& s = a.shape();
  const std::size_t BC = s[0] * s[1], HW = s[2] * s[3];
  if (HW == 0) throw ConfigError("global_avg_pool: empty spatial extent");
  Tensor<T> out({s[0], s[1]});
  const auto& x = a.value().data;
  const T inv = T(1) / static_cast<T>(HW);
  for (std::size_t i = 0; i < BC; ++i) {
    T acc = T(0);
    for (std::size_t k = 0; k < HW; ++k) acc += x[i * HW + k];
    out[i] = acc * inv;
  }
  const std::size_t ia = a.id();
  return tape.record(std::move(out), a.requires_grad(), [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < BC; ++i) {
      const T gi = g[i] * inv;
      for (std::size_t k = 0; k < HW; ++k) ga[i * HW + k] += gi;
    }
  });
}

// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  Tape<T>& tape = detail::same_tape<T>({&logits});
  detail::require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  if (B == 0) throw InputError("softmax_cross_entropy: empty batch");
  if (labels.size() != B) {
    throw InputError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(B));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw InputError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(C) + ")");
    }
  }
  // Accumulated in double. The true-class gradient is formed as -sum_{j != y} p_j
  // rather than p_y - 1, which cancels to zero once p_y rounds to one and would
  // leave only the off-class terms.
  const auto& z = logits.value().data;
  auto dz = std::make_shared<std::vector<T>>(B * C);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = z.data() + b * C;
    const auto y = static_cast<std::size_t>(labels[b]);
    const double m = *std::max_element(row, row + C);
    double off = 0.0;
    for (std::size_t j = 0; j < C; ++j)
      if (j != y) off += std::exp(static_cast<double>(row[j]) - m);
    const double ey = std::exp(static_cast<double>(row[y]) - m);
    // -log(ey / (ey + off)), written so that tiny off-class mass survives
    total += ey > 1e-300 ? std::log1p(off / ey) : std::log(ey + off) - (static_cast<double>(row[y]) - m);
    const double denom = ey + off;
    double rest = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      if (j == y) continue;
      const double pj = std::exp(static_cast<double>(row[j]) - m) / denom;
      (*dz)[b * C + j] = static_cast<T>(pj);
      rest += pj;
    }
    (*dz)[b * C + y] = static_cast<T>(-rest);
  }
  const T loss = static_cast<T>(total / static_cast<double>(B));
  const std::size_t il = logits.id();
  return tape.record(Tensor<T>({1}, loss), logits.requires_grad(), [=](Tape<T>& t, std::size_t self) {
    const T g = t.grad_buffer(self)[0] / static_cast<T>(B);
    auto& gl = t.grad_buffer(il);
    for (std::size_t i = 0; i < B * C; ++i) gl[i] += g * (*dz)[i];
  });
}

// Per-sample l_y - max_{j != y} l_j: [B,C] -> [B]. Ties in the max go to the lowest index.
template <typename T>
Var<T> label_margin(const Var<T>& logits, std::span<const int> labels) {
  Tape<T>& tape = detail::same_tape<T>({&logits});
  detail::require_rank(logits, 2, "label_margin", "logits");
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  if (C < 2) throw ConfigError("label_margin: needs at least 2 classes");
  if (labels.size() != B) throw InputError("label_margin: label count != batch size");
  const auto& z = logits.value().data;
  Tensor<T> out({B});
  std::vector<std::size_t> ys(B), other(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= C)
      throw InputError("label_margin: label out of range");
    ys[b] = static_cast<std::size_t>(labels[b]);
    std::size_t best = ys[b] == 0 ? 1 : 0;
    for (std::size_t j = 0; j < C; ++j)
      if (j != ys[b] && z[b * C + j] > z[b * C + best]) best = j;
    other[b] = best;
    out[b] = z[b * C + ys[b]] - z[b * C + best];
  }
  const std::size_t il = logits.id();
  return tape.record(std::move(out), logits.requires_grad(), [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& gl = t.grad_buffer(il);
    for (std::size_t b = 0; b < B; ++b) {
      gl[b * C + ys[b]] += g[b];
      gl[b * C + other[b]] -= g[b];
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial transforms

// Bilinear resize with half-pixel centres: src = (dst + 0.5) * in/out - 0.5, clamped.
template <typename T>
Var<T> bilinear_resize(const Var<T>& a, std::size_t out_h, std::size_t out_w) {
  Tape<T>& tape = detail::same_tape<T>({&a});
  detail::require_rank(a, 4, "bilinear_resize", "input");
  if (out_h < 1 || out_w < 1) {
    throw ConfigError("bilinear_resize: target size must be positive, got " + std::to_string(out_h) +
                      "x" + std::to_string(out_w));
  }
  const Shape& s = a.shape();
  const std::size_t BC = s[0] * s[1], H = s[2], W = s[3];
  if (H == 0 || W == 0) throw ConfigError("bilinear_resize: empty input");
  auto ty = std::make_shared<detail::AxisTaps>(detail::bilinear_taps(H, out_h));
  auto tx = std::make_shared<detail::AxisTaps>(detail::bilinear_taps(W, out_w));

  Tensor<T> out({s[0], s[1], out_h, out_w});
  const auto& x = a.value().data;
  for (std::size_t c = 0; c < BC; ++c) {
    const T* src = x.data() + c * H * W;
    T* dst = out.data.data() + c * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T fy = static_cast<T>(ty->frac[oy]);
      const T* r0 = src + ty->lo[oy] * W;
      const T* r1 = src + ty->hi[oy] * W;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T fx = static_cast<T>(tx->frac[ox]);
        const std::size_t x0 = tx->lo[ox], x1 = tx->hi[ox];
        const T top = r0[x0] + (r0[x1] - r0[x0]) * fx;
        const T bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
        dst[oy * out_w + ox] = top + (bot - top) * fy;
      }
    }
  }
  const std::size_t ia = a.id();
  return tape.record(std::move(out), a.requires_grad(), [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t c = 0; c < BC; ++c) {
      const T* gsrc = g.data() + c * out_h * out_w;
      T* gdst = ga.data() + c * H * W;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const T fy = static_cast<T>(ty->frac[oy]);
        T* r0 = gdst + ty->lo[oy] * W;
        T* r1 = gdst + ty->hi[oy] * W;
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const T fx = static_cast<T>(tx->frac[ox]);
          const std::size_t x0 = tx->lo[ox], x1 = tx->hi[ox];
          const T gv = gsrc[oy * out_w + ox];
          r0[x0] += gv * (T(1) - fy) * (T(1) - fx);
          r0[x1] += gv * (T(1) - fy) * fx;
          r1[x0] += gv * fy * (T(1) - fx);
          r1[x1] += gv * fy * fx;
        }
      }
    }
  });
}

struct Padding {
  std::size_t top = 0, bottom = 0, left = 0, right = 0;
};

// Constant-fill padding on the two trailing axes. Margin gradients are discarded.
template <typename T>
Var<T> pad2d(const Var<T>& a, Padding pad, T fill = T(0)) {
  Tape<T>& tape = detail::same_tape<T>({&a});
  detail::require_rank(a, 4, "pad2d", "input");
  const Shape& s = a.shape();
  const std::size_t BC = s[0] * s[1], H = s[2], W = s[3];
  const std::size_t Ho = H + pad.top + pad.bottom, Wo = W + pad.left + pad.right;
  Tensor<T> out({s[0], s[1], Ho, Wo}, fill);
  const auto& x = a.value().data;
  for (std::size_t c = 0; c < BC; ++c)
    for (std::size_t y = 0; y < H; ++y)
      std::copy_n(x.data() + (c * H + y) * W, W, out.data.data() + (c * Ho + y + pad.top) * Wo + pad.left);
  const std::size_t ia = a.id();
  return tape.record(std::move(out), a.requires_grad(), [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t c = 0; c < BC; ++c)
      for (std::size_t y = 0; y < H; ++y) {
        const T* src = g.data() + (c * Ho + y + pad.top) * Wo + pad.left;
        T* dst = ga.data() + (c * H + y) * W;
        for (std::size_t xx = 0; xx < W; ++xx) dst[xx] += src[xx];
      }
  });
}

// Signed-margin overload; negative margins are a configuration error.
template <typename T>
Var<T> pad2d(const Var<T>& a, long top, long bottom, long left, long right, T fill = T(0)) {
  if (top < 0 || bottom < 0 || left < 0 || right < 0) {
    throw ConfigError("pad2d: negative margin (" + std::to_string(top) + "," + std::to_string(bottom) +
                      "," + std::to_string(left) + "," + std::to_string(right) + ")");
  }
  return pad2d(a,
               Padding{static_cast<std::size_t>(top), static_cast<std::size_t>(bottom),
                       static_cast<std::size_t>(left), static_cast<std::size_t>(right)},
               fill);
}

}  // namespace dvat::ops
