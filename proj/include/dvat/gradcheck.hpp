#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "dvat/autograd.hpp"
#include "dvat/error.hpp"
#include "dvat/rng.hpp"
#include "dvat/tensor.hpp"

namespace dvat {

// Builds a scalar graph from its input leaf. Must be deterministic: any random
// choices (transform instances) have to be frozen before the check runs.
template <typename T>
using ScalarGraph = std::function<Var<T>(Tape<T>&, const Var<T>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
};

// Central differences on up to `max_coords` coordinates of `x` (all of them when x
// is smaller), compared with the backward gradient. Relative error uses the
// denominator max(|analytic|, |numeric|, 1e-8).
template <typename T>
GradCheckResult finite_diff_check(const ScalarGraph<T>& f, const Tensor<T>& x, T h,
                                  std::size_t max_coords = 20, std::uint64_t seed = 0) {
  if (!(h > T(0))) throw ConfigError("finite_diff_check: step h must be positive");

  Tensor<T> analytic;
  {
    Tape<T> tape;
    Var<T> leaf = tape.leaf(x, true);
    Var<T> root = f(tape, leaf);
    tape.backward(root);
    analytic = leaf.grad();
  }

  const auto eval = [&](const Tensor<T>& at) {
    Tape<T> tape;
    Var<T> root = f(tape, tape.leaf(at, false));
    if (root.value().size() != 1) throw AutogradError("finite_diff_check: graph is not scalar");
    return static_cast<double>(root.value()[0]);
  };

  std::vector<std::size_t> coords(x.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (coords.size() > max_coords) {
    Rng rng(seed);
    for (std::size_t i = 0; i < max_coords; ++i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                              static_cast<std::int64_t>(coords.size() - 1)));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(max_coords);
  }

  GradCheckResult result;
  Tensor<T> probe = x;
  for (std::size_t i : coords) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const double up = eval(probe);
    probe[i] = orig - h;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * static_cast<double>(h));
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (result.coords_checked == 0 || rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
    }
    ++result.coords_checked;
  }
  return result;
}

}  // namespace dvat
