#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dvat/autograd.hpp"
#include "dvat/checkpoint.hpp"
#include "dvat/container.hpp"
#include "dvat/error.hpp"
#include "dvat/network.hpp"
#include "dvat/ops.hpp"
#include "dvat/rng.hpp"
#include "dvat/tensor.hpp"
#include "dvat/transforms.hpp"

namespace dvat {

enum class Variant { kFgsm, kIfgsm, kMifgsm, kDi2, kMdi2, kCw, kDcw };

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kFgsm: return "fgsm";
    case Variant::kIfgsm: return "ifgsm";
    case Variant::kMifgsm: return "mifgsm";
    case Variant::kDi2: return "di2";
    case Variant::kMdi2: return "mdi2";
    case Variant::kCw: return "cw";
    case Variant::kDcw: return "dcw";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::kFgsm, Variant::kIfgsm, Variant::kMifgsm, Variant::kDi2, Variant::kMdi2, Variant::kCw,
                    Variant::kDcw})
    if (variant_name(v) == s) return v;
  throw ConfigError("unknown attack variant '" + std::string(s) + "'");
}

inline bool uses_diversity(Variant v) { return v == Variant::kDi2 || v == Variant::kMdi2 || v == Variant::kDcw; }
inline bool uses_momentum(Variant v) { return v == Variant::kMifgsm || v == Variant::kMdi2; }
inline bool is_sign_method(Variant v) { return v != Variant::kCw && v != Variant::kDcw; }

// Hyperparameters of the sign-gradient family. epsilon and alpha are in [0,1]
// pixel units.
struct AttackConfig {
  double epsilon = 0.1;
  double alpha = 0.01;
  std::size_t iterations = 10;
  double mu = 1.0;
  DiversityConfig diversity;
  Variant variant = Variant::kIfgsm;
  std::uint64_t seed = 0;
};

// Iteration rule N = min(eps + 4, 1.25 eps) with eps on the 0..255 scale,
// truncated to an integer.
inline std::size_t iterations_for_eps255(double eps255) {
  return static_cast<std::size_t>(std::max(1.0, std::floor(std::min(eps255 + 4.0, 1.25 * eps255))));
}

// fgsm is the single full-budget step: N = 1, alpha = epsilon.
inline AttackConfig normalized(AttackConfig cfg) {
  if (cfg.variant == Variant::kFgsm) {
    cfg.iterations = 1;
    cfg.alpha = cfg.epsilon;
  }
  return cfg;
}

inline void validate(const AttackConfig& cfg) {
  if (!(cfg.epsilon >= 0.0) || !std::isfinite(cfg.epsilon)) throw ConfigError("attack: epsilon must be >= 0");
  if (cfg.variant != Variant::kFgsm && !(cfg.alpha > 0.0)) throw ConfigError("attack: alpha must be > 0");
  if (cfg.iterations < 1) throw ConfigError("attack: iterations must be >= 1");
  if (!(cfg.mu >= 0.0)) throw ConfigError("attack: mu must be >= 0");
  if (cfg.variant == Variant::kFgsm && (cfg.iterations != 1 || cfg.alpha != cfg.epsilon))
    throw ConfigError("attack: fgsm requires iterations = 1 and alpha = epsilon");
  validate(cfg.diversity);
}

inline std::string fingerprint(const AttackConfig& cfg) {
  std::ostringstream os;
  os << "variant=" << variant_name(cfg.variant) << " eps=" << format_real(cfg.epsilon)
     << " alpha=" << format_real(cfg.alpha) << " N=" << cfg.iterations << " mu=" << format_real(cfg.mu)
     << " p=" << format_real(cfg.diversity.p) << " r=" << cfg.diversity.r_low << "-" << cfg.diversity.r_high
     << " seed=" << cfg.seed;
  return os.str();
}

// ---------------------------------------------------------------------------
// Models and ensembles

template <typename T>
struct EnsembleMember {
  const Model<T>* model = nullptr;
  double weight = 1.0;
};

// Weighted logit fusion sum_k w_k l_k(x). A single model is an ensemble of one.
template <typename T>
struct Ensemble {
  std::string id;
  std::vector<EnsembleMember<T>> members;

  static Ensemble single(const Model<T>& m) { return Ensemble{m.spec.id, {{&m, 1.0}}}; }

  // Equal weights 1/K.
  static Ensemble uniform(std::string id, std::span<const Model<T>* const> models) {
    Ensemble e{std::move(id), {}};
    for (const Model<T>* m : models) e.members.push_back({m, 1.0 / static_cast<double>(models.size())});
    return e;
  }

  std::size_t num_classes() const { return members.at(0).model->spec.num_classes; }

  bool contains(const std::string& model_id) const {
    return std::any_of(members.begin(), members.end(),
                       [&](const EnsembleMember<T>& m) { return m.model->spec.id == model_id; });
  }
};

template <typename T>
void validate(const Ensemble<T>& e) {
  if (e.members.empty()) throw ConfigError("ensemble '" + e.id + "' has no members");
  double total = 0.0;
  for (const auto& m : e.members) {
    if (!m.model) throw ConfigError("ensemble '" + e.id + "' has a null member");
    if (!(m.weight >= 0.0)) throw ConfigError("ensemble '" + e.id + "': negative weight");
    if (m.model->spec.num_classes != e.num_classes())
      throw ConfigError("ensemble '" + e.id + "': members disagree on class count");
    if (m.model->spec.channels != e.members[0].model->spec.channels)
      throw ConfigError("ensemble '" + e.id + "': members disagree on channel count");
    total += m.weight;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("ensemble '" + e.id + "': weights sum to " + format_real(total) + ", expected 1");
}

template <typename T>
Var<T> fused_logits(const Ensemble<T>& e, Tape<T>& tape, const Var<T>& x) {
  Var<T> acc;
  for (const auto& m : e.members) {
    Var<T> z = ops::scale(forward(*m.model, tape, x), static_cast<T>(m.weight));
    acc = acc.attached() ? ops::add(acc, z) : z;
  }
  return acc;
}

template <typename T>
Tensor<T> fused_logits(const Ensemble<T>& e, const Tensor<T>& x, std::size_t chunk = 256) {
  validate(e);
  const std::size_t B = x.shape.at(0), C = e.num_classes();
  Tensor<T> out({B, C});
  for (std::size_t first = 0; first < B; first += chunk) {
    const std::size_t n = std::min(chunk, B - first);
    Tape<T> tape;
    Var<T> z = fused_logits(e, tape, tape.leaf(x.slice_batch(first, n)));
    std::copy(z.value().data.begin(), z.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(first * C));
  }
  return out;
}

template <typename T>
std::vector<int> predict(const Ensemble<T>& e, const Tensor<T>& x) {
  return argmax_rows(fused_logits(e, x));
}

// ---------------------------------------------------------------------------
// Elementwise helpers (outside the tape)

template <typename T>
T sign(T v) {
  return static_cast<T>((T(0) < v) - (v < T(0)));
}

// min(max(candidate, orig - eps, 0), orig + eps, 1): the eps-ball around orig
// intersected with the valid pixel range.
template <typename T>
Tensor<T> clip_eps_ball(const Tensor<T>& candidate, const Tensor<T>& orig, double epsilon) {
  if (candidate.shape != orig.shape) throw ConfigError("clip_eps_ball: shape mismatch");
  Tensor<T> out = candidate;
  const T eps = static_cast<T>(epsilon);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T lo = std::max(orig[i] - eps, T(0));
    const T hi = std::min(orig[i] + eps, T(1));
    out[i] = std::min(std::max(out[i], lo), hi);
  }
  return out;
}

template <typename T>
double linf_distance(const Tensor<T>& a, const Tensor<T>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    d = std::max(d, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return d;
}

template <typename T>
double l2_distance(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Attack results

template <typename T>
struct AdvExample {
  Tensor<T> original;
  Tensor<T> adversarial;
  std::vector<int> labels;  // one per sample of the batch
  std::string config;       // fingerprint of the producing configuration
  std::vector<double> loss_trace;

  friend bool operator==(const AdvExample&, const AdvExample&) = default;
};

// Reported after every update of a sign-method attack.
template <typename T>
struct IterationInfo {
  std::size_t iteration = 0;
  const Tensor<T>* x_adv = nullptr;
  // L1 norm of gradient / ||gradient||_1 per sample, when momentum is active.
  std::vector<double> contribution_l1;
  std::vector<bool> gradient_nonzero;
};

template <typename T>
using IterationObserver = std::function<void(const IterationInfo<T>&)>;

namespace detail {

template <typename T>
void check_model_fits(const Ensemble<T>& e, const Shape& x_shape, const AttackConfig& cfg) {
  for (const auto& m : e.members) {
    const NetworkSpec& s = m.model->spec;
    if (x_shape.size() != 4 || x_shape[1] != s.channels)
      throw ConfigError("attack: model " + s.id + " does not accept input " + shape_str(x_shape));
    if (feature_map_size(s, x_shape[2], x_shape[3]).first == 0)
      throw ConfigError("attack: input " + shape_str(x_shape) + " too small for model " + s.id);
    if (uses_diversity(cfg.variant) &&
        feature_map_size(s, cfg.diversity.r_high, cfg.diversity.r_high).first == 0)
      throw ConfigError("attack: transformed size too small for model " + s.id);
  }
}

}  // namespace detail

// Sign-gradient attack family on one batch (normally one image). Loss is
// maximized by ascent along sign(direction); each step is clipped jointly to the
// eps-ball and [0,1]. `rng` supplies transform draws for the diversity variants.
template <typename T>
AdvExample<T> attack(const Ensemble<T>& ens, const Tensor<T>& x, std::span<const int> labels, AttackConfig cfg,
                     Rng& rng, const IterationObserver<T>& observer = nullptr) {
  cfg = normalized(cfg);
  validate(cfg);
  validate(ens);
  if (!is_sign_method(cfg.variant)) throw ConfigError("attack: use cw_attack for the C&W variants");
  detail::check_model_fits(ens, x.shape, cfg);
  for (float v : x.data)
    if (!(v >= 0 && v <= 1)) throw InputError("attack: input pixel outside [0,1]");

  const std::size_t B = x.shape[0], per = x.size() / B;
  const bool diverse = uses_diversity(cfg.variant);
  const bool momentum = uses_momentum(cfg.variant);
  const T alpha = static_cast<T>(cfg.alpha);

  AdvExample<T> result;
  result.original = x;
  result.labels.assign(labels.begin(), labels.end());
  result.config = fingerprint(cfg);

  Tensor<T> x_adv = x;
  std::vector<double> g(momentum ? x.size() : 0, 0.0);
  IterationInfo<T> info;
  for (std::size_t n = 0; n < cfg.iterations; ++n) {
    Tensor<T> grad;
    {
      Tape<T> tape;
      Var<T> xv = tape.leaf(x_adv, true);
      Var<T> input = xv;
      if (diverse) input = apply_transform(xv, sample_transform(cfg.diversity, rng), cfg.diversity);
      Var<T> loss = ops::softmax_cross_entropy(fused_logits(ens, tape, input), labels);
      const double lv = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(lv)) throw AttackError("attack: non-finite loss at iteration " + std::to_string(n));
      result.loss_trace.push_back(lv);
      tape.backward(loss);
      grad = xv.grad();
    }

    info.contribution_l1.assign(B, std::numeric_limits<double>::quiet_NaN());
    info.gradient_nonzero.assign(B, false);
    Tensor<T> step = x_adv;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t off = b * per;
      double l1 = 0.0;
      for (std::size_t i = 0; i < per; ++i) l1 += std::abs(static_cast<double>(grad[off + i]));
      info.gradient_nonzero[b] = l1 > 0.0;
      if (momentum) {
        // Exact L1 normalization even for vanishing gradients; a zero gradient
        // contributes nothing.
        double contrib = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
          const double c = l1 > 0.0 ? static_cast<double>(grad[off + i]) / l1 : 0.0;
          contrib += std::abs(c);
          g[off + i] = cfg.mu * g[off + i] + c;
          step[off + i] += alpha * static_cast<T>(sign(g[off + i]));
        }
        info.contribution_l1[b] = contrib;
      } else {
        for (std::size_t i = 0; i < per; ++i) step[off + i] += alpha * sign(grad[off + i]);
      }
    }
    x_adv = clip_eps_ball(step, x, cfg.epsilon);

    for (std::size_t i = 0; i < x_adv.size(); ++i) {
      if (!(x_adv[i] >= T(0) && x_adv[i] <= T(1)) ||
          std::abs(static_cast<double>(x_adv[i]) - static_cast<double>(x[i])) > cfg.epsilon + 1e-6)
        throw InternalError("attack: iterate left the feasible set at iteration " + std::to_string(n));
    }
    if (observer) {
      info.iteration = n;
      info.x_adv = &x_adv;
      observer(info);
    }
  }
  result.adversarial = std::move(x_adv);
  return result;
}

// Convenience overload with the per-job stream derived from (cfg.seed, job_index).
template <typename T>
AdvExample<T> attack(const Ensemble<T>& ens, const Tensor<T>& x, std::span<const int> labels,
                     const AttackConfig& cfg, std::uint64_t job_index = 0,
                     const IterationObserver<T>& observer = nullptr) {
  Rng rng(stream_seed(cfg.seed, job_index));
  return attack(ens, x, labels, cfg, rng, observer);
}

// Batched single-step FGSM without bookkeeping; used for adversarial training.
template <typename T>
Tensor<T> fgsm_batch(const Model<T>& model, const Tensor<T>& x, std::span<const int> labels, double epsilon) {
  Tape<T> tape;
  Var<T> xv = tape.leaf(x, true);
  Var<T> loss = ops::softmax_cross_entropy(forward(model, tape, xv), labels);
  tape.backward(loss);
  const Tensor<T> grad = xv.grad();
  Tensor<T> step = x;
  const T eps = static_cast<T>(epsilon);
  for (std::size_t i = 0; i < step.size(); ++i) step[i] += eps * sign(grad[i]);
  return clip_eps_ball(step, x, epsilon);
}

// ---------------------------------------------------------------------------
// C&W L2 with a fixed trade-off constant

struct CwConfig {
  std::size_t iterations = 250;
  double learning_rate = 0.01;
  double confidence = 10.0;
  double c = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
};

inline void validate(const CwConfig& cw) {
  if (cw.iterations < 1) throw ConfigError("cw: iterations must be >= 1");
  if (!(cw.confidence >= 0.0)) throw ConfigError("cw: confidence must be >= 0");
  if (!(cw.c > 0.0)) throw ConfigError("cw: trade-off constant c must be > 0");
  if (!(cw.learning_rate > 0.0)) throw ConfigError("cw: learning rate must be > 0");
}

inline std::string fingerprint(const CwConfig& cw, const std::optional<DiversityConfig>& div, std::uint64_t seed) {
  std::ostringstream os;
  os << "variant=" << (div ? "dcw" : "cw") << " iters=" << cw.iterations << " lr=" << format_real(cw.learning_rate)
     << " kappa=" << format_real(cw.confidence) << " c=" << format_real(cw.c);
  if (div) os << " p=" << format_real(div->p) << " r=" << div->r_low << "-" << div->r_high;
  os << " seed=" << seed;
  return os.str();
}

// Minimizes ||x' - x||^2 + c * max(l_y(x') - max_{j!=y} l_j(x') + kappa, 0) over
// x' = (tanh(w) + 1) / 2 with Adam. With `diversity`, logits are taken on a freshly
// sampled transform of x' each iteration. Returns the iterate with the lowest
// objective seen.
template <typename T>
AdvExample<T> cw_attack(const Ensemble<T>& ens, const Tensor<T>& x, std::span<const int> labels, const CwConfig& cw,
                        const std::optional<DiversityConfig>& diversity, Rng& rng, std::uint64_t seed = 0) {
  validate(cw);
  validate(ens);
  if (diversity) validate(*diversity);
  AttackConfig fit;
  fit.variant = diversity ? Variant::kDcw : Variant::kCw;
  if (diversity) fit.diversity = *diversity;
  detail::check_model_fits(ens, x.shape, fit);
  for (float v : x.data)
    if (!(v >= 0 && v <= 1)) throw InputError("cw_attack: input pixel outside [0,1]");

  AdvExample<T> result;
  result.original = x;
  result.labels.assign(labels.begin(), labels.end());
  result.config = fingerprint(cw, diversity, seed);

  const double inward = 1e-6;
  Tensor<T> w = x;
  for (auto& v : w.data) {
    const double xc = std::clamp(static_cast<double>(v), inward, 1.0 - inward);
    v = static_cast<T>(std::atanh(2.0 * xc - 1.0));
  }
  std::vector<double> m(w.size(), 0.0), s(w.size(), 0.0);
  double b1t = 1.0, b2t = 1.0;
  double best = std::numeric_limits<double>::infinity();
  Tensor<T> best_x;

  for (std::size_t n = 0; n < cw.iterations; ++n) {
    Tensor<T> grad;
    {
      Tape<T> tape;
      Var<T> wv = tape.leaf(w, true);
      Var<T> xp = ops::scale(ops::add_scalar(ops::tanh(wv), T(1)), T(0.5));
      Var<T> diff = ops::sub(xp, tape.constant(x));
      Var<T> dist = ops::sum(ops::mul(diff, diff));
      Var<T> input = xp;
      if (diversity) input = apply_transform(xp, sample_transform(*diversity, rng), *diversity);
      Var<T> margin = ops::label_margin(fused_logits(ens, tape, input), labels);
      Var<T> hinge = ops::sum(ops::relu(ops::add_scalar(margin, static_cast<T>(cw.confidence))));
      Var<T> objective = ops::add(dist, ops::scale(hinge, static_cast<T>(cw.c)));
      const double ov = static_cast<double>(objective.value()[0]);
      if (!std::isfinite(ov)) throw AttackError("cw_attack: non-finite objective at iteration " + std::to_string(n));
      result.loss_trace.push_back(ov);
      if (ov < best) {
        best = ov;
        best_x = xp.value();
      }
      tape.backward(objective);
      grad = wv.grad();
    }
    b1t *= cw.beta1;
    b2t *= cw.beta2;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(grad[i]);
      m[i] = cw.beta1 * m[i] + (1.0 - cw.beta1) * gi;
      s[i] = cw.beta2 * s[i] + (1.0 - cw.beta2) * gi * gi;
      const double mhat = m[i] / (1.0 - b1t), shat = s[i] / (1.0 - b2t);
      w[i] -= static_cast<T>(cw.learning_rate * mhat / (std::sqrt(shat) + cw.adam_epsilon));
    }
  }
  for (auto& v : best_x.data) v = std::clamp(v, T(0), T(1));
  result.adversarial = std::move(best_x);
  return result;
}

template <typename T>
AdvExample<T> cw_attack(const Ensemble<T>& ens, const Tensor<T>& x, std::span<const int> labels, const CwConfig& cw,
                        const std::optional<DiversityConfig>& diversity, std::uint64_t seed, std::uint64_t job_index) {
  Rng rng(stream_seed(seed, job_index));
  return cw_attack(ens, x, labels, cw, diversity, rng, seed);
}

// ---------------------------------------------------------------------------
// Persistence of adversarial batches (same container as checkpoints)

struct AdvBatch {
  std::string config;
  std::uint64_t seed = 0;
  std::vector<AdvExample<float>> examples;

  friend bool operator==(const AdvBatch&, const AdvBatch&) = default;
};

inline Container to_container(const AdvBatch& batch) {
  Container c;
  std::ostringstream os;
  os << "kind advexamples\n";
  os << "config " << batch.config << "\n";
  os << "seed " << batch.seed << "\n";
  os << "count " << batch.examples.size() << "\n";
  for (std::size_t i = 0; i < batch.examples.size(); ++i) {
    const auto& ex = batch.examples[i];
    os << "example " << i << " config " << ex.config << "\n";
    os << "labels " << i;
    for (int y : ex.labels) os << ' ' << y;
    os << "\ntrace " << i;
    for (double v : ex.loss_trace) os << ' ' << format_real(v);
    os << "\n";
    c.tensors.push_back({"orig/" + std::to_string(i), ex.original});
    c.tensors.push_back({"adv/" + std::to_string(i), ex.adversarial});
  }
  c.text = os.str();
  return c;
}

inline AdvBatch adv_batch_from_container(const Container& c) {
  using K = FormatError::Kind;
  AdvBatch batch;
  std::istringstream in(c.text);
  std::string line;
  std::size_t count = 0;
  bool kind_ok = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "kind") {
      std::string v;
      ls >> v;
      kind_ok = v == "advexamples";
    } else if (key == "config") {
      batch.config = line.substr(7);
    } else if (key == "seed") {
      ls >> batch.seed;
    } else if (key == "count") {
      ls >> count;
      batch.examples.resize(count);
    } else if (key == "example" || key == "labels" || key == "trace") {
      std::size_t i = 0;
      ls >> i;
      if (i >= batch.examples.size()) throw FormatError(K::kMalformed, "adv manifest: example index out of range");
      auto& ex = batch.examples[i];
      if (key == "example") {
        std::string tag;
        ls >> tag;
        std::getline(ls, ex.config);
        if (!ex.config.empty() && ex.config.front() == ' ') ex.config.erase(0, 1);
      } else if (key == "labels") {
        int y;
        while (ls >> y) ex.labels.push_back(y);
      } else {
        std::string v;
        while (ls >> v) ex.loss_trace.push_back(parse_real(v));
      }
    } else if (!key.empty()) {
      throw FormatError(K::kMalformed, "adv manifest: unknown line '" + line + "'");
    }
  }
  if (!kind_ok) throw FormatError(K::kMalformed, "container is not an adversarial-example batch");
  if (c.tensors.size() != 2 * count) throw FormatError(K::kNameMismatch, "adv batch: tensor count != 2 x count");
  for (std::size_t i = 0; i < count; ++i) {
    const auto& o = c.tensors[2 * i];
    const auto& a = c.tensors[2 * i + 1];
    if (o.name != "orig/" + std::to_string(i) || a.name != "adv/" + std::to_string(i))
      throw FormatError(K::kNameMismatch, "adv batch: unexpected tensor names at example " + std::to_string(i));
    if (o.value.shape != a.value.shape)
      throw FormatError(K::kShapeMismatch, "adv batch: orig/adv shapes differ at example " + std::to_string(i));
    batch.examples[i].original = o.value;
    batch.examples[i].adversarial = a.value;
  }
  return batch;
}

inline void save_adv_batch(const AdvBatch& batch, const std::filesystem::path& path) {
  save_container(to_container(batch), path);
}

inline AdvBatch load_adv_batch(const std::filesystem::path& path) {
  return adv_batch_from_container(load_container(path));
}

}  // namespace dvat
