#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dvat/attacks.hpp"
#include "dvat/checkpoint.hpp"
#include "dvat/data.hpp"
#include "dvat/error.hpp"
#include "dvat/parallel.hpp"
#include "dvat/rng.hpp"
#include "dvat/train.hpp"

namespace dvat {

// ---------------------------------------------------------------------------
// Evaluation sets

// Images every filtering model classifies correctly, in dataset order.
struct EvalSet {
  Tensor<float> images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;        // positions in the source dataset
  std::vector<std::string> fingerprints;   // of the filtering models

  std::size_t size() const { return labels.size(); }
  Tensor<float> image(std::size_t i) const { return images.slice_batch(i, 1); }
};

// Keeps images predicted correctly by every model. `limit` > 0 truncates to the
// first `limit` survivors.
inline EvalSet filter_correct(const Dataset& ds, std::span<const Checkpoint* const> models, std::size_t limit = 0) {
  if (models.empty()) throw ConfigError("filter_correct: no models given");
  std::vector<char> keep(ds.size(), 1);
  EvalSet ev;
  for (const Checkpoint* m : models) {
    const auto pred = predict(m->model, ds.images);
    for (std::size_t i = 0; i < ds.size(); ++i) keep[i] &= pred[i] == ds.labels[i];
    ev.fingerprints.push_back(fingerprint(*m));
  }
  for (std::size_t i = 0; i < ds.size() && (limit == 0 || ev.indices.size() < limit); ++i)
    if (keep[i]) ev.indices.push_back(i);
  if (ev.indices.empty()) throw ProtocolError("empty eval set: no image is classified correctly by every model");
  ev.images = gather_batch(ds.images, ev.indices);
  for (std::size_t i : ev.indices) ev.labels.push_back(ds.labels[i]);
  return ev;
}

inline std::size_t count_fooled(const Model<float>& target, const Tensor<float>& adversarial,
                                std::span<const int> labels) {
  const auto pred = predict(target, adversarial);
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) n += pred[i] != labels[i];
  return n;
}

// Fraction of adversarial examples the target misclassifies.
inline double success_rate(const AdvBatch& batch, const Checkpoint& target) {
  std::size_t fooled = 0, total = 0;
  for (const auto& ex : batch.examples) {
    fooled += count_fooled(target.model, ex.adversarial, ex.labels);
    total += ex.labels.size();
  }
  if (total == 0) throw InputError("success_rate: empty batch");
  return static_cast<double>(fooled) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Attack sources and transfer matrices

// A model or ensemble to craft on. Members are the ids counted as white-box.
struct Source {
  std::string id;
  Ensemble<float> ensemble;
  std::vector<std::string> members;
};

inline Source single_source(const Checkpoint& cp) {
  return Source{cp.id(), Ensemble<float>::single(cp.model), {cp.id()}};
}

inline Source ensemble_source(std::string id, std::span<const Checkpoint* const> models,
                              std::span<const double> weights = {}) {
  if (models.empty()) throw ConfigError("ensemble '" + id + "' has no members");
  if (!weights.empty() && weights.size() != models.size())
    throw ConfigError("ensemble '" + id + "': " + std::to_string(weights.size()) + " weights for " +
                      std::to_string(models.size()) + " models");
  Source s;
  s.id = std::move(id);
  s.ensemble.id = s.id;
  for (std::size_t k = 0; k < models.size(); ++k) {
    const double w = weights.empty() ? 1.0 / static_cast<double>(models.size()) : weights[k];
    s.ensemble.members.push_back({&models[k]->model, w});
    s.members.push_back(models[k]->id());
  }
  validate(s.ensemble);
  return s;
}

// Everything needed to craft one set of adversarial examples.
struct AttackPlan {
  AttackConfig attack;
  CwConfig cw;  // used by the cw and dcw variants
};

inline bool is_cw(const AttackPlan& plan) { return !is_sign_method(plan.attack.variant); }

struct RunOptions {
  std::size_t workers = 1;
};

// Printed configuration columns of a report row. Kept as text so symbolic values
// (the randomized-epsilon label, C&W's missing momentum) round-trip unchanged.
struct RunLabels {
  std::string variant, eps, alpha, iterations, mu, p, seed;
  friend bool operator==(const RunLabels&, const RunLabels&) = default;
};

inline RunLabels run_labels(const AttackPlan& plan) {
  const AttackConfig& a = plan.attack;
  RunLabels l;
  l.variant = variant_name(a.variant);
  l.seed = std::to_string(a.seed);
  l.p = uses_diversity(a.variant) ? format_real(a.diversity.p) : "0";
  if (is_cw(plan)) {
    l.eps = "l2";
    l.alpha = format_real(plan.cw.learning_rate);
    l.iterations = std::to_string(plan.cw.iterations);
    l.mu = "-";
  } else {
    l.eps = format_real(a.epsilon);
    l.alpha = format_real(a.alpha);
    l.iterations = std::to_string(a.iterations);
    l.mu = uses_momentum(a.variant) ? format_real(a.mu) : "0";
  }
  return l;
}

struct TransferCell {
  std::string source, target;
  std::size_t fooled = 0, n = 0;
  bool whitebox = false;

  double rate() const { return n == 0 ? 0.0 : static_cast<double>(fooled) / static_cast<double>(n); }
  friend bool operator==(const TransferCell&, const TransferCell&) = default;
};

struct TransferMatrix {
  std::vector<std::string> sources, targets;
  std::vector<TransferCell> cells;  // row-major, sources x targets
  AttackPlan plan;
  RunLabels labels;

  const TransferCell& at(std::size_t s, std::size_t t) const { return cells.at(s * targets.size() + t); }

  // Mean rate over white-box or black-box cells; NaN when there are none.
  double mean_rate(bool whitebox) const {
    double sum = 0.0;
    std::size_t k = 0;
    for (const auto& c : cells)
      if (c.whitebox == whitebox) {
        sum += c.rate();
        ++k;
      }
    return k == 0 ? std::nan("") : sum / static_cast<double>(k);
  }
};

// Per-image adversarial examples, one job per image with its own RNG stream, so
// results do not depend on the worker count.
inline Tensor<float> craft(const Source& src, const EvalSet& ev, const AttackPlan& plan, const RunOptions& opt) {
  Tensor<float> out(ev.images.shape);
  const std::size_t per = ev.images.size() / std::max<std::size_t>(ev.size(), 1);
  const std::optional<DiversityConfig> div =
      plan.attack.variant == Variant::kDcw ? std::optional(plan.attack.diversity) : std::nullopt;
  parallel_for(ev.size(), opt.workers, [&](std::size_t i) {
    const Tensor<float> x = ev.image(i);
    const std::span<const int> y(&ev.labels[i], 1);
    const AdvExample<float> ex = is_cw(plan) ? cw_attack(src.ensemble, x, y, plan.cw, div, plan.attack.seed, i)
                                             : attack(src.ensemble, x, y, plan.attack, i);
    std::copy(ex.adversarial.data.begin(), ex.adversarial.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  });
  return out;
}

inline void check_filtered(const EvalSet& ev, std::span<const Checkpoint* const> targets) {
  for (const Checkpoint* t : targets) {
    const std::string fp = fingerprint(*t);
    if (std::find(ev.fingerprints.begin(), ev.fingerprints.end(), fp) == ev.fingerprints.end())
      throw ProtocolError("eval set was not filtered through target " + fp);
  }
}

// Crafts once per source and scores the result on every target. Cells whose
// target is a member of the source are flagged white-box.
inline TransferMatrix transfer_matrix(std::span<const Source> sources, std::span<const Checkpoint* const> targets,
                                      const EvalSet& ev, const AttackPlan& plan, const RunOptions& opt = {}) {
  if (sources.empty() || targets.empty()) throw ConfigError("transfer_matrix: need at least one source and target");
  check_filtered(ev, targets);
  TransferMatrix m;
  m.plan = plan;
  m.plan.attack = normalized(plan.attack);
  m.labels = run_labels(m.plan);
  for (const Checkpoint* t : targets) m.targets.push_back(t->id());
  for (const Source& s : sources) {
    m.sources.push_back(s.id);
    const Tensor<float> adv = craft(s, ev, m.plan, opt);
    for (const Checkpoint* t : targets) {
      TransferCell c;
      c.source = s.id;
      c.target = t->id();
      c.n = ev.size();
      c.fooled = count_fooled(t->model, adv, ev.labels);
      c.whitebox = std::find(s.members.begin(), s.members.end(), t->id()) != s.members.end();
      m.cells.push_back(std::move(c));
    }
  }
  return m;
}

// Leave-one-out ensembles: row k attacks the equal-weight ensemble of every model
// but k. The held-out column is the black-box cell of that row.
inline std::vector<Source> holdout_sources(std::span<const Checkpoint* const> models) {
  if (models.size() < 2) throw ConfigError("hold-out protocol needs at least two models");
  std::vector<Source> out;
  for (std::size_t k = 0; k < models.size(); ++k) {
    std::vector<const Checkpoint*> rest;
    for (std::size_t j = 0; j < models.size(); ++j)
      if (j != k) rest.push_back(models[j]);
    Source s = ensemble_source("-" + models[k]->id(), rest);
    if (std::find(s.members.begin(), s.members.end(), models[k]->id()) != s.members.end())
      throw InternalError("hold-out ensemble contains its held-out model " + models[k]->id());
    out.push_back(std::move(s));
  }
  return out;
}

inline TransferMatrix holdout_matrix(std::span<const Checkpoint* const> models, const EvalSet& ev,
                                     const AttackPlan& plan, const RunOptions& opt = {}) {
  const auto sources = holdout_sources(models);
  return transfer_matrix(sources, models, ev, plan, opt);
}

// Mean hold-out success: the black-box cells of a hold-out matrix.
inline double holdout_rate(const TransferMatrix& m) { return m.mean_rate(false); }

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepParam { kP, kIterations, kAlpha };

inline SweepParam parse_sweep_param(std::string_view s) {
  if (s == "p") return SweepParam::kP;
  if (s == "N" || s == "iters") return SweepParam::kIterations;
  if (s == "alpha") return SweepParam::kAlpha;
  throw ConfigError("unknown sweep parameter '" + std::string(s) + "' (expected p, N or alpha)");
}

// Config for one sweep point. Sweeping alpha sets N = floor(eps / alpha).
inline AttackPlan sweep_point(const AttackPlan& base, SweepParam param, double value) {
  AttackPlan p = base;
  switch (param) {
    case SweepParam::kP:
      p.attack.diversity.p = value;
      break;
    case SweepParam::kIterations:
      if (!(value >= 1) || value != std::floor(value)) throw ConfigError("sweep: N values must be positive integers");
      p.attack.iterations = static_cast<std::size_t>(value);
      break;
    case SweepParam::kAlpha:
      if (!(value > 0)) throw ConfigError("sweep: alpha values must be > 0");
      p.attack.alpha = value;
      p.attack.iterations = static_cast<std::size_t>(std::floor(p.attack.epsilon / value + 1e-9));
      if (p.attack.iterations < 1)
        throw ConfigError("sweep: alpha " + format_real(value) + " exceeds epsilon, N would be 0");
      break;
  }
  return p;
}

inline std::vector<TransferMatrix> sweep(SweepParam param, std::span<const double> values, const AttackPlan& base,
                                         std::span<const Source> sources,
                                         std::span<const Checkpoint* const> targets, const EvalSet& ev,
                                         const RunOptions& opt = {}) {
  if (values.empty()) throw ConfigError("sweep: no values given");
  std::vector<TransferMatrix> out;
  for (double v : values) out.push_back(transfer_matrix(sources, targets, ev, sweep_point(base, param, v), opt));
  return out;
}

// ---------------------------------------------------------------------------
// Randomized-epsilon competition protocol

inline AttackConfig nips_base() {
  AttackConfig c;
  c.diversity.p = 0.4;
  return c;
}

struct NipsRunConfig {
  std::size_t batches = 50;
  std::vector<double> eps_choices = {4.0 / 255, 8.0 / 255, 12.0 / 255, 16.0 / 255};
  std::vector<Variant> variants = {Variant::kIfgsm, Variant::kDi2, Variant::kMifgsm, Variant::kMdi2};
  AttackConfig base = nips_base();  // N and mu are forced to 10 and 1
  std::uint64_t seed = 0;
};

inline void validate(const NipsRunConfig& cfg) {
  if (cfg.batches < 1) throw ConfigError("nips: batches must be >= 1");
  if (cfg.eps_choices.empty()) throw ConfigError("nips: eps_choices must be nonempty");
  for (double e : cfg.eps_choices)
    if (!(e > 0 && e <= 1)) throw ConfigError("nips: every eps choice must lie in (0,1]");
  if (cfg.variants.empty()) throw ConfigError("nips: no variants given");
  for (Variant v : cfg.variants)
    if (!is_sign_method(v)) throw ConfigError("nips: only sign-method variants are supported");
}

// Per-batch epsilon draws, reproducible from the seed alone.
inline std::vector<double> nips_eps_draws(const NipsRunConfig& cfg) {
  Rng rng(stream_seed(cfg.seed, 0x6e697073));
  std::vector<double> out(cfg.batches);
  for (auto& e : out)
    e = cfg.eps_choices[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.eps_choices.size()) - 1))];
  return out;
}

// Contiguous batch boundaries: ceil(n / batches) images each, last one shorter.
inline std::vector<std::pair<std::size_t, std::size_t>> nips_batches(std::size_t n, std::size_t batches) {
  const std::size_t per = (n + batches - 1) / batches;
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t lo = std::min(n, b * per), hi = std::min(n, lo + per);
    out.emplace_back(lo, hi);
  }
  return out;
}

struct NipsReport {
  std::vector<double> eps_draws;
  std::vector<TransferMatrix> rows;  // one single-row matrix per variant

  // Average success over targets for one variant row.
  double average(std::size_t row) const {
    const TransferMatrix& m = rows.at(row);
    double s = 0.0;
    for (const auto& c : m.cells) s += c.rate();
    return s / static_cast<double>(m.cells.size());
  }
};

inline NipsReport nips_protocol(const NipsRunConfig& cfg, const EvalSet& ev, const Source& src,
                                std::span<const Checkpoint* const> targets, const RunOptions& opt = {}) {
  validate(cfg);
  check_filtered(ev, targets);
  NipsReport rep;
  rep.eps_draws = nips_eps_draws(cfg);
  const auto bounds = nips_batches(ev.size(), cfg.batches);
  const std::size_t per = ev.images.size() / ev.size();

  std::string label = "nips{";
  for (std::size_t i = 0; i < cfg.eps_choices.size(); ++i) label += (i ? "|" : "") + format_real(cfg.eps_choices[i]);
  label += "}";

  for (Variant v : cfg.variants) {
    AttackPlan plan;
    plan.attack = cfg.base;
    plan.attack.variant = v;
    plan.attack.iterations = 10;
    plan.attack.mu = 1.0;
    plan.attack.seed = cfg.seed;
    Tensor<float> adv(ev.images.shape);
    parallel_for(ev.size(), opt.workers, [&](std::size_t i) {
      std::size_t b = 0;
      while (i >= bounds[b].second) ++b;
      AttackConfig c = plan.attack;
      c.epsilon = rep.eps_draws[b];
      c.alpha = c.epsilon / static_cast<double>(c.iterations);
      const AdvExample<float> ex = attack(src.ensemble, ev.image(i), std::span<const int>(&ev.labels[i], 1), c, i);
      std::copy(ex.adversarial.data.begin(), ex.adversarial.data.end(),
                adv.data.begin() + static_cast<std::ptrdiff_t>(i * per));
    });
    TransferMatrix m;
    m.plan = plan;
    m.labels = run_labels(plan);
    m.labels.eps = label;
    m.labels.alpha = "eps/10";
    m.sources = {src.id};
    for (const Checkpoint* t : targets) {
      m.targets.push_back(t->id());
      TransferCell c{src.id, t->id(), count_fooled(t->model, adv, ev.labels), ev.size(),
                     std::find(src.members.begin(), src.members.end(), t->id()) != src.members.end()};
      m.cells.push_back(std::move(c));
    }
    rep.rows.push_back(std::move(m));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Model zoo

struct ZooOptions {
  std::vector<std::string> architectures = {"A", "B", "C", "D"};
  TrainConfig train;
  // Adversarially trained copy of the first architecture; disabled when unset.
  std::optional<AdversarialTraining> adversarial = AdversarialTraining{0.1, 0.5};
  std::uint64_t seed = 0;
};

inline ZooOptions default_zoo_options() {
  ZooOptions z;
  z.train.epochs = 6;
  return z;
}

// Trains the plain architectures, then the adversarial twin (id "<first>adv").
// Model k uses seed stream_seed(seed, k); models train concurrently.
inline std::vector<Checkpoint> train_zoo(const Dataset& train_set, const Dataset& test_set, const ZooOptions& z,
                                         const RunOptions& opt = {}) {
  std::vector<NetworkSpec> specs;
  for (const auto& a : z.architectures)
    specs.push_back(zoo_spec(a, train_set.channels(), train_set.height(), train_set.num_classes));
  const std::size_t plain = specs.size();
  if (z.adversarial && !specs.empty()) {
    NetworkSpec s = specs.front();
    s.id += "adv";
    specs.push_back(std::move(s));
  }
  std::vector<Checkpoint> out(specs.size());
  parallel_for(specs.size(), opt.workers, [&](std::size_t k) {
    TrainConfig cfg = z.train;
    cfg.seed = stream_seed(z.seed, k < plain ? k : 0);
    if (k >= plain) cfg.adversarial = z.adversarial;
    out[k] = train(specs[k], train_set, test_set, cfg);
  });
  return out;
}

}  // namespace dvat
