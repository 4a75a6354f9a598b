#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dvat/checkpoint.hpp"
#include "dvat/data.hpp"
#include "dvat/error.hpp"
#include "dvat/gradcheck_suite.hpp"
#include "dvat/harness.hpp"
#include "dvat/report.hpp"
#include "dvat/train.hpp"

namespace dvat::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitProtocol = 3;

struct Options {
  // attack
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  double eps = 0.1;
  std::optional<double> eps255, alpha;
  std::optional<std::size_t> iters;
  double mu = 1.0, p = 0.5;
  std::vector<std::string> variants = {"ifgsm"};
  std::size_t r_low = 28, r_high = 31;
  std::size_t cw_iters = 250;
  double cw_lr = 0.01, cw_kappa = 10.0, cw_c = 1.0;

  // models and outputs
  std::vector<std::string> models, targets;
  std::vector<double> ens_weights;
  std::string holdout;
  bool ensemble = false;
  std::string out = ".";

  // data
  std::string train_images, train_labels, test_images, test_labels;
  std::string synth = "1,300,10,28";
  std::size_t eval_size = 500;

  // train
  std::vector<std::string> archs = {"A", "B", "C", "D"};
  std::size_t epochs = 6, batch = 32;
  double lr = 0.05, clip = 10.0;
  bool adv_train = false;
  double adv_eps = 0.1, adv_fraction = 0.5;

  // attack subcommand
  std::size_t index = 0, count = 1;
  bool pgm = false;

  // sweep
  std::string param = "p";
  std::vector<double> values;

  // nips
  std::size_t batches = 50;
  std::vector<double> eps_choices255 = {4, 8, 12, 16};

  // gradcheck
  std::size_t shapes = 5, coords = 20;
  double h = 1e-5, tol = 1e-5;
};

struct SynthSpec {
  std::uint64_t seed;
  std::size_t n, classes, size;
};

inline SynthSpec parse_synth(const std::string& s) {
  std::vector<std::string> f;
  std::stringstream ss(s);
  for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
  if (f.size() != 4) throw ConfigError("--synth expects seed,n,classes,size, got '" + s + "'");
  try {
    std::size_t pos = 0;
    std::vector<unsigned long long> v;
    for (const auto& x : f) {
      v.push_back(std::stoull(x, &pos));
      if (pos != x.size()) throw std::invalid_argument(x);
    }
    return {v[0], v[1], v[2], v[3]};
  } catch (const std::exception&) {
    throw ConfigError("--synth expects four non-negative integers, got '" + s + "'");
  }
}

// Synthetic benchmark family. Train split: n per class from `seed`. Test split:
// max(1, n/3) per class from seed + 1.
inline Dataset synth_split(const SynthSpec& s, Split split) {
  SynthConfig c = split == Split::kTrain ? bench_synth_config(s.seed, s.n, split)
                                         : bench_synth_config(s.seed + 1, std::max<std::size_t>(1, s.n / 3), split);
  c.num_classes = s.classes;
  c.size = s.size;
  return synth_dataset(c);
}

inline Dataset load_split(const Options& o, Split split) {
  const std::string& img = split == Split::kTrain ? o.train_images : o.test_images;
  const std::string& lab = split == Split::kTrain ? o.train_labels : o.test_labels;
  if (img.empty() != lab.empty())
    throw ConfigError(std::string("--") + (split == Split::kTrain ? "train" : "test") +
                      "-images and -labels must be given together");
  if (!img.empty()) return load_idx(img, lab, 10, split);
  return synth_split(parse_synth(o.synth), split);
}

inline AttackPlan make_plan(const Options& o, const std::string& variant) {
  AttackPlan plan;
  AttackConfig& a = plan.attack;
  a.variant = parse_variant(variant);
  a.seed = o.seed;
  a.mu = o.mu;
  a.diversity.p = o.p;
  a.diversity.r_low = o.r_low;
  a.diversity.r_high = o.r_high;
  if (o.eps255) {
    a.epsilon = *o.eps255 / 255.0;
    a.iterations = o.iters.value_or(iterations_for_eps255(*o.eps255));
  } else {
    a.epsilon = o.eps;
    a.iterations = o.iters.value_or(10);
  }
  a.alpha = o.alpha.value_or(a.epsilon / static_cast<double>(std::max<std::size_t>(a.iterations, 1)));
  a = normalized(a);
  plan.cw.iterations = o.cw_iters;
  plan.cw.learning_rate = o.cw_lr;
  plan.cw.confidence = o.cw_kappa;
  plan.cw.c = o.cw_c;
  if (is_cw(plan)) {
    validate(plan.cw);
    validate(a.diversity);
  } else {
    validate(a);
  }
  return plan;
}

inline std::vector<Checkpoint> load_models(const std::vector<std::string>& paths, const char* flag) {
  if (paths.empty()) throw ConfigError(std::string(flag) + " needs at least one checkpoint path");
  std::vector<Checkpoint> out;
  for (const auto& p : paths) out.push_back(load_checkpoint(p));
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (out[i].id() == out[j].id()) throw ConfigError("duplicate model id '" + out[i].id() + "' in " + flag);
  return out;
}

inline std::vector<const Checkpoint*> pointers(const std::vector<Checkpoint>& v) {
  std::vector<const Checkpoint*> out;
  for (const auto& c : v) out.push_back(&c);
  return out;
}

// Sources for transfer and sweep: hold-out ensembles, one ensemble of all models,
// or each model on its own.
inline std::vector<Source> make_sources(const Options& o, std::span<const Checkpoint* const> models) {
  if (!o.holdout.empty()) {
    if (o.holdout == "all") return holdout_sources(models);
    std::vector<const Checkpoint*> rest;
    bool found = false;
    for (const Checkpoint* m : models) {
      if (m->id() == o.holdout)
        found = true;
      else
        rest.push_back(m);
    }
    if (!found) throw ConfigError("--holdout '" + o.holdout + "' is not among --models");
    if (rest.empty()) throw ConfigError("--holdout leaves an empty ensemble");
    return {ensemble_source("-" + o.holdout, rest)};
  }
  if (o.ensemble || !o.ens_weights.empty()) {
    std::string id;
    for (const Checkpoint* m : models) id += (id.empty() ? "" : "+") + m->id();
    return {ensemble_source(id, models, o.ens_weights)};
  }
  std::vector<Source> out;
  for (const Checkpoint* m : models) out.push_back(single_source(*m));
  return out;
}

inline void print_summary(std::ostream& os, const std::vector<TransferMatrix>& ms) {
  for (const auto& m : ms) {
    os << m.labels.variant << " eps=" << m.labels.eps;
    const double wb = m.mean_rate(true), bb = m.mean_rate(false);
    if (!std::isnan(wb)) os << " white-box=" << format_rate(wb);
    if (!std::isnan(bb)) os << " black-box=" << format_rate(bb);
    os << '\n';
  }
}

inline int cmd_train(const Options& o, std::ostream& os) {
  const Dataset tr = load_split(o, Split::kTrain), te = load_split(o, Split::kTest);
  ZooOptions z;
  z.architectures = o.archs;
  z.train.epochs = o.epochs;
  z.train.batch_size = o.batch;
  z.train.learning_rate = o.lr;
  z.train.clip_norm = o.clip;
  z.seed = o.seed;
  if (o.adv_train)
    z.adversarial = AdversarialTraining{o.adv_eps, o.adv_fraction};
  else
    z.adversarial.reset();
  validate(z.train);
  const auto zoo = train_zoo(tr, te, z, {o.workers});
  std::filesystem::create_directories(o.out);
  for (const auto& cp : zoo) {
    const auto path = std::filesystem::path(o.out) / (cp.id() + ".dvat");
    save_checkpoint(cp, path);
    os << cp.id() << " train=" << format_rate(cp.meta.train_accuracy) << " test=" << format_rate(cp.meta.test_accuracy)
       << " -> " << path.string() << '\n';
  }
  return kExitOk;
}

inline int cmd_attack(const Options& o, std::ostream& os) {
  if (o.variants.size() != 1) throw ConfigError("attack takes exactly one --variant");
  const auto models = load_models(o.models, "--models");
  const auto ptrs = pointers(models);
  const Dataset te = load_split(o, Split::kTest);
  if (o.count < 1 || o.index + o.count > te.size())
    throw ConfigError("--index/--count select images beyond the " + std::to_string(te.size()) + "-image test set");
  const AttackPlan plan = make_plan(o, o.variants[0]);
  if (models.size() > 1 && !o.ensemble && o.ens_weights.empty() && o.holdout.empty())
    throw ConfigError("attack with several --models needs --ensemble, --ens-weights or --holdout <id>");
  if (o.holdout == "all") throw ConfigError("attack takes a single --holdout id");
  const Source src = make_sources(o, ptrs).front();

  AdvBatch batch;
  batch.seed = o.seed;
  batch.config = is_cw(plan) ? fingerprint(plan.cw, plan.attack.variant == Variant::kDcw
                                                         ? std::optional(plan.attack.diversity)
                                                         : std::nullopt,
                                           plan.attack.seed)
                             : fingerprint(plan.attack);
  batch.examples.resize(o.count);
  const std::optional<DiversityConfig> div =
      plan.attack.variant == Variant::kDcw ? std::optional(plan.attack.diversity) : std::nullopt;
  parallel_for(o.count, o.workers, [&](std::size_t k) {
    const std::size_t i = o.index + k;
    const std::span<const int> y(&te.labels[i], 1);
    batch.examples[k] = is_cw(plan) ? cw_attack(src.ensemble, te.image(i), y, plan.cw, div, plan.attack.seed, i)
                                    : attack(src.ensemble, te.image(i), y, plan.attack, i);
  });
  std::filesystem::create_directories(o.out);
  const auto path = std::filesystem::path(o.out) / "adv.dvat";
  save_adv_batch(batch, path);
  for (std::size_t k = 0; k < o.count; ++k) {
    const auto& ex = batch.examples[k];
    const int before = predict(src.ensemble, ex.original)[0], after = predict(src.ensemble, ex.adversarial)[0];
    os << "image " << o.index + k << " label=" << ex.labels[0] << " pred=" << before << " -> " << after
       << " linf=" << format_real(linf_distance(ex.adversarial, ex.original)) << '\n';
    if (o.pgm) {
      const std::string stem = "img" + std::to_string(o.index + k);
      write_pgm(ex.original, std::filesystem::path(o.out) / (stem + "_orig.pgm"));
      write_pgm(ex.adversarial, std::filesystem::path(o.out) / (stem + "_adv.pgm"));
    }
  }
  os << "wrote " << path.string() << '\n';
  return kExitOk;
}

struct Bench {
  std::vector<Checkpoint> models, targets;
  EvalSet eval;
};

// Loads --models and --targets (default: the models) and filters the test split
// through every distinct model.
inline Bench load_bench(const Options& o) {
  Bench b;
  b.models = load_models(o.models, "--models");
  if (!o.targets.empty()) b.targets = load_models(o.targets, "--targets");
  const Dataset te = load_split(o, Split::kTest);
  std::vector<const Checkpoint*> filter = pointers(b.models);
  for (const auto& t : b.targets) {
    bool dup = false;
    for (const Checkpoint* m : filter) dup |= fingerprint(*m) == fingerprint(t);
    if (!dup) filter.push_back(&t);
  }
  b.eval = filter_correct(te, filter, o.eval_size);
  return b;
}

inline std::vector<const Checkpoint*> target_ptrs(const Bench& b) {
  return pointers(b.targets.empty() ? b.models : b.targets);
}

inline int cmd_transfer(const Options& o, std::ostream& os) {
  const Bench b = load_bench(o);
  const auto models = pointers(b.models);
  const auto targets = target_ptrs(b);
  const auto sources = make_sources(o, models);
  std::vector<TransferMatrix> ms;
  for (const auto& v : o.variants) ms.push_back(transfer_matrix(sources, targets, b.eval, make_plan(o, v), {o.workers}));
  emit_report(ms, o.out, "transfer");
  os << "eval set: " << b.eval.size() << " images\n" << to_table(ms);
  print_summary(os, ms);
  return kExitOk;
}

inline int cmd_sweep(const Options& o, std::ostream& os) {
  const SweepParam param = parse_sweep_param(o.param);
  if (o.values.empty()) throw ConfigError("sweep needs --values");
  const Bench b = load_bench(o);
  const auto models = pointers(b.models);
  const auto targets = target_ptrs(b);
  const auto sources = make_sources(o, models);
  std::vector<TransferMatrix> ms;
  for (const auto& v : o.variants) {
    auto part = sweep(param, o.values, make_plan(o, v), sources, targets, b.eval, {o.workers});
    ms.insert(ms.end(), part.begin(), part.end());
  }
  emit_report(ms, o.out, "sweep");
  os << "eval set: " << b.eval.size() << " images\n";
  print_summary(os, ms);
  return kExitOk;
}

inline int cmd_nips(const Options& o, std::ostream& os) {
  if (o.targets.empty()) throw ConfigError("nips needs --targets");
  const Bench b = load_bench(o);
  const auto models = pointers(b.models);
  const auto targets = target_ptrs(b);
  NipsRunConfig cfg;
  cfg.batches = o.batches;
  cfg.eps_choices.clear();
  for (double e : o.eps_choices255) cfg.eps_choices.push_back(e / 255.0);
  cfg.variants.clear();
  for (const auto& v : o.variants) cfg.variants.push_back(parse_variant(v));
  cfg.base = make_plan(o, "ifgsm").attack;
  cfg.seed = o.seed;
  std::string id;
  for (const Checkpoint* m : models) id += (id.empty() ? "" : "+") + m->id();
  const Source src = ensemble_source(id, models, o.ens_weights);
  const NipsReport rep = nips_protocol(cfg, b.eval, src, targets, {o.workers});
  emit_report(rep.rows, o.out, "nips");
  os << "eval set: " << b.eval.size() << " images\n" << to_table(rep.rows);
  for (std::size_t r = 0; r < rep.rows.size(); ++r)
    os << rep.rows[r].labels.variant << " average=" << format_rate(rep.average(r)) << '\n';
  return kExitOk;
}

inline int cmd_gradcheck(const Options& o, std::ostream& os) {
  GradCheckSuiteConfig cfg;
  cfg.shapes = o.shapes;
  cfg.coords = o.coords;
  cfg.h = o.h;
  cfg.seed = o.seed;
  if (!(cfg.h > 0)) throw ConfigError("--step must be > 0");
  if (cfg.shapes < 1 || cfg.coords < 1) throw ConfigError("--shapes and --coords must be >= 1");
  std::size_t failed = 0;
  for (const auto& c : run_gradcheck_suite(cfg)) {
    const bool ok = c.result.max_rel_error < o.tol;
    failed += !ok;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3e", c.result.max_rel_error);
    os << (ok ? "ok   " : "FAIL ") << c.name << " max_rel_err=" << buf << " coords=" << c.result.coords_checked
       << '\n';
  }
  os << (failed == 0 ? "all gradient checks passed\n" : std::to_string(failed) + " gradient checks failed\n");
  return failed == 0 ? kExitOk : kExitFailed;
}

// Parses argv and runs one subcommand. Library errors map to exit codes:
// configuration 2, protocol and data 3, anything else 1.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"Input-diversity adversarial attack engine and transfer benchmark"};
  app.require_subcommand(1);
  app.fallthrough();

  app.add_option("--seed", o.seed, "Master seed")->capture_default_str();
  app.add_option("--workers", o.workers, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  auto* eps = app.add_option("--eps", o.eps, "L-inf budget on the [0,1] scale")->capture_default_str();
  app.add_option("--eps255", o.eps255, "L-inf budget on the 0..255 scale (sets N by the min rule)")->excludes(eps);
  app.add_option("--alpha", o.alpha, "Step size (default eps/N)");
  app.add_option("--iters", o.iters, "Iterations N");
  app.add_option("--mu", o.mu, "Momentum decay")->capture_default_str();
  auto* prob = app.add_option("--p", o.p, "Transform probability (nips default 0.4)")->capture_default_str();
  auto* variant = app.add_option("--variant", o.variants, "fgsm|ifgsm|mifgsm|di2|mdi2|cw|dcw, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  app.add_option("--models", o.models, "Checkpoint paths");
  app.add_option("--targets", o.targets, "Target checkpoint paths (default: --models)");
  app.add_option("--holdout", o.holdout, "Hold out one model id, or 'all' for every leave-one-out ensemble");
  app.add_flag("--ensemble", o.ensemble, "Attack the ensemble of all --models");
  app.add_option("--ens-weights", o.ens_weights, "Ensemble weights, comma separated, summing to 1")->delimiter(',');
  app.add_option("--out", o.out, "Output directory")->capture_default_str();
  app.add_option("--r-low", o.r_low, "Smallest resize target")->capture_default_str();
  app.add_option("--r-high", o.r_high, "Padded output size")->capture_default_str();
  app.add_option("--train-images", o.train_images, "IDX training images");
  app.add_option("--train-labels", o.train_labels, "IDX training labels");
  app.add_option("--test-images", o.test_images, "IDX test images");
  app.add_option("--test-labels", o.test_labels, "IDX test labels");
  app.add_option("--synth", o.synth, "Synthetic data seed,n,classes,size (used without IDX files)")
      ->capture_default_str();
  app.add_option("--eval-size", o.eval_size, "Maximum eval-set size (0 keeps all)")->capture_default_str();
  app.add_option("--cw-iters", o.cw_iters, "C&W iterations")->capture_default_str();
  app.add_option("--cw-lr", o.cw_lr, "C&W Adam learning rate")->capture_default_str();
  app.add_option("--kappa", o.cw_kappa, "C&W confidence")->capture_default_str();
  app.add_option("--cw-c", o.cw_c, "C&W trade-off constant")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train the model zoo and write checkpoints to --out");
  train->add_option("--arch", o.archs, "Architectures, comma separated")->delimiter(',')->capture_default_str();
  train->add_option("--epochs", o.epochs)->capture_default_str();
  train->add_option("--batch", o.batch)->capture_default_str();
  train->add_option("--lr", o.lr)->capture_default_str();
  train->add_option("--clip", o.clip, "Gradient-norm clip, 0 disables")->capture_default_str();
  train->add_flag("--adv-train", o.adv_train, "Also train an FGSM-adversarially trained copy of the first arch");
  train->add_option("--adv-eps", o.adv_eps)->capture_default_str();
  train->add_option("--adv-fraction", o.adv_fraction)->capture_default_str();

  auto* atk = app.add_subcommand("attack", "Craft adversarial examples and write an AdvExample container");
  atk->add_option("--index", o.index, "First test image")->capture_default_str();
  atk->add_option("--count", o.count, "Number of images")->capture_default_str();
  atk->add_flag("--pgm", o.pgm, "Also dump original and adversarial images as PGM");

  auto* transfer = app.add_subcommand("transfer", "Transfer matrix of sources against targets");
  auto* sw = app.add_subcommand("sweep", "Transfer matrices over a parameter sweep");
  sw->add_option("--param", o.param, "p, N or alpha")->capture_default_str();
  sw->add_option("--values", o.values, "Values, comma separated")->delimiter(',');
  auto* nips = app.add_subcommand("nips", "Randomized-epsilon batch protocol");
  nips->add_option("--batches", o.batches)->capture_default_str();
  nips->add_option("--eps-choices", o.eps_choices255, "Epsilon choices on the 0..255 scale")
      ->delimiter(',')
      ->capture_default_str();
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks in double precision");
  gc->add_option("--shapes", o.shapes)->capture_default_str();
  gc->add_option("--coords", o.coords)->capture_default_str();
  gc->add_option("--step", o.h, "Finite-difference step")->capture_default_str();
  gc->add_option("--tol", o.tol)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (*train) return cmd_train(o, out);
    if (*atk) return cmd_attack(o, out);
    if (*transfer) return cmd_transfer(o, out);
    if (*sw) return cmd_sweep(o, out);
    if (*nips) {
      if (variant->count() == 0) o.variants = {"ifgsm", "di2", "mifgsm", "mdi2"};
      if (prob->count() == 0) o.p = nips_base().diversity.p;
      return cmd_nips(o, out);
    }
    if (*gc) return cmd_gradcheck(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ProtocolError& e) {
    err << "protocol error: " << e.what() << '\n';
    return kExitProtocol;
  } catch (const InputError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitProtocol;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitProtocol;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailed;
  }
  err << "error: a subcommand is required (train, attack, transfer, sweep, nips, gradcheck)\n";
  return kExitConfig;
}

}  // namespace dvat::cli
