// Acceptance run: trains (or reloads) the synthetic-digit zoo and prints one
// PASS/FAIL line per criterion. Exit status is 0 only when every selected
// criterion passes.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dvat/gradcheck_suite.hpp"
#include "dvat/harness.hpp"
#include "dvat/report.hpp"

using namespace dvat;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

// Training data: 300 glyphs per class (seed 1). Held-out test data: 100 per
// class (seed 2). Five models: A, B, C, D and the FGSM-trained twin Aadv.
struct Bench {
  Dataset train_set, test_set;
  std::vector<Checkpoint> zoo;
  std::vector<const Checkpoint*> all, plain;
  EvalSet ev;
};

constexpr std::size_t kEvalSize = 500;
constexpr std::uint64_t kZooSeed = 100;
const std::vector<std::uint64_t> kSeeds = {1000, 1001, 1002};
const Variant kFamily[] = {Variant::kIfgsm, Variant::kDi2, Variant::kMifgsm, Variant::kMdi2};

std::string zoo_stamp(const ZooOptions& z, const Dataset& tr, const Dataset& te) {
  std::ostringstream os;
  os << "epochs=" << z.train.epochs << " batch=" << z.train.batch_size << " lr=" << format_real(z.train.learning_rate)
     << " clip=" << format_real(z.train.clip_norm) << " seed=" << z.seed << " adv="
     << (z.adversarial ? format_real(z.adversarial->epsilon) + "/" + format_real(z.adversarial->fraction) : "none")
     << " data=" << tr.provenance << "|" << te.provenance;
  return os.str();
}

Bench make_bench(const fs::path& workdir) {
  Bench b;
  b.train_set = synth_dataset(bench_synth_config(1, 300));
  b.test_set = synth_dataset(bench_synth_config(2, 100, Split::kTest));

  ZooOptions z = default_zoo_options();
  z.seed = kZooSeed;
  const fs::path dir = workdir / "zoo";
  const std::string stamp = zoo_stamp(z, b.train_set, b.test_set);
  const std::vector<std::string> ids = {"A", "B", "C", "D", "Aadv"};
  bool cached = fs::exists(dir / "stamp.txt") && read_text(dir / "stamp.txt") == stamp;
  if (cached) {
    try {
      for (const auto& id : ids) b.zoo.push_back(load_checkpoint(dir / (id + ".dvat")));
    } catch (const Error&) {
      cached = false;
      b.zoo.clear();
    }
  }
  if (!cached) {
    const auto t0 = Clock::now();
    b.zoo = train_zoo(b.train_set, b.test_set, z);
    fs::create_directories(dir);
    for (const auto& cp : b.zoo) save_checkpoint(cp, dir / (cp.id() + ".dvat"));
    write_text(dir / "stamp.txt", stamp);
    std::printf("# trained zoo in %.0fs\n", seconds_since(t0));
  }
  for (const auto& cp : b.zoo) {
    b.all.push_back(&cp);
    if (!cp.meta.adversarial) b.plain.push_back(&cp);
    std::printf("# %-5s test accuracy %.4f\n", cp.id().c_str(), cp.meta.test_accuracy);
  }
  b.ev = filter_correct(b.test_set, b.all, kEvalSize);
  std::printf("# eval set: %zu images\n", b.ev.size());
  std::fflush(stdout);
  return b;
}

std::vector<Source> singles(const Bench& b) {
  std::vector<Source> out;
  for (const Checkpoint* c : b.plain) out.push_back(single_source(*c));
  return out;
}

AttackPlan family_plan(Variant v, double eps, double alpha, std::size_t n, double p, std::uint64_t seed) {
  AttackPlan plan;
  plan.attack.variant = v;
  plan.attack.epsilon = eps;
  plan.attack.alpha = alpha;
  plan.attack.iterations = n;
  plan.attack.diversity.p = p;
  plan.attack.seed = seed;
  return plan;
}

// Mean white-box and black-box rates over kSeeds.
std::pair<double, double> seed_mean(const std::function<TransferMatrix(std::uint64_t)>& run) {
  double wb = 0, bb = 0;
  for (auto s : kSeeds) {
    const TransferMatrix m = run(s);
    wb += m.mean_rate(true);
    bb += m.mean_rate(false);
  }
  return {wb / static_cast<double>(kSeeds.size()), bb / static_cast<double>(kSeeds.size())};
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxx == 0 || syy == 0 ? 0.0 : sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------

Verdict criterion1() {
  const auto t0 = Clock::now();
  const auto cases = run_gradcheck_suite({});
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_name;
  std::size_t min_coords = SIZE_MAX, models = 0;
  for (const auto& c : cases) {
    if (c.result.max_rel_error >= worst) {
      worst = c.result.max_rel_error;
      worst_name = c.name;
    }
    if (c.name.rfind("model", 0) == 0) {
      ++models;
      min_coords = std::min(min_coords, c.result.coords_checked);
    }
  }
  return {worst < 1e-5 && models >= 5 && min_coords >= 20 && secs < 60,
          std::to_string(cases.size()) + " checks, max rel err " + fmt("%.2e", worst) + " (" + worst_name + "), " +
              std::to_string(models) + " model+transform checks over >=" + std::to_string(min_coords) +
              " coords, " + fmt("%.1fs", secs)};
}

Verdict criterion2(const Bench& b) {
  const auto t0 = Clock::now();
  struct Pair {
    const char* name;
    AttackConfig lhs, rhs;
  };
  const auto base = [](Variant v) {
    AttackConfig c;
    c.variant = v;
    c.epsilon = 0.1;
    c.alpha = 0.01;
    c.iterations = 10;
    c.seed = 77;
    return c;
  };
  std::vector<Pair> pairs;
  {
    auto l = base(Variant::kDi2);
    l.diversity.p = 0;
    pairs.push_back({"di2(p=0)=ifgsm", l, base(Variant::kIfgsm)});
    l = base(Variant::kMdi2);
    l.diversity.p = 0;
    pairs.push_back({"mdi2(p=0)=mifgsm", l, base(Variant::kMifgsm)});
    l = base(Variant::kMdi2);
    l.mu = 0;
    pairs.push_back({"mdi2(mu=0)=di2", l, base(Variant::kDi2)});
    l = base(Variant::kMifgsm);
    l.mu = 0;
    pairs.push_back({"mifgsm(mu=0)=ifgsm", l, base(Variant::kIfgsm)});
    l = base(Variant::kIfgsm);
    l.iterations = 1;
    l.alpha = l.epsilon;
    pairs.push_back({"ifgsm(N=1,alpha=eps)=fgsm", l, base(Variant::kFgsm)});
  }
  std::size_t checked = 0;
  std::string broken;
  const std::size_t images = std::min<std::size_t>(20, b.ev.size());
  for (const auto& pr : pairs)
    for (const Checkpoint* m : b.plain) {
      const auto ens = Ensemble<float>::single(m->model);
      for (std::size_t i = 0; i < images; ++i) {
        const std::span<const int> y(&b.ev.labels[i], 1);
        const auto l = attack(ens, b.ev.image(i), y, pr.lhs, i), r = attack(ens, b.ev.image(i), y, pr.rhs, i);
        ++checked;
        if (l.adversarial != r.adversarial || l.loss_trace != r.loss_trace) broken = pr.name;
      }
    }
  const double secs = seconds_since(t0);
  return {broken.empty() && secs < 60,
          std::to_string(checked) + " bit-exact comparisons over 5 identities" +
              (broken.empty() ? "" : ", mismatch in " + broken) + ", " + fmt("%.1fs", secs)};
}

Verdict criterion3(const Bench& b) {
  Rng rng(2024);
  std::size_t iterates = 0, unit_checks = 0, violations = 0;
  double worst_linf_excess = -1;
  for (std::size_t run = 0; run < 1000; ++run) {
    AttackConfig c;
    c.variant = kFamily[rng.uniform_int(0, 3)];
    if (rng.uniform01() < 0.1) c.variant = Variant::kFgsm;
    c.epsilon = rng.uniform(0.0, 0.3);
    c.alpha = rng.uniform(0.002, 0.1);
    c.iterations = static_cast<std::size_t>(rng.uniform_int(1, 8));
    c.mu = rng.uniform(0.0, 2.0);
    c.diversity.p = rng.uniform01();
    c.seed = rng.next_u64();
    const Checkpoint* m = b.all[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(b.all.size()) - 1))];
    const std::size_t i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(b.ev.size()) - 1));
    const Tensor<float> x = b.ev.image(i);
    const bool momentum = uses_momentum(normalized(c).variant);
    attack(Ensemble<float>::single(m->model), x, std::span<const int>(&b.ev.labels[i], 1), c, run,
           IterationObserver<float>([&](const IterationInfo<float>& info) {
             ++iterates;
             const double excess = linf_distance(*info.x_adv, x) - c.epsilon;
             worst_linf_excess = std::max(worst_linf_excess, excess);
             if (excess > 1e-6) ++violations;
             for (float v : info.x_adv->data)
               if (!(v >= 0.0f && v <= 1.0f)) ++violations;
             if (momentum && info.gradient_nonzero[0]) {
               ++unit_checks;
               if (std::abs(info.contribution_l1[0] - 1.0) > 1e-9) ++violations;
             }
           }));
  }
  return {violations == 0 && unit_checks > 0,
          "1000 runs, " + std::to_string(iterates) + " iterates, " + std::to_string(unit_checks) +
              " momentum unit-L1 checks, " + std::to_string(violations) + " violations, max(Linf-eps) " +
              fmt("%.2e", worst_linf_excess)};
}

Verdict criterion4(const Bench& b) {
  const Checkpoint& a = *b.plain[0];
  const Source src = single_source(a);
  const Checkpoint* tgt = &a;
  bool ok = a.meta.test_accuracy >= 0.97 && b.ev.size() == kEvalSize;
  std::string detail = a.id() + " test acc " + fmt("%.4f", a.meta.test_accuracy) + ";";
  for (Variant v : kFamily) {
    const auto m = transfer_matrix(std::span<const Source>(&src, 1), std::span<const Checkpoint* const>(&tgt, 1), b.ev,
                                   family_plan(v, 0.1, 0.01, 10, 0.5, 1000), {});
    ok &= m.cells[0].rate() >= 0.99;
    detail += " " + std::string(variant_name(v)) + "=" + format_rate(m.cells[0].rate());
  }
  return {ok, detail};
}

Verdict criterion5(const Bench& b) {
  const auto t0 = Clock::now();
  const auto sources = singles(b);
  std::vector<double> bb;
  std::string detail = "black-box means:";
  for (Variant v : kFamily) {
    const auto [w, k] = seed_mean([&](std::uint64_t s) {
      return transfer_matrix(sources, b.plain, b.ev, family_plan(v, 0.15, 0.015, 20, 0.5, s), {});
    });
    bb.push_back(k);
    detail += " " + std::string(variant_name(v)) + "=" + format_rate(k);
  }
  const double secs = seconds_since(t0);
  const bool ok = bb[1] >= bb[0] + 0.02 && bb[3] >= bb[2] + 0.02 && bb[3] >= *std::max_element(bb.begin(), bb.end()) &&
                  secs < 900;
  return {ok, detail + ", " + fmt("%.0fs", secs)};
}

// Hold-out ensembles over the four plain models, below saturation.
constexpr double kHoldoutEps = 0.1, kHoldoutAlpha = 0.01;
constexpr std::size_t kHoldoutIters = 20;

Verdict criterion6(const Bench& b) {
  std::vector<double> rate;
  std::string detail = "hold-out means:";
  for (Variant v : kFamily) {
    const auto [w, k] = seed_mean([&](std::uint64_t s) {
      return holdout_matrix(b.plain, b.ev, family_plan(v, kHoldoutEps, kHoldoutAlpha, kHoldoutIters, 0.5, s), {});
    });
    (void)w;
    rate.push_back(k);
    detail += " " + std::string(variant_name(v)) + "=" + format_rate(k);
  }
  const bool ok = rate[3] >= rate[0] + 0.02 && rate[3] >= rate[1] + 0.02 && rate[3] >= rate[2] + 0.02;
  return {ok, detail};
}

// Below saturation, so the white-box side of the trade-off is visible.
constexpr Variant kSweepVariant = Variant::kDi2;
constexpr double kSweepEps = 0.1, kSweepAlpha = 0.01;
constexpr std::size_t kSweepIters = 20;

Verdict criterion7(const Bench& b) {
  const auto sources = singles(b);
  const std::vector<double> ps = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> wb, bb;
  std::string detail = std::string(variant_name(kSweepVariant)) + " (p: wb/bb)";
  for (double p : ps) {
    const auto [w, k] = seed_mean([&](std::uint64_t s) {
      return transfer_matrix(sources, b.plain, b.ev, family_plan(kSweepVariant, kSweepEps, kSweepAlpha, kSweepIters, p, s), {});
    });
    wb.push_back(w);
    bb.push_back(k);
    detail += " " + format_real(p) + ":" + format_rate(w) + "/" + format_rate(k);
  }
  const double rb = spearman(ps, bb), rw = spearman(ps, wb);
  return {rb >= 0.8 && rw <= -0.8, detail + "; spearman bb " + fmt("%+.2f", rb) + " wb " + fmt("%+.2f", rw)};
}

Verdict criterion8(const Bench& b) {
  EvalSet ev = b.ev;
  const std::size_t n = std::min<std::size_t>(200, ev.size());
  ev.images = ev.images.slice_batch(0, n);
  ev.labels.resize(n);
  ev.indices.resize(n);
  const auto sources = singles(b);
  double wb[2], bb[2];
  for (int k = 0; k < 2; ++k) {
    AttackPlan plan;
    plan.attack.variant = k == 0 ? Variant::kCw : Variant::kDcw;
    plan.attack.diversity.p = 0.5;
    plan.attack.seed = 1000;
    const auto m = transfer_matrix(sources, b.plain, ev, plan, {});
    wb[k] = m.mean_rate(true);
    bb[k] = m.mean_rate(false);
  }
  return {wb[0] >= 0.95 && bb[1] >= bb[0] + 0.02 && n == 200,
          std::to_string(n) + " images; cw wb=" + format_rate(wb[0]) + " bb=" + format_rate(bb[0]) +
              "; dcw wb=" + format_rate(wb[1]) + " bb=" + format_rate(bb[1])};
}

// Ensemble of A, B, C attacking D and the adversarially trained twin.
Verdict criterion9(const Bench& b) {
  const std::vector<const Checkpoint*> members(b.plain.begin(), b.plain.begin() + 3);
  const std::vector<const Checkpoint*> targets = {b.plain[3], b.all.back()};
  const Source src = ensemble_source("A+B+C", members);
  NipsRunConfig cfg;
  cfg.seed = 9;
  const auto run = [&](std::size_t workers) {
    return nips_protocol(cfg, b.ev, src, targets, RunOptions{workers});
  };
  const NipsReport first = run(1);
  const std::string csv = to_csv(first.rows);
  bool identical = to_csv(run(1).rows) == csv;
  for (std::size_t w : {4u, 8u}) identical &= to_csv(run(w).rows) == csv;
  double avg_mi = 0, avg_mdi = 0;
  std::string detail;
  for (std::size_t r = 0; r < first.rows.size(); ++r) {
    const Variant v = cfg.variants[r];
    if (v == Variant::kMifgsm) avg_mi = first.average(r);
    if (v == Variant::kMdi2) avg_mdi = first.average(r);
    detail += std::string(variant_name(v)) + "=" + format_rate(first.average(r)) + " ";
  }
  return {identical && avg_mdi >= avg_mi,
          std::string(identical ? "CSV bit-identical" : "CSV DIFFERS") + " across reruns and workers 1/4/8; averages " +
              detail};
}

Verdict criterion10(const Bench& b, const fs::path& workdir) {
  using K = FormatError::Kind;
  const fs::path dir = workdir / "persistence";
  fs::create_directories(dir);
  bool ok = true;
  std::string detail;
  for (const auto& cp : b.zoo) {
    const fs::path p = dir / (cp.id() + ".dvat");
    save_checkpoint(cp, p);
    const auto bytes = read_file_bytes(p);
    const Checkpoint back = load_checkpoint(p);
    save_checkpoint(back, p);
    ok &= back == cp && read_file_bytes(p) == bytes;
  }
  detail += std::to_string(b.zoo.size()) + " checkpoints round-trip";

  AdvBatch batch;
  const AttackConfig cfg = family_plan(Variant::kMdi2, 0.1, 0.01, 10, 0.5, 5).attack;
  batch.config = fingerprint(cfg);
  batch.seed = cfg.seed;
  const auto ens = Ensemble<float>::single(b.plain[0]->model);
  for (std::size_t i = 0; i < 8; ++i)
    batch.examples.push_back(attack(ens, b.ev.image(i), std::span<const int>(&b.ev.labels[i], 1), cfg, i));
  const fs::path ap = dir / "adv.dvat";
  save_adv_batch(batch, ap);
  const auto adv_bytes = read_file_bytes(ap);
  const AdvBatch back = load_adv_batch(ap);
  save_adv_batch(back, ap);
  ok &= back == batch && read_file_bytes(ap) == adv_bytes;
  detail += ", adv batch of 8 round-trips";

  const auto kind_of = [](const std::vector<std::uint8_t>& bytes) -> int {
    try {
      from_container(decode_container(bytes));
    } catch (const FormatError& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  const auto good = encode_container(to_container(b.zoo[0]));
  std::vector<std::pair<std::string, K>> expected;
  std::vector<int> got;
  auto bad = good;
  bad[1] = 'X';
  got.push_back(kind_of(bad));
  expected.push_back({"magic", K::kBadMagic});
  bad = good;
  bad[4] = 9;
  bad.resize(bad.size() - 4);
  {
    const std::uint32_t crc = crc32_of(bad);
    for (int i = 0; i < 4; ++i) bad.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
  }
  got.push_back(kind_of(bad));
  expected.push_back({"version", K::kVersionMismatch});
  got.push_back(kind_of(std::vector<std::uint8_t>(good.begin(), good.end() - 7)));
  expected.push_back({"truncation", K::kTruncated});
  bad = good;
  bad[good.size() - 100] ^= 0x01;
  got.push_back(kind_of(bad));
  expected.push_back({"crc", K::kCrcMismatch});
  Container c = to_container(b.zoo[0]);
  c.tensors[0].value = Tensor<float>({1, 1, 1, 1});
  got.push_back(kind_of(encode_container(c)));
  expected.push_back({"shape", K::kShapeMismatch});
  c = to_container(b.zoo[0]);
  c.tensors[0].name = "renamed";
  got.push_back(kind_of(encode_container(c)));
  expected.push_back({"name", K::kNameMismatch});
  std::set<int> distinct(got.begin(), got.end());
  for (std::size_t i = 0; i < got.size(); ++i) {
    const bool hit = got[i] == static_cast<int>(expected[i].second);
    ok &= hit;
    if (!hit) detail += ", wrong error for " + expected[i].first;
  }
  ok &= distinct.size() == got.size();
  detail += ", " + std::to_string(distinct.size()) + " distinct corruption errors";
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path workdir = "acceptance_work";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      workdir = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string t; std::getline(ss, t, ',');) only.insert(std::stoi(t));
    } else {
      std::fprintf(stderr, "usage: acceptance [--workdir DIR] [--only 1,2,...]\n");
      return 2;
    }
  }
  fs::create_directories(workdir);
  const auto selected = [&](int k) { return only.empty() || only.count(k) > 0; };

  const char* names[] = {"",
                         "gradient correctness",
                         "degradation identities",
                         "constraint suite",
                         "white-box strength",
                         "transferability ordering",
                         "hold-out ensemble ordering",
                         "p-sweep trend",
                         "C&W parity",
                         "NIPS protocol reproducibility",
                         "persistence"};
  std::size_t failed = 0;
  const auto report = [&](int k, const std::function<Verdict()>& f) {
    if (!selected(k)) return;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s %2d %s: %s [%.0fs]\n", v.pass ? "PASS" : "FAIL", k, names[k], v.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  };

  report(1, criterion1);
  if (only.empty() || *only.rbegin() >= 2) {
    const Bench b = make_bench(workdir);
    report(2, [&] { return criterion2(b); });
    report(3, [&] { return criterion3(b); });
    report(4, [&] { return criterion4(b); });
    report(5, [&] { return criterion5(b); });
    report(6, [&] { return criterion6(b); });
    report(7, [&] { return criterion7(b); });
    report(8, [&] { return criterion8(b); });
    report(9, [&] { return criterion9(b); });
    report(10, [&] { return criterion10(b, workdir); });
  }
  return failed == 0 ? 0 : 1;
}
