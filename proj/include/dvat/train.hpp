#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "dvat/attacks.hpp"
#include "dvat/checkpoint.hpp"
#include "dvat/data.hpp"
#include "dvat/error.hpp"
#include "dvat/network.hpp"
#include "dvat/ops.hpp"
#include "dvat/rng.hpp"

namespace dvat {

struct AdversarialTraining {
  double epsilon = 0.1;
  double fraction = 0.5;
};

struct TrainConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  // Global gradient-norm clip per batch; 0 disables.
  double clip_norm = 10.0;
  std::uint64_t seed = 0;
  std::optional<AdversarialTraining> adversarial;
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(cfg.learning_rate > 0)) throw ConfigError("train: learning_rate must be > 0");
  if (!(cfg.momentum >= 0 && cfg.momentum < 1)) throw ConfigError("train: momentum must lie in [0,1)");
  if (!(cfg.clip_norm >= 0)) throw ConfigError("train: clip_norm must be >= 0");
  if (cfg.adversarial) {
    if (!(cfg.adversarial->fraction >= 0 && cfg.adversarial->fraction <= 1))
      throw ConfigError("train: adversarial fraction must lie in [0,1]");
    if (!(cfg.adversarial->epsilon >= 0)) throw ConfigError("train: adversarial epsilon must be >= 0");
  }
}

inline double accuracy(const Model<float>& model, const Dataset& ds) {
  if (ds.size() == 0) return 0.0;
  const auto pred = predict(model, ds.images);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == ds.labels[i];
  return static_cast<double>(hit) / static_cast<double>(ds.size());
}

// Minibatch SGD with momentum on the softmax cross-entropy. With adversarial
// training, the first round(fraction * batch) samples of every shuffled batch are
// swapped for FGSM examples crafted against the current parameters.
// Deterministic given (spec, data, cfg).
inline Checkpoint train(const NetworkSpec& spec, const Dataset& train_set, const Dataset& test_set,
                        const TrainConfig& cfg) {
  validate(cfg);
  validate(spec);
  if (train_set.size() == 0) throw InputError("train: empty dataset");
  for (int y : train_set.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= spec.num_classes)
      throw InputError("train: label " + std::to_string(y) + " >= num_classes");

  Model<float> model = build_network<float>(spec, cfg.seed);
  std::vector<std::vector<float>> velocity;
  for (const auto& p : model.params) velocity.emplace_back(p.value.size(), 0.0f);

  Rng shuffle_rng(stream_seed(cfg.seed, 0x5eed));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto lr = static_cast<float>(cfg.learning_rate);
  const auto mom = static_cast<float>(cfg.momentum);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
      std::swap(order[i - 1], order[j]);
    }
    std::size_t batch_index = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size, ++batch_index) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - first);
      const std::span<const std::size_t> idx(order.data() + first, n);
      Tensor<float> xb = gather_batch(train_set.images, idx);
      std::vector<int> yb(n);
      for (std::size_t k = 0; k < n; ++k) yb[k] = train_set.labels[idx[k]];

      if (cfg.adversarial) {
        const auto k_adv = static_cast<std::size_t>(std::lround(cfg.adversarial->fraction * static_cast<double>(n)));
        if (k_adv > 0) {
          const Tensor<float> adv = fgsm_batch(model, xb.slice_batch(0, k_adv),
                                               std::span<const int>(yb.data(), k_adv), cfg.adversarial->epsilon);
          std::copy(adv.data.begin(), adv.data.end(), xb.data.begin());
        }
      }

      Tape<float> tape;
      ParamVars<float> pv;
      Var<float> loss = ops::softmax_cross_entropy(forward(model, tape, tape.constant(std::move(xb)), &pv), yb);
      if (!std::isfinite(loss.value()[0])) {
        throw TrainingError("train: loss diverged at epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(batch_index));
      }
      tape.backward(loss);
      float gscale = 1.0f;
      if (cfg.clip_norm > 0) {
        double sq = 0.0;
        for (const auto& p : pv)
          for (float gv : tape.grad_buffer(p.id())) sq += static_cast<double>(gv) * gv;
        if (std::sqrt(sq) > cfg.clip_norm) gscale = static_cast<float>(cfg.clip_norm / std::sqrt(sq));
      }
      for (std::size_t p = 0; p < model.params.size(); ++p) {
        const auto& g = tape.grad_buffer(pv[p].id());
        auto& v = velocity[p];
        auto& w = model.params[p].value.data;
        for (std::size_t i = 0; i < w.size(); ++i) {
          v[i] = mom * v[i] + gscale * g[i];
          w[i] -= lr * v[i];
          if (!std::isfinite(w[i])) {
            throw TrainingError("train: parameter " + model.params[p].name + " diverged at epoch " +
                                std::to_string(epoch) + " batch " + std::to_string(batch_index));
          }
        }
      }
    }
  }

  Checkpoint cp;
  cp.model = std::move(model);
  cp.meta.seed = cfg.seed;
  cp.meta.epochs = cfg.epochs;
  cp.meta.adversarial = cfg.adversarial.has_value();
  if (cfg.adversarial) {
    cp.meta.adv_epsilon = cfg.adversarial->epsilon;
    cp.meta.adv_fraction = cfg.adversarial->fraction;
  }
  cp.meta.train_accuracy = accuracy(cp.model, train_set);
  cp.meta.test_accuracy = accuracy(cp.model, test_set);
  return cp;
}

}  // namespace dvat
