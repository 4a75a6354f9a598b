#pragma once

#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <system_error>

#include "dvat/container.hpp"
#include "dvat/error.hpp"
#include "dvat/network.hpp"

namespace dvat {

struct TrainingMeta {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  bool adversarial = false;
  double adv_epsilon = 0.0;
  double adv_fraction = 0.0;

  friend bool operator==(const TrainingMeta&, const TrainingMeta&) = default;
};

// Trained parameters plus how they were obtained. Immutable once loaded and
// safe to share between threads.
struct Checkpoint {
  Model<float> model;
  TrainingMeta meta;

  const std::string& id() const { return model.spec.id; }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

// Spec fingerprint plus a CRC over the parameter bytes.
inline std::string fingerprint(const Model<float>& m) {
  Container c{format_spec(m.spec), m.params};
  char hex[9];
  std::snprintf(hex, sizeof(hex), "%08x", crc32_of(encode_container(c)));
  return m.spec.id + ":" + hex;
}

inline std::string fingerprint(const Checkpoint& cp) { return fingerprint(cp.model); }

namespace detail {

inline std::string checkpoint_text(const Checkpoint& cp) {
  std::string text = format_spec(cp.model.spec);
  const TrainingMeta& m = cp.meta;
  text += "meta seed " + std::to_string(m.seed) + "\n";
  text += "meta epochs " + std::to_string(m.epochs) + "\n";
  text += "meta train_accuracy " + format_real(m.train_accuracy) + "\n";
  text += "meta test_accuracy " + format_real(m.test_accuracy) + "\n";
  text += "meta adversarial " + std::string(m.adversarial ? "1" : "0") + "\n";
  text += "meta adv_epsilon " + format_real(m.adv_epsilon) + "\n";
  text += "meta adv_fraction " + format_real(m.adv_fraction) + "\n";
  return text;
}

inline void parse_meta_line(TrainingMeta& m, const std::string& line) {
  std::istringstream ls(line);
  std::string tag, key, value;
  ls >> tag >> key >> value;
  if (key == "seed") m.seed = std::stoull(value);
  else if (key == "epochs") m.epochs = std::stoull(value);
  else if (key == "train_accuracy") m.train_accuracy = parse_real(value);
  else if (key == "test_accuracy") m.test_accuracy = parse_real(value);
  else if (key == "adversarial") m.adversarial = value == "1";
  else if (key == "adv_epsilon") m.adv_epsilon = parse_real(value);
  else if (key == "adv_fraction") m.adv_fraction = parse_real(value);
  else throw FormatError(FormatError::Kind::kMalformed, "unknown checkpoint meta key '" + key + "'");
}

}  // namespace detail

inline Container to_container(const Checkpoint& cp) {
  return Container{detail::checkpoint_text(cp), cp.model.params};
}

inline Checkpoint from_container(Container c) {
  using K = FormatError::Kind;
  std::string spec_text;
  Checkpoint cp;
  std::istringstream in(c.text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("meta ", 0) == 0) {
      detail::parse_meta_line(cp.meta, line);
    } else {
      spec_text += line;
      spec_text += '\n';
    }
  }
  try {
    cp.model.spec = parse_spec(spec_text);
    validate(cp.model.spec);
  } catch (const ConfigError& e) {
    throw FormatError(K::kMalformed, std::string("checkpoint spec: ") + e.what());
  }
  const auto layout = parameter_layout(cp.model.spec);
  if (layout.size() != c.tensors.size()) {
    throw FormatError(K::kNameMismatch, "checkpoint has " + std::to_string(c.tensors.size()) +
                                            " parameters, spec needs " + std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (c.tensors[i].name != layout[i].first) {
      throw FormatError(K::kNameMismatch, "parameter " + std::to_string(i) + " is named '" +
                                              c.tensors[i].name + "', expected '" + layout[i].first + "'");
    }
    if (c.tensors[i].value.shape != layout[i].second) {
      throw FormatError(K::kShapeMismatch, "parameter '" + layout[i].first + "' has shape " +
                                               shape_str(c.tensors[i].value.shape) + ", expected " +
                                               shape_str(layout[i].second));
    }
  }
  cp.model.params = std::move(c.tensors);
  return cp;
}

inline void save_checkpoint(const Checkpoint& cp, const std::filesystem::path& path) {
  save_container(to_container(cp), path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return from_container(load_container(path));
}

}  // namespace dvat
