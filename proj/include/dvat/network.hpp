#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dvat/autograd.hpp"
#include "dvat/error.hpp"
#include "dvat/ops.hpp"
#include "dvat/rng.hpp"
#include "dvat/tensor.hpp"

namespace dvat {

enum class LayerKind { kConv, kRelu, kGlobalAvgPool, kDense };

struct Layer {
  LayerKind kind = LayerKind::kRelu;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = true;

  static Layer conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad,
                    bool bias = true) {
    return {LayerKind::kConv, in, out, k, stride, pad, bias};
  }
  static Layer relu() { return {LayerKind::kRelu}; }
  static Layer gap() { return {LayerKind::kGlobalAvgPool}; }
  static Layer dense(std::size_t in, std::size_t out) { return {LayerKind::kDense, in, out}; }

  friend bool operator==(const Layer&, const Layer&) = default;
};

inline const char* layer_name(LayerKind k) {
  switch (k) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kGlobalAvgPool: return "gap";
    case LayerKind::kDense: return "dense";
  }
  return "?";
}

// Architecture of a classifier. The network ends in raw logits; softmax lives in
// the loss.
struct NetworkSpec {
  std::string id;
  std::size_t channels = 1, height = 28, width = 28;
  std::size_t num_classes = 10;
  std::vector<Layer> layers;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

// Canonical text form, one directive per line. Stable across versions: it is
// embedded verbatim in checkpoint files.
inline std::string format_spec(const NetworkSpec& spec) {
  std::ostringstream os;
  os << "network " << spec.id << '\n';
  os << "input " << spec.channels << ' ' << spec.height << ' ' << spec.width << '\n';
  os << "classes " << spec.num_classes << '\n';
  for (const Layer& l : spec.layers) {
    os << layer_name(l.kind);
    if (l.kind == LayerKind::kConv) {
      os << ' ' << l.in << ' ' << l.out << ' ' << l.kernel << ' ' << l.stride << ' ' << l.padding;
      if (!l.bias) os << " nobias";
    } else if (l.kind == LayerKind::kDense) {
      os << ' ' << l.in << ' ' << l.out;
    }
    os << '\n';
  }
  return os.str();
}

inline NetworkSpec parse_spec(std::string_view text) {
  NetworkSpec spec;
  spec.layers.clear();
  std::istringstream in{std::string(text)};
  std::string line;
  bool seen_header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    const auto fail = [&] {
      throw ConfigError("network spec line " + std::to_string(lineno) + ": cannot parse '" + line + "'");
    };
    if (word == "network") {
      if (!(ls >> spec.id)) fail();
      seen_header = true;
    } else if (word == "input") {
      if (!(ls >> spec.channels >> spec.height >> spec.width)) fail();
    } else if (word == "classes") {
      if (!(ls >> spec.num_classes)) fail();
    } else if (word == "conv") {
      Layer l = Layer::conv(0, 0, 0, 1, 0);
      if (!(ls >> l.in >> l.out >> l.kernel >> l.stride >> l.padding)) fail();
      if (std::string flag; ls >> flag) {
        if (flag != "nobias") fail();
        l.bias = false;
      }
      spec.layers.push_back(l);
    } else if (word == "relu") {
      spec.layers.push_back(Layer::relu());
    } else if (word == "gap") {
      spec.layers.push_back(Layer::gap());
    } else if (word == "dense") {
      Layer l = Layer::dense(0, 0);
      if (!(ls >> l.in >> l.out)) fail();
      spec.layers.push_back(l);
    } else {
      fail();
    }
    std::string extra;
    if (ls >> extra) fail();
  }
  if (!seen_header) throw ConfigError("network spec: missing 'network <id>' line");
  return spec;
}

namespace detail {

inline std::size_t conv_out(std::size_t in, const Layer& l) {
  if (l.kernel > in + 2 * l.padding) return 0;
  return (in + 2 * l.padding - l.kernel) / l.stride + 1;
}

}  // namespace detail

// Output spatial size after the conv stack for a square-agnostic (h, w) input;
// {0, 0} when some conv cannot fit.
inline std::pair<std::size_t, std::size_t> feature_map_size(const NetworkSpec& spec, std::size_t h,
                                                            std::size_t w) {
  for (const Layer& l : spec.layers) {
    if (l.kind == LayerKind::kGlobalAvgPool) break;
    if (l.kind != LayerKind::kConv) continue;
    h = detail::conv_out(h, l);
    w = detail::conv_out(w, l);
    if (h == 0 || w == 0) return {0, 0};
  }
  return {h, w};
}

// Smallest square input the network accepts.
inline std::size_t min_input_size(const NetworkSpec& spec) {
  for (std::size_t s = 1; s <= 4096; ++s)
    if (feature_map_size(spec, s, s).first > 0) return s;
  return 0;
}

// Throws ConfigError naming the first inconsistent edge of the layer chain.
inline void validate(const NetworkSpec& spec) {
  if (spec.id.empty() || spec.id.find_first_of(" \t\n") != std::string::npos)
    throw ConfigError("network id must be a non-empty token");
  if (spec.channels == 0 || spec.height == 0 || spec.width == 0)
    throw ConfigError("network " + spec.id + ": canonical input has a zero extent");
  if (spec.num_classes < 2) throw ConfigError("network " + spec.id + ": needs at least 2 classes");
  if (spec.layers.empty()) throw ConfigError("network " + spec.id + ": no layers");

  bool spatial = true;
  std::size_t width = spec.channels;
  std::string producer = "input";
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& l = spec.layers[i];
    const std::string here = "layer " + std::to_string(i) + " (" + layer_name(l.kind) + ")";
    const auto edge = [&](const std::string& msg) {
      throw ConfigError("network " + spec.id + ": bad edge " + producer + " -> " + here + ": " + msg);
    };
    switch (l.kind) {
      case LayerKind::kConv:
        if (!spatial) edge("conv after global pooling");
        if (l.kernel == 0 || l.stride == 0 || l.out == 0) edge("kernel, stride and out-channels must be positive");
        if (l.in != width)
          edge("expects " + std::to_string(l.in) + " in-channels, receives " + std::to_string(width));
        width = l.out;
        break;
      case LayerKind::kRelu:
        break;
      case LayerKind::kGlobalAvgPool:
        if (!spatial) edge("second global pooling");
        spatial = false;
        break;
      case LayerKind::kDense:
        if (spatial) edge("dense layer needs global pooling before it");
        if (l.out == 0) edge("out-features must be positive");
        if (l.in != width)
          edge("expects " + std::to_string(l.in) + " features, receives " + std::to_string(width));
        width = l.out;
        break;
    }
    producer = here;
  }
  if (spatial || spec.layers.back().kind != LayerKind::kDense)
    throw ConfigError("network " + spec.id + ": final layer must be dense");
  if (width != spec.num_classes) {
    throw ConfigError("network " + spec.id + ": emits " + std::to_string(width) + " logits, expected " +
                      std::to_string(spec.num_classes));
  }
  if (feature_map_size(spec, spec.height, spec.width).first == 0)
    throw ConfigError("network " + spec.id + ": canonical input too small for the conv stack");
}

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// Parameter names and shapes implied by `spec`, in storage order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const NetworkSpec& spec) {
  std::vector<std::pair<std::string, Shape>> out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& l = spec.layers[i];
    const std::string p = "layer" + std::to_string(i);
    if (l.kind == LayerKind::kConv) {
      out.push_back({p + ".weight", {l.out, l.in, l.kernel, l.kernel}});
      if (l.bias) out.push_back({p + ".bias", {l.out}});
    } else if (l.kind == LayerKind::kDense) {
      out.push_back({p + ".weight", {l.out, l.in}});
      out.push_back({p + ".bias", {l.out}});
    }
  }
  return out;
}

// Network architecture plus parameters.
template <typename T>
struct Model {
  NetworkSpec spec;
  std::vector<NamedTensor<T>> params;

  template <typename U>
  Model<U> cast() const {
    Model<U> m;
    m.spec = spec;
    for (const auto& p : params) m.params.push_back({p.name, p.value.template cast<U>()});
    return m;
  }

  friend bool operator==(const Model&, const Model&) = default;
};

// Uniform fan-in initialization, weights in +-sqrt(6 / fan_in), zero biases.
template <typename T = float>
Model<T> build_network(const NetworkSpec& spec, std::uint64_t seed) {
  validate(spec);
  Model<T> m;
  m.spec = spec;
  Rng rng(seed);
  for (auto& [name, shape] : parameter_layout(spec)) {
    Tensor<T> t(shape);
    if (shape.size() > 1) {
      const std::size_t fan_in = numel(shape) / shape[0];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    m.params.push_back({name, std::move(t)});
  }
  return m;
}

// Parameter leaves of one forward pass; filled when gradients w.r.t. the
// parameters are requested.
template <typename T>
using ParamVars = std::vector<Var<T>>;

template <typename T>
void check_input(const NetworkSpec& spec, const Shape& shape) {
  if (shape.size() != 4)
    throw InputError("network " + spec.id + ": input must be [B,C,H,W], got " + shape_str(shape));
  if (shape[1] != spec.channels) {
    throw InputError("network " + spec.id + ": expects " + std::to_string(spec.channels) +
                     " channels, got " + std::to_string(shape[1]));
  }
  if (feature_map_size(spec, shape[2], shape[3]).first == 0) {
    throw InputError("network " + spec.id + ": input " + std::to_string(shape[2]) + "x" +
                     std::to_string(shape[3]) + " below the minimum size " +
                     std::to_string(min_input_size(spec)));
  }
}

// Records the network on `tape` and returns the logits [B, num_classes].
template <typename T>
Var<T> forward(const Model<T>& model, Tape<T>& tape, const Var<T>& input, ParamVars<T>* param_vars = nullptr) {
  check_input<T>(model.spec, input.shape());
  std::vector<Var<T>> leaves;
  leaves.reserve(model.params.size());
  for (const auto& p : model.params) leaves.push_back(tape.leaf(p.value, param_vars != nullptr));
  if (param_vars) *param_vars = leaves;

  Var<T> h = input;
  std::size_t next = 0;
  for (const Layer& l : model.spec.layers) {
    switch (l.kind) {
      case LayerKind::kConv:
        if (l.bias) {
          h = ops::conv2d(h, leaves[next], leaves[next + 1], l.stride, l.padding);
          next += 2;
        } else {
          h = ops::conv2d(h, leaves[next], l.stride, l.padding);
          next += 1;
        }
        break;
      case LayerKind::kRelu:
        h = ops::relu(h);
        break;
      case LayerKind::kGlobalAvgPool:
        h = ops::global_avg_pool(h);
        break;
      case LayerKind::kDense:
        h = ops::dense(h, leaves[next], leaves[next + 1]);
        next += 2;
        break;
    }
  }
  return h;
}

// Forward-only logits, evaluated in chunks of `chunk` samples.
template <typename T>
Tensor<T> logits(const Model<T>& model, const Tensor<T>& batch, std::size_t chunk = 256) {
  check_input<T>(model.spec, batch.shape);
  const std::size_t B = batch.shape[0], C = model.spec.num_classes;
  Tensor<T> out({B, C});
  for (std::size_t first = 0; first < B; first += chunk) {
    const std::size_t n = std::min(chunk, B - first);
    Tape<T> tape;
    Var<T> z = forward(model, tape, tape.leaf(batch.slice_batch(first, n)));
    std::copy(z.value().data.begin(), z.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(first * C));
  }
  return out;
}

// Row-wise argmax; ties go to the lowest class index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& z) {
  const std::size_t B = z.shape.at(0), C = z.shape.at(1);
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < C; ++j)
      if (z[b * C + j] > z[b * C + best]) best = j;
    out[b] = static_cast<int>(best);
  }
  return out;
}

template <typename T>
std::vector<int> predict(const Model<T>& model, const Tensor<T>& batch) {
  return argmax_rows(logits(model, batch));
}

// The four heterogeneous plain architectures used by the zoo, for 1x28x28 input
// and 10 classes unless overridden.
inline NetworkSpec zoo_spec(std::string_view name, std::size_t channels = 1, std::size_t size = 28,
                            std::size_t classes = 10) {
  NetworkSpec s;
  s.id = std::string(name);
  s.channels = channels;
  s.height = s.width = size;
  s.num_classes = classes;
  const std::size_t c = channels;
  // Convolutions carry no bias: zero padding then maps to zero features and only
  // rescales the pooled vector, so resize-and-pad inputs stay in distribution.
  const auto conv = [](std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad) {
    return Layer::conv(in, out, k, stride, pad, false);
  };
  const Layer relu = Layer::relu();
  if (name == "A") {
    // two strided large-kernel blocks
    s.layers = {conv(c, 16, 5, 2, 2), relu, conv(16, 32, 5, 2, 2), relu, Layer::gap(), Layer::dense(32, classes)};
  } else if (name == "B") {
    // four small-kernel blocks, widest of the zoo
    s.layers = {conv(c, 16, 3, 2, 1),  relu, conv(16, 32, 3, 1, 1), relu, conv(32, 48, 3, 2, 1),
                relu,                  conv(48, 48, 3, 1, 1), relu, Layer::gap(),        Layer::dense(48, classes)};
  } else if (name == "C") {
    // strided large-kernel stem, no pooling until GAP
    s.layers = {conv(c, 16, 5, 2, 2), relu,         conv(16, 32, 3, 2, 1),      relu, conv(32, 32, 3, 1, 1),
                relu,                 Layer::gap(), Layer::dense(32, classes)};
  } else if (name == "D") {
    // deeper, narrow stack
    s.layers = {conv(c, 8, 3, 1, 1),   relu, conv(8, 8, 3, 1, 1),   relu, conv(8, 12, 3, 2, 1),
                relu,                  conv(12, 12, 3, 1, 1), relu, conv(12, 16, 3, 2, 1), relu,
                Layer::gap(),          Layer::dense(16, classes)};
  } else {
    throw ConfigError("unknown zoo architecture '" + std::string(name) + "' (expected A, B, C or D)");
  }
  validate(s);
  return s;
}

}  // namespace dvat
