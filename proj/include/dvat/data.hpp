#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dvat/container.hpp"
#include "dvat/error.hpp"
#include "dvat/rng.hpp"
#include "dvat/tensor.hpp"

namespace dvat {

enum class Split { kTrain, kTest };

// Images in [0,1] with integer labels. Immutable after construction.
struct Dataset {
  Tensor<float> images;  // [N,C,H,W]
  std::vector<int> labels;
  std::size_t num_classes = 10;
  Split split = Split::kTrain;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.shape.at(1); }
  std::size_t height() const { return images.shape.at(2); }
  std::size_t width() const { return images.shape.at(3); }

  Tensor<float> image(std::size_t i) const { return images.slice_batch(i, 1); }
};

inline void validate(const Dataset& ds) {
  if (ds.images.rank() != 4) throw InputError("dataset images must be [N,C,H,W], got " + shape_str(ds.images.shape));
  if (ds.images.shape[0] != ds.labels.size()) {
    throw InputError("dataset has " + std::to_string(ds.images.shape[0]) + " images but " +
                     std::to_string(ds.labels.size()) + " labels");
  }
  for (float v : ds.images.data)
    if (!(v >= 0.0f && v <= 1.0f)) throw InputError("dataset pixel outside [0,1]");
  for (int y : ds.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= ds.num_classes)
      throw InputError("dataset label " + std::to_string(y) + " outside [0, " + std::to_string(ds.num_classes) + ")");
}

// Subset by index, keeping order.
inline Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.images = gather_batch(ds.images, indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(ds.labels.at(i));
  out.num_classes = ds.num_classes;
  out.split = ds.split;
  out.provenance = ds.provenance + "/subset";
  return out;
}

// ---------------------------------------------------------------------------
// IDX

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

}  // namespace detail

inline Dataset parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes,
                         std::size_t num_classes = 10, Split split = Split::kTrain) {
  using K = FormatError::Kind;
  if (image_bytes.size() < 16) throw FormatError(K::kTruncated, "idx images: truncated header");
  if (detail::be32(image_bytes, 0) != kIdxImageMagic) throw FormatError(K::kBadMagic, "idx images: wrong magic");
  if (label_bytes.size() < 8) throw FormatError(K::kTruncated, "idx labels: truncated header");
  if (detail::be32(label_bytes, 0) != kIdxLabelMagic) throw FormatError(K::kBadMagic, "idx labels: wrong magic");

  const std::size_t n = detail::be32(image_bytes, 4);
  const std::size_t rows = detail::be32(image_bytes, 8);
  const std::size_t cols = detail::be32(image_bytes, 12);
  const std::size_t n_labels = detail::be32(label_bytes, 4);
  if (n != n_labels) {
    throw FormatError(K::kCountMismatch, "idx: " + std::to_string(n) + " images but " + std::to_string(n_labels) +
                                             " labels");
  }
  if (image_bytes.size() - 16 < n * rows * cols) throw FormatError(K::kTruncated, "idx images: truncated pixel data");
  if (label_bytes.size() - 8 < n) throw FormatError(K::kTruncated, "idx labels: truncated label data");
  if (image_bytes.size() - 16 > n * rows * cols) throw FormatError(K::kMalformed, "idx images: trailing bytes");
  if (label_bytes.size() - 8 > n) throw FormatError(K::kMalformed, "idx labels: trailing bytes");

  Dataset ds;
  ds.images = Tensor<float>({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) ds.images[i] = static_cast<float>(image_bytes[16 + i]) / 255.0f;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = label_bytes[8 + i];
  ds.num_classes = num_classes;
  ds.split = split;
  ds.provenance = "idx:" + std::to_string(crc32_of(image_bytes)) + "/" + std::to_string(crc32_of(label_bytes));
  validate(ds);
  return ds;
}

inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::size_t num_classes = 10, Split split = Split::kTrain) {
  return parse_idx(read_file_bytes(images_path), read_file_bytes(labels_path), num_classes, split);
}

// Inverse of parse_idx for single-channel data: {image bytes, label bytes}.
inline std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> encode_idx(const Dataset& ds) {
  if (ds.channels() != 1) throw ConfigError("idx encoding needs single-channel images");
  std::vector<std::uint8_t> img, lab;
  detail::put_be32(img, kIdxImageMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.height()));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.width()));
  for (float v : ds.images.data) img.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  detail::put_be32(lab, kIdxLabelMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) lab.push_back(static_cast<std::uint8_t>(y));
  return {std::move(img), std::move(lab)};
}

// ---------------------------------------------------------------------------
// Synthetic glyphs

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t n_per_class = 100;
  std::size_t num_classes = 10;
  std::size_t size = 28;
  double noise = 0.1;
  double background = 0.0;
  double contrast = 1.0;
  // Geometric jitter per unit of noise amplitude: up to 30*noise pixels of shift,
  // 1.5*noise relative scale and 2*noise radians of rotation, times `jitter`.
  double jitter = 0.0;
  // Gaussian stroke profile width in 28-grid pixels; 0 selects a hard 1.75 px ramp.
  double stroke = 1.5;
  Split split = Split::kTrain;
};

// The harder family used for transfer benchmarks: faint, pose-jittered glyphs.
// On the plain family every model agrees on everything and transfer saturates.
inline SynthConfig bench_synth_config(std::uint64_t seed, std::size_t n_per_class, Split split = Split::kTrain) {
  SynthConfig c;
  c.seed = seed;
  c.n_per_class = n_per_class;
  c.split = split;
  c.contrast = 0.5;
  c.jitter = 1.0;
  return c;
}

namespace detail {

struct Stroke {
  double x0, y0, x1, y1;  // in units of a 28-pixel canvas
};

// Stroke sets per class. Classes beyond the table reuse its shapes rotated.
inline std::vector<Stroke> glyph_strokes(std::size_t cls) {
  static const std::vector<std::vector<Stroke>> base = {
      {{8, 8, 20, 8}, {20, 8, 20, 20}, {20, 20, 8, 20}, {8, 20, 8, 8}},  // square outline
      {{14, 4, 14, 24}},                                                  // vertical bar
      {{4, 14, 24, 14}},                                                  // horizontal bar
      {{5, 5, 23, 23}},                                                   // diagonal
      {{23, 5, 5, 23}},                                                   // anti-diagonal
      {{14, 5, 14, 23}, {5, 14, 23, 14}},                                 // plus
      {{6, 6, 22, 22}, {22, 6, 6, 22}},                                   // cross
      {{7, 7, 21, 7}, {7, 21, 21, 21}},                                   // two horizontal bars
      {{6, 22, 14, 6}, {14, 6, 22, 22}},                                  // chevron
      {{8, 6, 8, 22}, {8, 22, 20, 22}},                                   // corner
  };
  const auto& s = base[cls % base.size()];
  const std::size_t turn = cls / base.size();
  if (turn == 0) return s;
  const double a = 0.3 * static_cast<double>(turn);
  std::vector<Stroke> r;
  for (const Stroke& k : s) {
    const auto rot = [&](double x, double y) {
      const double dx = x - 14, dy = y - 14;
      return std::pair{14 + dx * std::cos(a) - dy * std::sin(a), 14 + dx * std::sin(a) + dy * std::cos(a)};
    };
    auto [ax, ay] = rot(k.x0, k.y0);
    auto [bx, by] = rot(k.x1, k.y1);
    r.push_back({ax, ay, bx, by});
  }
  return r;
}

inline double segment_distance(double px, double py, const Stroke& s) {
  const double vx = s.x1 - s.x0, vy = s.y1 - s.y0;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - s.x0) * vx + (py - s.y0) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (s.x0 + t * vx), dy = py - (s.y0 + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

// Placement of a glyph on the canvas: shift in 28-grid pixels, isotropic scale
// and rotation (radians) about the canvas centre.
struct Pose {
  double dx = 0, dy = 0, scale = 1, angle = 0;
};

inline std::vector<float> glyph(std::size_t cls, std::size_t size, const Pose& pose = {}, double stroke = 0.0) {
  const auto strokes = glyph_strokes(cls);
  const double unit = static_cast<double>(size) / 28.0;
  const double ca = std::cos(pose.angle), sa = std::sin(pose.angle);
  std::vector<float> img(size * size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      // Map the pixel back into the glyph's own frame.
      const double qx = (static_cast<double>(x) + 0.5) / unit - 14 - pose.dx;
      const double qy = (static_cast<double>(y) + 0.5) / unit - 14 - pose.dy;
      const double px = 14 + (ca * qx + sa * qy) / pose.scale;
      const double py = 14 + (-sa * qx + ca * qy) / pose.scale;
      double d = 1e9;
      for (const Stroke& s : strokes) d = std::min(d, segment_distance(px, py, s));
      const double r = d * pose.scale;
      img[y * size + x] = static_cast<float>(stroke > 0 ? std::exp(-0.5 * r * r / (stroke * stroke))
                                                        : std::clamp(1.75 - r, 0.0, 1.0));
    }
  return img;
}

}  // namespace detail

// Procedural glyph classes. The noise amplitude drives all per-sample variation:
// uniform pixel noise in +-noise and a random pose (see SynthConfig::jitter).
// With noise = 0 every sample of a class equals the class exemplar. Samples are
// interleaved by class; pixels are clamped to [0,1]. Deterministic in cfg.
inline Dataset synth_dataset(const SynthConfig& cfg) {
  if (cfg.n_per_class < 1) throw ConfigError("synth_dataset: n_per_class must be >= 1");
  if (cfg.num_classes < 2) throw ConfigError("synth_dataset: needs at least 2 classes");
  if (cfg.size < 8) throw ConfigError("synth_dataset: size must be >= 8");
  if (!(cfg.noise >= 0)) throw ConfigError("synth_dataset: noise amplitude must be >= 0");
  const std::size_t n = cfg.n_per_class * cfg.num_classes, px = cfg.size * cfg.size;
  const double shift = 30.0 * cfg.noise * cfg.jitter;
  const double scale = 1.5 * cfg.noise * cfg.jitter;
  const double angle = 2.0 * cfg.noise * cfg.jitter;

  Dataset ds;
  ds.images = Tensor<float>({n, 1, cfg.size, cfg.size});
  ds.labels.resize(n);
  Rng rng(cfg.seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % cfg.num_classes;
    ds.labels[i] = static_cast<int>(cls);
    detail::Pose pose;
    if (cfg.noise > 0) {
      pose.dx = rng.uniform(-shift, shift);
      pose.dy = rng.uniform(-shift, shift);
      pose.scale = 1.0 + rng.uniform(-scale, scale);
      pose.angle = rng.uniform(-angle, angle);
    }
    const std::vector<float> g = detail::glyph(cls, cfg.size, pose, cfg.stroke);
    float* dst = ds.images.data.data() + i * px;
    for (std::size_t k = 0; k < px; ++k) {
      const double noise = cfg.noise > 0 ? rng.uniform(-cfg.noise, cfg.noise) : 0.0;
      const double clean = cfg.background + cfg.contrast * static_cast<double>(g[k]);
      dst[k] = static_cast<float>(std::clamp(clean + noise, 0.0, 1.0));
    }
  }
  ds.num_classes = cfg.num_classes;
  ds.split = cfg.split;
  ds.provenance = "synth:" + std::to_string(cfg.seed) + "," + std::to_string(cfg.n_per_class) + "," +
                  std::to_string(cfg.num_classes) + "," + std::to_string(cfg.size) + " noise=" + format_real(cfg.noise) +
                  " bg=" + format_real(cfg.background) + " contrast=" + format_real(cfg.contrast) +
                  " jitter=" + format_real(cfg.jitter) + " stroke=" + format_real(cfg.stroke);
  validate(ds);
  return ds;
}

}  // namespace dvat
