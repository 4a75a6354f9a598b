#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dvat/checkpoint.hpp"
#include "dvat/error.hpp"
#include "dvat/harness.hpp"
#include "dvat/tensor.hpp"

namespace dvat {

inline constexpr const char* kCsvHeader = "source,target,rate,n,whitebox,variant,eps,alpha,N,mu,p,seed";

inline std::string format_rate(double r) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", r);
  return buf;
}

inline void check_csv_field(const std::string& s) {
  if (s.empty() || s.find_first_of(",\n\r\"") != std::string::npos)
    throw ConfigError("report: field '" + s + "' cannot be written to CSV");
}

// Rows in source-major order; the header is written once even for several matrices.
inline std::string to_csv(std::span<const TransferMatrix> matrices) {
  if (matrices.empty()) throw ProtocolError("report: refusing to emit a report with no matrices");
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (const auto& m : matrices) {
    if (m.cells.empty()) throw ProtocolError("report: refusing to emit an empty matrix");
    const RunLabels& l = m.labels;
    for (const auto& f : {l.variant, l.eps, l.alpha, l.iterations, l.mu, l.p, l.seed}) check_csv_field(f);
    for (const auto& c : m.cells) {
      check_csv_field(c.source);
      check_csv_field(c.target);
      os << c.source << ',' << c.target << ',' << format_rate(c.rate()) << ',' << c.n << ',' << (c.whitebox ? 1 : 0)
         << ',' << l.variant << ',' << l.eps << ',' << l.alpha << ',' << l.iterations << ',' << l.mu << ',' << l.p
         << ',' << l.seed << '\n';
    }
  }
  return os.str();
}

inline std::string to_csv(const TransferMatrix& m) { return to_csv(std::span<const TransferMatrix>(&m, 1)); }

// Inverse of to_csv. Consecutive rows sharing the run columns form one matrix.
// Counts are recovered as round(rate * n), exact while n < 5000.
inline std::vector<TransferMatrix> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader)
    throw FormatError(FormatError::Kind::kMalformed, "report: missing or wrong CSV header");
  std::vector<TransferMatrix> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 12)
      throw FormatError(FormatError::Kind::kMalformed,
                        "report: line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields");
    RunLabels l{f[5], f[6], f[7], f[8], f[9], f[10], f[11]};
    if (out.empty() || !(out.back().labels == l)) {
      // A repeated (source, target) pair also starts a new matrix.
      out.emplace_back();
      out.back().labels = l;
    } else {
      const auto& cells = out.back().cells;
      if (std::any_of(cells.begin(), cells.end(), [&](const TransferCell& c) { return c.source == f[0] && c.target == f[1]; })) {
        out.emplace_back();
        out.back().labels = l;
      }
    }
    TransferMatrix& m = out.back();
    TransferCell c;
    c.source = f[0];
    c.target = f[1];
    const double rate = parse_real(f[2]);
    try {
      c.n = static_cast<std::size_t>(std::stoull(f[3]));
    } catch (const std::exception&) {
      throw FormatError(FormatError::Kind::kMalformed, "report: bad count '" + f[3] + "'");
    }
    if (!(rate >= 0 && rate <= 1)) throw FormatError(FormatError::Kind::kMalformed, "report: rate outside [0,1]");
    if (f[4] != "0" && f[4] != "1") throw FormatError(FormatError::Kind::kMalformed, "report: bad whitebox flag");
    c.fooled = static_cast<std::size_t>(std::llround(rate * static_cast<double>(c.n)));
    c.whitebox = f[4] == "1";
    if (std::find(m.sources.begin(), m.sources.end(), c.source) == m.sources.end()) m.sources.push_back(c.source);
    if (std::find(m.targets.begin(), m.targets.end(), c.target) == m.targets.end()) m.targets.push_back(c.target);
    m.cells.push_back(std::move(c));
  }
  for (const auto& m : out)
    if (m.cells.size() != m.sources.size() * m.targets.size())
      throw FormatError(FormatError::Kind::kCountMismatch, "report: matrix is not rectangular");
  return out;
}

// Aligned text table: one block per matrix, white-box cells marked with '*'.
inline std::string to_table(std::span<const TransferMatrix> matrices) {
  std::ostringstream os;
  for (const auto& m : matrices) {
    const RunLabels& l = m.labels;
    os << "variant=" << l.variant << " eps=" << l.eps << " alpha=" << l.alpha << " N=" << l.iterations
       << " mu=" << l.mu << " p=" << l.p << " seed=" << l.seed << '\n';
    std::size_t w0 = 6;
    for (const auto& s : m.sources) w0 = std::max(w0, s.size());
    std::size_t wc = 8;
    for (const auto& t : m.targets) wc = std::max(wc, t.size() + 1);
    auto pad = [&](const std::string& s, std::size_t w) { return std::string(w > s.size() ? w - s.size() : 0, ' ') + s; };
    os << pad("source", w0);
    for (const auto& t : m.targets) os << ' ' << pad(t, wc);
    os << '\n';
    for (std::size_t s = 0; s < m.sources.size(); ++s) {
      os << pad(m.sources[s], w0);
      for (std::size_t t = 0; t < m.targets.size(); ++t) {
        const auto& c = m.at(s, t);
        os << ' ' << pad(format_rate(c.rate()) + (c.whitebox ? "*" : " "), wc);
      }
      os << '\n';
    }
    os << '\n';
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw FormatError(FormatError::Kind::kIo, "write to '" + path.string() + "' failed");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// Writes <stem>.csv and <stem>.txt into `dir`.
inline void emit_report(std::span<const TransferMatrix> matrices, const std::filesystem::path& dir,
                        const std::string& stem) {
  const std::string csv = to_csv(matrices);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError(FormatError::Kind::kIo, "cannot create '" + dir.string() + "': " + ec.message());
  write_text(dir / (stem + ".csv"), csv);
  write_text(dir / (stem + ".txt"), to_table(matrices));
}

// Binary grayscale PGM (P5) of one channel of a [1,C,H,W] or [C,H,W] image in [0,1].
inline void write_pgm(const Tensor<float>& image, const std::filesystem::path& path, std::size_t channel = 0) {
  const auto& s = image.shape;
  if (s.size() < 3) throw ConfigError("write_pgm: expected an image tensor");
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1], c = s[s.size() - 3];
  if (channel >= c) throw ConfigError("write_pgm: channel out of range");
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i) {
    const float v = std::clamp(image.data[channel * h * w + i], 0.0f, 1.0f);
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
  }
  write_text(path, bytes);
}

}  // namespace dvat
