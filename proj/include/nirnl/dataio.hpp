#pragma once

// Paired two-modality datasets: on-disk layout, splits, symmetric label
// corruption and a synthetic Gaussian-cluster generator.
//
// Directory layout:
//   meta.json         {"version":1,"n":N,"d_visual":dv,"d_text":dt,"num_classes":C}
//   visual.f32        N x dv row-major little-endian float32, no header
//   text.f32          N x dt likewise
//   labels.csv        one 0-based class index per line
//   clean_labels.csv  optional, same format
//   splits.json       {"train":[...],"val":[...],"test":[...]}
//   flips.csv         "index,original,corrupted" header + one line per flip

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nirnl/numkit.hpp"

namespace nirnl {

namespace fs = std::filesystem;

struct PairedDataset {
  Matrix visual;
  Matrix text;
  std::vector<int> labels;
  int num_classes = 0;
  std::optional<std::vector<int>> clean_labels;

  std::size_t size() const { return labels.size(); }

  // Labels used to judge retrieval relevance: clean when known.
  const std::vector<int>& reference_labels() const { return clean_labels ? *clean_labels : labels; }

  void validate() const {
    if (num_classes < 1) throw std::invalid_argument("dataset: num_classes must be >= 1");
    if (visual.rows() != labels.size() || text.rows() != labels.size())
      throw std::invalid_argument("dataset: visual/text/labels row counts disagree (" +
                                  std::to_string(visual.rows()) + "/" + std::to_string(text.rows()) +
                                  "/" + std::to_string(labels.size()) + ")");
    auto check = [&](const std::vector<int>& ls, const char* what) {
      for (std::size_t i = 0; i < ls.size(); ++i)
        if (ls[i] < 0 || ls[i] >= num_classes)
          throw std::invalid_argument(std::string("dataset: ") + what + "[" + std::to_string(i) +
                                      "] = " + std::to_string(ls[i]) + " outside [0, " +
                                      std::to_string(num_classes) + ")");
    };
    check(labels, "labels");
    if (clean_labels) {
      if (clean_labels->size() != labels.size())
        throw std::invalid_argument("dataset: clean_labels length differs from labels");
      check(*clean_labels, "clean_labels");
    }
    if (!visual.all_finite()) throw std::invalid_argument("dataset: non-finite visual feature");
    if (!text.all_finite()) throw std::invalid_argument("dataset: non-finite text feature");
  }

  friend bool operator==(const PairedDataset&, const PairedDataset&) = default;
};

struct SplitManifest {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;

  friend bool operator==(const SplitManifest&, const SplitManifest&) = default;
};

struct FlipRecord {
  std::size_t index;
  int original;
  int corrupted;

  friend bool operator==(const FlipRecord&, const FlipRecord&) = default;
};

using FlipManifest = std::vector<FlipRecord>;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

inline void write_f32(const fs::path& p, const Matrix& m) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + p.string() + " for writing");
  std::vector<std::uint32_t> buf(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) buf[i] = to_little(std::bit_cast<std::uint32_t>(m.data()[i]));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  if (!out) throw DataError("write failed: " + p.string());
}

inline Matrix read_f32(const fs::path& p, std::size_t rows, std::size_t cols) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  in.seekg(0, std::ios::end);
  const auto actual = static_cast<std::uintmax_t>(in.tellg());
  const std::uintmax_t expected = static_cast<std::uintmax_t>(rows) * cols * 4;
  if (actual != expected)
    throw DataError(p.filename().string() + ": expected " + std::to_string(expected) + " bytes, found " +
                    std::to_string(actual));
  in.seekg(0);
  std::vector<std::uint32_t> buf(rows * cols);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected));
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < buf.size(); ++i) m.data()[i] = std::bit_cast<float>(to_little(buf[i]));
  return m;
}

inline void write_labels(const fs::path& p, const std::vector<int>& labels) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw DataError("cannot open " + p.string() + " for writing");
  for (int l : labels) out << l << '\n';
}

inline std::vector<int> read_labels(const fs::path& p, int num_classes) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  std::vector<int> labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t pos = 0;
    long v = 0;
    try {
      v = std::stol(line, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != line.size())
      throw DataError(p.filename().string() + " line " + std::to_string(lineno) + ": not an integer: '" +
                      line + "'");
    if (v < 0 || v >= num_classes)
      throw DataError(p.filename().string() + " line " + std::to_string(lineno) + ": label " +
                      std::to_string(v) + " outside [0, " + std::to_string(num_classes) + ")");
    labels.push_back(static_cast<int>(v));
  }
  return labels;
}

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(p.filename().string() + ": " + e.what());
  }
}

}  // namespace detail

inline void save_dataset(const fs::path& dir, const PairedDataset& ds) {
  ds.validate();
  fs::create_directories(dir);
  nlohmann::json meta = {{"version", 1},
                         {"n", ds.size()},
                         {"d_visual", ds.visual.cols()},
                         {"d_text", ds.text.cols()},
                         {"num_classes", ds.num_classes}};
  std::ofstream(dir / "meta.json", std::ios::trunc) << meta.dump() << '\n';
  detail::write_f32(dir / "visual.f32", ds.visual);
  detail::write_f32(dir / "text.f32", ds.text);
  detail::write_labels(dir / "labels.csv", ds.labels);
  if (ds.clean_labels)
    detail::write_labels(dir / "clean_labels.csv", *ds.clean_labels);
  else
    fs::remove(dir / "clean_labels.csv");
}

inline PairedDataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  const auto meta = detail::read_json(dir / "meta.json");
  std::size_t n = 0, dv = 0, dt = 0;
  int c = 0;
  try {
    if (meta.at("version").get<int>() != 1) throw DataError("meta.json: unsupported version");
    n = meta.at("n").get<std::size_t>();
    dv = meta.at("d_visual").get<std::size_t>();
    dt = meta.at("d_text").get<std::size_t>();
    c = meta.at("num_classes").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("meta.json: ") + e.what());
  }
  if (c < 1) throw DataError("meta.json: num_classes must be >= 1");

  PairedDataset ds;
  ds.num_classes = c;
  ds.visual = detail::read_f32(dir / "visual.f32", n, dv);
  ds.text = detail::read_f32(dir / "text.f32", n, dt);
  ds.labels = detail::read_labels(dir / "labels.csv", c);
  if (ds.labels.size() != n)
    throw DataError("labels.csv: expected " + std::to_string(n) + " labels, found " +
                    std::to_string(ds.labels.size()));
  if (fs::exists(dir / "clean_labels.csv")) {
    ds.clean_labels = detail::read_labels(dir / "clean_labels.csv", c);
    if (ds.clean_labels->size() != n)
      throw DataError("clean_labels.csv: expected " + std::to_string(n) + " labels, found " +
                      std::to_string(ds.clean_labels->size()));
  }
  try {
    ds.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
  return ds;
}

inline SplitManifest split_dataset(std::size_t n, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                                   Rng& rng) {
  if (n_train + n_val + n_test != n)
    throw std::invalid_argument("split sizes " + std::to_string(n_train) + "+" + std::to_string(n_val) + "+" +
                                std::to_string(n_test) + " do not sum to " + std::to_string(n));
  const auto perm = rng.permutation(n);
  SplitManifest s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
               perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
  return s;
}

inline void save_splits(const fs::path& p, const SplitManifest& s) {
  nlohmann::json j = {{"train", s.train}, {"val", s.val}, {"test", s.test}};
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw DataError("cannot open " + p.string() + " for writing");
  out << j.dump() << '\n';
}

inline SplitManifest load_splits(const fs::path& p, std::size_t n) {
  const auto j = detail::read_json(p);
  SplitManifest s;
  try {
    s.train = j.at("train").get<std::vector<std::size_t>>();
    s.val = j.at("val").get<std::vector<std::size_t>>();
    s.test = j.at("test").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("splits.json: " + std::string(e.what()));
  }
  std::vector<char> seen(n, 0);
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (auto i : *part) {
      if (i >= n) throw DataError("splits.json: index " + std::to_string(i) + " out of range");
      if (seen[i]) throw DataError("splits.json: index " + std::to_string(i) + " appears twice");
      seen[i] = 1;
    }
  if (s.train.size() + s.val.size() + s.test.size() != n)
    throw DataError("splits.json: does not cover all " + std::to_string(n) + " instances");
  return s;
}

struct CorruptionResult {
  std::vector<int> labels;
  FlipManifest flips;
};

// Replaces exactly round(rate * N) labels, chosen without replacement, with a
// class drawn uniformly from the other C - 1 classes. Flips are sorted by index.
inline CorruptionResult inject_symmetric_noise(const std::vector<int>& labels, double rate, int num_classes,
                                               Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("noise rate must lie in [0, 1]");
  for (int l : labels)
    if (l < 0 || l >= num_classes) throw std::invalid_argument("label outside [0, num_classes)");
  const auto count = static_cast<std::size_t>(std::llround(rate * static_cast<double>(labels.size())));
  if (count > 0 && num_classes < 2)
    throw std::invalid_argument("symmetric noise needs at least 2 classes");

  CorruptionResult res{labels, {}};
  auto order = rng.permutation(labels.size());
  order.resize(count);
  std::sort(order.begin(), order.end());
  res.flips.reserve(count);
  for (auto i : order) {
    auto r = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes - 1)));
    if (r >= labels[i]) ++r;
    res.labels[i] = r;
    res.flips.push_back({i, labels[i], r});
  }
  return res;
}

inline void save_flips(const fs::path& p, const FlipManifest& flips) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw DataError("cannot open " + p.string() + " for writing");
  out << "index,original,corrupted\n";
  for (const auto& f : flips) out << f.index << ',' << f.original << ',' << f.corrupted << '\n';
}

inline FlipManifest load_flips(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  std::string line;
  std::getline(in, line);
  if (line != "index,original,corrupted") throw DataError("flips.csv: bad header");
  FlipManifest flips;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    FlipRecord r{};
    char c1 = 0, c2 = 0;
    if (!(ss >> r.index >> c1 >> r.original >> c2 >> r.corrupted) || c1 != ',' || c2 != ',')
      throw DataError("flips.csv line " + std::to_string(lineno) + ": malformed");
    flips.push_back(r);
  }
  return flips;
}

struct SynthOptions {
  int num_classes = 10;
  std::size_t n = 2000;
  std::size_t d_visual = 64;
  std::size_t d_text = 48;
  double separation = 10.0;
  double noise_std = 1.0;
};

// Latent space has one axis per class; class centers sit on scaled basis
// vectors so every pair is `separation` apart. Each instance is its center
// plus N(0, noise_std^2) latent jitter, pushed through a fixed random affine
// map per modality (entries N(0, 1/C)) with N(0, noise_std^2) observation noise.
inline PairedDataset synth_generate(const SynthOptions& opt, Rng& rng) {
  if (opt.num_classes < 2) throw std::invalid_argument("synth: need at least 2 classes");
  if (opt.n < static_cast<std::size_t>(opt.num_classes)) throw std::invalid_argument("synth: n < classes");
  if (opt.d_visual == 0 || opt.d_text == 0) throw std::invalid_argument("synth: dimensions must be positive");
  if (opt.noise_std < 0 || opt.separation < 0) throw std::invalid_argument("synth: negative scale");

  const auto c = static_cast<std::size_t>(opt.num_classes);
  const double center_scale = opt.separation / std::sqrt(2.0);
  const double map_scale = 1.0 / std::sqrt(static_cast<double>(c));

  auto draw_map = [&](std::size_t d_out, MatrixD& a, std::vector<double>& b) {
    a = MatrixD(d_out, c);
    for (auto& v : a.data()) v = rng.normal() * map_scale;
    b.resize(d_out);
    for (auto& v : b) v = rng.normal();
  };
  MatrixD av, at;
  std::vector<double> bv, bt;
  draw_map(opt.d_visual, av, bv);
  draw_map(opt.d_text, at, bt);

  PairedDataset ds;
  ds.num_classes = opt.num_classes;
  ds.labels.resize(opt.n);
  for (std::size_t i = 0; i < opt.n; ++i) ds.labels[i] = static_cast<int>(i % c);
  rng.shuffle(ds.labels.begin(), ds.labels.end());

  ds.visual = Matrix(opt.n, opt.d_visual);
  ds.text = Matrix(opt.n, opt.d_text);
  std::vector<double> latent(c);
  auto project = [&](const MatrixD& a, const std::vector<double>& b, std::span<float> out) {
    for (std::size_t r = 0; r < out.size(); ++r) {
      double s = b[r];
      for (std::size_t k = 0; k < c; ++k) s += a(r, k) * latent[k];
      out[r] = static_cast<float>(s + opt.noise_std * rng.normal());
    }
  };
  for (std::size_t i = 0; i < opt.n; ++i) {
    for (std::size_t k = 0; k < c; ++k) latent[k] = opt.noise_std * rng.normal();
    latent[static_cast<std::size_t>(ds.labels[i])] += center_scale;
    project(av, bv, ds.visual.row(i));
    project(at, bt, ds.text.row(i));
  }
  ds.clean_labels = ds.labels;
  return ds;
}

}  // namespace nirnl
