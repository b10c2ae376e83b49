#pragma once

// Modality sub-networks: stacks of affine layers with relu/identity
// activations mapping raw features into the common space.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nirnl/dataio.hpp"
#include "nirnl/numkit.hpp"

namespace nirnl {

enum class Activation { relu, identity };

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

template <typename T>
struct Layer {
  BasicMatrix<T> weight;  // d_out x d_in
  std::vector<T> bias;    // d_out
  Activation activation = Activation::identity;

  std::size_t d_in() const { return weight.cols(); }
  std::size_t d_out() const { return weight.rows(); }

  friend bool operator==(const Layer&, const Layer&) = default;
};

template <typename T>
struct EncoderParams {
  std::vector<Layer<T>> layers;

  std::size_t input_dim() const { return layers.front().d_in(); }
  std::size_t output_dim() const { return layers.back().d_out(); }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  // Same shapes and activations, every value zero.
  EncoderParams zeros_like() const {
    EncoderParams z;
    for (const auto& l : layers)
      z.layers.push_back({BasicMatrix<T>(l.d_out(), l.d_in()), std::vector<T>(l.d_out(), T(0)), l.activation});
    return z;
  }

  // Visits (values, offset) for every weight block then every bias block, in
  // layer order; the same order as the flat checkpoint blob.
  template <typename Fn>
  void for_each_block(Fn&& fn) {
    std::size_t off = 0;
    for (auto& l : layers) {
      fn(l.weight.data(), off);
      off += l.weight.size();
    }
    for (auto& l : layers) {
      fn(std::span<T>(l.bias), off);
      off += l.bias.size();
    }
  }

  std::vector<T> flatten() const {
    std::vector<T> out;
    out.reserve(num_values());
    for (const auto& l : layers) out.insert(out.end(), l.weight.data().begin(), l.weight.data().end());
    for (const auto& l : layers) out.insert(out.end(), l.bias.begin(), l.bias.end());
    return out;
  }

  void assign_flat(std::span<const T> flat) {
    if (flat.size() != num_values()) throw std::invalid_argument("assign_flat: size mismatch");
    for_each_block([&](std::span<T> block, std::size_t off) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + block.size()), block.begin());
    });
  }

  template <typename U>
  EncoderParams<U> cast() const {
    EncoderParams<U> out;
    for (const auto& l : layers)
      out.layers.push_back({l.weight.template cast<U>(), std::vector<U>(l.bias.begin(), l.bias.end()), l.activation});
    return out;
  }

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

// dims = [d_in, hidden..., d_out]. Hidden layers use relu, the last identity.
// Weights ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), biases zero.
template <typename T = float>
EncoderParams<T> init_params(std::span<const std::size_t> dims, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("init_params: need input and output dims");
  for (auto d : dims)
    if (d == 0) throw std::invalid_argument("init_params: dims must be positive");
  EncoderParams<T> p;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::size_t din = dims[i], dout = dims[i + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(din));
    Layer<T> l{BasicMatrix<T>(dout, din), std::vector<T>(dout, T(0)),
               i + 2 == dims.size() ? Activation::identity : Activation::relu};
    for (auto& w : l.weight.data()) w = static_cast<T>(rng.uniform(-bound, bound));
    p.layers.push_back(std::move(l));
  }
  return p;
}

template <typename T = float>
EncoderParams<T> init_params(std::initializer_list<std::size_t> dims, Rng& rng) {
  std::vector<std::size_t> v(dims);
  return init_params<T>(std::span<const std::size_t>(v), rng);
}

// Activations of every layer; acts[0] is the input batch.
template <typename T>
struct ForwardCache {
  std::vector<BasicMatrix<T>> acts;
  const BasicMatrix<T>& output() const { return acts.back(); }
};

namespace detail {

template <typename T>
BasicMatrix<T> affine(const Layer<T>& l, const BasicMatrix<T>& x) {
  BasicMatrix<T> y(x.rows(), l.d_out());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row(i);
    auto yi = y.row(i);
    for (std::size_t o = 0; o < l.d_out(); ++o) {
      T s = l.bias[o];
      auto w = l.weight.row(o);
      for (std::size_t k = 0; k < xi.size(); ++k) s += w[k] * xi[k];
      yi[o] = (l.activation == Activation::relu && s < T(0)) ? T(0) : s;
    }
  }
  return y;
}

}  // namespace detail

template <typename T>
ForwardCache<T> forward_cached(const EncoderParams<T>& params, const BasicMatrix<T>& batch) {
  if (params.layers.empty()) throw std::invalid_argument("forward: empty encoder");
  if (batch.cols() != params.input_dim())
    throw std::invalid_argument("forward: batch has " + std::to_string(batch.cols()) + " columns, encoder expects " +
                                std::to_string(params.input_dim()));
  ForwardCache<T> cache;
  cache.acts.reserve(params.layers.size() + 1);
  cache.acts.push_back(batch);
  for (const auto& l : params.layers) cache.acts.push_back(detail::affine(l, cache.acts.back()));
  return cache;
}

template <typename T>
BasicMatrix<T> forward(const EncoderParams<T>& params, const BasicMatrix<T>& batch) {
  if (params.layers.empty()) throw std::invalid_argument("forward: empty encoder");
  if (batch.cols() != params.input_dim())
    throw std::invalid_argument("forward: batch has " + std::to_string(batch.cols()) + " columns, encoder expects " +
                                std::to_string(params.input_dim()));
  BasicMatrix<T> x = detail::affine(params.layers.front(), batch);
  for (std::size_t i = 1; i < params.layers.size(); ++i) x = detail::affine(params.layers[i], x);
  return x;
}

template <typename T>
struct EncoderGradients {
  EncoderParams<T> params;
  BasicMatrix<T> batch;
};

// Reverse-mode pass through a cached forward. Gradient w.r.t. the input batch
// is only materialised when `want_batch_grad` is set.
template <typename T>
EncoderGradients<T> backward_cached(const EncoderParams<T>& params, const ForwardCache<T>& cache,
                                    const BasicMatrix<T>& upstream, bool want_batch_grad = true) {
  const auto& out = cache.output();
  if (upstream.rows() != out.rows() || upstream.cols() != out.cols())
    throw std::invalid_argument("backward: upstream gradient shape mismatch");
  EncoderGradients<T> g{params.zeros_like(), {}};
  BasicMatrix<T> delta = upstream;
  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const auto& l = params.layers[li];
    const auto& x = cache.acts[li];
    const auto& y = cache.acts[li + 1];
    if (l.activation == Activation::relu)
      for (std::size_t i = 0; i < delta.size(); ++i)
        if (!(y.data()[i] > T(0))) delta.data()[i] = T(0);
    auto& gl = g.params.layers[li];
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto xi = x.row(i);
      auto di = delta.row(i);
      for (std::size_t o = 0; o < l.d_out(); ++o) {
        const T d = di[o];
        if (d == T(0)) continue;
        gl.bias[o] += d;
        auto gw = gl.weight.row(o);
        for (std::size_t k = 0; k < xi.size(); ++k) gw[k] += d * xi[k];
      }
    }
    if (li == 0 && !want_batch_grad) break;
    BasicMatrix<T> prev(x.rows(), l.d_in());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto di = delta.row(i);
      auto pi = prev.row(i);
      for (std::size_t o = 0; o < l.d_out(); ++o) {
        const T d = di[o];
        if (d == T(0)) continue;
        auto w = l.weight.row(o);
        for (std::size_t k = 0; k < pi.size(); ++k) pi[k] += d * w[k];
      }
    }
    delta = std::move(prev);
  }
  if (want_batch_grad) g.batch = std::move(delta);
  return g;
}

template <typename T>
EncoderGradients<T> backward(const EncoderParams<T>& params, const BasicMatrix<T>& batch,
                             const BasicMatrix<T>& upstream) {
  return backward_cached(params, forward_cached(params, batch), upstream, true);
}

// Checkpoint: params.json (shapes, activations, byte offsets) + params.f32
// (all weights then all biases, layer order, little-endian float32).
inline void save_checkpoint(const fs::path& dir, const EncoderParams<float>& params) {
  fs::create_directories(dir);
  nlohmann::json layers = nlohmann::json::array();
  std::size_t off = 0;
  std::vector<std::size_t> woff, boff;
  for (const auto& l : params.layers) {
    woff.push_back(off);
    off += l.weight.size() * 4;
  }
  for (const auto& l : params.layers) {
    boff.push_back(off);
    off += l.bias.size() * 4;
  }
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& l = params.layers[i];
    layers.push_back({{"d_in", l.d_in()},
                      {"d_out", l.d_out()},
                      {"activation", to_string(l.activation)},
                      {"weight_offset", woff[i]},
                      {"bias_offset", boff[i]}});
  }
  nlohmann::json manifest = {{"version", 1}, {"layers", layers}, {"total_bytes", off}};
  std::ofstream(dir / "params.json", std::ios::trunc) << manifest.dump(2) << '\n';
  const auto flat = params.flatten();
  detail::write_f32(dir / "params.f32", Matrix(1, flat.size(), flat));
}

inline EncoderParams<float> load_checkpoint(const fs::path& dir) {
  const auto manifest = detail::read_json(dir / "params.json");
  EncoderParams<float> p;
  std::size_t total = 0;
  try {
    for (const auto& jl : manifest.at("layers")) {
      const auto din = jl.at("d_in").get<std::size_t>();
      const auto dout = jl.at("d_out").get<std::size_t>();
      p.layers.push_back({Matrix(dout, din), std::vector<float>(dout, 0.0f),
                          activation_from_string(jl.at("activation").get<std::string>())});
    }
    total = manifest.at("total_bytes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("params.json: " + std::string(e.what()));
  }
  if (p.layers.empty()) throw DataError("params.json: no layers");
  for (std::size_t i = 1; i < p.layers.size(); ++i)
    if (p.layers[i].d_in() != p.layers[i - 1].d_out()) throw DataError("params.json: layer dims do not chain");
  if (total != p.num_values() * 4) throw DataError("params.json: total_bytes inconsistent with layer shapes");
  const auto blob = detail::read_f32(dir / "params.f32", 1, p.num_values());
  p.assign_flat(blob.data());
  return p;
}

}  // namespace nirnl
