#pragma once

// Training loop: margin-only warm-up, then per-epoch instance refinement and
// mini-batch Adam on (L_pure + L_hard + L_noisy) + alpha * L_cmp, with
// ablation variants and peak-validation model selection.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nirnl/cmp.hpp"
#include "nirnl/dataio.hpp"
#include "nirnl/encoder.hpp"
#include "nirnl/eval.hpp"
#include "nirnl/nir.hpp"
#include "nirnl/numkit.hpp"

namespace nirnl {

// full:         every term
// no_cmp:       margin term reported but not optimised
// drop_noisy:   noisy-tagged instances removed from the batch altogether
// hard_as_pure: hard instances go through the unweighted pure loss
// cmp_only:     margin term only
// naive_ce:     no partition; every instance through the pure loss with its given label (baseline)
enum class Variant { full, no_cmp, drop_noisy, hard_as_pure, cmp_only, naive_ce };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_cmp: return "no_cmp";
    case Variant::drop_noisy: return "drop_noisy";
    case Variant::hard_as_pure: return "hard_as_pure";
    case Variant::cmp_only: return "cmp_only";
    case Variant::naive_ce: return "naive_ce";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (auto v : {Variant::full, Variant::no_cmp, Variant::drop_noisy, Variant::hard_as_pure, Variant::cmp_only,
                 Variant::naive_ce})
    if (s == to_string(v)) return v;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

inline const char* to_string(BarycenterMode m) { return m == BarycenterMode::mean ? "mean" : "em"; }
inline const char* to_string(BarycenterSource s) { return s == BarycenterSource::all ? "all" : "trusted"; }

// Variants compared in the ablation table.
inline constexpr std::array<Variant, 5> kAblationVariants = {Variant::full, Variant::no_cmp, Variant::drop_noisy,
                                                             Variant::hard_as_pure, Variant::cmp_only};

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 50;
  std::size_t warmup_epochs = 5;
  std::size_t batch_size = 100;
  double learning_rate = 1e-4;
  std::size_t k_neighbors = 10;
  double margin = 0.2;
  double alpha = 1.0;
  double lambda_entropic = 1.0;
  double clamp_eps = 1e-8;
  std::size_t embed_dim = 512;
  std::vector<std::size_t> hidden_visual = {1024};
  std::vector<std::size_t> hidden_text = {1024};
  BarycenterMode barycenter_mode = BarycenterMode::em;
  BarycenterSource barycenter_source = BarycenterSource::all;
  Variant variant = Variant::full;

  double em_tol = 1e-6;
  std::size_t em_max_iters = 50;

  void validate() const {
    if (warmup_epochs > epochs) throw std::invalid_argument("config: warmup_epochs exceeds epochs");
    if (batch_size < 2) throw std::invalid_argument("config: batch_size must be >= 2");
    if (k_neighbors < 1) throw std::invalid_argument("config: k_neighbors must be >= 1");
    if (!(alpha >= 0)) throw std::invalid_argument("config: alpha must be >= 0");
    if (!(margin >= 0)) throw std::invalid_argument("config: margin must be >= 0");
    if (!(learning_rate > 0)) throw std::invalid_argument("config: learning_rate must be > 0");
    if (!(lambda_entropic > 0)) throw std::invalid_argument("config: lambda_entropic must be > 0");
    if (!(clamp_eps > 0)) throw std::invalid_argument("config: clamp_eps must be > 0");
    if (embed_dim == 0) throw std::invalid_argument("config: embed_dim must be > 0");
    for (const auto* h : {&hidden_visual, &hidden_text})
      for (auto d : *h)
        if (d == 0) throw std::invalid_argument("config: hidden dims must be > 0");
  }

  RefineOptions refine_options() const {
    return {k_neighbors, {barycenter_mode, lambda_entropic, em_tol, em_max_iters}, barycenter_source, clamp_eps};
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::size_t> parse_dims(const std::string& v) {
  std::vector<std::size_t> dims;
  if (v.empty() || v == "none") return dims;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) dims.push_back(std::stoull(trim(tok)));
  return dims;
}

inline std::string format_dims(const std::vector<std::size_t>& dims) {
  if (dims.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
  return s;
}

}  // namespace detail

inline void apply_config_entry(TrainConfig& c, const std::string& key, const std::string& value) {
  auto as_size = [&] {
    std::size_t pos = 0;
    const auto v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return static_cast<std::size_t>(v);
  };
  auto as_double = [&] {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  };
  if (key == "seed") c.seed = as_size();
  else if (key == "epochs") c.epochs = as_size();
  else if (key == "warmup_epochs") c.warmup_epochs = as_size();
  else if (key == "batch_size") c.batch_size = as_size();
  else if (key == "learning_rate") c.learning_rate = as_double();
  else if (key == "k_neighbors") c.k_neighbors = as_size();
  else if (key == "margin") c.margin = as_double();
  else if (key == "alpha") c.alpha = as_double();
  else if (key == "lambda_entropic") c.lambda_entropic = as_double();
  else if (key == "clamp_eps") c.clamp_eps = as_double();
  else if (key == "embed_dim") c.embed_dim = as_size();
  else if (key == "hidden_visual") c.hidden_visual = detail::parse_dims(value);
  else if (key == "hidden_text") c.hidden_text = detail::parse_dims(value);
  else if (key == "barycenter_mode") {
    if (value == "mean") c.barycenter_mode = BarycenterMode::mean;
    else if (value == "em") c.barycenter_mode = BarycenterMode::em;
    else throw std::invalid_argument("expected mean|em");
  } else if (key == "barycenter_source") {
    if (value == "all") c.barycenter_source = BarycenterSource::all;
    else if (value == "trusted") c.barycenter_source = BarycenterSource::trusted;
    else throw std::invalid_argument("expected all|trusted");
  } else if (key == "variant") c.variant = variant_from_string(value);
  else throw std::invalid_argument("unknown key");
}

// Flat key=value text; '#' starts a comment.
inline TrainConfig parse_config(std::istream& in) {
  TrainConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    try {
      apply_config_entry(c, key, value);
    } catch (const std::exception& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + " (" + key + "=" + value + "): " + e.what());
    }
  }
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("config file not found: " + p.string());
  return parse_config(in);
}

inline std::string format_config(const TrainConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "seed=" << c.seed << '\n'
    << "epochs=" << c.epochs << '\n'
    << "warmup_epochs=" << c.warmup_epochs << '\n'
    << "batch_size=" << c.batch_size << '\n'
    << "learning_rate=" << c.learning_rate << '\n'
    << "k_neighbors=" << c.k_neighbors << '\n'
    << "margin=" << c.margin << '\n'
    << "alpha=" << c.alpha << '\n'
    << "lambda_entropic=" << c.lambda_entropic << '\n'
    << "clamp_eps=" << c.clamp_eps << '\n'
    << "embed_dim=" << c.embed_dim << '\n'
    << "hidden_visual=" << detail::format_dims(c.hidden_visual) << '\n'
    << "hidden_text=" << detail::format_dims(c.hidden_text) << '\n'
    << "barycenter_mode=" << to_string(c.barycenter_mode) << '\n'
    << "barycenter_source=" << to_string(c.barycenter_source) << '\n'
    << "variant=" << to_string(c.variant) << '\n';
  return o.str();
}

// Adam with bias correction, one instance per encoder.
class Adam {
 public:
  Adam(std::size_t num_values, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(num_values, 0.0f), v_(num_values, 0.0f) {}

  void step(EncoderParams<float>& params, EncoderParams<float>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    std::vector<std::span<float>> gblocks;
    grads.for_each_block([&](std::span<float> g, std::size_t) { gblocks.push_back(g); });
    std::size_t bi = 0;
    params.for_each_block([&](std::span<float> p, std::size_t off) {
      auto g = gblocks[bi++];
      for (std::size_t k = 0; k < p.size(); ++k) {
        float& m = m_[off + k];
        float& v = v_[off + k];
        m = static_cast<float>(b1_ * m + (1.0 - b1_) * g[k]);
        v = static_cast<float>(b2_ * v + (1.0 - b2_) * g[k] * g[k]);
        const double mhat = m / c1;
        const double vhat = v / c2;
        p[k] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    });
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::vector<float> m_, v_;
  std::size_t t_ = 0;
};

// One mini-batch: embeddings plus the epoch snapshot restricted to its rows.
template <typename T>
struct LossBatch {
  const BasicMatrix<T>& fv;
  const BasicMatrix<T>& ft;
  std::span<const int> labels;
  std::span<const Subset> tags;       // empty during warm-up
  std::span<const int> corrected;     // meaningful for noisy rows
  std::span<const double> weights;    // meaningful for hard rows
};

template <typename T>
struct TotalLoss {
  T total = 0;
  T loss_p = 0, loss_h = 0, loss_n = 0, loss_cmp = 0;
  BasicMatrix<T> grad_fv, grad_ft;
};

namespace detail {

template <typename T>
void add_scaled(BasicMatrix<T>& dst, const BasicMatrix<T>& src, T scale) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += scale * src.data()[i];
}

}  // namespace detail

// Warm-up (no snapshot): alpha * L_cmp only. Afterwards the configured
// variant of (L_p + L_h + L_n) + alpha * L_cmp, subset terms normalised by
// their in-batch counts.
template <typename T>
TotalLoss<T> total_loss(const LossBatch<T>& b, const BarycenterSet* centers, const TrainConfig& cfg, bool warmup) {
  const std::size_t n = b.fv.rows();
  TotalLoss<T> out{T(0), T(0), T(0), T(0), T(0), BasicMatrix<T>(n, b.fv.cols()), BasicMatrix<T>(n, b.ft.cols())};
  const T alpha = static_cast<T>(cfg.alpha);
  const T cmp_weight = cfg.variant == Variant::no_cmp ? T(0) : alpha;
  const T margin = static_cast<T>(cfg.margin);

  if (warmup) {
    auto c = loss_cmp(b.fv, b.ft, margin);
    out.loss_cmp = c.loss;
    out.total = cmp_weight * c.loss;
    detail::add_scaled(out.grad_fv, c.grad_fv, cmp_weight);
    detail::add_scaled(out.grad_ft, c.grad_ft, cmp_weight);
    return out;
  }
  if (!centers) throw std::logic_error("total_loss: no refinement snapshot after warm-up");
  if (cfg.variant != Variant::naive_ce && b.tags.size() != n)
    throw std::logic_error("total_loss: partition tags missing for batch");

  std::vector<std::size_t> pure, hard, noisy, kept;
  for (std::size_t i = 0; i < n; ++i) {
    if (cfg.variant == Variant::naive_ce) {
      pure.push_back(i);
      kept.push_back(i);
      continue;
    }
    const Subset s = b.tags[i];
    if (s != Subset::noisy || cfg.variant != Variant::drop_noisy) kept.push_back(i);
    if (s == Subset::pure || (s == Subset::hard && cfg.variant == Variant::hard_as_pure)) pure.push_back(i);
    else if (s == Subset::hard) hard.push_back(i);
    else if (cfg.variant != Variant::drop_noisy) noisy.push_back(i);
  }

  // Margin term over the whole batch, or the non-noisy rows for drop_noisy.
  if (kept.size() == n) {
    auto c = loss_cmp(b.fv, b.ft, margin);
    out.loss_cmp = c.loss;
    detail::add_scaled(out.grad_fv, c.grad_fv, cmp_weight);
    detail::add_scaled(out.grad_ft, c.grad_ft, cmp_weight);
  } else {
    auto c = loss_cmp(b.fv.gather_rows(kept), b.ft.gather_rows(kept), margin);
    out.loss_cmp = c.loss;
    for (std::size_t r = 0; r < kept.size(); ++r)
      for (std::size_t k = 0; k < b.fv.cols(); ++k) {
        out.grad_fv(kept[r], k) += cmp_weight * c.grad_fv(r, k);
        out.grad_ft(kept[r], k) += cmp_weight * c.grad_ft(r, k);
      }
  }

  if (cfg.variant == Variant::cmp_only) {
    out.total = alpha * out.loss_cmp;
    return out;
  }

  auto lp = loss_pure(std::span<const std::size_t>(pure), b.fv, b.ft, b.labels, *centers, cfg.clamp_eps);
  std::vector<double> no_weights;
  std::span<const double> weights = b.weights;
  if (hard.empty() && weights.size() != n) {
    no_weights.assign(n, 0.0);
    weights = no_weights;
  }
  auto lh = loss_hard(std::span<const std::size_t>(hard), b.fv, b.ft, b.labels, *centers, weights, cfg.clamp_eps);
  auto ln = loss_noisy(std::span<const std::size_t>(noisy), b.corrected, b.fv, b.ft, *centers, cfg.clamp_eps);
  out.loss_p = lp.loss;
  out.loss_h = lh.loss;
  out.loss_n = ln.loss;
  for (const auto* part : {&lp, &lh, &ln}) {
    detail::add_scaled(out.grad_fv, part->grad_fv, T(1));
    detail::add_scaled(out.grad_ft, part->grad_ft, T(1));
  }
  out.total = out.loss_p + out.loss_h + out.loss_n + cmp_weight * out.loss_cmp;
  return out;
}

struct MetricsRecord {
  std::size_t epoch = 0;
  double loss_total = 0, loss_p = 0, loss_h = 0, loss_n = 0, loss_cmp = 0;
  std::size_t n_pure = 0, n_hard = 0, n_noisy = 0;
  double val_map_i2t = 0, val_map_t2i = 0;
  std::optional<double> pure_purity;
  std::optional<double> noisy_recall;
  std::optional<double> correction_accuracy;

  double val_map_mean() const { return 0.5 * (val_map_i2t + val_map_t2i); }
};

inline nlohmann::ordered_json to_json(const MetricsRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr); };
  return {{"epoch", r.epoch},
          {"loss_total", r.loss_total},
          {"loss_p", r.loss_p},
          {"loss_h", r.loss_h},
          {"loss_n", r.loss_n},
          {"loss_cmp", r.loss_cmp},
          {"n_pure", r.n_pure},
          {"n_hard", r.n_hard},
          {"n_noisy", r.n_noisy},
          {"val_map_i2t", r.val_map_i2t},
          {"val_map_t2i", r.val_map_t2i},
          {"pure_purity", opt(r.pure_purity)},
          {"noisy_recall", opt(r.noisy_recall)},
          {"correction_accuracy", opt(r.correction_accuracy)}};
}

struct EncoderPair {
  EncoderParams<float> visual;
  EncoderParams<float> text;
};

struct EpochState {
  const MetricsRecord& record;
  const EncoderPair& params;
  const Refinement* refinement;            // null during warm-up
  std::span<const std::size_t> train_ids;  // dataset index of each refinement row
};

using EpochCallback = std::function<void(const EpochState&)>;

struct TrainResult {
  EncoderPair best;
  std::size_t best_epoch = 0;
  std::vector<MetricsRecord> log;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline EncoderPair init_encoders(const TrainConfig& cfg, std::size_t d_visual, std::size_t d_text) {
  auto dims = [&](std::size_t din, const std::vector<std::size_t>& hidden) {
    std::vector<std::size_t> d{din};
    d.insert(d.end(), hidden.begin(), hidden.end());
    d.push_back(cfg.embed_dim);
    return d;
  };
  auto rv = Rng::derive(cfg.seed, 1);
  auto rt = Rng::derive(cfg.seed, 2);
  const auto dv = dims(d_visual, cfg.hidden_visual);
  const auto dt = dims(d_text, cfg.hidden_text);
  return {init_params<float>(std::span<const std::size_t>(dv), rv), init_params<float>(std::span<const std::size_t>(dt), rt)};
}

struct SplitMaps {
  double i2t = 0;
  double t2i = 0;
  double mean() const { return 0.5 * (i2t + t2i); }
};

// Both retrieval directions over one split, relevance by reference labels.
inline SplitMaps evaluate_split(const EncoderPair& enc, const PairedDataset& ds, std::span<const std::size_t> ids) {
  if (ids.empty()) return {};
  const auto fv = forward(enc.visual, ds.visual.gather_rows(ids));
  const auto ft = forward(enc.text, ds.text.gather_rows(ids));
  std::vector<int> labels;
  labels.reserve(ids.size());
  for (auto i : ids) labels.push_back(ds.reference_labels()[i]);
  return {map_score(fv, ft, labels, labels), map_score(ft, fv, labels, labels)};
}

// Returns the parameters of the post-warm-up epoch with the highest mean
// validation MAP (earliest on ties; the initial parameters when no epoch ran).
inline TrainResult run(const PairedDataset& ds, const SplitManifest& splits, const TrainConfig& cfg,
                       const EpochCallback& on_epoch = {}) {
  cfg.validate();
  ds.validate();
  if (splits.train.empty()) throw std::invalid_argument("train: empty training split");

  EncoderPair enc = init_encoders(cfg, ds.visual.cols(), ds.text.cols());
  Adam opt_v(enc.visual.num_values(), cfg.learning_rate);
  Adam opt_t(enc.text.num_values(), cfg.learning_rate);
  auto shuffle_rng = Rng::derive(cfg.seed, 3);

  const auto& ids = splits.train;
  const std::size_t n = ids.size();
  const Matrix xv = ds.visual.gather_rows(ids);
  const Matrix xt = ds.text.gather_rows(ids);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = ds.labels[ids[i]];
  std::optional<std::vector<int>> clean;
  if (ds.clean_labels) {
    clean.emplace(n);
    for (std::size_t i = 0; i < n; ++i) (*clean)[i] = (*ds.clean_labels)[ids[i]];
  }

  TrainResult result{enc, 0, {}};
  double best_val = -1.0;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const bool warmup = epoch <= cfg.warmup_epochs;
    MetricsRecord rec;
    rec.epoch = epoch;

    std::optional<Refinement> snap;
    std::vector<int> corrected_all(n, -1);
    std::vector<double> weight_all(n, 0.0);
    if (!warmup) {
      const Matrix fv_all = forward(enc.visual, xv);
      const Matrix ft_all = forward(enc.text, xt);
      snap = refine_instances(fv_all, ft_all, std::span<const int>(labels), ds.num_classes, cfg.refine_options());
      const auto& a = snap->assignment;
      for (std::size_t i = 0; i < n; ++i) {
        if (a.corrected[i]) corrected_all[i] = *a.corrected[i];
        if (a.weight[i]) weight_all[i] = *a.weight[i];
      }
      rec.n_pure = a.count(Subset::pure);
      rec.n_hard = a.count(Subset::hard);
      rec.n_noisy = a.count(Subset::noisy);
      if (clean) {
        const auto rep = partition_report(a, labels, *clean);
        rec.pure_purity = rep.pure_purity;
        rec.noisy_recall = rep.noisy_recall;
        rec.correction_accuracy = rep.correction_accuracy;
      }
    }

    shuffle_rng.shuffle(order.begin(), order.end());
    std::size_t num_batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::span<const std::size_t> rows(order.data() + start, end - start);
      const std::size_t bn = rows.size();

      const auto cache_v = forward_cached(enc.visual, xv.gather_rows(rows));
      const auto cache_t = forward_cached(enc.text, xt.gather_rows(rows));
      std::vector<int> b_labels(bn), b_corrected(bn);
      std::vector<Subset> b_tags;
      std::vector<double> b_weights(bn);
      for (std::size_t r = 0; r < bn; ++r) {
        b_labels[r] = labels[rows[r]];
        b_corrected[r] = corrected_all[rows[r]];
        b_weights[r] = weight_all[rows[r]];
        if (snap) b_tags.push_back(snap->assignment.tags[rows[r]]);
      }
      LossBatch<float> batch{cache_v.output(), cache_t.output(), b_labels, b_tags, b_corrected, b_weights};
      auto loss = total_loss(batch, snap ? &snap->centers : nullptr, cfg, warmup);
      if (!std::isfinite(loss.total))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(num_batches + 1));

      auto gv = backward_cached(enc.visual, cache_v, loss.grad_fv, false);
      auto gt = backward_cached(enc.text, cache_t, loss.grad_ft, false);
      opt_v.step(enc.visual, gv.params);
      opt_t.step(enc.text, gt.params);

      rec.loss_total += loss.total;
      rec.loss_p += loss.loss_p;
      rec.loss_h += loss.loss_h;
      rec.loss_n += loss.loss_n;
      rec.loss_cmp += loss.loss_cmp;
      ++num_batches;
    }
    for (double* v : {&rec.loss_total, &rec.loss_p, &rec.loss_h, &rec.loss_n, &rec.loss_cmp})
      *v /= static_cast<double>(num_batches);

    const auto val = evaluate_split(enc, ds, splits.val);
    rec.val_map_i2t = val.i2t;
    rec.val_map_t2i = val.t2i;
    result.log.push_back(rec);
    // Warm-up epochs only compete when no refinement epoch exists.
    const bool eligible = !warmup || cfg.epochs == cfg.warmup_epochs;
    if (eligible && rec.val_map_mean() > best_val) {
      best_val = rec.val_map_mean();
      result.best = enc;
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(EpochState{result.log.back(), enc, snap ? &*snap : nullptr, ids});
  }
  return result;
}

}  // namespace nirnl
