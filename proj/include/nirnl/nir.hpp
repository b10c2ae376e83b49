#pragma once

// Neighbor-aware instance refining.
//
// Per epoch: KNN soft labels in each modality, a pure/hard/noisy split by
// agreement between the given label and the neighbor-consensus argmax, class
// barycenters in the common space, and the three subset losses that pull
// embeddings towards (corrected) class barycenters.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nirnl/cmp.hpp"
#include "nirnl/numkit.hpp"

namespace nirnl {

// Rows are per-instance class distributions; entries are multiples of 1/K.
struct SoftLabelTable {
  MatrixD visual;
  MatrixD text;
};

enum class Subset { pure, hard, noisy };

inline const char* to_string(Subset s) {
  switch (s) {
    case Subset::pure: return "pure";
    case Subset::hard: return "hard";
    case Subset::noisy: return "noisy";
  }
  return "?";
}

struct PartitionAssignment {
  std::vector<Subset> tags;
  std::vector<std::optional<int>> corrected;   // noisy instances only
  std::vector<std::optional<double>> weight;   // hard instances only

  std::size_t size() const { return tags.size(); }
  std::size_t count(Subset s) const { return static_cast<std::size_t>(std::count(tags.begin(), tags.end(), s)); }
};

struct BarycenterSet {
  MatrixD centers;  // C x d
  std::size_t num_classes() const { return centers.rows(); }
};

enum class BarycenterMode { mean, em };
enum class BarycenterSource { all, trusted };

struct BarycenterOptions {
  BarycenterMode mode = BarycenterMode::em;
  double lambda = 1.0;
  double tol = 1e-6;
  std::size_t max_iters = 50;
};

// Exact brute-force KNN by cosine similarity, query excluded, similarity ties
// broken by ascending index.
template <typename T>
MatrixD knn_soft_labels(const BasicMatrix<T>& emb, std::span<const int> labels, int num_classes, std::size_t k) {
  const std::size_t n = emb.rows();
  if (labels.size() != n) throw std::invalid_argument("knn_soft_labels: labels length mismatch");
  if (k < 1) throw std::invalid_argument("knn_soft_labels: K must be >= 1");
  if (k >= n)
    throw std::invalid_argument("knn_soft_labels: K = " + std::to_string(k) + " requires more than K instances (N = " +
                                std::to_string(n) + ")");
  const auto x = emb.template cast<double>();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) norms[i] = l2_norm(x.row(i));

  MatrixD soft(n, static_cast<std::size_t>(num_classes));
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      if (norms[i] != 0.0 && norms[j] != 0.0)
        s = std::clamp(dot(x.row(i), x.row(j)) / (norms[i] * norms[j]), -1.0, 1.0);
      cand.emplace_back(s, j);
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    std::vector<std::size_t> votes(static_cast<std::size_t>(num_classes), 0);
    for (std::size_t r = 0; r < k; ++r) {
      const int l = labels[cand[r].second];
      if (l < 0 || l >= num_classes) throw std::invalid_argument("knn_soft_labels: label out of range");
      ++votes[static_cast<std::size_t>(l)];
    }
    for (std::size_t c = 0; c < votes.size(); ++c) soft(i, c) = static_cast<double>(votes[c]) / static_cast<double>(k);
  }
  return soft;
}

// True when `label` attains the row maximum (any maximiser counts).
inline bool label_consistent(std::span<const double> row, int label) {
  const double m = *std::max_element(row.begin(), row.end());
  return row[static_cast<std::size_t>(label)] == m;
}

// Pure: consistent in both modalities. Hard: exactly one. Noisy: neither.
inline PartitionAssignment partition(const MatrixD& soft_v, const MatrixD& soft_t, std::span<const int> labels) {
  const std::size_t n = labels.size();
  if (soft_v.rows() != n || soft_t.rows() != n || soft_v.cols() != soft_t.cols())
    throw std::invalid_argument("partition: soft label tables do not match labels");
  PartitionAssignment a;
  a.tags.resize(n);
  a.corrected.assign(n, std::nullopt);
  a.weight.assign(n, std::nullopt);
  for (std::size_t i = 0; i < n; ++i) {
    const bool v = label_consistent(soft_v.row(i), labels[i]);
    const bool t = label_consistent(soft_t.row(i), labels[i]);
    a.tags[i] = (v && t) ? Subset::pure : (v || t) ? Subset::hard : Subset::noisy;
  }
  return a;
}

struct FusedLabel {
  std::vector<double> fused;
  int corrected = 0;
};

// Noisy-or fusion of the two soft labels; argmax ties go to the lowest class.
inline FusedLabel fuse_and_correct(std::span<const double> soft_v, std::span<const double> soft_t) {
  if (soft_v.size() != soft_t.size() || soft_v.empty())
    throw std::invalid_argument("fuse_and_correct: rows must be non-empty and equal length");
  FusedLabel out;
  out.fused.resize(soft_v.size());
  for (std::size_t c = 0; c < soft_v.size(); ++c) out.fused[c] = 1.0 - (1.0 - soft_v[c]) * (1.0 - soft_t[c]);
  out.corrected = static_cast<int>(std::max_element(out.fused.begin(), out.fused.end()) - out.fused.begin());
  return out;
}

inline double instance_weight(double s_v, double s_t) {
  if (!(s_v >= 0.0 && s_v <= 1.0 && s_t >= 0.0 && s_t <= 1.0))
    throw std::invalid_argument("instance_weight: scores must lie in [0, 1]");
  return 1.0 - (1.0 - s_v) * (1.0 - s_t);
}

// One entry per EM iteration of a single class barycenter.
struct EmStep {
  double weighted_sq_before = 0;  // sum_i r_i |u_t - p_i|^2 with this step's responsibilities
  double weighted_sq_after = 0;   // same responsibilities, after the M-step
  double free_energy = 0;         // weighted_sq_after + lambda * sum_i r_i log r_i
  double shift = 0;               // |u_{t+1} - u_t|
};

// Barycenter of a point cloud. mean: arithmetic mean. em: starting at the
// mean, alternate r_i ∝ exp(-|u - p_i|^2 / lambda) and u = sum r_i p_i.
inline std::vector<double> point_barycenter(const MatrixD& points, const BarycenterOptions& opt,
                                            std::vector<EmStep>* trace = nullptr) {
  if (points.rows() == 0) throw std::invalid_argument("point_barycenter: no points");
  const std::size_t m = points.rows(), d = points.cols();
  std::vector<double> u(d, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < d; ++k) u[k] += points(i, k);
  for (auto& v : u) v /= static_cast<double>(m);
  if (opt.mode == BarycenterMode::mean || m == 1) return u;
  if (!(opt.lambda > 0)) throw std::invalid_argument("point_barycenter: lambda must be positive");

  auto sq_dist = [&](const std::vector<double>& c, std::size_t i) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = c[k] - points(i, k);
      s += diff * diff;
    }
    return s;
  };
  std::vector<double> dist(m), r(m), next(d);
  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    for (std::size_t i = 0; i < m; ++i) dist[i] = sq_dist(u, i);
    const double dmin = *std::min_element(dist.begin(), dist.end());
    double z = 0;
    for (std::size_t i = 0; i < m; ++i) z += r[i] = std::exp(-(dist[i] - dmin) / opt.lambda);
    for (auto& v : r) v /= z;

    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < d; ++k) next[k] += r[i] * points(i, k);

    double shift = 0;
    for (std::size_t k = 0; k < d; ++k) shift += (next[k] - u[k]) * (next[k] - u[k]);
    shift = std::sqrt(shift);
    if (trace) {
      EmStep st;
      for (std::size_t i = 0; i < m; ++i) {
        st.weighted_sq_before += r[i] * dist[i];
        st.weighted_sq_after += r[i] * sq_dist(next, i);
        if (r[i] > 0) st.free_energy += opt.lambda * r[i] * std::log(r[i]);
      }
      st.free_energy += st.weighted_sq_after;
      st.shift = shift;
      trace->push_back(st);
    }
    u.swap(next);
    if (shift < opt.tol) break;
  }
  return u;
}

// Class c pools the visual and text embeddings of every member labeled c.
// `members` restricts the pool (all rows when empty).
template <typename T>
BarycenterSet compute_barycenters(const BasicMatrix<T>& fv, const BasicMatrix<T>& ft, std::span<const int> labels,
                                  int num_classes, const BarycenterOptions& opt,
                                  std::span<const std::size_t> members = {}) {
  if (fv.rows() != ft.rows() || fv.cols() != ft.cols() || labels.size() != fv.rows())
    throw std::invalid_argument("compute_barycenters: shape mismatch");
  const std::size_t d = fv.cols();
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
  auto add = [&](std::size_t i) {
    const int l = labels[i];
    if (l < 0 || l >= num_classes) throw std::invalid_argument("compute_barycenters: label out of range");
    by_class[static_cast<std::size_t>(l)].push_back(i);
  };
  if (members.empty())
    for (std::size_t i = 0; i < labels.size(); ++i) add(i);
  else
    for (auto i : members) add(i);

  BarycenterSet out{MatrixD(static_cast<std::size_t>(num_classes), d)};
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const auto& idx = by_class[c];
    if (idx.empty()) throw std::invalid_argument("compute_barycenters: class " + std::to_string(c) + " has no members");
    MatrixD pts(2 * idx.size(), d);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto v = fv.row(idx[r]);
      auto t = ft.row(idx[r]);
      for (std::size_t k = 0; k < d; ++k) {
        pts(2 * r, k) = static_cast<double>(v[k]);
        pts(2 * r + 1, k) = static_cast<double>(t[k]);
      }
    }
    const auto u = point_barycenter(pts, opt);
    std::copy(u.begin(), u.end(), out.centers.row(c).begin());
  }
  return out;
}

namespace detail {

// Clamped cosine to every center plus gradient bookkeeping for one embedding.
struct CenterSims {
  std::vector<double> clamped;   // max(cos, eps)
  std::vector<char> active;      // cos > eps, i.e. gradient flows
  double total = 0;
};

template <typename T>
CenterSims center_sims(std::span<const T> f, const BarycenterSet& centers, double eps) {
  const std::size_t c = centers.num_classes();
  std::vector<double> fd(f.begin(), f.end());
  CenterSims cs{std::vector<double>(c), std::vector<char>(c), 0.0};
  for (std::size_t j = 0; j < c; ++j) {
    const double g = cosine_similarity(std::span<const double>(fd), centers.centers.row(j));
    cs.active[j] = g > eps;
    cs.clamped[j] = cs.active[j] ? g : eps;
    cs.total += cs.clamped[j];
  }
  return cs;
}

// out += scale * d log s / d f, where s = clamped_target / total.
template <typename T>
void accumulate_log_score_grad(std::span<const T> f, std::size_t target, const BarycenterSet& centers,
                               const CenterSims& cs, double scale, std::span<T> out) {
  std::vector<double> fd(f.begin(), f.end());
  std::vector<double> g(fd.size(), 0.0);
  for (std::size_t j = 0; j < cs.clamped.size(); ++j) {
    if (!cs.active[j]) continue;
    double coef = -1.0 / cs.total;
    if (j == target) coef += 1.0 / cs.clamped[j];
    accumulate_cosine_grad(std::span<const double>(fd), centers.centers.row(j), coef, std::span<double>(g));
  }
  for (std::size_t k = 0; k < g.size(); ++k) out[k] += static_cast<T>(scale * g[k]);
}

inline void check_rows(std::span<const std::size_t> rows, std::size_t n, const char* who) {
  for (auto r : rows)
    if (r >= n) throw std::out_of_range(std::string(who) + ": row index out of range");
}

}  // namespace detail

// Share of the clamped cosine to the target barycenter among all barycenters.
template <typename T>
double barycenter_score(std::span<const T> f, int label, const BarycenterSet& centers, double clamp_eps = 1e-8) {
  if (label < 0 || static_cast<std::size_t>(label) >= centers.num_classes())
    throw std::invalid_argument("barycenter_score: label out of range");
  const auto cs = detail::center_sims(f, centers, clamp_eps);
  return cs.clamped[static_cast<std::size_t>(label)] / cs.total;
}

// Cross-entropy on barycenter scores over `rows`, averaged by |rows|. Optional
// per-row weights (indexed like labels) are treated as constants.
template <typename T>
PairLoss<T> weighted_score_ce(std::span<const std::size_t> rows, const BasicMatrix<T>& fv, const BasicMatrix<T>& ft,
                              std::span<const int> targets, const BarycenterSet& centers, double clamp_eps,
                              std::span<const double> weights) {
  PairLoss<T> res{T(0), BasicMatrix<T>(fv.rows(), fv.cols()), BasicMatrix<T>(ft.rows(), ft.cols())};
  if (rows.empty()) return res;
  detail::check_rows(rows, fv.rows(), "score loss");
  const double inv = 1.0 / static_cast<double>(rows.size());
  double total = 0;
  for (auto i : rows) {
    const double w = weights.empty() ? 1.0 : weights[i];
    const auto y = static_cast<std::size_t>(targets[i]);
    for (int m = 0; m < 2; ++m) {
      const auto& emb = m == 0 ? fv : ft;
      auto& grad = m == 0 ? res.grad_fv : res.grad_ft;
      const auto cs = detail::center_sims(emb.row(i), centers, clamp_eps);
      total -= w * std::log(cs.clamped[y] / cs.total);
      if (w != 0.0) detail::accumulate_log_score_grad(emb.row(i), y, centers, cs, -w * inv, grad.row(i));
    }
  }
  res.loss = static_cast<T>(total * inv);
  return res;
}

// -(1/|P|) sum_{i in P} [log s(V_i) + log s(T_i)]
template <typename T>
PairLoss<T> loss_pure(std::span<const std::size_t> rows, const BasicMatrix<T>& fv, const BasicMatrix<T>& ft,
                      std::span<const int> labels, const BarycenterSet& centers, double clamp_eps = 1e-8) {
  return weighted_score_ce(rows, fv, ft, labels, centers, clamp_eps, {});
}

// -(1/|H|) sum_{i in H} l_i [log s(V_i) + log s(T_i)] with fixed weights l_i.
template <typename T>
PairLoss<T> loss_hard(std::span<const std::size_t> rows, const BasicMatrix<T>& fv, const BasicMatrix<T>& ft,
                      std::span<const int> labels, const BarycenterSet& centers, std::span<const double> weights,
                      double clamp_eps = 1e-8) {
  if (weights.size() != fv.rows()) throw std::invalid_argument("loss_hard: one weight per row required");
  return weighted_score_ce(rows, fv, ft, labels, centers, clamp_eps, weights);
}

// Weights taken from the current (detached) scores.
template <typename T>
PairLoss<T> loss_hard(std::span<const std::size_t> rows, const BasicMatrix<T>& fv, const BasicMatrix<T>& ft,
                      std::span<const int> labels, const BarycenterSet& centers, double clamp_eps = 1e-8) {
  std::vector<double> w(fv.rows(), 0.0);
  for (auto i : rows)
    w[i] = instance_weight(barycenter_score(fv.row(i), labels[i], centers, clamp_eps),
                           barycenter_score(ft.row(i), labels[i], centers, clamp_eps));
  return loss_hard(rows, fv, ft, labels, centers, std::span<const double>(w), clamp_eps);
}

// (1/|N|) sum_{i in N} sum_modality (1 - s(f_i; corrected_i)): mean absolute
// error against the corrected one-hot label.
template <typename T>
PairLoss<T> loss_noisy(std::span<const std::size_t> rows, std::span<const int> corrected, const BasicMatrix<T>& fv,
                       const BasicMatrix<T>& ft, const BarycenterSet& centers, double clamp_eps = 1e-8) {
  PairLoss<T> res{T(0), BasicMatrix<T>(fv.rows(), fv.cols()), BasicMatrix<T>(ft.rows(), ft.cols())};
  if (rows.empty()) return res;
  detail::check_rows(rows, fv.rows(), "loss_noisy");
  const double inv = 1.0 / static_cast<double>(rows.size());
  double total = 0;
  for (auto i : rows) {
    const int y = corrected[i];
    if (y < 0 || static_cast<std::size_t>(y) >= centers.num_classes())
      throw std::invalid_argument("loss_noisy: corrected class out of range");
    for (int m = 0; m < 2; ++m) {
      const auto& emb = m == 0 ? fv : ft;
      auto& grad = m == 0 ? res.grad_fv : res.grad_ft;
      const auto cs = detail::center_sims(emb.row(i), centers, clamp_eps);
      const double s = cs.clamped[static_cast<std::size_t>(y)] / cs.total;
      total += 1.0 - s;
      // d(1 - s) = -s * d log s
      detail::accumulate_log_score_grad(emb.row(i), static_cast<std::size_t>(y), centers, cs, -s * inv, grad.row(i));
    }
  }
  res.loss = static_cast<T>(total * inv);
  return res;
}

struct RefineOptions {
  std::size_t k_neighbors = 10;
  BarycenterOptions barycenter;
  BarycenterSource source = BarycenterSource::all;
  double clamp_eps = 1e-8;
};

// Everything the subset losses need for one epoch; held constant while the
// epoch's mini-batches run.
struct Refinement {
  SoftLabelTable soft;
  PartitionAssignment assignment;
  BarycenterSet centers;
};

template <typename T>
Refinement refine_instances(const BasicMatrix<T>& fv, const BasicMatrix<T>& ft, std::span<const int> labels,
                            int num_classes, const RefineOptions& opt) {
  Refinement r;
  r.soft.visual = knn_soft_labels(fv, labels, num_classes, opt.k_neighbors);
  r.soft.text = knn_soft_labels(ft, labels, num_classes, opt.k_neighbors);
  r.assignment = partition(r.soft.visual, r.soft.text, labels);
  auto& a = r.assignment;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.tags[i] == Subset::noisy) a.corrected[i] = fuse_and_correct(r.soft.visual.row(i), r.soft.text.row(i)).corrected;

  if (opt.source == BarycenterSource::trusted) {
    // Classes without a trusted member fall back to all of their members.
    std::vector<char> has_trusted(static_cast<std::size_t>(num_classes), 0);
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.tags[i] != Subset::noisy) {
        members.push_back(i);
        has_trusted[static_cast<std::size_t>(labels[i])] = 1;
      }
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.tags[i] == Subset::noisy && !has_trusted[static_cast<std::size_t>(labels[i])]) members.push_back(i);
    std::sort(members.begin(), members.end());
    r.centers = compute_barycenters(fv, ft, labels, num_classes, opt.barycenter, members);
  } else {
    r.centers = compute_barycenters(fv, ft, labels, num_classes, opt.barycenter);
  }

  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.tags[i] == Subset::hard)
      a.weight[i] = instance_weight(barycenter_score(fv.row(i), labels[i], r.centers, opt.clamp_eps),
                                    barycenter_score(ft.row(i), labels[i], r.centers, opt.clamp_eps));
  return r;
}

// "index,tag,corrected_class,weight"; undefined fields left empty. `ids` maps
// rows to dataset indices (identity when empty).
inline void write_partition_csv(const std::filesystem::path& p, const PartitionAssignment& a,
                                std::span<const std::size_t> ids = {}) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + p.string() + " for writing");
  out << "index,tag,corrected_class,weight\n";
  out.precision(9);
  for (std::size_t i = 0; i < a.size(); ++i) {
    out << (ids.empty() ? i : ids[i]) << ',' << to_string(a.tags[i]) << ',';
    if (a.corrected[i]) out << *a.corrected[i];
    out << ',';
    if (a.weight[i]) out << *a.weight[i];
    out << '\n';
  }
}

}  // namespace nirnl
