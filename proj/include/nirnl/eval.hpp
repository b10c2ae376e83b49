#pragma once

// Cross-modal retrieval metrics (MAP@all, 11-point interpolated PR) and
// partition diagnostics against known clean labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "nirnl/nir.hpp"
#include "nirnl/numkit.hpp"

namespace nirnl {

struct RetrievalRanking {
  std::vector<std::size_t> order;  // gallery indices, most similar first
  std::vector<char> relevant;      // relevant[r] for the item at rank r
  std::size_t num_relevant = 0;
};

// Cosine ranking of the gallery for every query; ties by ascending gallery index.
template <typename T>
std::vector<RetrievalRanking> rank_gallery(const BasicMatrix<T>& queries, const BasicMatrix<T>& gallery,
                                           std::span<const int> query_labels, std::span<const int> gallery_labels) {
  if (gallery.rows() == 0) throw std::invalid_argument("rank_gallery: empty gallery");
  if (queries.cols() != gallery.cols()) throw std::invalid_argument("rank_gallery: embedding dims differ");
  if (query_labels.size() != queries.rows() || gallery_labels.size() != gallery.rows())
    throw std::invalid_argument("rank_gallery: label counts do not match embeddings");
  std::vector<double> qn, gn;
  const auto q = detail::unit_rows(queries.template cast<double>(), qn);
  const auto g = detail::unit_rows(gallery.template cast<double>(), gn);
  const std::size_t ng = g.rows();

  std::vector<RetrievalRanking> out(q.rows());
  std::vector<double> sims(ng);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < ng; ++j) sims[j] = dot(q.row(i), g.row(j));
    auto& r = out[i];
    r.order.resize(ng);
    for (std::size_t j = 0; j < ng; ++j) r.order[j] = j;
    std::stable_sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
    r.relevant.resize(ng);
    for (std::size_t k = 0; k < ng; ++k) {
      r.relevant[k] = gallery_labels[r.order[k]] == query_labels[i];
      r.num_relevant += static_cast<std::size_t>(r.relevant[k]);
    }
  }
  return out;
}

// AP over the full ranking; nullopt when nothing is relevant.
inline std::optional<double> average_precision(const RetrievalRanking& r) {
  if (r.num_relevant == 0) return std::nullopt;
  double sum = 0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < r.relevant.size(); ++k)
    if (r.relevant[k]) sum += static_cast<double>(++hits) / static_cast<double>(k + 1);
  return sum / static_cast<double>(r.num_relevant);
}

struct MapResult {
  double map = 0;
  std::size_t num_queries = 0;  // queries with at least one relevant item
};

inline MapResult mean_average_precision(std::span<const RetrievalRanking> rankings) {
  MapResult res;
  double sum = 0;
  for (const auto& r : rankings)
    if (auto ap = average_precision(r)) {
      sum += *ap;
      ++res.num_queries;
    }
  if (res.num_queries) res.map = sum / static_cast<double>(res.num_queries);
  return res;
}

template <typename T>
MapResult map_evaluate(const BasicMatrix<T>& queries, const BasicMatrix<T>& gallery, std::span<const int> query_labels,
                       std::span<const int> gallery_labels) {
  const auto rk = rank_gallery(queries, gallery, query_labels, gallery_labels);
  return mean_average_precision(rk);
}

template <typename T>
double map_score(const BasicMatrix<T>& queries, const BasicMatrix<T>& gallery, std::span<const int> query_labels,
                 std::span<const int> gallery_labels) {
  return map_evaluate(queries, gallery, query_labels, gallery_labels).map;
}

struct PrPoint {
  double recall;
  double precision;
};

using PrCurve = std::array<PrPoint, 11>;

// Mean over queries of interpolated precision (max precision at recall >= level)
// at recall levels 0.0, 0.1, ..., 1.0.
inline PrCurve pr_curve(std::span<const RetrievalRanking> rankings) {
  PrCurve curve{};
  for (std::size_t l = 0; l < curve.size(); ++l) curve[l] = {static_cast<double>(l) / 10.0, 0.0};
  std::size_t used = 0;
  for (const auto& r : rankings) {
    if (r.num_relevant == 0) continue;
    ++used;
    std::array<double, 11> best{};
    std::size_t hits = 0;
    for (std::size_t k = 0; k < r.relevant.size(); ++k) {
      if (!r.relevant[k]) continue;
      ++hits;
      const double prec = static_cast<double>(hits) / static_cast<double>(k + 1);
      // Recall hits/R reaches level l/10 iff 10*hits >= l*R; precision only
      // changes at relevant ranks, so those are the only candidates.
      for (std::size_t l = 0; l < best.size(); ++l)
        if (10 * hits >= l * r.num_relevant) best[l] = std::max(best[l], prec);
    }
    for (std::size_t l = 0; l < best.size(); ++l) curve[l].precision += best[l];
  }
  if (used == 0) throw std::invalid_argument("pr_curve: no query has a relevant gallery item");
  for (auto& p : curve) p.precision /= static_cast<double>(used);
  return curve;
}

struct PartitionReport {
  std::size_t n_pure = 0;
  std::size_t n_hard = 0;
  std::size_t n_noisy = 0;
  double pure_purity = 1;          // pure instances whose given label is clean
  double noisy_recall = 1;         // corrupted instances tagged noisy
  double correction_accuracy = 1;  // noisy-tagged instances corrected to the clean label
};

// Fractions over empty sets are reported as 1 (nothing to get wrong).
inline PartitionReport partition_report(const PartitionAssignment& a, std::span<const int> noisy_labels,
                                        std::span<const int> clean_labels) {
  if (clean_labels.empty() && !noisy_labels.empty())
    throw std::invalid_argument("partition_report: clean labels are required");
  if (noisy_labels.size() != a.size() || clean_labels.size() != a.size())
    throw std::invalid_argument("partition_report: label counts do not match the assignment");
  PartitionReport rep;
  std::size_t pure_clean = 0, corrupted = 0, corrupted_found = 0, corrected_ok = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool is_corrupted = noisy_labels[i] != clean_labels[i];
    corrupted += is_corrupted;
    switch (a.tags[i]) {
      case Subset::pure:
        ++rep.n_pure;
        pure_clean += !is_corrupted;
        break;
      case Subset::hard:
        ++rep.n_hard;
        break;
      case Subset::noisy:
        ++rep.n_noisy;
        corrupted_found += is_corrupted;
        corrected_ok += a.corrected[i] && *a.corrected[i] == clean_labels[i];
        break;
    }
  }
  auto frac = [](std::size_t num, std::size_t den) { return den ? static_cast<double>(num) / static_cast<double>(den) : 1.0; };
  rep.pure_purity = frac(pure_clean, rep.n_pure);
  rep.noisy_recall = frac(corrupted_found, corrupted);
  rep.correction_accuracy = frac(corrected_ok, rep.n_noisy);
  return rep;
}

}  // namespace nirnl
