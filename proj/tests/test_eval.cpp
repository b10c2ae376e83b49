#include <gtest/gtest.h>

#include "nirnl/eval.hpp"
#include "oracles.hpp"

using namespace nirnl;

namespace {

RetrievalRanking ranking(std::initializer_list<int> rel) {
  RetrievalRanking r;
  for (int v : rel) {
    r.order.push_back(r.order.size());
    r.relevant.push_back(static_cast<char>(v));
    r.num_relevant += static_cast<std::size_t>(v);
  }
  return r;
}

MatrixD random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  MatrixD m(r, c);
  for (auto& v : m.data()) v = rng.normal();
  return m;
}

}  // namespace

TEST(Ap, TextbookExample) {
  EXPECT_NEAR(*average_precision(ranking({1, 0, 1})), 0.5 * (1.0 + 2.0 / 3.0), 1e-12);
}

TEST(Ap, NoRelevantIsUndefined) { EXPECT_FALSE(average_precision(ranking({0, 0})).has_value()); }

TEST(Map, PerfectRankingIsOne) {
  const std::vector<RetrievalRanking> rk{ranking({1, 1, 0, 0}), ranking({1, 0, 0})};
  EXPECT_EQ(mean_average_precision(rk).map, 1.0);
}

TEST(Map, QueriesWithoutRelevantItemsSkipped) {
  const std::vector<RetrievalRanking> rk{ranking({1, 0}), ranking({0, 0})};
  const auto m = mean_average_precision(rk);
  EXPECT_EQ(m.num_queries, 1u);
  EXPECT_EQ(m.map, 1.0);
}

TEST(Map, EmbeddingsPerfectRanking) {
  MatrixD q(2, 2), g(4, 2);
  q(0, 0) = 1;
  q(1, 1) = 1;
  g(0, 0) = 1;
  g(1, 1) = 2;
  g(2, 0) = 3;
  g(3, 1) = 0.5;
  EXPECT_EQ(map_score(q, g, std::vector<int>{0, 1}, std::vector<int>{0, 1, 0, 1}), 1.0);
}

TEST(Map, MatchesBruteForceOracle) {
  Rng rng(1);
  const auto q = random_matrix(15, 4, rng), g = random_matrix(20, 4, rng);
  std::vector<int> ql(15), gl(20);
  for (auto& l : ql) l = static_cast<int>(rng.below(3));
  for (auto& l : gl) l = static_cast<int>(rng.below(3));
  EXPECT_NEAR(map_score(q, g, ql, gl), oracle::map_score(oracle::to_mat(q), oracle::to_mat(g), ql, gl), 1e-9);
}

TEST(Map, TiedSimilaritiesRankByIndex) {
  MatrixD q(1, 2), g(3, 2);
  q(0, 0) = 1;
  for (std::size_t j = 0; j < 3; ++j) g(j, 0) = 1;
  // Relevant item last among equal similarities: AP = 1/3.
  EXPECT_NEAR(map_score(q, g, std::vector<int>{1}, std::vector<int>{0, 0, 1}), 1.0 / 3, 1e-12);
}

TEST(Pr, PerfectRankingAllOnes) {
  const std::vector<RetrievalRanking> rk{ranking({1, 1, 1, 0, 0})};
  for (const auto& p : pr_curve(rk)) EXPECT_EQ(p.precision, 1.0);
}

TEST(Pr, SingleRelevantLast) {
  const std::vector<RetrievalRanking> rk{ranking({0, 0, 0, 0, 1})};
  const auto c = pr_curve(rk);
  EXPECT_NEAR(c[10].precision, 0.2, 1e-12);
  EXPECT_NEAR(c[10].recall, 1.0, 1e-12);
}

TEST(Pr, MatchesInterpolationOracle) {
  Rng rng(2);
  for (int t = 0; t < 30; ++t) {
    std::vector<RetrievalRanking> rk;
    std::vector<std::vector<int>> rels;
    for (int qi = 0; qi < 5; ++qi) {
      std::vector<int> rel(3 + rng.below(15));
      for (auto& v : rel) v = rng.uniform() < 0.3;
      rel[rng.below(rel.size())] = 1;
      RetrievalRanking r;
      for (int v : rel) {
        r.order.push_back(r.order.size());
        r.relevant.push_back(static_cast<char>(v));
        r.num_relevant += static_cast<std::size_t>(v);
      }
      rk.push_back(r);
      rels.push_back(rel);
    }
    const auto c = pr_curve(rk);
    for (std::size_t l = 0; l < 11; ++l) {
      double want = 0;
      for (const auto& rel : rels) want += oracle::interpolated_precision(rel, static_cast<double>(l) / 10.0);
      EXPECT_NEAR(c[l].precision, want / 5, 1e-9);
    }
  }
}

TEST(Pr, PrecisionNonIncreasingInRecall) {
  Rng rng(3);
  const auto q = random_matrix(10, 3, rng), g = random_matrix(25, 3, rng);
  std::vector<int> ql(10), gl(25);
  for (auto& l : ql) l = static_cast<int>(rng.below(3));
  for (std::size_t j = 0; j < gl.size(); ++j) gl[j] = static_cast<int>(j % 3);
  const auto c = pr_curve(rank_gallery(q, g, ql, gl));
  for (std::size_t l = 1; l < c.size(); ++l) EXPECT_LE(c[l].precision, c[l - 1].precision + 1e-15);
}

TEST(Report, CleanPerfectPartition) {
  PartitionAssignment a;
  a.tags.assign(4, Subset::pure);
  a.corrected.assign(4, std::nullopt);
  a.weight.assign(4, std::nullopt);
  const std::vector<int> y{0, 1, 0, 1};
  const auto r = partition_report(a, y, y);
  EXPECT_EQ(r.pure_purity, 1.0);
  EXPECT_EQ(r.noisy_recall, 1.0);
}

TEST(Report, AllNoisyCorrectedToClean) {
  PartitionAssignment a;
  const std::vector<int> noisy{1, 0, 2}, clean{0, 0, 1};
  a.tags.assign(3, Subset::noisy);
  a.weight.assign(3, std::nullopt);
  for (int c : clean) a.corrected.push_back(c);
  EXPECT_EQ(partition_report(a, noisy, clean).correction_accuracy, 1.0);
}

TEST(Report, MatchesCountingOracle) {
  Rng rng(4);
  const std::size_t n = 100;
  PartitionAssignment a;
  std::vector<int> noisy(n), clean(n);
  for (std::size_t i = 0; i < n; ++i) {
    clean[i] = static_cast<int>(rng.below(4));
    noisy[i] = rng.uniform() < 0.4 ? static_cast<int>(rng.below(4)) : clean[i];
    a.tags.push_back(static_cast<Subset>(rng.below(3)));
    a.corrected.push_back(a.tags.back() == Subset::noisy ? std::optional<int>(static_cast<int>(rng.below(4))) : std::nullopt);
    a.weight.push_back(std::nullopt);
  }
  int pure = 0, pure_clean = 0, corrupted = 0, found = 0, tagged_noisy = 0, fixed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool bad = noisy[i] != clean[i];
    if (a.tags[i] == Subset::pure) {
      ++pure;
      pure_clean += !bad;
    }
    if (bad) {
      ++corrupted;
      found += a.tags[i] == Subset::noisy;
    }
    if (a.tags[i] == Subset::noisy) {
      ++tagged_noisy;
      fixed += *a.corrected[i] == clean[i];
    }
  }
  const auto r = partition_report(a, noisy, clean);
  EXPECT_EQ(r.pure_purity, static_cast<double>(pure_clean) / pure);
  EXPECT_EQ(r.noisy_recall, static_cast<double>(found) / corrupted);
  EXPECT_EQ(r.correction_accuracy, static_cast<double>(fixed) / tagged_noisy);
}

TEST(Report, MissingCleanLabelsRejected) {
  PartitionAssignment a;
  a.tags.assign(2, Subset::pure);
  a.corrected.assign(2, std::nullopt);
  a.weight.assign(2, std::nullopt);
  EXPECT_THROW(partition_report(a, std::vector<int>{0, 1}, std::vector<int>{}), std::invalid_argument);
}
