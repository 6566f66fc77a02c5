#include "headaudit/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/special_functions/gamma.hpp>

#include "headaudit/error.hpp"

namespace headaudit {

std::uint64_t ContingencyTable::total() const {
  return std::accumulate(counts.data.begin(), counts.data.end(), std::uint64_t{0});
}

std::uint64_t ContingencyTable::row_total(std::size_t row) const {
  const auto r = counts.row(row);
  return std::accumulate(r.begin(), r.end(), std::uint64_t{0});
}

ContingencyTable build_contingency(std::span<const std::uint32_t> predictions,
                                   const HeadContributionStore& store,
                                   std::uint32_t true_class,
                                   const std::string& attribute,
                                   std::size_t min_group_size) {
  if (predictions.size() != store.n_images()) {
    throw Error(Errc::kDimensionMismatch,
                "predictions cover " + std::to_string(predictions.size()) +
                    " images, store has " + std::to_string(store.n_images()));
  }
  if (true_class >= store.n_classes()) {
    throw Error(Errc::kInvalidArgument, "class index out of range");
  }
  const std::size_t a = store.manifest().require_attribute(attribute);
  const Attribute& attr = store.manifest().attributes[a];
  const std::size_t n_values = attr.values.size();
  const std::size_t K = store.n_classes();

  RowMatrix<std::uint64_t> all(n_values, K);
  ContingencyTable table;
  table.true_class = true_class;
  table.attribute = attribute;
  for (std::size_t i = 0; i < store.n_images(); ++i) {
    if (store.true_class(i) != true_class) continue;
    const auto v = store.demographic(i, a);
    if (v >= n_values) {
      ++table.n_unknown;
      continue;
    }
    if (predictions[i] >= K) {
      throw Error(Errc::kInvalidArgument, "prediction index out of range");
    }
    ++all(v, predictions[i]);
  }
  std::vector<std::size_t> kept;
  for (std::size_t v = 0; v < n_values; ++v) {
    const auto row = all.row(v);
    const auto count = std::accumulate(row.begin(), row.end(), std::uint64_t{0});
    if (count >= min_group_size && count > 0) {
      kept.push_back(v);
    } else {
      table.excluded_groups.push_back(
          {attr.values[v], static_cast<std::uint32_t>(v), count});
    }
  }
  table.counts = RowMatrix<std::uint64_t>(kept.size(), K);
  for (std::size_t r = 0; r < kept.size(); ++r) {
    table.group_names.push_back(attr.values[kept[r]]);
    table.group_values.push_back(static_cast<std::uint32_t>(kept[r]));
    std::copy_n(all.row(kept[r]).begin(), K, table.counts.row(r).begin());
  }
  return table;
}

double chi2_upper_tail(double statistic, std::size_t dof) {
  if (dof == 0) throw Error(Errc::kInvalidArgument, "chi-squared needs dof >= 1");
  if (statistic <= 0.0) return 1.0;
  return boost::math::gamma_q(static_cast<double>(dof) / 2.0, statistic / 2.0);
}

std::optional<ChiSquare> chi2_test(const RowMatrix<std::uint64_t>& counts) {
  if (counts.rows < 2) {
    throw Error(Errc::kInvalidArgument, "chi-squared test needs at least 2 rows");
  }
  const std::size_t G = counts.rows;
  const std::size_t K = counts.cols;
  std::vector<double> row_totals(G, 0.0);
  std::vector<double> col_totals(K, 0.0);
  std::uint64_t n = 0;
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t k = 0; k < K; ++k) {
      const auto c = counts(g, k);
      row_totals[g] += static_cast<double>(c);
      col_totals[k] += static_cast<double>(c);
      n += c;
    }
  }
  std::vector<std::size_t> cols;
  for (std::size_t k = 0; k < K; ++k) {
    if (col_totals[k] > 0.0) cols.push_back(k);
  }
  ChiSquare out;
  out.rows = G;
  out.cols_used = cols.size();
  out.n = n;
  out.dof_before_drop = (G - 1) * (K > 0 ? K - 1 : 0);
  out.dof = (G - 1) * (cols.empty() ? 0 : cols.size() - 1);
  if (out.dof == 0) return std::nullopt;
  for (double r : row_totals) {
    // An empty row has zero expected counts everywhere.
    if (r == 0.0) {
      throw Error(Errc::kInvalidArgument, "chi-squared test row has zero total");
    }
  }
  const double N = static_cast<double>(n);
  double chi2 = 0.0;
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t k : cols) {
      const double expected = row_totals[g] * col_totals[k] / N;
      const double diff = static_cast<double>(counts(g, k)) - expected;
      chi2 += diff * diff / expected;
    }
  }
  out.chi2 = chi2;
  out.p_value = chi2_upper_tail(chi2, out.dof);
  return out;
}

std::optional<ChiSquare> chi2_test(const ContingencyTable& table) {
  return chi2_test(table.counts);
}

double cramers_v(double chi2, std::uint64_t n, std::size_t rows,
                 std::size_t cols) {
  if (n == 0) throw Error(Errc::kInvalidArgument, "Cramer's V needs n > 0");
  const std::size_t m = std::min(rows, cols);
  if (m < 2) {
    throw Error(Errc::kInvalidArgument, "Cramer's V needs min(rows, cols) >= 2");
  }
  return std::sqrt(chi2 / (static_cast<double>(n) * static_cast<double>(m - 1)));
}

BhResult bh_correct(std::span<const double> p_values, double alpha) {
  const std::size_t m = p_values.size();
  BhResult out;
  out.adjusted.assign(m, 1.0);
  out.significant.assign(m, false);
  if (m == 0) return out;
  for (double p : p_values) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw Error(Errc::kInvalidArgument, "p-value outside [0, 1]");
    }
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return p_values[a] < p_values[b];
  });
  double running = 1.0;
  for (std::size_t r = m; r-- > 0;) {
    const std::size_t idx = order[r];
    const double scaled =
        static_cast<double>(m) * p_values[idx] / static_cast<double>(r + 1);
    running = std::min(running, scaled);
    out.adjusted[idx] = std::min(1.0, running);
  }
  for (std::size_t i = 0; i < m; ++i) out.significant[i] = out.adjusted[i] < alpha;
  return out;
}

const char* status_name(ClassStatus status) {
  switch (status) {
    case ClassStatus::kTested: return "tested";
    case ClassStatus::kTooFewGroups: return "too_few_groups";
    case ClassStatus::kSingleColumn: return "single_column";
  }
  return "unknown";
}

namespace {

ClassBiasResult test_class(std::span<const std::uint32_t> predictions,
                           const HeadContributionStore& store,
                           std::uint32_t true_class,
                           const std::string& attribute,
                           std::size_t min_group_size) {
  ClassBiasResult r;
  r.true_class = true_class;
  r.table = build_contingency(predictions, store, true_class, attribute,
                              min_group_size);
  r.n = r.table.total();
  if (!r.table.testable()) {
    r.status = ClassStatus::kTooFewGroups;
    return r;
  }
  const auto test = chi2_test(r.table);
  r.dof_before_drop = (r.table.counts.rows - 1) * (r.table.counts.cols - 1);
  if (!test) {
    r.status = ClassStatus::kSingleColumn;
    return r;
  }
  r.status = ClassStatus::kTested;
  r.chi2 = test->chi2;
  r.dof = test->dof;
  r.p_value = test->p_value;
  r.cramers_v = cramers_v(test->chi2, test->n, test->rows, test->cols_used);
  return r;
}

}  // namespace

GlobalBias global_bias(std::span<const std::uint32_t> predictions,
                       const HeadContributionStore& store,
                       const std::string& attribute,
                       const StatsOptions& options) {
  GlobalBias out;
  out.attribute = attribute;
  std::vector<double> p_values;
  std::vector<std::size_t> tested;
  for (std::uint32_t k = 0; k < store.n_classes(); ++k) {
    out.classes.push_back(
        test_class(predictions, store, k, attribute, options.min_group_size));
    if (out.classes.back().tested()) {
      p_values.push_back(out.classes.back().p_value);
      tested.push_back(k);
    }
  }
  const BhResult bh = bh_correct(p_values, options.alpha);
  double sum_v = 0.0;
  for (std::size_t t = 0; t < tested.size(); ++t) {
    auto& r = out.classes[tested[t]];
    r.p_adjusted = bh.adjusted[t];
    r.significant = bh.significant[t];
    if (r.significant) {
      out.significant_classes.push_back(r.true_class);
      sum_v += r.cramers_v;
    }
  }
  if (!out.significant_classes.empty()) {
    out.mean_v = sum_v / static_cast<double>(out.significant_classes.size());
  }
  return out;
}

std::optional<double> class_v(std::span<const std::uint32_t> predictions,
                              const HeadContributionStore& store,
                              std::uint32_t true_class,
                              const std::string& attribute,
                              std::size_t min_group_size) {
  const ClassBiasResult r =
      test_class(predictions, store, true_class, attribute, min_group_size);
  switch (r.status) {
    case ClassStatus::kTested: return r.cramers_v;
    case ClassStatus::kSingleColumn: return 0.0;
    case ClassStatus::kTooFewGroups: return std::nullopt;
  }
  return std::nullopt;
}

std::optional<double> mean_v_over(std::span<const std::uint32_t> predictions,
                                  const HeadContributionStore& store,
                                  std::span<const std::uint32_t> classes,
                                  const std::string& attribute,
                                  std::size_t min_group_size) {
  if (classes.empty()) return std::nullopt;
  double sum = 0.0;
  std::size_t used = 0;
  for (auto k : classes) {
    if (auto v = class_v(predictions, store, k, attribute, min_group_size)) {
      sum += *v;
      ++used;
    }
  }
  if (used == 0) return std::nullopt;
  return sum / static_cast<double>(used);
}

}  // namespace headaudit
