#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headaudit/store.hpp"
#include "headaudit/tensor.hpp"

namespace headaudit {

struct StatsOptions {
  double alpha = 0.05;
  std::size_t min_group_size = 20;
};

struct ExcludedGroup {
  std::string name;
  std::uint32_t value = 0;
  std::uint64_t count = 0;
};

// Demographic group x predicted class counts for the images of one true
// class. Rows are the attribute values with at least min_group_size images;
// columns are all K classes. Unannotated images are never counted.
struct ContingencyTable {
  std::uint32_t true_class = 0;
  std::string attribute;
  std::vector<std::string> group_names;
  std::vector<std::uint32_t> group_values;
  RowMatrix<std::uint64_t> counts;  // [groups, K]
  std::vector<ExcludedGroup> excluded_groups;
  std::uint64_t n_unknown = 0;

  // Fewer than two surviving groups marks the class untestable.
  bool testable() const { return counts.rows >= 2; }
  std::uint64_t total() const;
  std::uint64_t row_total(std::size_t row) const;
};

ContingencyTable build_contingency(std::span<const std::uint32_t> predictions,
                                   const HeadContributionStore& store,
                                   std::uint32_t true_class,
                                   const std::string& attribute,
                                   std::size_t min_group_size = 20);

struct ChiSquare {
  double chi2 = 0.0;
  std::size_t dof = 0;              // after dropping all-zero columns
  std::size_t dof_before_drop = 0;  // (rows - 1) * (K - 1)
  std::size_t rows = 0;
  std::size_t cols_used = 0;
  std::uint64_t n = 0;
  double p_value = 1.0;
};

// Pearson chi-squared test of homogeneity. All-zero columns are dropped
// before expected counts are formed. Returns nullopt when no degrees of
// freedom remain. Throws when fewer than two rows are given.
std::optional<ChiSquare> chi2_test(const RowMatrix<std::uint64_t>& counts);
std::optional<ChiSquare> chi2_test(const ContingencyTable& table);

// Upper tail of the chi-squared distribution.
double chi2_upper_tail(double statistic, std::size_t dof);

// sqrt(chi2 / (n * (min(rows, cols) - 1))), with rows/cols counted after
// zero-column dropping.
double cramers_v(double chi2, std::uint64_t n, std::size_t rows,
                 std::size_t cols);

struct BhResult {
  std::vector<double> adjusted;
  std::vector<bool> significant;
};

// Benjamini-Hochberg step-up adjustment: adjusted p_(i) = min_{j>=i}
// m p_(j) / j, clipped to 1; significant iff adjusted < alpha.
BhResult bh_correct(std::span<const double> p_values, double alpha = 0.05);

enum class ClassStatus {
  kTested,
  kTooFewGroups,  // fewer than two groups reach the minimum size
  kSingleColumn,  // every prediction falls in one class: no dof left
};

const char* status_name(ClassStatus status);

struct ClassBiasResult {
  std::uint32_t true_class = 0;
  ClassStatus status = ClassStatus::kTooFewGroups;
  double chi2 = 0.0;
  std::size_t dof = 0;
  std::size_t dof_before_drop = 0;
  double p_value = 1.0;
  double p_adjusted = 1.0;
  bool significant = false;
  double cramers_v = 0.0;
  std::uint64_t n = 0;
  ContingencyTable table;

  bool tested() const { return status == ClassStatus::kTested; }
};

// Per-class pipeline for one attribute: tables, chi-squared, BH across the
// tested classes, V. The global figure is the unweighted mean of V over the
// BH-significant classes (nullopt when there are none).
struct GlobalBias {
  std::string attribute;
  std::vector<ClassBiasResult> classes;  // one per class index
  std::vector<std::uint32_t> significant_classes;
  std::optional<double> mean_v;

  std::size_t n_significant() const { return significant_classes.size(); }
};

GlobalBias global_bias(std::span<const std::uint32_t> predictions,
                       const HeadContributionStore& store,
                       const std::string& attribute,
                       const StatsOptions& options = {});

// V of one class under the given predictions, for comparing against a fixed
// baseline class set. A class whose table has collapsed into a single
// predicted column has no association left and scores 0. nullopt when the
// class has fewer than two groups.
std::optional<double> class_v(std::span<const std::uint32_t> predictions,
                              const HeadContributionStore& store,
                              std::uint32_t true_class,
                              const std::string& attribute,
                              std::size_t min_group_size = 20);

// Unweighted mean of class_v over `classes`; nullopt when `classes` is empty.
std::optional<double> mean_v_over(std::span<const std::uint32_t> predictions,
                                  const HeadContributionStore& store,
                                  std::span<const std::uint32_t> classes,
                                  const std::string& attribute,
                                  std::size_t min_group_size = 20);

}  // namespace headaudit
