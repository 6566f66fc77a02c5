#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "headaudit/decomposition.hpp"
#include "headaudit/store.hpp"

namespace headaudit {

struct TextSpanParams {
  std::size_t k = 20;
  std::size_t rank = 80;
};

struct SelectedText {
  std::string name;
  TextCategory category = TextCategory::kGeneral;
  std::string attribute;  // demographic texts only
  std::string value;
  std::size_t dictionary_index = 0;
  double variance = 0.0;  // population variance along the text's residual
};

struct TextSpanResult {
  HeadId head;
  TextSpanParams params;
  std::vector<SelectedText> selected;
  std::size_t effective_rank = 0;  // rank after clipping to min(n, d)
  bool degenerate = false;  // some step selected along a zero-variance residual
  bool exhausted = false;   // dictionary ran out before k selections
};

// Residual state after the last step, exposed for invariant checks.
struct TextSpanTrace {
  Eigen::MatrixXd data;        // [n, d]
  Eigen::MatrixXd dictionary;  // [n_texts, d]
  std::vector<bool> alive;
  std::vector<Eigen::VectorXd> directions;  // unit, in selection order
};

// Best rank-`rank` approximation (truncated SVD). Returns the input unchanged
// when rank >= min(rows, cols).
Eigen::MatrixXd low_rank_approximation(const Eigen::MatrixXd& m, std::size_t rank);

// Greedy text selection on an [n, d] contribution matrix:
//   1. center over rows, 2. truncate to the best rank-r approximation,
//   3. k times: score every live dictionary direction (unit-normalized
//      residual) by the population variance of data * t, take the argmax
//      (ties to the lowest index), then project the chosen direction out of
//      the data and every dictionary row; rows whose residual norm falls
//      below 1e-8 are dropped.
TextSpanResult textspan_matrix(const Eigen::MatrixXd& contributions,
                               const Eigen::MatrixXd& dictionary,
                               const std::vector<DictionaryEntry>& entries,
                               const TextSpanParams& params,
                               TextSpanTrace* trace = nullptr);

TextSpanResult textspan(const HeadContributionStore& store, HeadId head,
                        const PrototypeSet& prototypes,
                        const TextSpanParams& params = {});

struct Corroboration {
  bool corroborated = false;
  std::vector<std::string> matched;  // demographic texts of the attribute
};

Corroboration corroborate(const TextSpanResult& result,
                          const std::string& attribute);

}  // namespace headaudit
