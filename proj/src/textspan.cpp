#include "headaudit/textspan.hpp"

#include <algorithm>

#include <Eigen/SVD>

#include "headaudit/error.hpp"

namespace headaudit {

namespace {

constexpr double kDropNorm = 1e-8;

}  // namespace

Eigen::MatrixXd low_rank_approximation(const Eigen::MatrixXd& m,
                                       std::size_t rank) {
  const auto full = static_cast<std::size_t>(std::min(m.rows(), m.cols()));
  if (rank >= full) return m;
  if (rank == 0) return Eigen::MatrixXd::Zero(m.rows(), m.cols());
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto r = static_cast<Eigen::Index>(rank);
  return svd.matrixU().leftCols(r) *
         svd.singularValues().head(r).asDiagonal() *
         svd.matrixV().leftCols(r).transpose();
}

TextSpanResult textspan_matrix(const Eigen::MatrixXd& contributions,
                               const Eigen::MatrixXd& dictionary,
                               const std::vector<DictionaryEntry>& entries,
                               const TextSpanParams& params,
                               TextSpanTrace* trace) {
  if (params.k == 0) throw Error(Errc::kInvalidArgument, "textspan needs k >= 1");
  if (dictionary.rows() == 0) {
    throw Error(Errc::kInvalidArgument, "textspan needs a non-empty dictionary");
  }
  if (static_cast<std::size_t>(dictionary.rows()) != entries.size() ||
      dictionary.cols() != contributions.cols()) {
    throw Error(Errc::kDimensionMismatch,
                "textspan dictionary shape does not match the contributions");
  }
  if (contributions.rows() == 0) {
    throw Error(Errc::kInvalidArgument, "textspan needs at least one image");
  }

  TextSpanResult result;
  result.params = params;
  const auto n = static_cast<double>(contributions.rows());
  const std::size_t full = static_cast<std::size_t>(
      std::min(contributions.rows(), contributions.cols()));
  result.effective_rank = std::min(params.rank, full);

  Eigen::MatrixXd data = contributions.rowwise() - contributions.colwise().mean();
  data = low_rank_approximation(data, result.effective_rank);
  Eigen::MatrixXd dict = dictionary;
  std::vector<bool> alive(static_cast<std::size_t>(dict.rows()));
  for (Eigen::Index t = 0; t < dict.rows(); ++t) {
    alive[static_cast<std::size_t>(t)] = dict.row(t).norm() >= kDropNorm;
  }
  // Scale for the degeneracy test, taken before centering: rounding residue
  // left by centering constant rows must not count as variance.
  const double scale = contributions.squaredNorm() / n;
  std::vector<Eigen::VectorXd> directions;

  for (std::size_t step = 0; step < params.k; ++step) {
    const Eigen::MatrixXd cov = (data.transpose() * data) / n;
    Eigen::Index best = -1;
    double best_score = 0.0;
    for (Eigen::Index t = 0; t < dict.rows(); ++t) {
      if (!alive[static_cast<std::size_t>(t)]) continue;
      const Eigen::VectorXd dir = dict.row(t).transpose() / dict.row(t).norm();
      const double s = dir.dot(cov * dir);
      if (best < 0 || s > best_score) {
        best = t;
        best_score = s;
      }
    }
    if (best < 0) {
      result.exhausted = true;
      break;
    }
    if (scale == 0.0 || best_score <= 1e-12 * scale) {
      result.degenerate = true;
    }
    const auto idx = static_cast<std::size_t>(best);
    const DictionaryEntry& e = entries[idx];
    result.selected.push_back({e.name, e.category, e.attribute, e.value, idx,
                               std::max(0.0, best_score)});

    const Eigen::VectorXd dir = dict.row(best).transpose() / dict.row(best).norm();
    data -= (data * dir) * dir.transpose();
    alive[idx] = false;
    for (Eigen::Index t = 0; t < dict.rows(); ++t) {
      if (!alive[static_cast<std::size_t>(t)]) continue;
      dict.row(t) -= dict.row(t).dot(dir) * dir.transpose();
      if (dict.row(t).norm() < kDropNorm) alive[static_cast<std::size_t>(t)] = false;
    }
    directions.push_back(dir);
  }
  if (result.selected.size() < params.k) result.exhausted = true;

  if (trace) {
    trace->data = std::move(data);
    trace->dictionary = std::move(dict);
    trace->alive = std::move(alive);
    trace->directions = std::move(directions);
  }
  return result;
}

TextSpanResult textspan(const HeadContributionStore& store, HeadId head,
                        const PrototypeSet& prototypes,
                        const TextSpanParams& params) {
  check_head(store, head);
  check_compatible(store, prototypes);
  const auto n = static_cast<Eigen::Index>(store.n_images());
  const auto d = static_cast<Eigen::Index>(store.embed_dim());
  Eigen::MatrixXd data(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto c = store.head(static_cast<std::size_t>(i), head.layer, head.head);
    for (Eigen::Index k = 0; k < d; ++k) data(i, k) = c[static_cast<std::size_t>(k)];
  }
  const auto t = static_cast<Eigen::Index>(prototypes.dictionary.rows);
  Eigen::MatrixXd dict(t, d);
  for (Eigen::Index r = 0; r < t; ++r) {
    const auto row = prototypes.dictionary.row(static_cast<std::size_t>(r));
    for (Eigen::Index k = 0; k < d; ++k) dict(r, k) = row[static_cast<std::size_t>(k)];
  }
  TextSpanResult result =
      textspan_matrix(data, dict, prototypes.dictionary_entries, params);
  result.head = head;
  return result;
}

Corroboration corroborate(const TextSpanResult& result,
                          const std::string& attribute) {
  Corroboration out;
  for (const auto& s : result.selected) {
    if (s.category == TextCategory::kDemographic && s.attribute == attribute) {
      out.matched.push_back(s.name);
    }
  }
  out.corroborated = !out.matched.empty();
  return out;
}

}  // namespace headaudit
