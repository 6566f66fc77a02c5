#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headaudit/decomposition.hpp"
#include "headaudit/stats.hpp"
#include "headaudit/store.hpp"

namespace headaudit {

// Which demographic prototypes the directional gap compares: the audited
// attribute's values only, or every value of every attribute at once.
enum class GapScope { kAttribute, kAllAttributes };

// Cosine alignment of each head's per-class visual centroid with the class's
// occupation prototype (s_occ) and with each demographic prototype (s_bias).
// Entries for classes without images, or whose centroid is the zero vector,
// are undefined and never read as numbers.
struct AlignmentTable {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t n_classes = 0;
  std::vector<std::string> value_names;  // "attribute/value", s_bias columns
  std::vector<std::size_t> centroid_counts;  // images per class

  std::vector<double> s_occ;          // [L, H, K]
  std::vector<double> s_bias;         // [L, H, K, values]
  std::vector<std::uint8_t> defined;  // [L, H, K]

  std::size_t n_values() const { return value_names.size(); }
  bool is_defined(std::size_t l, std::size_t h, std::size_t p) const {
    return defined[(l * n_heads + h) * n_classes + p] != 0;
  }
  std::optional<double> occ(std::size_t l, std::size_t h, std::size_t p) const;
  std::optional<std::span<const double>> bias(std::size_t l, std::size_t h,
                                              std::size_t p) const;
};

AlignmentTable compute_alignment(const HeadContributionStore& store,
                                 const PrototypeSet& prototypes,
                                 const std::string& attribute,
                                 GapScope scope = GapScope::kAttribute,
                                 unsigned workers = default_workers());

struct GapResult {
  double gap = 0.0;
  std::size_t dominant = 0;
};

// Largest minus second-largest absolute similarity; dominant is the argmax of
// |s| with ties going to the lowest index. Throws with fewer than 2 entries.
GapResult directional_gap(std::span<const double> similarities);

struct ThresholdPair {
  double tau_gap = 0.0;
  double tau_occ = 0.0;

  void validate() const;
  bool operator==(const ThresholdPair&) const = default;
};

struct Evidence {
  HeadId head;
  std::uint32_t profession = 0;
  std::uint32_t dominant_value = 0;  // column of AlignmentTable::value_names
  double gap = 0.0;
  double abs_s_occ = 0.0;
};

struct CandidateSet {
  std::vector<HeadId> heads;        // sorted
  std::vector<Evidence> evidence;   // every qualifying (head, profession)
};

// One row per defined (head, profession) pair, in (layer, head, profession)
// order; computing it once makes repeated threshold sweeps cheap.
std::vector<Evidence> gap_entries(const AlignmentTable& table);

// A head qualifies iff some profession has G > tau_gap and |s_occ| > tau_occ.
CandidateSet select_candidates(const AlignmentTable& table,
                               const ThresholdPair& thresholds);
CandidateSet select_candidates(std::span<const Evidence> entries,
                               const ThresholdPair& thresholds);

struct GridSpec {
  double gap_min = 0.005;
  double gap_max = 0.20;
  double gap_step = 0.005;
  double occ_min = 0.005;
  double occ_max = 0.30;
  double occ_step = 0.005;

  std::vector<double> gap_values() const;
  std::vector<double> occ_values() const;
  std::size_t n_cells() const { return gap_values().size() * occ_values().size(); }
  void validate() const;
};

struct GridCell {
  ThresholdPair thresholds;
  std::size_t n_heads = 0;
  std::size_t set_index = 0;  // into GridResult::distinct_sets
  std::size_t n_correct = 0;
  double accuracy = 0.0;
  std::optional<double> mean_v;  // over the baseline-significant classes
  bool feasible = false;         // accuracy >= baseline accuracy
};

struct GridResult {
  bool feasible = false;  // false: no cell keeps accuracy at baseline
  ThresholdPair best;
  std::size_t best_cell = 0;
  CandidateSet selected;
  std::size_t baseline_correct = 0;
  double baseline_accuracy = 0.0;
  std::optional<double> baseline_v;
  std::vector<std::uint32_t> baseline_significant;
  std::vector<std::vector<HeadId>> distinct_sets;
  std::vector<GridCell> trace;  // gap-major, occ-minor order
};

struct GridOptions {
  StatsOptions stats;
};

// Sweeps the threshold grid, mean-ablates each cell's candidates and returns
// the feasible cell with the lowest mean V over the baseline-significant
// classes. Ties prefer fewer heads, then larger tau_gap, then larger tau_occ.
GridResult grid_search(const AblationEngine& engine,
                       const AlignmentTable& table,
                       const GlobalBias& baseline,
                       const std::string& attribute, const GridSpec& spec,
                       const GridOptions& options = {});

GridResult grid_search(const HeadContributionStore& store,
                       const PrototypeSet& prototypes,
                       const ClassifierMatrix& classifier,
                       const std::string& attribute, const GridSpec& spec,
                       const GridOptions& options = {},
                       GapScope scope = GapScope::kAttribute,
                       unsigned workers = default_workers());

}  // namespace headaudit
