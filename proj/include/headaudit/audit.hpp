#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "headaudit/decomposition.hpp"
#include "headaudit/ranking.hpp"
#include "headaudit/stats.hpp"
#include "headaudit/store.hpp"
#include "headaudit/textspan.hpp"

namespace headaudit {

struct ControlConfig {
  std::size_t n_seeds = 10;
  std::uint64_t seed = 0;
};

struct AuditConfig {
  std::string attribute;
  StatsOptions stats;
  GridSpec grid;
  GapScope gap_scope = GapScope::kAttribute;
  TextSpanParams textspan;
  ControlConfig control;
  unsigned workers = default_workers();

  void validate() const;
};

// Memoized ablation results keyed by head set.
class PredictionCache {
 public:
  explicit PredictionCache(const AblationEngine& engine) : engine_(engine) {}
  const AblationEngine& engine() const { return engine_; }
  const HeadContributionStore& store() const { return engine_.store(); }
  const Predictions& get(const std::vector<HeadId>& heads);

 private:
  const AblationEngine& engine_;
  std::map<std::vector<HeadId>, Predictions> cache_;
};

// Per-group prediction rates (percent of the group's images) for one true
// class over a fixed set of predicted-class columns.
struct Redistribution {
  std::vector<std::uint32_t> columns;
  std::vector<std::string> groups;
  std::vector<std::vector<double>> rates;  // [group][column]
};

// Columns: the true class, then each group's two most frequent other
// predictions under `reference`, in group order without repeats.
std::vector<std::uint32_t> redistribution_columns(const ContingencyTable& reference,
                                                  std::size_t per_group = 2);
Redistribution redistribution(const ContingencyTable& table,
                              const std::vector<std::uint32_t>& columns);

struct AttributionRow {
  std::string label;  // head name, or "combined"
  std::vector<HeadId> heads;
  double v = 0.0;
  double delta_v = 0.0;
  Redistribution rates;
};

struct ClassAttribution {
  std::uint32_t true_class = 0;
  double baseline_v = 0.0;
  Redistribution baseline_rates;
  std::vector<AttributionRow> rows;  // single heads by delta_v ascending
  AttributionRow combined;
};

// One ablation per head plus the combined set, scored on `focus_class`.
// Throws Error(kInvalidArgument) when the class is untestable at baseline.
ClassAttribution per_head_attribution(PredictionCache& cache,
                                      const std::vector<HeadId>& heads,
                                      std::uint32_t focus_class,
                                      const std::string& attribute,
                                      const StatsOptions& options = {});

struct ControlRun {
  std::uint64_t seed = 0;
  std::vector<HeadId> heads;
  std::optional<double> mean_v;
  double delta_v = 0.0;
  double accuracy = 0.0;
  double delta_accuracy = 0.0;
};

struct ControlResult {
  std::map<std::uint32_t, std::size_t> profile;  // layer -> head count
  std::vector<HeadId> excluded;
  std::vector<ControlRun> runs;
  double mean_delta_v = 0.0;
  double std_delta_v = 0.0;  // population std over runs
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  double mean_delta_accuracy = 0.0;
  double std_delta_accuracy = 0.0;
};

std::map<std::uint32_t, std::size_t> layer_profile(const std::vector<HeadId>& heads);

// Heads drawn for one control seed: for each layer in ascending order, the
// sorted non-excluded heads of that layer are shuffled with
// Rng(derive_seed(base_seed, run)) and the first `count` are kept.
std::vector<HeadId> draw_control_heads(const std::map<std::uint32_t, std::size_t>& profile,
                                       const std::vector<HeadId>& exclude,
                                       std::size_t n_heads_per_layer,
                                       std::uint64_t base_seed, std::uint64_t run);

// Layer-matched random control. Delta V is measured on `classes` (the
// baseline-significant set) against the baseline predictions of the cache.
ControlResult random_control(PredictionCache& cache,
                             const std::map<std::uint32_t, std::size_t>& profile,
                             const ControlConfig& config,
                             const std::vector<HeadId>& exclude,
                             const std::string& attribute,
                             const std::vector<std::uint32_t>& classes,
                             const StatsOptions& options = {});

struct ClassDelta {
  std::uint32_t true_class = 0;
  std::uint64_t n = 0;
  double accuracy_before = 0.0;  // within the class
  double accuracy_after = 0.0;
  std::optional<double> v_before;
  std::optional<double> v_after;
};

struct AblationSummary {
  std::vector<HeadId> heads;
  std::size_t n_correct = 0;
  double accuracy = 0.0;
  std::optional<double> mean_v;  // over the baseline-significant classes
  std::optional<double> delta_v;
  double delta_accuracy = 0.0;
  std::vector<ClassDelta> classes;
};

AblationSummary summarize_ablation(PredictionCache& cache,
                                   const std::vector<HeadId>& heads,
                                   const GlobalBias& baseline,
                                   const std::string& attribute,
                                   const StatsOptions& options = {});

struct CrossAttribute {
  std::string attribute;
  std::size_t n_significant = 0;
  std::optional<double> baseline_v;
  std::optional<double> ablated_v;
  std::optional<double> delta_v;
};

struct CandidateReport {
  HeadId head;
  std::vector<Evidence> evidence;
  TextSpanResult textspan;
  Corroboration corroboration;
};

struct AuditReport {
  AuditConfig config;
  std::string model_tag;
  std::size_t n_images = 0;
  std::vector<std::string> class_names;
  std::vector<std::string> value_names;  // gap columns

  std::size_t baseline_correct = 0;
  double baseline_accuracy = 0.0;
  GlobalBias baseline;

  GridResult grid;
  std::vector<CandidateReport> candidates;

  // Absent when the suspected set is empty.
  std::optional<AblationSummary> suspected;
  std::vector<ClassAttribution> attribution;
  std::optional<ControlResult> control;
  std::vector<CrossAttribute> cross;

  const std::vector<HeadId>& suspected_heads() const { return grid.selected.heads; }
};

AuditReport run_audit(const HeadContributionStore& store,
                      const PrototypeSet& prototypes,
                      const ClassifierMatrix& classifier,
                      const AuditConfig& config);

}  // namespace headaudit
