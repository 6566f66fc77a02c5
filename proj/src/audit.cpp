#include "headaudit/audit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "headaudit/error.hpp"
#include "headaudit/rng.hpp"

namespace headaudit {

void AuditConfig::validate() const {
  if (attribute.empty()) throw Error(Errc::kConfig, "audit needs an attribute");
  if (!(stats.alpha > 0.0 && stats.alpha < 1.0)) {
    throw Error(Errc::kConfig, "alpha must lie in (0, 1)");
  }
  grid.validate();
  if (textspan.k == 0 || textspan.rank == 0) {
    throw Error(Errc::kConfig, "textspan k and rank must be >= 1");
  }
  if (control.n_seeds == 0) throw Error(Errc::kConfig, "control needs n_seeds >= 1");
  if (workers == 0) throw Error(Errc::kConfig, "workers must be >= 1");
}

const Predictions& PredictionCache::get(const std::vector<HeadId>& heads) {
  if (heads.empty()) return engine_.baseline();
  auto it = cache_.find(heads);
  if (it == cache_.end()) it = cache_.emplace(heads, engine_.ablate(heads)).first;
  return it->second;
}

std::vector<std::uint32_t> redistribution_columns(const ContingencyTable& reference,
                                                  std::size_t per_group) {
  std::vector<std::uint32_t> columns{reference.true_class};
  const std::size_t K = reference.counts.cols;
  for (std::size_t g = 0; g < reference.counts.rows; ++g) {
    std::vector<std::uint32_t> others;
    for (std::uint32_t k = 0; k < K; ++k) {
      if (k != reference.true_class && reference.counts(g, k) > 0) others.push_back(k);
    }
    std::stable_sort(others.begin(), others.end(), [&](auto a, auto b) {
      return reference.counts(g, a) > reference.counts(g, b);
    });
    if (others.size() > per_group) others.resize(per_group);
    for (auto k : others) {
      if (std::find(columns.begin(), columns.end(), k) == columns.end()) {
        columns.push_back(k);
      }
    }
  }
  return columns;
}

Redistribution redistribution(const ContingencyTable& table,
                              const std::vector<std::uint32_t>& columns) {
  Redistribution r;
  r.columns = columns;
  r.groups = table.group_names;
  for (std::size_t g = 0; g < table.counts.rows; ++g) {
    const double total = static_cast<double>(table.row_total(g));
    std::vector<double> row;
    for (auto k : columns) {
      row.push_back(total > 0.0 ? 100.0 * static_cast<double>(table.counts(g, k)) / total
                                : 0.0);
    }
    r.rates.push_back(std::move(row));
  }
  return r;
}

ClassAttribution per_head_attribution(PredictionCache& cache,
                                      const std::vector<HeadId>& heads,
                                      std::uint32_t focus_class,
                                      const std::string& attribute,
                                      const StatsOptions& options) {
  const auto& store = cache.store();
  const auto& base = cache.get({});
  const auto base_v =
      class_v(base.labels, store, focus_class, attribute, options.min_group_size);
  if (!base_v) {
    throw Error(Errc::kInvalidArgument,
                "class " + store.manifest().class_names.at(focus_class) +
                    " is untestable for " + attribute);
  }
  const ContingencyTable base_table = build_contingency(
      base.labels, store, focus_class, attribute, options.min_group_size);
  ClassAttribution out;
  out.true_class = focus_class;
  out.baseline_v = *base_v;
  const auto columns = redistribution_columns(base_table);
  out.baseline_rates = redistribution(base_table, columns);

  auto row_for = [&](std::vector<HeadId> set, std::string label) {
    const auto& preds = cache.get(set);
    AttributionRow row;
    row.label = std::move(label);
    row.heads = std::move(set);
    row.v = class_v(preds.labels, store, focus_class, attribute, options.min_group_size)
                .value_or(0.0);
    row.delta_v = row.v - out.baseline_v;
    row.rates = redistribution(
        build_contingency(preds.labels, store, focus_class, attribute,
                          options.min_group_size),
        columns);
    return row;
  };
  std::vector<HeadId> sorted = heads;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (const auto& h : sorted) out.rows.push_back(row_for({h}, to_string(h)));
  std::stable_sort(out.rows.begin(), out.rows.end(),
                   [](const auto& a, const auto& b) { return a.delta_v < b.delta_v; });
  out.combined = row_for(sorted, "combined");
  return out;
}

std::map<std::uint32_t, std::size_t> layer_profile(const std::vector<HeadId>& heads) {
  std::map<std::uint32_t, std::size_t> profile;
  for (const auto& h : heads) ++profile[h.layer];
  return profile;
}

std::vector<HeadId> draw_control_heads(const std::map<std::uint32_t, std::size_t>& profile,
                                       const std::vector<HeadId>& exclude,
                                       std::size_t n_heads_per_layer,
                                       std::uint64_t base_seed, std::uint64_t run) {
  Rng rng(derive_seed(base_seed, run));
  std::vector<HeadId> drawn;
  for (const auto& [layer, count] : profile) {
    std::vector<HeadId> pool;
    for (std::uint32_t h = 0; h < n_heads_per_layer; ++h) {
      const HeadId id{layer, h};
      if (std::find(exclude.begin(), exclude.end(), id) == exclude.end()) {
        pool.push_back(id);
      }
    }
    if (pool.size() < count) {
      throw Error(Errc::kInvalidArgument,
                  "infeasible control profile: layer " + std::to_string(layer) +
                      " needs " + std::to_string(count) + " heads but only " +
                      std::to_string(pool.size()) + " are available");
    }
    rng.shuffle(std::span<HeadId>(pool));
    drawn.insert(drawn.end(), pool.begin(), pool.begin() + static_cast<long>(count));
  }
  std::sort(drawn.begin(), drawn.end());
  return drawn;
}

namespace {

void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
  mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  sd = std::sqrt(ss / static_cast<double>(xs.size()));
}

}  // namespace

ControlResult random_control(PredictionCache& cache,
                             const std::map<std::uint32_t, std::size_t>& profile,
                             const ControlConfig& config,
                             const std::vector<HeadId>& exclude,
                             const std::string& attribute,
                             const std::vector<std::uint32_t>& classes,
                             const StatsOptions& options) {
  const auto& store = cache.store();
  if (config.n_seeds == 0) throw Error(Errc::kConfig, "control needs n_seeds >= 1");
  for (const auto& [layer, count] : profile) {
    if (layer >= store.n_layers()) {
      throw Error(Errc::kInvalidArgument,
                  "control profile names layer " + std::to_string(layer) +
                      " but the store has " + std::to_string(store.n_layers()));
    }
  }
  ControlResult out;
  out.profile = profile;
  out.excluded = exclude;
  std::sort(out.excluded.begin(), out.excluded.end());

  const auto& base = cache.get({});
  const double base_acc = base.accuracy(store);
  const auto base_v =
      mean_v_over(base.labels, store, classes, attribute, options.min_group_size);
  std::vector<double> dv, acc, dacc;
  for (std::uint64_t s = 0; s < config.n_seeds; ++s) {
    ControlRun run;
    run.seed = derive_seed(config.seed, s);
    run.heads = draw_control_heads(profile, out.excluded, store.n_heads(), config.seed, s);
    for (const auto& h : run.heads) {
      if (std::binary_search(out.excluded.begin(), out.excluded.end(), h)) {
        throw std::logic_error("control draw contains an excluded head");
      }
    }
    const auto preds = cache.engine().ablate(run.heads);
    run.mean_v =
        mean_v_over(preds.labels, store, classes, attribute, options.min_group_size);
    run.delta_v = (run.mean_v && base_v) ? *run.mean_v - *base_v : 0.0;
    run.accuracy = preds.accuracy(store);
    run.delta_accuracy = run.accuracy - base_acc;
    dv.push_back(run.delta_v);
    acc.push_back(run.accuracy);
    dacc.push_back(run.delta_accuracy);
    out.runs.push_back(std::move(run));
  }
  mean_std(dv, out.mean_delta_v, out.std_delta_v);
  mean_std(acc, out.mean_accuracy, out.std_accuracy);
  mean_std(dacc, out.mean_delta_accuracy, out.std_delta_accuracy);
  return out;
}

AblationSummary summarize_ablation(PredictionCache& cache,
                                   const std::vector<HeadId>& heads,
                                   const GlobalBias& baseline,
                                   const std::string& attribute,
                                   const StatsOptions& options) {
  const auto& store = cache.store();
  const auto& base = cache.get({});
  const auto& preds = cache.get(heads);
  AblationSummary s;
  s.heads = heads;
  s.n_correct = preds.n_correct(store);
  s.accuracy = preds.accuracy(store);
  s.delta_accuracy = s.accuracy - base.accuracy(store);
  s.mean_v = mean_v_over(preds.labels, store, baseline.significant_classes, attribute,
                         options.min_group_size);
  if (s.mean_v && baseline.mean_v) s.delta_v = *s.mean_v - *baseline.mean_v;

  const std::size_t K = store.n_classes();
  std::vector<std::uint64_t> n(K, 0), before(K, 0), after(K, 0);
  for (std::size_t i = 0; i < store.n_images(); ++i) {
    const auto y = store.true_class(i);
    ++n[y];
    before[y] += base.labels[i] == y;
    after[y] += preds.labels[i] == y;
  }
  for (std::uint32_t k = 0; k < K; ++k) {
    ClassDelta d;
    d.true_class = k;
    d.n = n[k];
    if (n[k] > 0) {
      d.accuracy_before = static_cast<double>(before[k]) / static_cast<double>(n[k]);
      d.accuracy_after = static_cast<double>(after[k]) / static_cast<double>(n[k]);
    }
    d.v_before = class_v(base.labels, store, k, attribute, options.min_group_size);
    d.v_after = class_v(preds.labels, store, k, attribute, options.min_group_size);
    s.classes.push_back(d);
  }
  return s;
}

AuditReport run_audit(const HeadContributionStore& store,
                      const PrototypeSet& prototypes,
                      const ClassifierMatrix& classifier,
                      const AuditConfig& config) {
  config.validate();
  check_compatible(store, prototypes);
  check_compatible(store, classifier);
  store.manifest().require_attribute(config.attribute);

  AuditReport report;
  report.config = config;
  report.model_tag = store.manifest().model_tag;
  report.n_images = store.n_images();
  report.class_names = store.manifest().class_names;

  const AblationEngine engine(store, classifier, config.workers);
  PredictionCache cache(engine);
  const auto& base = engine.baseline();
  report.baseline_correct = base.n_correct(store);
  report.baseline_accuracy = base.accuracy(store);
  report.baseline = global_bias(base.labels, store, config.attribute, config.stats);

  const AlignmentTable table = compute_alignment(store, prototypes, config.attribute,
                                                 config.gap_scope, config.workers);
  report.value_names = table.value_names;
  report.grid = grid_search(engine, table, report.baseline, config.attribute,
                            config.grid, {config.stats});

  const auto& suspected = report.grid.selected.heads;
  for (const auto& h : suspected) {
    CandidateReport c;
    c.head = h;
    for (const auto& e : report.grid.selected.evidence) {
      if (e.head == h) c.evidence.push_back(e);
    }
    c.textspan = textspan(store, h, prototypes, config.textspan);
    c.corroboration = corroborate(c.textspan, config.attribute);
    report.candidates.push_back(std::move(c));
  }
  if (suspected.empty()) return report;

  report.suspected =
      summarize_ablation(cache, suspected, report.baseline, config.attribute, config.stats);
  for (auto k : report.baseline.significant_classes) {
    report.attribution.push_back(
        per_head_attribution(cache, suspected, k, config.attribute, config.stats));
  }
  report.control = random_control(cache, layer_profile(suspected), config.control,
                                  suspected, config.attribute,
                                  report.baseline.significant_classes, config.stats);

  const auto& ablated = cache.get(suspected);
  for (const auto& attr : store.manifest().attributes) {
    if (attr.name == config.attribute) continue;
    const GlobalBias other = global_bias(base.labels, store, attr.name, config.stats);
    CrossAttribute x;
    x.attribute = attr.name;
    x.n_significant = other.n_significant();
    x.baseline_v = other.mean_v;
    x.ablated_v = mean_v_over(ablated.labels, store, other.significant_classes, attr.name,
                              config.stats.min_group_size);
    if (x.baseline_v && x.ablated_v) x.delta_v = *x.ablated_v - *x.baseline_v;
    report.cross.push_back(x);
  }
  return report;
}

}  // namespace headaudit
