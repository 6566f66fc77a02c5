#include "headaudit/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "headaudit/error.hpp"

namespace headaudit {

std::optional<double> AlignmentTable::occ(std::size_t l, std::size_t h,
                                          std::size_t p) const {
  if (!is_defined(l, h, p)) return std::nullopt;
  return s_occ[(l * n_heads + h) * n_classes + p];
}

std::optional<std::span<const double>> AlignmentTable::bias(
    std::size_t l, std::size_t h, std::size_t p) const {
  if (!is_defined(l, h, p)) return std::nullopt;
  const std::size_t base = ((l * n_heads + h) * n_classes + p) * n_values();
  return std::span<const double>(s_bias.data() + base, n_values());
}

AlignmentTable compute_alignment(const HeadContributionStore& store,
                                 const PrototypeSet& prototypes,
                                 const std::string& attribute, GapScope scope,
                                 unsigned workers) {
  check_compatible(store, prototypes);
  store.manifest().require_attribute(attribute);
  const auto proto_attr = prototypes.attribute_index(attribute);
  if (!proto_attr) {
    throw Error(Errc::kInvalidArgument,
                "prototypes have no demographic attribute '" + attribute + "'");
  }

  // Demographic directions compared by the gap.
  std::vector<std::span<const float>> demo_rows;
  AlignmentTable t;
  auto add_attribute = [&](std::size_t a) {
    const auto& attr = prototypes.attributes[a];
    for (std::size_t v = 0; v < attr.values.size(); ++v) {
      t.value_names.push_back(attr.name + "/" + attr.values[v]);
      demo_rows.push_back(prototypes.demographic[a].row(v));
    }
  };
  if (scope == GapScope::kAttribute) {
    add_attribute(*proto_attr);
  } else {
    for (std::size_t a = 0; a < prototypes.attributes.size(); ++a) add_attribute(a);
  }

  const std::size_t L = store.n_layers();
  const std::size_t H = store.n_heads();
  const std::size_t K = store.n_classes();
  const std::size_t d = store.embed_dim();
  const std::size_t V = t.value_names.size();
  t.n_layers = L;
  t.n_heads = H;
  t.n_classes = K;
  t.centroid_counts.assign(K, 0);
  for (std::size_t i = 0; i < store.n_images(); ++i) {
    ++t.centroid_counts[store.true_class(i)];
  }
  t.s_occ.assign(L * H * K, 0.0);
  t.s_bias.assign(L * H * K * V, 0.0);
  t.defined.assign(L * H * K, 0);

  std::vector<double> occ_norm(K), demo_norm(V);
  for (std::size_t p = 0; p < K; ++p) {
    occ_norm[p] = std::sqrt(squared_norm(prototypes.occupation.row(p)));
  }
  for (std::size_t v = 0; v < V; ++v) {
    demo_norm[v] = std::sqrt(squared_norm(demo_rows[v]));
  }

  parallel_for(L * H, workers, [&](std::size_t begin, std::size_t end) {
    std::vector<double> sums(K * d);
    for (std::size_t slot = begin; slot < end; ++slot) {
      const std::size_t l = slot / H;
      const std::size_t h = slot % H;
      std::fill(sums.begin(), sums.end(), 0.0);
      for (std::size_t i = 0; i < store.n_images(); ++i) {
        const auto c = store.head(i, l, h);
        double* acc = &sums[store.true_class(i) * d];
        for (std::size_t k = 0; k < d; ++k) acc[k] += static_cast<double>(c[k]);
      }
      for (std::size_t p = 0; p < K; ++p) {
        if (t.centroid_counts[p] == 0) continue;
        std::span<double> centroid(&sums[p * d], d);
        const double count = static_cast<double>(t.centroid_counts[p]);
        for (auto& x : centroid) x /= count;
        const double norm = std::sqrt(squared_norm<double>(centroid));
        if (norm == 0.0) continue;
        const std::size_t cell = slot * K + p;
        t.defined[cell] = 1;
        t.s_occ[cell] = dot<double, float>(centroid, prototypes.occupation.row(p)) /
                        (norm * occ_norm[p]);
        for (std::size_t v = 0; v < V; ++v) {
          t.s_bias[cell * V + v] =
              dot<double, float>(centroid, demo_rows[v]) / (norm * demo_norm[v]);
        }
      }
    }
  });
  return t;
}

GapResult directional_gap(std::span<const double> similarities) {
  if (similarities.size() < 2) {
    throw Error(Errc::kInvalidArgument,
                "directional gap needs at least 2 demographic values");
  }
  std::size_t first = 0;
  for (std::size_t i = 1; i < similarities.size(); ++i) {
    if (std::abs(similarities[i]) > std::abs(similarities[first])) first = i;
  }
  double second = -1.0;
  for (std::size_t i = 0; i < similarities.size(); ++i) {
    if (i != first) second = std::max(second, std::abs(similarities[i]));
  }
  return {std::abs(similarities[first]) - second, first};
}

void ThresholdPair::validate() const {
  if (!(tau_gap > 0.0) || !(tau_occ > 0.0)) {
    throw Error(Errc::kInvalidArgument, "thresholds must both be > 0");
  }
}

std::vector<Evidence> gap_entries(const AlignmentTable& table) {
  std::vector<Evidence> out;
  if (table.n_values() < 2) return out;
  for (std::size_t l = 0; l < table.n_layers; ++l) {
    for (std::size_t h = 0; h < table.n_heads; ++h) {
      for (std::size_t p = 0; p < table.n_classes; ++p) {
        const auto bias = table.bias(l, h, p);
        if (!bias) continue;
        const GapResult g = directional_gap(*bias);
        out.push_back({{static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(h)},
                       static_cast<std::uint32_t>(p),
                       static_cast<std::uint32_t>(g.dominant),
                       g.gap,
                       std::abs(*table.occ(l, h, p))});
      }
    }
  }
  return out;
}

CandidateSet select_candidates(std::span<const Evidence> entries,
                               const ThresholdPair& thresholds) {
  CandidateSet out;
  for (const auto& e : entries) {
    if (e.gap > thresholds.tau_gap && e.abs_s_occ > thresholds.tau_occ) {
      out.evidence.push_back(e);
      if (out.heads.empty() || out.heads.back() != e.head) {
        out.heads.push_back(e.head);
      }
    }
  }
  // Entries arrive in (layer, head) order, so heads are already sorted.
  return out;
}

CandidateSet select_candidates(const AlignmentTable& table,
                               const ThresholdPair& thresholds) {
  const auto entries = gap_entries(table);
  return select_candidates(entries, thresholds);
}

namespace {

std::vector<double> axis(double lo, double hi, double step, const char* name) {
  if (!(step > 0.0) || !(lo > 0.0) || hi < lo) {
    throw Error(Errc::kConfig, std::string("invalid grid range for ") + name);
  }
  const auto n = static_cast<std::size_t>(std::llround((hi - lo) / step)) + 1;
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = lo + static_cast<double>(i) * step;
  return values;
}

// Orders feasible cells: lower V, then fewer heads, then larger tau_gap, then
// larger tau_occ. An undefined V ranks after every defined one.
bool better_cell(const GridCell& a, const GridCell& b) {
  if (a.mean_v.has_value() != b.mean_v.has_value()) return a.mean_v.has_value();
  if (a.mean_v && *a.mean_v != *b.mean_v) return *a.mean_v < *b.mean_v;
  if (a.n_heads != b.n_heads) return a.n_heads < b.n_heads;
  if (a.thresholds.tau_gap != b.thresholds.tau_gap) {
    return a.thresholds.tau_gap > b.thresholds.tau_gap;
  }
  return a.thresholds.tau_occ > b.thresholds.tau_occ;
}

}  // namespace

std::vector<double> GridSpec::gap_values() const {
  return axis(gap_min, gap_max, gap_step, "tau_gap");
}

std::vector<double> GridSpec::occ_values() const {
  return axis(occ_min, occ_max, occ_step, "tau_occ");
}

void GridSpec::validate() const {
  gap_values();
  occ_values();
}

GridResult grid_search(const AblationEngine& engine, const AlignmentTable& table,
                       const GlobalBias& baseline, const std::string& attribute,
                       const GridSpec& spec, const GridOptions& options) {
  spec.validate();
  const auto& store = engine.store();
  GridResult result;
  result.baseline_correct = engine.baseline().n_correct(store);
  result.baseline_accuracy = engine.baseline().accuracy(store);
  result.baseline_v = baseline.mean_v;
  result.baseline_significant = baseline.significant_classes;

  const auto entries = gap_entries(table);
  std::map<std::vector<HeadId>, std::size_t> set_ids;
  std::vector<CandidateSet> sets;
  for (double g : spec.gap_values()) {
    for (double o : spec.occ_values()) {
      CandidateSet c = select_candidates(entries, {g, o});
      auto [it, inserted] = set_ids.emplace(c.heads, sets.size());
      if (inserted) sets.push_back(std::move(c));
      GridCell cell;
      cell.thresholds = {g, o};
      cell.set_index = it->second;
      cell.n_heads = it->first.size();
      result.trace.push_back(cell);
    }
  }

  struct SetMetrics {
    std::size_t n_correct;
    std::optional<double> mean_v;
  };
  std::vector<SetMetrics> metrics;
  metrics.reserve(sets.size());
  for (const auto& s : sets) {
    const Predictions& preds =
        s.heads.empty() ? engine.baseline() : engine.ablate(s.heads);
    metrics.push_back({preds.n_correct(store),
                       mean_v_over(preds.labels, store, baseline.significant_classes,
                                   attribute, options.stats.min_group_size)});
    result.distinct_sets.push_back(s.heads);
  }

  const double n = static_cast<double>(std::max<std::size_t>(1, store.n_images()));
  std::optional<std::size_t> best;
  for (std::size_t c = 0; c < result.trace.size(); ++c) {
    auto& cell = result.trace[c];
    const auto& m = metrics[cell.set_index];
    cell.n_correct = m.n_correct;
    cell.accuracy = static_cast<double>(m.n_correct) / n;
    cell.mean_v = m.mean_v;
    // Feasibility is decided before the objective is compared.
    cell.feasible = m.n_correct >= result.baseline_correct;
    if (!cell.feasible) continue;
    if (!best || better_cell(cell, result.trace[*best])) best = c;
  }
  if (best) {
    result.feasible = true;
    result.best_cell = *best;
    result.best = result.trace[*best].thresholds;
    result.selected = sets[result.trace[*best].set_index];
  }
  return result;
}

GridResult grid_search(const HeadContributionStore& store,
                       const PrototypeSet& prototypes,
                       const ClassifierMatrix& classifier,
                       const std::string& attribute, const GridSpec& spec,
                       const GridOptions& options, GapScope scope,
                       unsigned workers) {
  const AblationEngine engine(store, classifier, workers);
  const GlobalBias baseline =
      global_bias(engine.baseline().labels, store, attribute, options.stats);
  const AlignmentTable table =
      compute_alignment(store, prototypes, attribute, scope, workers);
  return grid_search(engine, table, baseline, attribute, spec, options);
}

}  // namespace headaudit
