#include "headaudit/report.hpp"

#include <algorithm>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "blob_io.hpp"
#include "headaudit/error.hpp"

namespace headaudit {

namespace {

using nlohmann::ordered_json;

std::string fmt(const char* format, ...) {
  va_list args;
  va_start(args, format);
  char buf[512];
  std::vsnprintf(buf, sizeof buf, format, args);
  va_end(args);
  return buf;
}

ordered_json opt(const std::optional<double>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

std::string opt_text(const std::optional<double>& v, const char* format = "%.3f") {
  return v ? fmt(format, *v) : std::string("n/a");
}

ordered_json heads_json(const std::vector<HeadId>& heads) {
  ordered_json a = ordered_json::array();
  for (const auto& h : heads) a.push_back(to_string(h));
  return a;
}

const char* scope_name(GapScope scope) {
  return scope == GapScope::kAttribute ? "attribute" : "all_attributes";
}

// Three most frequent predictions over the kept groups, ties by class index.
std::vector<std::uint32_t> top_predictions(const ContingencyTable& t, std::size_t n) {
  std::vector<std::uint64_t> totals(t.counts.cols, 0);
  for (std::size_t g = 0; g < t.counts.rows; ++g) {
    for (std::size_t k = 0; k < t.counts.cols; ++k) totals[k] += t.counts(g, k);
  }
  std::vector<std::uint32_t> order(t.counts.cols);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return totals[a] > totals[b]; });
  std::vector<std::uint32_t> out;
  for (auto k : order) {
    if (out.size() == n || totals[k] == 0) break;
    out.push_back(k);
  }
  return out;
}

ordered_json redistribution_json(const Redistribution& r,
                                 const std::vector<std::string>& class_names) {
  ordered_json j;
  ordered_json cols = ordered_json::array();
  for (auto c : r.columns) cols.push_back(class_names.at(c));
  j["columns"] = cols;
  j["groups"] = r.groups;
  j["rates_percent"] = r.rates;
  return j;
}

ordered_json attribution_row_json(const AttributionRow& row,
                                  const std::vector<std::string>& class_names) {
  return {{"label", row.label},
          {"heads", heads_json(row.heads)},
          {"v", row.v},
          {"delta_v", row.delta_v},
          {"rates", redistribution_json(row.rates, class_names)}};
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

std::string rates_text(const Redistribution& r, std::size_t g) {
  std::string out;
  for (std::size_t c = 0; c < r.columns.size(); ++c) out += fmt("%9.1f", r.rates[g][c]);
  return out;
}

}  // namespace

ReportSections ReportSections::parse(const std::string& list) {
  if (list.empty() || list == "all") return {};
  ReportSections s;
  s.baseline = s.grid = s.candidates = s.suspected = s.attribution = s.control =
      s.cross = false;
  std::stringstream in(list);
  std::string name;
  while (std::getline(in, name, ',')) {
    if (name == "baseline") s.baseline = true;
    else if (name == "grid") s.grid = true;
    else if (name == "candidates") s.candidates = true;
    else if (name == "suspected") s.suspected = true;
    else if (name == "attribution") s.attribution = true;
    else if (name == "control") s.control = true;
    else if (name == "cross") s.cross = true;
    else throw Error(Errc::kConfig, "unknown report section '" + name + "'");
  }
  return s;
}

ordered_json config_to_json(const AuditConfig& c) {
  ordered_json j;
  j["attribute"] = c.attribute;
  j["alpha"] = c.stats.alpha;
  j["min_group_size"] = c.stats.min_group_size;
  j["gap_scope"] = scope_name(c.gap_scope);
  j["grid"] = {{"gap_min", c.grid.gap_min}, {"gap_max", c.grid.gap_max},
               {"gap_step", c.grid.gap_step}, {"occ_min", c.grid.occ_min},
               {"occ_max", c.grid.occ_max},   {"occ_step", c.grid.occ_step}};
  j["textspan"] = {{"k", c.textspan.k}, {"rank", c.textspan.rank}};
  j["control"] = {{"n_seeds", c.control.n_seeds}, {"seed", c.control.seed}};
  return j;
}

ordered_json report_to_json(const AuditReport& r, const ReportSections& sections) {
  const auto& names = r.class_names;
  ordered_json j;
  j["format"] = "headaudit-report";
  j["version"] = 1;
  j["model_tag"] = r.model_tag;
  j["n_images"] = r.n_images;
  j["attribute"] = r.config.attribute;
  j["config"] = config_to_json(r.config);

  if (sections.baseline) {
    ordered_json b;
    b["n_correct"] = r.baseline_correct;
    b["accuracy"] = r.baseline_accuracy;
    b["n_significant"] = r.baseline.n_significant();
    b["mean_v"] = opt(r.baseline.mean_v);
    ordered_json sig = ordered_json::array();
    for (auto k : r.baseline.significant_classes) sig.push_back(names.at(k));
    b["significant_classes"] = sig;
    b["classes"] = ordered_json::array();
    for (const auto& c : r.baseline.classes) {
      ordered_json row;
      row["class"] = names.at(c.true_class);
      row["status"] = status_name(c.status);
      row["n"] = c.n;
      row["groups"] = c.table.group_names;
      ordered_json excluded = ordered_json::array();
      for (const auto& e : c.table.excluded_groups) {
        excluded.push_back({{"group", e.name}, {"count", e.count}});
      }
      row["excluded_groups"] = excluded;
      row["n_unknown"] = c.table.n_unknown;
      if (c.tested()) {
        row["chi2"] = c.chi2;
        row["dof"] = c.dof;
        row["dof_before_drop"] = c.dof_before_drop;
        row["p_value"] = c.p_value;
        row["p_adjusted"] = c.p_adjusted;
        row["significant"] = c.significant;
        row["cramers_v"] = c.cramers_v;
      }
      b["classes"].push_back(std::move(row));
    }
    j["baseline"] = std::move(b);
  }

  if (sections.grid) {
    const auto& g = r.grid;
    ordered_json o;
    o["feasible"] = g.feasible;
    o["n_cells"] = g.trace.size();
    o["n_distinct_sets"] = g.distinct_sets.size();
    if (g.feasible) {
      o["best"] = {{"tau_gap", g.best.tau_gap}, {"tau_occ", g.best.tau_occ}};
      const auto& cell = g.trace[g.best_cell];
      o["best_mean_v"] = opt(cell.mean_v);
      o["best_accuracy"] = cell.accuracy;
    } else {
      o["best"] = nullptr;
    }
    o["selected"] = heads_json(g.selected.heads);
    j["grid"] = std::move(o);
  }

  if (sections.candidates) {
    j["candidates"] = ordered_json::array();
    for (const auto& c : r.candidates) {
      ordered_json o;
      o["head"] = to_string(c.head);
      o["evidence"] = ordered_json::array();
      for (const auto& e : c.evidence) {
        o["evidence"].push_back({{"profession", names.at(e.profession)},
                                 {"dominant_value", r.value_names.at(e.dominant_value)},
                                 {"gap", e.gap},
                                 {"abs_s_occ", e.abs_s_occ}});
      }
      o["corroborated"] = c.corroboration.corroborated;
      o["matched_texts"] = c.corroboration.matched;
      ordered_json ts;
      ts["effective_rank"] = c.textspan.effective_rank;
      ts["degenerate"] = c.textspan.degenerate;
      ts["exhausted"] = c.textspan.exhausted;
      ts["selected"] = ordered_json::array();
      for (std::size_t i = 0; i < c.textspan.selected.size(); ++i) {
        const auto& s = c.textspan.selected[i];
        ts["selected"].push_back({{"rank", i + 1},
                                  {"text", s.name},
                                  {"category", category_name(s.category)},
                                  {"variance", s.variance}});
      }
      o["textspan"] = std::move(ts);
      j["candidates"].push_back(std::move(o));
    }
  }

  if (r.suspected && sections.suspected) {
    const auto& s = *r.suspected;
    ordered_json o;
    o["heads"] = heads_json(s.heads);
    o["n_correct"] = s.n_correct;
    o["accuracy"] = s.accuracy;
    o["delta_accuracy"] = s.delta_accuracy;
    o["mean_v"] = opt(s.mean_v);
    o["delta_v"] = opt(s.delta_v);
    o["classes"] = ordered_json::array();
    for (const auto& c : s.classes) {
      o["classes"].push_back({{"class", names.at(c.true_class)},
                              {"n", c.n},
                              {"accuracy_before", c.accuracy_before},
                              {"accuracy_after", c.accuracy_after},
                              {"delta_accuracy_pp",
                               100.0 * (c.accuracy_after - c.accuracy_before)},
                              {"v_before", opt(c.v_before)},
                              {"v_after", opt(c.v_after)}});
    }
    j["suspected"] = std::move(o);
  }

  if (r.suspected && sections.attribution) {
    j["attribution"] = ordered_json::array();
    for (const auto& a : r.attribution) {
      ordered_json o;
      o["class"] = names.at(a.true_class);
      o["baseline_v"] = a.baseline_v;
      o["baseline_rates"] = redistribution_json(a.baseline_rates, names);
      o["rows"] = ordered_json::array();
      for (const auto& row : a.rows) o["rows"].push_back(attribution_row_json(row, names));
      o["combined"] = attribution_row_json(a.combined, names);
      j["attribution"].push_back(std::move(o));
    }
  }

  if (r.control && sections.control) {
    const auto& c = *r.control;
    ordered_json o;
    ordered_json profile = ordered_json::object();
    for (const auto& [layer, count] : c.profile) profile[std::to_string(layer)] = count;
    o["profile"] = profile;
    o["excluded"] = heads_json(c.excluded);
    o["std"] = "population";
    o["mean_delta_v"] = c.mean_delta_v;
    o["std_delta_v"] = c.std_delta_v;
    o["mean_accuracy"] = c.mean_accuracy;
    o["std_accuracy"] = c.std_accuracy;
    o["mean_delta_accuracy"] = c.mean_delta_accuracy;
    o["std_delta_accuracy"] = c.std_delta_accuracy;
    o["runs"] = ordered_json::array();
    for (const auto& run : c.runs) {
      o["runs"].push_back({{"seed", run.seed},
                           {"heads", heads_json(run.heads)},
                           {"mean_v", opt(run.mean_v)},
                           {"delta_v", run.delta_v},
                           {"accuracy", run.accuracy},
                           {"delta_accuracy", run.delta_accuracy}});
    }
    j["control"] = std::move(o);
  }

  if (r.suspected && sections.cross) {
    j["cross"] = ordered_json::array();
    for (const auto& x : r.cross) {
      j["cross"].push_back({{"attribute", x.attribute},
                            {"n_significant", x.n_significant},
                            {"baseline_v", opt(x.baseline_v)},
                            {"ablated_v", opt(x.ablated_v)},
                            {"delta_v", opt(x.delta_v)}});
    }
  }
  return j;
}

std::string report_to_text(const AuditReport& r, const ReportSections& sections) {
  const auto& names = r.class_names;
  std::ostringstream out;
  out << "Audit of attribute '" << r.config.attribute << "' on " << r.n_images
      << " images (" << r.model_tag << ")\n";

  if (sections.baseline) {
    out << "\nBaseline\n";
    out << fmt("  accuracy %.2f%% (%zu correct)\n", 100.0 * r.baseline_accuracy,
               r.baseline_correct);
    out << "  " << r.baseline.n_significant() << " of " << names.size()
        << " classes significant; global V = " << opt_text(r.baseline.mean_v) << "\n\n";
    out << "  " << pad("class", 16) << pad("status", 16) << fmt("%6s %7s %10s %4s  ", "N", "V", "p_adj", "sig")
        << "top predictions (per-group %)\n";
    std::vector<const ClassBiasResult*> rows;
    for (const auto& c : r.baseline.classes) rows.push_back(&c);
    std::stable_sort(rows.begin(), rows.end(), [](auto a, auto b) {
      if (a->tested() != b->tested()) return a->tested();
      return a->cramers_v > b->cramers_v;
    });
    for (const auto* c : rows) {
      out << "  " << pad(names.at(c->true_class), 16) << pad(status_name(c->status), 16);
      if (c->tested()) {
        out << fmt("%6llu %7.3f %10.3g %4s  ", static_cast<unsigned long long>(c->n),
                   c->cramers_v, c->p_adjusted, c->significant ? "*" : "");
      } else {
        out << fmt("%6llu %7s %10s %4s  ", static_cast<unsigned long long>(c->n), "-", "-", "");
      }
      std::string preds;
      for (auto k : top_predictions(c->table, 3)) {
        if (!preds.empty()) preds += "; ";
        preds += names.at(k) + " (";
        for (std::size_t g = 0; g < c->table.counts.rows; ++g) {
          const double total = static_cast<double>(c->table.row_total(g));
          const double rate = total > 0 ? 100.0 * c->table.counts(g, k) / total : 0.0;
          preds += (g ? " " : "") + c->table.group_names[g] + fmt(" %.1f", rate);
        }
        preds += ")";
      }
      out << preds << "\n";
    }
  }

  if (sections.grid) {
    const auto& g = r.grid;
    out << "\nThreshold search\n";
    out << "  " << g.trace.size() << " cells, " << g.distinct_sets.size()
        << " distinct head sets\n";
    if (g.feasible) {
      out << fmt("  best tau_gap = %.3f, tau_occ = %.3f\n", g.best.tau_gap, g.best.tau_occ);
      out << "  suspected heads (" << g.selected.heads.size() << "): "
          << (g.selected.heads.empty() ? std::string("none") : join_heads(g.selected.heads))
          << "\n";
    } else {
      out << "  no feasible threshold pair: every cell lowers accuracy\n";
    }
  }

  if (sections.candidates && !r.candidates.empty()) {
    out << "\nCandidate heads\n";
    for (const auto& c : r.candidates) {
      out << "  " << to_string(c.head) << "\n    evidence:";
      for (const auto& e : c.evidence) {
        out << " " << names.at(e.profession) << " ("
            << r.value_names.at(e.dominant_value)
            << fmt(", G=%.4f, |S_occ|=%.3f)", e.gap, e.abs_s_occ);
      }
      out << "\n    TextSpan:";
      for (std::size_t i = 0; i < c.textspan.selected.size(); ++i) {
        const auto& s = c.textspan.selected[i];
        out << (i % 4 == 0 ? "\n      " : "  ")
            << fmt("%2zu. ", i + 1) << s.name << fmt(" (%.3g)", s.variance);
      }
      if (c.textspan.degenerate) out << "\n      [degenerate]";
      if (c.textspan.exhausted) out << "\n      [dictionary exhausted]";
      out << "\n    corroborated: "
          << (c.corroboration.corroborated ? "yes" : "no");
      for (const auto& m : c.corroboration.matched) out << " " << m;
      out << "\n";
    }
  }

  if (r.suspected && (sections.suspected || sections.control)) {
    out << "\nGlobal ablation\n";
    out << "  " << pad("condition", 22) << fmt("%6s %18s %8s %18s\n", "heads", "accuracy %", "V", "delta V");
    out << "  " << pad("baseline", 22)
        << fmt("%6d %18.2f %8s %18s\n", 0, 100.0 * r.baseline_accuracy,
               opt_text(r.baseline.mean_v).c_str(), "-");
    const auto& s = *r.suspected;
    if (sections.suspected) {
      out << "  " << pad(fmt("suspected (%zu)", s.heads.size()), 22)
          << fmt("%6zu %18.2f %8s %18s\n", s.heads.size(), 100.0 * s.accuracy,
                 opt_text(s.mean_v).c_str(), opt_text(s.delta_v, "%+.3f").c_str());
    }
    if (r.control && sections.control) {
      const auto& c = *r.control;
      out << "  " << pad(fmt("random avg (%zu)", s.heads.size()), 22)
          << fmt("%6zu %9.2f +- %5.2f %8s %+9.3f +- %5.3f\n", s.heads.size(),
                 100.0 * c.mean_accuracy, 100.0 * c.std_accuracy,
                 opt_text(r.baseline.mean_v
                              ? std::optional<double>(*r.baseline.mean_v + c.mean_delta_v)
                              : std::nullopt)
                     .c_str(),
                 c.mean_delta_v, c.std_delta_v);
      out << "  random control: " << c.runs.size()
          << " seeds, layer-matched, suspected heads excluded, population std\n";
    }
  }

  if (r.suspected && sections.attribution) {
    for (const auto& a : r.attribution) {
      out << "\nPer-head ablation: " << names.at(a.true_class) << "\n";
      out << "  " << pad("head", 12) << fmt("%7s %8s ", "V", "delta V");
      for (std::size_t g = 0; g < a.baseline_rates.groups.size(); ++g) {
        for (auto c : a.baseline_rates.columns) {
          out << fmt(" %8.8s", (a.baseline_rates.groups[g].substr(0, 3) + ">" +
                                names.at(c).substr(0, 4)).c_str());
        }
      }
      out << "\n";
      auto line = [&](const std::string& label, double v, const std::string& dv,
                      const Redistribution& rates) {
        out << "  " << pad(label, 12) << fmt("%7.3f %8s ", v, dv.c_str());
        for (std::size_t g = 0; g < rates.groups.size(); ++g) out << rates_text(rates, g);
        out << "\n";
      };
      line("baseline", a.baseline_v, "-", a.baseline_rates);
      for (const auto& row : a.rows) line(row.label, row.v, fmt("%+.3f", row.delta_v), row.rates);
      line("combined", a.combined.v, fmt("%+.3f", a.combined.delta_v), a.combined.rates);
    }
  }

  if (r.suspected && sections.suspected) {
    out << "\nPer-class accuracy change (pp)\n";
    std::vector<ClassDelta> rows = r.suspected->classes;
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
      return (a.accuracy_after - a.accuracy_before) > (b.accuracy_after - b.accuracy_before);
    });
    for (const auto& c : rows) {
      out << "  " << pad(names.at(c.true_class), 16)
          << fmt("%8.2f -> %6.2f  %+7.2f\n", 100.0 * c.accuracy_before,
                 100.0 * c.accuracy_after, 100.0 * (c.accuracy_after - c.accuracy_before));
    }
  }

  if (r.suspected && sections.cross && !r.cross.empty()) {
    out << "\nCross-attribute effect of the suspected heads\n";
    for (const auto& x : r.cross) {
      out << "  " << pad(x.attribute, 12) << x.n_significant << " significant classes, V "
          << opt_text(x.baseline_v) << " -> " << opt_text(x.ablated_v) << ", delta V "
          << opt_text(x.delta_v, "%+.3f") << "\n";
    }
  }
  return out.str();
}

std::string grid_trace_csv(const GridResult& grid) {
  std::ostringstream out;
  out << "tau_gap,tau_occ,n_heads,set_index,n_correct,accuracy,mean_v,feasible\n";
  for (const auto& c : grid.trace) {
    out << fmt("%.3f,%.3f,%zu,%zu,%zu,%.17g,", c.thresholds.tau_gap, c.thresholds.tau_occ,
               c.n_heads, c.set_index, c.n_correct, c.accuracy)
        << (c.mean_v ? fmt("%.17g", *c.mean_v) : std::string()) << ","
        << (c.feasible ? 1 : 0) << "\n";
  }
  return out.str();
}

std::string class_table_csv(const GlobalBias& bias,
                            const std::vector<std::string>& class_names) {
  std::ostringstream out;
  out << "class,status,n,chi2,dof,dof_before_drop,p_value,p_adjusted,significant,"
         "cramers_v,top1,top1_rates,top2,top2_rates,top3,top3_rates\n";
  for (const auto& c : bias.classes) {
    out << class_names.at(c.true_class) << "," << status_name(c.status) << "," << c.n;
    if (c.tested()) {
      out << fmt(",%.17g,%zu,%zu,%.17g,%.17g,%d,%.17g", c.chi2, c.dof, c.dof_before_drop,
                 c.p_value, c.p_adjusted, c.significant ? 1 : 0, c.cramers_v);
    } else {
      out << ",,,,,,,";
    }
    const auto top = top_predictions(c.table, 3);
    for (std::size_t i = 0; i < 3; ++i) {
      if (i >= top.size()) {
        out << ",,";
        continue;
      }
      std::string rates;
      for (std::size_t g = 0; g < c.table.counts.rows; ++g) {
        const double total = static_cast<double>(c.table.row_total(g));
        const double rate = total > 0 ? 100.0 * c.table.counts(g, top[i]) / total : 0.0;
        rates += (g ? ";" : "") + c.table.group_names[g] + fmt("=%.2f", rate);
      }
      out << "," << class_names.at(top[i]) << "," << rates;
    }
    out << "\n";
  }
  return out.str();
}

std::string textspan_csv(const std::vector<TextSpanResult>& results) {
  std::ostringstream out;
  out << "head,rank,text,category,variance\n";
  for (const auto& r : results) {
    for (std::size_t i = 0; i < r.selected.size(); ++i) {
      const auto& s = r.selected[i];
      out << to_string(r.head) << "," << i + 1 << "," << s.name << ","
          << category_name(s.category) << fmt(",%.17g\n", s.variance);
    }
  }
  return out.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  f.close();
  if (!f) throw Error(Errc::kOutput, "cannot write " + path.string());
}

void write_report(const AuditReport& report, const std::filesystem::path& dir,
                  const ReportSections& sections) {
  detail::ensure_directory(dir);
  write_text_file(dir / "report.json", report_to_json(report, sections).dump(2) + "\n");
  write_text_file(dir / "report.txt", report_to_text(report, sections));
  write_text_file(dir / "grid_trace.csv", grid_trace_csv(report.grid));
  write_text_file(dir / "classes.csv",
                  class_table_csv(report.baseline, report.class_names));
  std::vector<TextSpanResult> ts;
  for (const auto& c : report.candidates) ts.push_back(c.textspan);
  write_text_file(dir / "textspan.csv", textspan_csv(ts));
}

}  // namespace headaudit
