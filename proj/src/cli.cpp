#include "headaudit/cli.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "headaudit/audit.hpp"
#include "headaudit/error.hpp"
#include "headaudit/report.hpp"
#include "headaudit/synth.hpp"

namespace headaudit {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

struct Options {
  std::string command;
  std::string store, prototypes, classifier, attribute, out, spec;
  std::string preset = "concentrated";
  std::uint64_t synth_seed = 0;
  std::size_t diffuse_heads = 32;
  std::vector<std::string> heads;
  std::vector<std::string> profile;
  std::optional<double> tau_gap, tau_occ;
  std::string gap_scope = "attribute";
  std::string sections = "all";
  AuditConfig audit;
  bool dry_run = false;
  bool quiet = false;
};

std::vector<HeadId> parse_heads(const std::vector<std::string>& items) {
  std::vector<HeadId> heads;
  for (const auto& s : items) {
    for (const auto& h : parse_head_list(s)) heads.push_back(h);
  }
  std::sort(heads.begin(), heads.end());
  heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
  return heads;
}

// "21:2" means two heads from layer 21.
std::map<std::uint32_t, std::size_t> parse_profile(const std::vector<std::string>& items) {
  std::map<std::uint32_t, std::size_t> profile;
  for (const auto& item : items) {
    const auto colon = item.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument(item);
      std::size_t used = 0;
      const auto layer = std::stoul(item.substr(0, colon), &used);
      if (used != colon) throw std::invalid_argument(item);
      const auto count = std::stoul(item.substr(colon + 1), &used);
      if (used != item.size() - colon - 1) throw std::invalid_argument(item);
      profile[static_cast<std::uint32_t>(layer)] += count;
    } catch (const std::logic_error&) {
      throw Error(Errc::kConfig, "bad profile entry '" + item + "', expected LAYER:COUNT");
    }
  }
  return profile;
}

GapScope parse_scope(const std::string& s) {
  if (s == "attribute") return GapScope::kAttribute;
  if (s == "all") return GapScope::kAllAttributes;
  throw Error(Errc::kConfig, "gap scope must be 'attribute' or 'all'");
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw Error(Errc::kConfig, std::string("missing ") + flag);
}

void write_json(const fs::path& path, const ordered_json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

ordered_json summary_json(const AblationSummary& s, const AuditReport& base) {
  ordered_json j;
  j["heads"] = ordered_json::array();
  for (const auto& h : s.heads) j["heads"].push_back(to_string(h));
  j["baseline_accuracy"] = base.baseline_accuracy;
  j["accuracy"] = s.accuracy;
  j["delta_accuracy"] = s.delta_accuracy;
  j["baseline_mean_v"] = base.baseline.mean_v ? ordered_json(*base.baseline.mean_v)
                                              : ordered_json(nullptr);
  j["mean_v"] = s.mean_v ? ordered_json(*s.mean_v) : ordered_json(nullptr);
  j["delta_v"] = s.delta_v ? ordered_json(*s.delta_v) : ordered_json(nullptr);
  j["classes"] = ordered_json::array();
  for (const auto& c : s.classes) {
    j["classes"].push_back(
        {{"class", base.class_names.at(c.true_class)},
         {"accuracy_before", c.accuracy_before},
         {"accuracy_after", c.accuracy_after},
         {"v_before", c.v_before ? ordered_json(*c.v_before) : ordered_json(nullptr)},
         {"v_after", c.v_after ? ordered_json(*c.v_after) : ordered_json(nullptr)}});
  }
  return j;
}

void print_plan(const Options& o, std::ostream& out) {
  out << "plan for '" << o.command << "' (dry run, nothing computed)\n";
  auto step = [&](const std::string& s) { out << "  - " << s << "\n"; };
  if (!o.store.empty()) step("load and validate store " + o.store);
  if (!o.prototypes.empty()) step("load prototypes " + o.prototypes);
  if (!o.classifier.empty()) step("load classifier " + o.classifier);
  const auto& c = o.audit;
  if (o.command == "validate") {
    step("check additivity against reference representations if present");
  } else if (o.command == "baseline") {
    step("classify; per-class chi-squared, BH at alpha " + std::to_string(c.stats.alpha) +
         ", Cramer's V for '" + o.attribute + "'");
  } else if (o.command == "rank") {
    step("alignment table for '" + o.attribute + "', gap scope " + o.gap_scope);
    if (o.tau_gap && o.tau_occ) {
      step("select candidates at the given thresholds");
    } else {
      step("grid search over " + std::to_string(c.grid.n_cells()) + " threshold cells");
    }
  } else if (o.command == "textspan") {
    step("TextSpan (k " + std::to_string(c.textspan.k) + ", rank " +
         std::to_string(c.textspan.rank) + ") on " + std::to_string(o.heads.size()) +
         " head arguments");
  } else if (o.command == "ablate") {
    step("mean-ablate the given heads and compare with baseline");
  } else if (o.command == "control") {
    step(std::to_string(c.control.n_seeds) + " layer-matched random ablations");
  } else if (o.command == "audit") {
    step("baseline, alignment, grid search over " + std::to_string(c.grid.n_cells()) +
         " cells, TextSpan on selected heads, suspected-set ablation, per-head "
         "ablations, random control with " + std::to_string(c.control.n_seeds) + " seeds");
  } else if (o.command == "synth") {
    step("generate synthetic store from " +
         (o.spec.empty() ? "preset " + o.preset : "spec " + o.spec));
  }
  if (!o.out.empty()) step("write outputs under " + o.out);
}

AuditReport baseline_report(const HeadContributionStore& store,
                            const ClassifierMatrix& classifier, const Options& o,
                            PredictionCache& cache) {
  AuditReport r;
  r.config = o.audit;
  r.model_tag = store.manifest().model_tag;
  r.n_images = store.n_images();
  r.class_names = store.manifest().class_names;
  const auto& base = cache.get({});
  r.baseline_correct = base.n_correct(store);
  r.baseline_accuracy = base.accuracy(store);
  r.baseline = global_bias(base.labels, store, o.attribute, o.audit.stats);
  (void)classifier;
  return r;
}

int dispatch(Options& o, std::ostream& out, std::ostream& err) {
  o.audit.attribute = o.attribute;
  o.audit.gap_scope = parse_scope(o.gap_scope);
  if (o.audit.workers == 0) o.audit.workers = default_workers();
  const ReportSections sections = ReportSections::parse(o.sections);
  if (o.command == "synth") {
    if (o.spec.empty() && o.preset != "concentrated" && o.preset != "diffuse") {
      throw Error(Errc::kConfig, "preset must be concentrated or diffuse");
    }
  } else {
    require(o.store, "--store");
  }
  if (o.dry_run) {
    print_plan(o, out);
    return 0;
  }
  const unsigned workers = o.audit.workers;

  if (o.command == "synth") {
    require(o.out, "--out");
    const SynthSpec spec = !o.spec.empty()          ? load_spec(o.spec)
                           : o.preset == "diffuse" ? diffuse_spec(o.synth_seed, o.diffuse_heads)
                                                   : concentrated_spec(o.synth_seed);
    const SynthOutput result = generate(spec, workers);
    save_synth(result, spec, o.out);
    out << "wrote synthetic store (" << spec.n_images << " images, "
        << spec.n_layers * spec.n_heads << " heads) to " << o.out << "\n"
        << "planted: " << join_heads(result.truth.planted) << "\n";
    return 0;
  }

  const HeadContributionStore store = load_store(o.store);

  if (o.command == "validate") {
    std::optional<PrototypeSet> protos;
    std::optional<ClassifierMatrix> clf;
    if (!o.prototypes.empty()) {
      protos = load_prototypes(o.prototypes);
      check_compatible(store, *protos);
    }
    if (!o.classifier.empty()) {
      clf = load_classifier(o.classifier);
      check_compatible(store, *clf);
    }
    const auto& m = store.manifest();
    out << "store ok: " << m.n_images << " images, " << m.n_layers << " layers x "
        << m.n_heads << " heads, d = " << m.embed_dim << ", " << m.n_classes()
        << " classes\n";
    for (const auto& a : m.attributes) {
      out << "  attribute " << a.name << ":";
      for (const auto& v : a.values) out << " " << v;
      out << "\n";
    }
    if (protos) out << "prototypes ok: " << protos->n_texts() << " dictionary texts\n";
    if (clf) out << "classifier ok\n";
    if (store.has_reference()) {
      const auto check = check_additivity(store, workers);
      out << "additivity: max relative error " << check.max_relative_error
          << " (image " << check.worst_image << ")\n";
      if (check.max_relative_error > 1e-3) {
        err << "error: additivity check failed: relative error "
            << check.max_relative_error << " exceeds 1e-3\n";
        return 1;
      }
    }
    return 0;
  }

  require(o.attribute, "--attribute");
  store.manifest().require_attribute(o.attribute);

  if (o.command == "textspan") {
    require(o.prototypes, "--prototypes");
    const PrototypeSet protos = load_prototypes(o.prototypes);
    const auto heads = parse_heads(o.heads);
    if (heads.empty()) throw Error(Errc::kConfig, "missing --heads");
    std::vector<TextSpanResult> results;
    for (const auto& h : heads) {
      results.push_back(textspan(store, h, protos, o.audit.textspan));
      const auto c = corroborate(results.back(), o.attribute);
      out << to_string(h) << (c.corroborated ? " corroborated" : " not corroborated");
      for (const auto& m : c.matched) out << " " << m;
      out << "\n";
    }
    const std::string csv = textspan_csv(results);
    if (o.out.empty()) {
      out << csv;
    } else {
      write_text_file(o.out, csv);
    }
    return 0;
  }

  if (o.command == "rank" && o.tau_gap && o.tau_occ) {
    require(o.prototypes, "--prototypes");
    const PrototypeSet protos = load_prototypes(o.prototypes);
    const ThresholdPair t{*o.tau_gap, *o.tau_occ};
    t.validate();
    const auto table =
        compute_alignment(store, protos, o.attribute, o.audit.gap_scope, workers);
    const auto c = select_candidates(table, t);
    out << "candidates (" << c.heads.size() << "): " << join_heads(c.heads) << "\n";
    return 0;
  }

  require(o.classifier, "--classifier");
  const ClassifierMatrix clf = load_classifier(o.classifier);
  check_compatible(store, clf);

  if (o.command == "audit") {
    require(o.prototypes, "--prototypes");
    const PrototypeSet protos = load_prototypes(o.prototypes);
    const AuditReport report = run_audit(store, protos, clf, o.audit);
    if (!o.out.empty()) write_report(report, o.out, sections);
    if (!o.quiet) out << report_to_text(report, sections);
    return 0;
  }

  const AblationEngine engine(store, clf, workers);
  PredictionCache cache(engine);
  const AuditReport base = baseline_report(store, clf, o, cache);

  if (o.command == "baseline") {
    ReportSections only;
    only.grid = only.candidates = only.suspected = only.attribution = only.control =
        only.cross = false;
    if (!o.out.empty()) {
      fs::create_directories(o.out);
      write_json(fs::path(o.out) / "baseline.json", report_to_json(base, only));
      write_text_file(fs::path(o.out) / "classes.csv",
                      class_table_csv(base.baseline, base.class_names));
    }
    if (!o.quiet) out << report_to_text(base, only);
    return 0;
  }

  if (o.command == "rank") {
    require(o.prototypes, "--prototypes");
    const PrototypeSet protos = load_prototypes(o.prototypes);
    const auto table =
        compute_alignment(store, protos, o.attribute, o.audit.gap_scope, workers);
    const GridResult grid =
        grid_search(engine, table, base.baseline, o.attribute, o.audit.grid, {o.audit.stats});
    AuditReport r = base;
    r.grid = grid;
    r.value_names = table.value_names;
    for (const auto& h : grid.selected.heads) {
      CandidateReport c;
      c.head = h;
      for (const auto& e : grid.selected.evidence) {
        if (e.head == h) c.evidence.push_back(e);
      }
      r.candidates.push_back(std::move(c));
    }
    ReportSections only;
    only.baseline = only.suspected = only.attribution = only.control = only.cross = false;
    if (!o.out.empty()) {
      fs::create_directories(o.out);
      auto j = report_to_json(r, only);
      for (auto& c : j["candidates"]) c.erase("textspan");
      write_json(fs::path(o.out) / "rank.json", j);
      write_text_file(fs::path(o.out) / "grid_trace.csv", grid_trace_csv(grid));
    }
    out << "grid: " << grid.trace.size() << " cells, "
        << (grid.feasible ? "feasible" : "no feasible threshold") << "\n";
    if (grid.feasible) {
      out << "best tau_gap = " << grid.best.tau_gap << ", tau_occ = " << grid.best.tau_occ
          << "\nselected (" << grid.selected.heads.size() << "): "
          << join_heads(grid.selected.heads) << "\n";
    }
    return 0;
  }

  if (o.command == "ablate") {
    const auto heads = parse_heads(o.heads);
    for (const auto& h : heads) check_head(store, h);
    const auto s = summarize_ablation(cache, heads, base.baseline, o.attribute, o.audit.stats);
    ordered_json j = summary_json(s, base);
    if (!heads.empty()) {
      j["attribution"] = ordered_json::array();
      for (auto k : base.baseline.significant_classes) {
        const auto a = per_head_attribution(cache, heads, k, o.attribute, o.audit.stats);
        ordered_json rows = ordered_json::array();
        for (const auto& row : a.rows) {
          rows.push_back({{"head", row.label}, {"v", row.v}, {"delta_v", row.delta_v}});
        }
        j["attribution"].push_back({{"class", base.class_names.at(k)},
                                    {"baseline_v", a.baseline_v},
                                    {"rows", rows},
                                    {"combined_v", a.combined.v},
                                    {"combined_delta_v", a.combined.delta_v}});
      }
    }
    if (o.out.empty()) {
      out << j.dump(2) << "\n";
    } else {
      write_json(o.out, j);
    }
    return 0;
  }

  if (o.command == "control") {
    const auto exclude = parse_heads(o.heads);
    for (const auto& h : exclude) check_head(store, h);
    auto profile = parse_profile(o.profile);
    if (profile.empty()) profile = layer_profile(exclude);
    if (profile.empty()) throw Error(Errc::kConfig, "control needs --profile or --heads");
    const auto c = random_control(cache, profile, o.audit.control, exclude, o.attribute,
                                  base.baseline.significant_classes, o.audit.stats);
    AuditReport r = base;
    r.control = c;
    r.suspected = AblationSummary{};
    ReportSections only;
    only.baseline = only.grid = only.candidates = only.suspected = only.attribution =
        only.cross = false;
    ordered_json j = report_to_json(r, only)["control"];
    if (o.out.empty()) {
      out << j.dump(2) << "\n";
    } else {
      write_json(o.out, j);
    }
    return 0;
  }
  throw Error(Errc::kConfig, "unknown subcommand " + o.command);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Attention-head bias audit over cached head contributions"};
  app.name("headaudit");
  app.set_config("--config", "", "TOML config; command-line flags take precedence");
  app.option_defaults()->always_capture_default();
  unsigned workers = default_workers();
  app.add_option("--workers", workers, "Worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber);
  app.add_flag("--dry-run", o.dry_run, "Print the execution plan and exit");
  app.require_subcommand(1, 1);
  // Global options may also follow the subcommand.
  app.fallthrough();

  auto& c = o.audit;
  auto add_store = [&](CLI::App* s) {
    s->add_option("--store", o.store, "Head-contribution store directory");
  };
  auto add_protos = [&](CLI::App* s) {
    s->add_option("--prototypes", o.prototypes, "Prototype container directory");
  };
  auto add_clf = [&](CLI::App* s) {
    s->add_option("--classifier", o.classifier, "Classifier container directory");
  };
  auto add_stats = [&](CLI::App* s) {
    s->add_option("--attribute", o.attribute, "Demographic attribute to audit");
    s->add_option("--alpha", c.stats.alpha, "FDR level for Benjamini-Hochberg");
    s->add_option("--min-group", c.stats.min_group_size, "Minimum images per group");
  };
  auto add_grid = [&](CLI::App* s) {
    s->add_option("--gap-min", c.grid.gap_min);
    s->add_option("--gap-max", c.grid.gap_max);
    s->add_option("--gap-step", c.grid.gap_step);
    s->add_option("--occ-min", c.grid.occ_min);
    s->add_option("--occ-max", c.grid.occ_max);
    s->add_option("--occ-step", c.grid.occ_step);
    s->add_option("--gap-scope", o.gap_scope, "attribute | all");
  };
  auto add_textspan = [&](CLI::App* s) {
    s->add_option("--k", c.textspan.k, "Texts selected per head");
    s->add_option("--rank", c.textspan.rank, "Low-rank approximation rank");
  };
  auto add_control = [&](CLI::App* s) {
    s->add_option("--seeds", c.control.n_seeds, "Random-control repetitions");
    s->add_option("--control-seed", c.control.seed, "Base seed of the random control");
  };
  auto add_out = [&](CLI::App* s, const char* what) { s->add_option("--out", o.out, what); };

  auto* validate = app.add_subcommand("validate", "Validate containers");
  add_store(validate);
  add_protos(validate);
  add_clf(validate);

  auto* baseline = app.add_subcommand("baseline", "Baseline accuracy and bias statistics");
  add_store(baseline);
  add_clf(baseline);
  add_stats(baseline);
  add_out(baseline, "Output directory");
  baseline->add_flag("--quiet", o.quiet, "Do not print tables");

  auto* rank = app.add_subcommand("rank", "Head alignment ranking and threshold search");
  add_store(rank);
  add_protos(rank);
  add_clf(rank);
  add_stats(rank);
  add_grid(rank);
  rank->add_option("--tau-gap", o.tau_gap, "Select at fixed thresholds instead of a grid");
  rank->add_option("--tau-occ", o.tau_occ);
  add_out(rank, "Output directory");

  auto* ts = app.add_subcommand("textspan", "TextSpan labels for heads");
  add_store(ts);
  add_protos(ts);
  ts->add_option("--attribute", o.attribute, "Attribute used for corroboration");
  ts->add_option("--heads", o.heads, "Heads such as L23H4");
  add_textspan(ts);
  add_out(ts, "CSV output file");

  auto* ablate = app.add_subcommand("ablate", "Mean-ablate a head set");
  add_store(ablate);
  add_clf(ablate);
  add_stats(ablate);
  ablate->add_option("--heads", o.heads, "Heads such as L23H4");
  add_out(ablate, "JSON output file");

  auto* control = app.add_subcommand("control", "Layer-matched random control");
  add_store(control);
  add_clf(control);
  add_stats(control);
  add_control(control);
  control->add_option("--profile", o.profile, "LAYER:COUNT entries");
  control->add_option("--heads", o.heads,
                      "Heads excluded from the draws; also the profile if none is given");
  add_out(control, "JSON output file");

  auto* audit = app.add_subcommand("audit", "Full pipeline and report");
  add_store(audit);
  add_protos(audit);
  add_clf(audit);
  add_stats(audit);
  add_grid(audit);
  add_textspan(audit);
  add_control(audit);
  add_out(audit, "Report directory");
  audit->add_option("--sections", o.sections,
                    "all, or a comma list of baseline,grid,candidates,suspected,"
                    "attribution,control,cross");
  audit->add_flag("--quiet", o.quiet, "Do not print the text report");

  auto* synth = app.add_subcommand("synth", "Generate a planted-bias synthetic store");
  synth->add_option("--spec", o.spec, "JSON synth spec");
  synth->add_option("--preset", o.preset, "concentrated | diffuse (without --spec)");
  synth->add_option("--seed", o.synth_seed, "Preset seed");
  synth->add_option("--diffuse-heads", o.diffuse_heads, "Heads for the diffuse preset");
  add_out(synth, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  o.command = app.get_subcommands().front()->get_name();
  c.workers = workers;

  try {
    return dispatch(o, out, err);
  } catch (const Error& e) {
    err << "error [" << errc_name(e.code()) << "]: " << e.what() << "\n";
    return e.is_input_error() ? 1 : 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace headaudit
